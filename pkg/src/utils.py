import hashlib
import json
import logging
import os
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path

import git
import numpy as np

# Constants
LOG_FILE = "nbeats_s.log"
APP_LOGGER = "NBeatsS"


def setup_logging(log_file=LOG_FILE, level=logging.INFO):
    """Configures application-wide logging with rotation and UTF-8 support."""
    log_handler = RotatingFileHandler(
        log_file,
        maxBytes=5 * 1024 * 1024,  # 5 MB
        backupCount=1,
        encoding="utf-8",
    )

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[log_handler],
    )
    return logging.getLogger(APP_LOGGER)


def json_serial(obj):
    """JSON serializer for the non-builtin types that end up in manifests and reports."""
    if isinstance(obj, datetime):
        return obj.isoformat()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"Type {type(obj)} not serializable")


def save_data_to_file(data, output_path):
    """
    Writes `data` as indented JSON, creating parent directories.
    Returns False (and logs) instead of raising so batch jobs can carry on.
    """
    try:
        parent = os.path.dirname(output_path)
        if parent:
            os.makedirs(parent, exist_ok=True)

        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(data, f, default=json_serial, indent=4, sort_keys=True)
        return True
    except Exception as e:
        logging.getLogger(__name__).error(f"Failed to save data: {e}", exc_info=True)
        return False


def content_hash(path):
    """Git-style blob hash (sha1 over 'blob <size>\\0' + bytes) of a file."""
    payload = Path(path).read_bytes()
    digest = hashlib.sha1()
    digest.update(f"blob {len(payload)}\0".encode("ascii"))
    digest.update(payload)
    return digest.hexdigest()


def get_code_revision(path="."):
    """
    Returns the HEAD commit of the repository containing `path`, flagged dirty
    when the working tree has uncommitted changes. None outside a git checkout.
    """
    try:
        repo = git.Repo(path, search_parent_directories=True)
        revision = repo.head.commit.hexsha
        if repo.is_dirty(untracked_files=False):
            revision += "-dirty"
        return revision
    except (git.exc.InvalidGitRepositoryError, git.exc.NoSuchPathError):
        logging.getLogger(__name__).info(f"No git checkout at {path}; code revision not recorded.")
        return None
    except Exception as e:
        logging.getLogger(__name__).warning(f"Could not read code revision: {e}")
        return None
