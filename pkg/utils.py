import hashlib
import json
import logging
import os
from pathlib import Path

# Directories used by the pipeline
REQUIRED_DIRS = [
    os.getenv("HTEPOLICY_OUTPUT_DIR", "artifacts"),
    os.getenv("HTEPOLICY_LOG_DIR", "debug_logs"),
]

LOG_FILE_NAME = "hte_policy.log"


class _TagFormatter(logging.Formatter):
    """Render records as '[module.py] message'."""

    def format(self, record):
        tag = f"[{record.module}.py]"
        message = super().format(record)
        if record.levelno >= logging.WARNING:
            return f"{tag} {record.levelname}: {message}"
        return f"{tag} {message}"


def ensure_directories(dirs=None):
    """Create the artifact and log directories; returns the ones that were missing.

    Unwritable locations are skipped, logging then falls back to the stream handler.
    """
    created = []
    for d in dirs if dirs is not None else REQUIRED_DIRS:
        path = Path(d)
        if path.is_dir():
            continue
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError:
            continue
        created.append(str(path))
    return created


def configure_logging(level=None, log_dir=None):
    """Configure the package root logger once: a tagged stream handler plus a log file.

    Repeated calls only adjust the level.
    """
    root = logging.getLogger()
    level = level or os.getenv("HTEPOLICY_LOG_LEVEL", "INFO")
    root.setLevel(level.upper() if isinstance(level, str) else level)
    if getattr(root, "_htepolicy_configured", False):
        return root

    stream = logging.StreamHandler()
    stream.setFormatter(_TagFormatter("%(message)s"))
    root.addHandler(stream)

    log_dir = log_dir or os.getenv("HTEPOLICY_LOG_DIR", "debug_logs")
    ensure_directories([log_dir])
    try:
        handler = logging.FileHandler(Path(log_dir) / LOG_FILE_NAME, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(module)s.py] %(message)s"))
        root.addHandler(handler)
    except OSError:
        pass
    root._htepolicy_configured = True
    return root


def progress_enabled(logger):
    return logger.isEnabledFor(logging.DEBUG)


def sanitize_filename_component(s: str) -> str:
    """Sanitize a short filename component (no path separators).

    Keeps only ASCII letters, digits, dash and underscore. Collapses whitespace to underscore.
    """
    if not s:
        return ""
    s = str(s).strip().replace(" ", "_")
    return ''.join(ch for ch in s if (ch.isascii() and ch.isalnum()) or ch in '_-')


def config_hash(config) -> str:
    """SHA-256 of the sorted-key JSON of a run's resolved arguments."""
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def default_threads() -> int:
    try:
        return max(1, int(os.getenv("HTEPOLICY_THREADS", "1")))
    except ValueError:
        return 1


if __name__ == "__main__":
    configure_logging()
    logging.getLogger(__name__).info("created %s, threads=%d", ensure_directories() or "nothing", default_threads())
