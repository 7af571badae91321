import logging
import os
import tempfile

import numpy as np

DEFAULT_SEED = 20200101
LOG_LEVEL_ENV = "LGP_LOG_LEVEL"


def setup_logging(level=None):
    """Configure the root logger; level falls back to $LGP_LOG_LEVEL, then INFO."""
    level = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def stream(seed, *indices):
    """Independent random stream for (seed, index, ...) so parallel and serial runs agree."""
    return np.random.default_rng([int(seed), *(int(i) for i in indices)])


def atomic_write_text(path, text):
    """Write text via a temp file in the target directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_frame(frame, path, **kwargs):
    atomic_write_text(path, frame.to_csv(**kwargs))
