"""Locating MovieLens files on disk.

``fetch_movielens_100k`` materialises ML-100K's ``u.data`` from the copy that
ships inside the RecBole wheel on PyPI (``dataset_example/ml-100k``), for
environments that reach a package index but not grouplens.org.
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

log = logging.getLogger(__name__)

ML100K_ENV = "CALI3F_ML100K"
DEFAULT_DATA_DIR = Path("data")
RECBOLE_PIN = "recbole==1.2.1"
RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def _inter_to_udata(text: str) -> str:
    lines = text.splitlines()
    if lines and lines[0].startswith("user_id"):
        lines = lines[1:]
    return "\n".join(lines) + "\n"


def fetch_movielens_100k(data_dir=DEFAULT_DATA_DIR) -> Path:
    """Return a path to ML-100K ``u.data``, downloading it when missing.

    Honours ``$CALI3F_ML100K`` if set.
    """
    env = os.environ.get(ML100K_ENV)
    if env:
        return Path(env)
    target = Path(data_dir) / "ml-100k" / "u.data"
    if target.exists():
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        log.info("downloading %s to extract ML-100K", RECBOLE_PIN)
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet", "-d", tmp, RECBOLE_PIN],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = zf.read(RECBOLE_MEMBER).decode("utf-8")
    tmp_target = target.with_suffix(".part")
    tmp_target.write_text(_inter_to_udata(text), encoding="utf-8")
    tmp_target.replace(target)
    return target
