"""Named float64 weight files (see :mod:`mstpde.container` for the layout)."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from ..container import read_container, write_container

WEIGHTS_MAGIC = b"MSTW"
WEIGHTS_VERSION = 1


def save_weights(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    header = {"format": "mstpde-weights", "meta": meta or {}}
    write_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION, header, sorted(arrays.items()))


def load_weights(path) -> Tuple[Dict[str, np.ndarray], dict]:
    header, arrays = read_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION)
    return arrays, header.get("meta", {})
