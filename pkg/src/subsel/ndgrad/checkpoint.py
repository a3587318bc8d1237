"""Versioned text container for named float64 arrays plus scalar metadata.

Layout::

    #ndgrad-checkpoint v1
    meta<TAB>name<TAB><json value>
    param<TAB>name<TAB>d0,d1,...
    <row-major values, %.17g, space separated>

Seventeen significant digits make the round trip bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = "#ndgrad-checkpoint v1"


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    lines = [MAGIC]
    for key, val in (meta or {}).items():
        lines.append(f"meta\t{key}\t{json.dumps(val, sort_keys=True)}")
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"param\t{name}\t{shape}")
        lines.append(" ".join(f"{x:.17g}" for x in arr.reshape(-1)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or lines[0].strip() != MAGIC:
        raise ParseError(path, 1, f"not an ndgrad checkpoint (expected {MAGIC!r})")
    params: dict[str, np.ndarray] = {}
    meta: dict = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line:
            i += 1
            continue
        kind, _, rest = line.partition("\t")
        if kind == "meta":
            key, _, raw = rest.partition("\t")
            meta[key] = json.loads(raw)
            i += 1
        elif kind == "param":
            name, _, shape_txt = rest.partition("\t")
            shape = tuple(int(d) for d in shape_txt.split(",") if d)
            body = lines[i + 1] if i + 1 < len(lines) else ""
            values = np.array([float(x) for x in body.split()], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ParseError(path, i + 2, f"{name}: expected {int(np.prod(shape))} values, got {values.size}")
            params[name] = values.reshape(shape)
            i += 2
        else:
            raise ParseError(path, i + 1, f"unknown record type {kind!r}")
    return params, meta
