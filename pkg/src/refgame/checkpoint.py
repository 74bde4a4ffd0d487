"""Parameter checkpoint container.

Byte layout (documented contract, see README):
  * line 1: UTF-8 JSON header terminated by a single ``\\n``, with keys
      ``format``    -- literally ``"refgame-checkpoint"``
      ``version``   -- integer layout version (currently 1)
      ``meta``      -- free-form dict of hyperparameters and seeds
      ``params``    -- ordered list of ``{"name": str, "shape": [int, ...]}``
  * then, for each entry of ``params`` in order, the array data as raw
    little-endian float64 in row-major order, with no padding between arrays.

Round-trips are lossless: float64 bits are stored verbatim.
"""

from __future__ import annotations

import json

import numpy as np

FORMAT_NAME = "refgame-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, named_params: dict[str, np.ndarray], meta: dict) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta,
        "params": [
            {"name": name, "shape": list(arr.shape)} for name, arr in named_params.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in named_params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated data for {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after declared parameters")
    return params, header["meta"]
