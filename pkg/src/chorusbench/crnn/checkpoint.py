"""Binary checkpoint container for trained parameters.

Layout (all integers little-endian):

    bytes 0..7    magic b"CBCRNN01"
    bytes 8..11   uint32 header length H
    bytes 12..12+H UTF-8 JSON header: {"config": {...}, "seed": int,
                  "species": [str, ...] | null,
                  "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    then          one row-major little-endian float32 blob per tensor,
                  in header order

Normalization statistics are stored as the tensors "norm/mean" and
"norm/std". Loading a saved file and saving it again reproduces the same
bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import CrnnConfig, CrnnParams, tensor_shapes

MAGIC = b"CBCRNN01"


def save_checkpoint(params: CrnnParams, path) -> None:
    named = dict(params.tensors)
    named["norm/mean"] = params.norm_mean
    named["norm/std"] = params.norm_std
    order = sorted(named)
    header = {
        "config": params.config.to_dict(),
        "seed": params.seed,
        "species": list(params.species_codes) if params.species_codes else None,
        "tensors": [{"name": n, "shape": list(named[n].shape)} for n in order],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for name in order:
            fh.write(np.ascontiguousarray(named[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> CrnnParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    config = CrnnConfig.from_dict(header["config"])

    offset = 12 + header_len
    named: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        named[entry["name"]] = data.reshape(shape).astype(np.float32)

    norm_mean = named.pop("norm/mean")
    norm_std = named.pop("norm/std")
    expected = tensor_shapes(config)
    if set(named) != set(expected):
        raise ValueError(f"{path}: tensor set does not match config")
    species = header.get("species")
    return CrnnParams(config=config, tensors=named, norm_mean=norm_mean,
                      norm_std=norm_std, seed=header["seed"],
                      species_codes=tuple(species) if species else None)
