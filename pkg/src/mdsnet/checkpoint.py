"""Checkpoint files: a text manifest plus one little-endian raw blob.

The manifest lists every array (parameters, batch-norm buffers, then the
SGD momentum state) with its shape, dtype and byte range inside the blob::

    mdsnet-checkpoint 1
    kind stack-unet
    blob unet.bin
    config {"k": 7, ...}
    entry param enc0.conv0.weight f8 16,7,3,3 0 8064
    ...
    entry momentum enc0.conv0.weight f8 16,7,3,3 ...
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "mdsnet-checkpoint"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4"}


class CheckpointError(ValueError):
    pass


def _code(arr):
    if arr.dtype == np.float64:
        return "f8"
    if arr.dtype == np.float32:
        return "f4"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def _entries(model):
    for p in model.parameters():
        yield "param", p.name, p.data
    for name, buf in model.buffers():
        yield "buffer", name, buf
    for p in model.parameters():
        yield "momentum", p.name, p.momentum


def save_checkpoint(model, path, kind, config=None):
    """Write ``<path>.manifest`` and ``<path>.bin``; return the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}", f"kind {kind}", f"blob {blob_path.name}"]
    if config is not None:
        lines.append("config " + json.dumps(config, sort_keys=True))
    offset = 0
    chunks = []
    for section, name, arr in _entries(model):
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"entry {section} {name} {code} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob_path.write_bytes(b"".join(chunks))
    manifest = path.with_suffix(".manifest")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    path = Path(path).with_suffix(".manifest")
    lines = path.read_text().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if int(head[1]) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {head[1]}")
    info = {"kind": None, "blob": None, "config": None, "entries": []}
    for line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "kind":
            info["kind"] = rest
        elif tag == "blob":
            info["blob"] = path.parent / rest
        elif tag == "config":
            info["config"] = json.loads(rest)
        elif tag == "entry":
            section, name, code, shape, off, nbytes = rest.split()
            shape = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            info["entries"].append((section, name, code, shape, int(off), int(nbytes)))
        elif line.strip():
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")
    return info


def read_arrays(path):
    """Return ``(info, {(section, name): array})``."""
    info = read_manifest(path)
    blob = info["blob"].read_bytes()
    arrays = {}
    for section, name, code, shape, off, nbytes in info["entries"]:
        dt = np.dtype(_DTYPES[code])
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        arrays[(section, name)] = arr.reshape(shape).astype(dt.newbyteorder("="))
    return info, arrays


def load_into(model, path, kind=None):
    """Copy checkpoint contents into an already-built model of matching geometry."""
    info, arrays = read_arrays(path)
    if kind is not None and info["kind"] != kind:
        raise CheckpointError(f"checkpoint kind {info['kind']!r} != expected {kind!r}")
    for section, name, target in _entries(model):
        key = (section, name)
        if key not in arrays:
            raise CheckpointError(f"missing {section} entry {name}")
        src = arrays[key]
        if src.shape != target.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
        target[...] = src
    return info
