"""Checkpoint directories: a text manifest plus one raw little-endian float64 blob per tensor.

Manifest lines are ``key = value``::

    format = desk-embed-checkpoint
    version = 1
    config.hidden_dim = 128
    tensor.layers.0.attn.wqkv.shape = 128,384
    tensor.layers.0.attn.wqkv.file = layers.0.attn.wqkv.f64
    tensor.layers.0.attn.wqkv.offset = 0
    tensor.layers.0.attn.wqkv.nbytes = 393216
    tensor.layers.0.attn.wqkv.sha256 = ...
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..encoder import Encoder, EncoderConfig, param_shapes

FORMAT = "desk-embed-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _fmt(value) -> str:
    return json.dumps(value)


def save_checkpoint(path, encoder: Encoder, meta: dict | None = None) -> Path:
    """Write ``encoder`` to directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {FORMAT}", f"version = {VERSION}"]
    for k, v in encoder.config.to_dict().items():
        lines.append(f"config.{k} = {_fmt(v)}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} = {_fmt(v)}")
    for name in sorted(encoder.weights):
        arr = np.ascontiguousarray(encoder.weights[name].data, dtype=_DTYPE)
        raw = arr.tobytes()
        fname = f"{name}.f64"
        with open(path / fname, "wb") as fh:
            fh.write(raw)
        lines += [
            f"tensor.{name}.shape = {','.join(str(n) for n in arr.shape)}",
            f"tensor.{name}.file = {fname}",
            f"tensor.{name}.offset = 0",
            f"tensor.{name}.nbytes = {len(raw)}",
            f"tensor.{name}.sha256 = {hashlib.sha256(raw).hexdigest()}",
        ]
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path) -> dict[str, str]:
    manifest = Path(path) / MANIFEST
    if not manifest.exists():
        raise CheckpointError(f"no manifest at {manifest}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{manifest}:{lineno}: malformed line")
        entries[key.strip()] = value.strip()
    return entries


def load_checkpoint(path) -> tuple[Encoder, dict]:
    """Load an encoder and its metadata; any inconsistency raises :class:`CheckpointError`."""
    path = Path(path)
    entries = read_manifest(path)
    if entries.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {entries.get('format')!r}")
    if entries.get("version") != str(VERSION):
        raise CheckpointError(f"checkpoint version {entries.get('version')!r} != supported {VERSION}")
    config = EncoderConfig.from_dict(
        {k[len("config."):]: json.loads(v) for k, v in entries.items() if k.startswith("config.")}
    )
    meta = {k[len("meta."):]: json.loads(v) for k, v in entries.items() if k.startswith("meta.")}
    names = sorted({k[len("tensor."):].rsplit(".", 1)[0] for k in entries if k.startswith("tensor.")})
    expected = param_shapes(config)
    if set(names) != set(expected):
        raise CheckpointError(f"tensor set mismatch: missing {sorted(set(expected) - set(names))}, "
                              f"unexpected {sorted(set(names) - set(expected))}")
    weights: dict[str, Tensor] = {}
    for name in names:
        field = lambda f: entries[f"tensor.{name}.{f}"]  # noqa: E731
        shape = tuple(int(x) for x in field("shape").split(",") if x)
        nbytes, offset = int(field("nbytes")), int(field("offset"))
        if shape != expected[name]:
            raise CheckpointError(f"tensor '{name}': manifest shape {shape} does not match config shape {expected[name]}")
        if int(np.prod(shape)) * _DTYPE.itemsize != nbytes:
            raise CheckpointError(f"tensor '{name}': shape {shape} disagrees with {nbytes} bytes")
        blob = path / field("file")
        if not blob.exists():
            raise CheckpointError(f"tensor '{name}': missing blob {blob.name}")
        raw = blob.read_bytes()
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"tensor '{name}': blob truncated ({len(raw)} bytes, need {offset + nbytes})")
        if len(raw) > offset + nbytes:
            raise CheckpointError(f"tensor '{name}': blob has {len(raw) - offset - nbytes} unexpected trailing bytes")
        raw = raw[offset:offset + nbytes]
        if hashlib.sha256(raw).hexdigest() != field("sha256"):
            raise CheckpointError(f"tensor '{name}': checksum mismatch")
        arr = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
        weights[name] = Tensor(arr, requires_grad=True, name=name)
    return Encoder(config, weights), meta
