"""Binary checkpoints for variational networks.

Layout (little-endian)::

    magic  b"VCTACKPT"
    u32    format version
    u32    class_count
    u32    layer count
    per layer:
        u32 in_dim, u32 out_dim, u8 activation (0 relu, 1 identity)
        f64[in*out] w_mu, f64[in*out] w_rho, f64[out] b_mu, f64[out] b_rho

Provenance (seed, config hash) goes to a JSON sidecar ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .bnn import GaussianParams, VariationalLayer, VariationalNet
from .numcore import ShapeError

MAGIC = b"VCTACKPT"
FORMAT_VERSION = 1
_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class CheckpointError(ValueError):
    pass


def to_bytes(net: VariationalNet) -> bytes:
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, net.class_count, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_CODES[layer.activation]))
        for arr in (layer.weight.mu, layer.weight.rho, layer.bias.mu, layer.bias.rho):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes, architecture=None) -> VariationalNet:
    """Parse a checkpoint. ``architecture`` is an optional list of
    (in_dim, out_dim, activation) the stored net must match."""
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or header)")
    pos = len(MAGIC)
    version, class_count, n_layers = struct.unpack_from("<III", blob, pos)
    pos += 12
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if architecture is not None and len(architecture) != n_layers:
        raise ShapeError(f"checkpoint has {n_layers} layers, expected {len(architecture)}")
    layers = []
    for i in range(n_layers):
        if pos + 9 > len(blob):
            raise CheckpointError(f"truncated checkpoint in layer {i} header")
        a, b, code = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        if code not in _ACT_NAMES:
            raise CheckpointError(f"layer {i}: unknown activation code {code}")
        act = _ACT_NAMES[code]
        if architecture is not None and tuple(architecture[i]) != (a, b, act):
            raise ShapeError(f"layer {i}: checkpoint has {(a, b, act)}, expected {tuple(architecture[i])}")
        arrays = []
        for shape in ((a, b), (a, b), (1, b), (1, b)):
            nbytes = 8 * shape[0] * shape[1]
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated checkpoint in layer {i} data")
            arrays.append(np.frombuffer(blob, dtype="<f8", count=shape[0] * shape[1], offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += nbytes
        layers.append(VariationalLayer(GaussianParams(arrays[0], arrays[1]),
                                       GaussianParams(arrays[2], arrays[3]), act))
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last layer")
    try:
        return VariationalNet(layers, class_count)
    except ShapeError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None


def save_checkpoint(net: VariationalNet, path, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(net))
    meta = {"format_version": FORMAT_VERSION, "architecture": [list(a) for a in net.architecture],
            "class_count": net.class_count, **(provenance or {})}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, architecture=None) -> VariationalNet:
    return from_bytes(Path(path).read_bytes(), architecture)
