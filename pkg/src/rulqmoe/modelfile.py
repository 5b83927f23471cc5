"""Binary model container.

Layout::

    b"RULQMOE\\0"            8 bytes magic
    header length            uint32, little-endian
    header                   UTF-8 JSON (sorted keys)
    parameter blocks         float64 little-endian, in header["blocks"] order
    SHA-256                  32 bytes over everything above

Parameters are stored as raw IEEE doubles, so a round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dataio import CHEMISTRIES, SCHEMA_VERSION, FeatureScaler
from .expert import ExpertParams, QuantileLevels
from .gating import GatingParams
from .moe import MoEModel
from .numcore import LinearParams, NormParams

MAGIC = b"RULQMOE\x00"
FORMAT_VERSION = 1
_DIGEST = 32


class ModelFileError(Exception):
    """Base class for unreadable model files."""


class TruncatedModelError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class FormatVersionError(ModelFileError):
    pass


class ExpertOrderError(ModelFileError):
    pass


class SchemaVersionError(ModelFileError):
    pass


def _blocks(m: MoEModel):
    for i, e in enumerate(m.experts):
        for name, arr in e.arrays():
            yield f"expert{i}.{name}", arr
        yield f"expert{i}.out_shift", np.array(e.out_shift)
        yield f"expert{i}.out_scale", np.array(e.out_scale)
    for name, arr in m.gate.arrays():
        yield f"gate.{name}", arr
    yield "scaler.mean", m.scaler.mean
    yield "scaler.std", m.scaler.std


def _header(m: MoEModel, blocks) -> dict:
    e0 = m.experts[0]
    return {
        "format_version": FORMAT_VERSION,
        "K": len(m.levels),
        "levels": list(m.levels),
        "expert_count": len(m.experts),
        "expert_order": list(m.expert_order),
        "input_dim": m.input_dim,
        "hidden_dim": e0.hidden_dim,
        "gate_hidden": list(m.gate.hidden_dims),
        "negative_slope": m.gate.negative_slope,
        "dropout_rate": e0.dropout_rate,
        "norm_epsilon": e0.norm1.epsilon,
        "schema_version": m.schema_version,
        "curve_cycle": m.curve_cycle,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }


def dumps(m: MoEModel, header_overrides: dict | None = None) -> bytes:
    blocks = list(_blocks(m))
    header = _header(m, blocks)
    if header_overrides:
        header.update(header_overrides)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
        + [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks]
    )
    return body + hashlib.sha256(body).digest()


def save_model(m: MoEModel, path) -> None:
    """Write atomically (temp file + rename)."""
    data = dumps(m)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _expected_length(data: bytes) -> int | None:
    try:
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        n_values = sum(int(np.prod(b["shape"])) for b in header["blocks"])
        return 12 + hlen + 8 * n_values + _DIGEST
    except Exception:  # noqa: BLE001
        return None


def loads(data: bytes) -> MoEModel:
    if len(data) < len(MAGIC) + 4 + _DIGEST:
        raise TruncatedModelError(f"model file too short ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFileError("not a rulqmoe model file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    if 12 + hlen + _DIGEST > len(data):
        raise TruncatedModelError("model file ends inside its header")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        expected = _expected_length(data)
        if expected is not None and len(data) < expected:
            raise TruncatedModelError(f"model file has {len(data)} bytes, header declares {expected}")
        raise ChecksumError("model file checksum mismatch")
    header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"model format version {header.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    if tuple(header["expert_order"]) != CHEMISTRIES:
        raise ExpertOrderError(
            f"expert order {header['expert_order']} does not match schema order {list(CHEMISTRIES)}"
        )
    if header["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"model feature schema {header['schema_version']!r} != supported {SCHEMA_VERSION!r}"
        )

    arrays = {}
    offset = 12 + hlen
    for b in header["blocks"]:
        shape = tuple(b["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(body):
            raise TruncatedModelError(f"block {b['name']} runs past the end of the file")
        arrays[b["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(body):
        raise ModelFileError("trailing bytes after the parameter blocks")
    return _assemble(header, arrays)


def _lin(arrays, prefix):
    return LinearParams(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"])


def _norm(arrays, prefix, eps):
    return NormParams(arrays[f"{prefix}.gamma"], arrays[f"{prefix}.beta"], eps)


def _assemble(header: dict, arrays: dict) -> MoEModel:
    eps = header["norm_epsilon"]
    experts = []
    for i in range(header["expert_count"]):
        p = f"expert{i}"
        experts.append(
            ExpertParams(
                proj=_lin(arrays, f"{p}.proj"),
                norm1=_norm(arrays, f"{p}.norm1", eps),
                fc1=_lin(arrays, f"{p}.fc1"),
                norm2=_norm(arrays, f"{p}.norm2", eps),
                fc2=_lin(arrays, f"{p}.fc2"),
                gap=_lin(arrays, f"{p}.gap"),
                base=_lin(arrays, f"{p}.base"),
                dropout_rate=header["dropout_rate"],
                out_shift=float(arrays[f"{p}.out_shift"]),
                out_scale=float(arrays[f"{p}.out_scale"]),
            )
        )
    gate = GatingParams([_lin(arrays, f"gate.layer{j}") for j in range(4)], header["negative_slope"])
    return MoEModel(
        experts,
        gate,
        QuantileLevels(header["levels"]),
        FeatureScaler(arrays["scaler.mean"], arrays["scaler.std"]),
        tuple(header["expert_order"]),
        header["schema_version"],
        header["curve_cycle"],
    )


def load_model(path) -> MoEModel:
    return loads(Path(path).read_bytes())
