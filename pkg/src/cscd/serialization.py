"""Bit-exact model and threshold files.

Model container layout, all little-endian:

    magic "CSCD" | version u16 | spec_len u32 | spec JSON (UTF-8, canonical)
    | per tensor: rank u8, dims u32 each, float32 payload | CRC32 u32

Tensors appear in the model's canonical order (component, trunk before
classifier, layer, tensor name alphabetical); names are implied by the spec
and never stored. Threshold files are plain text, one line per component:
a round-trip float or the literal DISABLED, last line 0.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import nn
from .cascade import (CascadeModel, CascadeSpec, ComponentSpec, DISABLED,
                      SpecValidationError, ThresholdVector, build_cascade)

MAGIC = b"CSCD"
VERSION = 1


class PersistenceError(Exception):
    """Base class for model/threshold file failures."""


class BadModelMagic(PersistenceError):
    pass


class ModelVersionError(PersistenceError):
    pass


class ModelCrcError(PersistenceError):
    pass


class ModelFormatError(PersistenceError):
    """Unparseable or inconsistent embedded architecture description."""


class ModelAlignmentError(PersistenceError):
    """Tensor stream does not match the architecture the file declares."""


class ModelTruncatedError(PersistenceError):
    pass


class ThresholdFormatError(PersistenceError):
    pass


# ---------------------------------------------------------------------------
# Architecture text codec
# ---------------------------------------------------------------------------

_LAYER_TYPES = {cls.__name__: cls for cls in (
    nn.Conv2D, nn.BatchNorm, nn.ReLU, nn.ResidualBlock, nn.ResidualBlockDown,
    nn.GlobalAvgPool, nn.FullyConnected)}


def _layers_to_obj(layers) -> list:
    return [[type(spec).__name__, asdict(spec)] for spec in layers]


def _layers_from_obj(obj) -> Tuple:
    out = []
    for entry in obj:
        try:
            name, kwargs = entry
            out.append(_LAYER_TYPES[name](**kwargs))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"bad layer entry {entry!r}: {e}") from None
    return tuple(out)


def spec_to_json(spec: CascadeSpec) -> str:
    obj = {
        "n_c": spec.n_c,
        "input_shape": list(spec.input_shape),
        "blocks_per_module": spec.blocks_per_module,
        "components": [{"conv_layers": _layers_to_obj(c.conv_layers),
                        "classifier_layers": _layers_to_obj(c.classifier_layers)}
                       for c in spec.components],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_from_json(text: str) -> CascadeSpec:
    try:
        obj = json.loads(text)
        components = tuple(
            ComponentSpec(_layers_from_obj(c["conv_layers"]),
                          _layers_from_obj(c["classifier_layers"]))
            for c in obj["components"])
        spec = CascadeSpec(n_c=int(obj["n_c"]),
                           input_shape=tuple(int(d) for d in obj["input_shape"]),
                           components=components,
                           blocks_per_module=int(obj.get("blocks_per_module", 0)))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"bad architecture text: {e}") from None
    try:
        spec.validate()
    except SpecValidationError as e:
        raise ModelFormatError(f"embedded architecture is inconsistent: {e}") from None
    return spec


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

def model_bytes(model: CascadeModel) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    spec_blob = spec_to_json(model.spec).encode("utf-8")
    parts.append(struct.pack("<I", len(spec_blob)))
    parts.append(spec_blob)
    for _, arr in model.named_tensors():
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_model(model: CascadeModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def load_model(path) -> CascadeModel:
    """Parse, CRC-check and reconstruct a model container.

    The rebuilt model is bit-identical to the saved one: every parameter and
    running statistic is restored from the payload.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 2 + 4 + 4:
        raise ModelTruncatedError(f"{path}: {len(raw)} bytes is no model container")
    if raw[:4] != MAGIC:
        raise BadModelMagic(f"{path}: magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise ModelVersionError(
            f"{path}: format version {version}, supported {VERSION}; "
            f"no silent migration")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ModelCrcError(f"{path}: CRC32 {actual_crc:#010x} != stored "
                            f"{stored_crc:#010x}")
    (spec_len,) = struct.unpack("<I", raw[6:10])
    spec_end = 10 + spec_len
    if spec_end > len(raw) - 4:
        raise ModelTruncatedError(f"{path}: spec block of {spec_len} bytes "
                                  f"overruns the file")
    try:
        spec_text = raw[10:spec_end].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ModelFormatError(f"{path}: spec block is not UTF-8: {e}") from None
    spec = spec_from_json(spec_text)
    model = build_cascade(spec, seed=0)
    pos = spec_end
    end = len(raw) - 4
    for name, dst in model.named_tensors():
        if pos + 1 > end:
            raise ModelTruncatedError(f"{path}: file ends before tensor {name}")
        rank = raw[pos]
        pos += 1
        if rank != dst.ndim:
            raise ModelAlignmentError(
                f"{path}: tensor {name} has rank {rank}, architecture "
                f"requires {dst.ndim}")
        if pos + 4 * rank > end:
            raise ModelTruncatedError(f"{path}: file ends inside dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw[pos:pos + 4 * rank])
        pos += 4 * rank
        if dims != dst.shape:
            raise ModelAlignmentError(
                f"{path}: tensor {name} has shape {dims}, architecture "
                f"requires {dst.shape}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > end:
            raise ModelTruncatedError(
                f"{path}: tensor {name} needs {nbytes} data bytes, "
                f"{end - pos} remain")
        dst[...] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(dims)
        pos += nbytes
    if pos != end:
        raise ModelAlignmentError(f"{path}: {end - pos} unexpected trailing "
                                  f"bytes after the last tensor")
    return model


# ---------------------------------------------------------------------------
# Threshold files
# ---------------------------------------------------------------------------

def format_thresholds(vec: ThresholdVector) -> str:
    return "".join(("DISABLED" if v == DISABLED else repr(float(v))) + "\n"
                   for v in vec.values)


def parse_thresholds(text: str, n_m: Optional[int] = None) -> ThresholdVector:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise ThresholdFormatError("threshold file is empty")
    values: List[float] = []
    for i, line in enumerate(lines):
        if line == "DISABLED":
            values.append(DISABLED)
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ThresholdFormatError(
                f"line {i + 1}: {line!r} is neither a float nor DISABLED") from None
    if n_m is not None and len(values) != n_m:
        raise ThresholdFormatError(
            f"{len(values)} threshold lines for {n_m} components")
    try:
        return ThresholdVector(tuple(values))
    except ValueError as e:
        raise ThresholdFormatError(str(e)) from None


def save_thresholds(vec: ThresholdVector, path) -> None:
    Path(path).write_text(format_thresholds(vec), encoding="utf-8")


def load_thresholds(path, n_m: Optional[int] = None) -> ThresholdVector:
    return parse_thresholds(Path(path).read_text(encoding="utf-8"), n_m)
