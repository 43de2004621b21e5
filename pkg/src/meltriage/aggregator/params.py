"""Parameter storage, initialization, and checkpoint files.

All weights live in a single flat vector. A layout table maps tensor names
to (shape, offset) in definition order; the same order fixes the tensor
sequence in checkpoint files. Keeping parameters flat makes the optimizer,
gradient accumulation, and finite-difference checking one-dimensional
problems.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, ValidationError
from .config import AggregatorConfig

CHECKPOINT_MAGIC = b"AGGR"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-6


class ParamLayout:
    """Names, shapes, and flat offsets of every parameter tensor."""

    def __init__(self, config: AggregatorConfig):
        F, D = config.feature_dim, config.model_dim
        H, C = config.hidden_dim, config.n_classes
        entries: list[tuple[str, tuple[int, ...]]] = [
            ("embed.weight", (F, D)),
            ("embed.bias", (D,)),
            ("cls_token", (D,)),
        ]
        for l in range(config.n_layers):
            p = f"layers.{l}."
            entries += [
                (p + "norm1.gain", (D,)),
                (p + "norm1.bias", (D,)),
                (p + "attn.q.weight", (D, D)),
                (p + "attn.q.bias", (D,)),
                (p + "attn.k.weight", (D, D)),
                (p + "attn.k.bias", (D,)),
                (p + "attn.v.weight", (D, D)),
                (p + "attn.v.bias", (D,)),
                (p + "attn.out.weight", (D, D)),
                (p + "attn.out.bias", (D,)),
                (p + "norm2.gain", (D,)),
                (p + "norm2.bias", (D,)),
                (p + "mlp.fc1.weight", (D, H)),
                (p + "mlp.fc1.bias", (H,)),
                (p + "mlp.fc2.weight", (H, D)),
                (p + "mlp.fc2.bias", (D,)),
            ]
        entries += [
            ("norm.gain", (D,)),
            ("norm.bias", (D,)),
            ("head.weight", (D, C)),
            ("head.bias", (C,)),
        ]
        self.config = config
        self.names = [name for name, _ in entries]
        self.shapes = dict(entries)
        self.offsets: dict[str, int] = {}
        cursor = 0
        for name, shape in entries:
            self.offsets[name] = cursor
            cursor += int(np.prod(shape))
        self.size = cursor

    def view(self, vec: np.ndarray, name: str) -> np.ndarray:
        """Writable view of one tensor inside the flat vector."""
        shape = self.shapes[name]
        start = self.offsets[name]
        return vec[start : start + int(np.prod(shape))].reshape(shape)

    def offsets_array(self) -> np.ndarray:
        """Per-tensor start offsets plus an end sentinel, for the kernels."""
        out = np.empty(len(self.names) + 1, dtype=np.int64)
        for i, name in enumerate(self.names):
            out[i] = self.offsets[name]
        out[-1] = self.size
        return out


def _truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], sigma: float
) -> np.ndarray:
    """Normal(0, sigma) with draws beyond 2 sigma rejected and redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * sigma


def init_params(
    config: AggregatorConfig, seed, dtype=np.float32
) -> np.ndarray:
    """Fresh parameter vector: truncated-normal weights scaled by
    1/sqrt(fan_in), unit normalization gains, zero biases, and a zero
    classifier head (so an untrained model outputs probability 0.5)."""
    layout = ParamLayout(config)
    rng = np.random.default_rng(seed)
    vec = np.zeros(layout.size, dtype=np.float64)
    fan_in = {
        "embed.weight": config.feature_dim,
        "cls_token": config.model_dim,
        "attn.q.weight": config.model_dim,
        "attn.k.weight": config.model_dim,
        "attn.v.weight": config.model_dim,
        "attn.out.weight": config.model_dim,
        "mlp.fc1.weight": config.model_dim,
        "mlp.fc2.weight": config.hidden_dim,
    }
    for name in layout.names:
        tail = name.split(".", 2)[-1] if name.startswith("layers.") else name
        view = layout.view(vec, name)
        if name.endswith(".gain"):
            view[...] = 1.0
        elif tail in fan_in:
            sigma = 1.0 / np.sqrt(fan_in[tail])
            view[...] = _truncated_normal(rng, view.shape, sigma)
        # everything else (biases, classifier head) stays zero
    return vec.astype(dtype)


def save_checkpoint(
    path: str | Path,
    params: np.ndarray,
    config: AggregatorConfig,
    metadata: dict | None = None,
) -> None:
    """Binary checkpoint: magic, version, a JSON blob (config + metadata),
    then every tensor in definition order as
    {u16 name_len, name, u8 rank, u32 dims..., float32 data}."""
    layout = ParamLayout(config)
    if params.shape != (layout.size,):
        raise ValidationError(
            f"parameter vector has {params.size} entries, layout needs {layout.size}"
        )
    if not np.isfinite(params).all():
        raise ValidationError("refusing to checkpoint non-finite parameters")
    blob = json.dumps(
        {"config": config.to_dict(), "metadata": metadata or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        vec32 = params.astype("<f4")
        for name in layout.names:
            encoded = name.encode("utf-8")
            shape = layout.shapes[name]
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(layout.view(vec32, name).tobytes())


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, AggregatorConfig, dict]:
    path = Path(path)
    raw = path.read_bytes()
    head = struct.Struct("<4sHI")
    if len(raw) < head.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, blob_len = head.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    cursor = head.size
    if len(raw) < cursor + blob_len:
        raise FormatError(f"{path}: truncated config blob")
    try:
        blob = json.loads(raw[cursor : cursor + blob_len].decode("utf-8"))
        config = AggregatorConfig.from_dict(blob["config"])
        metadata = blob.get("metadata", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad config blob ({exc})") from exc
    cursor += blob_len
    layout = ParamLayout(config)
    vec = np.empty(layout.size, dtype=np.float32)
    for name in layout.names:
        if len(raw) < cursor + 2:
            raise FormatError(f"{path}: truncated at tensor {name}")
        (name_len,) = struct.unpack_from("<H", raw, cursor)
        cursor += 2
        stored = raw[cursor : cursor + name_len].decode("utf-8")
        cursor += name_len
        if stored != name:
            raise FormatError(f"{path}: expected tensor {name}, found {stored}")
        (rank,) = struct.unpack_from("<B", raw, cursor)
        cursor += 1
        shape = struct.unpack_from(f"<{rank}I", raw, cursor)
        cursor += 4 * rank
        if shape != layout.shapes[name]:
            raise FormatError(
                f"{path}: tensor {name} has shape {shape}, "
                f"layout needs {layout.shapes[name]}"
            )
        count = int(np.prod(shape))
        end = cursor + 4 * count
        if len(raw) < end:
            raise FormatError(f"{path}: truncated data for tensor {name}")
        layout.view(vec, name)[...] = np.frombuffer(
            raw, dtype="<f4", count=count, offset=cursor
        ).reshape(shape)
        cursor = end
    if cursor != len(raw):
        raise FormatError(f"{path}: {len(raw) - cursor} trailing bytes")
    if not np.isfinite(vec).all():
        raise ValidationError(f"{path}: non-finite parameters")
    return vec, config, metadata
