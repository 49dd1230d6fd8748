"""Full linker parameters and their on-disk container.

The model file starts with a bare mention-encoder record (``BELAENC1``
header plus ``W_mix``) so :func:`entitylink.encoder.load_params` can read it
directly.  Tagged sections follow, each written as::

    u8 tag length | tag (ASCII) | u64 payload length | payload

Tags: ``ENTENC`` (entity encoder, same layout as the leading record),
``MDHEAD``, ``EDPOOL``, ``RHEAD`` and ``STAGES`` (comma-separated names of the
training stages the parameters went through).  All floats are little-endian
float32.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .disambiguation import EDParams
from .encoder import (
    EncoderConfig,
    EncoderParams,
    ParamsFormatError,
    _atomic_write,
    _read_exact,
    read_encoder,
    write_encoder,
)
from .mention import MDParams
from .rejection import DEFAULT_HIDDEN, RParams

__all__ = ["LinkerModel", "init_model", "save_model", "load_model", "params_digest", "round_to_float32"]


def round_to_float32(a):
    """Round to the nearest float32 value while keeping float64 storage, so
    that the float32 file format round-trips exactly."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class LinkerModel:
    mention_encoder: EncoderParams
    entity_encoder: EncoderParams
    md: MDParams
    ed: EDParams
    rejection: RParams
    stages: list = field(default_factory=list)

    def __post_init__(self):
        d = self.mention_encoder.config.dim
        for name, dim in (("entity encoder", self.entity_encoder.config.dim), ("MD head", self.md.dim),
                          ("ED pooling", self.ed.dim), ("rejection head", self.rejection.dim)):
            if dim != d:
                raise ValueError(f"{name} dimension {dim} does not match mention encoder dimension {d}")

    @property
    def dim(self) -> int:
        return self.mention_encoder.config.dim

    def copy(self) -> "LinkerModel":
        return LinkerModel(self.mention_encoder.copy(), self.entity_encoder.copy(), self.md.copy(),
                         self.ed.copy(), self.rejection.copy(), list(self.stages))

    def arrays(self) -> dict:
        """Trainable tensors by name (views, not copies)."""
        return {
            "mention_w_mix": self.mention_encoder.w_mix,
            "entity_w_mix": self.entity_encoder.w_mix,
            "w_start": self.md.w_start,
            "w_end": self.md.w_end,
            "w_inside": self.md.w_inside,
            "pool_weight": self.ed.pool_weight,
            "pool_bias": self.ed.pool_bias,
            "r_W1": self.rejection.W1,
            "r_b1": self.rejection.b1,
            "r_w2": self.rejection.w2,
        }

    def round_to_float32(self) -> None:
        for arr in self.arrays().values():
            arr[...] = round_to_float32(arr)
        self.rejection.b2 = float(np.float32(self.rejection.b2))


def init_model(config: EncoderConfig = EncoderConfig(), hidden: int = DEFAULT_HIDDEN, seed: int = 0,
               pool_scale: float = 1.0, md_scale: float = 0.1) -> LinkerModel:
    """Identity encoders and pooling, small random MD and rejection heads."""
    rng = np.random.default_rng(seed)
    d = config.dim
    md = MDParams(*(rng.standard_normal(d) * md_scale / np.sqrt(d) for _ in range(3)))
    model = LinkerModel(
        EncoderParams.identity(config),
        EncoderParams.identity(config),
        md,
        EDParams.identity(d, pool_scale),
        RParams.init(d, hidden, rng),
    )
    model.round_to_float32()
    return model


def params_digest(params) -> str:
    """SHA-256 over the float32 bytes of an :class:`EncoderParams` or model."""
    h = hashlib.sha256()
    if isinstance(params, EncoderParams):
        buf = io.BytesIO()
        write_encoder(buf, params)
        h.update(buf.getvalue())
    else:
        h.update(model_to_bytes(params))
    return h.hexdigest()


def _f32(a) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def _section(fh, tag: str, payload: bytes) -> None:
    raw = tag.encode("ascii")
    fh.write(struct.pack("<B", len(raw)) + raw + struct.pack("<Q", len(payload)))
    fh.write(payload)


def model_to_bytes(model: LinkerModel) -> bytes:
    buf = io.BytesIO()
    write_encoder(buf, model.mention_encoder)
    ent = io.BytesIO()
    write_encoder(ent, model.entity_encoder)
    _section(buf, "ENTENC", ent.getvalue())
    _section(buf, "MDHEAD", _f32(model.md.w_start) + _f32(model.md.w_end) + _f32(model.md.w_inside))
    _section(buf, "EDPOOL", _f32(model.ed.pool_weight) + _f32(model.ed.pool_bias))
    r = model.rejection
    _section(buf, "RHEAD", struct.pack("<II", r.hidden, r.W1.shape[1]) + _f32(r.W1) + _f32(r.b1) + _f32(r.w2)
             + _f32([r.b2]))
    _section(buf, "STAGES", ",".join(model.stages).encode("ascii"))
    return buf.getvalue()


def save_model(model: LinkerModel, path: os.PathLike) -> None:
    _atomic_write(path, model_to_bytes(model))


def _floats(payload: bytes, offset: int, count: int, tag: str) -> tuple[np.ndarray, int]:
    end = offset + 4 * count
    if end > len(payload):
        raise ParamsFormatError(f"section {tag}: payload too short")
    return np.frombuffer(payload[offset:end], dtype="<f4").astype(np.float64), end


def model_from_bytes(data: bytes, expected: Optional[EncoderConfig] = None) -> LinkerModel:
    fh = io.BytesIO(data)
    mention = read_encoder(fh, expected)
    d = mention.config.dim
    sections = {}
    while True:
        head = fh.read(1)
        if not head:
            break
        tag = _read_exact(fh, head[0], "section tag").decode("ascii", errors="replace")
        (size,) = struct.unpack("<Q", _read_exact(fh, 8, f"section {tag} length"))
        sections[tag] = _read_exact(fh, size, f"section {tag}")
    for tag in ("ENTENC", "MDHEAD", "EDPOOL", "RHEAD"):
        if tag not in sections:
            raise ParamsFormatError(f"missing section {tag}")
    entity = read_encoder(io.BytesIO(sections["ENTENC"]), mention.config)
    md_raw, _ = _floats(sections["MDHEAD"], 0, 3 * d, "MDHEAD")
    md = MDParams(*md_raw.reshape(3, d))
    pw, off = _floats(sections["EDPOOL"], 0, d * d, "EDPOOL")
    pb, _ = _floats(sections["EDPOOL"], off, d, "EDPOOL")
    ed = EDParams(pw.reshape(d, d), pb)
    rsec = sections["RHEAD"]
    if len(rsec) < 8:
        raise ParamsFormatError("section RHEAD: payload too short")
    hidden, width = struct.unpack("<II", rsec[:8])
    if width != 2 + 4 * d:
        raise ParamsFormatError(f"RHEAD input width {width} does not match dim {d}")
    W1, off = _floats(rsec, 8, hidden * width, "RHEAD")
    b1, off = _floats(rsec, off, hidden, "RHEAD")
    w2, off = _floats(rsec, off, hidden, "RHEAD")
    b2, _ = _floats(rsec, off, 1, "RHEAD")
    rej = RParams(W1.reshape(hidden, width), b1, w2, b2[0])
    stages = [s for s in sections.get("STAGES", b"").decode("ascii").split(",") if s]
    return LinkerModel(mention, entity, md, ed, rej, stages)


def load_model(path: os.PathLike, expected: Optional[EncoderConfig] = None) -> LinkerModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), expected)
