"""Stacked state-space sequence classifier.

Layout (``H`` = n_filters)::

    clip [batch, L, channels]
      -> per-timestep linear encoder (channels -> H)
      -> n_layers x { H diagonal SSM filters over time -> GELU
                      -> linear mix across filters -> dropout -> + residual }
      -> per-timestep linear head (H -> n_classes) -> mean over time

The binary head is a 2-way softmax; the multilabel head treats each output
as an independent sigmoid.  Parameters are seeded per name, so a binary and
a multilabel model built from the same seed differ only in their heads.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import STABILITY_MARGIN, init_raw_params, kernel_bank, ssm_conv

HEAD_MODES = ("softmax_binary", "multilabel_sigmoid")
SSM_FIELDS = ("mag_logit", "phase", "b_re", "b_im", "c_re", "c_im")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_filters: int = 128
    state_dim: int = 64
    n_classes: int = 2
    dropout: float = 0.1
    input_channels: int = 19
    clip_len: int = 12_000
    head_mode: str = "softmax_binary"
    # which output column is the seizure attribute (multilabel only)
    seizure_index: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "n_filters", "state_dim", "input_channels", "clip_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.head_mode == "softmax_binary" and self.n_classes != 2:
            raise ConfigError("softmax_binary head needs n_classes == 2")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")
        if self.head_mode == "multilabel_sigmoid" and not 0 <= self.seizure_index < self.n_classes:
            raise ConfigError(f"seizure_index {self.seizure_index} outside [0, {self.n_classes})")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Names and shapes of every parameter, derived from the config alone."""
    H, d = cfg.n_filters, cfg.state_dim
    shapes = {"encoder.weight": (cfg.input_channels, H), "encoder.bias": (H,)}
    for i in range(cfg.n_layers):
        for f in SSM_FIELDS:
            shapes[f"layers.{i}.ssm.{f}"] = (H, d)
        shapes[f"layers.{i}.ssm.D"] = (H,)
        shapes[f"layers.{i}.mix.weight"] = (H, H)
        shapes[f"layers.{i}.mix.bias"] = (H,)
    shapes["head.weight"] = (H, cfg.n_classes)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _init_parameters(cfg: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    H, d = cfg.n_filters, cfg.state_dim
    out: Dict[str, np.ndarray] = {}
    for name, fan_in in (("encoder", cfg.input_channels), ("head", H)):
        fan_out = H if name == "encoder" else cfg.n_classes
        rng = _name_rng(seed, f"{name}.weight")
        out[f"{name}.weight"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        out[f"{name}.bias"] = np.zeros(fan_out)
    for i in range(cfg.n_layers):
        rng = _name_rng(seed, f"layers.{i}.ssm")
        cols = {f: np.empty((H, d)) for f in SSM_FIELDS}
        D = np.empty(H)
        for h in range(H):
            raw = init_raw_params(d, rng)
            cols["mag_logit"][h] = raw.mag_logit
            cols["phase"][h] = raw.phase
            cols["b_re"][h], cols["b_im"][h] = raw.B.real, raw.B.imag
            cols["c_re"][h], cols["c_im"][h] = raw.C.real, raw.C.imag
            D[h] = raw.D
        for f in SSM_FIELDS:
            out[f"layers.{i}.ssm.{f}"] = cols[f]
        out[f"layers.{i}.ssm.D"] = D
        rng = _name_rng(seed, f"layers.{i}.mix.weight")
        out[f"layers.{i}.mix.weight"] = rng.standard_normal((H, H)) / np.sqrt(H)
        out[f"layers.{i}.mix.bias"] = np.zeros(H)
    return out


class Model:
    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray]):
        cfg.validate()
        expected = parameter_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing}, extra {extra})")
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, config implies {shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    # -- forward -------------------------------------------------------
    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.clip_len or x.shape[2] != cfg.input_channels:
            raise ad.ShapeError(
                f"expected input [batch, {cfg.clip_len}, {cfg.input_channels}], got {x.shape}")
        if not np.isfinite(x.data).all():
            raise ValueError("input contains NaN or Inf")
        return x

    def trunk(self, batch, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Sequence features of the last layer, ``[batch, L, H]``."""
        x = self._check_input(batch)
        p, cfg = self.params, self.cfg
        h = x @ p["encoder.weight"] + p["encoder.bias"]
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            F = kernel_bank(*(p[f"{pre}.ssm.{f}"] for f in SSM_FIELDS), cfg.clip_len,
                            margin=STABILITY_MARGIN)
            z = ssm_conv(F, p[f"{pre}.ssm.D"], h)
            z = ad.gelu(z)
            z = z @ p[f"{pre}.mix.weight"] + p[f"{pre}.mix.bias"]
            z = ad.dropout(z, cfg.dropout, train, rng)
            h = h + z
        return h

    def forward(self, batch, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.trunk(batch, train, rng)
        per_step = h @ self.params["head.weight"] + self.params["head.bias"]
        return ad.mean_pool_time(per_step)

    __call__ = forward

    def loss(self, logits: Tensor, targets) -> Tensor:
        if self.cfg.head_mode == "softmax_binary":
            return ad.softmax_cross_entropy(logits, targets)
        return ad.binary_cross_entropy_multilabel(logits, targets)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    cfg.validate()
    dtype = ad.get_dtype()
    params = {k: v.astype(dtype) for k, v in _init_parameters(cfg, seed).items()}
    return Model(cfg, params)


def seizure_prob_from_logits(logits: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if cfg.head_mode == "softmax_binary":
        return np.exp(ad.log_softmax(z))[:, 1]
    return 1.0 / (1.0 + np.exp(-z[:, cfg.seizure_index]))


def predict_seizure_prob(m: Model, batch, batch_size: int = 64) -> np.ndarray:
    """Seizure probability per clip (eval mode)."""
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    out = [seizure_prob_from_logits(m.forward(batch[i:i + batch_size]).data, m.cfg)
           for i in range(0, len(batch), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def export_embeddings(m: Model, batch, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled last-layer features, one ``n_filters`` row per clip."""
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    rows = [m.trunk(batch[i:i + batch_size]).data.mean(axis=1)
            for i in range(0, len(batch), batch_size)]
    return np.concatenate(rows) if rows else np.empty((0, m.cfg.n_filters))


def write_embeddings_csv(path, refs, embeddings: np.ndarray) -> None:
    embeddings = np.asarray(embeddings)
    with open(path, "w") as fh:
        fh.write("clip_ref," + ",".join(f"f{i}" for i in range(embeddings.shape[1])) + "\n")
        for ref, row in zip(refs, embeddings):
            fh.write(ref + "," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SZDCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: Dict[str, np.ndarray]
    training_state: dict = field(default_factory=dict)  # {"step": int, "m": {...}, "v": {...}}
    metadata: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        dtype = ad.get_dtype()
        return Model(self.config, {k: v.astype(dtype, copy=False) for k, v in self.parameters.items()})

    @classmethod
    def from_model(cls, model: Model, training_state: Optional[dict] = None, **metadata) -> "ModelCheckpoint":
        return cls(model.cfg, model.state_dict(), training_state or {}, dict(metadata))


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    blobs, index, offset = [], [], 0

    def add(group, name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"group": group, "name": name, "shape": list(np.shape(arr)),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for name, arr in ckpt.parameters.items():
        add("param", name, arr)
    ts = ckpt.training_state or {}
    for group in ("m", "v"):
        for name, arr in ts.get(group, {}).items():
            add(f"adam_{group}", name, arr)
    header = {
        "format": "szdetect-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "metadata": {**ckpt.metadata, "format_version": CHECKPOINT_VERSION},
        "training_step": int(ts.get("step", 0)),
        "blobs": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, head_len = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    base = 16 + head_len
    cfg = ModelConfig.from_dict(header["config"])
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["blobs"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated blob {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    expected = parameter_shapes(cfg)
    if {k: tuple(v.shape) for k, v in groups["param"].items()} != expected:
        raise CheckpointError(f"{path}: parameter table does not match the stored config")
    ts = {}
    if groups["adam_m"]:
        ts = {"step": header.get("training_step", 0), "m": groups["adam_m"], "v": groups["adam_v"]}
    return ModelCheckpoint(cfg, groups["param"], ts, header.get("metadata", {}))
