"""Training loop: weighted sampling, Adam with decoupled weight decay, cosine
schedule and best-validation-AUROC checkpointing."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import MetricError, auroc
from .model import Model, ModelCheckpoint, ModelConfig, build_model, predict_seizure_prob

log = logging.getLogger(__name__)

MAX_EPOCH_DRAWS = 150_000


class NumericalError(RuntimeError):
    """Non-finite gradients or a diverging loss."""


@dataclass
class TrainConfig:
    lr0: float = 0.004
    weight_decay: float = 0.1
    dropout: float = 0.1
    pos_bias: float = 25.0
    epoch_cap: int = MAX_EPOCH_DRAWS
    n_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    # "binary", "multilabel", or "subset:<attr>,<attr>,..."
    label_mode: str = "binary"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # a loss above this multiple of the first-batch loss counts as divergence
    divergence_factor: float = 50.0
    # start head biases at the label log-prior seen through the weighted sampler
    prior_bias_init: bool = True

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.pos_bias < 1:
            raise ValueError("pos_bias must be >= 1")
        if self.batch_size < 1 or self.epoch_cap < self.batch_size:
            raise ValueError("need 1 <= batch_size <= epoch_cap")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        parse_label_mode(self.label_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def epoch_draws(self) -> int:
        return min(self.epoch_cap, MAX_EPOCH_DRAWS)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.epoch_draws / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.n_epochs * self.steps_per_epoch


def parse_label_mode(mode: str):
    """Returns ``("binary", None)``, ``("multilabel", None)`` or ``("subset", [names])``."""
    if mode in ("binary", "multilabel"):
        return mode, None
    if mode.startswith("subset:") or mode.startswith("subset="):
        names = [n.strip() for n in mode[7:].split(",") if n.strip()]
        if not names:
            raise ValueError("attribute subset is empty")
        return "subset", names
    raise ValueError(f"unknown label mode {mode!r}")


def label_columns(mode: str, attribute_names: Sequence[str], seizure: str = "seizure") -> List[int]:
    """Attribute columns a model is trained on, seizure first."""
    kind, names = parse_label_mode(mode)
    if kind == "binary":
        return [list(attribute_names).index(seizure)]
    if kind == "multilabel":
        names = list(attribute_names)
    missing = [n for n in names if n not in attribute_names]
    if missing:
        raise ValueError(f"unknown attributes in subset: {missing}")
    names = [seizure] + [n for n in names if n != seizure]
    return [list(attribute_names).index(n) for n in names]


def model_config_for(base: ModelConfig, mode: str, attribute_names: Sequence[str]) -> ModelConfig:
    kind, _ = parse_label_mode(mode)
    if kind == "binary":
        return replace(base, n_classes=2, head_mode="softmax_binary")
    k = len(label_columns(mode, attribute_names))
    return replace(base, n_classes=k, head_mode="multilabel_sigmoid", seizure_index=0)


# ---------------------------------------------------------------------------
# Pieces of the loop
# ---------------------------------------------------------------------------

def weighted_sample(positive, pos_bias: float, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with replacement; positives weigh ``pos_bias``, negatives 1."""
    positive = np.asarray(positive, dtype=bool)
    if positive.size == 0:
        raise ValueError("cannot sample from an empty split")
    w = np.where(positive, float(pos_bias), 1.0)
    return rng.choice(positive.size, size=int(n_draws), replace=True, p=w / w.sum())


def expected_positive_fraction(prevalence: float, pos_bias: float) -> float:
    return pos_bias * prevalence / (pos_bias * prevalence + (1.0 - prevalence))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self):
        return {"step": self.step, "m": self.m, "v": self.v}


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, decay: Optional[Callable[[str], bool]] = None) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient in {bad[:5]} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and (decay is None or decay(name)):
            p -= (lr * weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def decays(name: str) -> bool:
    """Weight decay applies to dense weight matrices only."""
    return name.endswith(".weight")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    x_train: np.ndarray  # (N, L, C) normalized
    labels_train: np.ndarray  # (N, n_attributes) weak labels
    x_val: np.ndarray
    gold_val: np.ndarray  # (N_val,) seizure gold labels
    attribute_names: List[str]
    manifest_digest: str = ""

    def targets(self, mode: str, idx) -> np.ndarray:
        cols = label_columns(mode, self.attribute_names)
        y = self.labels_train[idx][:, cols]
        return y[:, 0].astype(np.int64) if parse_label_mode(mode)[0] == "binary" else y

    def seizure_positive(self) -> np.ndarray:
        return self.labels_train[:, self.attribute_names.index("seizure")] > 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    val_auroc: float
    best_val_auroc: float
    n_samples: int


@dataclass
class TrainResult:
    checkpoint: Optional[ModelCheckpoint]
    log: List[EpochLog]
    status: str = "ok"  # ok | diverged
    message: str = ""

    @property
    def best_val_auroc(self) -> float:
        vals = [r.val_auroc for r in self.log if np.isfinite(r.val_auroc)]
        return max(vals) if vals else float("nan")


def _val_auroc(model: Model, x, gold) -> float:
    try:
        return auroc(predict_seizure_prob(model, x), gold)
    except MetricError:
        return float("nan")


def sampled_label_prior(targets: np.ndarray, positive, pos_bias: float) -> np.ndarray:
    """Per-column positive rate under the seizure-biased sampler."""
    w = np.where(np.asarray(positive, bool), float(pos_bias), 1.0)
    y = np.asarray(targets, dtype=np.float64).reshape(len(w), -1)
    return (w @ y) / w.sum()


def init_head_bias(model: Model, data: TrainData, cfg: TrainConfig, floor: float = 1e-4) -> None:
    positive = data.seizure_positive()
    y = data.targets(cfg.label_mode, np.arange(len(positive)))
    p = np.clip(sampled_label_prior(y, positive, cfg.pos_bias), floor, 1 - floor)
    bias = model.params["head.bias"].data
    if model.cfg.head_mode == "softmax_binary":
        bias[:] = 0.0
        bias[1] = math.log(p[0] / (1 - p[0]))
    else:
        bias[:] = np.log(p / (1 - p))


def train(model: Model, data: TrainData, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Run ``cfg.n_epochs`` epochs; keep the checkpoint with the best validation AUROC."""
    cfg.validate()
    positive = data.seizure_positive()
    if not positive.any() or positive.all():
        log.warning("training split has a single seizure class; weighted sampling degenerates")
    if cfg.prior_bias_init:
        init_head_bias(model, data, cfg)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    params = {k: t.data for k, t in model.params.items()}
    state = AdamState()
    total = cfg.total_steps
    step = 0
    best: Optional[ModelCheckpoint] = None
    best_auc = -math.inf
    first_loss = None
    logs: List[EpochLog] = []
    for epoch in range(1, cfg.n_epochs + 1):
        idx = weighted_sample(positive, cfg.pos_bias, cfg.epoch_draws, sample_rng)
        losses = []
        lr = cosine_lr(step, total, cfg.lr0)
        for b in range(0, len(idx), cfg.batch_size):
            bi = idx[b:b + cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr0)
            model.zero_grad()
            logits = model.forward(data.x_train[bi], train=True, rng=dropout_rng)
            loss = model.loss(logits, data.targets(cfg.label_mode, bi))
            value = loss.item()
            if first_loss is None:
                first_loss = max(value, 1e-3)
            if not math.isfinite(value) or value > cfg.divergence_factor * first_loss:
                msg = f"loss diverged ({value:.4g}) at epoch {epoch}, step {step}"
                log.error(msg)
                return TrainResult(best, logs, "diverged", msg)
            ad.backward(loss)
            try:
                adam_step(params, {k: t.grad for k, t in model.params.items()}, state, lr,
                          cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, decays)
            except NumericalError as exc:
                log.error("%s", exc)
                return TrainResult(best, logs, "diverged", str(exc))
            losses.append(value)
            step += 1
        val = _val_auroc(model, data.x_val, data.gold_val)
        if best is None or (math.isfinite(val) and val > best_auc):
            best_auc = val if math.isfinite(val) else best_auc
            best = ModelCheckpoint.from_model(
                model, {"step": state.step, "m": {k: v.copy() for k, v in state.m.items()},
                        "v": {k: v.copy() for k, v in state.v.items()}},
                epoch=epoch, val_auroc=val, manifest_digest=data.manifest_digest,
                train_config=asdict(cfg))
        row = EpochLog(epoch, float(np.mean(losses)), lr, val,
                       best_auc if math.isfinite(best_auc) else float("nan"), len(idx))
        logs.append(row)
        log.info("epoch %d loss %.4f lr %.2e val_auroc %.4f", epoch, row.loss, lr, val)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(best, logs)


def write_metric_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr", "val_auroc", "best_val_auroc", "n_samples"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), repr(r.lr), repr(r.val_auroc), repr(r.best_val_auroc),
                        r.n_samples])


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass
class GridRow:
    index: int
    lr0: float
    weight_decay: float
    dropout: float
    status: str
    best_val_auroc: float


def grid_search(base: TrainConfig, grid: Dict[str, Sequence[float]],
                run: Callable[[TrainConfig], TrainResult]):
    """Train once per grid point; returns ``(best_config, rows, results)``.

    Ties in validation AUROC go to the lower initial learning rate, then the
    earlier grid index.
    """
    keys = ("lr0", "weight_decay", "dropout")
    unknown = set(grid) - set(keys)
    if unknown:
        raise ValueError(f"grid keys must be among {keys}, got {sorted(unknown)}")
    axes = [list(grid.get(k, [getattr(base, k)])) for k in keys]
    if any(len(a) == 0 for a in axes):
        raise ValueError("grid axes must be non-empty")
    rows, results = [], []
    for i, (lr0, wd, dp) in enumerate(itertools.product(*axes)):
        cfg = replace(base, lr0=lr0, weight_decay=wd, dropout=dp)
        try:
            res = run(cfg)
            status = res.status
        except NumericalError as exc:
            res, status = TrainResult(None, [], "diverged", str(exc)), "diverged"
        results.append(res)
        auc = res.best_val_auroc if status == "ok" else float("nan")
        rows.append(GridRow(i, lr0, wd, dp, "ok" if status == "ok" else "failed", auc))
    ok = [r for r in rows if r.status == "ok" and np.isfinite(r.best_val_auroc)]
    if not ok:
        return None, rows, results
    winner = sorted(ok, key=lambda r: (-r.best_val_auroc, r.lr0, r.index))[0]
    return replace(base, lr0=winner.lr0, weight_decay=winner.weight_decay, dropout=winner.dropout), rows, results


def write_grid_table(path, rows: Sequence[GridRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "lr0", "weight_decay", "dropout", "status", "best_val_auroc"])
        for r in rows:
            w.writerow([r.index, r.lr0, r.weight_decay, r.dropout, r.status, repr(r.best_val_auroc)])


def train_from_scratch(model_cfg: ModelConfig, data: TrainData, cfg: TrainConfig, **kw) -> TrainResult:
    """Build a fresh model (seeded by ``cfg.seed``, dropout from ``cfg``) and train it."""
    mcfg = replace(model_config_for(model_cfg, cfg.label_mode, data.attribute_names), dropout=cfg.dropout)
    return train(build_model(mcfg, cfg.seed), data, cfg, **kw)
