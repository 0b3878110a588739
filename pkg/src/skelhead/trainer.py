"""Training loop, evaluation, feature export and ablation grids."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, backbone_forward, paper_config, tiny_config
from .checkpoint import save_checkpoint
from .data import class_groups
from .losses import LossBreakdown, LossConfig, cross_entropy, feature_consistency_loss, feature_redundancy_loss, total_loss
from .sfhead import Ablation, SFHead, SFHeadConfig, sfhead_forward
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "Trainer",
    "TrainingDivergedError",
    "lr_at",
    "sgd_step",
    "evaluate",
    "export_features",
    "profile",
    "SUBMODULE_GRID",
    "DIMENSION_GRID",
    "grid_ablations",
]


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.1
    final_lr: float = 0.0001
    warmup_epochs: float = 5
    momentum: float = 0.9
    weight_decay: float = 0.0004
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    test_fraction: float = 0.25

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_json(self) -> dict:
        out = asdict(self)
        out["ablation"] = self.ablation.to_json()
        return out


def profile(name: str, num_classes: int, V: int) -> tuple[BackboneConfig, TrainConfig, SFHeadConfig]:
    """Named defaults: ``tiny`` for desk-scale runs, ``paper`` for the full-width recipe."""
    if name == "tiny":
        return tiny_config(num_classes, V), TrainConfig(epochs=30, batch_size=32), SFHeadConfig(g=1, attach_blocks=(2, 3, 4))
    if name == "paper":
        return paper_config(num_classes, V), TrainConfig(epochs=90, batch_size=64), SFHeadConfig(g=2, attach_blocks=(4, 6, 8))
    raise ValueError(f"unknown profile {name!r}")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine annealing from base_lr to final_lr."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1 + math.cos(math.pi * progress))


def sgd_step(
    params: Sequence[Tensor],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: g = grad + wd*p; v = momentum*v + g; p -= lr*v."""
    for p, v in zip(params, velocity):
        if p.grad is None or p.grad.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch in SGD step for tensor of shape {p.shape}")
        g = p.grad + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[float]
    confusion: list[list[int]]
    class_names: list[str]
    groups: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(**obj)

    def summary(self) -> str:
        lines = [f"accuracy {self.accuracy:.2f}%"]
        for name, acc in zip(self.class_names, self.per_class):
            lines.append(f"  {name:<24s} {acc:6.2f}%")
        for gid, row in self.groups.items():
            delta = row.get("delta")
            extra = "" if delta is None else f" (delta {delta:+.2f})"
            lines.append(f"  group {gid:<18s} {row['accuracy']:6.2f}%{extra}")
        return "\n".join(lines)


def _report(pred: np.ndarray, labels: np.ndarray, class_names: list[str], baseline: MetricsReport | None) -> MetricsReport:
    z = len(class_names)
    conf = np.zeros((z, z), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    counts = conf.sum(axis=1)
    per_class = [100.0 * conf[i, i] / counts[i] if counts[i] else 0.0 for i in range(z)]
    acc = 100.0 * float(np.trace(conf)) / max(len(labels), 1)
    groups = {}
    for gid, members in class_groups(class_names).items():
        row = {"classes": members, "accuracy": float(np.mean([per_class[i] for i in members]))}
        if baseline is not None:
            row["delta"] = float(np.mean([per_class[i] - baseline.per_class[i] for i in members]))
        groups[gid] = row
    return MetricsReport(acc, per_class, conf.tolist(), list(class_names), groups)


def predict(model: Backbone, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode argmax on the inference path (backbone only)."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            logits, _ = backbone_forward(Tensor(x[i : i + batch_size]), model, train=False)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(
    model: Backbone,
    x: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
    baseline: MetricsReport | None = None,
) -> MetricsReport:
    if model.cfg.num_classes != len(class_names):
        raise ValueError(f"model has {model.cfg.num_classes} classes, dataset has {len(class_names)}")
    return _report(predict(model, x), np.asarray(labels), class_names, baseline)


def export_features(model: Backbone, x: np.ndarray, labels: np.ndarray, layer: int, out_path: str | Path) -> int:
    """Write label plus the (T, V)-pooled tap features of ``layer`` per sample as CSV."""
    if not 1 <= layer <= model.cfg.num_blocks:
        raise IndexError(f"tap block {layer} outside 1..{model.cfg.num_blocks}")
    rows = []
    with no_grad():
        for i in range(0, len(x), 128):
            _, taps = backbone_forward(Tensor(x[i : i + 128]), model, train=False, taps_requested={layer})
            f = taps[0].features.data
            rows.append(f.reshape(f.shape[0], f.shape[1], -1).mean(axis=2))
    feats = np.concatenate(rows)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(feats.shape[1])])
        for lab, row in zip(labels, feats):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
    return len(feats)


class Trainer:
    """Owns a backbone, an optional head, the optimizer state and the RNG streams.

    Separate RNG streams are spawned from ``cfg.seed`` for backbone init,
    head init, shuffling and dropout, so a run without a head consumes
    exactly the same random numbers as one with a head.
    """

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        a_norm: np.ndarray,
        cfg: TrainConfig,
        loss_cfg: LossConfig | None = None,
        head_cfg: SFHeadConfig | None = None,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.backbone_cfg = backbone_cfg
        init_ss, head_ss, shuffle_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.model = Backbone(backbone_cfg, a_norm, seed=int(init_ss.generate_state(1)[0]), dtype=dtype)
        self.head_cfg = head_cfg
        self.head = (
            SFHead(head_cfg, backbone_cfg.block_channels, seed=int(head_ss.generate_state(1)[0]), dtype=dtype)
            if head_cfg is not None
            else None
        )
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        frozen = {id(p) for p in self.head.frozen_parameters(cfg.ablation)} if self.head else set()
        self.params = [p for p in self.model.parameters()]
        if self.head is not None:
            self.params += [p for p in self.head.parameters() if id(p) not in frozen]
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.step = 0

    @property
    def head_active(self) -> bool:
        lc = self.loss_cfg
        return (
            self.head is not None
            and self.cfg.ablation.frcl
            and (lc.lambda_con > 0 or lc.lambda_red > 0)
        )

    def losses(self, x: np.ndarray, labels: np.ndarray, train: bool = True) -> tuple[LossBreakdown, Tensor]:
        """Forward pass and all loss terms for one batch."""
        taps = set(self.head.cfg.attach_blocks) if self.head_active else set()
        logits, records = backbone_forward(
            Tensor(x), self.model, train=train, taps_requested=taps, dropout_rng=self.dropout_rng
        )
        ce = _named("ce", lambda: cross_entropy(logits, labels))
        zero = Tensor(np.zeros((), dtype=logits.dtype))
        con = red = zero
        if self.head_active:
            bundles = []
            for rec in records:
                bundles += sfhead_forward(
                    rec.features, self.head.cfg, self.head.unit(rec.block), train, self.cfg.ablation
                )
            con = _named("con", lambda: feature_consistency_loss(bundles, self.loss_cfg))
            red = _named("red", lambda: _mean([feature_redundancy_loss(b.f_s, b.f_t, self.loss_cfg) for b in bundles]))
        return total_loss(ce, con, red, self.loss_cfg), logits

    def train_epoch(self, epoch: int, x: np.ndarray, labels: np.ndarray) -> tuple[dict[str, float], int, float]:
        """One pass over (x, labels); returns mean loss terms, steps taken, train accuracy."""
        if len(x) == 0:
            raise ValueError("empty training set")
        n = len(x)
        order = self.shuffle_rng.permutation(n)
        bs = self.cfg.batch_size
        n_batches = math.ceil(n / bs)
        sums = {"ce": 0.0, "con": 0.0, "red": 0.0, "total": 0.0}
        correct = 0
        for b in range(n_batches):
            idx = order[b * bs : (b + 1) * bs]
            lr = lr_at(epoch + b / n_batches, self.cfg)
            try:
                parts, logits = self.losses(x[idx], labels[idx], train=True)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"epoch {epoch} batch {b}: {exc}") from exc
            for p in self.params:
                p.zero_grad()
            if self.head is not None:
                self.head.zero_grad()
            parts.total.backward()
            sgd_step(self.params, self.velocity, lr, self.cfg.momentum, self.cfg.weight_decay)
            self.step += 1
            for k, v in parts.values().items():
                sums[k] += v * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
        return {k: v / n for k, v in sums.items()}, n_batches, 100.0 * correct / n

    def fit(
        self,
        x_train: np.ndarray,
        y_train: np.ndarray,
        x_val: np.ndarray | None = None,
        y_val: np.ndarray | None = None,
        class_names: list[str] | None = None,
        metrics_path: str | Path | None = None,
        epochs: int | None = None,
    ) -> list[dict]:
        """Train for ``epochs`` (default: the configured count); one metrics row per epoch."""
        history = []
        fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
        try:
            for epoch in range(epochs if epochs is not None else self.cfg.epochs):
                means, _, train_acc = self.train_epoch(epoch, x_train, y_train)
                row = {"epoch": epoch + 1, "lr": lr_at(epoch, self.cfg), **means, "train_acc": train_acc}
                if x_val is not None:
                    names = class_names or [str(i) for i in range(self.backbone_cfg.num_classes)]
                    row["val_acc"] = evaluate(self.model, x_val, y_val, names).accuracy
                else:
                    row["val_acc"] = None
                history.append(row)
                logger.info("epoch %d total %.4f val_acc %s", epoch + 1, row["total"], row["val_acc"])
                if fh:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
        finally:
            if fh:
                fh.close()
        return history

    def config_echo(self) -> dict:
        return {
            "backbone": self.backbone_cfg.to_json(),
            "train": self.cfg.to_json(),
            "loss": self.loss_cfg.to_json(),
            "head": self.head_cfg.to_json() if self.head_cfg else None,
        }

    def save(self, path: str | Path, include_head: bool = True) -> None:
        save_checkpoint(
            path, self.model, self.head if include_head else None, self.config_echo(), self.step, self.cfg.seed
        )


def _named(name: str, fn):
    try:
        return fn()
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"non-finite {name} loss: {exc}") from exc


def _mean(xs: list[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = T.add(out, x)
    return T.mul(out, 1.0 / len(xs))


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

_ORDER = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)]

SUBMODULE_GRID = [Ablation(sste=bool(a), acfa=bool(b), frcl=bool(c)) for a, b, c in _ORDER]
DIMENSION_GRID = [Ablation(acda=bool(a), atda=bool(b), asda=bool(c)) for a, b, c in _ORDER]


def grid_ablations(name: str) -> list[Ablation]:
    if name == "submodules":
        return list(SUBMODULE_GRID)
    if name == "dimensions":
        return list(DIMENSION_GRID)
    raise ValueError(f"unknown grid {name!r}")


def disabled_terms_are_zero(trainer: Trainer, x: np.ndarray, labels: np.ndarray) -> dict[str, bool]:
    """One forward/backward; check disabled parts contribute exactly nothing.

    Returns a mapping check-name -> passed.
    """
    ab = trainer.cfg.ablation
    parts, _ = trainer.losses(x, labels, train=True)
    head = trainer.head
    if head is not None:
        head.zero_grad()
    trainer.model.zero_grad()
    parts.total.backward()
    checks: dict[str, bool] = {}
    if not ab.frcl:
        checks["con_zero"] = float(parts.con.data) == 0.0
        checks["red_zero"] = float(parts.red.data) == 0.0
    if head is not None:
        for _, unit in head.units():
            if not ab.frcl:
                checks["head_grads_zero"] = checks.get("head_grads_zero", True) and all(
                    not np.any(p.grad) for p in unit.parameters()
                )
                continue
            if not ab.sste:
                checks["sste_grads_zero"] = checks.get("sste_grads_zero", True) and all(
                    not np.any(p.grad) for p in unit.exclusive_parameters("sste")
                )
            for part in ("acda", "atda", "asda"):
                if not ab.acfa or not getattr(ab, part):
                    key = f"{part}_grads_zero"
                    checks[key] = checks.get(key, True) and all(
                        not np.any(p.grad) for p in unit.exclusive_parameters(part)
                    )
    return checks


def with_ablation(cfg: TrainConfig, ablation: Ablation) -> TrainConfig:
    return replace(cfg, ablation=ablation)
