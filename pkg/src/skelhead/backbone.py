"""Reduced GCN+TCN classifier with read-only taps between each block's GCN and TCN."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor

__all__ = [
    "BackboneConfig",
    "GCNUnit",
    "TCNUnit",
    "BasicBlock",
    "Backbone",
    "TapRecord",
    "gcn_forward",
    "tcn_forward",
    "backbone_forward",
    "tiny_config",
    "paper_config",
]


@dataclass
class BackboneConfig:
    block_channels: list[int] = field(default_factory=lambda: [16, 16, 32, 64])
    temporal_strides: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    tcn_kernel: int = 9
    num_classes: int = 4
    V: int = 11
    in_channels: int = 3
    dropout: float = 0.25

    def __post_init__(self):
        if len(self.block_channels) != len(self.temporal_strides):
            raise ValueError("block_channels and temporal_strides differ in length")
        if any(c <= 0 for c in self.block_channels):
            raise ValueError("channel counts must be positive")
        if any(s not in (1, 2) for s in self.temporal_strides):
            raise ValueError("temporal strides must be 1 or 2")
        if self.tcn_kernel % 2 == 0:
            raise ValueError("tcn_kernel must be odd")

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    def to_json(self) -> dict:
        return asdict(self)


def tiny_config(num_classes: int = 4, V: int = 11) -> BackboneConfig:
    return BackboneConfig([16, 16, 32, 64], [1, 1, 1, 1], 9, num_classes, V)


def paper_config(num_classes: int = 60, V: int = 25) -> BackboneConfig:
    # strides at blocks 5 and 8 (1-based), as in the ST-GCN lineage
    return BackboneConfig(
        [64, 64, 64, 64, 128, 128, 128, 256, 256, 256],
        [1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
        9,
        num_classes,
        V,
    )


@dataclass
class TapRecord:
    block: int  # 1-based block index
    features: Tensor  # (N, C, T, V) post-GCN activations


class GCNUnit(Module):
    """ReLU(BN(W applied to x aggregated over (A_norm + B)))."""

    def __init__(self, cin: int, cout: int, V: int, rng: np.random.Generator, dtype=np.float32):
        self.W = Conv2d(cin, cout, (1, 1), rng, bias=False, dtype=dtype)
        self.B = Tensor((1e-6 * rng.uniform(size=(V, V))).astype(dtype), requires_grad=True)
        self.bn = BatchNorm(cout, dtype=dtype)


class TCNUnit(Module):
    """k x 1 temporal convolution + BN, with an optional projected residual."""

    def __init__(self, channels: int, kernel: int, stride: int, rng: np.random.Generator, dtype=np.float32):
        if kernel % 2 == 0:
            raise ValueError("temporal kernel must be odd for symmetric padding")
        self.conv = Conv2d(
            channels, channels, (kernel, 1), rng, stride=(stride, 1), pad=((kernel - 1) // 2, 0), bias=False, dtype=dtype
        )
        self.bn = BatchNorm(channels, dtype=dtype)
        self.stride = stride


class ResidualProjection(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(cin, cout, (1, 1), rng, stride=(stride, 1), bias=False, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return self.bn(self.conv(x), train)


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.gcn = GCNUnit(cin, cout, cfg.V, rng, dtype)
        self.tcn = TCNUnit(cout, cfg.tcn_kernel, stride, rng, dtype)
        self.residual = ResidualProjection(cin, cout, stride, rng, dtype) if (cin != cout or stride != 1) else None


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def gcn_forward(x: Tensor, params: GCNUnit, a_norm: np.ndarray, train: bool = False) -> Tensor:
    """Spatial graph convolution; the adjacency mixes joints, W mixes channels."""
    x, squeeze = _batched(x)
    V = x.shape[-1]
    if a_norm.shape != (V, V) or params.B.shape != (V, V):
        raise ValueError(f"graph of {a_norm.shape[0]} joints for input with V={V}")
    adj = T.add(Tensor(a_norm.astype(x.dtype)), params.B)
    # y[..., v] = sum_u adj[v, u] x[..., u]
    mixed = T.matmul(x, T.permute(adj, (1, 0)))
    out = T.relu(params.bn(params.W(mixed), train))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def tcn_forward(
    x: Tensor,
    params: TCNUnit,
    stride: int | None = None,
    train: bool = False,
    residual: Tensor | None = None,
) -> Tensor:
    """Temporal convolution, BN, residual add, ReLU.

    ``residual`` defaults to ``x`` itself (valid only at stride 1).
    """
    x, squeeze = _batched(x)
    stride = params.stride if stride is None else stride
    if stride != params.stride:
        raise ValueError(f"unit was built for stride {params.stride}")
    y = params.bn(params.conv(x), train)
    if residual is None:
        if stride != 1:
            raise ValueError("strided temporal unit needs an explicit residual path")
        residual = x
    out = T.relu(T.add(y, residual))
    return T.reshape(out, out.shape[1:]) if squeeze else out


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, a_norm: np.ndarray, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.a_norm = np.asarray(a_norm, dtype=np.float64)
        rng = np.random.default_rng(seed)
        self.data_bn = BatchNorm(cfg.in_channels * cfg.V, dtype=dtype)
        cin = cfg.in_channels
        self.blocks: list[BasicBlock] = []
        for cout, stride in zip(cfg.block_channels, cfg.temporal_strides):
            self.blocks.append(BasicBlock(cin, cout, stride, cfg, rng, dtype))
            cin = cout
        bound = 1.0 / np.sqrt(cin)
        self.fc_weight = Tensor(rng.uniform(-bound, bound, size=(cin, cfg.num_classes)).astype(dtype), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)

    def forward(
        self,
        x: Tensor,
        train: bool = False,
        taps: set[int] | frozenset[int] = frozenset(),
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, list[TapRecord]]:
        return backbone_forward(x, self, train, taps, dropout_rng)


def backbone_forward(
    x: Tensor,
    model: Backbone,
    train: bool = False,
    taps_requested: set[int] | frozenset[int] = frozenset(),
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[TapRecord]]:
    """Logits (N, Z), or (Z,) for an unbatched (3, T, V) input, plus taps.

    Tap indices are 1-based block numbers.  Tap tensors are the post-GCN
    activations themselves (graph-connected, never modified), so consumers
    can backpropagate into the backbone without altering its outputs.
    """
    cfg = model.cfg
    for b in taps_requested:
        if not 1 <= b <= cfg.num_blocks:
            raise IndexError(f"tap block {b} outside 1..{cfg.num_blocks}")
    x, squeeze = _batched(x)
    n, c, t, v = x.shape
    if v != cfg.V or c != cfg.in_channels:
        raise ValueError(f"input (C={c}, V={v}) does not match config (C={cfg.in_channels}, V={cfg.V})")

    # data BN over (joint, coordinate) channels
    h = T.reshape(T.permute(x, (0, 3, 1, 2)), (n, v * c, t))
    h = model.data_bn(h, train)
    h = T.permute(T.reshape(h, (n, v, c, t)), (0, 2, 3, 1))

    records: list[TapRecord] = []
    for i, block in enumerate(model.blocks, start=1):
        g = gcn_forward(h, block.gcn, model.a_norm, train)
        if i in taps_requested:
            records.append(TapRecord(i, g))
        res = h if block.residual is None else block.residual(h, train)
        h = tcn_forward(g, block.tcn, train=train, residual=res)

    pooled = T.reduce_mean_axis(T.reshape(h, (n, h.shape[1], -1)), 2)
    if train and cfg.dropout > 0:
        if dropout_rng is None:
            raise ValueError("training with dropout needs a dropout_rng")
        keep = (dropout_rng.uniform(size=pooled.shape) >= cfg.dropout).astype(pooled.dtype)
        pooled = T.mul(pooled, keep / (1.0 - cfg.dropout))
    logits = T.add(T.matmul(pooled, model.fc_weight), model.fc_bias)
    if squeeze:
        logits = T.reshape(logits, (cfg.num_classes,))
    return logits, records
