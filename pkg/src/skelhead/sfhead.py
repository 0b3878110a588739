"""The training-only head attached at backbone taps.

A tap (N, C, T, V) is cut into ``g`` channel groups, each group into four
equal branches (temporal input, channel/identity, spatial input, original).
The temporal and spatial branches are gated by synchronized extraction
heads; the channel, temporal and spatial features are then re-weighted by
rotate-and-pool attention gates and mixed with the original branch.

Groups are folded into the batch axis so that all groups share the heads
and are processed in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, GroupNorm, Module
from .tensor import Tensor

__all__ = [
    "Ablation",
    "SFHeadConfig",
    "SFHeadFeatures",
    "SFHeadUnit",
    "SFHead",
    "PsiGate",
    "group_split",
    "sste_forward",
    "acda_forward",
    "atda_forward",
    "asda_forward",
    "cfa_aggregate",
    "sfhead_forward",
]


@dataclass(frozen=True)
class Ablation:
    """Switchboard for the sub-modules.  Everything on is the full head."""

    sste: bool = True
    acfa: bool = True
    frcl: bool = True
    acda: bool = True
    atda: bool = True
    asda: bool = True

    @property
    def head_active(self) -> bool:
        return self.frcl

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("sste", "acfa", "frcl", "acda", "atda", "asda")}


@dataclass
class SFHeadConfig:
    g: int = 2
    eta: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    psi_kernel: int = 7
    gn_groups: int | None = None
    attach_blocks: tuple[int, ...] = (4, 6, 8)

    def __post_init__(self):
        self.eta = tuple(float(e) for e in self.eta)
        self.attach_blocks = tuple(sorted(int(b) for b in self.attach_blocks))
        if self.g < 1:
            raise ValueError("group count must be >= 1")
        if len(self.eta) != 4 or any(not np.isfinite(e) or e < 0 for e in self.eta):
            raise ValueError(f"eta must be 4 finite non-negative weights, got {self.eta}")
        if self.psi_kernel % 2 == 0:
            raise ValueError("psi_kernel must be odd")

    def branch_channels(self, channels: int) -> int:
        if channels % (4 * self.g):
            raise ValueError(f"{channels} channels not divisible by 4*g = {4 * self.g}")
        return channels // (4 * self.g)

    def gn_groups_for(self, branch: int) -> int:
        if self.gn_groups is not None:
            return self.gn_groups
        k = min(4, branch)
        while branch % k:
            k -= 1
        return k

    def to_json(self) -> dict:
        return {
            "g": self.g,
            "eta": list(self.eta),
            "psi_kernel": self.psi_kernel,
            "gn_groups": self.gn_groups,
            "attach_blocks": list(self.attach_blocks),
        }


@dataclass
class SFHeadFeatures:
    """Branch features of one channel group, each (N, C', T, V)."""

    f_c: Tensor
    f_t: Tensor
    f_s: Tensor
    f_o: Tensor
    f_a: Tensor
    gates: dict[str, Tensor] = field(default_factory=dict)

    def members(self) -> list[Tensor]:
        """The reference set F, in the order [f_c, f_s, f_t, f_o]."""
        return [self.f_c, self.f_s, self.f_t, self.f_o]


class PsiGate(Module):
    """2 -> 1 channel k x k convolution followed by BN; the gate conv of a pooled pair."""

    def __init__(self, kernel: int, rng: np.random.Generator, dtype=np.float32):
        pad = (kernel - 1) // 2
        self.conv = Conv2d(2, 1, (kernel, kernel), rng, pad=(pad, pad), bias=False, dtype=dtype)
        self.bn = BatchNorm(1, dtype=dtype)

    def zero_(self) -> None:
        self.conv.zero_()


class SFHeadUnit(Module):
    """Head parameters for one attach point with C channels."""

    def __init__(self, channels: int, cfg: SFHeadConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.branch_channels(channels)
        self.channels = channels
        self.phi_t = Conv2d(c, c, (1, 1), rng, dtype=dtype)
        self.phi_s = Conv2d(c, c, (1, 1), rng, dtype=dtype)
        self.gn = GroupNorm(cfg.gn_groups_for(c), c, dtype=dtype)
        self.psi_c = PsiGate(cfg.psi_kernel, rng, dtype)
        self.psi_t = PsiGate(cfg.psi_kernel, rng, dtype)
        self.psi_s = PsiGate(cfg.psi_kernel, rng, dtype)

    def zero_(self) -> None:
        """Zero every head conv (gates become sigmoid(0) = 0.5 everywhere)."""
        self.phi_t.zero_()
        self.phi_s.zero_()
        for psi in (self.psi_c, self.psi_t, self.psi_s):
            psi.zero_()

    def exclusive_parameters(self, part: str) -> list[Tensor]:
        """Parameters used only by one sub-module: 'sste', 'acda', 'atda' or 'asda'."""
        if part == "sste":
            mods = (self.phi_t, self.phi_s, self.gn)
        else:
            mods = ({"acda": self.psi_c, "atda": self.psi_t, "asda": self.psi_s}[part],)
        return [p for m in mods for p in m.parameters()]


class SFHead(Module):
    """One :class:`SFHeadUnit` per attach block, named ``block<k>``."""

    def __init__(self, cfg: SFHeadConfig, block_channels: list[int], seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        for b in cfg.attach_blocks:
            if not 1 <= b <= len(block_channels):
                raise ValueError(f"attach block {b} outside 1..{len(block_channels)}")
            setattr(self, f"block{b}", SFHeadUnit(block_channels[b - 1], cfg, rng, dtype))

    def unit(self, block: int) -> SFHeadUnit:
        return getattr(self, f"block{block}")

    def units(self) -> list[tuple[int, SFHeadUnit]]:
        return [(b, self.unit(b)) for b in self.cfg.attach_blocks]

    def frozen_parameters(self, ablation: Ablation) -> list[Tensor]:
        """Parameters that receive no update under ``ablation``."""
        out: list[Tensor] = []
        for _, u in self.units():
            if not ablation.frcl:
                out.extend(u.parameters())
                continue
            if not ablation.sste:
                out.extend(u.exclusive_parameters("sste"))
            for part in ("acda", "atda", "asda"):
                if not ablation.acfa or not getattr(ablation, part):
                    out.extend(u.exclusive_parameters(part))
        return out


def group_split(x: Tensor, g: int) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
    """Contiguous channel slicing into g groups of four branches (X_t, f_c, X_s, f_o).

    Works on (C, T, V) or (N, C, T, V) input; the channel axis is ``-3``.
    """
    axis = x.ndim - 3
    c = x.shape[axis]
    if c % (4 * g):
        raise ValueError(f"{c} channels not divisible by 4*g = {4 * g}")
    q = c // (4 * g)
    branches = T.split_axis(x, [q] * (4 * g), axis)
    return [tuple(branches[4 * k : 4 * k + 4]) for k in range(g)]


def _fold_groups(x: Tensor, g: int) -> Tensor:
    n, c, t, v = x.shape
    return T.reshape(x, (n * g, c // g, t, v))


def sste_forward(x_t: Tensor, x_s: Tensor, unit: SFHeadUnit) -> tuple[Tensor, Tensor]:
    """f_t = sigmoid(phi_t(mean over T of X_t)) * X_t; f_s = sigmoid(phi_s(GN(X_s))) * X_s."""
    x_t, sq = _batch(x_t)
    x_s, _ = _batch(x_s)
    gate_t = T.sigmoid(unit.phi_t(T.reduce_mean_axis(x_t, 2, keep=True)))
    f_t = T.mul(gate_t, x_t)
    gate_s = T.sigmoid(unit.phi_s(unit.gn(x_s)))
    f_s = T.mul(gate_s, x_s)
    return _unbatch(f_t, sq), _unbatch(f_s, sq)


def _zpool(x: Tensor, axis: int) -> Tensor:
    return T.concat_axis([T.reduce_mean_axis(x, axis, keep=True), T.reduce_max_axis(x, axis, keep=True)], axis)


def _gate(pooled: Tensor, psi: PsiGate, train: bool) -> Tensor:
    return T.sigmoid(psi.bn(psi.conv(pooled), train))


def acda_forward(f_c: Tensor, psi: PsiGate, train: bool = False) -> tuple[Tensor, Tensor]:
    """Channel-pooled gate omega_c (N, 1, T, V) applied to f_c."""
    f_c, sq = _batch(f_c)
    omega = _gate(_zpool(f_c, 1), psi, train)
    return _unbatch(T.mul(omega, f_c), sq), _unbatch(omega, sq)


def atda_forward(f_t: Tensor, psi: PsiGate, train: bool = False) -> tuple[Tensor, Tensor]:
    """Rotate to (T, C', V), pool over frames, gate (1, C', V), rotate back."""
    f_t, sq = _batch(f_t)
    rot = T.permute(f_t, (0, 2, 1, 3))
    omega = _gate(_zpool(rot, 1), psi, train)
    y = T.permute(T.mul(omega, rot), (0, 2, 1, 3))
    return _unbatch(y, sq), _unbatch(omega, sq)


def asda_forward(f_s: Tensor, psi: PsiGate, train: bool = False) -> tuple[Tensor, Tensor]:
    """Rotate to (V, T, C'), pool over joints, gate (1, T, C'), rotate back."""
    f_s, sq = _batch(f_s)
    rot = T.permute(f_s, (0, 3, 2, 1))
    omega = _gate(_zpool(rot, 1), psi, train)
    y = T.permute(T.mul(omega, rot), (0, 3, 2, 1))
    return _unbatch(y, sq), _unbatch(omega, sq)


def cfa_aggregate(y_c: Tensor | None, y_t: Tensor | None, y_s: Tensor | None, f_o: Tensor, eta) -> Tensor:
    """Weighted sum eta_c*y_c + eta_t*y_t + eta_s*y_s + eta_o*f_o.

    Terms with zero weight (or a missing input) are left out of the graph.
    """
    shape = f_o.shape
    out: Tensor | None = None
    for w, y in zip(eta, (y_c, y_t, y_s, f_o)):
        if y is None or w == 0:
            continue
        if y.shape != shape:
            raise ValueError(f"branch shape {y.shape} != {shape}")
        term = T.mul(y, float(w))
        out = term if out is None else T.add(out, term)
    if out is None:
        out = Tensor(np.zeros(shape, dtype=f_o.dtype))
    return out


def _batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def sfhead_forward(
    tap: Tensor,
    cfg: SFHeadConfig,
    unit: SFHeadUnit,
    train: bool = False,
    ablation: Ablation = Ablation(),
) -> list[SFHeadFeatures]:
    """Run the head on one tap, returning one feature bundle per channel group.

    Each bundle's tensors are (N, C', T, V), or (C', T, V) for an unbatched tap.
    """
    tap, sq = _batch(tap)
    n, c, t, v = tap.shape
    g = cfg.g
    q = cfg.branch_channels(c)
    folded = _fold_groups(tap, g)
    x_t, f_c, x_s, f_o = T.split_axis(folded, [q] * 4, 1)

    if ablation.sste:
        f_t, f_s = sste_forward(x_t, x_s, unit)
    else:
        f_t, f_s = x_t, x_s

    gates: dict[str, Tensor] = {}
    if ablation.acfa:
        eta = list(cfg.eta)
        y_c = y_t = y_s = None
        if ablation.acda:
            y_c, gates["omega_c"] = acda_forward(f_c, unit.psi_c, train)
        else:
            eta[0] = 0.0
        if ablation.atda:
            y_t, gates["omega_t"] = atda_forward(f_t, unit.psi_t, train)
        else:
            eta[1] = 0.0
        if ablation.asda:
            y_s, gates["omega_s"] = asda_forward(f_s, unit.psi_s, train)
        else:
            eta[2] = 0.0
        f_a = cfa_aggregate(y_c, y_t, y_s, f_o, eta)
    else:
        f_a = T.mul(T.add(T.add(f_c, f_t), T.add(f_s, f_o)), 0.25)

    def per_group(x: Tensor) -> list[Tensor]:
        rest = x.shape[1:]
        x = T.reshape(x, (n, g) + rest)
        return [_unbatch(T.reshape(T.slice_axis(x, 1, k, k + 1), (n,) + rest), sq) for k in range(g)]

    cols = [per_group(x) for x in (f_c, f_t, f_s, f_o, f_a)]
    split_gates = {name: per_group(om) for name, om in gates.items()}
    bundles = []
    for k in range(g):
        kg = {name: parts[k] for name, parts in split_gates.items()}
        bundles.append(SFHeadFeatures(cols[0][k], cols[1][k], cols[2][k], cols[3][k], cols[4][k], kg))
    return bundles


def count_parameters(cfg: SFHeadConfig, block_channels: list[int]) -> int:
    return SFHead(replace(cfg), block_channels).num_parameters()
