"""The 64-bit gradient oracle suite.

Every differentiable operation is exercised on freshly drawn small random
instances and compared against central differences.  Non-scalar outputs
are reduced through a fixed random projection ``sum(out * R)`` so that
no output coordinate is invisible to the check (a plain sum would, for
instance, give softmax an identically zero gradient).

Shared by ``skelhead gradcheck`` and the acceptance tests.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, GCNUnit, ResidualProjection, TCNUnit, backbone_forward, gcn_forward, tcn_forward
from .data import adjacency_normalize
from .gradcheck import gradcheck_report
from .losses import (
    LossConfig,
    consistency_terms,
    cross_entropy,
    feature_consistency_loss,
    feature_redundancy_loss,
    modified_cosine_distance,
    total_loss,
)
from .nn import BatchNorm, Conv2d, GroupNorm
from .sfhead import (
    Ablation,
    PsiGate,
    SFHeadConfig,
    SFHeadUnit,
    acda_forward,
    asda_forward,
    atda_forward,
    cfa_aggregate,
    sfhead_forward,
    sste_forward,
)
from .tensor import Tensor

__all__ = ["OpResult", "CASES", "run_suite", "format_results"]

F64 = np.float64
# Reference small shapes: channels, frames, joints, batch.
C, TT, V, N = 8, 6, 5, 4

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class OpResult:
    name: str
    instances: int
    max_rel_error: float
    checked: int
    skipped: int
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        # a kink may be skipped now and then, but most coordinates must be checked
        return self.max_rel_error <= self.tol and self.checked > 0 and self.skipped <= 0.05 * (self.checked + self.skipped)


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else scale * rng.standard_normal(shape)
    return Tensor(data.astype(F64), requires_grad=True)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = rng.standard_normal(out.shape)
    return lambda y: T.sum_axis(T.mul(y, r))


def _scalar(build: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    proj = _projected(build(), rng)
    return lambda: proj(build())


def _params(*modules) -> list[Tensor]:
    return [p for m in modules for p in m.parameters()]


def _unary(fn, positive=False):
    def case(rng):
        x = _leaf(rng, 3, 4, positive=positive)
        return _scalar(lambda: fn(x), rng), [x]

    return case


def _binary(fn, positive_b=False):
    def case(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, positive=positive_b)  # b broadcasts
        return _scalar(lambda: fn(a, b), rng), [a, b]

    return case


def _case_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return _scalar(lambda: T.matmul(a, b), rng), [a, b]


def _case_where(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    mask = rng.uniform(size=(3, 4)) > 0.5
    return _scalar(lambda: T.where(mask, a, b), rng), [a, b]


def _case_reduce(fn):
    def case(rng):
        x = _leaf(rng, 2, 3, 4)
        axis = int(rng.integers(0, 3))
        return _scalar(lambda: fn(x, axis), rng), [x]

    return case


def _case_sum(rng):
    x = _leaf(rng, 2, 3, 4)
    axis = int(rng.integers(0, 3))
    return _scalar(lambda: T.sum_axis(x, axis), rng), [x]


def _case_l2(rng):
    x = _leaf(rng, 3, 5)
    return _scalar(lambda: T.l2_norm(x, -1), rng), [x]


def _case_permute(rng):
    x = _leaf(rng, 2, 3, 4)
    order = tuple(int(i) for i in rng.permutation(3))
    return _scalar(lambda: T.permute(x, order), rng), [x]


def _case_reshape(rng):
    x = _leaf(rng, 2, 3, 4)
    return _scalar(lambda: T.reshape(x, (4, 6)), rng), [x]


def _case_concat(rng):
    a, b = _leaf(rng, 1, TT, V), _leaf(rng, 2, TT, V)
    return _scalar(lambda: T.concat_axis([a, b], 0), rng), [a, b]


def _case_split(rng):
    x = _leaf(rng, 6, 4)

    def build():
        p, q = T.split_axis(x, [2, 4], 0)
        return T.add(T.mul(p, 2.0), T.slice_axis(q, 0, 1, 3))

    return _scalar(build, rng), [x]


def _case_conv(rng):
    x = _leaf(rng, 2, 2, TT, V)
    kh, kw = int(rng.choice([1, 3, 5])), int(rng.choice([1, 3]))
    sh = int(rng.integers(1, 3))
    w, b = _leaf(rng, 3, 2, kh, kw), _leaf(rng, 3)
    pad = (kh // 2, kw // 2)
    return _scalar(lambda: T.conv2d(x, w, b, (sh, 1), pad), rng), [x, w, b]


def _case_conv_psi(rng):
    # the gate-conv shape: (2, 5, 5) input, (1, 2, 7, 7) kernel, pad 3
    x, w, b = _leaf(rng, 2, 5, 5), _leaf(rng, 1, 2, 7, 7), _leaf(rng, 1)
    return _scalar(lambda: T.conv2d(x, w, b, 1, 3), rng), [x, w, b]


def _case_group_norm(rng):
    x, gain, bias = _leaf(rng, 2, 4, 3, 5), _leaf(rng, 4), _leaf(rng, 4)
    return _scalar(lambda: T.group_norm(x, 2, gain, bias), rng), [x, gain, bias]


def _case_batch_norm(train: bool):
    def case(rng):
        x, gain, bias = _leaf(rng, N, 3, TT, V), _leaf(rng, 3), _leaf(rng, 3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        return _scalar(lambda: T.batch_norm(x, gain, bias, rm.copy(), rv.copy(), train), rng), [x, gain, bias]

    return case


def _case_gcn(rng):
    unit = GCNUnit(3, C, V, rng, F64)
    unit.B.data[...] = 0.1 * rng.standard_normal((V, V))
    a = adjacency_normalize([(i, i + 1) for i in range(V - 1)], V)
    x = _leaf(rng, N, 3, TT, V)
    return _scalar(lambda: gcn_forward(x, unit, a, train=True), rng), [x, *_params(unit)]


def _case_tcn(rng):
    unit = TCNUnit(C, 3, 1, rng, F64)
    x = _leaf(rng, N, C, TT, V)
    return _scalar(lambda: tcn_forward(x, unit, train=True), rng), [x, *_params(unit)]


def _case_tcn_strided(rng):
    unit = TCNUnit(C, 3, 2, rng, F64)
    proj = ResidualProjection(4, C, 2, rng, F64)
    x, h = _leaf(rng, N, C, TT, V), _leaf(rng, N, 4, TT, V)
    return _scalar(lambda: tcn_forward(x, unit, train=True, residual=proj(h, True)), rng), [x, h, *_params(unit, proj)]


def _head_unit(rng, channels=C, cfg: SFHeadConfig | None = None) -> tuple[SFHeadUnit, SFHeadConfig]:
    cfg = cfg or SFHeadConfig(g=1, attach_blocks=(1,))
    unit = SFHeadUnit(channels, cfg, rng, F64)
    for p in (unit.phi_t.bias, unit.phi_s.bias, unit.gn.bias, unit.gn.gain):
        p.data[...] = rng.standard_normal(p.shape)
    return unit, cfg


def _case_sste(rng):
    unit, _ = _head_unit(rng)
    xt, xs = _leaf(rng, N, 2, TT, V), _leaf(rng, N, 2, TT, V)

    def build():
        ft, fs = sste_forward(xt, xs, unit)
        return T.concat_axis([ft, fs], 1)

    return _scalar(build, rng), [xt, xs, *unit.exclusive_parameters("sste")]


def _case_gate(fn):
    def case(rng):
        psi = PsiGate(7, rng, F64)
        psi.bn.bias.data[...] = rng.standard_normal(1)
        f = _leaf(rng, N, 2, TT, V)
        return _scalar(lambda: fn(f, psi, True)[0], rng), [f, *_params(psi)]

    return case


def _case_cfa(rng):
    ys = [_leaf(rng, 2, TT, V) for _ in range(4)]
    eta = rng.uniform(0, 1, 4)
    return _scalar(lambda: cfa_aggregate(*ys, eta), rng), ys


def _case_sfhead(rng):
    unit, cfg = _head_unit(rng)
    tap = _leaf(rng, N, C, TT, V)

    def build():
        b = sfhead_forward(tap, cfg, unit, train=True)[0]
        return T.concat_axis([b.f_c, b.f_t, b.f_s, b.f_o, b.f_a], 1)

    return _scalar(build, rng), [tap, *_params(unit)]


def _case_distance(rng):
    u, v = _leaf(rng, N, 12), _leaf(rng, N, 12)
    alpha = float(rng.uniform(0.5, 2.0))
    return _scalar(lambda: modified_cosine_distance(u, v, alpha), rng), [u, v]


def _case_frl(rng):
    fs, ft = _leaf(rng, N, 2, TT, V), _leaf(rng, N, 2, TT, V)
    cfg = LossConfig(tau=float(rng.uniform(0.5, 2.0)))
    return (lambda: feature_redundancy_loss(fs, ft, cfg)), [fs, ft]


def _case_compensation(rng):
    # d spread over (0, 1), gated samples included; the gate is a constant mask
    u, v = _leaf(rng, 8, 6), _leaf(rng, 8, 6)
    cfg = LossConfig()

    def build():
        base, phi = consistency_terms(modified_cosine_distance(u, v, 1.0), cfg)
        return T.add(base, phi)

    return _scalar(build, rng), [u, v]


def _case_fcl(rng):
    unit, cfg = _head_unit(rng)
    tap = _leaf(rng, N, C, TT, V)
    lcfg = LossConfig()
    return (lambda: feature_consistency_loss(sfhead_forward(tap, cfg, unit, train=True), lcfg)), [tap, *_params(unit)]


def _case_ce(rng):
    logits = _leaf(rng, N, 5, scale=2.0)
    labels = rng.integers(0, 5, N)
    return (lambda: cross_entropy(logits, labels)), [logits]


def _case_total(rng):
    ce, con, red = _leaf(rng, 1), _leaf(rng, 1), _leaf(rng, 1)
    cfg = LossConfig()
    return (lambda: T.sum_axis(total_loss(ce, con, red, cfg).total)), [ce, con, red]


def _case_composite(rng):
    """Backbone, head at the last block, CE + consistency + redundancy."""
    bcfg = BackboneConfig([C, C], [1, 1], 3, num_classes=3, V=V)
    a = adjacency_normalize([(i, i + 1) for i in range(V - 1)], V)
    model = Backbone(bcfg, a, seed=int(rng.integers(1 << 31)), dtype=F64)
    for blk in model.blocks:
        blk.gcn.B.data[...] = 0.1 * rng.standard_normal((V, V))
    unit, hcfg = _head_unit(rng)
    x = _leaf(rng, N, 3, TT, V)
    labels = rng.integers(0, 3, N)
    lcfg = LossConfig()

    def f():
        logits, taps = backbone_forward(x, model, True, {2}, np.random.default_rng(0))
        bundles = sfhead_forward(taps[0].features, hcfg, unit, train=True, ablation=Ablation())
        con = feature_consistency_loss(bundles, lcfg)
        red = feature_redundancy_loss(bundles[0].f_s, bundles[0].f_t, lcfg)
        return total_loss(cross_entropy(logits, labels), con, red, lcfg).total

    return f, [x, *model.parameters(), *unit.parameters()]


CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "matmul": _case_matmul,
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True),
    "power": _unary(lambda x: T.power(x, 2.5), positive=True),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "where": _case_where,
    "sum_axis": _case_sum,
    "reduce_mean_axis": _case_reduce(T.reduce_mean_axis),
    "reduce_max_axis": _case_reduce(T.reduce_max_axis),
    "logsumexp_lastdim": _unary(T.logsumexp_lastdim),
    "softmax_lastdim": _unary(T.softmax_lastdim),
    "log_softmax_lastdim": _unary(T.log_softmax_lastdim),
    "l2_norm": _case_l2,
    "permute": _case_permute,
    "reshape": _case_reshape,
    "concat_axis": _case_concat,
    "split_slice": _case_split,
    "conv2d": _case_conv,
    "conv2d_psi": _case_conv_psi,
    "group_norm": _case_group_norm,
    "batch_norm_train": _case_batch_norm(True),
    "batch_norm_eval": _case_batch_norm(False),
    "gcn_forward": _case_gcn,
    "tcn_forward": _case_tcn,
    "tcn_forward_strided": _case_tcn_strided,
    "sste_forward": _case_sste,
    "acda_forward": _case_gate(acda_forward),
    "atda_forward": _case_gate(atda_forward),
    "asda_forward": _case_gate(asda_forward),
    "cfa_aggregate": _case_cfa,
    "sfhead_forward": _case_sfhead,
    "modified_cosine_distance": _case_distance,
    "feature_redundancy_loss": _case_frl,
    "consistency_terms": _case_compensation,
    "feature_consistency_loss": _case_fcl,
    "cross_entropy": _case_ce,
    "total_loss": _case_total,
    "composite": _case_composite,
}

# Coordinates probed per input tensor; the composite has many parameter
# tensors, so it samples fewer per tensor.
_MAX_COORDS = {"composite": 3}

# Threshold for the kink detector of gradcheck_report.  A jump of relative
# size J that escapes both statistics has J below about 12 * KINK_TOL, so it
# biases the central difference by at most about 5 * KINK_TOL = 5e-5.
KINK_TOL = 1e-5


def run_suite(
    instances: int = 20,
    seed: int = 0,
    tol: float = 1e-4,
    max_coords: int = 16,
    ops: list[str] | None = None,
    h: float = 1e-5,
) -> list[OpResult]:
    """Check every op in ``ops`` (default: all) on ``instances`` random draws.

    Coordinates whose two one-sided differences disagree are skipped as
    kinks (ReLU at zero, max selection changes, the compensation gate);
    :attr:`OpResult.passed` bounds how many may be skipped.
    """
    names = list(CASES) if ops is None else ops
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown ops: {unknown}")
    results = []
    for name in names:
        # one stream per op name, so a subset run reproduces the full run
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        start = time.perf_counter()
        worst, checked, skipped = 0.0, 0, 0
        for _ in range(instances):
            f, inputs = CASES[name](rng)
            rep = gradcheck_report(f, inputs, h=h, max_coords=_MAX_COORDS.get(name, max_coords), rng=rng, kink_tol=KINK_TOL)
            worst = max(worst, rep.max_rel_error)
            checked += rep.checked
            skipped += rep.skipped
        results.append(OpResult(name, instances, worst, checked, skipped, time.perf_counter() - start, tol))
    return results


def format_results(results: list[OpResult]) -> str:
    lines = [f"{'op':<26s} {'n':>3s} {'max_rel_err':>12s} {'checked':>8s} {'skipped':>8s}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<26s} {r.instances:>3d} {r.max_rel_error:>12.3e} {r.checked:>8d} {r.skipped:>8d}  {status}")
    return "\n".join(lines)
