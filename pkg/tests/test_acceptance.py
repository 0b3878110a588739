"""Acceptance criteria 1-10.

Each test prints one ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (visible in ``pytest -v`` output) and then asserts the same outcome.
The efficacy runs behind criteria 8 and 10 are shared and take the bulk of
the runtime (about 20-25 minutes on one desktop core).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from skelhead.backbone import Backbone, backbone_forward, paper_config
from skelhead.checkpoint import HEAD_PREFIX, apply_state, read_checkpoint
from skelhead.cli import main
from skelhead.data import SynthConfig, stratified_split, synth_generate, to_batch
from skelhead.losses import LossConfig, compensation_term, consistency_terms, feature_redundancy_loss, modified_cosine_distance
from skelhead.oracle import format_results, run_suite
from skelhead.sfhead import Ablation, SFHeadConfig, count_parameters
from skelhead.tensor import Tensor, no_grad
from skelhead.trainer import Trainer, profile

SEEDS = (0, 1, 2, 3, 4)
EPOCHS = 30


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="session")
def default_task():
    manifest, seqs = synth_generate(SynthConfig(), seed=0)
    x, y = to_batch(seqs, root_joint=0, T_target=manifest.T_target)
    return manifest, x, y


@pytest.fixture(scope="session")
def efficacy_runs(default_task):
    """{(seed, arm): history} for arm in {baseline, full}, tiny profile."""
    manifest, x, y = default_task
    bcfg, tcfg, hcfg = profile("tiny", manifest.num_classes, manifest.V)
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        tr, te = stratified_split(y, tcfg.test_fraction, seed)
        for arm, head in (("baseline", None), ("full", hcfg)):
            trainer = Trainer(bcfg, manifest.graph.A_norm, replace(tcfg, seed=seed, epochs=EPOCHS), LossConfig(), head)
            runs[seed, arm] = trainer.fit(x[tr], y[tr], x[te], y[te], manifest.class_names)
    return runs, time.perf_counter() - start


def test_criterion_1_gradient_oracle(capsys):
    start = time.perf_counter()
    results = run_suite(instances=20, seed=0)
    elapsed = time.perf_counter() - start
    with capsys.disabled():
        print("\n" + format_results(results))
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    ok = not failed and elapsed < 300
    detail = f"{len(results)} ops x 20 instances, worst rel. err {worst:.2e} (tol 1e-4), {elapsed:.0f}s (limit 300s)"
    if failed:
        detail += f"; failing: {', '.join(failed)}"
    report(capsys, 1, ok, detail)


def test_criterion_2_distance_invariants(capsys):
    rng = np.random.default_rng(2)
    alpha = 1.0
    top = 1 - math.exp(-2 * alpha)
    u = rng.standard_normal((10_000, 16)) * rng.uniform(0.01, 100, size=(10_000, 1))
    v = rng.standard_normal((10_000, 16)) * rng.uniform(0.01, 100, size=(10_000, 1))
    d = modified_cosine_distance(Tensor(u), Tensor(v), alpha).data
    d_self = modified_cosine_distance(Tensor(u), Tensor(u), alpha).data
    d_anti = modified_cosine_distance(Tensor(u), Tensor(-u), alpha).data
    in_range = bool(np.all((d >= 0) & (d <= top + 1e-9)))
    self_err = float(np.max(np.abs(d_self - top)))
    anti_err = float(np.max(np.abs(d_anti)))
    ok = in_range and self_err <= 1e-7 and anti_err <= 1e-7
    report(capsys, 2, ok, f"10^4 pairs in [0, 1-e^-2]: {in_range}; max |d(u,u)-top| {self_err:.1e}; max |d(u,-u)| {anti_err:.1e}")


def test_criterion_3_consistency_range(capsys):
    rng = np.random.default_rng(3)
    cfg = LossConfig()
    n = 10_000
    f_a = rng.standard_normal((n, 2 * 6 * 5))
    # mix of random, aligned and opposed members so both ends of d are exercised
    members = [rng.standard_normal(f_a.shape), f_a * rng.uniform(0.1, 2, (n, 1)), -f_a, f_a + 0.3 * rng.standard_normal(f_a.shape)]
    base_lo, base_hi, phi_hi = np.inf, -np.inf, -np.inf
    for m in members:
        d = modified_cosine_distance(Tensor(f_a), Tensor(m), cfg.alpha)
        base, phi = consistency_terms(d, cfg)
        base_lo, base_hi = min(base_lo, base.data.min()), max(base_hi, base.data.max())
        phi_hi = max(phi_hi, phi.data.max())
    sweep = np.linspace(0.0, 1.0, 100_001)
    phi_sweep = compensation_term(Tensor(sweep), cfg).data
    gated = np.minimum(sweep, 1 - sweep) <= cfg.epsilon
    gate_exact = bool(np.all(phi_sweep[gated] == 0.0))
    sweep_base, _ = consistency_terms(Tensor(sweep), cfg)
    ok = (
        base_lo >= 0
        and base_hi <= cfg.m_margin
        and phi_hi <= 0
        and gate_exact
        and bool(np.all(phi_sweep <= 0))
        and sweep_base.data.min() >= -1e-15
        and sweep_base.data.max() <= cfg.m_margin + 1e-15
    )
    report(
        capsys,
        3,
        ok,
        f"4x10^4 pairs: base in [{base_lo:.4f}, {base_hi:.4f}] within [0, {cfg.m_margin}]; "
        f"max compensation {max(phi_hi, phi_sweep.max()):.3g} <= 0; exact zero in gate regions: {gate_exact}",
    )


def test_criterion_4_redundancy_fixtures(capsys):
    cfg = LossConfig()
    rng = np.random.default_rng(4)
    one = float(feature_redundancy_loss(Tensor(rng.standard_normal((1, 40))), Tensor(rng.standard_normal((1, 40))), cfg).data)
    same = np.ones((4, 40))
    uniform = float(feature_redundancy_loss(Tensor(same), Tensor(same), cfg).data)
    lit = replace(cfg, frl_literal=True)
    literal_err = 0.0
    for n in (1, 2, 4, 7, 16):
        for _ in range(20):
            a, b = rng.standard_normal((2, n, 40))
            got = float(feature_redundancy_loss(Tensor(a), Tensor(b), lit).data)
            literal_err = max(literal_err, abs(got - math.log(n) / 2))
    ok = abs(one) <= 1e-9 and abs(uniform - math.log(4) / 2) <= 1e-6 and literal_err <= 1e-9
    report(capsys, 4, ok, f"N=1 -> {one:.1e}; uniform N=4 -> {uniform:.7f} (log4/2 = {math.log(4) / 2:.7f}); literal form max |L - logN/2| {literal_err:.1e}")


def test_criterion_5_parameter_budget(capsys, tmp_path):
    n = count_parameters(SFHeadConfig(g=2, attach_blocks=(4, 6, 8)), paper_config().block_channels)
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--samples-per-class", "1"]) == 0
    with capsys.disabled():
        print()
        code = main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--profile", "paper", "--dry-run"])
    ok = code == 0 and n < 10_000
    report(capsys, 5, ok, f"head at blocks {{4,6,8}} of the paper-scale backbone, g=2: {n} parameters (< 10000)")


def test_criterion_6_inference_transparency(capsys, tmp_path, default_task):
    manifest, x, y = default_task
    bcfg, tcfg, hcfg = profile("tiny", manifest.num_classes, manifest.V)
    trainer = Trainer(bcfg, manifest.graph.A_norm, replace(tcfg, seed=6), LossConfig(), hcfg)
    trainer.fit(x[:64], y[:64], epochs=1)  # non-trivial weights and BN statistics
    trainer.save(tmp_path / "full.skck")
    trainer.save(tmp_path / "bare.skck", include_head=False)
    _, full_state = read_checkpoint(tmp_path / "full.skck")
    _, bare_state = read_checkpoint(tmp_path / "bare.skck")
    has_head = any(k.startswith(HEAD_PREFIX) for k in full_state)
    stripped = not any(k.startswith(HEAD_PREFIX) for k in bare_state)
    a, b = Backbone(bcfg, manifest.graph.A_norm), Backbone(bcfg, manifest.graph.A_norm)
    apply_state(a, None, full_state)
    apply_state(b, None, bare_state)
    inputs = np.random.default_rng(6).standard_normal((100, 3, manifest.T_target, manifest.V)).astype(np.float32)
    with no_grad():
        la, _ = backbone_forward(Tensor(inputs), a, train=False)
        lb, _ = backbone_forward(Tensor(inputs), b, train=False)
    same = bool(np.array_equal(la.data, lb.data))
    ok = has_head and stripped and same
    report(capsys, 6, ok, f"100 random inputs, eval logits with head present vs stripped bitwise identical: {same}")


def test_criterion_7_ablation_identity(capsys, default_task):
    manifest, x, y = default_task
    bcfg, tcfg, hcfg = profile("tiny", manifest.num_classes, manifest.V)
    idx = np.random.default_rng(7).permutation(len(y))[:128]
    off = Ablation(sste=False, acfa=False, frcl=False, acda=False, atda=False, asda=False)
    base = Trainer(bcfg, manifest.graph.A_norm, replace(tcfg, seed=7), LossConfig(), None)
    abl = Trainer(
        bcfg, manifest.graph.A_norm, replace(tcfg, seed=7, ablation=off), LossConfig(lambda_con=0.0, lambda_red=0.0), hcfg
    )
    hb = base.fit(x[idx], y[idx], x[:64], y[:64], epochs=3)
    ha = abl.fit(x[idx], y[idx], x[:64], y[:64], epochs=3)
    params_equal = all(np.array_equal(p.data, q.data) for p, q in zip(base.model.parameters(), abl.model.parameters()))
    buffers_equal = all(np.array_equal(p, q) for (_, p), (_, q) in zip(base.model.named_buffers(), abl.model.named_buffers()))
    ok = hb == ha and params_equal and buffers_equal
    report(capsys, 7, ok, f"3 epochs, metrics rows identical: {hb == ha}; parameters bitwise equal: {params_equal}; BN statistics equal: {buffers_equal}")


def test_criterion_8_desk_scale_efficacy(capsys, efficacy_runs):
    runs, elapsed = efficacy_runs
    base = np.array([runs[s, "baseline"][-1]["val_acc"] for s in SEEDS])
    full = np.array([runs[s, "full"][-1]["val_acc"] for s in SEEDS])
    gain = float(full.mean() - base.mean())
    wins = int(np.sum(full > base))
    with capsys.disabled():
        for s, b, f in zip(SEEDS, base, full):
            print(f"\n  seed {s}: baseline {b:6.2f}%  full head {f:6.2f}%  delta {f - b:+.2f}")
    ok = gain >= 2.0 and wins >= 4 and elapsed < 1800
    detail = (
        f"mean test acc baseline {base.mean():.2f}% vs full head {full.mean():.2f}% (gain {gain:+.2f} pp, need >= 2); "
        f"improved in {wins}/5 seeds (need >= 4); runtime {elapsed / 60:.1f} min (limit 30)"
    )
    report(capsys, 8, ok, detail)


def test_criterion_9_ablation_grid(capsys, tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--samples-per-class", "8"]) == 0
    expected = {(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
    lines = []
    ok = True
    for grid, keys in (("submodules", ("sste", "acfa", "frcl")), ("dimensions", ("acda", "atda", "asda"))):
        out = tmp_path / f"{grid}.jsonl"
        code = main(["ablate", "--data", str(data), "--grid", grid, "--epochs", "0", "--out", str(out)])
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        combos = {tuple(int(r["ablation"][k]) for k in keys) for r in rows}
        zero_ok = all(r["zero_checks_ok"] for r in rows)
        n_checks = sum(len(r["zero_checks"]) for r in rows)
        good = code == 0 and len(rows) == 8 and combos == expected and zero_ok
        ok &= good
        lines.append(f"{grid}: {len(rows)} rows, all 8 flag combinations: {combos == expected}, {n_checks} zero-contribution checks ok: {zero_ok}")
    report(capsys, 9, ok, "; ".join(lines))


def test_criterion_10_training_sanity(capsys, efficacy_runs):
    runs, _ = efficacy_runs
    ratios = {key: hist[9]["total"] / hist[0]["total"] for key, hist in runs.items()}
    worst_key = max(ratios, key=ratios.get)
    ok = all(r < 0.5 for r in ratios.values())
    report(
        capsys,
        10,
        ok,
        f"epoch-10/epoch-1 total loss over {len(ratios)} runs (5 seeds x 2 arms): worst {ratios[worst_key]:.3f} "
        f"(seed {worst_key[0]}, {worst_key[1]}); need < 0.5 for every run",
    )
