"""Command-line entry point: ``skelhead {synth,train,eval,gradcheck,ablate,export}``.

Exit codes: 0 success, 1 validation or runtime failure (including a failed
gradient check), 2 usage error (unknown flag, bad argument syntax).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, apply_state, read_checkpoint
from .data import DatasetError, SynthConfig, load_dataset, save_dataset, stratified_split, synth_generate, to_batch
from .losses import LossConfig
from .oracle import format_results, run_suite
from .sfhead import Ablation, SFHeadConfig
from .backbone import Backbone, BackboneConfig
from .trainer import (
    MetricsReport,
    Trainer,
    TrainingDivergedError,
    disabled_terms_are_zero,
    evaluate,
    export_features,
    grid_ablations,
    profile,
    with_ablation,
)


CHECKPOINT_NAME = "checkpoint.skck"


class CLIError(Exception):
    """A validation failure reported as ``error: ...`` with exit code 1."""


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _eta(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated reals, got {text!r}")
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated reals, got {len(vals)}")
    return vals


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (manifest.json + data.bin)")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("tiny", "paper"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None, help="default: the profile's epoch count")
    p.add_argument("--batch-size", type=int, default=None, help="default: the profile's batch size")
    p.add_argument("--attach-blocks", type=_int_list, default=None, help="comma list of 1-based block indices")
    p.add_argument("--groups", type=int, default=None, help="channel group count g")
    p.add_argument("--eta", type=_eta, default=None, help="4 comma reals: eta_c,eta_t,eta_s,eta_o")
    defaults = LossConfig()
    for flag, attr in (
        ("--alpha", "alpha"),
        ("--tau", "tau"),
        ("--m-scale", "m_scale"),
        ("--m-margin", "m_margin"),
        ("--gamma", "gamma"),
        ("--epsilon", "epsilon"),
        ("--lambda-con", "lambda_con"),
        ("--lambda-red", "lambda_red"),
    ):
        p.add_argument(flag, type=float, default=getattr(defaults, attr), dest=attr)
    for part in ("sste", "acfa", "frcl", "acda", "atda", "asda"):
        p.add_argument(f"--no-{part}", action="store_true", help=f"disable {part.upper()}")
    p.add_argument("--frl-literal", action="store_true", help="use the printed redundancy-loss form (constant)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelhead", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic ambiguous-action dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-class", type=int, default=SynthConfig.samples_per_class)

    p = sub.add_parser("train", help="train a backbone (and the head) on a dataset")
    _add_data(p)
    p.add_argument("--out", required=True, help="run directory for checkpoint and metrics.jsonl")
    _add_model(p)
    p.add_argument("--dry-run", action="store_true", help="build the model, print parameter counts, exit")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-report", default=None, help="MetricsReport JSON for group deltas")
    p.add_argument("--out", default=None, help="write the MetricsReport JSON here")
    p.add_argument("--split", choices=("test", "all"), default="test")

    p = sub.add_parser("gradcheck", help="run the 64-bit gradient oracle suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", default=None, help="comma list of op names (default: all)")

    p = sub.add_parser("ablate", help="run an ablation grid and print a comparison table")
    _add_data(p)
    p.add_argument("--grid", choices=("submodules", "dimensions"), default="submodules")
    p.add_argument("--out", default=None, help="write the table rows as JSON lines here")
    _add_model(p)

    p = sub.add_parser("export", help="write pooled tap features as CSV")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True, help="1-based tap block index")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "all"), default="all")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(path: str):
    manifest, seqs = load_dataset(path)
    if not seqs:
        raise CLIError(f"dataset {path} is empty")
    x, y = to_batch(seqs, root_joint=0, T_target=manifest.T_target)
    return manifest, x, y


def _ablation(args) -> Ablation:
    return Ablation(**{k: not getattr(args, f"no_{k}") for k in ("sste", "acfa", "frcl", "acda", "atda", "asda")})


def _configs(args, manifest):
    bcfg, tcfg, hcfg = profile(args.profile, manifest.num_classes, manifest.V)
    tcfg = replace(
        tcfg,
        seed=args.seed,
        epochs=args.epochs if args.epochs is not None else tcfg.epochs,
        batch_size=args.batch_size if args.batch_size is not None else tcfg.batch_size,
        ablation=_ablation(args),
    )
    if tcfg.batch_size < 1:
        raise CLIError("--batch-size must be >= 1")
    hcfg = SFHeadConfig(
        g=args.groups if args.groups is not None else hcfg.g,
        eta=args.eta if args.eta is not None else hcfg.eta,
        psi_kernel=hcfg.psi_kernel,
        attach_blocks=args.attach_blocks if args.attach_blocks is not None else hcfg.attach_blocks,
    )
    for b in hcfg.attach_blocks:
        if not 1 <= b <= bcfg.num_blocks:
            raise CLIError(f"attach block {b} outside 1..{bcfg.num_blocks}")
        hcfg.branch_channels(bcfg.block_channels[b - 1])
    lcfg = LossConfig(
        alpha=args.alpha,
        tau=args.tau,
        m_scale=args.m_scale,
        m_margin=args.m_margin,
        gamma=args.gamma,
        epsilon=args.epsilon,
        lambda_con=args.lambda_con,
        lambda_red=args.lambda_red,
        frl_literal=args.frl_literal,
    )
    return bcfg, tcfg, hcfg, lcfg


def _restore(ckpt_path: str, manifest):
    header, state = read_checkpoint(ckpt_path)
    cfg = header["config"]
    bcfg = BackboneConfig(**cfg["backbone"])
    if bcfg.num_classes != manifest.num_classes:
        raise CLIError(f"checkpoint has {bcfg.num_classes} classes, dataset has {manifest.num_classes}")
    model = Backbone(bcfg, manifest.graph.A_norm)
    apply_state(model, None, state)
    return header, model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.samples_per_class < 1:
        raise CLIError("--samples-per-class must be >= 1")
    manifest, seqs = synth_generate(SynthConfig(samples_per_class=args.samples_per_class), args.seed)
    save_dataset(args.out, manifest, seqs)
    print(f"wrote {len(seqs)} samples, {manifest.num_classes} classes to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest, x, y = _load(args.data)
    bcfg, tcfg, hcfg, lcfg = _configs(args, manifest)
    trainer = Trainer(bcfg, manifest.graph.A_norm, tcfg, lcfg, hcfg)
    print(f"backbone parameters: {trainer.model.num_parameters()}")
    print(f"sfhead parameters: {trainer.head.num_parameters()} (attach blocks {list(hcfg.attach_blocks)}, g={hcfg.g})")
    if args.dry_run:
        return 0
    tr, te = stratified_split(y, tcfg.test_fraction, tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = trainer.fit(x[tr], y[tr], x[te], y[te], manifest.class_names, out / "metrics.jsonl")
    trainer.save(out / CHECKPOINT_NAME)
    last = history[-1]
    print(f"epoch {last['epoch']}: total {last['total']:.4f} train_acc {last['train_acc']:.2f} val_acc {last['val_acc']:.2f}")
    print(f"wrote {out / CHECKPOINT_NAME} and {out / 'metrics.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    manifest, x, y = _load(args.data)
    header, model = _restore(args.checkpoint, manifest)
    if args.split == "test":
        train_cfg = header["config"]["train"]
        _, idx = stratified_split(y, train_cfg["test_fraction"], train_cfg["seed"])
        x, y = x[idx], y[idx]
    baseline = None
    if args.baseline_report:
        baseline = MetricsReport.from_json(json.loads(Path(args.baseline_report).read_text(encoding="utf-8")))
        if baseline.class_names != manifest.class_names:
            raise CLIError("baseline report was computed on different classes")
    report = evaluate(model, x, y, manifest.class_names, baseline)
    print(report.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise CLIError("--instances must be >= 1")
    ops = [o.strip() for o in args.ops.split(",")] if args.ops else None
    try:
        results = run_suite(instances=args.instances, seed=args.seed, ops=ops)
    except KeyError as exc:
        raise CLIError(str(exc.args[0]))
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} ops passed")
    return 0


def _flag_string(ab: Ablation, grid: str) -> str:
    keys = ("sste", "acfa", "frcl") if grid == "submodules" else ("acda", "atda", "asda")
    return " ".join(f"{k.upper()}={'on ' if getattr(ab, k) else 'off'}" for k in keys)


def run_ablation_grid(args, manifest, x, y, train: bool = True) -> list[dict]:
    """One row per grid entry: zero-contribution checks, then (if ``train``) a full run."""
    bcfg, tcfg, hcfg, lcfg = _configs(args, manifest)
    tr, te = stratified_split(y, tcfg.test_fraction, tcfg.seed)
    probe = np.sort(tr[: min(len(tr), tcfg.batch_size)])
    rows = []
    for i, ab in enumerate(grid_ablations(args.grid)):
        cfg = with_ablation(tcfg, ab)
        checker = Trainer(bcfg, manifest.graph.A_norm, cfg, lcfg, hcfg)
        checks = disabled_terms_are_zero(checker, x[probe], y[probe])
        trainer = Trainer(bcfg, manifest.graph.A_norm, cfg, lcfg, hcfg)
        history = trainer.fit(x[tr], y[tr], x[te], y[te], manifest.class_names) if train else []
        last = history[-1] if history else {}
        rows.append(
            {
                "row": i + 1,
                "ablation": ab.to_json(),
                "flags": _flag_string(ab, args.grid),
                "val_acc": last.get("val_acc"),
                "con": last.get("con"),
                "red": last.get("red"),
                "zero_checks": checks,
                "zero_checks_ok": all(checks.values()),
            }
        )
    return rows


def cmd_ablate(args) -> int:
    if args.epochs is not None and args.epochs < 0:
        raise CLIError("--epochs must be >= 0")
    manifest, x, y = _load(args.data)
    train = args.epochs != 0
    if not train:
        args.epochs = None  # keep the profile's schedule valid; only the checks run
    rows = run_ablation_grid(args, manifest, x, y, train)
    print(f"{'row':>3s}  {'flags':<34s} {'val_acc':>8s} {'con':>8s} {'red':>8s}  zero-checks")
    for r in rows:
        acc = "-" if r["val_acc"] is None else f"{r['val_acc']:.2f}"
        con = "-" if r["con"] is None else f"{r['con']:.4f}"
        red = "-" if r["red"] is None else f"{r['red']:.4f}"
        status = "ok" if r["zero_checks_ok"] else "FAIL"
        detail = ",".join(k for k in r["zero_checks"]) or "none disabled"
        print(f"{r['row']:>3d}  {r['flags']:<34s} {acc:>8s} {con:>8s} {red:>8s}  {status} ({detail})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    return 0 if all(r["zero_checks_ok"] for r in rows) else 1


def cmd_export(args) -> int:
    manifest, x, y = _load(args.data)
    header, model = _restore(args.checkpoint, manifest)
    if args.split == "test":
        train_cfg = header["config"]["train"]
        _, idx = stratified_split(y, train_cfg["test_fraction"], train_cfg["seed"])
        x, y = x[idx], y[idx]
    n = export_features(model, x, y, args.layer, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (
        CLIError,
        DatasetError,
        CheckpointError,
        TrainingDivergedError,
        ValueError,
        IndexError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
