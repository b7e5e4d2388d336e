"""Command line entry point: ``advmal {synth,train,attack,experiment,report}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training or
attack failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .attacks import AttackConfig, AttackKind, run_attack
from .config import DEFENSE_KINDS, ExperimentConfig, load_config, parse_attack_campaign
from .data import MALWARE, Dataset, generate_synthetic, load_dataset, save_csv, save_sparse
from .defenses import load_predictor, save_predictor
from .errors import AdvmalError, ConfigError

log = logging.getLogger("advmal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "data", None):
        cfg = replace(cfg, data_path=Path(args.data))
    if args.out:
        cfg = replace(cfg, out_dir=Path(args.out))
    return cfg


def _formats(args) -> tuple[str, ...]:
    return (args.format,) if args.format else ("csv", "markdown")


def cmd_synth(args) -> int:
    cfg = _experiment_config(args)
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    ds = generate_synthetic(synth)
    out = Path(args.out or ".")
    paths = [save_csv(ds, out / "synthetic.csv"), save_sparse(ds, out / "synthetic.svm")]
    for p in paths:
        print(p)
    return 0


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    (train, _, test), _ = harness.prepare_splits(cfg)
    if args.defense == "none":
        pred = harness.train_victim(cfg, train)
    else:
        pred = harness.train_defense(cfg, args.defense, train)
    out = Path(args.out or cfg.out_dir)
    save_predictor(pred, out)
    m = harness.evaluate_model(pred.seeded(cfg.seed), test)
    (out / "metrics.json").write_text(json.dumps(m.__dict__, indent=2, sort_keys=True) + "\n")
    print(f"acc {m.acc:.4f}  FNR {m.fnr:.4f}  FPR {m.fpr:.4f}  -> {out}")
    return 0


def _campaign(args) -> AttackConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from exc
        acfg = parse_attack_campaign(text)
    elif args.kind:
        acfg = AttackConfig(AttackKind(args.kind))
    else:
        raise ConfigError("attack needs --kind or --config")
    try:
        if args.budget is not None:
            acfg = replace(acfg, budget=args.budget)
        if args.step_size is not None:
            acfg = replace(acfg, step_size=args.step_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        acfg = acfg.with_seed(args.seed)
    return acfg


def cmd_attack(args) -> int:
    acfg = _campaign(args)
    if acfg.kind is AttackKind.MALGAN:
        raise ConfigError("malgan needs a trained generator; run it through `experiment`")
    pred = load_predictor(args.model).seeded(acfg.seed)
    ds: Dataset = load_dataset(args.data)
    rows = np.flatnonzero(ds.y == MALWARE)
    results = run_attack(pred, ds.X[rows], acfg, rows)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attack_results.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "evaded", "n_changed", "iterations_used"])
        for r, res in zip(rows, results):
            w.writerow([int(r), int(res.evaded), res.n_changed, res.iterations_used])
    adv = ds.X.copy()
    if results:
        adv[rows] = np.vstack([r.x_adv for r in results])
    save_csv(Dataset(adv, ds.y, ds.feature_names), out / "adversarial.csv")
    ev = np.mean([r.evaded for r in results]) if results else 0.0
    print(f"{acfg.kind.value}: evasion {100 * ev:.1f}% over {len(results)} malware rows -> {path}")
    return 0


def cmd_experiment(args) -> int:
    if not args.config:
        raise ConfigError("experiment needs --config")
    cfg = _experiment_config(args)
    report = harness.run_experiment(cfg)
    harness.save_report(report, cfg.out_dir)
    for p in harness.render_report(report, cfg.out_dir, _formats(args)):
        print(p)
    return 0


def cmd_report(args) -> int:
    src = Path(args.results)
    report = harness.load_report(src)
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent)
    for p in harness.render_report(report, out, _formats(args)):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advmal", description="Adversarial examples and defenses for binary malware features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_help="experiment config (INI)"):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    common(sub.add_parser("synth", help="write the synthetic dataset")).set_defaults(func=cmd_synth)

    t = common(sub.add_parser("train", help="train the victim or one defense"))
    t.add_argument("--defense", choices=("none", *DEFENSE_KINDS), default="none")
    t.add_argument("--data", help="dataset file (CSV or sparse); synthetic if omitted")
    t.set_defaults(func=cmd_train)

    a = common(sub.add_parser("attack", help="attack the malware rows of a dataset"), "attack campaign file")
    a.add_argument("--model", required=True, help="directory written by `train`")
    a.add_argument("--data", required=True)
    a.add_argument("--kind", choices=[k.value for k in AttackKind])
    a.add_argument("--budget", type=int)
    a.add_argument("--step-size", type=float)
    a.set_defaults(func=cmd_attack)

    e = common(sub.add_parser("experiment", help="run the full predictor x attack grid"))
    e.add_argument("--format", choices=("csv", "markdown"))
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="re-render saved results")
    r.add_argument("results", help="results.json or the directory holding it")
    r.add_argument("--out")
    r.add_argument("--format", choices=("csv", "markdown"))
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AdvmalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
