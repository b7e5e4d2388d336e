"""Experiment orchestration, metrics and report rendering.

Malware is the positive class: FNR is the share of malware predicted benign
and FPR the share of benign predicted malware.  Evasion of an attack is the
share of attacked test malware classified benign afterwards; the "natural"
row is the unattacked baseline, so its evasion equals the model's FNR.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attacks import BENIGN, MALWARE, AttackKind, AttackResult, classify, run_attack
from .config import ExperimentConfig
from .data import Dataset, SplitSpec, generate_synthetic, load_dataset, select_k_best, split_dataset
from .defenses import (
    Wrapped, adversarial_train, distill_train, ensemble_train, fit_network, rfn_train,
)
from .errors import AdvmalError, ConfigError, DataError
from .malgan import malgan_attack, train_blackbox, train_malgan

log = logging.getLogger(__name__)

DEGENERATE_FPR = 0.99
NATURAL = "natural"
PREDICTOR_LABELS = {
    "undefended": "undef.",
    "distillation": "Dist.",
    "rfn": "RFN",
    "adv_training": "AT",
    "ensemble": "Ens.",
}
ATTACKER_VISIBILITY = {
    "distillation": "gradients of the deployed temperature-1 student",
    "rfn": "a fresh nullification mask per gradient query and per prediction",
    "ensemble": "gradients of the mean member probability",
    "malgan": "generator trained against a separate black-box detector; examples judged by each predictor",
}


@dataclass
class Metrics:
    acc: float
    fnr: float
    fpr: float
    tpr: float
    tnr: float


@dataclass
class AttackEvalRow:
    attack: str
    acc: float
    acc_adv: float
    fnr: float
    fnr_adv: float
    avg_change: float
    evasion: float


@dataclass
class PredictorReport:
    name: str
    metrics: Metrics
    rows: list[AttackEvalRow]
    flags: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return PREDICTOR_LABELS.get(self.name, self.name)


@dataclass
class Report:
    predictors: list[PredictorReport]
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"predictors": [asdict(p) for p in self.predictors], "manifest": self.manifest}

    @classmethod
    def from_dict(cls, doc: dict) -> "Report":
        preds = [
            PredictorReport(
                p["name"], Metrics(**p["metrics"]), [AttackEvalRow(**r) for r in p["rows"]], list(p["flags"])
            )
            for p in doc["predictors"]
        ]
        return cls(preds, doc.get("manifest", {}))


# --------------------------------------------------------------------------- metrics

def metrics_from_predictions(pred_labels: np.ndarray, y: np.ndarray) -> Metrics:
    pred_labels = np.asarray(pred_labels)
    y = np.asarray(y)
    mal, ben = y == MALWARE, y == BENIGN
    if not mal.any() or not ben.any():
        raise DataError("evaluation needs both benign and malware samples")
    tpr = float(np.mean(pred_labels[mal] == MALWARE))
    tnr = float(np.mean(pred_labels[ben] == BENIGN))
    return Metrics(
        acc=float(np.mean(pred_labels == y)), fnr=1.0 - tpr, fpr=1.0 - tnr, tpr=tpr, tnr=tnr,
    )


def evaluate_model(pred, test: Dataset) -> Metrics:
    return metrics_from_predictions(classify(pred, test.X), test.y)


def is_degenerate(m: Metrics, threshold: float = DEGENERATE_FPR) -> bool:
    """True when a model flags (almost) every benign sample as malware."""
    return m.fpr >= threshold


def natural_row(metrics: Metrics) -> AttackEvalRow:
    return AttackEvalRow(NATURAL, metrics.acc, metrics.acc, metrics.fnr, metrics.fnr, 0.0, metrics.fnr)


def evaluate_attack(
    pred,
    results: Sequence[AttackResult],
    test: Dataset,
    attack: str = "",
    natural_labels: np.ndarray | None = None,
) -> AttackEvalRow:
    """Score attack results aligned with the malware rows of ``test`` (in order).

    Benign rows keep their natural predictions; ``acc_adv`` counts every
    malware row whose adversarial version is still detected.
    """
    mal = test.y == MALWARE
    if len(results) != int(mal.sum()):
        raise DataError(f"{len(results)} attack results for {int(mal.sum())} malware rows")
    labels = classify(pred, test.X) if natural_labels is None else np.asarray(natural_labels)
    base = metrics_from_predictions(labels, test.y)
    evaded = np.array([r.evaded for r in results], dtype=bool)
    changes = np.array([r.n_changed for r in results], dtype=np.float64)
    benign_correct = int(np.sum(labels[~mal] == BENIGN))
    acc_adv = (benign_correct + int(np.sum(~evaded))) / test.n
    evasion = float(evaded.mean()) if evaded.size else 0.0
    return AttackEvalRow(
        attack=attack, acc=base.acc, acc_adv=acc_adv, fnr=base.fnr, fnr_adv=evasion,
        avg_change=float(changes.mean()) if changes.size else 0.0, evasion=evasion,
    )


# --------------------------------------------------------------------------- pipeline

def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@contextlib.contextmanager
def stage(name: str):
    log.info("stage: %s", name)
    try:
        yield
    except AdvmalError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def load_experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, dict]:
    if cfg.data_path is not None:
        ds = load_dataset(cfg.data_path)
        info = {"source": cfg.data_path.name}
    else:
        ds = generate_synthetic(cfg.synth)
        info = {"source": "synthetic"}
    info.update(n=ds.n, d=ds.d)
    if cfg.feature_k is not None:
        keep, ds = select_k_best(ds, cfg.feature_k)
        info["selected_features"] = keep
    return ds, info


def prepare_splits(cfg: ExperimentConfig) -> tuple[tuple[Dataset, Dataset, Dataset], dict]:
    with stage("load data"):
        ds, data_info = load_experiment_data(cfg)
        ds.require_both_classes()
    with stage("split"):
        parts = split_dataset(ds, SplitSpec(seed=derive_seed(cfg.seed, 1)))
        parts[2].require_both_classes()
    return parts, data_info


def victim_arch(cfg: ExperimentConfig, d: int) -> list[nn.LayerSpec]:
    return nn.dense_specs(d, cfg.victim_hidden)


def train_victim(cfg: ExperimentConfig, train: Dataset) -> Wrapped:
    with stage("train victim"):
        return Wrapped(fit_network(victim_arch(cfg, train.d), train.X, train.y, cfg.train))


def train_defense(cfg: ExperimentConfig, name: str, train: Dataset, index: int = 0):
    """Fit one hardened predictor; ``index`` separates the seed streams of defenses."""
    arch = victim_arch(cfg, train.d)
    d = cfg.defense
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, 3, index))
    with stage(f"train {name}"):
        if name == "distillation":
            return distill_train(train, arch, d.distill_temperature, _epochs(tcfg, d.distill_epochs))
        if name == "rfn":
            return rfn_train(train, arch, d.rfn, _epochs(tcfg, d.rfn_epochs))
        if name == "adv_training":
            return adversarial_train(train, arch, d.adv_inner, _epochs(tcfg, d.adv_epochs))
        if name == "ensemble":
            return ensemble_train(train, d.ensemble, tcfg)
    raise ConfigError(f"unknown defense {name!r}")


def _epochs(tcfg: nn.TrainConfig, epochs: int | None) -> nn.TrainConfig:
    return tcfg if epochs is None else replace(tcfg, epochs=epochs)


def train_predictors(cfg: ExperimentConfig, train: Dataset) -> dict[str, object]:
    preds: dict[str, object] = {"undefended": train_victim(cfg, train)}
    for i, name in enumerate(cfg.defenses):
        preds[name] = train_defense(cfg, name, train, i)
    return preds


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Data -> optional feature selection -> split -> victim + defenses -> attack grid."""
    (train, val, test), data_info = prepare_splits(cfg)
    preds = train_predictors(cfg, train)

    manifest: dict = {
        "config": cfg.describe(),
        "data": {**data_info, "train": train.n, "val": val.n, "test": test.n},
        "attacker_visibility": {k: v for k, v in ATTACKER_VISIBILITY.items()
                                if k in cfg.defenses or k == "malgan"},
        "seeding": "cell seed = f(experiment seed, attack seed, predictor index, attack index)",
    }

    art = None
    if any(a.kind is AttackKind.MALGAN for a in cfg.attacks):
        mcfg = replace(cfg.malgan, seed=derive_seed(cfg.seed, 4))
        with stage("train malgan"):
            blackbox = train_blackbox(train, mcfg)
            art = train_malgan(train.malware(), train.benign(), blackbox, mcfg, malware_val=val.malware())
        manifest["malgan"] = {
            "validation_pool": art.validation_pool,
            "best_epoch": art.best_epoch,
            "best_evasion": art.best_evasion,
            "per_epoch_evasion": art.per_epoch_evasion,
            "blackbox_natural_fnr": float(np.mean(classify(blackbox, val.malware()) == BENIGN)),
        }

    mal_rows = np.flatnonzero(test.y == MALWARE)
    X_mal = test.X[mal_rows]
    reports = []
    for pi, (name, pred) in enumerate(preds.items()):
        with stage(f"evaluate {name}"):
            labels = classify(pred.seeded(derive_seed(cfg.seed, 5, pi, 0)), test.X)
            metrics = metrics_from_predictions(labels, test.y)
            rows = [natural_row(metrics)]
            for ai, acfg in enumerate(cfg.attacks, start=1):
                cell_seed = derive_seed(cfg.seed, acfg.seed, pi, ai)
                cell_pred = pred.seeded(cell_seed)
                if acfg.kind is AttackKind.MALGAN:
                    results = malgan_attack(art, cell_pred, X_mal, cell_seed, mal_rows)
                else:
                    results = run_attack(cell_pred, X_mal, acfg.with_seed(cell_seed), mal_rows)
                rows.append(evaluate_attack(cell_pred, results, test, acfg.kind.value, labels))
        flags = [f"degenerate: FPR {metrics.fpr:.2f} >= {DEGENERATE_FPR}"] if is_degenerate(metrics) else []
        reports.append(PredictorReport(name, metrics, rows, flags))
    return Report(reports, manifest)


# --------------------------------------------------------------------------- rendering

ROW_COLUMNS = ("Attack", "acc", "acc adv", "FNR", "FNR adv", "change", "evasion")
METRIC_COLUMNS = ("Predictor", "acc", "FNR", "FPR", "TPR", "TNR")


def pct(v: float) -> str:
    return f"{100.0 * v:.1f}"


def frac(v: float) -> str:
    return f"{v:.2f}"


def _row_cells(r: AttackEvalRow) -> list[str]:
    return [r.attack, frac(r.acc), frac(r.acc_adv), frac(r.fnr), frac(r.fnr_adv), frac(r.avg_change), pct(r.evasion)]


def _metric_cells(p: PredictorReport) -> list[str]:
    m = p.metrics
    return [p.label, frac(m.acc), frac(m.fnr), frac(m.fpr), frac(m.tpr), frac(m.tnr)]


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def evasion_grid(report: Report) -> tuple[list[str], list[list[str]]]:
    """Attack x predictor evasion table in percent."""
    header = ["Attack", *[p.label for p in report.predictors]]
    attacks = [r.attack for r in report.predictors[0].rows]
    lookup = [{r.attack: r for r in p.rows} for p in report.predictors]
    rows = [[a, *[pct(l[a].evasion) if a in l else "" for l in lookup]] for a in attacks]
    return header, rows


def format_markdown(report: Report) -> str:
    if not report.predictors:
        raise DataError("cannot render an empty report")
    parts = ["# Evasion report", "", "## Models", "",
             _md_table(METRIC_COLUMNS, [_metric_cells(p) for p in report.predictors]), ""]
    flagged = [(p.label, f) for p in report.predictors for f in p.flags]
    if flagged:
        parts += ["Flags:", ""] + [f"- {label}: {f}" for label, f in flagged] + [""]
    header, rows = evasion_grid(report)
    parts += ["## Evasion (%)", "", _md_table(header, rows), ""]
    for p in report.predictors:
        parts += [f"## {p.label}", "", _md_table(ROW_COLUMNS, [_row_cells(r) for r in p.rows]), ""]
    return "\n".join(parts)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def format_csv(report: Report) -> dict[str, str]:
    """``report.csv`` (one row per predictor x attack) and ``metrics.csv``."""
    if not report.predictors:
        raise DataError("cannot render an empty report")
    rows = [[p.label, *_row_cells(r)] for p in report.predictors for r in p.rows]
    metrics = [[*_metric_cells(p), "; ".join(p.flags)] for p in report.predictors]
    return {
        "report.csv": _csv_text(["Predictor", *ROW_COLUMNS], rows),
        "metrics.csv": _csv_text([*METRIC_COLUMNS, "flags"], metrics),
    }


def render_report(report: Report, out_dir, formats: Sequence[str] = ("csv", "markdown")) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if "markdown" in formats:
            path = out_dir / "report.md"
            path.write_text(format_markdown(report))
            written.append(path)
        if "csv" in formats:
            for name, text in format_csv(report).items():
                path = out_dir / name
                path.write_text(text)
                written.append(path)
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}") from exc
    return written


def save_report(report: Report, out_dir) -> Path:
    """Machine-readable results that ``render_report`` can re-render later."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_report(path) -> Report:
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    try:
        return Report.from_dict(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read results from {path}: {exc}") from exc
