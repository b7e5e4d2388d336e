"""Hardened predictors: distillation, adversarial training, ensembles, RFN.

Every predictor exposes the same surface as :class:`advmal.nn.Network`
(``predict_proba``, ``jacobian``, ``loss_gradient``, ``n_features``) so the
attacks and the harness treat them interchangeably.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attacks import ADD_ONLY, AttackConfig, AttackKind, attack_matrix, row_rng
from .data import MALWARE, Dataset
from .errors import ConfigError, DataError


def fit_network(specs: Sequence[nn.LayerSpec], X, y, cfg: nn.TrainConfig, batch_transform=None,
                temperature: float = 1.0, history=None) -> nn.Network:
    """Initialise from ``cfg.seed`` and train; the reference "plain training" path."""
    net = nn.init_network(specs, cfg.seed, temperature)
    return nn.train(net, X, y, cfg, batch_transform=batch_transform, history=history)


class Wrapped:
    """Predictor delegating to a single network."""

    kind = "plain"

    def __init__(self, network: nn.Network):
        self.network = network

    @property
    def n_features(self) -> int:
        return self.network.n_features

    def predict_proba(self, X):
        return self.network.predict_proba(X)

    def jacobian(self, X):
        return self.network.jacobian(X)

    def loss_gradient(self, X, y):
        return self.network.loss_gradient(X, y)

    def seeded(self, seed: int):
        return self

    def networks(self) -> dict[str, nn.Network]:
        return {"network": self.network}

    def manifest(self) -> dict:
        return {"kind": self.kind}


# --------------------------------------------------------------------------- distillation

class DistilledNet(Wrapped):
    kind = "distillation"

    def __init__(self, network: nn.Network, train_temperature: float, teacher: nn.Network | None = None):
        super().__init__(network)
        self.train_temperature = float(train_temperature)
        self.teacher = teacher

    def networks(self):
        nets = {"network": self.network}
        if self.teacher is not None:
            nets["teacher"] = self.teacher
        return nets

    def manifest(self):
        return {"kind": self.kind, "temperature": self.train_temperature}


def soft_labels(teacher: nn.Network, X, temperature: float) -> np.ndarray:
    return nn.forward(teacher, np.atleast_2d(np.asarray(X, dtype=np.float64)), temperature)


def distill_train(data: Dataset, arch: Sequence[nn.LayerSpec], T: float, cfg: nn.TrainConfig) -> DistilledNet:
    """Teacher and student of the same architecture, both trained at temperature ``T``.

    The student learns the teacher's temperature-``T`` soft labels and is
    deployed at temperature 1.
    """
    if not T > 0:
        raise ConfigError(f"distillation temperature must be positive, got {T}")
    data.require_both_classes()
    teacher_seed, student_seed = np.random.SeedSequence([cfg.seed, 10]).generate_state(2)
    hard = replace(cfg, loss="cross_entropy", seed=int(teacher_seed))
    teacher = fit_network(arch, data.X, data.y, hard, temperature=T)
    soft = soft_labels(teacher, data.X, T)
    student = fit_network(
        arch, data.X, soft, replace(cfg, loss="soft_cross_entropy", seed=int(student_seed)), temperature=T,
    )
    return DistilledNet(student.with_temperature(1.0), T, teacher)


# --------------------------------------------------------------------------- adversarial training

class AdvTrainedNet(Wrapped):
    kind = "adv_training"

    def __init__(self, network: nn.Network, inner: AttackConfig):
        super().__init__(network)
        self.inner = inner

    def manifest(self):
        return {"kind": self.kind, "inner": _attack_doc(self.inner)}


def adversarial_batch_transform(inner: AttackConfig):
    """Replace each malware row of a batch by the inner maximiser against the current net."""

    def transform(net, Xb, yb, rng):
        mal = np.asarray(yb) == MALWARE
        if not mal.any():
            return Xb
        seed = int(rng.integers(2**63))
        rows = np.flatnonzero(mal)
        rngs = [row_rng(seed, i) for i in range(rows.size)]
        x_adv, _ = attack_matrix(net, Xb[rows], inner, rngs)
        out = Xb.copy()
        out[rows] = x_adv
        return out

    return transform


def adversarial_train(data: Dataset, arch: Sequence[nn.LayerSpec], inner: AttackConfig,
                      cfg: nn.TrainConfig, history=None) -> AdvTrainedNet:
    """Minimise the loss at worst-case feasible malware found by ``inner`` each minibatch."""
    if inner.kind is AttackKind.MALGAN:
        raise ConfigError("malgan cannot serve as the inner maximiser")
    if inner.kind not in ADD_ONLY:
        raise ConfigError(f"inner attack {inner.kind} may remove features; an add-only kind is required")
    data.require_both_classes()
    net = fit_network(arch, data.X, data.y, cfg, batch_transform=adversarial_batch_transform(inner), history=history)
    return AdvTrainedNet(net, inner)


# --------------------------------------------------------------------------- ensembles

DEFAULT_MEMBERS = ((1000, 1000), (64,) * 8, (256, 128))


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[tuple[int, ...], ...] = DEFAULT_MEMBERS
    dropout: float = 0.5
    epochs: int = 200
    aggregation: str = "mean_probability"

    def __post_init__(self):
        if len(self.members) < 2:
            raise ConfigError("an ensemble needs at least two members")
        if self.aggregation not in ("mean_probability", "majority_vote"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


class Ensemble:
    kind = "ensemble"

    def __init__(self, members: Sequence[nn.Network], aggregation: str = "mean_probability"):
        if len(members) < 1:
            raise ConfigError("ensemble without members")
        self.members = list(members)
        self.aggregation = aggregation

    @property
    def n_features(self) -> int:
        return self.members[0].n_features

    def _mean(self, X):
        return np.mean([m.predict_proba(X) for m in self.members], axis=0)

    def predict_proba(self, X):
        if self.aggregation == "majority_vote":
            votes = np.stack([np.argmax(m.predict_proba(X), axis=1) for m in self.members])
            C = self.members[0].n_outputs
            return np.stack([np.mean(votes == c, axis=0) for c in range(C)], axis=1)
        return self._mean(X)

    # Gradients always follow the mean probability, which is what the attacker sees.
    def jacobian(self, X):
        return np.mean([m.jacobian(X) for m in self.members], axis=0)

    def loss_gradient(self, X, y):
        X = np.atleast_2d(X)
        y = np.broadcast_to(np.asarray(y), (X.shape[0],)).astype(np.int64)
        p = self._mean(X)
        J = self.jacobian(X)
        rows = np.arange(X.shape[0])
        p_y = np.clip(p[rows, y], nn.PROB_FLOOR, 1.0)
        return -J[rows, y, :] / p_y[:, None]

    def seeded(self, seed: int):
        return self

    def networks(self):
        return {f"member{i}": m for i, m in enumerate(self.members)}

    def manifest(self):
        return {"kind": self.kind, "aggregation": self.aggregation, "members": len(self.members)}


def ensemble_train(data: Dataset, spec: EnsembleSpec, cfg: nn.TrainConfig) -> Ensemble:
    """Train each member independently with its own seed drawn from ``cfg.seed``."""
    data.require_both_classes()
    seeds = np.random.SeedSequence([cfg.seed, 20]).generate_state(len(spec.members))
    members = []
    for hidden, seed in zip(spec.members, seeds):
        specs = nn.dense_specs(data.d, hidden, dropout=spec.dropout)
        members.append(fit_network(specs, data.X, data.y, replace(cfg, epochs=spec.epochs, seed=int(seed))))
    return Ensemble(members, spec.aggregation)


# --------------------------------------------------------------------------- random feature nullification

@dataclass(frozen=True)
class RFNConfig:
    rate: float = 0.1
    mode: str = "exact"
    inference_masks: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"nullification rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("exact", "bernoulli"):
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.inference_masks < 1:
            raise ConfigError("inference_masks must be >= 1")


def nullification_masks(rng: np.random.Generator, n: int, d: int, rate: float, mode: str = "exact") -> np.ndarray:
    """``n`` independent 0/1 masks of width ``d``.

    ``exact`` zeroes ``floor(rate * d)`` positions chosen uniformly without
    replacement; ``bernoulli`` zeroes each position with probability ``rate``.
    """
    if mode == "bernoulli":
        return (rng.random((n, d)) >= rate).astype(np.float64)
    k = int(np.floor(rate * d))
    mask = np.ones((n, d))
    if k:
        zeros = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        np.put_along_axis(mask, zeros, 0.0, axis=1)
    return mask


class RFNNet(Wrapped):
    """Network whose inputs are multiplied by a fresh random mask on every query."""

    kind = "rfn"

    def __init__(self, network: nn.Network, rfn: RFNConfig):
        super().__init__(network)
        self.rfn = rfn
        self.rng = np.random.default_rng(rfn.seed)

    def seeded(self, seed: int) -> "RFNNet":
        out = copy.copy(self)
        out.rng = np.random.default_rng(seed)
        return out

    def _masks(self, n):
        return nullification_masks(self.rng, n, self.n_features, self.rfn.rate, self.rfn.mode)

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros((X.shape[0], self.network.n_outputs))
        for _ in range(self.rfn.inference_masks):
            total += self.network.predict_proba(X * self._masks(X.shape[0]))
        return total / self.rfn.inference_masks

    def jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        M = self._masks(X.shape[0])
        return self.network.jacobian(X * M) * M[:, None, :]

    def loss_gradient(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        M = self._masks(X.shape[0])
        return self.network.loss_gradient(X * M, y) * M

    def manifest(self):
        return {"kind": self.kind, "rate": self.rfn.rate, "mode": self.rfn.mode,
                "inference_masks": self.rfn.inference_masks, "seed": self.rfn.seed}


def rfn_batch_transform(rfn: RFNConfig):
    def transform(net, Xb, yb, rng):
        return Xb * nullification_masks(rng, Xb.shape[0], Xb.shape[1], rfn.rate, rfn.mode)

    return transform


def rfn_train(data: Dataset, arch: Sequence[nn.LayerSpec], rfn: RFNConfig, cfg: nn.TrainConfig) -> RFNNet:
    """Train with a fresh mask per instance per epoch."""
    data.require_both_classes()
    net = fit_network(arch, data.X, data.y, cfg, batch_transform=rfn_batch_transform(rfn))
    return RFNNet(net, rfn)


def rfn_predict(pred: RFNNet, x, seed: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = pred.seeded(seed).predict_proba(np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


# --------------------------------------------------------------------------- persistence

def _attack_doc(cfg: AttackConfig) -> dict:
    return {"kind": cfg.kind.value, "budget": cfg.budget, "step_size": cfg.step_size, "seed": cfg.seed}


def as_predictor(obj):
    return Wrapped(obj) if isinstance(obj, nn.Network) else obj


def save_predictor(pred, directory) -> Path:
    """Checkpoint files for every network plus ``manifest.json``."""
    pred = as_predictor(pred)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, net in pred.networks().items():
        nn.save_network(net, directory / f"{name}.json")
        files[name] = f"{name}.json"
    manifest = {**pred.manifest(), "files": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_predictor(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read predictor manifest in {directory}: {exc}") from exc
    nets = {name: nn.load_network(directory / f) for name, f in manifest["files"].items()}
    kind = manifest["kind"]
    if kind == "plain":
        return Wrapped(nets["network"])
    if kind == "distillation":
        return DistilledNet(nets["network"], manifest["temperature"], nets.get("teacher"))
    if kind == "adv_training":
        return AdvTrainedNet(nets["network"], AttackConfig(**manifest["inner"]))
    if kind == "ensemble":
        members = [nets[f"member{i}"] for i in range(manifest["members"])]
        return Ensemble(members, manifest["aggregation"])
    if kind == "rfn":
        rfn = RFNConfig(manifest["rate"], manifest["mode"], manifest["inference_masks"], manifest["seed"])
        return RFNNet(nets["network"], rfn)
    raise DataError(f"unknown predictor kind {kind!r}")

