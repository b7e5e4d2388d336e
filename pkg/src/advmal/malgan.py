"""MalGAN: a generator that learns which features to add to malware.

The generator maps ``[x, z]`` (malware bits plus uniform noise) through one
ReLU layer to per-feature sigmoid scores.  A substitute discriminator is
fitted to the labels a black-box detector assigns, and the generator is
trained to push the discriminator's malware score down.  Adversarial
examples are ``round(G(x, z)) OR x``, so features are only ever added.

During generator updates the discriminator sees the continuous vector
``max(x, G(x, z))``; rounding is applied only for discriminator updates and
black-box evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attacks import BENIGN, MALWARE, AttackResult, classify
from .data import Dataset
from .errors import DataError


@dataclass(frozen=True)
class MalganConfig:
    noise_dim: int = 10
    generator_hidden: int = 256
    discriminator_hidden: int = 256
    epochs: int = 100
    blackbox_epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.noise_dim < 1 or min(self.generator_hidden, self.discriminator_hidden, self.batch_size) < 1:
            raise ValueError("noise_dim, hidden sizes and batch_size must be positive")
        if self.epochs < 0 or self.blackbox_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class MalganArtifacts:
    best_generator: nn.Network
    discriminator: nn.Network
    blackbox: nn.Network
    best_epoch: int
    best_evasion: float
    per_epoch_evasion: list[float] = field(default_factory=list)
    noise_dim: int = 10
    validation_pool: str = "held-out malware"

    @property
    def n_features(self) -> int:
        return self.discriminator.n_features


def blackbox_specs(d: int) -> list[nn.LayerSpec]:
    return nn.dense_specs(d, (256, 128), dropout=0.2)


def train_blackbox(data: Dataset, cfg: MalganConfig) -> nn.Network:
    """The 256/128 ReLU detector with dropout 0.2 that MalGAN tries to fool."""
    data.require_both_classes()
    seed_init, seed_train = np.random.SeedSequence([cfg.seed, 1]).generate_state(2)
    net = nn.init_network(blackbox_specs(data.d), int(seed_init))
    tc = nn.TrainConfig(
        epochs=cfg.blackbox_epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, seed=int(seed_train),
    )
    return nn.train(net, data.X, data.y, tc)


def generator_specs(d: int, cfg: MalganConfig) -> list[nn.LayerSpec]:
    return [
        nn.LayerSpec(d + cfg.noise_dim, cfg.generator_hidden, "relu"),
        nn.LayerSpec(cfg.generator_hidden, d, "sigmoid"),
    ]


def discriminator_specs(d: int, cfg: MalganConfig) -> list[nn.LayerSpec]:
    return [
        nn.LayerSpec(d, cfg.discriminator_hidden, "relu"),
        nn.LayerSpec(cfg.discriminator_hidden, 1, "sigmoid"),
    ]


def binarize(scores: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``round(scores) OR x``; a score of exactly 0.5 rounds down."""
    return np.maximum((scores > 0.5).astype(np.float64), x)


def _generate(generator: nn.Network, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return nn.forward(generator, np.hstack([X, Z]))


def train_malgan(
    malware: np.ndarray,
    benign: np.ndarray,
    blackbox,
    cfg: MalganConfig,
    malware_val: np.ndarray | None = None,
) -> MalganArtifacts:
    """Adversarially train generator and substitute discriminator.

    Per epoch the binarised examples for ``malware_val`` (the training pool if
    not given) are scored by ``blackbox``; the generator snapshot with the
    highest evasion, first occurrence on ties, is kept.
    """
    malware = np.asarray(malware, dtype=np.float64)
    benign = np.asarray(benign, dtype=np.float64)
    if malware.shape[0] == 0 or benign.shape[0] == 0:
        raise DataError("MalGAN needs non-empty malware and benign pools")
    if malware.shape[1] != benign.shape[1]:
        raise DataError("malware and benign pools differ in feature count")
    held_out = malware_val is not None
    val = malware if malware_val is None else np.asarray(malware_val, dtype=np.float64)
    d = malware.shape[1]

    ss = np.random.SeedSequence([cfg.seed, 2])
    g_seed, d_seed, loop_seed, val_seed = ss.generate_state(4)
    gen = nn.init_network(generator_specs(d, cfg), int(g_seed))
    disc = nn.init_network(discriminator_specs(d, cfg), int(d_seed))
    tc = nn.TrainConfig(learning_rate=cfg.learning_rate, seed=cfg.seed)
    g_state = nn.AdamState.zeros_like(gen.parameters())
    d_state = nn.AdamState.zeros_like(disc.parameters())
    rng = np.random.default_rng(int(loop_seed))
    val_noise = np.random.default_rng(int(val_seed))

    best = gen.copy()
    best_epoch, best_evasion = 0, -1.0
    series: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(malware.shape[0])
        for start in range(0, malware.shape[0], cfg.batch_size):
            xm = malware[order[start:start + cfg.batch_size]]
            b = xm.shape[0]
            z = rng.random((b, cfg.noise_dim))
            xb = benign[rng.integers(benign.shape[0], size=b)]
            scores = _generate(gen, xm, z)

            # discriminator: imitate the black box on benign + binarised adversarial rows
            d_in = np.vstack([xb, binarize(scores, xm)])
            d_target = (classify(blackbox, d_in) == MALWARE).astype(np.float64)
            cache = nn.forward_cached(disc, d_in)
            _, dz = nn.loss_and_grad(disc, cache, d_target[:, None])
            gW, gb, _ = nn.backward(disc, cache, dz)
            nn.adam_step(disc.parameters(), _interleave(gW, gb), d_state, tc)

            # generator: drive the discriminator towards "benign" on continuous outputs
            g_cache = nn.forward_cached(gen, np.hstack([xm, z]))
            scores = g_cache.output
            cont = np.maximum(xm, scores)
            d_cache = nn.forward_cached(disc, cont)
            _, dz = nn.loss_and_grad(disc, d_cache, np.zeros((b, 1)))
            _, _, grad_cont = nn.backward(disc, d_cache, dz, need_params=False)
            grad_scores = grad_cont * (xm == 0)
            dz_g = nn.head_grad_to_logits(gen, g_cache, grad_scores)
            gW, gb, _ = nn.backward(gen, g_cache, dz_g)
            nn.adam_step(gen.parameters(), _interleave(gW, gb), g_state, tc)

        z_val = val_noise.random((val.shape[0], cfg.noise_dim))
        adv = binarize(_generate(gen, val, z_val), val)
        evasion = float(np.mean(classify(blackbox, adv) == BENIGN))
        series.append(evasion)
        if evasion > best_evasion:
            best, best_epoch, best_evasion = gen.copy(), epoch, evasion

    if not series:
        best_evasion = 0.0
    return MalganArtifacts(
        best_generator=best,
        discriminator=disc,
        blackbox=blackbox if isinstance(blackbox, nn.Network) else None,
        best_epoch=best_epoch,
        best_evasion=best_evasion,
        per_epoch_evasion=series,
        noise_dim=cfg.noise_dim,
        validation_pool="held-out malware" if held_out else "training malware",
    )


def _interleave(gW, gb):
    return [g for pair in zip(gW, gb) for g in pair]


def malgan_noise(seed: int, row_id: int, noise_dim: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(row_id)]).random(noise_dim)


def malgan_attack(art: MalganArtifacts, victim, X, seed: int, row_ids=None) -> list[AttackResult]:
    """Generate one adversarial example per row and judge it with ``victim``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        return []
    d = art.best_generator.n_features - art.noise_dim
    if X.shape[1] != d:
        raise DataError(f"expected {d} features, got {X.shape[1]}")
    ids = np.arange(X.shape[0]) if row_ids is None else np.asarray(row_ids)
    Z = np.vstack([malgan_noise(seed, r, art.noise_dim) for r in ids])
    X_adv = binarize(_generate(art.best_generator, X, Z), X)
    evaded = classify(victim, X_adv) == BENIGN
    changed = np.sum(X_adv != X, axis=1)
    return [
        AttackResult(X_adv[i].astype(np.uint8), int(changed[i]), bool(evaded[i]), 1)
        for i in range(X.shape[0])
    ]


def malgan_generate(art: MalganArtifacts, x, seed: int, victim=None, row_id: int = 0) -> AttackResult:
    """Single-sample generation; ``victim`` defaults to the artifacts' black box."""
    victim = art.blackbox if victim is None else victim
    return malgan_attack(art, victim, np.atleast_2d(x), seed, [row_id])[0]


# --------------------------------------------------------------------------- persistence

def save_artifacts(art: MalganArtifacts, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_network(art.best_generator, directory / "generator.json")
    nn.save_network(art.discriminator, directory / "discriminator.json")
    if art.blackbox is not None:
        nn.save_network(art.blackbox, directory / "blackbox.json")
    manifest = {
        "best_epoch": art.best_epoch,
        "best_evasion": art.best_evasion,
        "per_epoch_evasion": art.per_epoch_evasion,
        "noise_dim": art.noise_dim,
        "validation_pool": art.validation_pool,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_artifacts(directory) -> MalganArtifacts:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    bb_path = directory / "blackbox.json"
    return MalganArtifacts(
        best_generator=nn.load_network(directory / "generator.json"),
        discriminator=nn.load_network(directory / "discriminator.json"),
        blackbox=nn.load_network(bb_path) if bb_path.exists() else None,
        best_epoch=manifest["best_epoch"],
        best_evasion=manifest["best_evasion"],
        per_epoch_evasion=list(manifest["per_epoch_evasion"]),
        noise_dim=manifest["noise_dim"],
        validation_pool=manifest["validation_pool"],
    )

