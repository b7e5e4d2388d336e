"""Experiment configuration read from INI-style files.

Example::

    [experiment]
    seed = 1
    attacks = all
    defenses = distillation, rfn, adv_training, ensemble

    [data]
    source = synthetic
    n_benign = 2000
    n_malware = 2000

    [victim]
    epochs = 100

    [attack.dfgsm_k]
    budget = 50
    step_size = 0.05

    [defense.adv_training]
    inner = dfgsm_k
    inner_budget = 10
    inner_step_size = 0.1

Every key is optional; missing keys take the defaults below.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import nn
from .attacks import TABLE_ORDER, AttackConfig, AttackKind
from .data import SynthSpec
from .defenses import DEFAULT_MEMBERS, EnsembleSpec, RFNConfig
from .errors import ConfigError
from .malgan import MalganConfig

DEFENSE_KINDS = ("distillation", "rfn", "adv_training", "ensemble")


@dataclass
class DefenseSettings:
    distill_temperature: float = 10.0
    distill_epochs: int | None = None
    rfn: RFNConfig = field(default_factory=RFNConfig)
    rfn_epochs: int | None = None
    adv_inner: AttackConfig = field(default_factory=lambda: AttackConfig(AttackKind.DFGSM_K))
    adv_epochs: int | None = None
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)


@dataclass
class ExperimentConfig:
    seed: int = 1
    data_path: Path | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    feature_k: int | None = None
    victim_hidden: tuple[int, ...] = nn.VICTIM_HIDDEN
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    attacks: list[AttackConfig] = field(default_factory=lambda: [AttackConfig(k) for k in TABLE_ORDER])
    defenses: list[str] = field(default_factory=lambda: list(DEFENSE_KINDS))
    defense: DefenseSettings = field(default_factory=DefenseSettings)
    malgan: MalganConfig = field(default_factory=MalganConfig)
    out_dir: Path = Path("results")

    def __post_init__(self):
        for d in self.defenses:
            if d not in DEFENSE_KINDS:
                raise ConfigError(f"unknown defense {d!r}; choose from {', '.join(DEFENSE_KINDS)}")
        if len(set(self.defenses)) != len(self.defenses):
            raise ConfigError("defenses listed more than once")
        kinds = [a.kind for a in self.attacks]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("attacks listed more than once")

    def describe(self) -> dict:
        """Plain, deterministic dict of the resolved settings (for manifests)."""
        return {
            "seed": self.seed,
            "data": str(self.data_path) if self.data_path else {"synthetic": _plain(self.synth)},
            "feature_k": self.feature_k,
            "victim_hidden": list(self.victim_hidden),
            "train": _plain(self.train),
            "attacks": [_plain(a) for a in self.attacks],
            "defenses": list(self.defenses),
            "defense": {
                "distill_temperature": self.defense.distill_temperature,
                "distill_epochs": self.defense.distill_epochs,
                "rfn": _plain(self.defense.rfn),
                "rfn_epochs": self.defense.rfn_epochs,
                "adv_inner": _plain(self.defense.adv_inner),
                "adv_epochs": self.defense.adv_epochs,
                "ensemble": {
                    "members": [list(m) for m in self.defense.ensemble.members],
                    "dropout": self.defense.ensemble.dropout,
                    "epochs": self.defense.ensemble.epochs,
                    "aggregation": self.defense.ensemble.aggregation,
                },
            },
            "malgan": _plain(self.malgan),
        }


def _plain(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.value if isinstance(v, AttackKind) else v
    return out


def _typed(section: configparser.SectionProxy, cls, base, prefix: str = ""):
    """Override dataclass fields of ``base`` from keys in ``section``."""
    updates = {}
    for f in fields(cls):
        key = prefix + f.name
        if key not in section:
            continue
        raw = section[key].strip()
        default = getattr(base, f.name)
        try:
            if isinstance(default, bool):
                updates[f.name] = section.getboolean(key)
            elif isinstance(default, int) or f.name in ("budget",):
                updates[f.name] = int(raw)
            elif isinstance(default, float) or f.name in ("step_size",):
                updates[f.name] = float(raw)
            else:
                updates[f.name] = raw
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


def _ints(raw: str, sep: str = ",") -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in raw.replace(" ", "").split(sep) if t)
    except ValueError as exc:
        raise ConfigError(f"expected a list of integers, got {raw!r}") from exc


def _names(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = ExperimentConfig()
    base_dir = base_dir or Path(".")
    empty = configparser.SectionProxy(cp, "DEFAULT")

    exp = cp["experiment"] if cp.has_section("experiment") else empty
    seed = int(exp.get("seed", cfg.seed))
    out_dir = Path(exp.get("out", str(cfg.out_dir)))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir

    attack_names = _names(exp.get("attacks", "all"))
    if attack_names == ["all"]:
        attack_names = [k.value for k in TABLE_ORDER]
    attacks = []
    for name in attack_names:
        try:
            kind = AttackKind(name)
        except ValueError:
            raise ConfigError(f"unknown attack {name!r}") from None
        section = f"attack.{name}"
        acfg = AttackConfig(kind)
        if cp.has_section(section):
            acfg = _typed(cp[section], AttackConfig, acfg)
        attacks.append(acfg)
    defenses = _names(exp.get("defenses", ",".join(DEFENSE_KINDS)))
    if defenses == ["none"]:
        defenses = []

    data_path, synth, feature_k = None, cfg.synth, None
    if cp.has_section("data"):
        sec = cp["data"]
        source = sec.get("source", "synthetic").strip()
        if source != "synthetic":
            data_path = Path(source)
            if not data_path.is_absolute():
                data_path = base_dir / data_path
        synth = _typed(sec, SynthSpec, synth)
        if sec.get("feature_k", "").strip():
            feature_k = int(sec["feature_k"])

    hidden, train = cfg.victim_hidden, cfg.train
    if cp.has_section("victim"):
        sec = cp["victim"]
        if "hidden" in sec:
            hidden = _ints(sec["hidden"])
        train = _typed(sec, nn.TrainConfig, train)
    train = replace(train, seed=seed)

    ds = DefenseSettings()
    if cp.has_section("defense.distillation"):
        sec = cp["defense.distillation"]
        ds.distill_temperature = float(sec.get("temperature", ds.distill_temperature))
        ds.distill_epochs = int(sec["epochs"]) if "epochs" in sec else None
    if cp.has_section("defense.rfn"):
        sec = cp["defense.rfn"]
        ds.rfn = _typed(sec, RFNConfig, ds.rfn)
        ds.rfn_epochs = int(sec["epochs"]) if "epochs" in sec else None
    if cp.has_section("defense.adv_training"):
        sec = cp["defense.adv_training"]
        inner = AttackConfig(AttackKind(sec.get("inner", "dfgsm_k").strip()))
        ds.adv_inner = _typed(sec, AttackConfig, inner, prefix="inner_")
        ds.adv_epochs = int(sec["epochs"]) if "epochs" in sec else None
    if cp.has_section("defense.ensemble"):
        sec = cp["defense.ensemble"]
        members = DEFAULT_MEMBERS
        if "members" in sec:
            members = tuple(_ints(m, "x") for m in sec["members"].split(";") if m.strip())
        try:
            ds.ensemble = EnsembleSpec(
                members=members,
                dropout=float(sec.get("dropout", 0.5)),
                epochs=int(sec.get("epochs", 200)),
                aggregation=sec.get("aggregation", "mean_probability").strip(),
            )
        except ValueError as exc:
            raise ConfigError(f"[defense.ensemble] {exc}") from exc

    mcfg = cfg.malgan
    if cp.has_section("malgan"):
        mcfg = _typed(cp["malgan"], MalganConfig, mcfg)

    return ExperimentConfig(
        seed=seed, data_path=data_path, synth=synth, feature_k=feature_k,
        victim_hidden=hidden, train=train, attacks=attacks, defenses=defenses,
        defense=ds, malgan=mcfg, out_dir=out_dir,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def parse_attack_campaign(text: str) -> AttackConfig:
    """Flat ``key = value`` attack settings (kind, budget, step_size, seed).

    A leading ``[attack]`` header is optional.
    """
    if not text.lstrip().startswith("["):
        text = "[attack]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse attack config: {exc}") from exc
    sec = cp[cp.sections()[0]]
    if "kind" not in sec:
        raise ConfigError("attack config needs a 'kind'")
    try:
        kind = AttackKind(sec["kind"].strip())
    except ValueError:
        raise ConfigError(f"unknown attack {sec['kind']!r}") from None
    return _typed(sec, AttackConfig, AttackConfig(kind))
