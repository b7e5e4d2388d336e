"""Gradient-guided evasion attacks on binary feature vectors.

All attacks take a predictor (anything with ``predict_proba``, ``jacobian``
and ``loss_gradient`` over row batches, see :class:`advmal.nn.Network`) and
malware rows, and return one :class:`AttackResult` per row.  Internally each
attack is vectorised over rows; randomised choices draw from a per-row
generator seeded by ``(cfg.seed, row_id)`` so a row's result never depends
on which other rows share the batch.

Class 0 is benign, class 1 is malware.  A sample that is already classified
benign is returned untouched with ``evaded=True``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import AttackError

BENIGN, MALWARE = 0, 1


class AttackKind(str, Enum):
    JSMA = "jsma"
    DEC_POS = "dec_pos"
    INC_NEG = "inc_neg"
    DEC_POS_INC_NEG = "dec_pos_inc_neg"
    RANDOM_DEC_POS = "random_dec_pos"
    RANDOM_INC_NEG = "random_inc_neg"
    RANDOM_DEC_POS_INC_NEG = "random_dec_pos_inc_neg"
    DFGSM_K = "dfgsm_k"
    RFGSM_K = "rfgsm_k"
    BGA_K = "bga_k"
    BCA_K = "bca_k"
    MALGAN = "malgan"

    def __str__(self) -> str:
        return self.value


# Row order of the comparison tables.
TABLE_ORDER = (
    AttackKind.DFGSM_K,
    AttackKind.RFGSM_K,
    AttackKind.BGA_K,
    AttackKind.BCA_K,
    AttackKind.JSMA,
    AttackKind.RANDOM_INC_NEG,
    AttackKind.DEC_POS,
    AttackKind.INC_NEG,
    AttackKind.RANDOM_DEC_POS,
    AttackKind.RANDOM_DEC_POS_INC_NEG,
    AttackKind.DEC_POS_INC_NEG,
    AttackKind.MALGAN,
)

ADD_ONLY = frozenset({
    AttackKind.JSMA, AttackKind.INC_NEG, AttackKind.RANDOM_INC_NEG, AttackKind.DFGSM_K,
    AttackKind.RFGSM_K, AttackKind.BGA_K, AttackKind.BCA_K, AttackKind.MALGAN,
})
FLIP_KINDS = {
    AttackKind.DEC_POS: ("dec_pos", False),
    AttackKind.INC_NEG: ("inc_neg", False),
    AttackKind.DEC_POS_INC_NEG: ("both", False),
    AttackKind.RANDOM_DEC_POS: ("dec_pos", True),
    AttackKind.RANDOM_INC_NEG: ("inc_neg", True),
    AttackKind.RANDOM_DEC_POS_INC_NEG: ("both", True),
}
FGSM_KINDS = frozenset({AttackKind.DFGSM_K, AttackKind.RFGSM_K})
# Kinds whose n_changed is bounded by the budget.
BUDGET_BOUNDS_CHANGES = frozenset({AttackKind.JSMA, AttackKind.BCA_K, *FLIP_KINDS})

DEFAULT_BUDGET = {AttackKind.DFGSM_K: 50, AttackKind.RFGSM_K: 50}
DEFAULT_STEP_SIZE = 0.05


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    budget: int | None = None
    step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        kind = AttackKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.budget is None:
            object.__setattr__(self, "budget", DEFAULT_BUDGET.get(kind, 25))
        if self.step_size is None:
            object.__setattr__(self, "step_size", DEFAULT_STEP_SIZE)
        if self.budget < 1:
            raise ValueError(f"attack budget must be >= 1, got {self.budget}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")

    @property
    def add_only(self) -> bool:
        return self.kind in ADD_ONLY

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=int(seed))


@dataclass
class AttackResult:
    x_adv: np.ndarray
    n_changed: int
    evaded: bool
    iterations_used: int


def row_rng(seed: int, row_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(row_id)])


def classify(pred, X) -> np.ndarray:
    return np.argmax(pred.predict_proba(np.atleast_2d(X)), axis=1)


def _check_batch(pred, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X))
    if X.shape[0] and X.shape[1] != pred.n_features:
        raise AttackError(f"expected {pred.n_features} features, got {X.shape[1]}")
    bad = np.flatnonzero(np.any((X != 0) & (X != 1), axis=1))
    if bad.size:
        raise AttackError(f"row {int(bad[0])}: input is not a binary vector")
    return X.astype(np.float64)


def _results(pred, X0: np.ndarray, X_adv: np.ndarray, iters: np.ndarray) -> list[AttackResult]:
    if X0.shape[0] == 0:
        return []
    evaded = classify(pred, X_adv) == BENIGN
    changed = np.sum(X_adv != X0, axis=1)
    return [
        AttackResult(X_adv[i].astype(np.uint8), int(changed[i]), bool(evaded[i]), int(iters[i]))
        for i in range(X0.shape[0])
    ]


def _masked_argmax(score: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Per-row argmax over candidate positions (lowest index on ties), -1 if none."""
    masked = np.where(cand, score, -np.inf)
    pick = np.argmax(masked, axis=1)
    pick[~cand.any(axis=1)] = -1
    return pick


def _random_pick(cand: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    pick = np.full(cand.shape[0], -1)
    for r in range(cand.shape[0]):
        options = np.flatnonzero(cand[r])
        if options.size:
            pick[r] = options[rngs[r].integers(options.size)]
    return pick


# --------------------------------------------------------------------------- greedy flip family

def _greedy_flips(pred, X0, budget, mode, randomized, rngs, score="jacobian"):
    """Shared loop for JSMA, the dec_pos/inc_neg family and BCA^k.

    ``mode`` is ``inc_neg`` (set a zero bit with positive benign derivative),
    ``dec_pos`` (clear an original one bit with positive malware derivative)
    or ``both`` (alternate, starting with dec_pos).  With ``score="loss"``
    the add side ranks bits by the malware cross-entropy gradient instead.
    """
    n, d = X0.shape
    cur = X0.copy()
    iters = np.zeros(n, dtype=np.int64)
    next_side = np.zeros(n, dtype=np.int64)   # 0 = dec_pos, 1 = inc_neg
    active = np.arange(n)
    for _ in range(budget):
        if active.size == 0:
            break
        still = classify(pred, cur[active]) != BENIGN
        active = active[still]
        if active.size == 0:
            break
        xa = cur[active]
        x0 = X0[active]
        if score == "loss":
            add_score = pred.loss_gradient(xa, MALWARE)
            rem_score = None
        else:
            J = pred.jacobian(xa)
            add_score = J[:, BENIGN, :]
            rem_score = J[:, MALWARE, :]
        add_cand = (xa == 0) & (x0 == 0) & (add_score > 0) if mode in ("inc_neg", "both") else None
        rem_cand = (xa == 1) & (x0 == 1) & (rem_score > 0) if mode in ("dec_pos", "both") else None
        sub_rngs = [rngs[i] for i in active] if randomized else None

        def choose(sc, cand):
            return _random_pick(cand, sub_rngs) if randomized else _masked_argmax(sc, cand)

        if mode == "inc_neg":
            side = np.ones(active.size, dtype=np.int64)
            pick = choose(add_score, add_cand)
        elif mode == "dec_pos":
            side = np.zeros(active.size, dtype=np.int64)
            pick = choose(rem_score, rem_cand)
        else:
            has_rem = rem_cand.any(axis=1)
            has_add = add_cand.any(axis=1)
            want = next_side[active]
            side = np.where(want == 0, np.where(has_rem, 0, 1), np.where(has_add, 1, 0))
            use_rem = side == 0
            pick = np.full(active.size, -1)
            if use_rem.any():
                pick[use_rem] = _pick_rows(choose, rem_score, rem_cand, use_rem)
            if (~use_rem).any():
                pick[~use_rem] = _pick_rows(choose, add_score, add_cand, ~use_rem)
        ok = pick >= 0
        rows = active[ok]
        cur[rows, pick[ok]] = np.where(side[ok] == 0, 0.0, 1.0)
        iters[rows] += 1
        next_side[rows] = 1 - side[ok]
        active = rows
    return cur, iters


def _pick_rows(choose, score, cand, rows_mask):
    # ``choose`` closes over the per-row generators of the whole active set,
    # so subset rows through a proxy that preserves alignment.
    sc = np.where(rows_mask[:, None], score, 0.0)
    cd = cand & rows_mask[:, None]
    return choose(sc, cd)[rows_mask]


def jsma_attack(pred, x, cfg: AttackConfig) -> AttackResult:
    """Add the zero feature with the largest positive benign-class derivative until evasion."""
    return _run(pred, np.atleast_2d(x), replace(cfg, kind=AttackKind.JSMA), [0])[0]


def feature_flip_attack(pred, x, mode: str, randomized: bool, cfg: AttackConfig) -> AttackResult:
    kind = {v: k for k, v in FLIP_KINDS.items()}[(mode, bool(randomized))]
    return _run(pred, np.atleast_2d(x), replace(cfg, kind=kind), [0])[0]


def bca_k_attack(pred, x, cfg: AttackConfig) -> AttackResult:
    """Bit coordinate ascent: set the single zero bit with the largest positive loss derivative."""
    return _run(pred, np.atleast_2d(x), replace(cfg, kind=AttackKind.BCA_K), [0])[0]


# --------------------------------------------------------------------------- FGSM^k

def fgsm_relaxation(pred, X0: np.ndarray, k: int, alpha: float, trace: list | None = None) -> np.ndarray:
    """k signed-gradient ascent steps on the malware loss over the add-only box.

    Originally set bits stay frozen at 1; free coordinates move by
    ``alpha * sign(grad)`` and are clipped to [0, 1].
    """
    free = X0 == 0
    xbar = X0.astype(np.float64).copy()
    for _ in range(k):
        g = pred.loss_gradient(xbar, MALWARE)
        xbar = np.where(free, np.clip(xbar + alpha * np.sign(g), 0.0, 1.0), 1.0)
        if trace is not None:
            trace.append(xbar.copy())
    return xbar


def round_deterministic(xbar: np.ndarray) -> np.ndarray:
    return (xbar > 0.5).astype(np.float64)


def round_randomized(xbar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Set each coordinate to 1 with probability equal to its relaxed value."""
    return (rng.random(xbar.shape) < xbar).astype(np.float64)


def _fgsm(pred, X0, cfg, rngs, randomized, trace=None):
    xbar = fgsm_relaxation(pred, X0, cfg.budget, cfg.step_size, trace)
    if randomized:
        rounded = np.vstack([round_randomized(xbar[i], rngs[i]) for i in range(X0.shape[0])])
    else:
        rounded = round_deterministic(xbar)
    return np.maximum(X0, rounded), np.full(X0.shape[0], cfg.budget)


def fgsm_k_attack(pred, x, rounding: str, cfg: AttackConfig, trace: list | None = None) -> AttackResult:
    kind = {"deterministic": AttackKind.DFGSM_K, "randomized": AttackKind.RFGSM_K}[rounding]
    return _run(pred, np.atleast_2d(x), replace(cfg, kind=kind), [0], trace=trace)[0]


# --------------------------------------------------------------------------- BGA^k

def _malware_loss(pred, X) -> tuple[np.ndarray, np.ndarray]:
    p = pred.predict_proba(X)
    return -np.log(np.clip(p[:, MALWARE], 1e-12, 1.0)), np.argmax(p, axis=1)


def _bga(pred, X0, budget, trace=None):
    """Bit gradient ascent.

    Each step sets every original zero bit whose loss derivative reaches
    ``||grad||_2 / sqrt(d)``.  Returns the first evading iterate, otherwise the
    visited iterate with the largest loss.  A zero gradient sets nothing.
    """
    n, d = X0.shape
    cur = X0.copy()
    best = X0.copy()
    best_loss, labels = _malware_loss(pred, X0)
    iters = np.zeros(n, dtype=np.int64)
    active = np.flatnonzero(labels != BENIGN)
    for _ in range(budget):
        if active.size == 0:
            break
        xa = cur[active]
        g = pred.loss_gradient(xa, MALWARE)
        norm = np.linalg.norm(g, axis=1)
        thr = norm / np.sqrt(d)
        setmask = (X0[active] == 0) & (g >= thr[:, None]) & (norm > 0)[:, None]
        if trace is not None:
            trace.append((active.copy(), g.copy(), thr.copy(), setmask.copy()))
        progressed = np.any(setmask & (xa == 0), axis=1)
        xa = np.where(setmask, 1.0, xa)
        cur[active] = xa
        iters[active] += 1
        step_loss, step_labels = _malware_loss(pred, xa)
        better = step_loss > best_loss[active]
        best[active[better]] = xa[better]
        best_loss[active[better]] = step_loss[better]
        evaded = step_labels == BENIGN
        best[active[evaded]] = xa[evaded]
        active = active[~evaded & progressed]
    return best, iters


def bga_k_attack(pred, x, cfg: AttackConfig, trace: list | None = None) -> AttackResult:
    return _run(pred, np.atleast_2d(x), replace(cfg, kind=AttackKind.BGA_K), [0], trace=trace)[0]


# --------------------------------------------------------------------------- dispatch

def attack_matrix(pred, X0: np.ndarray, cfg: AttackConfig, rngs=None, trace=None) -> tuple[np.ndarray, np.ndarray]:
    """Raw batched attack: ``(X_adv, iterations_used)`` without the natural-evasion shortcut."""
    kind = cfg.kind
    if kind is AttackKind.MALGAN:
        raise AttackError("malgan needs trained artifacts; use advmal.malgan")
    if kind in (AttackKind.JSMA, *FLIP_KINDS):
        mode, randomized = FLIP_KINDS.get(kind, ("inc_neg", False))
        return _greedy_flips(pred, X0, cfg.budget, mode, randomized, rngs)
    if kind is AttackKind.BCA_K:
        return _greedy_flips(pred, X0, cfg.budget, "inc_neg", False, rngs, score="loss")
    if kind is AttackKind.BGA_K:
        return _bga(pred, X0, cfg.budget, trace)
    return _fgsm(pred, X0, cfg, rngs, kind is AttackKind.RFGSM_K, trace)


def _run(pred, X, cfg, row_ids, trace=None) -> list[AttackResult]:
    X0 = _check_batch(pred, X)
    n = X0.shape[0]
    if n == 0:
        return []
    rngs = [row_rng(cfg.seed, r) for r in row_ids]
    X_adv = X0.copy()
    iters = np.zeros(n, dtype=np.int64)
    todo = np.flatnonzero(classify(pred, X0) != BENIGN)
    if todo.size:
        sub_adv, sub_iters = attack_matrix(pred, X0[todo], cfg, [rngs[i] for i in todo], trace)
        X_adv[todo] = sub_adv
        iters[todo] = sub_iters
    return _results(pred, X0, X_adv, iters)


def run_attack(pred, X_malware, cfg: AttackConfig, row_ids: Sequence[int] | None = None) -> list[AttackResult]:
    """Attack every row; ``row_ids`` (default: positions) key the per-row random streams."""
    if cfg.kind is AttackKind.MALGAN:
        raise AttackError("malgan is dispatched by advmal.malgan, not run_attack")
    X = np.asarray(X_malware)
    if X.size == 0:
        return []
    ids = np.arange(X.shape[0]) if row_ids is None else np.asarray(row_ids)
    if ids.shape != (X.shape[0],):
        raise AttackError(f"need one row id per row, got {ids.shape} for {X.shape[0]} rows")
    try:
        return _run(pred, X, cfg, ids)
    except AttackError:
        raise
    except (ValueError, FloatingPointError) as exc:
        raise AttackError(f"{cfg.kind} failed on rows {ids.min()}..{ids.max()}: {exc}") from exc
