"""L-infinity white-box attacks and the robust-accuracy evaluator.

All attacks run the model with frozen BatchNorm, so running statistics are
never touched while searching for perturbations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOSS_KINDS = ("cross_entropy", "kl_vs_clean")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings. ``step_size=None`` means ``2.5 * epsilon / steps``."""

    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    restarts: int = 1
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.step_size is not None and (self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0)):
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    @property
    def alpha(self) -> float:
        return 2.5 * self.epsilon / self.steps if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        return cls(**d)


def fgsm_config(epsilon: float = 8 / 255) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, steps=1, step_size=epsilon, random_start=False)


def box_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate limits for delta so that |delta| <= eps and x + delta in [0, 1].

    Computed once so the bound holds exactly in floating point: ``-x`` is
    exact and ``x + fl(1 - x)`` rounds to at most 1.
    """
    return np.maximum(-epsilon, -x), np.minimum(epsilon, 1.0 - x)


def project(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp delta to the eps-box, then so that x + delta stays in [0, 1]."""
    lo, hi = box_bounds(x, epsilon)
    return np.clip(delta, lo, hi)


def attack_rng(seed: int, restart: int = 0, batch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(restart, batch)))


def _clean_probs(clean_logits, cfg: AttackConfig):
    if cfg.loss_kind != "kl_vs_clean":
        return None
    if clean_logits is None:
        raise ValueError("pgd: clean_logits are required for loss_kind='kl_vs_clean'")
    cl = clean_logits.data if isinstance(clean_logits, Tensor) else np.asarray(clean_logits, dtype=np.float64)
    return np.maximum(T._stable_softmax(cl), PROB_FLOOR)


def _per_example_loss(model, x_adv: Tensor, y, cfg: AttackConfig, clean_probs):
    logits = model.forward(x_adv, bn="frozen")
    if cfg.loss_kind == "cross_entropy":
        per = T.cross_entropy(logits, y, reduction="none")
    else:
        per = T.kl_divergence(Tensor(clean_probs), T.softmax(logits, floor=PROB_FLOOR), reduction="none")
    return logits, per


def _run_pgd(model, x, y, cfg: AttackConfig, clean_probs, rng, select: str, track_correct: bool):
    """One restart. Returns (delta, loss of the returned delta or None, always-correct mask or None).

    With ``select="last"`` and no correctness tracking the final iterate is
    never evaluated, so the cost is exactly ``steps`` forward/backward pairs.
    """
    lo, hi = box_bounds(x, cfg.epsilon)
    if cfg.random_start:
        delta = np.clip(rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), lo, hi)
    else:
        delta = np.zeros_like(x)
    keep_best = select == "best"
    best = delta.copy() if keep_best else None
    best_loss = np.full(len(x), -np.inf)
    correct = np.ones(len(x), dtype=bool) if track_correct else None

    def observe(logits, per, current):
        nonlocal best_loss
        if track_correct:
            correct[:] &= logits.data.argmax(axis=1) == y
        if keep_best:
            better = per.data >= best_loss
            best_loss = np.where(better, per.data, best_loss)
            best[better] = current[better]

    xt = Tensor(x)
    for _ in range(cfg.steps):
        d = Tensor(delta, requires_grad=True)
        logits, per = _per_example_loss(model, T.add(xt, d), y, cfg, clean_probs)
        observe(logits, per, delta)
        (g,) = T.grad(T.sum(per), [d])
        delta = np.clip(delta + cfg.alpha * np.sign(g), lo, hi)
    if keep_best or track_correct:
        logits, per = _per_example_loss(model, Tensor(x + delta), y, cfg, clean_probs)
        observe(logits, per, delta)
        if not keep_best:
            best_loss = per.data
    return (best if keep_best else delta), (best_loss if keep_best or track_correct else None), correct


def pgd(model, x, y, cfg: AttackConfig, clean_logits=None, seed: int = 0, select: str = "best") -> np.ndarray:
    """Projected sign-gradient ascent inside the eps-ball.

    Returns the perturbation batch. ``select="best"`` keeps, per example, the
    iterate with the highest attack loss over all restarts (the starting
    point counts as an iterate; ties favour later iterates).
    ``select="last"`` is plain PGD: the final iterate of the last restart,
    with no extra evaluation pass. ``clean_logits`` are constants.
    """
    if select not in ("best", "last"):
        raise ValueError(f"select must be 'best' or 'last', got {select!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    probs = _clean_probs(clean_logits, cfg)
    best, best_loss = None, None
    for r in range(cfg.restarts):
        delta, loss, _ = _run_pgd(model, x, y, cfg, probs, attack_rng(seed, r), select, False)
        if best is None or select == "last":
            best, best_loss = delta, loss
        else:
            upd = loss >= best_loss
            best[upd] = delta[upd]
            best_loss = np.where(upd, loss, best_loss)
    return best


def robust_mask(model, x, y, cfg: AttackConfig, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """Per-example robustness under ``cfg`` (cross-entropy PGD).

    A point is robust only if the clean input and every iterate of every
    restart are classified correctly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("robust_accuracy: empty dataset")
    ce_cfg = cfg if cfg.loss_kind == "cross_entropy" else AttackConfig(**{**cfg.to_dict(), "loss_kind": "cross_entropy"})
    out = np.empty(len(x), dtype=bool)
    for bi, i in enumerate(range(0, len(x), batch_size)):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        ok = model.forward(Tensor(xb), bn="frozen").data.argmax(axis=1) == yb
        if ce_cfg.epsilon > 0:
            for r in range(ce_cfg.restarts):
                _, _, c = _run_pgd(model, xb, yb, ce_cfg, None, attack_rng(seed, r, bi), "last", True)
                ok &= c
        out[i : i + batch_size] = ok
    return out


def robust_accuracy(model, x, y, cfg: AttackConfig, seed: int = 0, batch_size: int = 256) -> float:
    """Fraction of points that no tested perturbation misclassifies."""
    return float(robust_mask(model, x, y, cfg, seed, batch_size).mean())


def clean_accuracy(model, x, y, batch_size: int = 256) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("clean_accuracy: empty dataset")
    from .models import predict

    return float((predict(model, x, batch_size) == np.asarray(y)).mean())
