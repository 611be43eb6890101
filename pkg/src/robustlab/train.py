"""Robust training: AT and TRADES losses, SGD loop, EMA and PGD early stopping."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attacks import PROB_FLOOR, AttackConfig, clean_accuracy, pgd, robust_accuracy
from .cost import LOSSES, PowerSource, batch_plan, default_power_source, energy_report, train_flops
from .data import Dataset, augment
from .models import ArchSpec, Model, build, parse_arch
from .tensor import Tensor

log = logging.getLogger(__name__)

RECORD_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    loss: str = "at"
    beta: float = 6.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "piecewise"
    ema: bool = False
    ema_decay: float = 0.995
    extra_data: bool = False
    extra_ratio: float = 0.0
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=40))
    eval_subset: int = 512
    final_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=40, restarts=5))
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.arch, ArchSpec):
            raise TypeError(f"arch must be an ArchSpec, got {type(self.arch).__name__}")
        for k in ("attack", "eval_attack", "final_attack"):
            if not isinstance(getattr(self, k), AttackConfig):
                raise TypeError(f"{k} must be an AttackConfig")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "trades" and not self.beta > 0:
            raise ValueError("TRADES needs beta > 0")
        if self.ema and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.extra_data and not 0 < self.extra_ratio < 1:
            raise ValueError("extra_data needs 0 < extra_ratio < 1")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_subset < 1:
            raise ValueError("epochs, batch_size and eval_subset must be positive")
        if self.schedule not in ("piecewise", "cyclic", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("arch", "attack", "eval_attack", "final_attack"):
            d[k] = d[k].to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "arch" in d:
            if isinstance(d["arch"], dict):
                d["arch"] = ArchSpec.from_dict(d["arch"])
            elif isinstance(d["arch"], str):
                d["arch"] = parse_arch(d["arch"])
        for k in ("attack", "eval_attack", "final_attack"):
            if k in d and isinstance(d[k], dict):
                d[k] = AttackConfig.from_dict(d[k])
        return cls(**d)

    @property
    def effective_extra_ratio(self) -> float:
        return self.extra_ratio if self.extra_data else 0.0

    @property
    def attack_steps(self) -> int:
        return 0 if self.loss == "standard" else self.attack.steps


def run_id_for(config: TrainConfig) -> str:
    """Stable hash of the canonical JSON config (the seed is part of it)."""
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


RECORD_KEYS = (
    "run_id", "v", "config", "clean_acc", "robust_acc_earlystop", "robust_acc_final", "train_flops",
    "wall_seconds", "kwh", "usd", "co2_g", "best_epoch", "epochs_trained", "seed", "failed",
)  # fmt: skip


@dataclass
class RunRecord:
    run_id: str
    config: dict
    clean_acc: float
    robust_acc_earlystop: float
    robust_acc_final: float
    train_flops: int
    wall_seconds: float
    kwh: float
    usd: float
    co2_g: float
    best_epoch: int
    epochs_trained: int
    seed: int
    failed: bool = False
    v: int = RECORD_VERSION
    # in-memory only
    history: list = field(default_factory=list, repr=False, compare=False)
    diagnostic: str = field(default="", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in RECORD_KEYS}

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        missing = set(RECORD_KEYS) - set(d)
        if missing:
            raise ValueError(f"record missing keys {sorted(missing)}")
        return cls(**{k: d[k] for k in RECORD_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def at_loss(model: Model, x, y, attack: AttackConfig, seed: int = 0, select: str = "last") -> Tensor:
    """Cross-entropy at the PGD point; BN frozen in the attack, batch stats in the loss."""
    x = np.asarray(x, dtype=np.float64)
    if attack.loss_kind != "cross_entropy":
        attack = AttackConfig(**{**attack.to_dict(), "loss_kind": "cross_entropy"})
    delta = pgd(model, x, y, attack, seed=seed, select=select)
    return T.cross_entropy(model.forward(Tensor(x + delta), bn="train"), y)


def trades_loss(model: Model, x, y, beta: float, attack: AttackConfig, seed: int = 0, select: str = "last") -> Tensor:
    """Clean CE + beta * KL(softmax f(x) || softmax f(x + delta)).

    The clean logits from the outer forward pass are the attack's fixed KL
    target; the final loss back-propagates through both branches.
    """
    if not beta > 0:
        raise ValueError("trades_loss needs beta > 0")
    x = np.asarray(x, dtype=np.float64)
    if attack.loss_kind != "kl_vs_clean":
        attack = AttackConfig(**{**attack.to_dict(), "loss_kind": "kl_vs_clean"})
    clean = model.forward(Tensor(x), bn="train")
    delta = pgd(model, x, y, attack, clean_logits=clean.data, seed=seed, select=select)
    adv = model.forward(Tensor(x + delta), bn="train")
    return trades_objective(clean, adv, y, beta)


def trades_objective(clean_logits: Tensor, adv_logits: Tensor, y, beta: float) -> Tensor:
    kl = T.kl_divergence(T.softmax(clean_logits, floor=PROB_FLOOR), T.softmax(adv_logits, floor=PROB_FLOOR))
    return T.cross_entropy(clean_logits, y) + beta * kl


def standard_loss(model: Model, x, y) -> Tensor:
    return T.cross_entropy(model.forward(Tensor(x), bn="train"), y)


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------


def ema_update(ema: dict[str, np.ndarray], weights: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """In place: ema <- decay * ema + (1 - decay) * weights."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    if set(ema) != set(weights):
        raise ValueError("ema_update: parameter names differ")
    for k, e in ema.items():
        w = weights[k]
        if e.shape != w.shape:
            raise ValueError(f"ema_update: shape mismatch for {k}: {e.shape} vs {w.shape}")
        e *= decay
        e += (1.0 - decay) * w
    return ema


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise: x0.1 at 50% and 75% of training. Cyclic: triangle peaking mid-run."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cyclic":
        frac = (epoch + 0.5) / cfg.epochs
        return cfg.lr * (1 - abs(2 * frac - 1))
    lr = cfg.lr
    if epoch >= math.ceil(0.5 * cfg.epochs) and cfg.epochs > 1:
        lr *= 0.1
    if epoch >= math.ceil(0.75 * cfg.epochs) and cfg.epochs > 1:
        lr *= 0.1
    return lr


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _seed_int(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def _check_data(cfg: TrainConfig, data: Dataset):
    if tuple(data.input_shape) != cfg.arch.input_shape:
        raise ValueError(f"dataset inputs {data.input_shape} do not match arch input {cfg.arch.input_shape}")
    if data.num_classes != cfg.arch.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, arch expects {cfg.arch.num_classes}")
    if cfg.extra_data and (data.extra is None or len(data.extra) == 0):
        raise ValueError("extra_data requested but the dataset has no extra split")


def batch_loss(model: Model, cfg: TrainConfig, x, y, attack_seed: int) -> Tensor:
    if cfg.loss == "standard":
        return standard_loss(model, x, y)
    if cfg.loss == "at":
        return at_loss(model, x, y, cfg.attack, seed=attack_seed)
    return trades_loss(model, x, y, cfg.beta, cfg.attack, seed=attack_seed)


def train(config: TrainConfig, data: Dataset, power: PowerSource | None = None) -> tuple[Model, RunRecord]:
    """Train one configuration; returns the early-stopped model and its record.

    After every epoch the evaluation model (EMA weights when enabled) is
    attacked with ``eval_attack`` on the first ``eval_subset`` test points;
    the best checkpoint by that robust accuracy is kept. The final record
    reports clean and ``final_attack`` accuracy of that checkpoint on the
    whole test split.
    """
    cfg = config
    _check_data(cfg, data)
    if cfg.ema and cfg.epochs <= 100:
        log.info("EMA with %d epochs: short schedules rarely benefit from weight averaging", cfg.epochs)
    power = power or default_power_source()
    run_id = run_id_for(cfg)
    model = build(cfg.arch, cfg.seed)
    opt = SGD(model.params, cfg.momentum, cfg.weight_decay)
    ema_model = model.copy() if cfg.ema else None
    eval_model = ema_model if cfg.ema else model

    shuffle_rng = np.random.default_rng(_seed_int(cfg.seed, 1))
    extra_rng = np.random.default_rng(_seed_int(cfg.seed, 2))
    aug_rng = np.random.default_rng(_seed_int(cfg.seed, 3))
    n_train = len(data.train)
    per_batch, per_extra, n_batches = batch_plan(n_train, cfg.batch_size, cfg.effective_extra_ratio)
    extra_order, extra_pos = None, 0
    if per_extra:
        extra_order = extra_rng.permutation(len(data.extra))

    xs_eval = data.test.images[: cfg.eval_subset]
    ys_eval = data.test.labels[: cfg.eval_subset]

    best_acc, best_epoch, best_state = -1.0, -1, None
    history = []
    failed, diagnostic = False, ""
    epochs_done = 0
    power.start()
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            order = shuffle_rng.permutation(n_train)
            losses = []
            for b in range(n_batches):
                idx = order[b * per_batch : (b + 1) * per_batch]
                xb, yb = data.train.images[idx], data.train.labels[idx]
                if per_extra:
                    take = []
                    while len(take) < per_extra:
                        if extra_pos == len(extra_order):
                            extra_order, extra_pos = extra_rng.permutation(len(data.extra)), 0
                        n = min(per_extra - len(take), len(extra_order) - extra_pos)
                        take.extend(extra_order[extra_pos : extra_pos + n])
                        extra_pos += n
                    take = np.asarray(take)
                    xb = np.concatenate([xb, data.extra.images[take]])
                    yb = np.concatenate([yb, data.extra.labels[take]])
                if cfg.augment:
                    xb = augment(xb, aug_rng, flip=True, crop_pad=1)
                loss = batch_loss(model, cfg, xb, yb, _seed_int(cfg.seed, 4, epoch, b))
                value = loss.item()
                if not math.isfinite(value):
                    failed = True
                    diagnostic = f"non-finite loss {value} at epoch {epoch}, batch {b}"
                    break
                T.backward(loss)
                opt.step(lr)
                if ema_model is not None:
                    ema_update({k: t.data for k, t in ema_model.params.items()},
                               {k: t.data for k, t in model.params.items()}, cfg.ema_decay)
                losses.append(value)
            history.append(losses)
            if failed:
                log.warning("run %s aborted: %s", run_id, diagnostic)
                break
            epochs_done = epoch + 1
            with T.flops_paused():
                if ema_model is not None:
                    for k, v in model.buffers.items():
                        ema_model.buffers[k][...] = v
                acc = robust_accuracy(eval_model, xs_eval, ys_eval, cfg.eval_attack, seed=_seed_int(cfg.seed, 5))
            if acc > best_acc:
                best_acc, best_epoch, best_state = acc, epoch, {k: v.copy() for k, v in eval_model.state().items()}
            log.info("run %s epoch %d lr %.4g loss %.4f eval-robust %.3f", run_id, epoch, lr, np.mean(losses), acc)
    finally:
        wall = time.perf_counter() - t0
        power.stop()

    if best_state is not None:
        eval_model.load_state(best_state)
    with T.flops_paused():
        if failed and best_state is None:
            clean = robust_final = 0.0
            best_acc = 0.0
        else:
            clean = clean_accuracy(eval_model, data.test.images, data.test.labels)
            robust_final = robust_accuracy(
                eval_model, data.test.images, data.test.labels, cfg.final_attack, seed=_seed_int(cfg.seed, 6)
            )
    flops = train_flops(
        cfg.arch, cfg.loss, cfg.attack_steps, n_train, cfg.effective_extra_ratio, epochs_done, cfg.batch_size, cfg.ema
    )
    energy = energy_report(power, max(wall, 1e-9))
    record = RunRecord(
        run_id=run_id,
        config=cfg.to_dict(),
        clean_acc=clean,
        robust_acc_earlystop=max(best_acc, 0.0),
        robust_acc_final=robust_final,
        train_flops=int(flops.total_train_flops),
        wall_seconds=wall,
        kwh=energy.kwh,
        usd=energy.usd,
        co2_g=energy.co2_g,
        best_epoch=best_epoch,
        epochs_trained=epochs_done,
        seed=cfg.seed,
        failed=failed,
        history=history,
        diagnostic=diagnostic,
    )
    return eval_model, record
