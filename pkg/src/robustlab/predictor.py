"""Gradient-boosted regression trees that predict robust accuracy from a recipe."""

from __future__ import annotations

import json
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import best_split
from .models import ArchSpec, count_params

FEATURES = ("n_params", "synthetic_data", "activation", "loss", "pgd_steps", "ema")
MIN_LEAF = 2
EXPORT_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    n_params: float
    synthetic_data: int
    activation: int  # 0 relu, 1 gelu
    loss: int  # 0 at/pgd, 1 trades
    pgd_steps: int
    ema: int

    def __post_init__(self):
        if not (math.isfinite(self.n_params) and self.n_params > 0):
            raise ValueError(f"n_params must be a positive count, got {self.n_params}")
        for name in ("synthetic_data", "activation", "loss", "ema"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if int(self.pgd_steps) != self.pgd_steps or self.pgd_steps < 0:
            raise ValueError(f"pgd_steps must be a nonnegative integer, got {self.pgd_steps!r}")

    def to_row(self, transform=np.log10) -> np.ndarray:
        """Numeric row; ``n_params`` goes through ``transform`` (log10 by default)."""
        row = np.array(astuple(self), dtype=np.float64)
        row[0] = transform(row[0])
        return row

    @classmethod
    def from_config(cls, config) -> FeatureVector:
        """Features of a TrainConfig (or its dict). Standard training maps to loss 0 with 0 steps."""
        d = config if isinstance(config, dict) else config.to_dict()
        arch = ArchSpec.from_dict(d["arch"])
        standard = d["loss"] == "standard"
        return cls(
            n_params=float(count_params(arch)),
            synthetic_data=int(bool(d.get("extra_data", False))),
            activation=int(arch.activation == "gelu"),
            loss=int(d["loss"] == "trades"),
            pgd_steps=0 if standard else int(d["attack"]["steps"]),
            ema=int(bool(d.get("ema", False))),
        )


def feature_matrix(features, transform=np.log10) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    return np.stack([f.to_row(transform) for f in features]) if len(features) else np.zeros((0, len(FEATURES)))


def records_to_dataset(records, transform=np.log10) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(X, y in percent, run_ids) from successful run records."""
    rows, ys, ids = [], [], []
    for r in records:
        r = r if isinstance(r, dict) else r.to_dict()
        if r.get("failed"):
            continue
        rows.append(FeatureVector.from_config(r["config"]).to_row(transform))
        ys.append(100.0 * float(r["robust_acc_final"]))
        ids.append(r["run_id"])
    if not rows:
        raise ValueError("no successful records to build features from")
    return np.stack(rows), np.array(ys), ids


def split_train_test(records, fraction: float = 0.7, seed: int = 0):
    """Seeded shuffle, then the first ``round(fraction * n)`` items train."""
    records = list(records)
    n = len(records)
    if n < 4:
        raise ValueError(f"split_train_test needs at least 4 records, got {n}")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    k = min(max(math.floor(fraction * n + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return [records[i] for i in order[:k]], [records[i] for i in order[k:]]


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------


def _grow(x, r, depth, max_depth, importances):
    n = len(r)
    if depth < max_depth and n >= 2 * MIN_LEAF:
        gain, f, thr = best_split(x, r, MIN_LEAF)
        # ignore gains that are pure rounding noise on a flat residual
        if f >= 0 and gain > 1e-12 * max(1.0, float(np.dot(r, r))):
            m = x[:, f] <= thr
            importances[f] += gain
            return {
                "feature": int(f),
                "threshold": float(thr),
                "left": _grow(x[m], r[m], depth + 1, max_depth, importances),
                "right": _grow(x[~m], r[~m], depth + 1, max_depth, importances),
            }
    return {"leaf_value": float(r.mean())}


def tree_predict(tree: dict, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    for i, row in enumerate(x):
        node = tree
        while "leaf_value" not in node:
            node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
        out[i] = node["leaf_value"]
    return out


def tree_depth(tree: dict) -> int:
    if "leaf_value" in tree:
        return 0
    return 1 + max(tree_depth(tree["left"]), tree_depth(tree["right"]))


@dataclass
class GbrModel:
    base_prediction: float
    learning_rate: float
    trees: list = field(default_factory=list)
    raw_importances: list = field(default_factory=lambda: [0.0] * len(FEATURES))
    train_mse: list = field(default_factory=list)
    feature_names: tuple = FEATURES
    max_depth: int = 5

    def to_dict(self) -> dict:
        return {
            "v": EXPORT_VERSION,
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "feature_names": list(self.feature_names),
            "trees": self.trees,
            "raw_importances": list(self.raw_importances),
            "importances": feature_importance(self)[0].tolist(),
            "train_mse": list(self.train_mse),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GbrModel:
        return cls(
            float(d["base_prediction"]),
            float(d["learning_rate"]),
            d["trees"],
            [float(v) for v in d["raw_importances"]],
            [float(v) for v in d.get("train_mse", [])],
            tuple(d["feature_names"]),
            int(d.get("max_depth", 5)),
        )


def fit_gbr(features, targets, n_estimators: int = 50, max_depth: int = 5, learning_rate: float = 0.1) -> GbrModel:
    """Stagewise least-squares boosting; every tree fits the current residuals.

    ``features`` is a sequence of FeatureVector or an (n, d) array. Splits
    maximise variance reduction with at least 2 samples per leaf.
    """
    x = feature_matrix(features)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features {x.shape} do not match targets {y.shape}")
    if len(y) < 2:
        raise ValueError("fit_gbr needs at least 2 samples")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise ValueError("features and targets must be finite")
    if not 1 <= n_estimators <= 50:
        raise ValueError("n_estimators must lie in [1, 50]")
    if not 1 <= max_depth <= 5:
        raise ValueError("max_depth must lie in [1, 5]")
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must lie in (0, 1]")
    x = np.ascontiguousarray(x)
    names = FEATURES if x.shape[1] == len(FEATURES) else tuple(f"f{i}" for i in range(x.shape[1]))
    base = float(y.mean())
    pred = np.full(len(y), base)
    imp = np.zeros(x.shape[1])
    trees, mse = [], []
    for _ in range(n_estimators):
        tree = _grow(x, y - pred, 0, max_depth, imp)
        pred = pred + learning_rate * tree_predict(tree, x)
        trees.append(tree)
        mse.append(float(np.mean((y - pred) ** 2)))
    return GbrModel(base, learning_rate, trees, imp.tolist(), mse, names, max_depth)


def predict(model: GbrModel, features) -> np.ndarray:
    """base_prediction + learning_rate * sum of tree outputs."""
    x = feature_matrix(features if not isinstance(features, FeatureVector) else [features])
    out = np.full(len(x), model.base_prediction)
    for t in model.trees:
        out += model.learning_rate * tree_predict(t, x)
    return out


def feature_importance(model: GbrModel) -> tuple[np.ndarray, bool]:
    """Normalised total squared-error reduction per feature, and a degenerate flag.

    A model without any split reports all zeros with ``degenerate=True``.
    """
    if model is None or not hasattr(model, "raw_importances"):
        raise ValueError("feature_importance needs a fitted model")
    raw = np.asarray(model.raw_importances, dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        return np.zeros_like(raw), True
    return raw / total, False


def save_gbr(path, model: GbrModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")


def load_gbr(path) -> GbrModel:
    return GbrModel.from_dict(json.loads(Path(path).read_text()))


def evaluate(model: GbrModel, x, y) -> dict:
    p = predict(model, x)
    y = np.asarray(y, dtype=np.float64)
    resid = y - p
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return {
        "mse": float(np.mean(resid**2)),
        "mae": float(np.mean(np.abs(resid))),
        "r2": (1.0 - float(np.sum(resid**2)) / ss_tot) if ss_tot > 0 else None,
        "n": int(len(y)),
    }


__all__ = [
    "FEATURES", "FeatureVector", "GbrModel", "evaluate", "feature_importance", "feature_matrix", "fit_gbr",
    "load_gbr", "predict", "records_to_dataset", "save_gbr", "split_train_test",
]  # fmt: skip
