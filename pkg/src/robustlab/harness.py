"""Experiment grids, crash-safe run persistence, and report generation."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import predictor as P
from . import scaling as S
from .attacks import AttackConfig
from .data import Dataset
from .models import ArchSpec, parse_arch, save_model
from .train import RECORD_KEYS, RunRecord, TrainConfig, run_id_for, train

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
AXES = ("arch", "loss", "steps", "epochs", "ema", "extra_data", "activation", "seed", "beta")
REPORT_KINDS = ("envelope_csv", "fit_json", "predictor_json", "summary_csv")


class RunIdCollision(RuntimeError):
    pass


@dataclass
class GridSpec:
    """Cartesian product over ``axes`` applied on top of ``base``.

    Axis names: arch (e.g. "wrn-10-1" or an ArchSpec dict), loss, steps
    (attack steps), epochs, ema, extra_data, activation, seed, beta.
    ``exclude`` holds partial assignments; a combination matching every key
    of any rule is dropped. Standard-loss combinations ignore ``steps`` and
    collapse into one run.
    """

    axes: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    exclude: list = field(default_factory=list)

    def __post_init__(self):
        unknown = set(self.axes) - set(AXES)
        if unknown:
            raise ValueError(f"unknown grid axes {sorted(unknown)}; expected a subset of {AXES}")
        for k, v in self.axes.items():
            if not isinstance(v, list) or not v:
                raise ValueError(f"grid axis {k!r} needs a nonempty list of values")

    def combinations(self) -> list[dict]:
        keys = list(self.axes)
        out = []
        for values in itertools.product(*(self.axes[k] for k in keys)):
            combo = dict(zip(keys, values))
            if any(all(combo.get(k) == v for k, v in rule.items()) for rule in self.exclude):
                continue
            out.append(combo)
        return out

    def configs(self, input_shape=None, num_classes=None) -> list[TrainConfig]:
        """Valid, deduplicated TrainConfigs in grid order."""
        seen, out = set(), []
        for combo in self.combinations():
            cfg = apply_axes(self.base, combo, input_shape, num_classes)
            rid = run_id_for(cfg)
            if rid not in seen:
                seen.add(rid)
                out.append(cfg)
        if not out:
            raise ValueError("grid is empty after exclusions")
        return out

    def to_dict(self) -> dict:
        return {"axes": self.axes, "base": self.base, "exclude": self.exclude}

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        unknown = set(d) - {"axes", "base", "exclude"}
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        return cls(dict(d.get("axes", {})), dict(d.get("base", {})), list(d.get("exclude", [])))


def _arch_of(value, input_shape, num_classes, activation=None) -> ArchSpec:
    if isinstance(value, ArchSpec):
        arch = value
    elif isinstance(value, dict):
        arch = ArchSpec.from_dict(value)
    else:
        kw = {}
        if input_shape is not None:
            kw["input_shape"] = tuple(input_shape)
        if num_classes is not None:
            kw["num_classes"] = num_classes
        arch = parse_arch(str(value), **kw)
    if activation is not None:
        arch = ArchSpec(arch.family, arch.depth, arch.width, activation, arch.input_shape, arch.num_classes)
    return arch


def apply_axes(base: dict, combo: dict, input_shape=None, num_classes=None) -> TrainConfig:
    d = dict(base)
    arch_value = combo.get("arch", d.get("arch"))
    if arch_value is not None or "activation" in combo:
        d["arch"] = _arch_of(arch_value or ArchSpec(), input_shape, num_classes, combo.get("activation"))
    attack = d.get("attack", {})
    attack = attack.to_dict() if isinstance(attack, AttackConfig) else dict(attack)
    for k in ("loss", "epochs", "ema", "seed", "beta"):
        if k in combo:
            d[k] = combo[k]
    if "extra_data" in combo:
        d["extra_data"] = bool(combo["extra_data"])
        if not d["extra_data"]:
            d["extra_ratio"] = 0.0
    if "steps" in combo:
        attack["steps"] = combo["steps"]
    if d.get("loss", "at") == "standard":
        attack = {}
    d["attack"] = attack
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def load_records(path) -> list[dict]:
    """Parse a JSONL records file; unparseable lines (a torn tail) are skipped with a warning."""
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            RunRecord.from_dict(d)
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            log.warning("%s:%d: skipping unreadable record (%s)", path, n, e)
            continue
        out.append(d)
    return out


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _append_record(path: Path, record: dict) -> None:
    line = json.dumps({k: record[k] for k in RECORD_KEYS}) + "\n"
    # a torn tail from a crash must not swallow the next record
    if path.exists() and path.stat().st_size:
        with path.open("rb") as fh:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) != b"\n":
                line = "\n" + line
    with path.open("a") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def _failed_record(cfg: TrainConfig, message: str, wall: float) -> dict:
    return RunRecord(
        run_id=run_id_for(cfg), config=cfg.to_dict(), clean_acc=0.0, robust_acc_earlystop=0.0, robust_acc_final=0.0,
        train_flops=0, wall_seconds=wall, kwh=0.0, usd=0.0, co2_g=0.0, best_epoch=-1, epochs_trained=0,
        seed=cfg.seed, failed=True, diagnostic=message,
    ).to_dict()  # fmt: skip


def _run_one(cfg_dict: dict, data: Dataset, out_dir: str, blas_threads: int | None) -> dict:
    cfg = TrainConfig.from_dict(cfg_dict)
    out = Path(out_dir)
    t0 = time.perf_counter()
    try:
        with threadpool_limits(blas_threads):
            model, rec = train(cfg, data)
        buf = out / "models" / f".{rec.run_id}.partial"
        save_model(model, buf)
        os.replace(buf, out / "models" / f"{rec.run_id}.rlab")
        if rec.failed:
            log.warning("run %s failed: %s", rec.run_id, rec.diagnostic)
        record = rec.to_dict()
    except Exception as e:  # one bad run must not take down the grid
        log.exception("run %s raised", run_id_for(cfg))
        record = _failed_record(cfg, f"{type(e).__name__}: {e}", time.perf_counter() - t0)
    _atomic_write(out / "runs" / f"{record['run_id']}.json", json.dumps(record, sort_keys=True).encode())
    return record


def _check_collisions(configs: list[TrainConfig], existing: dict[str, dict]) -> None:
    for cfg in configs:
        rid = run_id_for(cfg)
        prev = existing.get(rid)
        if prev is not None and prev["config"] != json.loads(json.dumps(cfg.to_dict())):
            raise RunIdCollision(f"run_id {rid} already names a different config")


def run_configs(configs: list[TrainConfig], data: Dataset, out_dir, parallelism: int = 1) -> list[dict]:
    """Train every config not yet recorded under ``out_dir``; returns records in config order.

    Each worker writes its record to ``runs/<run_id>.json`` via an atomic
    rename; only this process appends to ``records.jsonl``.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    out = Path(out_dir)
    for sub in ("models", "runs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rec_path = out / RECORDS_FILE
    existing = {r["run_id"]: r for r in load_records(rec_path)}
    # recover runs that finished but were not appended before a crash
    for p in sorted((out / "runs").glob("*.json")):
        if p.stem not in existing:
            try:
                d = json.loads(p.read_text())
                RunRecord.from_dict(d)
            except (json.JSONDecodeError, ValueError, TypeError):
                continue
            _append_record(rec_path, d)
            existing[p.stem] = d
    _check_collisions(configs, existing)
    pending = [c for c in configs if run_id_for(c) not in existing]
    if len(configs) > len(pending):
        log.info("skipping %d completed runs", len(configs) - len(pending))
    if pending:
        if parallelism == 1:
            for cfg in pending:
                rec = _run_one(cfg.to_dict(), data, str(out), None)
                _append_record(rec_path, rec)
                existing[rec["run_id"]] = rec
        else:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                futs = [pool.submit(_run_one, c.to_dict(), data, str(out), 1) for c in pending]
                for f in futs:
                    rec = f.result()
                    _append_record(rec_path, rec)
                    existing[rec["run_id"]] = rec
    return [existing[run_id_for(c)] for c in configs]


def run_grid(grid: GridSpec, data: Dataset, out_dir, parallelism: int = 1) -> list[dict]:
    return run_configs(grid.configs(data.input_shape, data.num_classes), data, out_dir, parallelism)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def successful(records) -> list[dict]:
    rows = [r if isinstance(r, dict) else r.to_dict() for r in records]
    ok = [r for r in rows if not r.get("failed")]
    if not ok:
        raise ValueError("no successful records")
    return ok


def fit_records(records, metric: str = "robust_acc_final", bins: int = 19):
    """Envelope of successful runs, then a power law through the envelope."""
    pts = S.envelope(successful(records), metric=metric, bins=bins)
    fit = S.fit_power_law([p.flops for p in pts], [p.metric for p in pts])
    return pts, fit


def _summary_row(r: dict) -> list:
    return [json.dumps(r[k], sort_keys=True) if k == "config" else r[k] for k in RECORD_KEYS]


def report(records, kind: str, out_path, metric: str = "robust_acc_final", bins: int = 19, seed: int = 0) -> Path:
    """Write one plot-ready artifact derived from run records."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
    out_path = Path(out_path)
    ok = successful(records)
    if kind == "summary_csv":
        rows = [r if isinstance(r, dict) else r.to_dict() for r in records]
        with out_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_KEYS)
            for r in rows:
                w.writerow(_summary_row(r))
    elif kind == "envelope_csv":
        pts = S.envelope(ok, metric=metric, bins=bins)
        S.write_envelope_csv(out_path, pts)
    elif kind == "fit_json":
        _, fit = fit_records(ok, metric, bins)
        S.write_fit_json(out_path, fit, metric, bins)
    else:
        doc = predictor_report(ok, seed)
        out_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out_path


def predictor_report(records, seed: int = 0, fraction: float = 0.7) -> dict:
    train_recs, test_recs = P.split_train_test(successful(records), fraction, seed)
    x_tr, y_tr, _ = P.records_to_dataset(train_recs)
    x_te, y_te, ids = P.records_to_dataset(test_recs)
    model = P.fit_gbr(x_tr, y_tr)
    imp, degenerate = P.feature_importance(model)
    return {
        "model": model.to_dict(),
        "importances": dict(zip(model.feature_names, imp.tolist())),
        "importance_degenerate": degenerate,
        "train": P.evaluate(model, x_tr, y_tr),
        "test": P.evaluate(model, x_te, y_te),
        "test_predictions": [
            {"run_id": i, "target": float(t), "predicted": float(p)}
            for i, t, p in zip(ids, y_te, P.predict(model, x_te))
        ],
        "split": {"fraction": fraction, "seed": seed, "n_train": len(train_recs), "n_test": len(test_recs)},
    }
