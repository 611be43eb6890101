"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py`` (lines go to stdout).
Criteria 8 and 9 train the full mini study twice and are marked slow.
"""

import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import test_attacks as TA  # noqa: E402
import test_predictor as TP  # noqa: E402
import test_scaling as TS  # noqa: E402
from helpers import ACCEPTANCE_LINES, GRAD_CASES, check_grad  # noqa: E402

from robustlab import harness as H  # noqa: E402
from robustlab import tensor as T  # noqa: E402
from robustlab.attacks import AttackConfig, box_bounds, pgd, project, robust_mask  # noqa: E402
from robustlab.cli import main as cli  # noqa: E402
from robustlab.cost import ConstantPower, energy_from_power, examples_per_epoch, train_flops, units_per_example  # noqa: E402
from robustlab.data import gen_blobs  # noqa: E402
from robustlab.models import ArchSpec, build, count_forward_flops, count_mac_flops, count_params, parse_arch  # noqa: E402
from robustlab.predictor import FEATURES, feature_importance, fit_gbr, predict  # noqa: E402
from robustlab.scaling import envelope, fit_power_law  # noqa: E402
from robustlab.tensor import Tensor  # noqa: E402
from robustlab.train import RECORD_KEYS, TrainConfig, train  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
STUDY = ROOT / "configs" / "mini_study.json"
VOLATILE = {"wall_seconds", "kwh", "usd", "co2_g"}
EPS = 8 / 255


def _verdict(n, ok, detail, seconds, limit=None):
    within = limit is None or seconds < limit
    budget = f" limit {limit:g}s" if limit is not None else ""
    line = f"criterion {n}: {'PASS' if ok and within else 'FAIL'}  {detail}  [{seconds:.1f}s{budget}]"
    ACCEPTANCE_LINES.append(line)
    return ok and within, line


# ---------------------------------------------------------------------------
# 1-7: analytic and property oracles
# ---------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    rows, ok = [], True
    for name, params, flops in [("wrn-28-10", 36e6, 10.5e9), ("wrn-70-16", 266e6, 77.6e9)]:
        arch = parse_arch(name)
        dp = count_params(arch) / params - 1
        df = count_forward_flops(arch) / flops - 1
        ok &= abs(dp) < 0.03 and abs(df) < 0.05
        rows.append(f"{name} params {dp:+.2%} flops {df:+.2%}")
    return _verdict(1, ok, "; ".join(rows), time.perf_counter() - t0, 1.0)


def criterion_2():
    t0 = time.perf_counter()
    heavy = {"trades_wrn": 2, "conv2d": 4, "inner_ce_attack": 4}
    worst, n = 0.0, 0
    for name, maker in GRAD_CASES.items():
        for seed in range(heavy.get(name, 6)):
            b, arrays = maker(np.random.default_rng(1000 + seed))
            worst = max(worst, check_grad(b, arrays))
            n += 1
    ok = n >= 100 and worst < 1e-4
    return _verdict(2, ok, f"{n} cases over {len(GRAD_CASES)} ops, max rel err {worst:.2e}", time.perf_counter() - t0, 60.0)


def criterion_3():
    t0 = time.perf_counter()
    linear = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = TA.linear_model(seed)
        x = rng.uniform(0, 1, size=(16, 1, 3, 3))
        y = rng.integers(0, 2, size=16)
        d = pgd(m, x, y, AttackConfig(EPS, 5), seed=seed, select="last")
        linear += np.array_equal(d, TA.linear_worst_case(m, x, y))
    grid = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = build(ArchSpec("mlp", 1, 8, "relu", (1, 1, 2), 2), seed)
        x = rng.uniform(0, 1, size=(1, 1, 1, 2))
        y = np.array([int(rng.integers(2))])
        cfg = AttackConfig(0.1, steps=20, restarts=3)
        gmax, grobust, gmargin = TA.grid_oracle(m, x, y[0], 0.1)
        ce = T.cross_entropy(m.forward(Tensor(x + pgd(m, x, y, cfg, seed=seed)), bn="frozen"), y, reduction="none").data[0]
        agree = abs(gmargin) <= 1e-3 or bool(robust_mask(m, x, y, cfg, seed=seed)[0]) == grobust
        grid += ce >= 0.95 * gmax and agree
    fuzz = 0
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        x = rng.choice([0.0, 1.0, rng.uniform()], size=n) if rng.random() < 0.3 else rng.uniform(size=n)
        eps = float(rng.choice([0.0, EPS, rng.uniform(0, 0.5)]))
        p = project(rng.normal(scale=0.2, size=n), x, eps)
        lo, hi = box_bounds(x, eps)
        fuzz += bool(np.all(p >= lo) and np.all(p <= hi) and np.all(x + p >= 0) and np.all(x + p <= 1)
                     and np.array_equal(project(p, x, eps), p))  # fmt: skip
    ok = linear == 10 and grid == 100 and fuzz == 1000
    detail = f"linear closed form {linear}/10, 2D grid {grid}/100, projection fuzz {fuzz}/1000"
    return _verdict(3, ok, detail, time.perf_counter() - t0, 60.0)


def criterion_4():
    t0 = time.perf_counter()
    data = gen_blobs(200, 8, seed=0)
    arch = ArchSpec("wrn", 10, 1)
    worst_total, mac_exact = 0.0, True
    for loss, steps in [("at", 2), ("trades", 2)]:
        cfg = TrainConfig(
            arch=arch, loss=loss, attack=AttackConfig(steps=steps), epochs=1, batch_size=64,
            eval_attack=AttackConfig(steps=1), eval_subset=8, final_attack=AttackConfig(steps=1),
        )  # fmt: skip
        with T.count_flops() as fc:
            _, rec = train(cfg, data, power=ConstantPower(1.0))
        n = examples_per_epoch(len(data.train), 0.0, 64)
        mac_exact &= fc.mac_flops == 3 * units_per_example(loss, steps) * count_mac_flops(arch) * n
        worst_total = max(worst_total, abs(fc.total / rec.train_flops - 1))
    big = parse_arch("wrn-28-10")

    def ratio(s):
        return train_flops(big, "trades", s, 50000).total_train_flops / train_flops(big, "at", s, 50000).total_train_flops

    r10, r1 = ratio(10), ratio(1)
    ok = mac_exact and worst_total <= 0.02 and abs(r10 - 1.08) <= 0.02
    detail = (f"MAC terms exact={mac_exact}, overall dev {worst_total:.3%}, TRADES/AT n=10 {r10:.4f} "
              f"(n=1 {r1:.3f}, not asserted)")  # fmt: skip
    return _verdict(4, ok, detail, time.perf_counter() - t0)


def criterion_5():
    t0 = time.perf_counter()
    rep = energy_from_power(300, 10 * 3600, n_gpus=4, pue=1.58)
    ok = abs(rep.kwh - 18.96) < 1e-12 and abs(rep.usd - 2.2752) < 1e-12 and round(rep.co2_g, 2) == 10737.05
    return _verdict(5, ok, f"kwh={rep.kwh!r} usd={rep.usd!r} co2_g={rep.co2_g!r}", time.perf_counter() - t0)


def criterion_6():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(200):
        c, a = 10 ** rng.uniform(-3, 3), rng.uniform(-2, 2)
        x = np.sort(rng.uniform(0.1, 1e4, size=12))
        fit = fit_power_law(x, c * x**a)
        exact += abs(fit.alpha - a) <= 1e-9 and abs(fit.C / c - 1) <= 1e-9
    noisy = 0
    for seed in range(100):
        fit = fit_power_law(TS.X19, TS.noisy_targets(seed))
        noisy += abs(fit.alpha - 0.01) <= 0.003 and abs(fit.C / 50.86 - 1) <= 0.02
    env, rng = 0, np.random.default_rng(0)
    for _ in range(1000):
        runs = TS.random_runs(rng)
        while len({r["train_flops"] for r in runs}) < 2:
            runs = TS.random_runs(rng)
        got = [(p.flops, p.metric, p.run_id) for p in envelope(runs, metric="m", bins=19)]
        env += got == TS.brute_envelope(runs, 19)
    ok = exact == 200 and noisy == 100 and env == 1000
    detail = f"noiseless {exact}/200, noisy 19-point {noisy}/100, envelope oracle {env}/1000"
    return _verdict(6, ok, detail, time.perf_counter() - t0, 60.0)


def criterion_7():
    t0 = time.perf_counter()
    mono = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, 4))
        y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2 + rng.normal(0, 0.3, 60)
        mse = [float(np.mean((y - y.mean()) ** 2))] + fit_gbr(x, y).train_mse
        mono += all(b <= a for a, b in zip(mse, mse[1:]))
    ranked = 0
    for seed in range(100):
        fv, y = TP.planted(seed)
        imp = dict(zip(FEATURES, feature_importance(fit_gbr(fv, y))[0]))
        ranked += imp["loss"] > imp["ema"] > imp["activation"]
    x = np.array([[0.0], [1.0]] * 8)
    m = fit_gbr(x, x[:, 0], learning_rate=0.5)
    exact = m.train_mse[-1]
    ok = mono == 20 and ranked >= 95 and exact < 1e-6 and np.allclose(predict(m, x), x[:, 0], atol=1e-6)
    detail = f"monotone MSE {mono}/20, planted ranking {ranked}/100, exact-fit train MSE {exact:.1e}"
    return _verdict(7, ok, detail, time.perf_counter() - t0, 120.0)


# ---------------------------------------------------------------------------
# 8-9: the mini study
# ---------------------------------------------------------------------------


def run_study(out_dir: Path):
    grid = H.GridSpec.from_dict(json.loads(STUDY.read_text()))
    data = gen_blobs(2000, 8, seed=0)
    parallelism = min(4, os.cpu_count() or 1)
    t0 = time.perf_counter()
    records = H.run_grid(grid, data, out_dir, parallelism=parallelism)
    return records, time.perf_counter() - t0


def criterion_8(records, seconds, out_dir: Path):
    adv = [r for r in records if r["config"]["loss"] != "standard"]
    std = {json.dumps(r["config"]["arch"], sort_keys=True): r for r in records if r["config"]["loss"] == "standard"}
    gaps = []
    for r in adv:
        twin = std[json.dumps(r["config"]["arch"], sort_keys=True)]
        gaps.append(r["robust_acc_final"] - twin["robust_acc_final"])
    failed = sum(r["failed"] for r in records)
    codes = [
        cli(["fit", "--records", str(out_dir), "--out", str(out_dir / "fit")]),
        cli(["predict", "--records", str(out_dir), "--out", str(out_dir / "predict")]),
        cli(["report", "--records", str(out_dir), "--out", str(out_dir / "report")]),
    ]
    fit_file = out_dir / "fit" / "fit.json"
    alpha = json.loads(fit_file.read_text())["alpha"] if fit_file.exists() else float("nan")
    ok = (len(adv) >= 12 and not failed and min(gaps) >= 0.10 and codes == [0, 0, 0] and math.isfinite(alpha))
    detail = (f"{len(records)} runs ({len(adv)} adversarial), min PGD-20 gap {min(gaps) * 100:.2f} pp, "
              f"fit/predict/report exit {codes}, alpha {alpha:.4g}")  # fmt: skip
    return _verdict(8, ok, detail, seconds, 1800.0)


def criterion_9(first, second, seconds):
    def stable(recs):
        return {r["run_id"]: {k: r[k] for k in RECORD_KEYS if k not in VOLATILE} for r in recs}

    a, b = stable(first), stable(second)
    diffs = sorted(k for rid in a for k in RECORD_KEYS if k not in VOLATILE and a[rid][k] != b.get(rid, {}).get(k))
    ok = a.keys() == b.keys() and not diffs
    detail = f"{len(a)} records compared, differing fields: {diffs or 'none'}"
    return _verdict(9, ok, detail, seconds)


@pytest.mark.parametrize("n", range(1, 8))
def test_acceptance_fast(n):
    ok, line = globals()[f"criterion_{n}"]()
    assert ok, line


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study_a")
    records, seconds = run_study(out)
    return out, records, seconds


@pytest.mark.slow
def test_acceptance_mini_study(study):
    out, records, seconds = study
    ok, line = criterion_8(records, seconds, out)
    assert ok, line


@pytest.mark.slow
def test_acceptance_determinism(study, tmp_path):
    _, first, _ = study
    second, seconds = run_study(tmp_path / "study_b")
    ok, line = criterion_9(first, second, seconds)
    assert ok, line


if __name__ == "__main__":
    import tempfile

    results = [globals()[f"criterion_{n}"]() for n in range(1, 8)]
    for _, line in results:
        print(line, flush=True)
    with tempfile.TemporaryDirectory() as tmp:
        a, sa = run_study(Path(tmp) / "a")
        results.append(criterion_8(a, sa, Path(tmp) / "a"))
        print(results[-1][1], flush=True)
        b, sb = run_study(Path(tmp) / "b")
        results.append(criterion_9(a, b, sb))
        print(results[-1][1], flush=True)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
