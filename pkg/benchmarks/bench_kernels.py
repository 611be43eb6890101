"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--train]

Each pair is also checked for bitwise-equal output. ``--train`` additionally
times one short adversarial training run in two subprocesses, one with
ROBUSTLAB_DISABLE_NUMBA=1.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from robustlab import _kernels as K


def _time(fn, repeat):
    fn()  # warm up (and compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _cases(rng):
    x = rng.standard_normal((64, 16, 16, 16))
    cols = K.im2col_numpy(x, 3, 1, 1)
    feats = rng.standard_normal((400, 6))
    resid = rng.standard_normal(400)
    return [
        ("im2col 64x16x16x16 k3", lambda: K.im2col_numpy(x, 3, 1, 1), lambda: K.im2col_numba(x, 3, 1, 1)),
        ("col2im 64x16x16x16 k3", lambda: K.col2im_numpy(cols, x.shape, 3, 1, 1), lambda: K.col2im_numba(cols, x.shape, 3, 1, 1)),
        ("best_split 400x6", lambda: K.best_split_numpy(feats, resid, 2), lambda: K.best_split_numba(feats, resid, 2)),
    ]  # fmt: skip


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


TRAIN_SNIPPET = """
import json, time
from robustlab import USE_NUMBA, gen_blobs, parse_arch
from robustlab.train import TrainConfig, train
d = gen_blobs(256, 8, seed=0)
arch = parse_arch("wrn-10-1", input_shape=d.input_shape, num_classes=2)
cfg = TrainConfig.from_dict({"arch": arch.to_dict(), "loss": "at", "epochs": 1, "batch_size": 64,
                             "eval_subset": 32, "attack": {"steps": 3}, "eval_attack": {"steps": 1},
                             "final_attack": {"steps": 1}})
train(cfg, d)  # warm-up compiles kernels
t = time.perf_counter(); train(cfg, d)
print(json.dumps({"numba": USE_NUMBA, "seconds": time.perf_counter() - t}))
"""


def _train_seconds(disable):
    env = dict(os.environ, ROBUSTLAB_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train", action="store_true")
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        print("numba is not installed; both columns run the numpy path")
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  equal")
    for name, np_fn, nb_fn in _cases(np.random.default_rng(0)):
        a, b = _time(np_fn, args.repeat), _time(nb_fn, args.repeat)
        print(f"{name:<24}{a * 1e3:>10.3f}{b * 1e3:>10.3f}{a / b:>8.2f}x  {_same(np_fn(), nb_fn())}")
    if args.train:
        fast, slow = _train_seconds(False), _train_seconds(True)
        print(f"train wrn-10-1 AT-3, 1 epoch: numba {fast['seconds']:.2f}s, numpy {slow['seconds']:.2f}s")


if __name__ == "__main__":
    main()
