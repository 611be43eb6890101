"""Command-line entry point: ``robustlab <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 run failure(s).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cost as C
from . import harness as H
from . import predictor as P
from . import scaling as S
from .attacks import AttackConfig, clean_accuracy, robust_accuracy
from .data import BLOB_NOISE_SIGMA, gen_blobs, load_cifar10_binary, load_npz, save_npz, write_cifar_records
from .models import count_params, load_model, parse_arch
from .train import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3

#: sustained per-GPU training throughput used by ``cost`` when no wall time is given
DEFAULT_TFLOPS = 4.3

log = logging.getLogger("robustlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _read_config(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.config}: not valid JSON ({e})") from e


def load_dataset(path):
    p = Path(path)
    if p.is_dir():
        train = sorted(p.glob("data_batch_*.bin"))
        test = p / "test_batch.bin"
        if not train or not test.exists():
            raise FileNotFoundError(f"{p}: expected data_batch_*.bin and test_batch.bin")
        return load_cifar10_binary(train, test)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such dataset")
    return load_npz(p)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = gen_blobs(args.n, args.image_size, args.noise_sigma, args.seed, args.n_extra)
    out = Path(args.out or "blobs.npz")
    if args.format == "npz":
        out.parent.mkdir(parents=True, exist_ok=True)
        save_npz(out, ds)
    else:
        out.mkdir(parents=True, exist_ok=True)
        write_cifar_records(out / "data_batch_1.bin", ds.train)
        write_cifar_records(out / "test_batch.bin", ds.test)
    _emit({"out": str(out), "train": len(ds.train), "test": len(ds.test), "extra": len(ds.extra) if ds.extra else 0})
    return EXIT_OK


def _train_config(args, data) -> TrainConfig:
    d = _read_config(args)
    flag_map = {"loss": args.loss, "epochs": args.epochs, "beta": args.beta, "batch_size": args.batch_size, "lr": args.lr}
    for k, v in flag_map.items():
        if v is not None:
            d[k] = v
    if args.ema:
        d["ema"] = True
    d.setdefault("seed", args.seed)
    arch = args.arch or d.get("arch") or "wrn-10-1"
    combo = {"arch": arch}
    attack = dict(d.get("attack", {}))
    if args.steps is not None:
        attack["steps"] = args.steps
    if args.epsilon is not None:
        attack["epsilon"] = args.epsilon
    d["attack"] = attack
    d.pop("arch", None)
    return H.apply_axes(d, combo, data.input_shape, data.num_classes)


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    cfg = _train_config(args, data)
    out = _out_dir(args, "runs")
    (rec,) = H.run_configs([cfg], data, out)
    _emit(rec)
    return EXIT_RUN if rec["failed"] else EXIT_OK


def cmd_grid(args) -> int:
    spec = _read_config(args)
    if args.grid:
        spec = json.loads(Path(args.grid).read_text())
    if not spec:
        raise UsageError("grid needs --grid FILE or --config FILE with a grid spec")
    grid = H.GridSpec.from_dict(spec)
    if args.seed and "seed" not in grid.axes:
        grid.base.setdefault("seed", args.seed)
    data = load_dataset(args.data)
    out = _out_dir(args, "runs")
    records = H.run_grid(grid, data, out, args.parallelism)
    n_failed = sum(r["failed"] for r in records)
    _emit({"out": str(out), "runs": len(records), "failed": n_failed})
    return EXIT_RUN if n_failed else EXIT_OK


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    arch = parse_arch(args.arch, data.input_shape, data.num_classes)
    model = load_model(args.model, arch)
    cfg = AttackConfig(epsilon=args.epsilon, steps=args.steps, restarts=args.restarts)
    x, y = data.test.images, data.test.labels
    if args.limit:
        x, y = x[: args.limit], y[: args.limit]
    _emit({
        "clean_acc": clean_accuracy(model, x, y),
        "robust_acc": robust_accuracy(model, x, y, cfg, seed=args.seed),
        "attack": cfg.to_dict(),
        "n": int(len(y)),
    })  # fmt: skip
    return EXIT_OK


def cmd_cost(args) -> int:
    arch = parse_arch(args.arch)
    rep = C.train_flops(
        arch, args.loss, args.steps, args.dataset_size, args.extra_fraction, args.epochs, args.batch_size, args.ema
    )
    if args.hours is not None:
        wall = args.hours * 3600.0
        basis = "hours"
    else:
        tflops = args.tflops or DEFAULT_TFLOPS
        wall = rep.total_train_flops / (tflops * 1e12 * args.gpus)
        basis = f"{tflops} TFLOP/s per GPU"
    energy = C.energy_from_power(args.power, wall, args.gpus, args.pue, args.rate, args.intensity)
    _emit({"flops": rep.to_dict(), "wall_seconds": wall, "wall_basis": basis, "energy": energy.to_dict()})
    return EXIT_OK


def _records(args) -> list[dict]:
    path = Path(args.records)
    if path.is_dir():
        path = path / H.RECORDS_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path}: no records file")
    return H.load_records(path)


def cmd_fit(args) -> int:
    pts, fit = H.fit_records(_records(args), args.metric, args.bins)
    out = _out_dir(args, "fit")
    doc = S.write_fit_json(out / "fit.json", fit, args.metric, args.bins)
    S.write_envelope_csv(out / "envelope.csv", pts)
    if args.target is not None:
        ex = S.extrapolate(fit, metric=args.target)
        doc["target"] = {"metric": args.target, "flops": ex.value, "extrapolated": ex.extrapolated}
    _emit(doc)
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.model:
        model = P.load_gbr(args.model)
        arch = parse_arch(args.arch or "wrn-28-10", activation=args.activation)
        loss = args.loss or "at"
        fv = P.FeatureVector(
            float(count_params(arch)), int(args.extra_data), int(arch.activation == "gelu"),
            int(loss == "trades"), 0 if loss == "standard" else args.steps, int(args.ema),
        )  # fmt: skip
        _emit({"features": fv.__dict__, "predicted_robust_acc_percent": float(P.predict(model, [fv])[0])})
        return EXIT_OK
    if not args.records:
        raise UsageError("predict needs --records (to fit) or --model (to query)")
    doc = H.predictor_report(_records(args), args.seed)
    out = _out_dir(args, "predictor")
    P.save_gbr(out / "gbr.json", P.GbrModel.from_dict(doc["model"]))
    (out / "predictor.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _emit({k: doc[k] for k in ("importances", "train", "test", "split")})
    return EXIT_OK


def cmd_report(args) -> int:
    records = _records(args)
    out = _out_dir(args, "report")
    names = {"envelope_csv": "envelope.csv", "fit_json": "fit.json", "predictor_json": "predictor.json",
             "summary_csv": "summary.csv"}  # fmt: skip
    written = [str(H.report(records, k, out / names[k], args.metric, args.bins, args.seed)) for k in args.kind]
    _emit({"written": written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--config", help="JSON file mirroring TrainConfig (train) or a grid spec (grid)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="robustlab", description="Desk-scale adversarial-robustness scaling experiments.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic blob dataset")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--image-size", type=int, default=8)
    g.add_argument("--noise-sigma", type=float, default=BLOB_NOISE_SIGMA)
    g.add_argument("--n-extra", type=int, default=0)
    g.add_argument("--format", choices=("npz", "cifar"), default="npz")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--data", required=True, help=".npz file or directory of CIFAR-10 .bin batches")
    t.add_argument("--arch")
    t.add_argument("--loss", choices=C.LOSSES)
    t.add_argument("--steps", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ema", action="store_true")
    t.set_defaults(func=cmd_train)

    gr = sub.add_parser("grid", parents=[common], help="run an experiment grid")
    gr.add_argument("--data", required=True)
    gr.add_argument("--grid", help="grid spec JSON (same as --config)")
    gr.add_argument("--parallelism", type=int, default=1)
    gr.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", parents=[common], help="clean and PGD accuracy of a saved model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--arch", required=True)
    e.add_argument("--epsilon", type=float, default=8 / 255)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--restarts", type=int, default=1)
    e.add_argument("--limit", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", parents=[common], help="analytic FLOP / energy / cost estimate (no training)")
    c.add_argument("--arch", required=True)
    c.add_argument("--loss", choices=C.LOSSES, default="at")
    c.add_argument("--steps", type=int, default=10)
    c.add_argument("--epochs", type=int, default=1)
    c.add_argument("--dataset-size", type=int, default=50000)
    c.add_argument("--extra-fraction", type=float, default=0.0)
    c.add_argument("--batch-size", type=int, default=128)
    c.add_argument("--ema", action="store_true")
    c.add_argument("--power", type=float, default=300.0, help="average watts per GPU")
    c.add_argument("--gpus", type=int, default=1)
    c.add_argument("--hours", type=float, help="measured wall-clock hours")
    c.add_argument("--tflops", type=float, help=f"sustained TFLOP/s per GPU (default {DEFAULT_TFLOPS})")
    c.add_argument("--pue", type=float, default=C.PUE)
    c.add_argument("--rate", type=float, default=C.USD_PER_KWH)
    c.add_argument("--intensity", type=float, default=C.GCO2_PER_KWH)
    c.set_defaults(func=cmd_cost)

    f = sub.add_parser("fit", parents=[common], help="envelope + power-law fit of run records")
    f.add_argument("--records", required=True)
    f.add_argument("--metric", default="robust_acc_final")
    f.add_argument("--bins", type=int, default=19)
    f.add_argument("--target", type=float, help="report the FLOPs needed to reach this metric")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="fit or query the recipe -> robustness predictor")
    pr.add_argument("--records")
    pr.add_argument("--model", help="saved gbr.json to query")
    pr.add_argument("--arch")
    pr.add_argument("--activation", choices=("relu", "gelu"))
    pr.add_argument("--loss", choices=C.LOSSES)
    pr.add_argument("--steps", type=int, default=10)
    pr.add_argument("--ema", action="store_true")
    pr.add_argument("--extra-data", action="store_true")
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", parents=[common], help="write plot-ready report files")
    r.add_argument("--records", required=True)
    r.add_argument("--kind", nargs="+", choices=H.REPORT_KINDS, default=list(H.REPORT_KINDS))
    r.add_argument("--metric", default="robust_acc_final")
    r.add_argument("--bins", type=int, default=19)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"robustlab: {e}", file=sys.stderr)
        return EXIT_USAGE
    except H.RunIdCollision as e:
        print(f"robustlab: {e}", file=sys.stderr)
        return EXIT_RUN
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as e:
        print(f"robustlab: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
