"""Shared oracles for the test suite."""

import numpy as np

from robustlab import tensor as T
from robustlab.tensor import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar f(*arrays) w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, arrays, h=1e-6):
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` returns a scalar Tensor.
    """
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = T.grad(build(*ts), ts)

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def away_from_zero(rng, shape, margin=0.05):
    """Values bounded away from ReLU's kink so finite differences are valid."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


# ---------------------------------------------------------------------------
# gradient cases: name -> maker(rng) -> (build, arrays)
# ---------------------------------------------------------------------------


def _weighted(t, rng):
    w = Tensor(rng.normal(size=t.shape))
    return T.sum(T.mul(t, w))


def _case_add(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: T.sum(T.mul(T.add(a, b), Tensor(w)))), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]


def _case_sub(rng):
    w = rng.normal(size=(2, 3))
    return (lambda a, b: T.sum(T.mul(T.sub(a, b), Tensor(w)))), [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))]


def _case_mul(rng):
    return (lambda a, b: T.sum(T.mul(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))]


def _case_relu(rng):
    w = rng.normal(size=(4, 5))
    return (lambda a: T.sum(T.mul(T.relu(a), Tensor(w)))), [away_from_zero(rng, (4, 5))]


def _case_gelu(rng):
    w = rng.normal(size=(4, 5))
    return (lambda a: T.sum(T.mul(T.gelu(a), Tensor(w)))), [rng.normal(size=(4, 5)) * 2]


def _case_log(rng):
    w = rng.normal(size=(6,))
    return (lambda a: T.sum(T.mul(T.log(a), Tensor(w)))), [rng.uniform(0.2, 3.0, size=6)]


def _case_reshape_mean(rng):
    w = rng.normal(size=(3,))
    return (lambda a: T.sum(T.mul(T.mean(T.reshape(a, (4, 3)), axis=0), Tensor(w)))), [rng.normal(size=(2, 6))]


def _case_matmul(rng):
    w = rng.normal(size=(3, 2))
    return (lambda a, b: T.sum(T.mul(T.matmul(a, b), Tensor(w)))), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]


def _case_conv(rng):
    stride, pad = [(1, 1), (2, 0), (2, 1), (1, 0)][rng.integers(4)]
    x = rng.normal(size=(2, 2, 5, 5))
    wk = rng.normal(size=(3, 2, 3, 3))
    probe = None

    def build(a, b):
        nonlocal probe
        out = T.conv2d(a, b, stride=stride, pad=pad)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return T.sum(T.mul(out, Tensor(probe)))

    return build, [x, wk]


def _case_bn(training):
    def maker(rng):
        x = rng.normal(size=(4, 3, 2, 2)) * 2 + 1
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        w = rng.normal(size=x.shape)

        def build(a, g, b):
            return T.sum(T.mul(T.batchnorm(a, g, b, rm.copy(), rv.copy(), training=training), Tensor(w)))

        return build, [x, rng.normal(size=3), rng.normal(size=3)]

    return maker


def _case_avgpool(rng):
    w = rng.normal(size=(2, 3))
    return (lambda a: T.sum(T.mul(T.avgpool(a), Tensor(w)))), [rng.normal(size=(2, 3, 4, 4))]


def _case_softmax(rng):
    w = rng.normal(size=(3, 5))
    return (lambda a: T.sum(T.mul(T.softmax(a), Tensor(w)))), [rng.normal(size=(3, 5))]


def _case_log_softmax(rng):
    w = rng.normal(size=(3, 5))
    return (lambda a: T.sum(T.mul(T.log_softmax(a), Tensor(w)))), [rng.normal(size=(3, 5)) * 3]


def _case_ce(rng):
    y = rng.integers(0, 5, size=4)
    return (lambda a: T.cross_entropy(a, y)), [rng.normal(size=(4, 5)) * 2]


def _case_kl(rng):
    def pos(shape):
        p = rng.uniform(0.05, 1, size=shape)
        return p / p.sum(axis=1, keepdims=True)

    return (lambda p, q: T.kl_divergence(p, q)), [pos((3, 4)), pos((3, 4))]


def _tiny_model(rng, family="wrn"):
    from robustlab.models import ArchSpec, build

    if family == "wrn":
        arch = ArchSpec("wrn", 10, 1, "relu", (1, 4, 4), 3)
    else:
        arch = ArchSpec("mlp", 1, 5, "gelu", (1, 2, 2), 3)
    return build(arch, int(rng.integers(1 << 30)))


def _case_inner_ce(rng):
    """Attack objective: CE of a frozen-BN WRN w.r.t. the perturbation."""
    model = _tiny_model(rng, "wrn")
    x = rng.uniform(0.2, 0.8, size=(2, 1, 4, 4))
    y = rng.integers(0, 3, size=2)
    return (lambda d: T.cross_entropy(model.forward(T.add(Tensor(x), d), bn="frozen"), y)), [
        rng.uniform(-0.03, 0.03, size=x.shape)
    ]


def _case_trades(rng):
    """TRADES objective w.r.t. MLP weights and both inputs."""
    from robustlab.train import trades_objective

    model = _tiny_model(rng, "mlp")
    y = rng.integers(0, 3, size=3)
    beta = float(rng.uniform(1, 6))

    def build(w0, xc, xa):
        model.params["fc0.weight"] = w0
        return trades_objective(model.forward(xc), model.forward(xa), y, beta)

    xc = rng.uniform(0.2, 0.8, size=(3, 1, 2, 2))
    return build, [model.params["fc0.weight"].data.copy(), xc, xc + rng.uniform(-0.03, 0.03, size=xc.shape)]


def _case_trades_wrn(rng):
    """TRADES through a WRN in train-mode BN, w.r.t. the stem filters."""
    from robustlab.train import trades_objective

    model = _tiny_model(rng, "wrn")
    y = rng.integers(0, 3, size=3)
    xc = rng.uniform(0.2, 0.8, size=(3, 1, 4, 4))
    xa = np.clip(xc + rng.uniform(-0.03, 0.03, size=xc.shape), 0, 1)

    def build(w):
        model.params["stem.weight"] = w
        return trades_objective(model.forward(Tensor(xc)), model.forward(Tensor(xa)), y, 6.0)

    return build, [model.params["stem.weight"].data.copy()]


GRAD_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "log": _case_log,
    "reshape_mean": _case_reshape_mean,
    "matmul": _case_matmul,
    "conv2d": _case_conv,
    "batchnorm_train": _case_bn(True),
    "batchnorm_frozen": _case_bn(False),
    "avgpool": _case_avgpool,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "cross_entropy": _case_ce,
    "kl_divergence": _case_kl,
    "inner_ce_attack": _case_inner_ce,
    "trades_mlp": _case_trades,
    "trades_wrn": _case_trades_wrn,
}

# filled by the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES = []
