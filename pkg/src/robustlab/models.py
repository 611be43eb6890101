"""Architecture descriptors, mini-model builders and analytic counters.

Two families are supported:

* ``mlp``: ``depth`` hidden layers of ``width`` units (depth 0 is a plain
  linear classifier), each followed by the activation.
* ``wrn``: pre-activation WideResNet-``depth``-``width`` with three groups of
  ``(depth - 4) / 6`` basic blocks at widths 16k, 32k, 64k and strides 1, 2, 2.

``count_params`` / ``count_forward_flops`` are closed-form and never
allocate weights, so they work for WRN-70-16 as well as the trainable mini
sizes. FLOPs use 2 per multiply-accumulate plus the per-element constants
from :data:`robustlab.tensor.ELEMENTWISE_FLOPS`.
"""

from __future__ import annotations

import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from ._kernels import conv_out_size
from .tensor import ELEMENTWISE_FLOPS, Tensor

ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu}

#: static memory multiplier of GELU relative to ReLU activations (reported, not measured)
GELU_MEMORY_FACTOR = 1.5


@dataclass(frozen=True)
class ArchSpec:
    family: str = "wrn"
    depth: int = 10
    width: int = 1
    activation: str = "relu"
    input_shape: tuple = (1, 8, 8)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        validate_arch(self)

    @property
    def name(self) -> str:
        return f"{self.family}-{self.depth}-{self.width}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(**{**d, "input_shape": tuple(d["input_shape"])})


def validate_arch(arch: ArchSpec) -> None:
    if arch.family not in ("mlp", "wrn"):
        raise ValueError(f"unknown architecture family {arch.family!r}")
    if arch.activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {arch.activation!r}")
    if arch.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if len(arch.input_shape) != 3 or min(arch.input_shape) < 1:
        raise ValueError(f"input_shape must be (channels, height, width), got {arch.input_shape}")
    if arch.family == "wrn":
        if arch.depth < 10 or (arch.depth - 4) % 6:
            raise ValueError(f"WRN depth must satisfy (depth - 4) % 6 == 0 and depth >= 10, got {arch.depth}")
        if arch.width < 1:
            raise ValueError(f"WRN width must be >= 1, got {arch.width}")
    else:
        if arch.depth < 0:
            raise ValueError("MLP depth (hidden layers) must be >= 0")
        if arch.depth > 0 and arch.width < 1:
            raise ValueError("MLP width must be >= 1")


_ARCH_RE = re.compile(r"^(mlp|wrn)-(\d+)-(\d+)(?:-(relu|gelu))?$")


def parse_arch(text: str, input_shape=(3, 32, 32), num_classes: int = 10, activation: str | None = None) -> ArchSpec:
    """Parse ``wrn-28-10``, ``wrn-10-1-gelu`` or ``mlp-1-32`` into an ArchSpec."""
    m = _ARCH_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"cannot parse architecture {text!r} (expected e.g. wrn-28-10 or mlp-1-32)")
    act = activation or m.group(4) or "relu"
    return ArchSpec(m.group(1), int(m.group(2)), int(m.group(3)), act, tuple(input_shape), num_classes)


# ---------------------------------------------------------------------------
# analytic counters
# ---------------------------------------------------------------------------


def _wrn_widths(arch: ArchSpec) -> list[int]:
    return [16 * arch.width, 32 * arch.width, 64 * arch.width]


def count_params(arch: ArchSpec) -> int:
    """Trainable parameters: conv/linear weights, linear biases, BN affine."""
    validate_arch(arch)
    c, h, w = arch.input_shape
    if arch.family == "mlp":
        sizes = [c * h * w] + [arch.width] * arch.depth + [arch.num_classes]
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    n = (arch.depth - 4) // 6
    total = 9 * c * 16
    cin = 16
    for gi, cout in enumerate(_wrn_widths(arch)):
        stride = 1 if gi == 0 else 2
        for b in range(n):
            s = stride if b == 0 else 1
            total += 2 * cin + 9 * cin * cout + 2 * cout + 9 * cout * cout
            if cin != cout or s != 1:
                total += cin * cout
            cin = cout
    total += 2 * cin + cin * arch.num_classes + arch.num_classes
    return total


def count_forward_flops(arch: ArchSpec, batch: int = 1, elementwise: bool = True) -> int:
    """Forward FLOPs for ``batch`` examples (2 per MAC + per-element constants).

    ``elementwise=False`` keeps only the conv/linear multiply-add terms.
    """
    validate_arch(arch)
    per = ELEMENTWISE_FLOPS if elementwise else dict.fromkeys(ELEMENTWISE_FLOPS, 0)
    act, bn, add, pool = per[arch.activation], per["batchnorm"], per["add"], per["avgpool"]
    c, h, w = arch.input_shape
    if arch.family == "mlp":
        sizes = [c * h * w] + [arch.width] * arch.depth + [arch.num_classes]
        total = 0
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            total += 2 * a * b + add * b
            if i < arch.depth:
                total += act * b
        return batch * total

    def conv(cin, cout, k, s, pad, hh, ww):
        ho, wo = conv_out_size(hh, k, s, pad), conv_out_size(ww, k, s, pad)
        return 2 * k * k * cin * cout * ho * wo, ho, wo

    n = (arch.depth - 4) // 6
    total, h, w = conv(c, 16, 3, 1, 1, h, w)
    cin = 16
    for gi, cout in enumerate(_wrn_widths(arch)):
        stride = 1 if gi == 0 else 2
        for b in range(n):
            s = stride if b == 0 else 1
            total += (bn + act) * cin * h * w
            f1, ho, wo = conv(cin, cout, 3, s, 1, h, w)
            total += f1 + (bn + act) * cout * ho * wo
            f2, _, _ = conv(cout, cout, 3, 1, 1, ho, wo)
            total += f2
            if cin != cout or s != 1:
                total += conv(cin, cout, 1, s, 0, h, w)[0]
            total += add * cout * ho * wo
            cin, h, w = cout, ho, wo
    total += (bn + act) * cin * h * w
    total += pool * cin * h * w
    total += 2 * cin * arch.num_classes + add * arch.num_classes
    return batch * total


def count_mac_flops(arch: ArchSpec) -> int:
    """Forward FLOPs from conv/linear multiply-adds only."""
    return count_forward_flops(arch, elementwise=False)


# ---------------------------------------------------------------------------
# trainable models
# ---------------------------------------------------------------------------


class Model:
    """Parameters, BN buffers and the forward pass for one ArchSpec.

    ``forward(x, bn="train")`` normalizes with batch statistics and updates
    running buffers; ``bn="frozen"`` uses and preserves them.
    """

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._act = ACTIVATIONS[arch.activation]

    # -- construction helpers
    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def _bn(self, name, c):
        self._param(f"{name}.weight", np.ones(c))
        self._param(f"{name}.bias", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.buffers[f"{name}.running_var"] = np.ones(c)

    # -- forward pieces
    def _apply_bn(self, name, x, training):
        p = self.params
        return T.batchnorm(
            x, p[f"{name}.weight"], p[f"{name}.bias"],
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"], training,
        )

    def _linear(self, name, x):
        return T.matmul(x, self.params[f"{name}.weight"]) + self.params[f"{name}.bias"]

    def forward(self, x, bn: str = "train") -> Tensor:
        if bn not in ("train", "frozen"):
            raise ValueError(f"bn mode must be 'train' or 'frozen', got {bn!r}")
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.arch.input_shape:
            raise ValueError(f"model expects inputs of shape (N, {self.arch.input_shape}), got {x.shape}")
        training = bn == "train"
        if self.arch.family == "mlp":
            h = T.reshape(x, (x.shape[0], -1))
            for i in range(self.arch.depth):
                h = self._act(self._linear(f"fc{i}", h))
            return self._linear("head", h)
        return self._wrn_forward(x, training)

    __call__ = forward

    def _wrn_forward(self, x, training):
        p = self.params
        h = T.conv2d(x, p["stem.weight"], 1, 1)
        for name, stride, has_sc in self._blocks:
            o = self._act(self._apply_bn(f"{name}.bn1", h, training))
            y = T.conv2d(o, p[f"{name}.conv1.weight"], stride, 1)
            y = self._act(self._apply_bn(f"{name}.bn2", y, training))
            y = T.conv2d(y, p[f"{name}.conv2.weight"], 1, 1)
            sc = T.conv2d(o, p[f"{name}.shortcut.weight"], stride, 0) if has_sc else h
            h = y + sc
        h = self._act(self._apply_bn("final_bn", h, training))
        return self._linear("head", T.avgpool(h))

    # -- state
    def parameter_count(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))

    def state(self) -> dict[str, np.ndarray]:
        """Named arrays (parameters then buffers), in deterministic order."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != np.shape(v):
                raise ValueError(f"state {k}: shape {np.shape(v)} != {target.shape}")
            target[...] = v

    def copy(self) -> Model:
        m = Model.__new__(Model)
        m.arch, m._act = self.arch, self._act
        m.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        m._blocks = getattr(self, "_blocks", [])
        return m


def build(arch: ArchSpec, seed: int = 0) -> Model:
    """Deterministically initialized model (He fan-in normal, BN gamma=1 beta=0)."""
    validate_arch(arch)
    rng = np.random.default_rng(seed)
    m = Model(arch)

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    c, hgt, wid = arch.input_shape
    if arch.family == "mlp":
        sizes = [c * hgt * wid] + [arch.width] * arch.depth + [arch.num_classes]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            name = f"fc{i}" if i < arch.depth else "head"
            m._param(f"{name}.weight", he((a, b), a))
            m._param(f"{name}.bias", np.zeros(b))
        m._blocks = []
        return m

    m._param("stem.weight", he((16, c, 3, 3), 9 * c))
    blocks = []
    cin = 16
    n = (arch.depth - 4) // 6
    for gi, cout in enumerate(_wrn_widths(arch)):
        for b in range(n):
            s = (1 if gi == 0 else 2) if b == 0 else 1
            name = f"g{gi}.b{b}"
            m._bn(f"{name}.bn1", cin)
            m._param(f"{name}.conv1.weight", he((cout, cin, 3, 3), 9 * cin))
            m._bn(f"{name}.bn2", cout)
            m._param(f"{name}.conv2.weight", he((cout, cout, 3, 3), 9 * cout))
            has_sc = cin != cout or s != 1
            if has_sc:
                m._param(f"{name}.shortcut.weight", he((cout, cin, 1, 1), cin))
            blocks.append((name, s, has_sc))
            cin = cout
    m._bn("final_bn", cin)
    m._param("head.weight", he((cin, arch.num_classes), cin))
    m._param("head.bias", np.zeros(arch.num_classes))
    m._blocks = blocks
    return m


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class predictions with frozen BN."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(Tensor(x[i : i + batch_size]), bn="frozen").data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"RLAB"
FORMAT_VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Little-endian: magic, version u32, count u32, then per tensor
    name length u32, UTF-8 name, rank u32, dims u32[rank], f64 data."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(data):
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims).astype(np.float64)
            off += nbytes
    except struct.error as e:
        raise ValueError(f"{path}: truncated model file ({e})") from None
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def save_model(model: Model, path) -> None:
    write_tensors(path, model.state())


def load_model(path, arch: ArchSpec) -> Model:
    m = build(arch, seed=0)
    m.load_state(read_tensors(path))
    return m
