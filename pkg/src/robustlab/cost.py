"""Training FLOP model and electricity / dollar / CO2e estimates.

The FLOP model charges backward passes at twice the forward cost. Per
training example:

* standard training: one forward/backward unit, ``3F``
* AT with ``n`` attack steps: ``(n + 1)`` units, ``3(n + 1)F``
* TRADES with ``n`` steps: ``(n + 2)`` units, ``3(n + 2)F`` (the extra unit is
  the clean branch of the outer loss)

Validation passes and synthetic-data generation are not charged.
"""

from __future__ import annotations

import csv
import math
import os
import shlex
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import ArchSpec, count_forward_flops, count_params

BACKWARD_MULTIPLIER = 2
PUE = 1.58
USD_PER_KWH = 0.12
GCO2_PER_KWH = 566.3
JOULES_PER_KWH = 3.6e6

LOSSES = ("standard", "at", "trades")


def units_per_example(loss: str, steps: int) -> int:
    """Forward+backward units per training example."""
    if loss == "standard":
        return 1
    if steps < 1:
        raise ValueError(f"attack steps must be >= 1, got {steps}")
    if loss == "at":
        return steps + 1
    if loss == "trades":
        return steps + 2
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def batch_plan(dataset_size: int, batch_size: int, extra_fraction: float = 0.0) -> tuple[int, int, int]:
    """Deterministic interleaving of extra data.

    Every batch holds ``round(extra_fraction * batch_size)`` extra samples
    and the rest from the training split; an epoch is one pass over the
    training split. Returns ``(train_per_batch, extra_per_batch, n_batches)``.
    """
    if dataset_size < 1 or batch_size < 1:
        raise ValueError("dataset_size and batch_size must be positive")
    if not 0 <= extra_fraction < 1:
        raise ValueError(f"extra_fraction must lie in [0, 1), got {extra_fraction}")
    n_extra = math.floor(extra_fraction * batch_size + 0.5)
    n_train = batch_size - n_extra
    if n_train < 1:
        raise ValueError("extra_fraction leaves no room for training samples in a batch")
    return n_train, n_extra, math.ceil(dataset_size / n_train)


def examples_per_epoch(dataset_size: int, extra_fraction: float = 0.0, batch_size: int = 128) -> int:
    _, n_extra, n_batches = batch_plan(dataset_size, batch_size, extra_fraction)
    return dataset_size + n_extra * n_batches


@dataclass
class FlopReport:
    forward_flops_per_example: int
    backward_multiplier: int
    units_per_example: int
    per_example_train_flops: int
    examples_per_epoch: int
    epochs: int
    total_train_flops: int
    ema_flops: int = 0
    steps_per_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_flops(
    arch: ArchSpec,
    loss: str,
    steps: int,
    dataset_size: int,
    extra_fraction: float = 0.0,
    epochs: int = 1,
    batch_size: int = 128,
    ema: bool = False,
) -> FlopReport:
    """Analytic training FLOPs (validation excluded).

    EMA updates (2 FLOPs per parameter per optimizer step) are reported in
    ``ema_flops`` and not folded into the total.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    f = count_forward_flops(arch)
    units = units_per_example(loss, steps)
    per_example = units * (1 + BACKWARD_MULTIPLIER) * f
    n_ex = examples_per_epoch(dataset_size, extra_fraction, batch_size)
    n_steps = batch_plan(dataset_size, batch_size, extra_fraction)[2]
    ema_flops = 2 * count_params(arch) * n_steps * epochs if ema else 0
    return FlopReport(f, BACKWARD_MULTIPLIER, units, per_example, n_ex, epochs, per_example * n_ex * epochs, ema_flops, n_steps)


# ---------------------------------------------------------------------------
# power sources
# ---------------------------------------------------------------------------


def _check_samples(samples) -> list[tuple[float, float]]:
    out = [(float(t), float(w)) for t, w in samples]
    for i, (t, w) in enumerate(out):
        if not math.isfinite(w) or w < 0:
            raise ValueError(f"power sample {i} has invalid watts {w}")
        if i and t <= out[i - 1][0]:
            raise ValueError(f"power sample {i}: timestamps must be strictly increasing ({out[i - 1][0]} -> {t})")
    return out


class PowerSource:
    """Yields ``(timestamp_s, watts)`` samples; subclasses define where they come from."""

    kind = "abstract"

    def start(self) -> None:
        pass

    def stop(self) -> None:
        pass

    def samples(self) -> list[tuple[float, float]]:
        raise NotImplementedError

    def mean_watts(self) -> float:
        """Time-weighted (trapezoidal) mean of the samples."""
        s = _check_samples(self.samples())
        if not s:
            raise ValueError(f"{self.kind} power source produced no samples")
        if len(s) == 1:
            return s[0][1]
        t = np.array([a for a, _ in s])
        w = np.array([b for _, b in s])
        return float(np.sum(0.5 * (w[1:] + w[:-1]) * np.diff(t)) / (t[-1] - t[0]))

    def describe(self) -> dict:
        return {"kind": self.kind}


class ConstantPower(PowerSource):
    kind = "constant"

    def __init__(self, watts: float):
        if watts < 0:
            raise ValueError("watts must be >= 0")
        self.watts = float(watts)

    def samples(self):
        return [(0.0, self.watts)]

    def describe(self):
        return {"kind": self.kind, "watts": self.watts}


class TracePower(PowerSource):
    """CSV trace with header ``timestamp_s,watts``."""

    kind = "trace"

    def __init__(self, path):
        self.path = Path(path)

    def samples(self):
        with self.path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["timestamp_s", "watts"]:
                raise ValueError(f"{self.path}: expected header 'timestamp_s,watts', got {reader.fieldnames}")
            return _check_samples((row["timestamp_s"], row["watts"]) for row in reader)

    def describe(self):
        return {"kind": self.kind, "path": str(self.path)}


class ProbePower(PowerSource):
    """Runs ``command`` every ``period`` seconds; each run prints one line of watts.

    Sampling happens on a background thread between :meth:`start` and
    :meth:`stop`; :meth:`sample_once` can also be called directly.
    """

    kind = "probe"

    def __init__(self, command: str, period: float = 1.0, timeout: float = 10.0):
        self.command = command
        self.period = period
        self.timeout = timeout
        self._samples: list[tuple[float, float]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._error: Exception | None = None

    def sample_once(self) -> float:
        argv = shlex.split(self.command)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise RuntimeError(f"power probe {self.command!r} failed to run: {e}") from e
        if proc.returncode != 0:
            raise RuntimeError(
                f"power probe {self.command!r} exited with {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        first = proc.stdout.strip().splitlines()[:1]
        try:
            watts = float(first[0])
        except (IndexError, ValueError):
            raise RuntimeError(f"power probe {self.command!r} printed {proc.stdout[:80]!r}, expected watts") from None
        t = time.monotonic()
        if self._samples and t <= self._samples[-1][0]:
            t = math.nextafter(self._samples[-1][0], math.inf)
        self._samples.append((t, watts))
        return watts

    def _loop(self):
        while not self._stop.is_set():
            try:
                self.sample_once()
            except RuntimeError as e:
                self._error = e
                return
            self._stop.wait(self.period)

    def start(self):
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="power-probe", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        if self._error is not None and not self._samples:
            raise self._error

    def samples(self):
        if self._error is not None and not self._samples:
            raise self._error
        return list(self._samples)

    def describe(self):
        return {"kind": self.kind, "command": self.command, "period": self.period}


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------


@dataclass
class EnergyReport:
    avg_power_watts: float
    wall_seconds: float
    n_gpus: int
    pue: float
    kwh: float
    usd: float
    co2_g: float
    rate_usd_per_kwh: float = USD_PER_KWH
    intensity_g_per_kwh: float = GCO2_PER_KWH
    source: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def energy_from_power(
    avg_watts: float,
    wall_seconds: float,
    n_gpus: int = 1,
    pue: float = PUE,
    rate: float = USD_PER_KWH,
    intensity: float = GCO2_PER_KWH,
) -> EnergyReport:
    """kWh = P * t * g / 3.6e6 * PUE; USD = kWh * rate; gCO2e = kWh * intensity."""
    if wall_seconds <= 0:
        raise ValueError(f"wall_seconds must be > 0, got {wall_seconds}")
    if n_gpus < 1:
        raise ValueError("n_gpus must be >= 1")
    kwh = avg_watts * wall_seconds * n_gpus / JOULES_PER_KWH * pue
    return EnergyReport(avg_watts, wall_seconds, n_gpus, pue, kwh, kwh * rate, kwh * intensity, rate, intensity)


def energy_report(
    source: PowerSource,
    wall_seconds: float,
    n_gpus: int = 1,
    pue: float = PUE,
    rate: float = USD_PER_KWH,
    intensity: float = GCO2_PER_KWH,
) -> EnergyReport:
    rep = energy_from_power(source.mean_watts(), wall_seconds, n_gpus, pue, rate, intensity)
    rep.source = source.describe()
    return rep


#: desk default when no probe is configured: nominal CPU package power
DEFAULT_DESK_WATTS = 65.0
PROBE_ENV = "ROBUSTLAB_POWER_PROBE"


def default_power_source() -> PowerSource:
    cmd = os.environ.get(PROBE_ENV)
    if cmd:
        return ProbePower(cmd)
    return ConstantPower(DEFAULT_DESK_WATTS)
