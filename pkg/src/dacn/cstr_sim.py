"""Closed-loop CSTR simulation with fault injection.

The plant is the classic jacketed exothermic reactor (first-order A -> B)
whose reactor temperature is held at a setpoint by a PI loop manipulating the
coolant flow.  Operating modes differ only in that setpoint.  Faults either
alter plant parameters (steps, exponential decays) or bias a recorded sensor
channel; sensor faults reach the dynamics only through the controller.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .config import config_hash, load_config, subconfig

log = logging.getLogger(__name__)

MECHANISMS = ("none", "parameter-step", "parameter-ramp", "sensor-bias", "exponential-decay")
PLANT_FIELDS = ("Q", "V", "Ci", "Ti", "Tci", "Vc", "k0", "E_over_R", "dHr", "rho", "Cp", "rho_c", "Cp_c", "UA")
DIVERGENCE_LIMIT = 1e4


class SimulationDiverged(RuntimeError):
    def __init__(self, message: str, fault_id: str | None = None, mode_id: str | None = None):
        super().__init__(message)
        self.fault_id = fault_id
        self.mode_id = mode_id


@dataclass(frozen=True)
class PlantParams:
    Q: float
    V: float
    Ci: float
    Ti: float
    Tci: float
    Vc: float
    k0: float
    E_over_R: float
    dHr: float
    rho: float
    Cp: float
    rho_c: float
    Cp_c: float
    UA: float

    def __post_init__(self):
        for name in PLANT_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"plant parameter {name} is not finite")
            # k0 and UA may decay towards zero under faults but never below
            if name != "dHr" and value < 0:
                raise ValueError(f"plant parameter {name} must be positive, got {value}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "PlantParams":
        plant = subconfig(cfg, "plant")
        return cls(**{name: float(plant[name]) for name in PLANT_FIELDS})

    def replace(self, **changes) -> "PlantParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PlantState:
    C: float
    T: float
    Tc: float
    t: float = 0.0

    def rate_constant(self, params: PlantParams) -> float:
        return params.k0 * math.exp(-params.E_over_R / self.T)


@dataclass
class ControllerState:
    """Reverse-acting PI loop: a hot reactor opens the coolant valve."""

    setpoint: float
    Kp: float
    Ki: float
    bias: float
    Qc_min: float
    Qc_max: float
    integral: float = 0.0
    output: float = field(init=False)

    def __post_init__(self):
        self.output = min(max(self.bias, self.Qc_min), self.Qc_max)

    def update(self, measured_T: float, dt: float) -> float:
        error = measured_T - self.setpoint
        trial_integral = self.integral + error * dt
        raw = self.bias + self.Kp * error + self.Ki * trial_integral
        clamped = min(max(raw, self.Qc_min), self.Qc_max)
        # conditional integration: only integrate when it does not push further into saturation
        if clamped == raw or (raw > self.Qc_max and error < 0) or (raw < self.Qc_min and error > 0):
            self.integral = trial_integral
        self.output = clamped
        return clamped


@dataclass(frozen=True)
class ModeSpec:
    mode_id: str
    setpoint_offset: float


@dataclass(frozen=True)
class FaultSpec:
    fault_id: str
    mechanism: str = "none"
    target: str | None = None
    magnitude: float = 0.0
    onset: float = 200.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown fault mechanism {self.mechanism!r}")
        if self.mechanism != "none" and not self.target:
            raise ValueError(f"fault {self.fault_id} needs a target")
        if self.mechanism in ("parameter-step", "parameter-ramp", "exponential-decay") and self.target not in PLANT_FIELDS:
            raise ValueError(f"fault {self.fault_id} targets unknown parameter {self.target!r}")
        if self.mechanism == "exponential-decay" and self.magnitude <= 0:
            raise ValueError("decay time constant must be positive")

    @property
    def is_sensor(self) -> bool:
        return self.mechanism == "sensor-bias"

    def active(self, t: float) -> bool:
        return self.mechanism != "none" and t >= self.onset

    def params_at(self, params: PlantParams, t: float) -> PlantParams:
        if not self.active(t) or self.is_sensor:
            return params
        base = getattr(params, self.target)
        if self.mechanism == "parameter-step":
            value = base * (1.0 + self.magnitude)
        elif self.mechanism == "parameter-ramp":
            # magnitude is the relative change per minute
            value = base * (1.0 + self.magnitude * (t - self.onset))
        else:
            value = base * math.exp(-(t - self.onset) / self.magnitude)
        return params.replace(**{self.target: value})

    def sensor_offset(self, channel: str, t: float) -> float:
        if self.is_sensor and self.target == channel and self.active(t):
            return self.magnitude
        return 0.0


NO_FAULT = FaultSpec("F0")


@dataclass
class RawSeries:
    times: np.ndarray
    channels: np.ndarray
    fault_id: str
    mode_id: str
    seed: int | None = None
    channel_names: tuple[str, ...] = ()
    onset: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.channels = np.asarray(self.channels, dtype=float)
        if self.channels.ndim != 2 or self.channels.shape[0] != self.times.shape[0]:
            raise ValueError(f"channels shape {self.channels.shape} does not match {self.times.shape[0]} times")
        if not self.channel_names:
            self.channel_names = tuple(f"x{i}" for i in range(self.channels.shape[1]))
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.channels.shape[1]:
            raise ValueError("channel_names length does not match channel count")

    @property
    def n_steps(self) -> int:
        return self.channels.shape[0]

    @property
    def v(self) -> int:
        return self.channels.shape[1]

    def with_channels(self, channels: np.ndarray) -> "RawSeries":
        return dataclasses.replace(self, channels=channels)

    def equals(self, other: "RawSeries") -> bool:
        return (
            self.fault_id == other.fault_id
            and self.mode_id == other.mode_id
            and self.channel_names == other.channel_names
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.channels, other.channels)
        )


@dataclass
class SimConfig:
    """Everything besides (mode, fault, seed) that determines a simulation."""

    params: PlantParams
    channels: tuple[str, ...]
    noise: dict[str, float]
    setpoint: float
    Kp: float
    Ki: float
    Qc_min: float
    Qc_max: float
    duration: float = 1200.0
    interval: float = 1.0
    substeps: int = 12
    onset: float = 200.0
    modes: dict[str, ModeSpec] = field(default_factory=dict)
    faults: dict[str, FaultSpec] = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "SimConfig":
        channels = tuple(cfg["channels"])
        noise = {ch: float(subconfig(cfg, "noise").get(ch, 0.0)) for ch in channels}
        sim = subconfig(cfg, "sim")
        control = subconfig(cfg, "control")
        onset = float(sim.get("onset", 200.0))
        modes = {m: ModeSpec(m, float(off)) for m, off in subconfig(cfg, "mode").items()}
        faults = {}
        for fid, spec in subconfig(cfg, "fault").items():
            mechanism, target, magnitude = spec
            faults[fid] = FaultSpec(
                fid, mechanism, None if target == "-" else target, float(magnitude), onset
            )
        return cls(
            params=PlantParams.from_config(cfg),
            channels=channels,
            noise=noise,
            setpoint=float(control["setpoint"]),
            Kp=float(control["Kp"]),
            Ki=float(control["Ki"]),
            Qc_min=float(control["Qc_min"]),
            Qc_max=float(control["Qc_max"]),
            duration=float(sim.get("duration", 1200.0)),
            interval=float(sim.get("interval", 1.0)),
            substeps=int(sim.get("substeps", 12)),
            onset=onset,
            modes=modes,
            faults=dict(sorted(faults.items(), key=lambda kv: _fault_number(kv[0]))),
            raw=dict(cfg),
        )

    @classmethod
    def load(cls, path: str | Path = "cstr_plant.cfg") -> "SimConfig":
        return cls.from_config(load_config(path))

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def fault(self, fault_id: str) -> FaultSpec:
        try:
            return self.faults[fault_id]
        except KeyError:
            raise KeyError(f"fault {fault_id!r} not configured; known: {list(self.faults)}") from None

    def mode(self, mode_id: str) -> ModeSpec:
        try:
            return self.modes[mode_id]
        except KeyError:
            raise KeyError(f"mode {mode_id!r} not configured; known: {list(self.modes)}") from None


def _fault_number(fault_id: str) -> int:
    digits = "".join(ch for ch in fault_id if ch.isdigit())
    return int(digits) if digits else -1


def derivatives(state: PlantState, qc: float, params: PlantParams) -> tuple[float, float, float]:
    """Right-hand side of the mass and energy balances."""
    C, T, Tc = state.C, state.T, state.Tc
    if not (math.isfinite(C) and math.isfinite(T) and math.isfinite(Tc)):
        raise ValueError(f"non-finite plant state {state}")
    if T <= 0:
        raise ValueError(f"reactor temperature must be positive, got {T}")
    p = params
    k = p.k0 * math.exp(-p.E_over_R / T)
    dilution = p.Q / p.V
    exchange = p.UA * (T - Tc)
    dC = dilution * (p.Ci - C) - k * C
    dT = dilution * (p.Ti - T) - p.dHr * k * C / (p.rho * p.Cp) - exchange / (p.rho * p.Cp * p.V)
    dTc = qc / p.Vc * (p.Tci - Tc) + exchange / (p.rho_c * p.Cp_c * p.Vc)
    return dC, dT, dTc


def rk4(f: Callable[[float, np.ndarray], np.ndarray], t: float, y, dt: float):
    """One classic fourth-order Runge-Kutta step of ``dy/dt = f(t, y)``."""
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(t, y))
    k2 = np.asarray(f(t + dt / 2, y + dt / 2 * k1))
    k3 = np.asarray(f(t + dt / 2, y + dt / 2 * k2))
    k4 = np.asarray(f(t + dt, y + dt * k3))
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_rk4(
    state: PlantState,
    controller: ControllerState,
    fault: FaultSpec,
    dt: float,
    params: PlantParams,
    t_next: float | None = None,
) -> PlantState:
    """Advance the plant by ``dt`` with the controller output held constant.

    Fault parameter changes are gated on the step start time so the step that
    begins at the onset is the first to see them; continuous decays are then
    evaluated at each stage time.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    qc = controller.output
    t0 = state.t
    faulted = fault.active(t0) and not fault.is_sensor

    def rhs(t: float, C: float, T: float, Tc: float):
        p = fault.params_at(params, t) if faulted else params
        return derivatives(PlantState(C, T, Tc, t), qc, p)

    C, T, Tc = state.C, state.T, state.Tc
    h = dt / 2
    a = rhs(t0, C, T, Tc)
    b = rhs(t0 + h, C + h * a[0], T + h * a[1], Tc + h * a[2])
    c = rhs(t0 + h, C + h * b[0], T + h * b[1], Tc + h * b[2])
    d = rhs(t0 + dt, C + dt * c[0], T + dt * c[1], Tc + dt * c[2])
    s = dt / 6
    C = C + s * (a[0] + 2 * b[0] + 2 * c[0] + d[0])
    T = T + s * (a[1] + 2 * b[1] + 2 * c[1] + d[1])
    Tc = Tc + s * (a[2] + 2 * b[2] + 2 * c[2] + d[2])
    if not (math.isfinite(T) and math.isfinite(Tc) and math.isfinite(C)) or abs(T) > DIVERGENCE_LIMIT:
        raise SimulationDiverged(f"plant diverged at t={t0 + dt:.3f} min under fault {fault.fault_id}", fault.fault_id)
    return PlantState(max(C, 0.0), T, Tc, t0 + dt if t_next is None else t_next)


def steady_state(params: PlantParams, setpoint: float) -> tuple[PlantState, float]:
    """Operating point holding the reactor at ``setpoint``: (state, coolant flow)."""
    p = params
    T = setpoint
    k = p.k0 * math.exp(-p.E_over_R / T)
    dilution = p.Q / p.V
    C = p.Ci * dilution / (dilution + k)
    heat = dilution * (p.Ti - T) - p.dHr * k * C / (p.rho * p.Cp)
    Tc = T - heat * p.rho * p.Cp * p.V / p.UA
    if Tc <= p.Tci:
        raise ValueError(f"setpoint {setpoint} K needs coolant hotter than its inlet; no cooling operating point")
    qc = p.UA * (T - Tc) / (p.rho_c * p.Cp_c * (Tc - p.Tci))
    return PlantState(C, T, Tc, 0.0), qc


def _true_channels(state: PlantState, qc: float, params: PlantParams) -> dict[str, float]:
    return {
        "C": state.C,
        "T": state.T,
        "Tc": state.Tc,
        "Qc": qc,
        "Ci": params.Ci,
        "Ti": params.Ti,
        "Tci": params.Tci,
        "Q": params.Q,
    }


@dataclass
class Trajectory:
    """Noise-free plant history alongside the recorded series (for diagnostics)."""

    states: np.ndarray
    coolant: np.ndarray


def simulate(
    mode: ModeSpec | str,
    fault: FaultSpec | str,
    duration: float | None = None,
    sample_interval: float | None = None,
    seed: int = 0,
    config: SimConfig | None = None,
    return_trajectory: bool = False,
):
    """Run one closed-loop experiment and return its recorded channels.

    Samples are taken at ``interval, 2*interval, ..., duration`` so a run holds
    ``duration / interval`` rows.  The controller acts on the measured
    (noisy, possibly biased) reactor temperature once per sample and its
    output is held between samples.  Noise is drawn from a generator seeded
    only by ``seed`` in a fixed order, so two runs share every pre-onset
    sample bit for bit.
    """
    config = config or default_sim_config()
    mode = config.mode(mode) if isinstance(mode, str) else mode
    fault = config.fault(fault) if isinstance(fault, str) else fault
    duration = config.duration if duration is None else duration
    interval = config.interval if sample_interval is None else sample_interval
    n_steps = int(round(duration / interval))
    if n_steps < 1 or abs(n_steps * interval - duration) > 1e-9 * duration:
        raise ValueError(f"duration {duration} is not a whole number of {interval}-min samples")
    if fault.mechanism != "none" and not (0 < fault.onset < duration):
        raise ValueError(f"fault onset {fault.onset} outside (0, {duration})")

    params = config.params
    setpoint = config.setpoint + mode.setpoint_offset
    state, qc_ss = steady_state(params, setpoint)
    controller = ControllerState(setpoint, config.Kp, config.Ki, qc_ss, config.Qc_min, config.Qc_max)
    rng = np.random.default_rng(seed)
    stds = np.array([config.noise.get(ch, 0.0) for ch in config.channels])
    n_sub = config.substeps

    times = np.arange(1, n_steps + 1) * interval
    rows = np.empty((n_steps, len(config.channels)))
    truth = np.empty((n_steps, 3))
    coolant = np.empty(n_steps)
    for i in range(n_steps):
        qc_applied = controller.output
        for j in range(n_sub):
            t_next = ((i * n_sub + j + 1) * interval) / n_sub
            try:
                state = step_rk4(state, controller, fault, interval / n_sub, params, t_next=t_next)
            except (SimulationDiverged, ValueError) as exc:
                raise SimulationDiverged(
                    f"simulation diverged under fault {fault.fault_id} in mode {mode.mode_id}: {exc}",
                    fault.fault_id,
                    mode.mode_id,
                ) from exc
        t = times[i]
        true = _true_channels(state, qc_applied, fault.params_at(params, t))
        noise = rng.standard_normal(len(config.channels)) * stds
        for c, ch in enumerate(config.channels):
            rows[i, c] = true[ch] + noise[c] + fault.sensor_offset(ch, t)
        truth[i] = (state.C, state.T, state.Tc)
        coolant[i] = qc_applied
        controller.update(rows[i, config.channels.index("T")], interval)

    series = RawSeries(
        times=times,
        channels=rows,
        fault_id=fault.fault_id,
        mode_id=mode.mode_id,
        seed=seed,
        channel_names=config.channels,
        onset=fault.onset,
    )
    if return_trajectory:
        return series, Trajectory(truth, coolant)
    return series


_DEFAULT: SimConfig | None = None


def default_sim_config() -> SimConfig:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = SimConfig.load("cstr_plant.cfg")
    return _DEFAULT


def derive_seed(root_seed: int, mode_id: str, fault_id: str) -> int:
    """Per-(mode, fault) seed, independent of generation order."""
    key = [root_seed, _fault_number(mode_id) + 1000, _fault_number(fault_id)]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint32)[0])


def write_series_csv(series: RawSeries, path: str | Path) -> None:
    data = np.column_stack([series.times, series.channels])
    header = ",".join(("t",) + series.channel_names)
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def generate_dataset(
    modes: Iterable[str],
    faults: Iterable[str],
    out_dir: str | Path,
    config: SimConfig | None = None,
    seed: int = 0,
    duration: float | None = None,
    interval: float | None = None,
    samples_per_class: int | None = None,
) -> dict:
    """Simulate every (mode, fault) pair into ``out_dir``.

    Writes ``<mode>_<fault>.csv`` per pair plus ``manifest.json``.  On any
    failure the files written by this call are removed again.
    """
    config = config or default_sim_config()
    modes, faults = list(modes), list(faults)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    duration = config.duration if duration is None else duration
    interval = config.interval if interval is None else interval
    written: list[Path] = []
    entries = []
    try:
        for mode_id in modes:
            for fault_id in faults:
                s = derive_seed(seed, mode_id, fault_id)
                series = simulate(mode_id, fault_id, duration, interval, s, config)
                path = out_dir / f"{mode_id}_{fault_id}.csv"
                written.append(path)
                write_series_csv(series, path)
                entries.append(
                    {
                        "mode_id": mode_id,
                        "fault_id": fault_id,
                        "file": path.name,
                        "n_rows": series.n_steps,
                        "seed": s,
                        "onset": config.fault(fault_id).onset,
                        "config_hash": config.hash,
                    }
                )
                log.info("simulated %s %s (%d rows)", mode_id, fault_id, series.n_steps)
        per_class = samples_per_class
        available = windows_after_onset(duration, interval, config.onset)
        if per_class is None:
            per_class = available
        manifest = {
            "channels": list(config.channels),
            "duration": duration,
            "interval": interval,
            "onset": config.onset,
            "root_seed": seed,
            "config_hash": config.hash,
            "samples_per_class": per_class,
            "counts": {m: min(per_class, available) * len(faults) for m in modes},
            "faults": {
                f: dataclasses.asdict(config.fault(f)) for f in faults
            },
            "modes": {m: config.mode(m).setpoint_offset for m in modes},
            "entries": entries,
        }
        manifest_path = out_dir / "manifest.json"
        written.append(manifest_path)
        manifest_path.write_text(json.dumps(manifest, indent=2))
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return manifest


def windows_after_onset(duration: float, interval: float, onset: float) -> int:
    """Samples at or after the onset (inclusive of the final sample)."""
    return int(round((duration - onset) / interval)) + 1


def all_fault_ids(config: SimConfig | None = None) -> list[str]:
    return list((config or default_sim_config()).faults)


def parse_id_list(text: str | Sequence[str], universe: Sequence[str]) -> list[str]:
    if isinstance(text, str):
        if text.strip().lower() == "all":
            return list(universe)
        items = [t.strip() for t in text.split(",") if t.strip()]
    else:
        items = list(text)
    unknown = [i for i in items if i not in universe]
    if unknown:
        raise KeyError(f"unknown ids {unknown}; known: {list(universe)}")
    return items
