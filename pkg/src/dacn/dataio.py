"""Standardization, time-series windowing, splitting and task assembly.

Each mode is standardized with the statistics of its own normal-condition
run so that what remains in the data is health information rather than the
operating point.  Windows of ``k`` consecutive samples (channels first) are
the model inputs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import config_hash
from .cstr_sim import RawSeries

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
LABEL_POLICIES = ("end", "start")
STATS_SCOPES = ("own", "source")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    origin_mode: str
    origin_condition: str = "normal-only"
    floored: tuple[int, ...] = ()

    @property
    def v(self) -> int:
        return len(self.mean)

    @classmethod
    def unit(cls, v: int, origin_mode: str = "-") -> "ChannelStats":
        return cls(np.zeros(v), np.ones(v), origin_mode)


def compute_stats(series: Sequence[RawSeries] | RawSeries, normal_fault: str = "F0") -> ChannelStats:
    """Per-channel mean and population std over the normal runs of one mode."""
    if isinstance(series, RawSeries):
        series = [series]
    if not series:
        raise ValueError("compute_stats needs at least one series")
    modes = {s.mode_id for s in series}
    if len(modes) != 1:
        raise ValueError(f"compute_stats expects a single mode, got {sorted(modes)}")
    normal = [s for s in series if s.fault_id == normal_fault]
    if not normal:
        raise ValueError(f"no {normal_fault} series for mode {modes.pop()}")
    data = np.concatenate([s.channels for s in normal], axis=0)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    floored = tuple(int(i) for i in np.flatnonzero(std < STD_FLOOR))
    if floored:
        names = [normal[0].channel_names[i] for i in floored]
        warnings.warn(f"zero-variance channels {names} floored to {STD_FLOOR}", RuntimeWarning, stacklevel=2)
        std = np.where(std < STD_FLOOR, STD_FLOOR, std)
    return ChannelStats(mean, std, normal[0].mode_id, floored=floored)


def standardize(series: RawSeries, stats: ChannelStats) -> RawSeries:
    if stats.v != series.v:
        raise ValueError(f"stats cover {stats.v} channels but series has {series.v}")
    return series.with_channels((series.channels - stats.mean) / stats.std)


def destandardize(series: RawSeries, stats: ChannelStats) -> RawSeries:
    if stats.v != series.v:
        raise ValueError(f"stats cover {stats.v} channels but series has {series.v}")
    return series.with_channels(series.channels * stats.std + stats.mean)


def decimate(series: RawSeries, factor: int) -> RawSeries:
    """Keep every ``factor``-th row, aligned so the last sample survives."""
    if factor < 1:
        raise ValueError("decimation factor must be >= 1")
    if factor == 1:
        return series
    start = (series.n_steps - 1) % factor
    return dataclasses.replace(
        series, times=series.times[start::factor], channels=series.channels[start::factor]
    )


@dataclass(frozen=True)
class WindowedSample:
    window: np.ndarray
    label: int
    mode_id: str


@dataclass
class SampleSet:
    """A batch of windows: ``X`` is (n, v, k), ``y`` labels, ``modes`` tags."""

    X: np.ndarray
    y: np.ndarray
    modes: np.ndarray
    end_times: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.modes = np.asarray(self.modes, dtype=object)
        if not (len(self.X) == len(self.y) == len(self.modes)):
            raise ValueError("X, y and modes must have equal length")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(self.X[i], int(self.y[i]), str(self.modes[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(
            self.X[idx], self.y[idx], self.modes[idx], None if self.end_times is None else self.end_times[idx]
        )

    @classmethod
    def empty(cls, v: int, k: int) -> "SampleSet":
        return cls(np.empty((0, v, k), dtype=np.float32), np.empty(0, np.int64), np.empty(0, object), np.empty(0))

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        ends = None
        if all(p.end_times is not None for p in parts):
            ends = np.concatenate([p.end_times for p in parts])
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.modes for p in parts]),
            ends,
        )

    def class_counts(self, n_classes: int | None = None) -> np.ndarray:
        return np.bincount(self.y, minlength=n_classes or 0)


def window(
    series: RawSeries,
    k: int = 64,
    label: int = 0,
    normal_label: int = 0,
    policy: str = "end",
    dtype=np.float32,
) -> SampleSet:
    """All stride-1 windows of ``k`` rows; a run of n rows gives n - k + 1.

    A window from a faulty run carries ``label`` when the fault is visible
    under ``policy`` (``end``: its last sample is at or after the onset;
    ``start``: its first one is) and ``normal_label`` otherwise.
    """
    if policy not in LABEL_POLICIES:
        raise ValueError(f"unknown label policy {policy!r}")
    if k < 1:
        raise ValueError("window length must be >= 1")
    if series.n_steps < k:
        raise ValueError(f"series has {series.n_steps} steps, fewer than window length {k}")
    X = sliding_window_view(series.channels, k, axis=0).astype(dtype)  # (n-k+1, v, k)
    starts = series.times[: series.n_steps - k + 1]
    ends = series.times[k - 1 :]
    y = np.full(len(X), label, dtype=np.int64)
    if series.onset is not None and label != normal_label:
        edge = ends if policy == "end" else starts
        y[edge < series.onset] = normal_label
    return SampleSet(np.ascontiguousarray(X), y, np.full(len(X), series.mode_id, dtype=object), ends.copy())


def split(samples: SampleSet, ratio: float = 0.8, seed: int = 0) -> tuple[SampleSet, SampleSet]:
    """Stratified random split; ``floor(ratio * n_c)`` of each class go to the first part."""
    if not 0 < ratio < 1:
        raise ValueError("split ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in np.unique(samples.y):
        idx = np.flatnonzero(samples.y == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has {len(idx)} sample(s); at least 2 are needed to split")
        idx = rng.permutation(idx)
        n_first = min(max(int(np.floor(ratio * len(idx))), 1), len(idx) - 1)
        first.append(idx[:n_first])
        second.append(idx[n_first:])
    a, b = np.sort(np.concatenate(first)), np.sort(np.concatenate(second))
    return samples.subset(a), samples.subset(b)


def take_per_class(samples: SampleSet, n: int | None, seed: int = 0) -> SampleSet:
    """Random subset with at most ``n`` windows per class."""
    if n is None:
        return samples
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(samples.y):
        idx = np.flatnonzero(samples.y == c)
        if len(idx) > n:
            idx = rng.choice(idx, size=n, replace=False)
        keep.append(idx)
    return samples.subset(np.sort(np.concatenate(keep)))


@dataclass
class TaskSpec:
    source_mode: str
    target_modes: list[str]
    split_ratio: float = 0.8
    seed: int = 0
    k: int = 64
    classes: list[str] = field(default_factory=lambda: [f"F{i}" for i in range(13)])
    normal_class: str = "F0"
    samples_per_class: int | None = None
    stats_scope: str = "own"
    label_policy: str = "end"
    decimation: int = 1
    onset: float | None = None

    def __post_init__(self):
        self.target_modes = list(self.target_modes or [])
        self.classes = list(self.classes)
        if self.source_mode in self.target_modes:
            raise ValueError(f"source mode {self.source_mode} also listed as a target")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.stats_scope not in STATS_SCOPES:
            raise ValueError(f"stats_scope must be one of {STATS_SCOPES}")
        if self.normal_class not in self.classes:
            raise ValueError(f"normal class {self.normal_class} missing from classes")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "TaskSpec":
        targets = cfg.get("target_modes") or []
        if isinstance(targets, str):
            targets = [targets]
        classes = cfg.get("classes")
        kwargs = dict(
            source_mode=str(cfg["source_mode"]),
            target_modes=[str(t) for t in targets],
            split_ratio=float(cfg.get("ratio", 0.8)),
            seed=int(cfg.get("seed", 0)),
            k=int(cfg.get("k", 64)),
            samples_per_class=cfg.get("samples_per_class"),
            stats_scope=cfg.get("stats_scope", "own"),
            label_policy=cfg.get("label_policy", "end"),
            decimation=int(cfg.get("decimation", 1)),
            onset=cfg.get("onset"),
            normal_class=cfg.get("normal_class", "F0"),
        )
        if classes:
            kwargs["classes"] = [str(c) for c in classes]
        return cls(**kwargs)

    @property
    def modes(self) -> list[str]:
        return [self.source_mode, *self.target_modes]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class SealedSplitError(RuntimeError):
    pass


@dataclass
class TaskBundle:
    train: SampleSet
    test1: SampleSet
    _test2: SampleSet
    spec: TaskSpec
    stats: dict[str, ChannelStats] = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    test2_reads: int = 0
    test2_sealed: bool = False

    @property
    def test2(self) -> SampleSet:
        """Unseen-mode samples; every access is counted for hygiene audits."""
        if self.test2_sealed:
            raise SealedSplitError("test2 is sealed for this phase")
        self.test2_reads += 1
        return self._test2

    @property
    def classes(self) -> list[str]:
        return self.spec.classes

    @property
    def v(self) -> int:
        return self.train.X.shape[1]

    @property
    def k(self) -> int:
        return self.train.X.shape[2]

    def __post_init__(self):
        import hashlib

        h = hashlib.sha256()
        for part in (self.train, self.test1, self._test2):
            h.update(np.ascontiguousarray(part.X).tobytes())
            h.update(part.y.tobytes())
        self._data_hash = h.hexdigest()[:16]

    @property
    def data_hash(self) -> str:
        return self._data_hash


def _series_by_mode(series: Iterable[RawSeries] | Mapping[str, Sequence[RawSeries]]) -> dict[str, list[RawSeries]]:
    if isinstance(series, Mapping):
        return {m: list(v) for m, v in series.items()}
    out: dict[str, list[RawSeries]] = {}
    for s in series:
        out.setdefault(s.mode_id, []).append(s)
    return out


def mode_windows(
    series: Sequence[RawSeries], stats: ChannelStats, spec: TaskSpec
) -> SampleSet:
    """Standardized windows of one mode, restricted to the labelled span of each run."""
    normal = spec.classes.index(spec.normal_class)
    parts = []
    for s in sorted(series, key=lambda s: spec.classes.index(s.fault_id)):
        label = spec.classes.index(s.fault_id)
        z = decimate(standardize(s, stats), spec.decimation)
        onset = spec.onset if spec.onset is not None else s.onset
        if onset is not None:
            z = dataclasses.replace(z, onset=onset)
        w = window(z, spec.k, label, normal, spec.label_policy)
        keep = w.y == label
        if onset is not None:
            keep &= w.end_times >= onset - 1e-9
        parts.append(w.subset(np.flatnonzero(keep)))
    return SampleSet.concat(parts)


def build_task(spec: TaskSpec, series: Iterable[RawSeries] | Mapping[str, Sequence[RawSeries]]) -> TaskBundle:
    by_mode = _series_by_mode(series)
    gaps = []
    for mode in spec.modes:
        present = {s.fault_id for s in by_mode.get(mode, [])}
        missing = [c for c in spec.classes if c not in present]
        if missing:
            gaps.append(f"{mode}: {', '.join(missing)}" if present else f"{mode}: whole mode")
    if gaps:
        raise KeyError("task data incomplete; missing " + "; ".join(gaps))

    stats = {}
    for mode in spec.modes:
        origin = mode if spec.stats_scope == "own" else spec.source_mode
        if origin not in stats:
            stats[origin] = compute_stats(by_mode[origin], spec.normal_class)
        stats[mode] = stats[origin]

    wanted = set(spec.classes)
    source = mode_windows([s for s in by_mode[spec.source_mode] if s.fault_id in wanted], stats[spec.source_mode], spec)
    train, test1 = split(source, spec.split_ratio, spec.seed)
    train = take_per_class(train, spec.samples_per_class, spec.seed + 1)
    targets = [
        mode_windows([s for s in by_mode[m] if s.fault_id in wanted], stats[m], spec) for m in spec.target_modes
    ]
    v = source.X.shape[1]
    test2 = SampleSet.concat(targets) if targets else SampleSet.empty(v, spec.k)
    counts = {
        "train": len(train),
        "test1": len(test1),
        "test2": len(test2),
        "train_per_class": train.class_counts(spec.n_classes).tolist(),
        "test2_per_mode": {m: int(np.sum(test2.modes == m)) for m in spec.target_modes},
    }
    log.info("task %s -> %s: %s", spec.source_mode, spec.target_modes, counts)
    return TaskBundle(train, test1, test2, spec, stats, counts)


# --- CSV ingestion ----------------------------------------------------------


def _parse_name(path: Path) -> tuple[str | None, str | None]:
    parts = path.stem.split("_")
    if len(parts) == 2:
        return parts[0], parts[1]
    return None, None


def read_series_csv(
    path: str | Path,
    schema: Sequence[str] | int | None = None,
    mode_id: str | None = None,
    fault_id: str | None = None,
    onset: float | None = None,
    seed: int | None = None,
) -> RawSeries:
    """Read one ``t,<channels...>`` file.

    ``schema`` is either the expected channel names or just their count
    (``53`` for Tennessee Eastman exports).
    """
    path = Path(path)
    name_mode, name_fault = _parse_name(path)
    mode_id = mode_id or name_mode
    fault_id = fault_id or name_fault
    if mode_id is None or fault_id is None:
        raise SchemaError(f"{path.name}: cannot infer mode/fault; use <mode>_<fault>.csv or a manifest")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file") from None
        if not header or header[0] != "t":
            raise SchemaError(f"{path.name}: first column must be 't', got {header[:1]}")
        names = header[1:]
        if isinstance(schema, int):
            if len(names) != schema:
                raise SchemaError(f"{path.name}: expected {schema} channels, found {len(names)}")
        elif schema is not None and list(schema) != names:
            missing = [c for c in schema if c not in names]
            extra = [c for c in names if c not in schema]
            raise SchemaError(
                f"{path.name}: header mismatch; missing columns {missing}, unexpected columns {extra}"
            )
        rows = []
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise SchemaError(f"{path.name}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise SchemaError(f"{path.name}:{lineno}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    data = np.asarray(rows)
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0]) + 2
        raise SchemaError(f"{path.name}:{bad}: non-finite value")
    return RawSeries(data[:, 0], data[:, 1:], fault_id, mode_id, seed, tuple(names), onset)


def ingest_csv(
    path: str | Path,
    schema: Sequence[str] | int | None = None,
    modes: Sequence[str] | None = None,
    faults: Sequence[str] | None = None,
    onset: float | None = None,
) -> list[RawSeries]:
    """Load series from a CSV file or a directory.

    A directory with ``manifest.json`` (as written by the simulator) takes
    mode, fault, seed and onset from the manifest; otherwise file names must
    follow ``<mode>_<fault>.csv``.  ``onset`` overrides the fault onset for
    external data such as Tennessee Eastman exports.
    """
    path = Path(path)
    if path.is_file():
        return [read_series_csv(path, schema, onset=onset)]
    manifest_path = path / "manifest.json"
    out = []
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if schema is None:
            schema = manifest.get("channels")
        for entry in manifest["entries"]:
            if modes and entry["mode_id"] not in modes or faults and entry["fault_id"] not in faults:
                continue
            entry_onset = onset if onset is not None else entry.get("onset")
            s = read_series_csv(
                path / entry["file"], schema, entry["mode_id"], entry["fault_id"], entry_onset, entry.get("seed")
            )
            if entry.get("fault_id") == "F0" and entry_onset is None:
                s.onset = manifest.get("onset")
            out.append(s)
    else:
        for file in sorted(path.glob("*.csv")):
            m, f = _parse_name(file)
            if modes and m not in modes or faults and f not in faults:
                continue
            out.append(read_series_csv(file, schema, onset=onset))
    if not out:
        raise FileNotFoundError(f"no series found under {path}")
    return out


# --- bundle cache -----------------------------------------------------------


def save_bundle(bundle: TaskBundle, path: str | Path, cfg: Mapping | None = None) -> Path:
    path = Path(path)
    meta = {
        "spec": bundle.spec.as_dict(),
        "counts": bundle.counts,
        "config_hash": config_hash(cfg or bundle.spec.as_dict()),
        "stats": {
            m: {"mean": s.mean.tolist(), "std": s.std.tolist(), "origin_mode": s.origin_mode}
            for m, s in bundle.stats.items()
        },
    }
    arrays = {}
    for name, part in (("train", bundle.train), ("test1", bundle.test1), ("test2", bundle._test2)):
        arrays[f"{name}_X"] = part.X
        arrays[f"{name}_y"] = part.y
        arrays[f"{name}_modes"] = part.modes.astype(str)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


def load_bundle(path: str | Path) -> TaskBundle:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        parts = {
            name: SampleSet(z[f"{name}_X"], z[f"{name}_y"], z[f"{name}_modes"].astype(object))
            for name in ("train", "test1", "test2")
        }
    stats = {
        m: ChannelStats(np.array(s["mean"]), np.array(s["std"]), s["origin_mode"]) for m, s in meta["stats"].items()
    }
    bundle = TaskBundle(parts["train"], parts["test1"], parts["test2"], TaskSpec(**meta["spec"]), stats, meta["counts"])
    bundle.config_hash = meta["config_hash"]
    return bundle
