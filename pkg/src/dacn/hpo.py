"""Hyperparameter search scored by pseudo-feature classification accuracy.

The objective only looks at the source mode (pseudo features of the
training windows, plus test1 for logging); the unseen-mode split is sealed
for the whole search.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .dataio import TaskBundle
from .trainer import NaNAbort, TrainConfig, evaluate_split, fit, pseudo_accuracy

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = {
    "lambda1": (0.0, 10.0),
    "lambda2": (0.0, 10.0),
    "lambda3": (0.0, 10.0),
    "lambda4": (0.0, 10.0),
    "tau": (0.05, 1.0),
    "learning_rate": (1e-4, 1e-2),
}
LOG_SCALE = {"learning_rate"}
WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3", "lambda4", "tau")


@dataclass
class SearchSpace:
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    budget: int = 20
    seed: int = 0
    log_scale: set = field(default_factory=lambda: set(LOG_SCALE))

    def __post_init__(self):
        self.bounds = {k: (float(lo), float(hi)) for k, (lo, hi) in self.bounds.items()}
        for k, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"{k}: lower bound {lo} must be below upper bound {hi}")
            if k in self.log_scale and lo <= 0:
                raise ValueError(f"{k}: log-scaled bounds must be positive")
            if k not in DEFAULT_BOUNDS:
                raise ValueError(f"unknown search parameter {k!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "SearchSpace":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        if "log_scale" in data:
            data["log_scale"] = set(data["log_scale"])
        return cls(**data)

    @property
    def names(self) -> list[str]:
        return list(self.bounds)

    def from_unit(self, u: np.ndarray) -> dict[str, float]:
        out = {}
        for x, name in zip(u, self.names):
            lo, hi = self.bounds[name]
            if name in self.log_scale:
                val = math.exp(math.log(lo) + x * (math.log(hi) - math.log(lo)))
            else:
                val = lo + x * (hi - lo)
            # exp/log round-off can step just outside the box
            out[name] = float(min(max(val, lo), hi))
        return out


def apply_params(template: TrainConfig, params: dict) -> TrainConfig:
    w = dataclasses.replace(template.weights, **{k: v for k, v in params.items() if k in WEIGHT_KEYS})
    rest = {k: v for k, v in params.items() if k not in WEIGHT_KEYS}
    return dataclasses.replace(template, weights=w, **rest)


def sobol_points(n: int, dim: int, seed: int) -> np.ndarray:
    m = max(int(math.ceil(math.log2(max(n, 1)))), 0)
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def local_points(best: np.ndarray, n: int, seed: int, radius: float = 0.15) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(best + rng.normal(0.0, radius, size=(n, len(best))), 0.0, 1.0)


@dataclass
class Trial:
    trial: int
    params: dict
    pseudo_acc: float | None
    test1_acc: float | None
    wall_s: float
    status: str = "ok"

    def row(self, names) -> list:
        return [self.trial, *[self.params[n] for n in names], self.pseudo_acc, self.test1_acc, self.wall_s, self.status]


def objective(task: TaskBundle, cfg: TrainConfig) -> tuple[float, float]:
    """(pseudo-feature accuracy on the training windows, test1 accuracy)."""
    model, _ = fit(task, cfg)
    pseudo = pseudo_accuracy(model, task.train, cfg.seed)
    t1 = evaluate_split(model, task.test1, task.spec.n_classes).acc
    return pseudo, t1


def write_trial_log(trials: list[Trial], names: list[str], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", *names, "pseudo_acc", "test1_acc", "wall_s", "status"])
        for t in sorted(trials, key=lambda t: t.trial):
            w.writerow(t.row(names))
    return path


def search(space: SearchSpace, task: TaskBundle, template: TrainConfig, strategy: str = "sobol",
           log_path: str | Path | None = None, objective_fn=objective) -> tuple[TrainConfig, list[Trial]]:
    """Evaluate ``space.budget`` configurations and return the best one with the trial log.

    ``strategy`` is ``sobol`` (scrambled quasi-random points) or ``refine``
    (half the budget quasi-random, the rest sampled around the incumbent).
    """
    if strategy not in ("sobol", "refine"):
        raise ValueError(f"unknown strategy {strategy!r}")
    names = space.names
    n_global = space.budget if strategy == "sobol" else max(1, space.budget // 2)
    queue = list(sobol_points(n_global, len(names), space.seed))
    trials: list[Trial] = []
    units: list[np.ndarray] = []
    was_sealed = task.test2_sealed
    task.test2_sealed = True
    try:
        while len(trials) < space.budget:
            if not queue:
                scored = [(t.pseudo_acc, -t.trial) for t in trials if t.pseudo_acc is not None]
                if scored:
                    best_i = -max(scored)[1]
                    centre = units[best_i]
                else:
                    centre = np.full(len(names), 0.5)
                queue = list(local_points(centre, space.budget - len(trials), space.seed + len(trials)))
            u = queue.pop(0)
            params = space.from_unit(u)
            cfg = apply_params(template, params)
            t0 = time.perf_counter()
            try:
                pseudo, t1 = objective_fn(task, cfg)
                status = "ok"
            except NaNAbort as exc:
                log.warning("trial %d aborted: %s", len(trials), exc)
                pseudo, t1, status = None, None, f"nan:{exc.term}"
            trials.append(Trial(len(trials), params, pseudo, t1, time.perf_counter() - t0, status))
            units.append(np.asarray(u))
            log.info("trial %d pseudo_acc %s test1_acc %s", len(trials) - 1, pseudo, t1)
            if log_path is not None:
                write_trial_log(trials, names, log_path)
    finally:
        task.test2_sealed = was_sealed
    ok = [t for t in trials if t.pseudo_acc is not None]
    if not ok:
        raise RuntimeError("every trial failed")
    best = max(ok, key=lambda t: (t.pseudo_acc, -t.trial))
    return apply_params(template, best.params), trials
