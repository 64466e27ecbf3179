"""Two-stage training, inference and ablation runs.

Pre-training fits F, G and C on the source labels alone.  The main stage
plays two adversarial games on every batch.  F, G and C follow L1, which
rewards a high discriminator loss, while D follows L2.  H follows L3,
which rewards a low one: pseudo features are pushed away from the seen
mode while staying classifiable.  All gradient sets come from the
same forward pass and are applied together, which is what a pair of
gradient-reversal layers would produce.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import config_hash
from .dataio import SampleSet, TaskBundle
from .evaluation import MetricsReport, RunReport
from .model import DACN, count_params, save_checkpoint

log = logging.getLogger(__name__)

ABLATIONS = ("full", "A1", "A2", "A3", "A4")
LOSS_TERMS = ("Lc1", "Lc2", "Lsup", "Ld", "L1", "L2", "L3")


class NaNAbort(RuntimeError):
    def __init__(self, term: str, stage: str, epoch: int, step: int):
        super().__init__(f"loss term {term} became non-finite in {stage} epoch {epoch} step {step}")
        self.term, self.stage, self.epoch, self.step = term, stage, epoch, step


def sub_seed(seed: int, tag: str) -> int:
    """Independent stream for one consumer of randomness, derived from the root seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


@dataclass
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_train: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    dropout_rate: float = 0.3
    h1_softplus: bool = False
    ablation: str = "full"
    detach_disc_probs: bool = False
    disc_reduction: str = "mean"
    check_isolation: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.epochs_pretrain < 0 or self.epochs_train < 0 or self.batch_size < 1:
            raise ValueError("epoch counts must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.disc_reduction not in ("mean", "sum"):
            raise ValueError("disc_reduction must be 'mean' or 'sum'")
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)

    @classmethod
    def from_config(cls, cfg) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"weights"}
        kwargs = {k: cfg[k] for k in names if k in cfg and cfg[k] is not None}
        if "lr" in cfg and "learning_rate" not in kwargs:
            kwargs["learning_rate"] = cfg["lr"]
        if "dropout" in cfg and "dropout_rate" not in kwargs:
            kwargs["dropout_rate"] = cfg["dropout"]
        return cls(weights=L.LossWeights.from_config(cfg), **kwargs)

    def effective(self) -> "TrainConfig":
        """The configuration actually run once the ablation is applied."""
        w = dataclasses.replace(self.weights)
        pre, tr = self.epochs_pretrain, self.epochs_train
        if self.ablation == "A1":
            tr = 0
        elif self.ablation == "A2":
            w.lambda3 = 0.0
        elif self.ablation == "A3":
            w.lambda4 = 0.0
        elif self.ablation == "A4":
            pre = 0
        return dataclasses.replace(self, weights=w, epochs_pretrain=pre, epochs_train=tr)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        d = self.as_dict()
        d.pop("check_isolation")
        d.pop("device")
        return config_hash(d)


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    data_hash: str = ""
    epochs: list = field(default_factory=list)
    checkpoint: str | None = None

    TIMING_KEYS = ("wall_s",)

    def add(self, stage: str, epoch: int, values: dict, wall_s: float):
        for k, v in values.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"refusing to record non-finite {k}")
        self.epochs.append({"stage": stage, "epoch": epoch, **values, "wall_s": wall_s})

    def stage_epochs(self, stage: str) -> list[dict]:
        return [e for e in self.epochs if e["stage"] == stage]

    def mean_epoch_seconds(self, stage: str) -> float | None:
        rows = self.stage_epochs(stage)
        return float(np.mean([r["wall_s"] for r in rows])) if rows else None

    def comparable(self) -> dict:
        """Everything except wall-clock timings."""
        rows = [{k: v for k, v in e.items() if k not in self.TIMING_KEYS} for e in self.epochs]
        return {"seed": self.seed, "config_hash": self.config_hash, "data_hash": self.data_hash, "epochs": rows}

    def merge(self, other: "RunRecord") -> "RunRecord":
        return RunRecord(self.seed, self.config_hash, self.data_hash, self.epochs + other.epochs, other.checkpoint)

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        head = {"kind": "run", "seed": self.seed, "config_hash": self.config_hash,
                "data_hash": self.data_hash, "checkpoint": self.checkpoint}
        with path.open("w") as fh:
            fh.write(json.dumps(head) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **e}) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RunRecord":
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        head = lines[0]
        epochs = [{k: v for k, v in e.items() if k != "kind"} for e in lines[1:]]
        return cls(head["seed"], head["config_hash"], head.get("data_hash", ""), epochs, head.get("checkpoint"))


def _tensors(samples: SampleSet, device: str):
    X = torch.as_tensor(np.ascontiguousarray(samples.X), dtype=torch.float32, device=device)
    y = torch.as_tensor(samples.y, dtype=torch.long, device=device)
    return X, y


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _make_opt(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def _check_finite(values: dict, stage: str, epoch: int, step: int):
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NaNAbort(name, stage, epoch, step)


def build_model(task: TaskBundle | tuple[int, int, int], cfg: TrainConfig) -> DACN:
    if isinstance(task, TaskBundle):
        v, k, n_classes = task.v, task.k, task.spec.n_classes
    else:
        v, k, n_classes = task
    return DACN(v, n_classes, k, dropout=cfg.dropout_rate, h1_softplus=cfg.h1_softplus,
                seed=sub_seed(cfg.seed, "init")).to(cfg.device)


def pretrain(task: TaskBundle, cfg: TrainConfig, model: DACN | None = None) -> tuple[DACN, RunRecord]:
    """Fit F, G and C on the cross-entropy of the source samples only."""
    if len(task.train) == 0:
        raise ValueError("empty training set")
    model = model or build_model(task, cfg)
    record = RunRecord(cfg.seed, cfg.hash, task.data_hash)
    X, y = _tensors(task.train, cfg.device)
    params = [p for name in "FGC" for p in getattr(model, name).parameters()]
    opt = _make_opt(params, cfg)
    gen = torch.Generator().manual_seed(sub_seed(cfg.seed, "pretrain-batches"))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(sub_seed(cfg.seed, "pretrain-dropout"))
        model.train()
        for epoch in range(cfg.epochs_pretrain):
            t0 = time.perf_counter()
            total, correct, loss_sum = 0, 0, 0.0
            for step, idx in enumerate(_batches(len(X), cfg.batch_size, gen)):
                c = model(X[idx])
                loss = L.ce_seen(c, y[idx])
                _check_finite({"Lc1": loss}, "pretrain", epoch, step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(idx)
                correct += int((c.argmax(1) == y[idx]).sum())
                total += len(idx)
            record.add("pretrain", epoch, {"Lc1": loss_sum / total, "train_acc": correct / total},
                       time.perf_counter() - t0)
            log.debug("pretrain epoch %d Lc1 %.4f", epoch, loss_sum / total)
    model.eval()
    return model, record


def train_step(model: DACN, x, y, cfg: TrainConfig, noise_gen: torch.Generator, opts: dict | None = None,
               update_disc: bool = True, epoch: int = 0, step: int = 0) -> dict:
    """One adversarial/contrastive step; returns the loss terms and discriminator accuracy.

    With ``opts`` set to None nothing is updated and the per-group
    gradients are returned under ``grads`` instead (used by the checks).
    """
    w = cfg.weights
    noise = model.draw_noise(len(x), noise_gen)
    f = model.extract(x)
    fp = model.transform(f, noise)
    g = model.invariant_features(f)
    gp = model.invariant_features(fp)
    c = model.classify(g)
    cp = model.classify(gp)
    if cfg.detach_disc_probs:
        d, dp = model.discriminate(g, c.detach()), model.discriminate(gp, cp.detach())
    else:
        d, dp = model.discriminate(g, c), model.discriminate(gp, cp)

    terms = {
        "Lc1": L.ce_seen(c, y),
        "Lc2": L.ce_pseudo(cp, y),
        "Lsup": L.supcon(torch.cat([g, gp]), torch.cat([y, y]), w.tau, w.supcon_normalize),
        "Ld": L.disc_loss(d, dp) / (len(x) if cfg.disc_reduction == "mean" else 1),
    }
    terms["L1"], terms["L2"], terms["L3"] = L.composite(terms["Lc1"], terms["Lc2"], terms["Lsup"], terms["Ld"], w)
    _check_finite(terms, "train", epoch, step)
    grads = objective_gradients(model, terms)
    if cfg.check_isolation:
        assert_isolated(model, grads)

    out = {k: v.detach() for k, v in terms.items()}
    with torch.no_grad():
        out["disc_acc"] = ((d > 0.5).float().sum() + (dp < 0.5).float().sum()) / (2 * len(x))
        out["pseudo_acc"] = (cp.argmax(1) == y).float().mean()
    if opts is None:
        out["grads"] = grads
    else:
        apply_gradients(model, grads, opts, update_disc)
    return out


OWNERS = {"L1": "FGC", "L2": "D", "L3": "H"}


def objective_gradients(model: DACN, terms: dict) -> dict[str, list[torch.Tensor]]:
    """Update direction of every objective over *all* parameters.

    Each objective is differentiated only with respect to the modules it
    owns; everything else gets an explicit zero, so e.g. the L1 update has
    no component on H or D even though L1 depends on them.
    """
    groups = model.groups()
    out = {}
    for name, owned in OWNERS.items():
        params = [p for n in owned for p in groups[n]]
        raw = torch.autograd.grad(terms[name], params, retain_graph=True, allow_unused=True)
        by_id = {id(p): (torch.zeros_like(p) if g is None else g) for p, g in zip(params, raw)}
        out[name] = [by_id.get(id(p), torch.zeros_like(p)) for p in model.parameters()]
    return out


def assert_isolated(model: DACN, grads: dict):
    groups = model.groups()
    owner = {id(p): n for n, ps in groups.items() for p in ps}
    for name, gs in grads.items():
        for p, g in zip(model.parameters(), gs):
            if owner[id(p)] not in OWNERS[name] and bool(g.any()):
                raise AssertionError(f"{name} update leaks into module {owner[id(p)]}")


def apply_gradients(model: DACN, grads: dict, opts: dict, update_disc: bool = True):
    total = [sum(gs) for gs in zip(*grads.values())]
    for p, g in zip(model.parameters(), total):
        p.grad = g
    opts["FGC"].step()
    opts["H"].step()
    if update_disc:
        opts["D"].step()


def train(task: TaskBundle, pretrained: DACN | None, cfg: TrainConfig) -> tuple[DACN, RunRecord]:
    """Adversarial/contrastive stage starting from ``pretrained`` (or a fresh model)."""
    if pretrained is None:
        model = build_model(task, cfg)
    else:
        if (pretrained.v, pretrained.k, pretrained.n_classes) != (task.v, task.k, task.spec.n_classes):
            raise ValueError("pretrained model shape does not match the task")
        model = pretrained
    record = RunRecord(cfg.seed, cfg.hash, task.data_hash)
    X, y = _tensors(task.train, cfg.device)
    groups = model.groups()
    opts = {
        "FGC": _make_opt(groups["F"] + groups["G"] + groups["C"], cfg),
        "D": _make_opt(groups["D"], cfg),
        "H": _make_opt(groups["H"], cfg),
    }
    update_disc = cfg.ablation != "A3"
    gen = torch.Generator().manual_seed(sub_seed(cfg.seed, "train-batches"))
    noise_gen = torch.Generator().manual_seed(sub_seed(cfg.seed, "train-noise"))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(sub_seed(cfg.seed, "train-dropout"))
        model.train()
        for epoch in range(cfg.epochs_train):
            t0 = time.perf_counter()
            sums = {k: 0.0 for k in (*LOSS_TERMS, "disc_acc", "pseudo_acc")}
            n_batches = 0
            for step, idx in enumerate(_batches(len(X), cfg.batch_size, gen)):
                out = train_step(model, X[idx], y[idx], cfg, noise_gen, opts, update_disc, epoch, step)
                for k in sums:
                    sums[k] += float(out[k])
                n_batches += 1
            means = {k: v / n_batches for k, v in sums.items()}
            record.add("train", epoch, means, time.perf_counter() - t0)
            log.debug("train epoch %d %s", epoch, {k: round(v, 4) for k, v in means.items()})
    model.eval()
    return model, record


@torch.no_grad()
def infer(model: DACN, X, batch_size: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and probabilities with dropout off and H, D unused."""
    was = model.training
    model.eval()
    X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    dev = next(model.parameters()).device
    probs = [model(X[i : i + batch_size].to(dev)).cpu() for i in range(0, len(X), batch_size)]
    model.train(was)
    p = torch.cat(probs).numpy() if probs else np.empty((0, model.n_classes), np.float32)
    return p.argmax(1), p


@torch.no_grad()
def features(model: DACN, X, batch_size: int = 2048) -> np.ndarray:
    was = model.training
    model.eval()
    X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    out = [model.invariant_features(model.extract(X[i : i + batch_size])) for i in range(0, len(X), batch_size)]
    model.train(was)
    return torch.cat(out).numpy()


@torch.no_grad()
def pseudo_accuracy(model: DACN, samples: SampleSet, seed: int = 0, batch_size: int = 2048) -> float:
    """Accuracy of C on pseudo features H(F(x), noise) against the source labels."""
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(sub_seed(seed, "pseudo-eval"))
    X, y = _tensors(samples, "cpu")
    correct = 0
    for i in range(0, len(X), batch_size):
        xb = X[i : i + batch_size]
        f = model.extract(xb)
        fp = model.transform(f, model.draw_noise(len(xb), gen))
        correct += int((model.classify(model.invariant_features(fp)).argmax(1) == y[i : i + batch_size]).sum())
    model.train(was)
    return correct / max(len(X), 1)


def evaluate_split(model: DACN, samples: SampleSet, n_classes: int, **extra) -> MetricsReport:
    t0 = time.perf_counter()
    pred, _ = infer(model, samples.X)
    extra.setdefault("infer_s", time.perf_counter() - t0)
    return MetricsReport.from_predictions(samples.y, pred, n_classes, samples.modes, **extra)


def evaluate(model: DACN, task: TaskBundle, record: RunRecord | None = None, variant: str = "full",
             seed: int = 0, include_test2: bool = True) -> RunReport:
    extra = {"n_params_train": count_params(model, "training"), "n_params_infer": count_params(model, "inference")}
    if record is not None:
        extra["train_s_per_epoch"] = record.mean_epoch_seconds("train") or record.mean_epoch_seconds("pretrain")
    n = task.spec.n_classes
    t1 = evaluate_split(model, task.test1, n, **extra)
    t2 = None
    if include_test2:
        test2 = task.test2
        t2 = evaluate_split(model, test2, n, **extra) if len(test2) else None
    return RunReport(seed, variant, t1, t2)


def fit(task: TaskBundle, cfg: TrainConfig, pretrained: DACN | None = None,
        pretrain_record: RunRecord | None = None) -> tuple[DACN, RunRecord]:
    """Run both stages as dictated by ``cfg.ablation``.

    A pretrained model (with its record) may be passed in to share the
    first stage between variants; it is copied, never modified.
    """
    eff = cfg.effective()
    if eff.epochs_pretrain == 0:
        model, record = build_model(task, eff), RunRecord(eff.seed, eff.hash, task.data_hash)
    elif pretrained is not None:
        model = build_model(task, eff)
        model.load_state_dict(pretrained.state_dict())
        record = pretrain_record or RunRecord(eff.seed, eff.hash, task.data_hash)
        record = RunRecord(eff.seed, eff.hash, task.data_hash, list(record.epochs))
    else:
        model, record = pretrain(task, eff)
    if eff.epochs_train > 0:
        model, rec2 = train(task, model, eff)
        record = record.merge(rec2)
    record.config_hash = eff.hash
    return model, record


def run_ablation(task: TaskBundle, cfg: TrainConfig, out_dir: str | Path | None = None,
                 pretrained: DACN | None = None, pretrain_record: RunRecord | None = None
                 ) -> tuple[DACN, RunRecord, RunReport]:
    model, record = fit(task, cfg, pretrained, pretrain_record)
    report = evaluate(model, task, record, cfg.ablation, cfg.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out_dir / f"{cfg.ablation}_seed{cfg.seed}.safetensors", record.config_hash,
                               {"ablation": cfg.ablation, "seed": cfg.seed})
        record.checkpoint = str(ckpt)
        report.checkpoint = str(ckpt)
        report.record_path = str(record.to_jsonl(out_dir / f"{cfg.ablation}_seed{cfg.seed}.jsonl"))
    return model, record, report


def compare_variants(task: TaskBundle, cfg: TrainConfig, seeds, variants=("full", "A1"),
                     out_dir: str | Path | None = None) -> dict[str, list[RunReport]]:
    """Train every variant for every seed; variants that pretrain share one pretrained model per seed."""
    reports: dict[str, list[RunReport]] = {v: [] for v in variants}
    for seed in seeds:
        base = dataclasses.replace(cfg, seed=seed)
        shared = None
        if any(v not in ("A4",) for v in variants):
            shared = pretrain(task, base.effective())
        for variant in variants:
            vcfg = dataclasses.replace(base, ablation=variant)
            pre, rec = shared if variant != "A4" else (None, None)
            _, _, report = run_ablation(task, vcfg, out_dir, pre, rec)
            reports[variant].append(report)
            log.info("seed %d %s test1 %.4f test2 %s", seed, variant, report.test1.acc, report.test2_acc)
    return reports
