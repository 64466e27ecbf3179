"""Networks of the dual adversarial and contrastive model.

    F  feature extractor       (B, v, 64)  -> (B, 128, 16)
    H  pseudo-feature generator (B, 128, 16) + noise -> (B, 128, 16)
    G  invariant encoder        (B, 2048)   -> (B, 256)
    C  classifier               (B, 256)    -> (B, L) probabilities
    D  mode discriminator       g (x) c     -> (B, 1) in (0, 1)

Only F, G and C are needed at inference time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as Fn
from torch import nn

FORMAT_VERSION = 1
HEADER_KEY = "dacn"
SIGMA_FLOOR = 1e-5
N1_RANGE = (0.05, 1.95)


class FeatureExtractor(nn.Module):
    def __init__(self, v: int, width: int = 128, kernel: int = 3):
        super().__init__()
        self.conv1 = nn.Conv1d(v, width, kernel, padding="same")
        self.conv2 = nn.Conv1d(width, width, kernel, padding="same")
        self.conv3 = nn.Conv1d(width, width, kernel, padding="same")
        self.pool = nn.MaxPool1d(2)

    def forward(self, x):
        x = Fn.relu(self.pool(self.conv1(x)))
        x = Fn.relu(self.pool(self.conv2(x)))
        return Fn.relu(self.conv3(x))


def instance_stats(f, eps: float = SIGMA_FLOOR):
    """Per-sample, per-channel mean and (population) std over time."""
    mu = f.mean(dim=-1, keepdim=True)
    # floor the variance, not the std: sqrt has an infinite slope at 0 (dead ReLU channels)
    sigma = f.var(dim=-1, keepdim=True, unbiased=False).clamp_min(eps * eps).sqrt()
    return mu, sigma


def adain(f, scale, shift, eps: float = SIGMA_FLOOR):
    """scale * (f - mu) / sigma + shift with (B, C) scale/shift broadcast over time."""
    mu, sigma = instance_stats(f, eps)
    return scale.unsqueeze(-1) * (f - mu) / sigma + shift.unsqueeze(-1)


@dataclass
class NoiseDraw:
    n1: torch.Tensor
    n2: torch.Tensor
    seed: int | None = None

    def to(self, device) -> "NoiseDraw":
        return NoiseDraw(self.n1.to(device), self.n2.to(device), self.seed)


def draw_noise(batch: int, dim: int = 128, generator: torch.Generator | None = None, seed: int | None = None) -> NoiseDraw:
    """One (n1, n2) pair per sample: n1 ~ U(0.05, 1.95), n2 ~ N(0, 1)."""
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    lo, hi = N1_RANGE
    n1 = lo + (hi - lo) * torch.rand(batch, dim, generator=generator)
    # rand is in [0, 1); keep n1 strictly inside the open interval
    n1 = n1.clamp(min=torch.nextafter(torch.tensor(lo), torch.tensor(hi)).item())
    n2 = torch.randn(batch, dim, generator=generator)
    return NoiseDraw(n1, n2, seed)


class PseudoFeatureGenerator(nn.Module):
    def __init__(self, channels: int = 128, noise_dim: int = 128, softplus: bool = False):
        super().__init__()
        self.h1 = nn.Linear(noise_dim, channels)
        self.h2 = nn.Linear(noise_dim, channels)
        self.softplus = softplus
        self.noise_dim = noise_dim

    def scale_shift(self, noise: NoiseDraw):
        scale = self.h1(noise.n1)
        if self.softplus:
            scale = Fn.softplus(scale)
        return scale, self.h2(noise.n2)

    def forward(self, f, noise: NoiseDraw):
        scale, shift = self.scale_shift(noise)
        return adain(f, scale, shift)


class InvariantEncoder(nn.Module):
    def __init__(self, in_dim: int = 2048, out_dim: int = 256, dropout: float = 0.3):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, f):
        return self.drop(Fn.relu(self.fc(f.flatten(1))))


class Classifier(nn.Module):
    def __init__(self, in_dim: int = 256, n_classes: int = 13):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_classes)

    def logits(self, g):
        return self.fc(g)

    def forward(self, g):
        return torch.softmax(self.fc(g), dim=-1)


def outer(g, c):
    """Flattened outer product laid out as L blocks of len(g): block j is c_j * g."""
    return (c.unsqueeze(2) * g.unsqueeze(1)).flatten(1)


class Discriminator(nn.Module):
    def __init__(self, feat_dim: int = 256, n_classes: int = 13):
        super().__init__()
        self.fc = nn.Linear(feat_dim * n_classes, 1)

    def forward(self, g, c):
        return torch.sigmoid(self.fc(outer(g, c)))


class DACN(nn.Module):
    def __init__(
        self,
        v: int,
        n_classes: int,
        k: int = 64,
        width: int = 128,
        hidden: int = 256,
        dropout: float = 0.3,
        h1_softplus: bool = False,
        seed: int | None = None,
    ):
        super().__init__()
        if k % 4:
            raise ValueError(f"window length {k} must be divisible by 4")
        self.v, self.k, self.n_classes = v, k, n_classes
        self.hparams = dict(v=v, n_classes=n_classes, k=k, width=width, hidden=hidden, dropout=dropout,
                            h1_softplus=h1_softplus)
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.F = FeatureExtractor(v, width)
            self.H = PseudoFeatureGenerator(width, width, h1_softplus)
            self.G = InvariantEncoder(width * k // 4, hidden, dropout)
            self.C = Classifier(hidden, n_classes)
            self.D = Discriminator(hidden, n_classes)

    def check_input(self, x):
        if x.ndim != 3 or x.shape[1] != self.v or x.shape[2] != self.k:
            raise ValueError(f"expected input (batch, {self.v}, {self.k}), got {tuple(x.shape)}")

    def extract(self, x):
        self.check_input(x)
        return self.F(x)

    def transform(self, f, noise: NoiseDraw):
        return self.H(f, noise)

    def invariant_features(self, f, dropout_active: bool | None = None):
        if dropout_active is None:
            return self.G(f)
        was = self.G.training
        self.G.train(dropout_active)
        try:
            return self.G(f)
        finally:
            self.G.train(was)

    def classify(self, g):
        return self.C(g)

    def discriminate(self, g, c):
        return self.D(g, c)

    def draw_noise(self, batch: int, generator: torch.Generator | None = None) -> NoiseDraw:
        dev = next(self.parameters()).device
        return draw_noise(batch, self.H.noise_dim, generator).to(dev)

    def forward(self, x):
        return self.classify(self.invariant_features(self.extract(x)))

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in "FHGCD"}


def count_params(model: DACN, stage: str = "inference") -> int:
    if stage == "inference":
        parts = "FGC"
    elif stage == "training":
        parts = "FHGCD"
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return sum(p.numel() for name in parts for p in getattr(model, name).parameters())


def save_checkpoint(model: DACN, path: str | Path, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write weights as little-endian float32 safetensors with a small header."""
    from safetensors.torch import save_file

    path = Path(path)
    state = {k: t.detach().to("cpu", torch.float32).contiguous() for k, t in model.state_dict().items()}
    header = {
        "format_version": FORMAT_VERSION,
        "v": model.v,
        "k": model.k,
        "L": model.n_classes,
        "config_hash": config_hash,
        "dtype": "float32",
        "hparams": model.hparams,
        "extra": extra or {},
    }
    # one metadata key: the writer does not keep key order, so several keys would break byte-identical reruns
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(state, str(path), metadata={HEADER_KEY: json.dumps(header, sort_keys=True)})
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = dict(fh.metadata() or {})
    if HEADER_KEY not in meta:
        raise ValueError(f"{path}: not a DACN checkpoint")
    return json.loads(meta[HEADER_KEY])


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> tuple[DACN, dict]:
    from safetensors.torch import load_file

    header = read_checkpoint_header(path)
    if header["format_version"] > FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format {header['format_version']} is newer than supported")
    model = DACN(**header["hparams"])
    model.load_state_dict(load_file(str(path), device=map_location))
    return model.to(map_location), header
