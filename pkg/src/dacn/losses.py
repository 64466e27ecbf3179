"""Loss terms and the three composite objectives."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as Fn

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 0.68
    lambda2: float = 0.35
    lambda3: float = 7.75
    lambda4: float = 6.88
    tau: float = 0.5
    l3_uses_lambda2: bool = False
    supcon_normalize: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        return cls(**{k: cfg[k] for k in names if k in cfg and cfg[k] is not None})


def _safe_log(p):
    return torch.log(p.clamp_min(LOG_FLOOR))


def _one_hot(y, n_classes: int):
    if y.ndim == 1:
        return Fn.one_hot(y.long(), n_classes).to(torch.get_default_dtype())
    return y


def ce_seen(c, y):
    """Mean cross-entropy of probability rows ``c`` against labels (indices or one-hot)."""
    y = _one_hot(y, c.shape[-1])
    if y.shape != c.shape:
        raise ValueError(f"prediction shape {tuple(c.shape)} does not match labels {tuple(y.shape)}")
    return -(y.to(c.dtype) * _safe_log(c)).sum() / c.shape[0]


def ce_pseudo(c_prime, y):
    """Same loss on pseudo-feature predictions; labels come from the source samples."""
    return ce_seen(c_prime, y)


def supcon(g, y, tau: float = 0.5, normalize: bool = True):
    """Supervised contrastive loss summed over anchors.

    Every positive pair (i, j) contributes
    ``-log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau)) / (n - 1)``
    where ``s`` are dot products and ``n`` is the total batch size
    (seen plus pseudo).  Anchors without positives add nothing.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if y.ndim > 1:
        y = y.argmax(dim=-1)
    n = g.shape[0]
    if n < 2:
        return g.sum() * 0.0
    if normalize:
        g = Fn.normalize(g, dim=-1)
    logits = g @ g.T / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=g.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (y.unsqueeze(0) == y.unsqueeze(1)) & ~self_mask
    return -(log_prob.masked_fill(~pos, 0.0)).sum() / (n - 1)


def disc_loss(d, d_prime):
    """-sum log d - sum log(1 - d'), left unnormalized."""
    if d.shape[0] != d_prime.shape[0]:
        raise ValueError(f"{d.shape[0]} seen outputs vs {d_prime.shape[0]} pseudo outputs")
    return -_safe_log(d).sum() - _safe_log(1 - d_prime).sum()


def composite(l_c1, l_c2, l_sup, l_d, w: LossWeights):
    """(L1, L2, L3): objectives for {F, G, C}, D and H respectively."""
    l1 = w.lambda1 * l_c1 + w.lambda2 * l_c2 + w.lambda3 * l_sup - w.lambda4 * l_d
    l2 = l_d
    coef = w.lambda2 if w.l3_uses_lambda2 else w.lambda1
    l3 = coef * l_c2 + w.lambda3 * l_sup + w.lambda4 * l_d
    return l1, l2, l3
