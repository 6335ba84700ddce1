"""ID classification losses, the multi-person separation loss and the total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericError

MPSL_FORMULAS = ("prose", "verbatim")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    margin: float = 0.3
    mpsl_formula: str = "prose"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.margin < 0:
            raise ConfigError(f"loss weights must be nonnegative: {self}")
        if self.mpsl_formula not in MPSL_FORMULAS:
            raise ConfigError(f"mpsl_formula must be one of {MPSL_FORMULAS}")


@dataclass
class LossBundle:
    """Loss components of one step. Fields are tensors during training."""

    l_g: object
    l_q: object
    l_m: object
    l_final: object

    def as_floats(self) -> dict:
        out = {}
        for k in ("l_g", "l_q", "l_m", "l_final"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``1 - cos(u, v)`` along the last axis. Zero-norm inputs raise."""
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise NumericError("cosine distance of a zero-norm vector is undefined")
    return 1.0 - (u * v).sum(dim=-1) / (nu * nv)


def id_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy of ``softmax(logits)``; accepts a single vector or a batch."""
    single = logits.dim() == 1
    logits2 = logits[None] if single else logits
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    k = logits2.shape[-1]
    if (labels < 0).any() or (labels >= k).any():
        raise IndexError(f"label {labels.tolist()} out of range for {k} classes")
    return F.cross_entropy(logits2, labels)


def mps_loss(feat_a, feat_b, query_a, weights: LossWeights | None = None) -> torch.Tensor:
    """Hinge separating the two guided refinements of one gallery.

    ``feat_a``/``feat_b`` are embeddings of the gallery refined under the
    guidance of query A and query B; ``query_a`` is the embedding of query A.
    The default ``prose`` orientation pulls ``feat_a`` toward ``query_a`` and
    pushes it away from ``feat_b``; ``verbatim`` swaps the two distances.
    Batched inputs return per-row losses.
    """
    w = weights or LossWeights()
    d_pos = cosine_distance(feat_a, query_a)
    d_neg = cosine_distance(feat_a, feat_b)
    if w.mpsl_formula == "prose":
        return torch.clamp(w.margin + d_pos - d_neg, min=0.0)
    return torch.clamp(w.margin + d_neg - d_pos, min=0.0)


def total_loss(l_g, l_q, l_m, weights: LossWeights | None = None) -> LossBundle:
    w = weights or LossWeights()
    for name, value in (("l_g", l_g), ("l_q", l_q), ("l_m", l_m)):
        x = float(value.detach()) if torch.is_tensor(value) else float(value)
        if math.isnan(x) or x < 0:
            raise ContractError(f"loss component {name}={x} must be finite and nonnegative")
    return LossBundle(l_g, l_q, l_m, l_g + w.alpha * l_q + w.beta * l_m)
