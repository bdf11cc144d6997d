"""Loss functions: cosine similarity, bidirectional InfoNCE, caption
cross-entropy and their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

_NORM_EPS = 1e-12


def cosine_similarity(a, b) -> float:
    """Standard cosine similarity; zero-norm inputs yield 0 with a warning."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ValueError(f"length mismatch: {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine_similarity of a zero-norm vector is defined as 0", stacklevel=2)
        return 0.0
    return float(np.dot(av, bv) / (na * nb))


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    # Zero rows stay zero (similarity 0) instead of producing NaNs.
    return x / x.norm(dim=-1, keepdim=True).clamp_min(_NORM_EPS)


def info_nce(u_rows, v_rows, tau, direction: str) -> torch.Tensor:
    """In-batch InfoNCE over N (text, image) pairs.

    Row i of each input is one pair; the positive for query i is candidate i
    and the other N-1 rows are the negatives.  ``direction`` selects the
    query side: "t2i" queries with the text rows u over the image rows v,
    "i2t" the reverse.  Cosine similarities are divided by the temperature
    tau before the softmax.
    """
    u = torch.as_tensor(u_rows) if not isinstance(u_rows, torch.Tensor) else u_rows
    v = torch.as_tensor(v_rows) if not isinstance(v_rows, torch.Tensor) else v_rows
    if u.ndim != 2 or v.ndim != 2 or u.shape != v.shape:
        raise ValueError(f"expected matching [N, q] inputs, got {tuple(u.shape)} and {tuple(v.shape)}")
    if u.shape[0] < 1:
        raise ValueError("need at least one pair")
    if direction not in ("t2i", "i2t"):
        raise ValueError(f"direction must be 't2i' or 'i2t', got {direction!r}")
    dtype = torch.promote_types(
        u.dtype if u.dtype.is_floating_point else torch.float32,
        v.dtype if v.dtype.is_floating_point else torch.float32,
    )
    u, v = u.to(dtype), v.to(dtype)
    tau_t = tau if isinstance(tau, torch.Tensor) else torch.tensor(float(tau), dtype=dtype)
    if float(tau_t.detach()) <= 0.0:
        raise ValueError("temperature must be positive")

    sims = _unit_rows(u) @ _unit_rows(v).T
    if direction == "i2t":
        sims = sims.T
    logits = sims / tau_t
    targets = torch.arange(logits.shape[0])
    return torch.nn.functional.cross_entropy(logits, targets)


def captioning_cross_entropy(logits, targets, loss_mask) -> torch.Tensor:
    """Mean -log p(target) over the masked positions.

    The mask marks caption-token positions; visual-prefix and padding
    positions are excluded by the caller.
    """
    lt = torch.as_tensor(logits) if not isinstance(logits, torch.Tensor) else logits
    tg = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    mask = torch.as_tensor(np.asarray(loss_mask), dtype=torch.bool)
    if lt.shape[:-1] != tg.shape or tg.shape != mask.shape:
        raise ValueError(f"shape mismatch: logits {tuple(lt.shape)}, targets {tuple(tg.shape)}, mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise ValueError("loss mask selects no positions")
    flat_logits = lt.reshape(-1, lt.shape[-1])[mask.reshape(-1)]
    flat_targets = tg.reshape(-1)[mask.reshape(-1)]
    logp = torch.log_softmax(flat_logits, dim=-1)
    return -logp[torch.arange(flat_targets.shape[0]), flat_targets].mean()


@dataclass(frozen=True)
class LossBreakdown:
    caption: float
    t2i: float
    i2t: float
    total: float
    lambda_caption: float
    lambda_retrieval: float

    def as_dict(self) -> dict[str, float]:
        return {
            "loss_caption": self.caption,
            "loss_t2i": self.t2i,
            "loss_i2t": self.i2t,
            "loss_total": self.total,
        }


def combined_loss(caption, t2i, i2t, lambda_caption: float = 1.0, lambda_retrieval: float = 1.0):
    """Weighted sum of the caption and the two contrastive terms.

    Returns (total, LossBreakdown); the total keeps the input type so a
    tensor input stays differentiable.
    """
    if lambda_caption < 0 or lambda_retrieval < 0:
        raise ValueError("loss weights must be non-negative")
    total = lambda_caption * caption + lambda_retrieval * (t2i + i2t)

    def scalar(x) -> float:
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    breakdown = LossBreakdown(
        caption=scalar(caption),
        t2i=scalar(t2i),
        i2t=scalar(i2t),
        total=scalar(total),
        lambda_caption=lambda_caption,
        lambda_retrieval=lambda_retrieval,
    )
    return total, breakdown
