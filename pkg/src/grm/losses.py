"""The five-term training objective.

Three hinge contrastive losses (one per similarity level, weighted a/b/c
with a+b+c=1), a reconstruction term tying the mean region feature to the
mean gated patch, a closed-form KL to the standard normal, and an entropy
term over the raw patch-prompt attention. Contrastive sums are divided by
the batch size so the margin keeps its meaning across batch sizes; the KL
is additionally divided by the feature dim unless strict mode is requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    activation,
    add,
    from_op,
    accumulate,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    sub,
    xlogx,
)
from .errors import DomainError, ParameterError, ShapeError

NEGATIVE_MODES = ("sum_all", "hardest")


@dataclass
class LossWeights:
    """Level weights, margin, and auxiliary-term coefficients."""

    a: float = 0.4
    b: float = 0.4
    c: float = 0.2
    alpha: float = 0.2
    lambda_recon: float = 0.1
    lambda_reg: float = 0.01
    negative_mode: str = "sum_all"

    def validate(self):
        if abs(self.a + self.b + self.c - 1.0) > 1e-9:
            raise ParameterError(f"level weights must sum to 1, got {self.a + self.b + self.c}")
        if min(self.a, self.b, self.c) < 0:
            raise ParameterError("level weights must be non-negative")
        if self.alpha <= 0:
            raise ParameterError("margin alpha must be > 0")
        if self.lambda_recon < 0 or self.lambda_reg < 0:
            raise ParameterError("loss coefficients must be non-negative")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ParameterError(f"negative_mode must be one of {NEGATIVE_MODES}")
        return self


@dataclass
class LossReport:
    """Scalar values of every objective term for one forward pass."""

    l_con_ori: float
    l_con_key: float
    l_con_unc: float
    l_con: float
    l_recon: float
    l_kl: float
    l_ent: float
    l_reg: float
    total: float

    def json_line(self, step: int) -> str:
        # fixed key set and order; this is the training-log record contract
        return json.dumps(
            {
                "step": step,
                "l_con_ori": self.l_con_ori,
                "l_con_key": self.l_con_key,
                "l_con_unc": self.l_con_unc,
                "l_recon": self.l_recon,
                "l_kl": self.l_kl,
                "l_ent": self.l_ent,
                "total": self.total,
            }
        )

    def first_non_finite(self):
        for name in ("l_con_ori", "l_con_key", "l_con_unc", "l_recon", "l_kl", "l_ent", "total"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None


def contrastive(s: Tensor, alpha: float, negative_mode: str = "sum_all") -> Tensor:
    """Hinge contrastive loss over a square similarity grid, divided by B.

    sum_all accumulates [alpha + s_ij - s_ii]_+ and [alpha + s_ji - s_ii]_+
    over every j != i; hardest keeps only the worst violator per query in
    each direction. Ties in hardest mode pick the lowest index.
    """
    if negative_mode not in NEGATIVE_MODES:
        raise ParameterError(f"negative_mode must be one of {NEGATIVE_MODES}")
    if s.data.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"contrastive needs a square matrix, got {s.shape}")
    B = s.shape[0]
    if B == 1:
        return Tensor(0.0)
    data = s.data
    diag = np.diag(data)
    off = ~np.eye(B, dtype=bool)
    h_row = np.maximum(alpha + data - diag[:, None], 0.0) * off  # [i,j]: text j against image i
    h_col = np.maximum(alpha + data.T - diag[:, None], 0.0) * off  # [i,j]: s_ji against s_ii

    if negative_mode == "sum_all":
        total = (h_row.sum() + h_col.sum()) / B
        active_row = (h_row > 0.0) & off
        active_col = (h_col > 0.0) & off
    else:
        row_arg = np.argmax(h_row, axis=1)
        col_arg = np.argmax(h_col, axis=1)
        row_val = h_row[np.arange(B), row_arg]
        col_val = h_col[np.arange(B), col_arg]
        total = (row_val.sum() + col_val.sum()) / B
        active_row = np.zeros_like(off)
        active_col = np.zeros_like(off)
        active_row[np.arange(B), row_arg] = row_val > 0.0
        active_col[np.arange(B), col_arg] = col_val > 0.0

    def bwd(g):
        coef = float(g) / B
        ds = np.zeros_like(data)
        ds += coef * active_row
        ds += coef * active_col.T
        np.fill_diagonal(
            ds,
            ds.diagonal() - coef * (active_row.sum(axis=1) + active_col.sum(axis=1)),
        )
        accumulate(s, ds)

    return from_op(np.float64(total), (s,), bwd)


def combine_levels(l_ori: Tensor, l_key: Tensor, l_unc: Tensor, weights: LossWeights) -> Tensor:
    """a*l_ori + b*l_key + c*l_unc with the weights invariant enforced."""
    weights.validate()
    return add(add(mul(l_ori, weights.a), mul(l_key, weights.b)), mul(l_unc, weights.c))


def reconstruction(u: Tensor, v_hat: Tensor, mask) -> Tensor:
    """Squared distance between mean region feature and masked mean patch, per instance."""
    if u.shape[0] != v_hat.shape[0] or u.shape[2] != v_hat.shape[2]:
        raise ShapeError(f"reconstruction shapes differ: u {u.shape} vs v_hat {v_hat.shape}")
    region_mean = reduce_mean(u, axis=1)
    mask3 = np.broadcast_to(np.asarray(mask, dtype=bool)[:, :, None], v_hat.shape)
    patch_mean = reduce_mean(v_hat, axis=1, mask=mask3)
    sq = activation("square", sub(region_mean, patch_mean))
    return reduce_mean(reduce_sum(sq, axis=1))


def kl_divergence(mu: Tensor, log_var: Tensor, per_dim: bool = True) -> Tensor:
    """-1/2 sum(1 + log var - mu^2 - var), summed over regions and dims.

    Averaged over the batch, and over the feature dim as well unless
    per_dim=False (the strict reading, which only averages over the batch).
    """
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu {mu.shape} and log_var {log_var.shape} must match")
    B, _, d = mu.shape
    inner = sub(sub(add(log_var, 1.0), activation("square", mu)), activation("exp", log_var))
    denom = B * d if per_dim else B
    return mul(reduce_sum(inner), -0.5 / denom)


def entropy_reg(attn: Tensor, source: str = "raw") -> Tensor:
    """-(1/K) sum over prompts and patches of a*log(a), batch-averaged.

    raw follows the objective as written (sigmoid scores, not a normalized
    distribution); normalized uses the patch-normalized attention and is a
    proper per-prompt entropy. Entries of 0 contribute 0.
    """
    if source not in ("raw", "normalized"):
        raise ParameterError(f"entropy source must be raw or normalized, got {source!r}")
    if attn.data.ndim != 3:
        raise ShapeError(f"attention must be (B, L, K), got {attn.shape}")
    if source == "raw" and np.any(attn.data > 1.0):
        raise DomainError("raw attention entries must lie in [0, 1]")
    B, _, K = attn.shape
    return mul(reduce_sum(xlogx(attn)), -1.0 / (K * B))


def total_loss(
    levels,
    regions,
    gated_image,
    weights: LossWeights,
    entropy_source: str = "raw",
    kl_per_dim: bool = True,
):
    """Assemble every term; returns (LossReport, total Tensor for backward).

    regions may be None (region prompting disabled): the three region terms
    are then zero. regions.log_var None (uncertainty disabled) zeroes the KL.
    """
    weights.validate()
    l_ori = contrastive(levels.s_ori, weights.alpha, weights.negative_mode)
    l_key = contrastive(levels.s_key, weights.alpha, weights.negative_mode)
    l_unc = contrastive(levels.s_unc, weights.alpha, weights.negative_mode)
    l_con = combine_levels(l_ori, l_key, l_unc, weights)

    zero = Tensor(0.0)
    if regions is None:
        l_recon, l_kl, l_ent = zero, zero, zero
    else:
        l_recon = reconstruction(regions.u, gated_image.features, gated_image.mask)
        l_kl = (
            kl_divergence(regions.mu, regions.log_var, per_dim=kl_per_dim)
            if regions.log_var is not None
            else zero
        )
        source = regions.attn_raw if entropy_source == "raw" else regions.attn_norm
        l_ent = entropy_reg(source, entropy_source)

    l_reg = add(l_kl, l_ent)
    total = add(add(l_con, mul(l_recon, weights.lambda_recon)), mul(l_reg, weights.lambda_reg))
    report = LossReport(
        l_con_ori=l_ori.item(),
        l_con_key=l_key.item(),
        l_con_unc=l_unc.item(),
        l_con=l_con.item(),
        l_recon=l_recon.item(),
        l_kl=l_kl.item(),
        l_ent=l_ent.item(),
        l_reg=l_reg.item(),
        total=total.item(),
    )
    return report, total
