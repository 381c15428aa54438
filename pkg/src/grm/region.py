"""Region prompting and Gaussian uncertainty over gated image patches.

K learnable prompts attend over the patches of each image (sigmoid scores,
column-normalized over patches), giving region means mu_k as attention-
weighted patch averages. A variance head predicts log sigma^2 per region;
reparameterized samples z_lk = mu_k + eps_lk * sigma_k are re-aggregated by
the same attention into uncertainty-aware region features u_k. With eps = 0
(deterministic mode) u collapses to mu exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import GatedTokens
from .autograd import (
    Tensor,
    activation,
    add,
    bmm,
    clamp,
    div,
    l2_normalize_rows,
    matmul,
    mul,
    reduce_sum,
    reshape,
    transpose_last2,
)
from .errors import DegenerateSliceError, ParameterError, ShapeError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class RegionParams:
    """K prompt vectors plus the log-variance head (1 or 2 affine layers)."""

    prompts: Tensor  # (K, d)
    phi_W: Tensor  # (d, d)
    phi_b: Tensor  # (d,)
    K: int
    phi_hidden_W: Tensor | None = None  # (d, d) when the 2-layer head is enabled
    phi_hidden_b: Tensor | None = None

    @classmethod
    def init(cls, d: int, K: int, rng, phi_layers: int = 1):
        if K < 1:
            raise ParameterError("K must be >= 1")
        if phi_layers not in (1, 2):
            raise ParameterError("phi_layers must be 1 or 2")
        prompts = Tensor(rng.standard_normal((K, d)) / np.sqrt(d), requires_grad=True)
        phi_w = Tensor(0.01 * rng.standard_normal((d, d)) / np.sqrt(d), requires_grad=True)
        phi_b = Tensor(np.zeros(d), requires_grad=True)
        hidden_w = hidden_b = None
        if phi_layers == 2:
            hidden_w = Tensor(rng.standard_normal((d, d)) / np.sqrt(d), requires_grad=True)
            hidden_b = Tensor(np.zeros(d), requires_grad=True)
        return cls(prompts, phi_w, phi_b, K, hidden_w, hidden_b)

    def tensors(self, prefix: str = "region") -> dict:
        out = {
            f"{prefix}.prompts": self.prompts,
            f"{prefix}.phi_W": self.phi_W,
            f"{prefix}.phi_b": self.phi_b,
        }
        if self.phi_hidden_W is not None:
            out[f"{prefix}.phi_hidden_W"] = self.phi_hidden_W
            out[f"{prefix}.phi_hidden_b"] = self.phi_hidden_b
        return out


@dataclass
class GaussianRegions:
    """Per-image region distributions and their attention maps."""

    mu: Tensor  # (B, K, d)
    log_var: Tensor | None  # (B, K, d); None when uncertainty is disabled
    attn_raw: Tensor  # (B, L_v, K), sigmoid scores, 0 at masked patches
    attn_norm: Tensor  # (B, L_v, K), columns sum to 1 over patches
    u: Tensor  # (B, K, d)


def attend(gated: GatedTokens, params: RegionParams):
    """Patch-to-prompt attention: raw sigmoid scores and patch-normalized columns."""
    B, L, d = gated.features.shape
    if d != params.prompts.shape[1]:
        raise ShapeError(f"feature dim {d} does not match prompt dim {params.prompts.shape[1]}")
    if not gated.mask.any(axis=1).all():
        raise DegenerateSliceError("an image has no valid patches to attend over")

    p_hat = l2_normalize_rows(params.prompts)
    scores = matmul(reshape(gated.features, (B * L, d)), transpose_last2(p_hat))
    raw = mul(
        reshape(activation("sigmoid", scores), (B, L, params.K)),
        gated.mask.astype(np.float64)[:, :, None],
    )
    totals = reduce_sum(raw, axis=1)
    if np.any(totals.data <= 0.0):
        raise DegenerateSliceError("a prompt column has zero total attention")
    norm = div(raw, reshape(totals, (B, 1, params.K)))
    return raw, norm


def region_means(attn_norm: Tensor, gated: GatedTokens) -> Tensor:
    """mu_k = attention-weighted average of gated patch features."""
    return bmm(transpose_last2(attn_norm), gated.features)


def predict_log_var(mu: Tensor, params: RegionParams) -> Tensor:
    """Affine variance head, clamped to [-10, 10] so exp(log_var/2) stays tame."""
    B, K, d = mu.shape
    h = reshape(mu, (B * K, d))
    if params.phi_hidden_W is not None:
        h = activation("gelu", add(matmul(h, params.phi_hidden_W), params.phi_hidden_b))
    out = add(matmul(h, params.phi_W), params.phi_b)
    return reshape(clamp(out, LOG_VAR_MIN, LOG_VAR_MAX), (B, K, d))


def sample_regions(mu: Tensor, log_var: Tensor | None, attn_norm: Tensor, mode: str, rng=None, noise: str = "per_pair") -> Tensor:
    """Reparameterized region features u_k = sum_l attn[l,k] * z_lk.

    Deterministic mode returns mu itself (eps = 0 collapses the aggregation:
    the attention columns sum to 1, so the shortcut is exact in value and in
    gradient). per_pair draws independent noise for every (patch, region);
    per_region shares one draw per region.
    """
    if mode == "deterministic" or log_var is None:
        return mu
    if mode != "stochastic":
        raise ParameterError(f"unknown sampling mode: {mode!r}")
    if rng is None:
        raise ParameterError("stochastic sampling requires an rng")
    B, K, d = mu.shape
    sigma = activation("exp", mul(log_var, 0.5))
    if noise == "per_region":
        eps = rng.standard_normal((B, K, d))
        return add(mu, mul(sigma, eps))
    if noise != "per_pair":
        raise ParameterError(f"unknown noise mode: {noise!r}")
    L = attn_norm.shape[1]
    eps = rng.standard_normal((B, L, K, d))
    z = add(reshape(mu, (B, 1, K, d)), mul(reshape(sigma, (B, 1, K, d)), eps))
    weighted = mul(reshape(attn_norm, (B, L, K, 1)), z)
    return reduce_sum(weighted, axis=1)


def build_regions(
    gated: GatedTokens,
    params: RegionParams,
    mode: str,
    rng=None,
    with_uncertainty: bool = True,
    noise: str = "per_pair",
) -> GaussianRegions:
    """Run the full region pipeline on one gated image batch."""
    raw, norm = attend(gated, params)
    mu = region_means(norm, gated)
    log_var = predict_log_var(mu, params) if with_uncertainty else None
    u = sample_regions(mu, log_var, norm, mode, rng, noise=noise)
    return GaussianRegions(mu=mu, log_var=log_var, attn_raw=raw, attn_norm=norm, u=u)
