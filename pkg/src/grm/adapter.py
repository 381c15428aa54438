"""Per-token significance gating for one modality.

A two-layer scorer turns each token embedding into keep/drop logits; the
Gumbel-Softmax keep probability (column 1) rescales the token. The visual
and textual adapters share this implementation and differ only in their
independently initialized parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, activation, add, column, gumbel_softmax, matmul, mul, reshape
from .data import TokenBatch
from .errors import ParameterError, ShapeError


@dataclass
class AdapterParams:
    """Weights of the two-layer token scorer; tau is the gating temperature."""

    W1: Tensor
    b1: Tensor | None
    W2: Tensor
    b2: Tensor | None
    tau: float

    @classmethod
    def init(cls, d: int, d_hidden: int, rng, tau: float = 1.0, bias: bool = True):
        if d < 1 or d_hidden < 1:
            raise ParameterError("adapter dims must be >= 1")
        if tau <= 0:
            raise ParameterError("tau must be > 0")
        w1 = rng.standard_normal((d, d_hidden)) / np.sqrt(d)
        w2 = rng.standard_normal((d_hidden, 2)) / np.sqrt(d_hidden)
        b1 = Tensor(np.zeros(d_hidden), requires_grad=True) if bias else None
        b2 = Tensor(np.zeros(2), requires_grad=True) if bias else None
        return cls(Tensor(w1, requires_grad=True), b1, Tensor(w2, requires_grad=True), b2, tau)

    def tensors(self, prefix: str) -> dict:
        out = {f"{prefix}.W1": self.W1, f"{prefix}.W2": self.W2}
        if self.b1 is not None:
            out[f"{prefix}.b1"] = self.b1
            out[f"{prefix}.b2"] = self.b2
        return out


@dataclass
class GatedTokens:
    """Gate-rescaled token features; masked positions carry gate exactly 0."""

    features: Tensor  # (B, L, d)
    gate: Tensor  # (B, L)
    mask: np.ndarray  # (B, L) bool


def adapt(tokens: TokenBatch, params: AdapterParams, mode: str, rng=None) -> GatedTokens:
    """Score, gate, and rescale every token of a batch.

    Per token x: logits = W2 @ gelu(W1 @ x + b1) + b2; the keep probability is
    gumbel_softmax(logits, tau)[:, 1]; output features are x scaled by it.
    Masked tokens get gate 0 and contribute no gradient.
    """
    B, L, d = tokens.embeddings.shape
    if d != params.W1.shape[0]:
        raise ShapeError(f"token dim {d} does not match adapter input dim {params.W1.shape[0]}")

    x = Tensor(tokens.embeddings)
    flat = reshape(x, (B * L, d))
    h = matmul(flat, params.W1)
    if params.b1 is not None:
        h = add(h, params.b1)
    h = activation("gelu", h)
    logits = matmul(h, params.W2)
    if params.b2 is not None:
        logits = add(logits, params.b2)

    keep = column(gumbel_softmax(logits, params.tau, mode, rng), 1)
    gate = mul(reshape(keep, (B, L)), tokens.mask.astype(np.float64))
    features = mul(x, reshape(gate, (B, L, 1)))
    return GatedTokens(features=features, gate=gate, mask=tokens.mask)


def passthrough(tokens: TokenBatch) -> GatedTokens:
    """Identity gating (gate 1 at valid tokens); used by the no-adapter ablation."""
    gate = tokens.mask.astype(np.float64)
    features = Tensor(tokens.embeddings * gate[:, :, None])
    return GatedTokens(features=features, gate=Tensor(gate), mask=tokens.mask)
