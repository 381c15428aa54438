import numpy as np
import pytest

from grm.autograd import Tensor
from grm.adapter import GatedTokens
from grm.data import TokenBatch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, modality, B, L, d, full_mask=False):
    """TokenBatch with random tokens and (optionally) random masks."""
    emb = rng.standard_normal((B, L, d))
    if full_mask:
        mask = np.ones((B, L), dtype=bool)
    else:
        mask = rng.random((B, L)) < 0.7
        mask[np.arange(B), rng.integers(0, L, B)] = True  # at least one valid
    emb = emb * mask[:, :, None]
    return TokenBatch(modality, emb, mask, [f"inst-{i:05d}" for i in range(B)])


def random_gated(rng, B, L, d, requires_grad=False, full_mask=True):
    """A GatedTokens fixture detached from any adapter."""
    mask = np.ones((B, L), dtype=bool) if full_mask else (rng.random((B, L)) < 0.7)
    if not full_mask:
        mask[np.arange(B), rng.integers(0, L, B)] = True
    feats = rng.standard_normal((B, L, d)) * mask[:, :, None]
    gate = rng.random((B, L)) * mask
    return GatedTokens(
        features=Tensor(feats, requires_grad=requires_grad),
        gate=Tensor(gate),
        mask=mask,
    )
