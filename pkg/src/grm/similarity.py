"""Instance-level similarity: cosine token grids under max-mean aggregation.

Token rows are L2-normalized, then each (image, text) pair is scored by the
mean-over-text-tokens of the best image match plus the symmetric image-side
term. Three levels share the machinery: raw encoder tokens, gated tokens,
and region features against gated text.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, l2_normalize_rows, maxmean_similarity, reshape
from .errors import DegenerateSliceError, ParameterError

LEVELS = ("ori", "key", "unc")


@dataclass
class SimilarityLevels:
    """B x B similarity matrices per level; [i][j] scores image i vs text j."""

    s_ori: Tensor
    s_key: Tensor
    s_unc: Tensor
    normalized_tokens: dict = field(default_factory=dict, repr=False)

    def by_level(self, level: str) -> Tensor:
        if level not in LEVELS:
            raise ParameterError(f"unknown similarity level: {level!r}")
        return {"ori": self.s_ori, "key": self.s_key, "unc": self.s_unc}[level]

    def token_map(self, level: str, image_index: int, text_index: int) -> np.ndarray:
        """Cosine matrix (L_t x L_img_tokens) for one retained pair."""
        if level not in self.normalized_tokens:
            raise ParameterError(f"token maps were not retained for level {level!r}")
        tn, _, vn, _ = self.normalized_tokens[level]
        return tn[text_index] @ vn[image_index].T


def pair_similarity(img_tokens, img_mask, txt_tokens, txt_mask, backend=None) -> Tensor:
    """Bidirectional max-mean similarity of a single (image, text) pair.

    img_tokens: (L_i, d), txt_tokens: (L_t, d); boolean masks mark valid
    tokens and each side needs at least one. Returns a scalar Tensor.
    """
    img = img_tokens if isinstance(img_tokens, Tensor) else Tensor(img_tokens)
    txt = txt_tokens if isinstance(txt_tokens, Tensor) else Tensor(txt_tokens)
    if img.data.ndim != 2 or txt.data.ndim != 2:
        raise ParameterError("pair_similarity expects single instances of shape (L, d)")
    img_mask = np.asarray(img_mask, dtype=bool).reshape(1, -1)
    txt_mask = np.asarray(txt_mask, dtype=bool).reshape(1, -1)
    if not img_mask.any() or not txt_mask.any():
        raise DegenerateSliceError("pair_similarity needs a valid token on each side")
    grid = _grid(
        reshape(img, (1,) + img.shape), img_mask, reshape(txt, (1,) + txt.shape), txt_mask, backend
    )
    return reshape(grid, ())


def _grid(img, img_mask, txt, txt_mask, backend=None) -> Tensor:
    vn = l2_normalize_rows(img)
    tn = l2_normalize_rows(txt)
    return maxmean_similarity(vn, img_mask, tn, txt_mask, backend=backend)


def batch_similarity(images: dict, texts: dict, keep_maps: bool = False, backend=None) -> SimilarityLevels:
    """Score all B x B pairs at every level.

    images / texts map level name ("ori", "key", "unc") to (tokens Tensor,
    boolean mask). Levels fed the very same tensors (e.g. "unc" aliased to
    "key" when region prompting is off) share one grid bitwise. Pass
    keep_maps to retain normalized tokens for heatmap export.
    """
    grids = {}
    retained = {}
    seen = {}
    for level in LEVELS:
        if level not in images or level not in texts:
            raise ParameterError(f"missing inputs for similarity level {level!r}")
        img, img_mask = images[level]
        txt, txt_mask = texts[level]
        alias = seen.get((id(img), id(txt)))
        if alias is not None:
            grids[level] = grids[alias]
            if keep_maps:
                retained[level] = retained[alias]
            continue
        seen[(id(img), id(txt))] = level
        vn = l2_normalize_rows(img)
        tn = l2_normalize_rows(txt)
        grids[level] = maxmean_similarity(vn, img_mask, tn, txt_mask, backend=backend)
        if keep_maps:
            retained[level] = (tn.data, txt_mask, vn.data, img_mask)
    return SimilarityLevels(
        s_ori=grids["ori"], s_key=grids["key"], s_unc=grids["unc"], normalized_tokens=retained
    )
