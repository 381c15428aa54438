"""The full alignment head: adapters, region prompts, similarity levels.

Owns parameter construction/counting and the forward pass that training,
evaluation, gradient verification, and heatmap export all share. Every
source of randomness is an injected numpy Generator, so a caller that
reseeds its bundle per call gets a bitwise-deterministic closure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, GatedTokens, adapt, passthrough
from .autograd import Tensor
from .data import TokenBatch
from .errors import ParameterError, ShapeError
from .region import GaussianRegions, RegionParams, build_regions
from .similarity import SimilarityLevels, batch_similarity

FULL_ARM = "full"
ABLATION_ARMS = (
    FULL_ARM,
    "no_sa",
    "no_ga",
    "no_rp",
    "no_um",
    "no_con_ori",
    "no_con_key",
    "no_con_unc",
    "no_recon",
    "no_reg",
)


@dataclass
class ModelConfig:
    """Architecture switches; ablation arms map onto the use_* flags."""

    d: int
    d_hidden: int | None = None
    K: int = 5
    tau: float = 1.0
    adapter_bias: bool = True
    phi_layers: int = 1
    use_visual_adapter: bool = True
    use_text_adapter: bool = True
    use_region_prompts: bool = True
    use_uncertainty: bool = True
    region_noise: str = "per_pair"

    def __post_init__(self):
        if self.d_hidden is None:
            self.d_hidden = self.d

    def validate(self):
        if self.d < 2:
            raise ParameterError("d must be >= 2")
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.tau <= 0:
            raise ParameterError("tau must be > 0")
        if self.phi_layers not in (1, 2):
            raise ParameterError("phi_layers must be 1 or 2")
        if self.region_noise not in ("per_pair", "per_region"):
            raise ParameterError("region_noise must be per_pair or per_region")
        return self


@dataclass
class ForwardOutputs:
    levels: SimilarityLevels
    regions: GaussianRegions | None
    gated_image: GatedTokens
    gated_text: GatedTokens


@dataclass
class RngBundle:
    """Named substreams so freezing one draw source never shifts another."""

    seed: int
    streams: dict = field(default_factory=dict)

    _PURPOSES = ("init", "gumbel", "gauss", "data")

    def __post_init__(self):
        if not self.streams:
            self.streams = {
                name: np.random.default_rng(np.random.SeedSequence((int(self.seed), i)))
                for i, name in enumerate(self._PURPOSES)
            }

    @property
    def init(self):
        return self.streams["init"]

    @property
    def gumbel(self):
        return self.streams["gumbel"]

    @property
    def gauss(self):
        return self.streams["gauss"]

    @property
    def data(self):
        return self.streams["data"]

    def state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in self.streams.items()}

    def restore(self, state: dict):
        for name, st in state.items():
            self.streams[name].bit_generator.state = st


class AlignmentHead:
    """Adapters + region prompts, with the shared forward pass."""

    def __init__(self, config: ModelConfig, visual: AdapterParams, textual: AdapterParams, region: RegionParams):
        self.config = config
        self.visual = visual
        self.textual = textual
        self.region = region

    @classmethod
    def init(cls, config: ModelConfig, rng) -> "AlignmentHead":
        config.validate()
        visual = AdapterParams.init(config.d, config.d_hidden, rng, tau=config.tau, bias=config.adapter_bias)
        textual = AdapterParams.init(config.d, config.d_hidden, rng, tau=config.tau, bias=config.adapter_bias)
        region = RegionParams.init(config.d, config.K, rng, phi_layers=config.phi_layers)
        return cls(config, visual, textual, region)

    def parameters(self) -> dict:
        out = {}
        out.update(self.visual.tensors("visual"))
        out.update(self.textual.tensors("textual"))
        out.update(self.region.tensors("region"))
        return out

    def parameter_count(self) -> int:
        return sum(int(t.size) for t in self.parameters().values())

    def expected_parameter_count(self) -> int:
        d, dh, K = self.config.d, self.config.d_hidden, self.config.K
        adapter = d * dh + dh * 2
        if self.config.adapter_bias:
            adapter += dh + 2
        region = K * d + d * d + d
        if self.config.phi_layers == 2:
            region += d * d + d
        return 2 * adapter + region

    def forward(
        self,
        images: TokenBatch,
        texts: TokenBatch,
        mode: str,
        rngs: RngBundle | None = None,
        keep_maps: bool = False,
        backend=None,
    ) -> ForwardOutputs:
        """adapt -> attend -> means -> log-var -> sample -> similarity levels."""
        if images.dim != texts.dim:
            raise ShapeError(f"image dim {images.dim} != text dim {texts.dim}")
        if images.dim != self.config.d:
            raise ParameterError(f"model expects d={self.config.d}, batch has d={images.dim}")
        cfg = self.config
        gumbel = rngs.gumbel if rngs is not None else None
        gauss = rngs.gauss if rngs is not None else None

        gated_v = adapt(images, self.visual, mode, gumbel) if cfg.use_visual_adapter else passthrough(images)
        gated_t = adapt(texts, self.textual, mode, gumbel) if cfg.use_text_adapter else passthrough(texts)

        regions = None
        if cfg.use_region_prompts:
            regions = build_regions(
                gated_v,
                self.region,
                mode,
                gauss,
                with_uncertainty=cfg.use_uncertainty,
                noise=cfg.region_noise,
            )

        # The similarity normalizes every token row, and normalize(g * x) ==
        # normalize(x) for any gate g > 0, so gate factors are provably
        # absorbed there; feeding the raw token values computes the same
        # function in its exactly-conditioned form (gradients through the
        # gates at these levels are identically zero either way). The gated
        # features still drive attention, region means, and reconstruction,
        # where their scale genuinely matters.
        full_region_mask = np.ones((images.batch_size, cfg.K), dtype=bool)
        img_tokens = (Tensor(images.embeddings), images.mask)
        txt_tokens = (Tensor(texts.embeddings), texts.mask)
        level_images = {
            "ori": img_tokens,
            "key": img_tokens,
            "unc": (regions.u, full_region_mask) if regions is not None else img_tokens,
        }
        level_texts = {
            "ori": txt_tokens,
            "key": txt_tokens,
            "unc": txt_tokens,
        }
        levels = batch_similarity(level_images, level_texts, keep_maps=keep_maps, backend=backend)
        return ForwardOutputs(levels=levels, regions=regions, gated_image=gated_v, gated_text=gated_t)


def apply_arm(config: ModelConfig, weights, arm: str):
    """Return (ModelConfig, LossWeights) with one ablation arm applied.

    Loss arms zero one term; the three-level weights are renormalized so the
    a+b+c=1 invariant keeps holding.
    """
    from dataclasses import replace

    if arm not in ABLATION_ARMS:
        raise ParameterError(f"unknown ablation arm {arm!r}; choose from {ABLATION_ARMS}")
    if arm == FULL_ARM:
        return config, weights
    if arm == "no_sa":
        return replace(config, use_visual_adapter=False), weights
    if arm == "no_ga":
        return replace(config, use_text_adapter=False), weights
    if arm == "no_rp":
        return replace(config, use_region_prompts=False), weights
    if arm == "no_um":
        return replace(config, use_uncertainty=False), weights
    if arm in ("no_con_ori", "no_con_key", "no_con_unc"):
        trio = {"a": weights.a, "b": weights.b, "c": weights.c}
        trio[{"no_con_ori": "a", "no_con_key": "b", "no_con_unc": "c"}[arm]] = 0.0
        norm = trio["a"] + trio["b"] + trio["c"]
        if norm <= 0:
            raise ParameterError(f"arm {arm} would zero every contrastive level")
        return config, replace(weights, a=trio["a"] / norm, b=trio["b"] / norm, c=trio["c"] / norm)
    if arm == "no_recon":
        return config, replace(weights, lambda_recon=0.0)
    return config, replace(weights, lambda_reg=0.0)
