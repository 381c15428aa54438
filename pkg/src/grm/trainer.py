"""End-to-end optimization, checkpointing, and the gradient-check entry point.

Training is deterministic given (seed, config, data): parameter init, batch
shuffling, Gumbel noise, and Gaussian noise each consume their own seeded
substream, so logs and checkpoints are byte-reproducible. Checkpoints carry
optimizer moments and RNG states so a resumed run continues exactly where
the uninterrupted run would be.

Checkpoint layout (little-endian):
    4 bytes  magic "GRMC"
    u32      format version (1)
    u32      tensor count, then per tensor:
             u32 name length, name, u32 ndim, u32 dims..., f64 payload
    u32 + JSON   config snapshot (sorted keys; includes step counter)
    u32 + JSON   rng substream states
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autograd import Tape, Tensor, backward, grad_check
from .data import TokenBatch, generate_synthetic, SyntheticSpec
from .errors import (
    MagicError,
    NonFiniteLossError,
    ParameterError,
    TruncationError,
    VersionError,
)
from .losses import LossWeights, total_loss
from .model import AlignmentHead, ForwardOutputs, ModelConfig, RngBundle

CKPT_MAGIC = b"GRMC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters plus model/ablation switches."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 2e-2
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    K: int = 5
    tau: float = 1.0
    eval_every: int = 0  # 0 disables periodic retrieval logging
    d_hidden: int | None = None
    clip_norm: float | None = None
    entropy_source: str = "raw"
    kl_per_dim: bool = True
    adapter_bias: bool = True
    phi_layers: int = 1
    region_noise: str = "per_pair"
    use_visual_adapter: bool = True
    use_text_adapter: bool = True
    use_region_prompts: bool = True
    use_uncertainty: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        # learning_rate 0 is allowed: it contracts to a bitwise no-op update
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ParameterError("optimizer must be sgd or adamw")
        if self.eval_every < 0:
            raise ParameterError("eval_every must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ParameterError("clip_norm must be > 0 when set")
        self.weights.validate()
        return self

    def model_config(self, d: int) -> ModelConfig:
        return ModelConfig(
            d=d,
            d_hidden=self.d_hidden,
            K=self.K,
            tau=self.tau,
            adapter_bias=self.adapter_bias,
            phi_layers=self.phi_layers,
            use_visual_adapter=self.use_visual_adapter,
            use_text_adapter=self.use_text_adapter,
            use_region_prompts=self.use_region_prompts,
            use_uncertainty=self.use_uncertainty,
            region_noise=self.region_noise,
        ).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        blob = dict(blob)
        blob["weights"] = LossWeights(**blob["weights"])
        return cls(**blob)


@dataclass
class Checkpoint:
    """Everything needed to reproduce or continue a run."""

    version: int
    tensors: dict  # name -> float64 ndarray (params + optimizer moments)
    config: dict  # TrainConfig snapshot, embedding dim, step counter
    step: int
    rng_state: dict


class Sgd:
    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self):
        for p in self.params.values():
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state_tensors(self) -> dict:
        return {}

    def load_state(self, tensors: dict):
        pass


class AdamW:
    """Decoupled weight decay: p *= (1 - lr*wd) exactly, then the Adam step."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict):
        for name in self.params:
            if f"opt.m.{name}" in tensors:
                self.m[name] = tensors[f"opt.m.{name}"].copy()
                self.v[name] = tensors[f"opt.v.{name}"].copy()


def _make_optimizer(config: TrainConfig, params: dict):
    if config.optimizer == "adamw":
        return AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return Sgd(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _forward_loss(head: AlignmentHead, images, texts, config: TrainConfig, mode, rngs):
    out = head.forward(images, texts, mode, rngs)
    report, total = total_loss(
        out.levels,
        out.regions,
        out.gated_image,
        config.weights,
        entropy_source=config.entropy_source,
        kl_per_dim=config.kl_per_dim,
    )
    return out, report, total


def _slice_batch(batch: TokenBatch, idx) -> TokenBatch:
    return TokenBatch(
        batch.modality,
        batch.embeddings[idx],
        batch.mask[idx],
        [batch.ids[i] for i in idx],
    )


def snapshot(head: AlignmentHead, optimizer, config: TrainConfig, d: int, step: int, rngs: RngBundle) -> Checkpoint:
    tensors = {name: p.data.copy() for name, p in head.parameters().items()}
    tensors.update({name: arr.copy() for name, arr in optimizer.state_tensors().items()})
    blob = {"train": config.to_dict(), "d": d, "step": step}
    return Checkpoint(CKPT_VERSION, tensors, blob, step, rngs.state())


def head_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the model (and its TrainConfig) from a checkpoint."""
    config = TrainConfig.from_dict(ckpt.config["train"])
    d = int(ckpt.config["d"])
    head = AlignmentHead.init(config.model_config(d), RngBundle(config.seed).init)
    for name, p in head.parameters().items():
        if name not in ckpt.tensors:
            raise ParameterError(f"checkpoint missing tensor {name!r}")
        if p.data.shape != ckpt.tensors[name].shape:
            raise ParameterError(
                f"checkpoint tensor {name!r} has shape {ckpt.tensors[name].shape}, expected {p.data.shape}"
            )
        p.data = ckpt.tensors[name].copy()
    return head, config


def train(images: TokenBatch, texts: TokenBatch, config: TrainConfig,
          log_path=None, resume: Checkpoint | None = None):
    """Optimize all parameters; returns (Checkpoint, list of log lines).

    Emits one loss JSON line per step and, every eval_every steps, a
    retrieval line over the training set. A non-finite loss aborts with
    NonFiniteLossError carrying the last good checkpoint.
    """
    config.validate()
    if images.ids != texts.ids:
        raise ParameterError("image and text batches must be paired (ids align index-wise)")
    if images.batch_size < config.batch_size:
        raise ParameterError(
            f"batch_size {config.batch_size} exceeds corpus size {images.batch_size}"
        )
    d = images.dim
    rngs = RngBundle(config.seed)
    head = AlignmentHead.init(config.model_config(d), rngs.init)

    expected = head.expected_parameter_count()
    actual = head.parameter_count()
    if actual != expected:
        raise ParameterError(f"parameter count {actual} != expected {expected}")

    params = head.parameters()
    optimizer = _make_optimizer(config, params)
    startup = {"step": 0, "event": "startup", "parameter_count": actual, "d": d}

    start_step = 0
    if resume is not None:
        loaded_head, _ = head_from_checkpoint(resume)
        for name, p in params.items():
            p.data = resume.tensors[name].copy()
        optimizer.load_state(resume.tensors)
        if isinstance(optimizer, AdamW):
            optimizer.t = resume.step
        rngs.restore(resume.rng_state)
        start_step = resume.step
        del loaded_head

    n = images.batch_size
    per_epoch = n // config.batch_size
    log_lines = [json.dumps(startup)]
    step = start_step
    last_good = snapshot(head, optimizer, config, d, step, rngs)

    from .evaluate import retrieval_line  # local import: evaluate depends on this module

    for _epoch in range(start_step // max(per_epoch, 1), config.epochs):
        order = rngs.data.permutation(n)
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            img_b = _slice_batch(images, idx)
            txt_b = _slice_batch(texts, idx)

            for p in params.values():
                p.zero_grad()
            with Tape() as tape:
                _, report, total = _forward_loss(head, img_b, txt_b, config, "stochastic", rngs)
            bad = report.first_non_finite()
            if bad is not None:
                err = NonFiniteLossError(bad)
                err.last_good = last_good
                raise err
            backward(total, tape)
            if config.clip_norm is not None:
                _clip_by_global_norm(params, config.clip_norm)
            optimizer.step()
            step += 1
            log_lines.append(report.json_line(step))
            if config.eval_every and step % config.eval_every == 0:
                log_lines.append(retrieval_line(head, images, texts, config, step))
            last_good = snapshot(head, optimizer, config, d, step, rngs)

    ckpt = snapshot(head, optimizer, config, d, step, rngs)
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    return ckpt, log_lines


def _clip_by_global_norm(params: dict, max_norm: float):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    total = np.sqrt(total)
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class ProbeSizes:
    B: int = 4
    L_v: int = 6
    L_t: int = 4
    d: int = 8
    K: int = 3

    def validate(self):
        if self.B > 8 or self.L_v > 12 or self.L_t > 12 or self.d > 16 or self.K > 8:
            raise ParameterError("probe sizes must stay small for finite differences")
        return self


def verify_gradients(config: TrainConfig, probe: ProbeSizes | None = None, h: float = 1e-5,
                     tolerance: float = 1e-4):
    """Finite-difference check of the full objective on a tiny frozen instance.

    All stochastic draws are frozen by rebuilding the rng bundle per call, so
    the loss closure is bitwise deterministic. Returns (ok, report) where
    report maps parameter names to their max relative error.
    """
    probe = (probe or ProbeSizes()).validate()
    spec = SyntheticSpec(
        B=probe.B, L_v=probe.L_v, L_t=probe.L_t, d=probe.d,
        n_concepts=min(2, probe.L_t), noise_scale=0.3, seed=config.seed,
    )
    images, texts = generate_synthetic(spec)
    cfg = replace(config, K=probe.K, batch_size=probe.B)
    head = AlignmentHead.init(cfg.model_config(probe.d), RngBundle(cfg.seed).init)

    def loss_fn():
        rngs = RngBundle(cfg.seed)  # identical streams every call = frozen noise
        _, _, total = _forward_loss(head, images, texts, cfg, "stochastic", rngs)
        return total

    report = grad_check(loss_fn, head.parameters(), h=h)
    ok = all(err < tolerance for err in report.values())
    return ok, report


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for blob in (ckpt.config, ckpt.rng_state):
            payload = json.dumps(blob, sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def _need(buf: bytes, off: int, n: int, what: str):
    if off + n > len(buf):
        raise TruncationError(f"checkpoint ends inside {what}")
    return buf[off : off + n], off + n


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _need(buf, 0, 4, "magic")
    if head != CKPT_MAGIC:
        raise MagicError(f"expected magic {CKPT_MAGIC!r}, found {head!r}")
    raw, off = _need(buf, off, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    raw, off = _need(buf, off, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    tensors = {}
    for _ in range(count):
        raw, off = _need(buf, off, 4, "tensor name length")
        (nlen,) = struct.unpack("<I", raw)
        raw, off = _need(buf, off, nlen, "tensor name")
        name = raw.decode("utf-8")
        raw, off = _need(buf, off, 4, "tensor rank")
        (ndim,) = struct.unpack("<I", raw)
        raw, off = _need(buf, off, 4 * ndim, "tensor dims")
        shape = struct.unpack(f"<{ndim}I", raw)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
        raw, off = _need(buf, off, nbytes, f"tensor payload {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    blobs = []
    for what in ("config blob", "rng blob"):
        raw, off = _need(buf, off, 4, f"{what} length")
        (n,) = struct.unpack("<I", raw)
        raw, off = _need(buf, off, n, what)
        blobs.append(json.loads(raw.decode("utf-8")))
    config, rng_state = blobs
    return Checkpoint(version, tensors, config, int(config["step"]), rng_state)
