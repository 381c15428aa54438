"""Token-embedding inputs: synthetic corpora and the GRT1 binary format.

The synthetic generator plants per-pair "concepts": unit vectors that appear
many times among an instance's image tokens and once each among its text
tokens, so one text token corresponds to several patches and retrieval is
solvable by construction. Matched image/text pairs share concepts;
mismatched pairs draw fresh ones.

GRT1 layout (little-endian throughout):
    4 bytes  magic "GRT1"
    1 byte   modality (0 = image, 1 = text)
    3 x u32  B, L, d
    B*L u8   mask bytes (0/1)
    B*L*d f64 embeddings, row-major [instance][token][dim]
    B x (u32 length + UTF-8 bytes) instance ids
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InconsistencyError, MagicError, ParameterError, TruncationError

MAGIC = b"GRT1"
_MODALITY_CODE = {"image": 0, "text": 1}
_MODALITY_NAME = {v: k for k, v in _MODALITY_CODE.items()}


@dataclass
class TokenBatch:
    """A batch of per-instance token embeddings with validity masks."""

    modality: str
    embeddings: np.ndarray  # (B, L, d) float64
    mask: np.ndarray  # (B, L) bool, True = valid token
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in _MODALITY_CODE:
            raise ParameterError(f"modality must be image or text, got {self.modality!r}")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.embeddings.ndim != 3:
            raise ParameterError(f"embeddings must be (B, L, d), got shape {self.embeddings.shape}")
        if self.mask.shape != self.embeddings.shape[:2]:
            raise ParameterError(
                f"mask shape {self.mask.shape} does not match embeddings {self.embeddings.shape}"
            )
        if len(self.ids) != self.embeddings.shape[0]:
            raise ParameterError("need exactly one id per instance")
        if not self.mask.any(axis=1).all():
            raise ParameterError("every instance needs at least one valid token")

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class SyntheticSpec:
    """Dimensions and noise level for a generated corpus."""

    B: int
    L_v: int
    L_t: int
    d: int
    n_concepts: int = 4
    noise_scale: float = 0.1
    seed: int = 0

    def validate(self):
        if min(self.B, self.L_v, self.L_t, self.d, self.n_concepts) < 1:
            raise ParameterError("B, L_v, L_t, d, n_concepts must all be >= 1")
        if self.d < 2:
            raise ParameterError("d must be >= 2")
        if self.n_concepts > min(self.L_v, self.L_t):
            raise ParameterError(
                f"n_concepts={self.n_concepts} exceeds min(L_v, L_t)={min(self.L_v, self.L_t)}"
            )
        if self.noise_scale < 0:
            raise ParameterError("noise_scale must be >= 0")


def generate_synthetic(spec: SyntheticSpec):
    """Build a paired (image, text) batch with planted correspondences.

    Image tokens cycle through the instance's concepts (each repeated
    floor(L_v / n_concepts) times, remainder slots wrap around); text tokens
    carry each concept once, with extra valid slots filled by re-drawn
    concepts of the same instance. All tokens get N(0, noise_scale^2) noise.
    Text length per instance is uniform over [n_concepts, L_t]; image masks
    are all-true. Deterministic under spec.seed.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xD474)))
    B, L_v, L_t, d, m = spec.B, spec.L_v, spec.L_t, spec.d, spec.n_concepts

    img = np.zeros((B, L_v, d))
    txt = np.zeros((B, L_t, d))
    img_mask = np.ones((B, L_v), dtype=bool)
    txt_mask = np.zeros((B, L_t), dtype=bool)

    for i in range(B):
        concepts = rng.standard_normal((m, d))
        concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)

        reps = L_v // m
        order = [k for k in range(m) for _ in range(reps)]
        order += [k % m for k in range(L_v - len(order))]
        img[i] = concepts[order] + spec.noise_scale * rng.standard_normal((L_v, d))

        n_t = int(rng.integers(m, L_t + 1))
        txt_mask[i, :n_t] = True
        filler = rng.integers(0, m, size=max(n_t - m, 0))
        token_concepts = np.concatenate([np.arange(m), filler])
        txt[i, :n_t] = concepts[token_concepts] + spec.noise_scale * rng.standard_normal((n_t, d))

    ids = [f"inst-{i:05d}" for i in range(B)]
    images = TokenBatch("image", img, img_mask, ids)
    texts = TokenBatch("text", txt, txt_mask, list(ids))
    return images, texts


def write_batch(batch: TokenBatch, path):
    """Serialize a TokenBatch to the GRT1 format."""
    B, L, d = batch.embeddings.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", _MODALITY_CODE[batch.modality]))
        f.write(struct.pack("<III", B, L, d))
        f.write(batch.mask.astype(np.uint8).tobytes())
        f.write(batch.embeddings.astype("<f8").tobytes())
        for ident in batch.ids:
            raw = str(ident).encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def _take(buf: bytes, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise TruncationError(f"file ends inside {what} (need {n} bytes at offset {offset})")
    return buf[offset : offset + n], offset + n


def read_batch(path) -> TokenBatch:
    """Parse a GRT1 file; raises MagicError / TruncationError / InconsistencyError."""
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise MagicError(f"expected magic {MAGIC!r}, found {head!r}")
    raw, off = _take(buf, off, 1, "modality byte")
    code = raw[0]
    if code not in _MODALITY_NAME:
        raise InconsistencyError(f"unknown modality code {code}")
    raw, off = _take(buf, off, 12, "header dims")
    B, L, d = struct.unpack("<III", raw)
    if min(B, L, d) < 1:
        raise InconsistencyError(f"non-positive dims B={B} L={L} d={d}")

    raw, off = _take(buf, off, B * L, "mask")
    mask_bytes = np.frombuffer(raw, dtype=np.uint8)
    if np.any(mask_bytes > 1):
        raise InconsistencyError("mask bytes must be 0 or 1")
    mask = mask_bytes.reshape(B, L).astype(bool)
    if not mask.any(axis=1).all():
        raise InconsistencyError("an instance has no valid tokens")

    raw, off = _take(buf, off, B * L * d * 8, "embedding payload")
    emb = np.frombuffer(raw, dtype="<f8").reshape(B, L, d).astype(np.float64)

    ids = []
    for i in range(B):
        raw, off = _take(buf, off, 4, f"id length {i}")
        (n,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, n, f"id string {i}")
        ids.append(raw.decode("utf-8"))
    if off != len(buf):
        raise InconsistencyError(f"{len(buf) - off} trailing bytes after payload")
    return TokenBatch(_MODALITY_NAME[code], emb, mask, ids)
