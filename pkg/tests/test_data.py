"""Synthetic-corpus contracts and GRT1 round-trip/parse-error behavior."""

import numpy as np
import pytest

from grm.data import SyntheticSpec, TokenBatch, generate_synthetic, read_batch, write_batch
from grm.errors import InconsistencyError, MagicError, ParameterError, TruncationError


class TestTokenBatch:
    def test_rejects_empty_instances(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ParameterError):
            TokenBatch("image", np.zeros((2, 2, 3)), mask, ["a", "b"])

    def test_rejects_bad_modality_and_ids(self):
        with pytest.raises(ParameterError):
            TokenBatch("audio", np.zeros((1, 1, 2)), np.ones((1, 1), bool), ["a"])
        with pytest.raises(ParameterError):
            TokenBatch("image", np.zeros((2, 1, 2)), np.ones((2, 1), bool), ["a"])


class TestSyntheticSpec:
    def test_invariants(self):
        with pytest.raises(ParameterError):
            SyntheticSpec(B=2, L_v=4, L_t=2, d=8, n_concepts=3).validate()
        with pytest.raises(ParameterError):
            SyntheticSpec(B=2, L_v=4, L_t=4, d=1).validate()
        with pytest.raises(ParameterError):
            SyntheticSpec(B=2, L_v=4, L_t=4, d=8, noise_scale=-0.1).validate()


class TestGenerateSynthetic:
    def test_zero_noise_plants_exact_correspondences(self):
        spec = SyntheticSpec(B=8, L_v=9, L_t=6, d=12, n_concepts=3, noise_scale=0.0, seed=5)
        images, texts = generate_synthetic(spec)
        for i in range(8):
            img_tokens = images.embeddings[i]
            for t in range(6):
                if not texts.mask[i, t]:
                    continue
                token = texts.embeddings[i, t]
                assert any(np.array_equal(token, img_tokens[v]) for v in range(9))

    def test_deterministic_under_seed(self):
        spec = SyntheticSpec(B=4, L_v=6, L_t=4, d=8, n_concepts=2, seed=11)
        a_img, a_txt = generate_synthetic(spec)
        b_img, b_txt = generate_synthetic(spec)
        assert np.array_equal(a_img.embeddings, b_img.embeddings)
        assert np.array_equal(a_txt.embeddings, b_txt.embeddings)
        assert np.array_equal(a_txt.mask, b_txt.mask)

    def test_distinct_seeds_differ(self):
        spec_a = SyntheticSpec(B=4, L_v=6, L_t=4, d=8, n_concepts=2, seed=1)
        spec_b = SyntheticSpec(B=4, L_v=6, L_t=4, d=8, n_concepts=2, seed=2)
        a, _ = generate_synthetic(spec_a)
        b, _ = generate_synthetic(spec_b)
        assert not np.array_equal(a.embeddings, b.embeddings)

    def test_concepts_unit_norm_and_finite(self):
        spec = SyntheticSpec(B=6, L_v=8, L_t=6, d=10, n_concepts=4, noise_scale=0.0, seed=3)
        images, texts = generate_synthetic(spec)
        assert np.all(np.isfinite(images.embeddings)) and np.all(np.isfinite(texts.embeddings))
        # with zero noise every image token is exactly a concept vector
        norms = np.linalg.norm(images.embeddings, axis=2)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_image_masks_full_text_lengths_in_range(self):
        spec = SyntheticSpec(B=16, L_v=8, L_t=6, d=8, n_concepts=3, seed=9)
        images, texts = generate_synthetic(spec)
        assert images.mask.all()
        lengths = texts.mask.sum(axis=1)
        assert lengths.min() >= 3 and lengths.max() <= 6
        # valid tokens are a prefix (padding sits at the tail, like tokenizers do)
        for i in range(16):
            n = lengths[i]
            assert texts.mask[i, :n].all() and not texts.mask[i, n:].any()

    def test_planted_signal_recoverable_by_cosine_oracle(self):
        # brute-force retrieval on raw tokens: mean over text tokens of the
        # best-matching image token; no learned components involved
        spec = SyntheticSpec(B=32, L_v=16, L_t=8, d=32, n_concepts=4, noise_scale=0.1, seed=7)
        images, texts = generate_synthetic(spec)
        B = 32
        sim = np.zeros((B, B))
        for i in range(B):
            v = images.embeddings[i] / np.linalg.norm(images.embeddings[i], axis=1, keepdims=True)
            for j in range(B):
                scores = []
                for t in range(8):
                    if not texts.mask[j, t]:
                        continue
                    tok = texts.embeddings[j, t]
                    tok = tok / np.linalg.norm(tok)
                    scores.append(np.max(v @ tok))
                sim[i, j] = np.mean(scores)
        assert np.all(np.argmax(sim, axis=1) == np.arange(B))  # image -> text
        assert np.all(np.argmax(sim, axis=0) == np.arange(B))  # text -> image


class TestGrt1Format:
    def test_round_trip_50_random_batches(self, tmp_path, rng):
        for n in range(50):
            B, L, d = rng.integers(1, 5), rng.integers(1, 6), rng.integers(2, 7)
            mask = rng.random((B, L)) < 0.6
            mask[np.arange(B), rng.integers(0, L, B)] = True
            batch = TokenBatch(
                "image" if n % 2 else "text",
                rng.standard_normal((B, L, d)),
                mask,
                [f"id-{n}-{i}" for i in range(B)],
            )
            path = tmp_path / f"b{n}.grt1"
            write_batch(batch, path)
            back = read_batch(path)
            assert back.modality == batch.modality
            assert np.array_equal(back.embeddings, batch.embeddings)
            assert np.array_equal(back.mask, batch.mask)
            assert back.ids == batch.ids

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.grt1"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(MagicError):
            read_batch(path)

    def test_truncated_payload(self, tmp_path, rng):
        batch = TokenBatch("image", rng.standard_normal((2, 3, 4)), np.ones((2, 3), bool), ["a", "b"])
        path = tmp_path / "t.grt1"
        write_batch(batch, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncationError):
            read_batch(path)

    def test_trailing_bytes_inconsistent(self, tmp_path, rng):
        batch = TokenBatch("text", rng.standard_normal((1, 2, 2)), np.ones((1, 2), bool), ["x"])
        path = tmp_path / "x.grt1"
        write_batch(batch, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(InconsistencyError):
            read_batch(path)

    def test_bad_mask_byte_inconsistent(self, tmp_path, rng):
        batch = TokenBatch("text", rng.standard_normal((1, 2, 2)), np.ones((1, 2), bool), ["x"])
        path = tmp_path / "m.grt1"
        write_batch(batch, path)
        raw = bytearray(path.read_bytes())
        raw[4 + 1 + 12] = 7  # first mask byte
        path.write_bytes(bytes(raw))
        with pytest.raises(InconsistencyError):
            read_batch(path)

    def test_all_masked_instance_inconsistent(self, tmp_path, rng):
        batch = TokenBatch("text", rng.standard_normal((1, 2, 2)), np.array([[True, False]]), ["x"])
        path = tmp_path / "z.grt1"
        write_batch(batch, path)
        raw = bytearray(path.read_bytes())
        raw[4 + 1 + 12] = 0  # zero out the only valid token
        path.write_bytes(bytes(raw))
        with pytest.raises(InconsistencyError):
            read_batch(path)
