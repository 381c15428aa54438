"""Retrieval metrics, heatmap-data export, and ablation/parameter sweeps.

Ranking is deterministic: candidates sort by similarity descending with
ties broken by the lower index. The combined inference score reuses the
training-time level weights: a*s_ori + b*s_key + c*s_unc. Every level is
reported separately as well so that choice stays auditable.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import TokenBatch
from .errors import ParameterError
from .model import ABLATION_ARMS, apply_arm
from .trainer import Checkpoint, TrainConfig, head_from_checkpoint, train

R_AT_KS = (1, 5, 10)
REPORT_LEVELS = ("ori", "key", "unc", "combined")


@dataclass
class RetrievalReport:
    direction: str  # image_to_text | text_to_image
    r_at: dict  # {1: pct, 5: pct, 10: pct}
    rsum: float  # six-term sum over both directions at this level
    level: str  # ori | key | unc | combined


def recall_at_k(s: np.ndarray, ground_truth, k: int, direction: str) -> float:
    """Percentage of queries whose match appears in the top-k candidates.

    s is (N_img, N_txt); ground_truth lists, per image, its correct text
    indices (several per image supports the 5-caption protocol).
    """
    s = np.asarray(s, dtype=np.float64)
    if k < 1:
        raise ParameterError("k must be >= 1")
    if direction not in ("image_to_text", "text_to_image"):
        raise ParameterError(f"unknown direction {direction!r}")
    n_img, n_txt = s.shape
    if len(ground_truth) != n_img:
        raise ParameterError("need one ground-truth list per image")

    if direction == "image_to_text":
        if k > n_txt:
            raise ParameterError(f"k={k} exceeds {n_txt} text candidates")
        hits = 0
        for i in range(n_img):
            gt = set(ground_truth[i])
            if not gt:
                raise ParameterError(f"image {i} has no ground-truth texts")
            top = np.argsort(-s[i], kind="stable")[:k]
            hits += bool(gt.intersection(top.tolist()))
        return 100.0 * hits / n_img

    if k > n_img:
        raise ParameterError(f"k={k} exceeds {n_img} image candidates")
    correct_images = [[] for _ in range(n_txt)]
    for i, texts in enumerate(ground_truth):
        for j in texts:
            correct_images[j].append(i)
    queries = [j for j in range(n_txt) if correct_images[j]]
    if not queries:
        raise ParameterError("no text query has a ground-truth image")
    hits = 0
    for j in queries:
        top = np.argsort(-s[:, j], kind="stable")[:k]
        hits += bool(set(correct_images[j]).intersection(top.tolist()))
    return 100.0 * hits / len(queries)


def _default_gt(n: int):
    return [[i] for i in range(n)]


def similarity_matrices(head, images: TokenBatch, texts: TokenBatch, weights, backend=None):
    """Deterministic forward pass; returns {level: numpy (B_i, B_t)} incl. combined."""
    out = head.forward(images, texts, "deterministic", rngs=None, backend=backend)
    mats = {
        "ori": out.levels.s_ori.data.copy(),
        "key": out.levels.s_key.data.copy(),
        "unc": out.levels.s_unc.data.copy(),
    }
    mats["combined"] = weights.a * mats["ori"] + weights.b * mats["key"] + weights.c * mats["unc"]
    return mats


def reports_for_matrix(s: np.ndarray, ground_truth, level: str):
    n_img, n_txt = s.shape
    candidates = {"image_to_text": n_txt, "text_to_image": n_img}
    per_direction = {}
    for direction in ("image_to_text", "text_to_image"):
        per_direction[direction] = {
            k: recall_at_k(s, ground_truth, k, direction)
            for k in R_AT_KS
            if k <= candidates[direction]
        }
    rsum = sum(per_direction["image_to_text"].values()) + sum(per_direction["text_to_image"].values())
    return [
        RetrievalReport(direction, per_direction[direction], rsum, level)
        for direction in ("image_to_text", "text_to_image")
    ]


def evaluate(checkpoint: Checkpoint, images: TokenBatch, texts: TokenBatch,
             ground_truth=None, backend=None):
    """Retrieval reports for all four levels and both directions."""
    head, config = head_from_checkpoint(checkpoint)
    ground_truth = ground_truth if ground_truth is not None else _default_gt(images.batch_size)
    mats = similarity_matrices(head, images, texts, config.weights, backend=backend)
    reports = []
    for level in REPORT_LEVELS:
        reports.extend(reports_for_matrix(mats[level], ground_truth, level))
    return reports


def retrieval_line(head, images, texts, config, step: int) -> str:
    """One JSON log line of combined-level training-set retrieval."""
    mats = similarity_matrices(head, images, texts, config.weights)
    gt = _default_gt(images.batch_size)
    kmax = min(images.batch_size, max(R_AT_KS))
    record = {"step": step, "event": "retrieval"}
    for direction, tag in (("image_to_text", "i2t"), ("text_to_image", "t2i")):
        for k in R_AT_KS:
            if k <= kmax:
                record[f"{tag}_r{k}"] = recall_at_k(mats["combined"], gt, k, direction)
    return json.dumps(record)


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def export_heatmap(checkpoint: Checkpoint, images: TokenBatch, texts: TokenBatch,
                   index: int, path_prefix: str, backend=None):
    """Write alignment heatmap data for one (image, text) pair.

    Emits: <prefix>_tokens.csv with the key-level cosine grid (header row
    names word indices; gate values appended as final column/row),
    <prefix>_word##.pgm per valid word when L_v is a perfect square, and
    <prefix>_regions.csv with the patch-normalized region attention. Returns
    the list of written paths.
    """
    if not (0 <= index < images.batch_size):
        raise ParameterError(f"index {index} out of range for batch of {images.batch_size}")
    img = TokenBatch(images.modality, images.embeddings[index : index + 1],
                     images.mask[index : index + 1], [images.ids[index]])
    txt = TokenBatch(texts.modality, texts.embeddings[index : index + 1],
                     texts.mask[index : index + 1], [texts.ids[index]])

    head, _ = head_from_checkpoint(checkpoint)
    out = head.forward(img, txt, "deterministic", rngs=None, keep_maps=True, backend=backend)
    cos = out.levels.token_map("key", 0, 0)  # (L_t, L_v)
    gate_v = out.gated_image.gate.data[0]
    gate_t = out.gated_text.gate.data[0]
    l_t, l_v = cos.shape
    written = []

    tokens_path = f"{path_prefix}_tokens.csv"
    with open(tokens_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patch"] + [f"w{t}" for t in range(l_t)] + ["image_gate"])
        for v in range(l_v):
            w.writerow([v] + [_fmt(cos[t, v]) for t in range(l_t)] + [_fmt(gate_v[v])])
        w.writerow(["text_gate"] + [_fmt(gate_t[t]) for t in range(l_t)] + [""])
    written.append(tokens_path)

    side = math.isqrt(l_v)
    if side * side == l_v:
        for t in range(l_t):
            if not txt.mask[0, t]:
                continue
            row = cos[t]
            lo, hi = row.min(), row.max()
            if hi > lo:
                scaled = np.round((row - lo) / (hi - lo) * 255.0)
            else:
                scaled = np.full_like(row, 255.0)  # constant row: every cell is the max
            pgm_path = f"{path_prefix}_word{t:02d}.pgm"
            with open(pgm_path, "wb") as f:
                f.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
                f.write(scaled.astype(np.uint8).reshape(side, side).tobytes())
            written.append(pgm_path)
    else:
        warn_path = f"{path_prefix}_warning.txt"
        with open(warn_path, "w") as f:
            f.write(f"L_v={l_v} is not a perfect square; PGM grids skipped, CSV exported only\n")
        written.append(warn_path)

    if out.regions is not None:
        attn = out.regions.attn_norm.data[0]  # (L_v, K)
        regions_path = f"{path_prefix}_regions.csv"
        with open(regions_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["patch"] + [f"k{k}" for k in range(attn.shape[1])])
            for v in range(l_v):
                w.writerow([v] + [_fmt(attn[v, k]) for k in range(attn.shape[1])])
        written.append(regions_path)
    return written


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("K", "abc_weights", "tau", "ablation_arm")

SWEEP_COLUMNS = (
    "axis", "value", "config_delta",
    "l_con_ori", "l_con_key", "l_con_unc", "l_recon", "l_kl", "l_ent", "total",
    "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum",
)


def _apply_sweep_value(config: TrainConfig, axis: str, value):
    if axis == "K":
        k = int(value)
        return replace(config, K=k), f"K={k}"
    if axis == "tau":
        t = float(value)
        return replace(config, tau=t), f"tau={t}"
    if axis == "abc_weights":
        a, b = (float(x) for x in str(value).split(":"))
        c = 1.0 - a - b
        w = replace(config.weights, a=a, b=b, c=c)
        return replace(config, weights=w), f"a={a},b={b},c={round(c, 12)}"
    # ablation_arm: TrainConfig carries the same use_* flags apply_arm toggles
    arm = str(value)
    cfg, weights = apply_arm(config, config.weights, arm)
    return replace(cfg, weights=weights), f"arm={arm}"


def run_sweep(base_config: TrainConfig, axis: str, values, images: TokenBatch,
              texts: TokenBatch, csv_path=None):
    """Train/evaluate once per value; returns (rows, csv_text).

    Each row records the config delta, the final-step loss components, and
    combined-level R@K both directions plus rSum, all under the base seed.
    """
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ParameterError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg, delta = _apply_sweep_value(base_config, axis, value)
        ckpt, log_lines = train(images, texts, cfg)
        last_loss = json.loads([l for l in log_lines if "l_con_ori" in l][-1])
        head, _ = head_from_checkpoint(ckpt)
        mats = similarity_matrices(head, images, texts, cfg.weights)
        gt = _default_gt(images.batch_size)
        row = {"axis": axis, "value": str(value), "config_delta": delta}
        for key in ("l_con_ori", "l_con_key", "l_con_unc", "l_recon", "l_kl", "l_ent", "total"):
            row[key] = last_loss[key]
        rsum = 0.0
        kmax = images.batch_size
        for direction, tag in (("image_to_text", "i2t"), ("text_to_image", "t2i")):
            for k in R_AT_KS:
                if k > kmax:
                    row[f"{tag}_r{k}"] = ""
                    continue
                r = recall_at_k(mats["combined"], gt, k, direction)
                row[f"{tag}_r{k}"] = r
                rsum += r
        row["rsum"] = rsum
        rows.append(row)

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(SWEEP_COLUMNS), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    text = buf.getvalue()
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            f.write(text)
    return rows, text
