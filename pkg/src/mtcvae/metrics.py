"""Disentanglement (FactorVAE, MIG, SAP), realism (SSIM, FID) and downstream accuracy."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score

from .datakit import CONTENT, MOTION, Dataset, ShapesGenerator, aggregate_labels, chunk_video
from .inference import chunk_latents
from .model import MTCVAE, motion_inputs


@dataclass
class CodeTable:
    codes: np.ndarray  # (rows, dim_z + dim_w)
    labels: np.ndarray  # (rows, n_factors)
    factor_names: List[str]
    factor_tags: List[str]
    column_tags: List[str]  # CONTENT / MOTION per code column
    video_index: np.ndarray  # source video row of each code

    def space(self, tag: str) -> np.ndarray:
        cols = [i for i, t in enumerate(self.column_tags) if t == tag]
        return self.codes[:, cols]

    def two_factor(self) -> "CodeTable":
        """Collapse the factors into one content and one motion superset label."""
        content = aggregate_labels(self.labels, [i for i, t in enumerate(self.factor_tags) if t == CONTENT])
        motion = aggregate_labels(self.labels, [i for i, t in enumerate(self.factor_tags) if t == MOTION])
        return CodeTable(self.codes, np.stack([content, motion], axis=1), [CONTENT, MOTION],
                         [CONTENT, MOTION], self.column_tags, self.video_index)


def extract_codes(model: MTCVAE, dataset: Dataset, ids: Sequence[str], c: int) -> CodeTable:
    """One mean latent vector (content ++ motion) per chunk of every listed video."""
    if len(ids) == 0:
        raise ValueError("empty split")
    rows, labels, vidx = [], [], []
    for vid in ids:
        i = dataset.index_of(vid)
        z, w, _ = chunk_latents(model, dataset.float_frames(i), c)
        rows.append(torch.cat([z, w], dim=1).numpy())
        labels.append(np.repeat(dataset.labels[i][None], z.shape[0], axis=0))
        vidx.append(np.full(z.shape[0], i))
    cfg = model.config
    return CodeTable(np.concatenate(rows).astype(np.float64), np.concatenate(labels),
                     dataset.factor_names, dataset.tags,
                     [CONTENT] * cfg.dim_z + [MOTION] * cfg.dim_w, np.concatenate(vidx))


# ---------------------------------------------------------------------------
# FactorVAE score

Sampler = Callable[[Optional[int], int, np.random.Generator], np.ndarray]


@dataclass
class FactorVAEConfig:
    train_votes: int = 800
    eval_votes: int = 200
    batch: int = 64  # samples per vote
    global_samples: int = 10000
    prune_threshold: float = 0.05


class TableSampler:
    """Draws codes from a CodeTable: with a factor fixed, all rows share one random value of it."""

    def __init__(self, table: CodeTable):
        self.table = table
        self.n_factors = table.labels.shape[1]

    def __call__(self, factor, n, rng):
        if factor is None:
            return self.table.codes[rng.integers(len(self.table.codes), size=n)]
        col = self.table.labels[:, factor]
        value = col[rng.integers(len(col))]
        pool = np.flatnonzero(col == value)
        return self.table.codes[rng.choice(pool, size=n, replace=True)]


class GeneratorSampler:
    """Renders fresh shapes videos with one factor superset held fixed and encodes one chunk each.

    Factors are the two supersets (0 = content, 1 = motion).
    """

    n_factors = 2

    def __init__(self, model: MTCVAE, generator: ShapesGenerator, c: int):
        self.model = model
        self.gen = generator
        self.c = c
        tags = {f.name: f.tag for f in generator.config.all_factors()}
        self.groups = [[k for k, t in tags.items() if t == CONTENT],
                       [k for k, t in tags.items() if t == MOTION]]

    def __call__(self, factor, n, rng):
        base = self.gen.sample_factors(rng)
        chunks = []
        for _ in range(n):
            f = self.gen.sample_factors(rng)
            if factor is not None:
                f.update({k: base[k] for k in self.groups[factor]})
            video = self.gen.render(f, rng).astype(np.float32)
            ch, _ = chunk_video(video, self.c)
            chunks.append(ch[rng.integers(ch.shape[0])])
        chunks = np.stack(chunks)
        self.model.eval()
        with torch.no_grad():
            z = self.model.encode_content(torch.as_tensor(chunks)).mean
            w = self.model.encode_motion_input(torch.as_tensor(motion_inputs(chunks))).mean
        return torch.cat([z, w], dim=1).numpy().astype(np.float64)


def factor_vae_score(sampler: Sampler, n_factors: int, cfg: FactorVAEConfig = FactorVAEConfig(),
                     seed: int = 0, global_codes: Optional[np.ndarray] = None) -> float:
    """Majority-vote accuracy of predicting the fixed factor from the least-varying code dim."""
    rng = np.random.default_rng(seed)
    if global_codes is None:
        global_codes = sampler(None, cfg.global_samples, rng)
    scale = np.std(global_codes, axis=0)
    active = scale >= cfg.prune_threshold
    if not active.any():
        raise ValueError("all code dimensions are collapsed")

    def votes(n):
        out = np.zeros((global_codes.shape[1], n_factors), dtype=np.int64)
        for _ in range(n):
            f = int(rng.integers(n_factors))
            codes = sampler(f, cfg.batch, rng)
            var = np.var(codes[:, active] / scale[active], axis=0, ddof=1)
            d = np.flatnonzero(active)[np.argmin(var)]
            out[d, f] += 1
        return out

    train = votes(cfg.train_votes)
    evaluation = votes(cfg.eval_votes)
    assignment = np.argmax(train, axis=1)
    correct = evaluation[np.arange(evaluation.shape[0]), assignment].sum()
    return float(correct / evaluation.sum())


# ---------------------------------------------------------------------------
# MIG and SAP

def _discretize(codes: np.ndarray, bins: int) -> np.ndarray:
    out = np.zeros(codes.shape, dtype=np.int64)
    for d in range(codes.shape[1]):
        col = codes[:, d]
        lo, hi = col.min(), col.max()
        if hi > lo:
            out[:, d] = np.minimum(((col - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    return out


def _entropy(x: np.ndarray) -> float:
    p = np.bincount(x) / len(x)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai.ravel(), bi.ravel()), 1)
    joint /= joint.sum()
    pa = joint.sum(1, keepdims=True)
    pb = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mutual_info_matrix(codes: np.ndarray, factors: np.ndarray, bins: int = 20) -> np.ndarray:
    disc = _discretize(codes, bins)
    return np.array([[_mutual_info(disc[:, d], factors[:, f]) for f in range(factors.shape[1])]
                     for d in range(codes.shape[1])])


def mig(codes: np.ndarray, factors: np.ndarray, bins: int = 20) -> float:
    """Mean over factors of the entropy-normalised gap between the two most informative dims."""
    factors = np.asarray(factors).reshape(len(codes), -1)
    mi = mutual_info_matrix(codes, factors, bins)
    gaps = []
    for f in range(factors.shape[1]):
        h = _entropy(np.unique(factors[:, f], return_inverse=True)[1].ravel())
        if h <= 0:
            warnings.warn(f"factor {f} has zero entropy; skipped")
            continue
        top = np.sort(mi[:, f])[::-1]
        second = top[1] if len(top) > 1 else 0.0
        gaps.append((top[0] - second) / h)
    if not gaps:
        raise ValueError("every factor has zero entropy")
    return float(np.clip(np.mean(gaps), 0.0, 1.0))


def _split(n: int, rng: np.random.Generator, frac: float = 0.8):
    perm = rng.permutation(n)
    k = int(round(frac * n))
    return perm[:k], perm[k:]


def sap_matrix(codes: np.ndarray, factors: np.ndarray, seed: int = 0) -> np.ndarray:
    """Chance-adjusted held-out balanced accuracy of a 1-D linear classifier per (dim, factor)."""
    rng = np.random.default_rng(seed)
    tr, te = _split(len(codes), rng)
    S = np.zeros((codes.shape[1], factors.shape[1]))
    for f in range(factors.shape[1]):
        y = factors[:, f]
        if len(np.unique(y[tr])) < 2:
            continue
        for d in range(codes.shape[1]):
            x = codes[:, d]
            mu, sd = x[tr].mean(), x[tr].std()
            if sd == 0:
                continue
            xs = ((x - mu) / sd)[:, None]
            clf = LogisticRegression(C=1e4, max_iter=2000)
            clf.fit(xs[tr], y[tr])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                S[d, f] = max(0.0, balanced_accuracy_score(y[te], clf.predict(xs[te]), adjusted=True))
    return S


def sap(codes: np.ndarray, factors: np.ndarray, seed: int = 0) -> float:
    factors = np.asarray(factors).reshape(len(codes), -1)
    S = sap_matrix(codes, factors, seed)
    top = np.sort(S, axis=0)[::-1]
    second = top[1] if S.shape[0] > 1 else np.zeros(S.shape[1])
    return float(np.clip(np.mean(top[0] - second), 0.0, 1.0))


# ---------------------------------------------------------------------------
# SSIM and FID

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM of two 2-D images with dynamic range 1 (Gaussian window, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    blur = lambda x: ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA,
                                             mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (saa + sbb + C2)
    return num / den


def ssim_frame(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(ssim_map(a, b)))


def ssim_video(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 1.0
    scores = [ssim_frame(a[t, ..., ch], b[t, ..., ch])
              for t in range(a.shape[0]) for ch in range(a.shape[-1])]
    return float(np.mean(scores))


def align_length(video: np.ndarray, length: int) -> np.ndarray:
    """Truncate, or pad by repeating the last frame, to ``length`` frames."""
    if video.shape[0] >= length:
        return video[:length]
    return np.concatenate([video, np.repeat(video[-1:], length - video.shape[0], axis=0)])


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)
    trace = np.trace(cov_a) + np.trace(cov_b) - 2 * np.sqrt(vals).sum()
    # clamp rounding noise: the distance is non-negative
    return max(0.0, float(np.sum((mu_a - mu_b) ** 2) + trace))


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape} vs {b.shape}")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def pooled_frame_features(videos, grid: int = 8) -> np.ndarray:
    """Default FID features: grayscale frames average-pooled to ``grid x grid`` (d = grid**2)."""
    feats = []
    for v in videos:
        g = np.asarray(v, dtype=np.float64).mean(-1)
        T, H, W = g.shape
        ys = np.linspace(0, H, grid + 1).astype(int)
        xs = np.linspace(0, W, grid + 1).astype(int)
        f = np.empty((T, grid, grid))
        for i in range(grid):
            for j in range(grid):
                f[:, i, j] = g[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))
        feats.append(f.reshape(T, -1))
    return np.concatenate(feats)


FEATURE_MAGIC = b"MTCF"


def write_features(path, features: np.ndarray) -> None:
    f = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", *f.shape))
        fh.write(f.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    n, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * n * d:
        raise ValueError(f"{path}: truncated feature payload")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d).copy()


# ---------------------------------------------------------------------------
# downstream classification

def _train_ovr_hinge(x, y, classes, C=1.0, iters=1000, lr=0.1):
    n, d = x.shape
    Y = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    W = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    for it in range(iters):
        margin = Y * (x @ W + b)
        active = (margin < 1).astype(np.float64) * -Y
        gW = x.T @ active / n + W / (C * n)
        gb = active.mean(0)
        step = lr / np.sqrt(1 + it / 50)
        W -= step * gW
        b -= step * gb
    return W, b


def downstream_linear_accuracy(codes: np.ndarray, labels: np.ndarray, seed: int = 0,
                               C: float = 1.0) -> float:
    """Held-out accuracy of a one-vs-rest linear SVM (hinge + L2) on an 80/20 split."""
    labels = np.asarray(labels).ravel()
    classes = np.unique(labels)
    if len(classes) < 2:
        warnings.warn("single class: accuracy is 1.0 by convention")
        return 1.0
    rng = np.random.default_rng(seed)
    tr, te = _split(len(codes), rng)
    mu, sd = codes[tr].mean(0), codes[tr].std(0)
    sd[sd == 0] = 1.0
    x = (codes - mu) / sd
    W, b = _train_ovr_hinge(x[tr], labels[tr], classes, C)
    pred = classes[np.argmax(x[te] @ W + b, axis=1)]
    return float(np.mean(pred == labels[te]))


def write_report(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(rows), indent=1))
