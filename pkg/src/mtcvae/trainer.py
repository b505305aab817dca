"""Chunk-sequence training loop: window sampling, reversed-batch pairing, updates."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses
from .datakit import ChunkWindow, Dataset, WindowError, sample_chunk_window
from .flow import dataset_flows
from .losses import LossBundle, NoiseBank
from .model import MTCVAE, ModelConfig, motion_inputs, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "L_r", "L_a", "L_m", "L_b", "L", "wall_time"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    partial_r: Optional[int] = None
    grad_clip: float = 10.0
    all_pairs: bool = False  # debug: every ordered (source, driving) pair of the batch

    def validate(self) -> List[str]:
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        return problems


def make_driving_batch(batch: Sequence) -> list:
    """Driving videos for the blind reenactment term: the batch in reverse order."""
    return list(reversed(batch))


def make_optimizer(model: MTCVAE, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    return torch.optim.SGD(model.parameters(), lr=cfg.lr)


def _stack_windows(model: MTCVAE, batch: Sequence[ChunkWindow]):
    dtype = model._param_dtype()
    chunks = torch.as_tensor(np.stack([w.chunks for w in batch]), dtype=dtype)
    motion = np.stack([w.motion if w.motion is not None else motion_inputs(w.chunks)
                       for w in batch])
    return chunks, torch.as_tensor(motion, dtype=dtype)


def batch_objective(model: MTCVAE, batch: Sequence[ChunkWindow], noise: NoiseBank,
                    beta: float, lam: float, content_idx: Optional[Sequence[int]] = None,
                    all_pairs: bool = False):
    """Per-element objective terms for a batch of windows.

    Returns a dict of ``(B,)`` tensors for L_r, L_a, L_m, L_b and L.  The blind
    reenactment term pairs element b with the reversed batch (element B-1-b); the
    samples drawn for each window are reused as its driving samples.
    """
    chunks, motion = _stack_windows(model, batch)
    enc = losses.encode_window(model, chunks, motion, noise)
    L_r, _ = losses.reconstruction_term(model, enc, chunks, content_idx)
    L_a, L_m = losses.kl_terms(enc)
    if enc.order >= 2 and lam > 0:
        if all_pairs:
            L_b = _all_pairs_brl(model, enc, content_idx)
        else:
            rev = torch.arange(chunks.shape[0] - 1, -1, -1)
            driving = losses.WindowEncoding(
                losses.GaussianPosterior(enc.z_post.mean[rev], enc.z_post.log_var[rev]),
                losses.GaussianPosterior(enc.w_post.mean[rev], enc.w_post.log_var[rev]),
                enc.z[rev], enc.w[rev])
            L_b = losses.brl_term(model, enc, driving, content_idx)
    else:
        L_b = torch.zeros_like(L_r)
    L = losses.total_objective(L_r, L_b, L_a, L_m, beta, lam)
    return {"L_r": L_r, "L_a": L_a, "L_m": L_m, "L_b": L_b, "L": L}


def _all_pairs_brl(model, enc, content_idx):
    B = enc.z.shape[0]
    total = torch.zeros(B, dtype=enc.z.dtype)
    for shift in range(1, B):
        idx = (torch.arange(B) + shift) % B
        drv = losses.WindowEncoding(enc.z_post, enc.w_post, enc.z, enc.w[idx])
        total = total + losses.brl_term(model, enc, drv, content_idx)
    return total


def training_step(model: MTCVAE, optimizer: torch.optim.Optimizer, batch: Sequence[ChunkWindow],
                  model_config: ModelConfig, train_config: TrainConfig,
                  generator: torch.Generator, rng: np.random.Generator) -> LossBundle:
    """One gradient-ascent step on the batch-mean objective (descends -L)."""
    model.train()
    B, O = len(batch), model_config.O
    dtype = model._param_dtype()
    noise = NoiseBank.sample(B, O, model_config.dim_z, model_config.dim_w, generator, dtype)
    r = train_config.partial_r or model_config.partial_r
    content_idx = None
    if r is not None and r < O:
        content_idx = sorted(rng.choice(O, size=r, replace=False).tolist())
    terms = batch_objective(model, batch, noise, model_config.beta, model_config.lam,
                            content_idx, train_config.all_pairs)
    for name in ("L_r", "L_a", "L_m", "L_b"):
        bad = ~torch.isfinite(terms[name])
        if bad.any():
            idx = torch.nonzero(bad).flatten().tolist()
            # batch-norm statistics spread one bad window to the whole batch, so name the source too
            src = [b for b, w in enumerate(batch) if not np.isfinite(w.chunks).all()
                   or (w.motion is not None and not np.isfinite(w.motion).all())]
            raise NonFiniteLossError(f"non-finite {name} at batch indices {idx}; "
                                     f"inputs non-finite at batch indices {src}")
    objective = terms["L"].mean()
    optimizer.zero_grad(set_to_none=True)
    (-objective).backward()
    if train_config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
    optimizer.step()
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteLossError(f"parameter {name} became non-finite")
    means = {k: float(v.detach().mean()) for k, v in terms.items()}
    return LossBundle(means["L_r"], means["L_a"], means["L_m"], means["L_b"], means["L"],
                      model_config.beta, model_config.lam)


def _mean_bundle(bundles: List[LossBundle], weights: List[int]) -> LossBundle:
    w = np.asarray(weights, dtype=np.float64)
    avg = lambda k: float(np.dot([getattr(b, k) for b in bundles], w) / w.sum())
    b0 = bundles[0]
    return LossBundle(avg("L_r"), avg("L_a"), avg("L_m"), avg("L_b"), avg("L"), b0.beta, b0.lam)


def train(dataset: Dataset, train_ids: Sequence[str], model_config: ModelConfig,
          train_config: TrainConfig, out_dir=None, flows: Optional[np.ndarray] = None,
          model: Optional[MTCVAE] = None, progress: bool = False
          ) -> Tuple[MTCVAE, List[LossBundle]]:
    """Train from scratch (or continue ``model``) over the videos ``train_ids``.

    Each epoch shuffles the videos and draws one fresh window per video.  With
    ``out_dir`` set, writes ``train_log.csv`` and ``checkpoint.mtcv`` (plus per-epoch
    checkpoints at the configured cadence).
    """
    problems = model_config.validate() + train_config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if len(train_ids) == 0:
        raise ValueError("training split is empty")
    T = dataset.dims[0]
    if T < model_config.c * model_config.O:
        raise WindowError(f"videos have {T} frames, windows need c*O = "
                          f"{model_config.c * model_config.O}")
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    generator = torch.Generator().manual_seed(train_config.seed)
    if model is None:
        model = MTCVAE(model_config)
    optimizer = make_optimizer(model, train_config)
    index = np.array([dataset.index_of(v) for v in train_ids])
    if flows is None and model_config.c >= 2:
        flows = dataset_flows(dataset.frames[index])
        flow_row = {int(i): k for k, i in enumerate(index)}
    else:
        flow_row = {int(i): int(i) for i in index}
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    history = []
    start = time.time()
    try:
        for epoch in range(train_config.epochs):
            order = rng.permutation(index)
            bundles, sizes = [], []
            for b0 in range(0, len(order), train_config.batch_size):
                batch = []
                for i in order[b0:b0 + train_config.batch_size]:
                    fl = flows[flow_row[int(i)]] if flows is not None and model_config.c >= 2 else None
                    batch.append(sample_chunk_window(dataset.float_frames(int(i)), model_config.c,
                                                     model_config.O, rng, fl))
                bundles.append(training_step(model, optimizer, batch, model_config,
                                             train_config, generator, rng))
                sizes.append(len(batch))
            epoch_bundle = _mean_bundle(bundles, sizes)
            history.append(epoch_bundle)
            if progress:
                log.info("epoch %d: %s", epoch, epoch_bundle.as_dict())
            if writer is not None:
                writer.writerow({"epoch": epoch, **epoch_bundle.as_dict(),
                                 "wall_time": round(time.time() - start, 3)})
                log_fh.flush()
                if train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
                    save_checkpoint(model, model_config, out_dir / f"checkpoint-epoch{epoch + 1:03d}.mtcv")
    finally:
        if writer is not None:
            log_fh.close()
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, model_config, out_dir / "checkpoint.mtcv")
    return model, history
