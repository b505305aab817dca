"""Objective terms, all in the maximize convention (every term is <= 0)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .model import GaussianPosterior, MTCVAE, reparameterize

LOG_VAR_MIN = math.log(1e-8)
LOG_VAR_MAX = math.log(1e8)
PROB_CLAMP = 1e-7
CHUNK_DIMS = 4  # c, H, W, C


@dataclass
class LossBundle:
    L_r: float
    L_a: float
    L_m: float
    L_b: float
    L: float
    beta: float
    lam: float

    def as_dict(self):
        return {"L_r": self.L_r, "L_a": self.L_a, "L_m": self.L_m, "L_b": self.L_b, "L": self.L}


def _sum_chunk(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(-CHUNK_DIMS).sum(-1)


def bernoulli_log_likelihood(logits: torch.Tensor, target: torch.Tensor,
                             frame_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sum over the trailing chunk dims of x log s(r) + (1-x) log(1-s(r)).

    ``frame_mask`` (shape ``(..., c)``, 1 = keep) drops padded frames.
    """
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    ll = -F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    if frame_mask is not None:
        ll = ll * frame_mask.to(ll.dtype)[..., None, None, None]
    return _sum_chunk(ll)


def gaussian_kl_std(post: GaussianPosterior) -> torch.Tensor:
    """KL(N(mean, var) || N(0, I)) summed over the last dim."""
    log_var = post.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    return 0.5 * (post.mean.pow(2) + log_var.exp() - 1.0 - log_var).sum(-1)


def bernoulli_skl(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """Symmetrised KL between per-pixel Bernoullis, summed over the chunk dims.

    With p, q the clamped probabilities, (KL(P||Q) + KL(Q||P)) / 2 reduces to
    (p - q)(logit p - logit q) / 2, which is exactly symmetric and exactly zero for a = b.
    """
    if logits_a.shape != logits_b.shape:
        raise ValueError(f"shape mismatch {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}")
    p = torch.sigmoid(logits_a).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    q = torch.sigmoid(logits_b).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    lp = torch.log(p) - torch.log1p(-p)
    lq = torch.log(q) - torch.log1p(-q)
    return _sum_chunk(0.5 * (p - q) * (lp - lq))


def total_objective(L_r, L_b, L_a, L_m, beta: float, lam: float):
    if beta < 0 or lam < 0:
        raise ValueError("loss weights must be non-negative")
    return L_r + lam * L_b + beta * (L_a + L_m)


# ---------------------------------------------------------------------------
# window-level terms

@dataclass
class WindowEncoding:
    """Posteriors and single samples for a batch of O-chunk windows."""

    z_post: GaussianPosterior  # (B, O, dim_z)
    w_post: GaussianPosterior  # (B, O, dim_w)
    z: torch.Tensor
    w: torch.Tensor

    @property
    def order(self) -> int:
        return self.z.shape[1]


@dataclass
class NoiseBank:
    """One standard-normal draw per posterior: ``z`` is (B, O, dim_z), ``w`` is (B, O, dim_w)."""

    z: torch.Tensor
    w: torch.Tensor

    @classmethod
    def zeros(cls, B, O, dim_z, dim_w, dtype=torch.float32):
        return cls(torch.zeros(B, O, dim_z, dtype=dtype), torch.zeros(B, O, dim_w, dtype=dtype))

    @classmethod
    def sample(cls, B, O, dim_z, dim_w, generator=None, dtype=torch.float32):
        return cls(torch.randn(B, O, dim_z, generator=generator, dtype=dtype),
                   torch.randn(B, O, dim_w, generator=generator, dtype=dtype))


def encode_window(model: MTCVAE, chunks: torch.Tensor, motion: torch.Tensor,
                  noise: NoiseBank) -> WindowEncoding:
    """Encode every chunk of ``(B, O, c, H, W, C)`` windows and sample each posterior once."""
    B, O = chunks.shape[:2]
    zp = model.encode_content(chunks.reshape(B * O, *chunks.shape[2:]))
    wp = model.encode_motion_input(motion.reshape(B * O, *motion.shape[2:]))
    z_post = GaussianPosterior(zp.mean.view(B, O, -1), zp.log_var.view(B, O, -1))
    w_post = GaussianPosterior(wp.mean.view(B, O, -1), wp.log_var.view(B, O, -1))
    z = reparameterize(z_post, noise.z.to(z_post.mean.dtype))
    w = reparameterize(w_post, noise.w.to(w_post.mean.dtype))
    return WindowEncoding(z_post, w_post, z, w)


def _grid_logits(model: MTCVAE, w: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Decode every (z_j, w_k) pair: w (B, K, dw), z (B, J, dz) -> (B, J, K, c, H, W, C)."""
    B, K = w.shape[:2]
    J = z.shape[1]
    ww = w[:, None, :, :].expand(B, J, K, w.shape[-1])
    zz = z[:, :, None, :].expand(B, J, K, z.shape[-1])
    return model.decode(ww, zz)


def reconstruction_term(model: MTCVAE, enc: WindowEncoding, targets: torch.Tensor,
                        content_idx: Optional[Sequence[int]] = None,
                        frame_mask: Optional[torch.Tensor] = None
                        ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sum over k and j of log p(x_k | w_k, z_j), per batch element.

    Returns ``(L_r of shape (B,), logits of shape (B, J, O, c, H, W, C))`` where ``J``
    indexes ``content_idx`` (all O content samples by default).
    """
    z = enc.z if content_idx is None else enc.z[:, list(content_idx)]
    logits = _grid_logits(model, enc.w, z)
    tgt = targets[:, None].expand_as(logits)
    mask = None if frame_mask is None else frame_mask[:, None].expand(*logits.shape[:3], -1)
    ll = bernoulli_log_likelihood(logits, tgt, mask)
    return ll.sum(dim=(1, 2)), logits


def kl_terms(enc: WindowEncoding) -> Tuple[torch.Tensor, torch.Tensor]:
    """(L_a, L_m): negated KL sums over the O chunks, per batch element."""
    L_a = -gaussian_kl_std(enc.z_post).sum(-1)
    L_m = -gaussian_kl_std(enc.w_post).sum(-1)
    return L_a, L_m


def brl_term(model: MTCVAE, source: WindowEncoding, driving: WindowEncoding,
             content_idx: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Blind reenactment term per (source, driving) pair of batch rows.

    Decodes (w_l of the driving window, z_j of the source window) for every l, j and
    sums -SKL over all (l, j, i).
    """
    z = source.z if content_idx is None else source.z[:, list(content_idx)]
    logits = _grid_logits(model, driving.w, z)  # (B, J, L, ...)
    a = logits[:, :, None]
    b = logits[:, None, :]
    a, b = torch.broadcast_tensors(a, b)
    return -bernoulli_skl(a, b).sum(dim=(1, 2, 3))


# entry points over explicit windows ------------------------------------------

def _window_tensors(model: MTCVAE, window):
    from .model import motion_inputs
    chunks = torch.as_tensor(window.chunks, dtype=model._param_dtype())
    if window.motion is not None:
        motion = torch.as_tensor(window.motion, dtype=model._param_dtype())
    else:
        motion = torch.as_tensor(motion_inputs(window.chunks), dtype=model._param_dtype())
    return chunks[None], motion[None]


def extended_reconstruction(model: MTCVAE, window, noise: NoiseBank):
    """L_r over one ChunkWindow; returns ``(L_r, rho)`` with rho indexed [j, k]."""
    chunks, motion = _window_tensors(model, window)
    if noise.z.shape[-2] != chunks.shape[1]:
        raise ValueError(f"noise bank is for O={noise.z.shape[-2]}, window has O={chunks.shape[1]}")
    enc = encode_window(model, chunks, motion, _batched(noise))
    L_r, logits = reconstruction_term(model, enc, chunks)
    return L_r[0], logits[0]


def kl_regularizers(z_posts: GaussianPosterior, w_posts: GaussianPosterior):
    """(L_a, L_m) for O stacked posteriors of shape (O, dim)."""
    return -gaussian_kl_std(z_posts).sum(), -gaussian_kl_std(w_posts).sum()


def blind_reenactment_loss(model: MTCVAE, source_window, driving_window,
                           noise_source: NoiseBank, noise_driving: NoiseBank) -> torch.Tensor:
    s_chunks, s_motion = _window_tensors(model, source_window)
    d_chunks, d_motion = _window_tensors(model, driving_window)
    if s_chunks.shape[1] != d_chunks.shape[1]:
        raise ValueError("source and driving windows differ in order O")
    src = encode_window(model, s_chunks, s_motion, _batched(noise_source))
    drv = encode_window(model, d_chunks, d_motion, _batched(noise_driving))
    return brl_term(model, src, drv)[0]


def _batched(noise: NoiseBank) -> NoiseBank:
    if noise.z.dim() == 2:
        return NoiseBank(noise.z[None], noise.w[None])
    return noise
