"""Deterministic whole-video reconstruction, reenactment and latent traversals.

Everything here uses posterior means and evaluation mode.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
import torch

from .datakit import VideoTensor, chunk_video
from .model import MTCVAE, chunk_mean, motion_inputs

SUBSPACES = ("full", "content", "motion")
DEFAULT_SWEEP = tuple(np.linspace(-3.0, 3.0, 7))


def _frames(video) -> np.ndarray:
    return video.frames if isinstance(video, VideoTensor) else np.asarray(video, dtype=np.float32)


def chunk_latents(model: MTCVAE, video, c: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Posterior-mean content and motion latents of every chunk: ``(z (K, dz), w (K, dw), pad)``."""
    model.eval()
    chunks, pad = chunk_video(_frames(video), c)
    with torch.no_grad():
        z = model.encode_content(torch.as_tensor(chunks)).mean
        w = model.encode_motion_input(torch.as_tensor(motion_inputs(chunks))).mean
    return z, w, pad


def decode_chunks(model: MTCVAE, w: torch.Tensor, z: torch.Tensor, length: int) -> np.ndarray:
    """Decode per-chunk latents, take the chunk means, concatenate and trim to ``length`` frames."""
    model.eval()
    with torch.no_grad():
        means = chunk_mean(model.decode(w, z))
    frames = means.reshape(-1, *means.shape[2:]).numpy()
    return frames[:length]


def reconstruct_video(model: MTCVAE, video, c: int) -> np.ndarray:
    frames = _frames(video)
    z, w, _ = chunk_latents(model, frames, c)
    return decode_chunks(model, w, z, frames.shape[0])


def reenact(model: MTCVAE, source, driving, c: int) -> np.ndarray:
    """Source appearance moving like the driving video.

    Only the first chunk of the source is read: its content mean is paired with the
    motion mean of every driving chunk.
    """
    model.eval()
    src = _frames(source)
    drv = _frames(driving)
    first, _ = chunk_video(src[:c], c)
    with torch.no_grad():
        z = model.encode_content(torch.as_tensor(first)).mean
    _, w, _ = chunk_latents(model, drv, c)
    return decode_chunks(model, w, z.expand(w.shape[0], -1), drv.shape[0])


def _match_length(a: torch.Tensor, K: int) -> torch.Tensor:
    if a.shape[0] >= K:
        return a
    return torch.cat([a, a[-1:].expand(K - a.shape[0], -1)])


def traverse_between(model: MTCVAE, video_a, video_b, subspace: str, steps: int,
                     c: int) -> List[np.ndarray]:
    """Decode ``steps + 1`` points on the straight line between two videos' latents.

    ``content`` moves only the content latents (motion stays at ``a``'s), ``motion``
    only the motion latents, ``full`` both.  A shorter video's latent sequence is
    extended by repeating its last chunk.
    """
    if subspace not in SUBSPACES:
        raise ValueError(f"subspace must be one of {SUBSPACES}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    fa, fb = _frames(video_a), _frames(video_b)
    za, wa, _ = chunk_latents(model, fa, c)
    zb, wb, _ = chunk_latents(model, fb, c)
    K = max(za.shape[0], zb.shape[0])
    za, wa, zb, wb = (_match_length(x, K) for x in (za, wa, zb, wb))
    length = max(fa.shape[0], fb.shape[0])
    out = []
    for s in range(steps + 1):
        t = s / steps
        z = (1 - t) * za + t * zb if subspace in ("full", "content") else za
        w = (1 - t) * wa + t * wb if subspace in ("full", "motion") else wa
        out.append(decode_chunks(model, w, z, length))
    return out


def traverse_unit(model: MTCVAE, video, unit: int, space: str, values: Sequence[float],
                  c: int) -> List[np.ndarray]:
    """Overwrite one latent coordinate in every chunk with each of ``values`` and decode."""
    frames = _frames(video)
    z, w, _ = chunk_latents(model, frames, c)
    if space == "content":
        target, dim = z, model.config.dim_z
    elif space == "motion":
        target, dim = w, model.config.dim_w
    else:
        raise ValueError("space must be 'content' or 'motion'")
    if not 0 <= unit < dim:
        raise IndexError(f"unit {unit} out of range for {space} latents of size {dim}")
    out = []
    for v in values:
        edited = target.clone()
        edited[:, unit] = float(v)
        zz, ww = (edited, w) if space == "content" else (z, edited)
        out.append(decode_chunks(model, ww, zz, frames.shape[0]))
    return out


def save_grid_png(rows: Sequence[np.ndarray], path, pad: int = 1) -> None:
    """Write videos as an image grid: one row per video, one column per frame."""
    from PIL import Image

    rows = [np.asarray(r, dtype=np.float32) for r in rows]
    T = max(r.shape[0] for r in rows)
    H, W, C = rows[0].shape[1:]
    canvas = np.ones((len(rows) * (H + pad) + pad, T * (W + pad) + pad, C), dtype=np.float32)
    for i, r in enumerate(rows):
        for t in range(r.shape[0]):
            y, x = pad + i * (H + pad), pad + t * (W + pad)
            canvas[y:y + H, x:x + W] = r[t]
    img = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    if C == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path)
