"""Dense Lucas-Kanade optical flow used as the motion encoder's input."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

WINDOW = 5
SIGMA = 1.0
EPS = 1e-3


def grayscale(frames: np.ndarray) -> np.ndarray:
    """Channel mean of ``(..., H, W, C)`` frames."""
    return np.asarray(frames, dtype=np.float64).mean(axis=-1)


def flow_sequence(gray: np.ndarray, window: int = WINDOW, eps: float = EPS,
                  sigma: float = SIGMA) -> np.ndarray:
    """Flow between every pair of consecutive frames of a ``(T, H, W)`` stack.

    Returns ``(T-1, H, W, 2)`` float32 with (u, v) in pixels/frame.  Every operation
    acts on one frame at a time, so a pair's flow does not depend on which stack it
    was computed in.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 3:
        raise ValueError(f"expected (T, H, W) frames, got {gray.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gray.shape[0] < 2:
        return np.zeros((0,) + gray.shape[1:] + (2,), dtype=np.float32)
    if sigma > 0:
        gray = ndimage.gaussian_filter(gray, sigma=(0, sigma, sigma), mode="nearest")
    a, b = gray[:-1], gray[1:]
    # spatial gradients of the pair mean keep flow(a, b) = -flow(b, a)
    mid = 0.5 * (a + b)
    iy, ix = np.gradient(mid, axis=(1, 2))
    it = b - a
    box = lambda x: ndimage.uniform_filter(x, size=(1, window, window), mode="constant") * window * window
    sxx = box(ix * ix) + eps
    syy = box(iy * iy) + eps
    sxy = box(ix * iy)
    sxt = box(ix * it)
    syt = box(iy * it)
    det = sxx * syy - sxy * sxy
    u = (-syy * sxt + sxy * syt) / det
    v = (sxy * sxt - sxx * syt) / det
    out = np.stack([u, v], axis=-1)
    out[~np.isfinite(out)] = 0.0
    return out.astype(np.float32)


def lk_flow_pair(frame_a: np.ndarray, frame_b: np.ndarray, window: int = WINDOW,
                 eps: float = EPS, sigma: float = SIGMA) -> np.ndarray:
    """Flow field ``(H, W, 2)`` carrying ``frame_a`` onto ``frame_b``."""
    frame_a = np.asarray(frame_a)
    frame_b = np.asarray(frame_b)
    if frame_a.shape != frame_b.shape or frame_a.ndim != 2:
        raise ValueError(f"frames must be equal-shaped 2-D arrays, got {frame_a.shape} and {frame_b.shape}")
    return flow_sequence(np.stack([frame_a, frame_b]), window, eps, sigma)[0]


def video_flow(frames: np.ndarray, **kw) -> np.ndarray:
    """Consecutive-pair flows of a ``(T, H, W, C)`` video, shape ``(T-1, H, W, 2)``."""
    return flow_sequence(grayscale(frames), **kw)


def chunk_flow_stack(chunk: np.ndarray) -> np.ndarray:
    """Motion-encoder input for one ``(c, H, W, C)`` chunk.

    ``c >= 2`` gives the ``(c-1, H, W, 2)`` consecutive flows; a single-frame chunk
    cannot form a pair and is passed through unchanged.
    """
    chunk = np.asarray(chunk)
    if chunk.shape[0] == 1:
        return chunk
    return video_flow(chunk)


def dataset_flows(frames_u8: np.ndarray) -> np.ndarray:
    """Flow cache for a whole uint8 dataset, ``(N, T-1, H, W, 2)`` float32."""
    out = np.empty((frames_u8.shape[0], frames_u8.shape[1] - 1) + frames_u8.shape[2:4] + (2,),
                   dtype=np.float32)
    for i in range(frames_u8.shape[0]):
        out[i] = video_flow(frames_u8[i].astype(np.float32) / np.float32(255.0))
    return out
