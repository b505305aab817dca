import numpy as np
import pytest
import torch
from PIL import Image

from mtcvae.datakit import ChunkWindow, chunk_video
from mtcvae.inference import (
    chunk_latents, decode_chunks, reconstruct_video, reenact, save_grid_png, traverse_between,
    traverse_unit,
)
from mtcvae.losses import NoiseBank, extended_reconstruction
from mtcvae.model import chunk_mean, decode, encode_content, encode_motion

from conftest import random_video


def test_reconstruction_is_chunkwise(tiny_model):
    video = random_video(8)
    out = reconstruct_video(tiny_model, video, 2)
    assert out.shape == video.shape
    pieces = []
    with torch.no_grad():
        for k in range(4):
            chunk = video[2 * k:2 * k + 2]
            z = encode_content(tiny_model, chunk).mean
            w = encode_motion(tiny_model, chunk).mean
            pieces.append(chunk_mean(decode(tiny_model, w, z)).numpy())
    assert np.array_equal(out, np.concatenate(pieces))


def test_reconstruction_trims_padding(tiny_model):
    video = random_video(5)
    out = reconstruct_video(tiny_model, video, 2)
    assert out.shape == (5, 4, 4, 1)
    assert np.isfinite(out).all() and ((out > 0) & (out < 1)).all()


def test_self_reenactment_matches_first_row_of_grid(tiny_model):
    video = random_video(6, seed=3)
    chunks, _ = chunk_video(video, 2)
    with torch.no_grad():
        _, rho = extended_reconstruction(tiny_model, ChunkWindow(chunks, 0, "s"),
                                         NoiseBank.zeros(1, 3, 3, 2))
    expected = chunk_mean(rho[0]).numpy().reshape(video.shape)
    got = reenact(tiny_model, video, video, 2)
    assert np.array_equal(got, expected)


def test_reenact_reads_only_first_source_chunk(tiny_model):
    source = random_video(6, seed=1)
    poisoned = source.copy()
    poisoned[2:] = np.nan
    driving = random_video(7, seed=2)
    a = reenact(tiny_model, source, driving, 2)
    b = reenact(tiny_model, poisoned, driving, 2)
    assert a.shape == driving.shape
    assert np.isfinite(b).all() and np.array_equal(a, b)


def test_reenact_motion_from_driving(tiny_model):
    source = random_video(4, seed=1)
    driving = random_video(6, seed=5)
    z_src, _, _ = chunk_latents(tiny_model, source[:2], 2)
    _, w_drv, _ = chunk_latents(tiny_model, driving, 2)
    expected = decode_chunks(tiny_model, w_drv, z_src.expand(3, -1), 6)
    assert np.array_equal(reenact(tiny_model, source, driving, 2), expected)


@pytest.mark.parametrize("subspace", ["full", "content", "motion"])
def test_traversal_endpoints(tiny_model, subspace):
    a, b = random_video(4, seed=1), random_video(4, seed=2)
    frames = traverse_between(tiny_model, a, b, subspace, 2, 2)
    assert len(frames) == 3
    assert np.array_equal(frames[0], reconstruct_video(tiny_model, a, 2))
    za, wa, _ = chunk_latents(tiny_model, a, 2)
    zb, wb, _ = chunk_latents(tiny_model, b, 2)
    z_end = za if subspace == "motion" else zb
    w_end = wa if subspace == "content" else wb
    assert np.array_equal(frames[2], decode_chunks(tiny_model, w_end, z_end, 4))
    z_mid = za if subspace == "motion" else 0.5 * za + 0.5 * zb
    w_mid = wa if subspace == "content" else 0.5 * wa + 0.5 * wb
    assert np.allclose(frames[1], decode_chunks(tiny_model, w_mid, z_mid, 4), atol=1e-6)


def test_full_traversal_end_is_reconstruction(tiny_model):
    a, b = random_video(4, seed=1), random_video(4, seed=2)
    frames = traverse_between(tiny_model, a, b, "full", 4, 2)
    assert np.array_equal(frames[-1], reconstruct_video(tiny_model, b, 2))


def test_traversal_unequal_lengths(tiny_model):
    frames = traverse_between(tiny_model, random_video(4), random_video(8, seed=1), "full", 1, 2)
    assert all(f.shape[0] == 8 for f in frames)
    with pytest.raises(ValueError):
        traverse_between(tiny_model, random_video(4), random_video(4), "both", 1, 2)


def test_unit_traversal(tiny_model):
    video = random_video(4)
    sweep = traverse_unit(tiny_model, video, 1, "content", [-3.0, 0.0, 3.0], 2)
    assert len(sweep) == 3 and all(s.shape == video.shape for s in sweep)
    z, w, _ = chunk_latents(tiny_model, video, 2)
    z[:, 1] = 3.0
    assert np.array_equal(sweep[2], decode_chunks(tiny_model, w, z, 4))
    motion = traverse_unit(tiny_model, video, 0, "motion", [0.0, 2.0], 2)
    assert not np.array_equal(motion[0], motion[1])
    with pytest.raises(IndexError):
        traverse_unit(tiny_model, video, 3, "content", [0.0], 2)
    with pytest.raises(IndexError):
        traverse_unit(tiny_model, video, 2, "motion", [0.0], 2)


def test_grid_png(tmp_path, tiny_model):
    rows = [reconstruct_video(tiny_model, random_video(4, seed=s), 2) for s in range(3)]
    path = tmp_path / "grid.png"
    save_grid_png(rows, path)
    img = np.asarray(Image.open(path))
    assert img.shape == (3 * 5 + 1, 4 * 5 + 1)
    assert img[0].min() == 255
