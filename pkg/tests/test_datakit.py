import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mtcvae.datakit import (
    ConfigurationError, IngestionError, MovingMNISTConfig, ShapesConfig, SplitError,
    VideoTensor, WindowError, chunk_video, generate_moving_mnist, generate_moving_shapes,
    load_dataset, read_idx, sample_chunk_window, save_dataset, split_dataset, unchunk, write_idx,
)


@pytest.fixture(scope="module")
def small_shapes():
    cfg = ShapesConfig(n_videos=4, T=16, H=32, W=32, C=1)
    return generate_moving_shapes(cfg, seed=1)


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = np.zeros((20, 28, 28), dtype=np.uint8)
    images[:, 8:20, 10:18] = rng.integers(128, 256, size=(20, 12, 8))
    labels = np.arange(20, dtype=np.uint8) % 10
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lbl.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lbl.idx"


def test_shapes_shape_contract(small_shapes):
    assert small_shapes.frames.shape == (4, 16, 32, 32, 1)
    for i in range(4):
        v = small_shapes.video(i)
        assert v.frames.shape == (16, 32, 32, 1)
        assert v.frames.min() >= 0.0 and v.frames.max() <= 1.0


def test_shapes_deterministic(small_shapes):
    again = generate_moving_shapes(ShapesConfig(n_videos=4, T=16, H=32, W=32, C=1), seed=1)
    assert np.array_equal(again.frames, small_shapes.frames)
    assert np.array_equal(again.labels, small_shapes.labels)
    other = generate_moving_shapes(ShapesConfig(n_videos=4, T=16, H=32, W=32, C=1), seed=2)
    assert not np.array_equal(other.frames, small_shapes.frames)


def test_shapes_labels_carry_both_supersets(small_shapes):
    tags = {f.name: f.tag for f in small_shapes.schema}
    assert tags["shape"] == "content" and tags["scale"] == "content"
    assert tags["direction"] == "motion" and tags["speed"] == "motion"
    # single-valued factors are not part of the schema
    assert "intensity" not in tags


def test_shapes_centroid_speed():
    # oracle: centroid of the rendered mask between bounces
    cfg = ShapesConfig(n_videos=1, T=12, H=64, W=64, shapes=("circle",), scales=(4.0,),
                       n_directions=8, speeds=(2.0,))
    from mtcvae.datakit import ShapesGenerator
    gen = ShapesGenerator(cfg)
    rng = np.random.default_rng(3)
    factors = {"shape": 0, "scale": 0, "intensity": 0, "direction": 0, "speed": 0}
    video = gen.render(factors, rng)[..., 0]
    xs = np.arange(64)
    cx = np.array([(f.sum(0) * xs).sum() / f.sum() for f in video])
    steps = np.diff(cx)
    free = steps[np.abs(steps) > 1.0]  # a bounce frame moves less than a full step
    assert len(free) >= 6
    assert np.all(np.abs(np.abs(free) - 2.0) < 0.1)
    assert np.allclose(np.diff([(f.sum(1) * xs).sum() / f.sum() for f in video]), 0, atol=1e-6)


def test_shapes_config_errors():
    with pytest.raises(ConfigurationError):
        generate_moving_shapes(ShapesConfig(n_videos=1, shapes=()), 0)
    with pytest.raises(ConfigurationError):
        generate_moving_shapes(ShapesConfig(n_videos=1, speeds=()), 0)
    with pytest.raises(ConfigurationError):
        generate_moving_shapes(ShapesConfig(n_videos=1, n_directions=0), 0)


def test_idx_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    assert np.array_equal(read_idx(tmp_path / "a.idx", 0x00000803), arr)


def test_idx_bad_magic_reports_offset(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 16)
    with pytest.raises(IngestionError, match="byte offset 0"):
        read_idx(tmp_path / "bad.idx", 0x00000803)


def test_idx_truncated_payload(tmp_path):
    arr = np.zeros((2, 4, 4), dtype=np.uint8)
    write_idx(tmp_path / "t.idx", arr)
    data = (tmp_path / "t.idx").read_bytes()
    (tmp_path / "t.idx").write_bytes(data[:-3])
    with pytest.raises(IngestionError, match="byte offset 16"):
        read_idx(tmp_path / "t.idx", 0x00000803)


def test_moving_mnist_defaults():
    cfg = MovingMNISTConfig()
    assert (cfg.n_videos, cfg.H, cfg.W, cfg.T, cfg.n_directions) == (10000, 64, 64, 32, 14)


def test_moving_mnist_generation(idx_files):
    cfg = MovingMNISTConfig(n_videos=6, T=8)
    ds = generate_moving_mnist(*idx_files, cfg, seed=0)
    assert ds.frames.shape == (6, 8, 64, 64, 1)
    assert set(np.unique(ds.frames)) <= {0, 255}
    names = ds.factor_names
    assert names == ["digit", "direction"]
    assert ds.labels[:, 1].max() < 14


def test_moving_mnist_static(idx_files):
    ds = generate_moving_mnist(*idx_files, MovingMNISTConfig(n_videos=3, T=6, speeds=(0.0,)), 5)
    for v in ds.frames:
        assert all(np.array_equal(v[0], f) for f in v)


def test_moving_mnist_round_trip(idx_files, tmp_path):
    ds = generate_moving_mnist(*idx_files, MovingMNISTConfig(n_videos=5, T=4), seed=2)
    _, manifest = save_dataset(ds, tmp_path / "out", "mm")
    back = load_dataset(manifest)
    assert np.array_equal(back.frames, ds.frames)
    assert np.array_equal(back.labels, ds.labels)
    assert back.ids == ds.ids and back.schema == ds.schema
    for i in range(len(ds)):
        assert np.array_equal(back.float_frames(i), ds.float_frames(i))


def test_moving_mnist_bad_header(idx_files, tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x01" + b"\x00\x00\x00\x05")
    with pytest.raises(IngestionError):
        generate_moving_mnist(bad, idx_files[1], MovingMNISTConfig(n_videos=1), 0)


def test_manifest_offsets(small_shapes, tmp_path):
    import json
    _, manifest = save_dataset(small_shapes, tmp_path, "s")
    m = json.loads(manifest.read_text())
    offs = [(v["offset"], v["offset"] + v["nbytes"]) for v in m["videos"]]
    assert all(a[1] <= b[0] for a, b in zip(offs, offs[1:]))
    assert (tmp_path / "s.frames").stat().st_size == offs[-1][1]


def test_chunk_video_padding():
    frames = np.random.default_rng(0).random((32, 4, 4, 1)).astype(np.float32)
    chunks, pad = chunk_video(frames, 5)
    assert chunks.shape == (7, 5, 4, 4, 1) and pad == 3
    for j in range(2, 5):
        assert np.array_equal(chunks[-1, j], frames[-1])
    chunks, pad = chunk_video(frames[:15], 5)
    assert chunks.shape[0] == 3 and pad == 0


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 40), data=st.data())
def test_chunk_round_trip(T, data):
    c = data.draw(st.integers(1, T))
    frames = np.random.default_rng(T).random((T, 3, 2, 1)).astype(np.float32)
    chunks, pad = chunk_video(VideoTensor(frames, "v"), c)
    assert chunks.shape[0] == -(-T // c)
    assert np.array_equal(unchunk(chunks, pad), frames)


def test_window_range_and_content():
    frames = np.arange(32, dtype=np.float32)[:, None, None, None] * np.ones((1, 2, 2, 1), np.float32)
    rng = np.random.default_rng(0)
    starts = set()
    for _ in range(500):
        w = sample_chunk_window(VideoTensor(frames, "v"), 5, 2, rng)
        assert 0 <= w.start <= 22
        assert w.chunks.shape == (2, 5, 2, 2, 1)
        assert np.array_equal(w.chunks.reshape(10, 2, 2, 1), frames[w.start:w.start + 10])
        starts.add(w.start)
    assert starts == set(range(23))


def test_window_forced_start_and_error():
    frames = np.zeros((10, 2, 2, 1), np.float32)
    rng = np.random.default_rng(0)
    assert all(sample_chunk_window(frames, 5, 2, rng).start == 0 for _ in range(10))
    with pytest.raises(WindowError):
        sample_chunk_window(frames[:9], 5, 2, rng)


def test_window_start_uniformity():
    rng = np.random.default_rng(11)
    frames = np.zeros((32, 1, 1, 1), np.float32)
    starts = [sample_chunk_window(frames, 5, 2, rng).start for _ in range(10_000)]
    counts = np.bincount(starts, minlength=23)
    assert (counts > 0).all()
    assert stats.chisquare(counts).pvalue > 0.01


def test_window_motion_from_cache(small_shapes):
    from mtcvae.flow import chunk_flow_stack, video_flow
    frames = small_shapes.float_frames(0)
    flows = video_flow(frames)
    w = sample_chunk_window(frames, 4, 2, np.random.default_rng(1), flows)
    for k in range(2):
        assert np.array_equal(w.motion[k], chunk_flow_stack(w.chunks[k]))


@pytest.fixture(scope="module")
def split_data():
    cfg = ShapesConfig(n_videos=100, T=4, H=16, W=16, scales=(2.0, 3.0))
    return generate_moving_shapes(cfg, seed=0)


@pytest.mark.parametrize("mode", ["soft", "appearance-holdout", "motion-holdout"])
@pytest.mark.parametrize("fold", range(5))
def test_split_partition(split_data, mode, fold):
    train, test = split_dataset(split_data, mode, fold, seed=4)
    assert not set(train) & set(test)
    assert set(train) | set(test) == set(split_data.ids)
    assert (train, test) == split_dataset(split_data, mode, fold, seed=4)


def test_soft_split_sizes(split_data):
    train, test = split_dataset(split_data, "soft", 0, seed=0)
    assert len(train) == 80 and len(test) == 20


def test_soft_split_folds_cover_everything(split_data):
    tests = [set(split_dataset(split_data, "soft", f, seed=0)[1]) for f in range(5)]
    assert set().union(*tests) == set(split_data.ids)


def test_appearance_holdout_disjoint_digits(idx_files):
    ds = generate_moving_mnist(*idx_files, MovingMNISTConfig(n_videos=60, T=2, H=32, W=32), 0)
    for fold in range(5):
        train, test = split_dataset(ds, "appearance-holdout", fold, seed=1)
        col = ds.factor_names.index("digit")
        tr = {ds.labels[ds.index_of(v), col] for v in train}
        te = {ds.labels[ds.index_of(v), col] for v in test}
        assert te and not tr & te


def test_motion_holdout_disjoint(split_data):
    train, test = split_dataset(split_data, "motion-holdout", 2, seed=1)
    col = split_data.factor_names.index("direction")
    tr = {split_data.labels[split_data.index_of(v), col] for v in train}
    te = {split_data.labels[split_data.index_of(v), col] for v in test}
    assert not tr & te


def test_holdout_impossible():
    cfg = ShapesConfig(n_videos=10, T=4, H=16, W=16, shapes=("circle",), scales=(3.0,))
    ds = generate_moving_shapes(cfg, 0)
    with pytest.raises(SplitError):
        split_dataset(ds, "appearance-holdout", 0, seed=0)
    with pytest.raises(SplitError):
        split_dataset(ds, "soft", 5, seed=0)
