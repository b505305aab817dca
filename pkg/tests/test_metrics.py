
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from mtcvae.datakit import CONTENT, MOTION, ShapesConfig, ShapesGenerator, generate_moving_shapes
from mtcvae.metrics import (
    CodeTable, FactorVAEConfig, GeneratorSampler, TableSampler, align_length,
    downstream_linear_accuracy, extract_codes, factor_vae_score, fid, frechet_distance, mig,
    pooled_frame_features, read_features, sap, ssim_map, ssim_video, write_features, write_report,
)
from mtcvae.model import MTCVAE

from conftest import tiny_config


def factor_grid(sizes=(3, 8), repeats=100):
    grids = np.meshgrid(*[np.arange(n) for n in sizes], indexing="ij")
    labels = np.stack([g.ravel() for g in grids], axis=1)
    return np.tile(labels, (repeats, 1))


def oracle_table(noise=0.0, seed=0):
    labels = factor_grid()
    rng = np.random.default_rng(seed)
    codes = labels.astype(np.float64) + noise * rng.standard_normal(labels.shape)
    return CodeTable(codes, labels, ["shape", "direction"], [CONTENT, MOTION], [CONTENT, MOTION],
                     np.arange(len(labels)))


def random_table(seed=0):
    labels = factor_grid()
    codes = np.random.default_rng(seed).standard_normal((len(labels), 2))
    return CodeTable(codes, labels, ["shape", "direction"], [CONTENT, MOTION], [CONTENT, MOTION],
                     np.arange(len(labels)))


VOTES = FactorVAEConfig(train_votes=800, eval_votes=200)


def fvae(table, seed=0):
    return factor_vae_score(TableSampler(table), 2, VOTES, seed, table.codes)


# -- FactorVAE ---------------------------------------------------------------

def test_fvae_oracle_codes():
    assert fvae(oracle_table()) == 1.0


def test_fvae_independent_codes_near_chance():
    assert 0.4 <= fvae(random_table()) <= 0.6


def test_fvae_many_votes_chance():
    cfg = FactorVAEConfig(train_votes=1000, eval_votes=1000)
    t = random_table(3)
    assert abs(factor_vae_score(TableSampler(t), 2, cfg, 1, t.codes) - 0.5) <= 0.1


def test_fvae_permutation_and_rescale_invariance():
    t = oracle_table(noise=0.3)
    base = fvae(t)
    perm = CodeTable(t.codes[:, ::-1].copy(), t.labels, t.factor_names, t.factor_tags,
                     t.column_tags[::-1], t.video_index)
    # affine maps that keep every dim above the absolute prune threshold
    scaled = CodeTable(t.codes * np.array([7.0, 0.1]) + np.array([3.0, -2.0]), t.labels,
                       t.factor_names, t.factor_tags, t.column_tags, t.video_index)
    assert fvae(perm) == base
    assert fvae(scaled) == base


def test_fvae_prune_threshold_is_absolute():
    t = oracle_table(noise=0.3)
    shrunk = t.codes * np.array([1.0, 0.01])
    assert shrunk[:, 1].std() < VOTES.prune_threshold
    table = CodeTable(shrunk, t.labels, t.factor_names, t.factor_tags, t.column_tags, t.video_index)
    # the motion dim is pruned, so only content-fixed votes can land on the right dim
    assert fvae(table) <= 0.6


def test_fvae_collapsed_error():
    t = oracle_table()
    flat = CodeTable(np.zeros_like(t.codes), t.labels, t.factor_names, t.factor_tags,
                     t.column_tags, t.video_index)
    with pytest.raises(ValueError, match="collapsed"):
        fvae(flat)


# -- MIG and SAP -------------------------------------------------------------

def test_mig_oracle_and_random():
    assert mig(oracle_table().codes, oracle_table().labels) >= 0.95
    assert mig(random_table().codes, random_table().labels) <= 0.05


def test_mig_constant_codes_zero():
    t = oracle_table()
    assert mig(np.zeros_like(t.codes), t.labels) == 0.0


def test_mig_zero_entropy_factor_skipped():
    t = oracle_table()
    labels = np.column_stack([t.labels, np.zeros(len(t.labels), int)])
    with pytest.warns(UserWarning, match="zero entropy"):
        assert mig(t.codes, labels) >= 0.95


def test_sap_oracle_and_random():
    assert sap(oracle_table().codes, oracle_table().labels) >= 0.9
    assert sap(random_table().codes, random_table().labels) <= 0.05


def test_mig_sap_permutation_invariant():
    t = oracle_table(noise=0.4)
    perm = t.codes[:, ::-1]
    assert mig(perm, t.labels) == mig(t.codes, t.labels)
    assert sap(perm, t.labels) == pytest.approx(sap(t.codes, t.labels), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_mig_sap_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (120, 2))
    codes = rng.standard_normal((120, 3))
    codes[:, 0] += labels[:, 0] * rng.random()
    for score in (mig(codes, labels), sap(codes, labels)):
        assert 0.0 <= score <= 1.0


def test_two_factor_aggregation_is_relabel():
    labels = factor_grid((2, 3, 4, 2), repeats=2)
    codes = np.random.default_rng(0).standard_normal((len(labels), 3))
    t = CodeTable(codes, labels, ["a", "b", "c", "d"], [CONTENT, CONTENT, MOTION, MOTION],
                  [CONTENT, CONTENT, MOTION], np.arange(len(labels)))
    two = t.two_factor()
    assert two.labels.shape == (len(labels), 2)
    assert two.codes is t.codes
    assert len(np.unique(two.labels[:, 0])) == 6 and len(np.unique(two.labels[:, 1])) == 8
    # same superset value <=> same tuple of underlying factors
    for tag_cols, col in (([0, 1], 0), ([2, 3], 1)):
        keys = [tuple(r) for r in labels[:, tag_cols]]
        mapping = {}
        for k, v in zip(keys, two.labels[:, col]):
            assert mapping.setdefault(k, v) == v
        assert len(set(mapping.values())) == len(mapping)


# -- SSIM and FID ------------------------------------------------------------

def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.random((3, 16, 16, 2))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim_video(a, a) == 1.0
    assert ssim_video(a, b) == ssim_video(b, a)
    with pytest.raises(ValueError):
        ssim_video(a, b[:2])


def test_ssim_complement_nonpositive():
    x = (np.random.default_rng(1).random((2, 24, 24, 1)) > 0.5).astype(np.float64)
    assert ssim_video(x, 1 - x) <= 0


def test_ssim_matches_skimage_map():
    rng = np.random.default_rng(2)
    a = rng.random((32, 32))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, data_range=1.0,
                                   use_sample_covariance=False, full=True)
    assert np.allclose(ssim_map(a, b), ref, atol=1e-10)


def test_align_length():
    v = np.arange(3)[:, None, None, None] * np.ones((3, 2, 2, 1))
    assert align_length(v, 2).shape[0] == 2
    padded = align_length(v, 5)
    assert padded.shape[0] == 5 and np.array_equal(padded[4], v[2])


def test_fid_identities():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 4))
    y = rng.standard_normal((400, 4)) + 0.5
    assert abs(fid(x, x)) <= 1e-6
    assert abs(fid(x, y) - fid(y, x)) <= 1e-6
    assert fid(x, y) > 0
    assert frechet_distance(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        fid(x, y[:, :3])


def test_fid_covariance_term():
    # N(0, 1) vs N(0, 4): (1 - 2)^2 = 1
    assert frechet_distance(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0, abs=1e-12)


def test_feature_file_round_trip(tmp_path):
    feats = pooled_frame_features([np.random.default_rng(0).random((3, 16, 16, 1))])
    assert feats.shape == (3, 64)
    write_features(tmp_path / "f.bin", feats)
    back = read_features(tmp_path / "f.bin")
    assert np.array_equal(back, feats.astype(np.float32))
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "f.bin").read_bytes()[4:])
    with pytest.raises(ValueError):
        read_features(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes((tmp_path / "f.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_features(tmp_path / "short.bin")


# -- downstream --------------------------------------------------------------

def test_downstream_separable():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.standard_normal((400, 3))
    x[:, 0] += np.where(y == 1, 4.0, -4.0)
    assert downstream_linear_accuracy(x, y) >= 0.95


def test_downstream_multiclass_above_chance():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 4, 800)
    centres = rng.standard_normal((4, 5)) * 4
    x = centres[y] + rng.standard_normal((800, 5))
    assert downstream_linear_accuracy(x, y) >= 0.9


def test_downstream_single_class():
    with pytest.warns(UserWarning):
        assert downstream_linear_accuracy(np.zeros((10, 2)), np.ones(10)) == 1.0


# -- model-backed ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_setup():
    cfg = ShapesConfig(n_videos=20, T=14, H=8, W=8, scales=(1.5, 2.5))
    torch.manual_seed(0)
    model = MTCVAE(tiny_config(height=8, width=8)).eval()
    return generate_moving_shapes(cfg, seed=0), model, cfg


def test_extract_codes_rows(small_setup):
    data, model, _ = small_setup
    table = extract_codes(model, data, data.ids, 2)
    assert table.codes.shape == (140, 5)
    assert np.isfinite(table.codes).all()
    again = extract_codes(model, data, data.ids, 2)
    assert np.array_equal(table.codes, again.codes)
    assert table.space(CONTENT).shape == (140, 3) and table.space(MOTION).shape == (140, 2)
    with pytest.raises(ValueError):
        extract_codes(model, data, [], 2)


def test_generator_sampler(small_setup):
    _, model, cfg = small_setup
    sampler = GeneratorSampler(model, ShapesGenerator(cfg), 2)
    codes = sampler(0, 6, np.random.default_rng(0))
    assert codes.shape == (6, 5) and np.isfinite(codes).all()
    free = sampler(None, 6, np.random.default_rng(0))
    assert free.shape == (6, 5)


def test_report(tmp_path):
    import json
    write_report(tmp_path / "r.json", [{"metric": "mig", "split": "soft", "value": 0.1}])
    assert json.loads((tmp_path / "r.json").read_text())[0]["metric"] == "mig"
