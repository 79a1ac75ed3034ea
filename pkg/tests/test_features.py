import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gebc.datamodel import ModelConfig
from gebc.errors import FeatureError
from gebc.features import (
    FeatureFile,
    clip_center_frames,
    concat_blocks,
    load_feature_file,
    prepare_frames,
    prepare_regions,
    sample_frame_indices,
    save_feature_file,
    select_regions,
    temporal_resize,
)

from conftest import record


class TestSampleFrameIndices:
    def test_examples(self):
        assert sample_frame_indices(32, 8) == [0, 8, 16, 24]
        assert sample_frame_indices(8, 8) == [0]

    @pytest.mark.parametrize("t,m", [(0, 8), (10, 0), (-1, 2)])
    def test_errors(self, t, m):
        with pytest.raises(ValueError):
            sample_frame_indices(t, m)

    @given(st.integers(1, 5000), st.integers(1, 64))
    def test_length_is_ceil(self, t, m):
        idx = sample_frame_indices(t, m)
        assert len(idx) == math.ceil(t / m)
        assert idx[0] == 0 and idx[-1] < t


class TestTemporalResize:
    def test_identity(self, rng):
        x = rng.standard_normal((7, 3)).astype(np.float32)
        out = temporal_resize(x, 7)
        assert np.array_equal(out, x)

    def test_two_rows_to_three(self):
        out = temporal_resize(np.array([[0.0], [1.0]]), 3)
        assert out.tolist() == [[0.0], [0.5], [1.0]]

    def test_constant(self):
        x = np.full((5, 2), 3.25)
        assert np.array_equal(temporal_resize(x, 11), np.full((11, 2), 3.25))

    def test_single_row_and_single_target(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert temporal_resize(x[:1], 4).tolist() == [[1.0, 2.0]] * 4
        assert temporal_resize(x, 1).tolist() == [[1.0, 2.0]]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            temporal_resize(np.zeros((0, 3)), 4)

    @settings(max_examples=100)
    @given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
           st.integers(1, 40))
    def test_endpoints_and_bounds(self, x, target):
        out = temporal_resize(x, target)
        assert out.shape == (target, x.shape[1])
        if x.shape[0] >= 2 and target >= 2:
            assert np.array_equal(out[0], x[0])
            assert np.array_equal(out[-1], x[-1])
        tol = 1e-9 * (1 + np.abs(x).max())
        assert np.all(out >= x.min(axis=0) - tol) and np.all(out <= x.max(axis=0) + tol)

    def test_matches_numpy_interp(self, rng):
        x = rng.standard_normal((13, 2))
        out = temporal_resize(x, 29)
        pos = np.linspace(0, 12, 29)
        for c in range(2):
            np.testing.assert_allclose(out[:, c], np.interp(pos, np.arange(13), x[:, c]), rtol=0, atol=1e-12)


class TestConcatBlocks:
    def test_dims(self):
        out = concat_blocks([np.zeros((100, 512)), np.ones((100, 768))])
        assert out.shape == (100, 1280)
        assert out[:, :512].sum() == 0 and out[:, 512:].min() == 1

    def test_single(self, rng):
        x = rng.standard_normal((4, 3))
        assert np.array_equal(concat_blocks([x]), x)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="temporal length"):
            concat_blocks([np.zeros((100, 2)), np.zeros((99, 2))])


class TestClipCenterFrames:
    def test_examples(self):
        assert clip_center_frames([4.0], 10.0, 11) == [2, 7]
        assert clip_center_frames([5.0], 10.0, 2) == [0, 1]

    def test_always_n_plus_one(self):
        assert len(clip_center_frames([1.0, 2.0, 3.0], 4.0, 40)) == 4


class TestSelectRegions:
    def test_pads(self, rng):
        det = rng.standard_normal((3, 6))
        feats, conf, mask = select_regions(det, [0.2, 0.9, 0.5], 50)
        assert feats.shape == (50, 6) and mask.sum() == 3
        assert np.all(feats[3:] == 0) and np.all(conf[3:] == 0)
        assert conf[:3].tolist() == pytest.approx([0.9, 0.5, 0.2])

    def test_truncates_to_top(self, rng):
        det = rng.standard_normal((60, 4))
        c = rng.uniform(0, 1, 60)
        feats, conf, mask = select_regions(det, c, 50)
        assert feats.shape == (50, 4) and mask.all()
        dropped = np.sort(c)[:10]
        assert conf.min() >= dropped.max()

    def test_tie_keeps_lower_index(self):
        det = np.arange(10, dtype=np.float32).reshape(10, 1)
        c = np.full(10, 0.1)
        c[4] = c[9] = 0.7
        feats, _, _ = select_regions(det, c, 1)
        assert feats[0, 0] == 4

    @pytest.mark.parametrize("bad", [[1.2], [-0.1], [float("nan")]])
    def test_bad_confidence(self, bad):
        with pytest.raises(ValueError):
            select_regions(np.zeros((1, 2)), bad, 3)

    @given(st.integers(0, 80), st.integers(1, 60), st.integers(0, 2**31))
    def test_shape_and_mask_count(self, count, n_o, seed):
        r = np.random.default_rng(seed)
        feats, conf, mask = select_regions(r.standard_normal((count, 3)), r.uniform(0, 1, count), n_o)
        assert feats.shape == (n_o, 3)
        assert mask.sum() == min(count, n_o)
        assert np.all(feats[~mask] == 0)
        valid = conf[mask]
        assert np.all(valid[:-1] >= valid[1:])


def _feature_file(rng, clips=3, pre_strided=False):
    return FeatureFile(
        frame_blocks=[rng.standard_normal((40, 5)).astype(np.float32), rng.standard_normal((40, 3)).astype(np.float32)],
        pre_strided=pre_strided,
        regions=[rng.standard_normal((k + 1, 4)).astype(np.float32) for k in range(clips)],
        region_conf=[rng.uniform(0, 1, k + 1).astype(np.float32) for k in range(clips)],
    )


class TestFeatureFiles:
    def test_round_trip(self, tmp_path, rng):
        ff = _feature_file(rng)
        save_feature_file(tmp_path / "v.npz", ff)
        back = load_feature_file(tmp_path / "v.npz")
        assert back.pre_strided is False
        for a, b in zip(ff.frame_blocks + ff.regions + ff.region_conf, back.frame_blocks + back.regions + back.region_conf):
            assert np.array_equal(a, b)

    def test_bytes_deterministic(self, tmp_path, rng):
        ff = _feature_file(rng)
        save_feature_file(tmp_path / "a.npz", ff)
        save_feature_file(tmp_path / "b.npz", ff)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_corrupt_named(self, tmp_path):
        p = tmp_path / "broken.npz"
        p.write_bytes(b"not a zip")
        with pytest.raises(FeatureError, match="broken.npz"):
            load_feature_file(p)

    def test_missing(self, tmp_path):
        with pytest.raises(FeatureError, match="missing"):
            load_feature_file(tmp_path / "nope.npz")

    def test_prepare_strides_and_resizes(self, rng):
        ff = _feature_file(rng)
        cfg = ModelConfig(frame_dims=(5, 3), strides=(8, 16), target_length=10, region_dim=4, max_regions=2)
        frames = prepare_frames(ff, cfg)
        assert frames.features.shape == (10, 8)
        np.testing.assert_array_equal(frames.features[0, :5], ff.frame_blocks[0][0])
        np.testing.assert_array_equal(frames.features[-1, :5], ff.frame_blocks[0][32])
        np.testing.assert_array_equal(frames.features[-1, 5:], ff.frame_blocks[1][32])

    def test_pre_strided_skips_sampling(self, rng):
        ff = _feature_file(rng, pre_strided=True)
        cfg = ModelConfig(frame_dims=(5, 3), strides=(8, 16), target_length=40, region_dim=4)
        assert np.array_equal(prepare_frames(ff, cfg).features[:, :5], ff.frame_blocks[0])

    def test_prepare_regions(self, rng):
        ff = _feature_file(rng)
        cfg = ModelConfig(frame_dims=(5, 3), region_dim=4, max_regions=2)
        reg = prepare_regions(ff, record("v", (2.0, 4.0), 8.0, 81), cfg)
        assert reg.features.shape == (3, 2, 4)
        assert reg.valid_mask.sum(axis=1).tolist() == [1, 2, 2]
        assert reg.source_frame.tolist() == [10, 30, 60]

    def test_dim_mismatch(self, rng):
        cfg = ModelConfig(frame_dims=(6, 3), region_dim=4)
        with pytest.raises(FeatureError, match="frame_block_0"):
            prepare_frames(_feature_file(rng), cfg)
