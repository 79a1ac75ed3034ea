import dataclasses
import itertools

import numpy as np
import pytest

from gebc.datamodel import load_annotations
from gebc.errors import ConfigError
from gebc.features import feature_path, load_feature_file
from gebc.synthetic import ACTIONS, SUBJECTS, SyntheticSpec, build, frame_times, generate


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_byte_identical(tmp_path):
    spec = SyntheticSpec(seed=3, num_videos=4)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 4 + 2
    assert a == b


def test_different_seed_differs():
    a, b = build(SyntheticSpec(seed=0, num_videos=3)), build(SyntheticSpec(seed=1, num_videos=3))
    assert a.records != b.records


def test_supervision_count():
    ds = build(SyntheticSpec(seed=0, num_videos=20))
    n = sum(r.num_boundaries for r in ds.records)
    assert 40 <= n <= 80
    assert all(2 <= r.num_boundaries <= 4 for r in ds.records)


def test_noise_free_features_are_prototypes():
    ds = build(SyntheticSpec(seed=2, num_videos=5, noise=0.0))
    P = ds.prototypes
    for v in ds.videos:
        rec = v.record
        clip = np.searchsorted(np.array(rec.boundaries), frame_times(rec.num_frames, rec.duration), side="right")
        for k, block in enumerate(v.features.frame_blocks):
            expect = (P.subject[k][v.subject] + P.action[k][np.array(v.actions)[clip]]).astype(np.float32)
            np.testing.assert_array_equal(block, expect)
        for regs, conf in zip(v.features.regions, v.features.region_conf):
            top = int(np.argmax(conf))
            np.testing.assert_array_equal(regs[top], P.region[v.subject].astype(np.float32))


def test_captions_follow_templates():
    ds = build(SyntheticSpec(seed=0, num_videos=6))
    for v in ds.videos:
        name = SUBJECTS[v.subject]
        for i, c in enumerate(v.record.captions):
            assert c.subject == f"the {name}"
            assert c.before == f"the {name} is {ACTIONS[v.actions[i]]}"
            assert c.after == f"the {name} is {ACTIONS[v.actions[i + 1]]}"
            assert v.actions[i] != v.actions[i + 1]


def test_nearest_prototype_oracle_is_perfect():
    ds = build(SyntheticSpec(seed=0, num_videos=20, noise=0.0))
    P = ds.prototypes
    combos = list(itertools.product(range(ds.spec.num_subjects), range(ds.spec.num_actions)))
    table = np.stack([np.concatenate([P.subject[k][s] + P.action[k][a] for k in range(len(P.subject))]) for s, a in combos])
    hits = total = 0
    for v in ds.videos:
        rec = v.record
        feats = np.concatenate(v.features.frame_blocks, axis=1)
        clip = np.searchsorted(np.array(rec.boundaries), frame_times(rec.num_frames, rec.duration), side="right")
        for i in range(rec.num_boundaries):
            guesses = []
            for c in (i, i + 1):
                span_mean = feats[clip == c].mean(axis=0)
                guesses.append(combos[int(np.argmin(((table - span_mean) ** 2).sum(axis=1)))])
            (s_a, a), (s_b, b) = guesses
            hits += (s_a, s_b, a, b) == (v.subject, v.subject, v.actions[i], v.actions[i + 1])
            total += 1
    assert hits == total


def test_round_trip_through_loaders(tmp_path):
    ds = generate(SyntheticSpec(seed=5, num_videos=3), tmp_path)
    assert load_annotations(tmp_path / "annotations.json") == ds.records
    for v in ds.videos:
        ff = load_feature_file(feature_path(tmp_path, v.record.video_id))
        assert not ff.pre_strided
        for x, y in zip(ff.frame_blocks, v.features.frame_blocks):
            np.testing.assert_array_equal(x, y)
        for x, y in zip(ff.regions, v.features.regions):
            np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize(
    "bad",
    [{"num_subjects": 9}, {"num_actions": 1}, {"min_boundaries": 5}, {"noise": -1.0}, {"min_clip_seconds": 3.0}],
)
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        dataclasses.replace(SyntheticSpec(), **bad)


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(ConfigError, match="synthetic.colour"):
        SyntheticSpec.from_dict({"colour": 1})
