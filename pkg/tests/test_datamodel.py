import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gebc.datamodel import (
    CaptionKind,
    CaptionTriple,
    ModelConfig,
    VideoRecord,
    load_annotations,
    save_annotations,
    split_by_kind,
)
from gebc.errors import AnnotationError, ConfigError

from conftest import record


def _write(path, videos):
    path.write_text(json.dumps(videos), encoding="utf-8")
    return path


def _video(vid="a", boundaries=(2.0, 4.0), n_caps=None, duration=8.0):
    n = len(boundaries) if n_caps is None else n_caps
    return {
        "video_id": vid,
        "num_frames": 80,
        "duration": duration,
        "boundaries": list(boundaries),
        "captions": [{"subject": "s", "before": "b", "after": "a"}] * n,
    }


class TestLoadAnnotations:
    def test_minimal(self, tmp_path):
        recs = load_annotations(_write(tmp_path / "a.json", [_video()]))
        assert len(recs) == 1
        assert recs[0].num_boundaries == 2

    def test_non_monotone(self, tmp_path):
        with pytest.raises(AnnotationError, match="a: boundaries must be strictly increasing"):
            load_annotations(_write(tmp_path / "a.json", [_video(boundaries=(4.0, 2.0))]))

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(AnnotationError, match="2 caption triples for 1 boundaries"):
            load_annotations(_write(tmp_path / "a.json", [_video(boundaries=(2.0,), n_caps=2)]))

    @pytest.mark.parametrize("bounds", [(0.0, 4.0), (2.0, 8.0), (2.0, 9.0)])
    def test_boundary_on_or_outside_edge_rejected(self, tmp_path, bounds):
        with pytest.raises(AnnotationError, match="strictly inside"):
            load_annotations(_write(tmp_path / "a.json", [_video(boundaries=bounds)]))

    def test_sorted_by_video_id(self, tmp_path):
        recs = load_annotations(_write(tmp_path / "a.json", [_video("z"), _video("b"), _video("m")]))
        assert [r.video_id for r in recs] == ["b", "m", "z"]

    def test_parse_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('[\n{"video_id": "a",\n oops}\n]')
        with pytest.raises(AnnotationError, match="line 3"):
            load_annotations(p)

    def test_missing_field(self, tmp_path):
        v = _video()
        del v["duration"]
        with pytest.raises(AnnotationError, match="duration"):
            load_annotations(_write(tmp_path / "a.json", [v]))

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(AnnotationError, match="duplicate"):
            load_annotations(_write(tmp_path / "a.json", [_video("a"), _video("a")]))


@st.composite
def records(draw):
    n_videos = draw(st.integers(0, 4))
    out = []
    for i in range(n_videos):
        duration = draw(st.floats(1.0, 1e4, allow_nan=False))
        fracs = sorted(set(draw(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=5))))
        bounds = sorted({duration * f for f in fracs})
        bounds = [b for b in bounds if 0 < b < duration]
        if not bounds:
            continue
        text = st.text(min_size=1, max_size=12)
        caps = [CaptionTriple(draw(text), draw(text), draw(text)) for _ in bounds]
        out.append(VideoRecord(f"vid{i}", draw(st.integers(1, 10**6)), duration, tuple(bounds), tuple(caps)))
    return out


@settings(max_examples=50, deadline=None)
@given(records())
def test_round_trip_is_identity(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "ann.json"
    save_annotations(recs, path)
    assert load_annotations(path) == sorted(recs, key=lambda r: r.video_id)


class TestSplitByKind:
    def test_subject_pairs(self):
        pairs = split_by_kind([record("v", (2.0, 4.0))], CaptionKind.SUBJECT)
        assert [(p.video_id, p.boundary_index, p.target) for p in pairs] == [("v", 0, "s0"), ("v", 1, "s1")]

    def test_empty(self):
        assert split_by_kind([], "before") == []

    @pytest.mark.parametrize("kind", list(CaptionKind))
    def test_count_independent_of_kind(self, kind):
        recs = [record("a", (1.0,)), record("b", (1.0, 2.0)), record("c", (1.0, 2.0, 3.0))]
        pairs = split_by_kind(recs, kind)
        assert len(pairs) == 6
        assert all(p.target.startswith(kind.value[0]) for p in pairs)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.hidden_dim, cfg.target_length, cfg.max_regions, cfg.max_caption_len) == (512, 100, 50, 30)
        assert cfg.strides == (8, 16)
        assert (cfg.encoder_layers, cfg.frame_decoder_layers, cfg.region_decoder_layers) == (2, 2, 1)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(hidden_dim=10, attention_heads=4)

    def test_unknown_key_named_with_path(self):
        with pytest.raises(ConfigError, match="model.hidden_dmi"):
            ModelConfig.from_dict({"hidden_dmi": 3})

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match="model.hidden_dim"):
            ModelConfig.from_dict({"hidden_dim": "big"})

    def test_dict_round_trip(self):
        cfg = ModelConfig(hidden_dim=16, attention_heads=2, vocab_size=9)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
