import numpy as np
import pytest
import torch

from gebc.datamodel import CaptionTriple, ModelConfig, VideoRecord
from gebc.model import GEBCModel, VideoTensors
from gebc.synthetic import SyntheticSpec, generate


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        hidden_dim=8, attention_heads=2, sampling_points=2, ffn_dim=8, target_length=6,
        max_regions=3, max_caption_len=4, frame_dims=(5,), strides=(1,), region_dim=4, vocab_size=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


def randomize_(module: torch.nn.Module, seed: int = 1, scale: float = 0.3) -> None:
    """Perturb every parameter so sampling locations and ReLUs sit at generic points."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def tiny_video(dtype=torch.float64, boundaries=(3.0, 6.5), seed=2, video_id="v0") -> VideoTensors:
    g = torch.Generator().manual_seed(seed)
    clips = len(boundaries) + 1
    mask = torch.zeros(clips, 3, dtype=torch.bool)
    for c in range(clips):
        mask[c, : 1 + c % 3] = True
    return VideoTensors(
        video_id,
        torch.randn(6, 5, generator=g, dtype=dtype),
        torch.randn(clips, 3, 4, generator=g, dtype=dtype),
        mask,
        tuple(boundaries),
        10.0,
    )


def tiny_model(kind="subject", seed=0, dtype=torch.float64, **overrides) -> GEBCModel:
    torch.manual_seed(seed)
    model = GEBCModel(tiny_config(**overrides), kind).to(dtype)
    randomize_(model, seed + 1)
    return model


def record(video_id="v", boundaries=(2.0, 4.0), duration=8.0, num_frames=80):
    caps = tuple(CaptionTriple(f"s{i}", f"b{i}", f"a{i}") for i in range(len(boundaries)))
    return VideoRecord(video_id, num_frames, duration, tuple(boundaries), caps)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    generate(SyntheticSpec(seed=0, num_videos=6), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
