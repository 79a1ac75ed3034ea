"""Deterministic synthetic GEBC dataset.

Every video shows one subject going through a sequence of actions, one action
per clip between boundaries. Frame features are ``subject prototype + action
prototype + noise`` (one prototype table per frame block), and each clip's
detections contain one high-confidence row carrying a region prototype of the
subject among lower-confidence distractors. Captions are templates:
"the <subject>", "the <subject> is <action before>", "the <subject> is
<action after>".
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from gebc.datamodel import CaptionTriple, VideoRecord, dataclass_from_mapping, save_annotations
from gebc.errors import ConfigError
from gebc.features import FeatureFile, feature_path, save_feature_file

# multi-word subjects so that identical captions have 3- and 4-grams to match
SUBJECTS = (
    "man in a red shirt",
    "woman with a blue hat",
    "boy riding a green bike",
    "girl holding a yellow kite",
    "dog wearing a black collar",
    "chef in a white apron",
    "player in a striped jersey",
    "cat on a wooden table",
)
ACTIONS = (
    "walking slowly",
    "running fast",
    "jumping up and down",
    "sitting on the ground",
    "waving both arms",
    "standing still",
)


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_videos: int = 20
    min_boundaries: int = 2
    max_boundaries: int = 4
    num_subjects: int = 8
    num_actions: int = 6
    frame_dims: tuple[int, ...] = (24, 16)
    region_dim: int = 16
    noise: float = 0.1
    fps: float = 16.0
    min_duration: float = 8.0
    max_duration: float = 16.0
    min_clip_seconds: float = 1.0
    max_detections: int = 8

    def __post_init__(self):
        self.frame_dims = tuple(int(d) for d in self.frame_dims)
        if not 1 <= self.num_subjects <= len(SUBJECTS):
            raise ConfigError(f"num_subjects must be in [1, {len(SUBJECTS)}]")
        if not 2 <= self.num_actions <= len(ACTIONS):
            raise ConfigError(f"num_actions must be in [2, {len(ACTIONS)}]")
        if not 1 <= self.min_boundaries <= self.max_boundaries:
            raise ConfigError("need 1 <= min_boundaries <= max_boundaries")
        if self.num_videos < 1 or self.max_detections < 1 or self.region_dim < 1 or not self.frame_dims:
            raise ConfigError("num_videos, max_detections, region_dim and frame_dims must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0 < self.min_duration <= self.max_duration:
            raise ConfigError("need 0 < min_duration <= max_duration")
        if (self.max_boundaries + 1) * self.min_clip_seconds >= self.min_duration:
            raise ConfigError("min_clip_seconds too large for the shortest video")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticSpec:
        return dataclass_from_mapping(cls, data, "synthetic")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["frame_dims"] = list(self.frame_dims)
        return out


@dataclass
class Prototypes:
    subject: list[np.ndarray]  # per frame block, (num_subjects, d_k)
    action: list[np.ndarray]  # per frame block, (num_actions, d_k)
    region: np.ndarray  # (num_subjects, d_r)


@dataclass
class SyntheticVideo:
    record: VideoRecord
    features: FeatureFile
    subject: int
    actions: list[int]  # one per clip


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    prototypes: Prototypes
    videos: list[SyntheticVideo]

    @property
    def records(self) -> list[VideoRecord]:
        return [v.record for v in self.videos]


def frame_times(num_frames: int, duration: float) -> np.ndarray:
    if num_frames == 1:
        return np.zeros(1)
    return np.arange(num_frames) * duration / (num_frames - 1)


def _video(spec: SyntheticSpec, protos: Prototypes, rng: np.random.Generator, idx: int) -> SyntheticVideo:
    n = int(rng.integers(spec.min_boundaries, spec.max_boundaries + 1))
    duration = round(float(rng.uniform(spec.min_duration, spec.max_duration)), 3)
    num_frames = int(round(duration * spec.fps))
    slack = duration - (n + 1) * spec.min_clip_seconds
    lengths = spec.min_clip_seconds + slack * rng.dirichlet(np.ones(n + 1))
    boundaries = [round(float(t), 3) for t in np.cumsum(lengths)[:-1]]
    subject = int(rng.integers(spec.num_subjects))
    actions = [int(rng.integers(spec.num_actions))]
    for _ in range(n):
        nxt = int(rng.integers(spec.num_actions - 1))
        actions.append(nxt + (nxt >= actions[-1]))  # never repeat the previous action

    clip_of_frame = np.searchsorted(np.array(boundaries), frame_times(num_frames, duration), side="right")
    blocks = []
    for sub_tab, act_tab in zip(protos.subject, protos.action):
        clean = sub_tab[subject][None, :] + act_tab[np.array(actions)[clip_of_frame]]
        blocks.append((clean + spec.noise * rng.standard_normal(clean.shape)).astype(np.float32))

    regions, confs = [], []
    for _ in range(n + 1):
        count = int(rng.integers(1, spec.max_detections + 1))
        det = 0.5 * rng.standard_normal((count, spec.region_dim))
        conf = rng.uniform(0.05, 0.6, size=count)
        hit = int(rng.integers(count))
        det[hit] = protos.region[subject] + spec.noise * rng.standard_normal(spec.region_dim)
        conf[hit] = rng.uniform(0.8, 1.0)
        regions.append(det.astype(np.float32))
        confs.append(conf.astype(np.float32))

    name = SUBJECTS[subject]
    captions = [
        CaptionTriple(
            subject=f"the {name}",
            before=f"the {name} is {ACTIONS[actions[i]]}",
            after=f"the {name} is {ACTIONS[actions[i + 1]]}",
        )
        for i in range(n)
    ]
    record = VideoRecord(f"syn{idx:04d}", num_frames, duration, tuple(boundaries), tuple(captions))
    return SyntheticVideo(record, FeatureFile(blocks, False, regions, confs), subject, actions)


def build(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate the dataset in memory."""
    rng = np.random.default_rng(spec.seed)
    protos = Prototypes(
        subject=[rng.standard_normal((spec.num_subjects, d)) for d in spec.frame_dims],
        action=[rng.standard_normal((spec.num_actions, d)) for d in spec.frame_dims],
        region=rng.standard_normal((spec.num_subjects, spec.region_dim)),
    )
    videos = [_video(spec, protos, rng, i) for i in range(spec.num_videos)]
    return SyntheticDataset(spec, protos, videos)


def generate(spec: SyntheticSpec, out_dir: str | os.PathLike) -> SyntheticDataset:
    """Write ``annotations.json`` and ``features/<video_id>.npz`` under ``out_dir``."""
    ds = build(spec)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_annotations(ds.records, out / "annotations.json")
    for v in ds.videos:
        save_feature_file(feature_path(out, v.record.video_id), v.features)
    (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return ds
