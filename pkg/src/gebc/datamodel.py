"""Typed records for videos, boundaries and captions, plus annotation file I/O.

Annotation files are UTF-8 JSON lists, one object per video::

    {"video_id": str, "num_frames": int, "duration": float,
     "boundaries": [float, ...],
     "captions": [{"subject": str, "before": str, "after": str}, ...]}

Boundary timestamps are in seconds.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from gebc.errors import AnnotationError, ConfigError


class CaptionKind(str, enum.Enum):
    SUBJECT = "subject"
    BEFORE = "before"
    AFTER = "after"

    @classmethod
    def parse(cls, value: str | CaptionKind) -> CaptionKind:
        if isinstance(value, CaptionKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown caption kind {value!r}; expected subject|before|after") from None


@dataclass(frozen=True)
class CaptionTriple:
    subject: str
    before: str
    after: str

    def get(self, kind: CaptionKind) -> str:
        return getattr(self, CaptionKind.parse(kind).value)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    num_frames: int
    duration: float
    boundaries: tuple[float, ...]
    captions: tuple[CaptionTriple, ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(float(t) for t in self.boundaries))
        object.__setattr__(self, "captions", tuple(self.captions))
        self.validate()

    @property
    def num_boundaries(self) -> int:
        return len(self.boundaries)

    def validate(self) -> None:
        vid = self.video_id
        if not isinstance(vid, str) or not vid:
            raise AnnotationError(f"video_id must be a non-empty string, got {vid!r}")
        if int(self.num_frames) < 1:
            raise AnnotationError(f"{vid}: num_frames must be >= 1, got {self.num_frames}")
        if not self.duration > 0:
            raise AnnotationError(f"{vid}: duration must be > 0, got {self.duration}")
        if len(self.boundaries) < 1:
            raise AnnotationError(f"{vid}: at least one boundary is required")
        for prev, cur in zip(self.boundaries, self.boundaries[1:]):
            if not cur > prev:
                raise AnnotationError(
                    f"{vid}: boundaries must be strictly increasing ({prev} then {cur})"
                )
        if not 0.0 < self.boundaries[0] or not self.boundaries[-1] < self.duration:
            raise AnnotationError(
                f"{vid}: boundaries must lie strictly inside (0, {self.duration})"
            )
        if len(self.captions) != len(self.boundaries):
            raise AnnotationError(
                f"{vid}: {len(self.captions)} caption triples for {len(self.boundaries)} boundaries"
            )

    def to_json(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "num_frames": int(self.num_frames),
            "duration": float(self.duration),
            "boundaries": list(self.boundaries),
            "captions": [dataclasses.asdict(c) for c in self.captions],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], where: str = "") -> VideoRecord:
        ctx = f"{where}: " if where else ""
        if not isinstance(obj, Mapping):
            raise AnnotationError(f"{ctx}expected an object, got {type(obj).__name__}")
        missing = {"video_id", "num_frames", "duration", "boundaries", "captions"} - set(obj)
        if missing:
            raise AnnotationError(f"{ctx}missing field(s) {sorted(missing)}")
        vid = obj["video_id"]
        try:
            captions = []
            for j, c in enumerate(obj["captions"]):
                if not isinstance(c, Mapping):
                    raise AnnotationError(f"{ctx}{vid}: captions[{j}] is not an object")
                try:
                    captions.append(CaptionTriple(str(c["subject"]), str(c["before"]), str(c["after"])))
                except KeyError as exc:
                    raise AnnotationError(f"{ctx}{vid}: captions[{j}] missing field {exc}") from None
            num_frames = obj["num_frames"]
            if isinstance(num_frames, bool) or int(num_frames) != num_frames:
                raise AnnotationError(f"{ctx}{vid}: num_frames must be an integer")
            return cls(
                video_id=vid,
                num_frames=int(num_frames),
                duration=float(obj["duration"]),
                boundaries=tuple(float(t) for t in obj["boundaries"]),
                captions=tuple(captions),
            )
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{ctx}{vid}: bad field value ({exc})") from None


def load_annotations(path: str | os.PathLike) -> list[VideoRecord]:
    """Read and validate an annotation file; records come back sorted by video_id."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AnnotationError(f"cannot read annotations {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(
            f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: top level must be a list of video objects")
    records = [VideoRecord.from_json(obj, where=f"{path}[{i}]") for i, obj in enumerate(data)]
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        dup = sorted({v for v in ids if ids.count(v) > 1})
        raise AnnotationError(f"{path}: duplicate video_id(s) {dup}")
    return sorted(records, key=lambda r: r.video_id)


def save_annotations(records: Iterable[VideoRecord], path: str | os.PathLike) -> None:
    payload = [r.to_json() for r in records]
    atomic_write_text(path, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class Supervision:
    video_id: str
    boundary_index: int
    target: str


def split_by_kind(records: Iterable[VideoRecord], kind: CaptionKind | str) -> list[Supervision]:
    kind = CaptionKind.parse(kind)
    return [
        Supervision(r.video_id, i, triple.get(kind))
        for r in records
        for i, triple in enumerate(r.captions)
    ]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class ModelConfig:
    hidden_dim: int = 512
    encoder_layers: int = 2
    frame_decoder_layers: int = 2
    region_decoder_layers: int = 1
    attention_heads: int = 8
    sampling_points: int = 4
    ffn_dim: int = 2048
    target_length: int = 100
    max_regions: int = 50
    max_caption_len: int = 30
    strides: tuple[int, ...] = (8, 16)
    frame_dims: tuple[int, ...] = (512, 768)
    region_dim: int = 2048
    vocab_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.frame_dims = tuple(int(s) for s in self.frame_dims)
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "seed" or value is None:
                continue
            values = value if isinstance(value, tuple) else (value,)
            if not values or any(isinstance(v, bool) or int(v) != v or v <= 0 for v in values):
                raise ConfigError(f"model.{f.name} must be positive integer(s), got {value!r}")
        if self.hidden_dim % self.attention_heads:
            raise ConfigError(
                f"model.hidden_dim ({self.hidden_dim}) must be divisible by "
                f"model.attention_heads ({self.attention_heads})"
            )
        if self.hidden_dim % 2:
            raise ConfigError("model.hidden_dim must be even")
        if len(self.strides) != len(self.frame_dims):
            raise ConfigError("model.strides and model.frame_dims must have one entry per frame block")

    @property
    def frame_input_dim(self) -> int:
        return sum(self.frame_dims)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["strides"] = list(self.strides)
        out["frame_dims"] = list(self.frame_dims)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], prefix: str = "model") -> ModelConfig:
        return dataclass_from_mapping(cls, data, prefix)


def dataclass_from_mapping(cls, data: Mapping[str, Any] | None, prefix: str):
    """Build ``cls`` from a mapping, rejecting unknown keys with their full key path."""
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(f"{prefix}.{k}" for k in unknown))
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key) if key in names else None
        if isinstance(default, tuple) and isinstance(value, Sequence) and not isinstance(value, str):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{prefix}.{key} must be a boolean, got {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{prefix}.{key} must be an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{prefix}.{key} must be a number, got {value!r}")
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None
