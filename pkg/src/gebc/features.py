"""Frame and region feature preparation.

Turns per-video feature files into fixed-shape model inputs: stride sampling,
temporal resizing to a fixed length, block concatenation and per-clip region
selection with zero padding. The on-disk layout is described in
``docs/feature_format.md``.
"""

from __future__ import annotations

import io
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from gebc.datamodel import ModelConfig, VideoRecord, atomic_write_bytes
from gebc.errors import FeatureError

FEATURE_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def sample_frame_indices(num_frames: int, stride: int) -> list[int]:
    """Indices 0, m, 2m, ... strictly below ``num_frames``."""
    if num_frames <= 0:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if stride <= 0:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(range(0, num_frames, stride))


def temporal_resize(block: np.ndarray, target: int) -> np.ndarray:
    """Linearly resample ``block`` (S x d) along time to ``target`` rows.

    Output row j reads source position j * (S - 1) / (target - 1), so the first
    and last rows are copied exactly.
    """
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[0] < 1:
        raise ValueError(f"expected a non-empty (S x d) block, got shape {block.shape}")
    if target < 1:
        raise ValueError(f"target length must be >= 1, got {target}")
    src = block.shape[0]
    if src == target:
        return block.copy()
    if src == 1 or target == 1:
        return np.repeat(block[:1], target, axis=0)
    pos = np.arange(target, dtype=np.float64) * (src - 1) / (target - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 2)
    frac = (pos - lo)[:, None]
    out = (1.0 - frac) * block[lo] + frac * block[lo + 1]
    return out.astype(block.dtype, copy=False)


def concat_blocks(blocks: Sequence[np.ndarray]) -> np.ndarray:
    if not blocks:
        raise ValueError("no feature blocks to concatenate")
    lengths = {b.shape[0] for b in blocks}
    if len(lengths) != 1:
        raise ValueError(f"feature blocks disagree on temporal length: {[b.shape[0] for b in blocks]}")
    return np.concatenate(blocks, axis=1)


def clip_spans(boundaries: Sequence[float], duration: float) -> list[tuple[float, float]]:
    """The N + 1 clips (0, t1), (t1, t2), ..., (tN, duration)."""
    edges = [0.0, *map(float, boundaries), float(duration)]
    return list(zip(edges[:-1], edges[1:]))


def clip_center_frames(boundaries: Sequence[float], duration: float, num_frames: int) -> list[int]:
    out = []
    for start, end in clip_spans(boundaries, duration):
        center = 0.5 * (start + end)
        # round half to even, like Python's round
        idx = int(round(center / duration * (num_frames - 1)))
        out.append(min(max(idx, 0), num_frames - 1))
    return out


@dataclass
class FrameFeatures:
    raw_blocks: list[np.ndarray]
    features: np.ndarray  # (L, d_in)

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class RegionFeatures:
    features: np.ndarray  # (clips, N_o, d_r)
    confidence: np.ndarray  # (clips, N_o)
    valid_mask: np.ndarray  # (clips, N_o) bool
    source_frame: np.ndarray  # (clips,)


def select_regions(
    detections: np.ndarray, confidences: np.ndarray, max_regions: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the ``max_regions`` most confident detections, zero-padding the rest.

    Returns ``(features, confidence, valid_mask)`` with exactly ``max_regions``
    rows. Equal confidences keep the earlier detection first.
    """
    detections = np.asarray(detections, dtype=np.float32)
    confidences = np.asarray(confidences, dtype=np.float32).reshape(-1)
    if detections.ndim != 2:
        raise ValueError(f"detections must be (count x d_r), got shape {detections.shape}")
    if detections.shape[0] != confidences.shape[0]:
        raise ValueError("one confidence per detection is required")
    if confidences.size and (
        not np.all(np.isfinite(confidences)) or confidences.min() < 0 or confidences.max() > 1
    ):
        raise ValueError("confidences must lie in [0, 1]")
    order = np.argsort(-confidences, kind="stable")[:max_regions]
    keep = len(order)
    feats = np.zeros((max_regions, detections.shape[1]), dtype=np.float32)
    conf = np.zeros(max_regions, dtype=np.float32)
    mask = np.zeros(max_regions, dtype=bool)
    feats[:keep] = detections[order]
    conf[:keep] = confidences[order]
    mask[:keep] = True
    return feats, conf, mask


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureFile:
    frame_blocks: list[np.ndarray]
    pre_strided: bool
    regions: list[np.ndarray]  # per clip, (count_j, d_r)
    region_conf: list[np.ndarray]  # per clip, (count_j,)


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)
    return buf.getvalue()


def save_feature_file(path: str | os.PathLike, ff: FeatureFile) -> None:
    if len(ff.regions) != len(ff.region_conf):
        raise FeatureError("regions and region_conf need one entry per clip")
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array(FEATURE_FORMAT_VERSION, dtype=np.int64),
        "pre_strided": np.array(bool(ff.pre_strided)),
        "num_clips": np.array(len(ff.regions), dtype=np.int64),
    }
    for k, block in enumerate(ff.frame_blocks):
        arrays[f"frame_block_{k}"] = np.asarray(block, dtype=np.float32)
    for j, (reg, conf) in enumerate(zip(ff.regions, ff.region_conf)):
        arrays[f"regions_{j:04d}"] = np.asarray(reg, dtype=np.float32)
        arrays[f"region_conf_{j:04d}"] = np.asarray(conf, dtype=np.float32)
    atomic_write_bytes(path, _npz_bytes(arrays))


def load_feature_file(path: str | os.PathLike) -> FeatureFile:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise FeatureError(f"missing feature file {path}") from None
    except Exception as exc:  # zipfile/numpy raise a zoo of types on corrupt input
        raise FeatureError(f"corrupt feature file {path}: {exc}") from None
    try:
        version = int(arrays["format_version"].item())
        if version != FEATURE_FORMAT_VERSION:
            raise FeatureError(f"{path}: unsupported feature format version {version}")
        num_clips = int(arrays["num_clips"].item())
        blocks = []
        while f"frame_block_{len(blocks)}" in arrays:
            blocks.append(arrays[f"frame_block_{len(blocks)}"])
        regions = [arrays[f"regions_{j:04d}"] for j in range(num_clips)]
        confs = [arrays[f"region_conf_{j:04d}"] for j in range(num_clips)]
        pre_strided = bool(arrays["pre_strided"].item())
    except KeyError as exc:
        raise FeatureError(f"{path}: missing array {exc}") from None
    if not blocks:
        raise FeatureError(f"{path}: no frame_block_<k> arrays")
    for k, b in enumerate(blocks):
        if b.ndim != 2 or b.shape[0] < 1:
            raise FeatureError(f"{path}: frame_block_{k} must be a non-empty 2-D array")
        if not np.all(np.isfinite(b)):
            raise FeatureError(f"{path}: frame_block_{k} contains NaN/Inf")
    return FeatureFile(blocks, pre_strided, regions, confs)


def prepare_frames(ff: FeatureFile, config: ModelConfig, where: str = "") -> FrameFeatures:
    if len(ff.frame_blocks) != len(config.frame_dims):
        raise FeatureError(
            f"{where}: {len(ff.frame_blocks)} frame blocks, config expects {len(config.frame_dims)}"
        )
    resized = []
    for k, (block, stride, dim) in enumerate(zip(ff.frame_blocks, config.strides, config.frame_dims)):
        if block.shape[1] != dim:
            raise FeatureError(f"{where}: frame_block_{k} has dim {block.shape[1]}, config expects {dim}")
        if not ff.pre_strided:
            block = block[sample_frame_indices(block.shape[0], stride)]
        resized.append(temporal_resize(block.astype(np.float32), config.target_length))
    feats = concat_blocks(resized)
    return FrameFeatures(raw_blocks=list(ff.frame_blocks), features=feats)


def prepare_regions(ff: FeatureFile, record: VideoRecord, config: ModelConfig, where: str = "") -> RegionFeatures:
    clips = record.num_boundaries + 1
    if len(ff.regions) != clips:
        raise FeatureError(f"{where}: {len(ff.regions)} region clips, video has {clips} clips")
    feats = np.zeros((clips, config.max_regions, config.region_dim), dtype=np.float32)
    conf = np.zeros((clips, config.max_regions), dtype=np.float32)
    mask = np.zeros((clips, config.max_regions), dtype=bool)
    for j, (det, c) in enumerate(zip(ff.regions, ff.region_conf)):
        det = det.reshape(-1, config.region_dim) if det.size == 0 else det
        if det.ndim != 2 or det.shape[1] != config.region_dim:
            raise FeatureError(f"{where}: regions_{j:04d} must be (count x {config.region_dim})")
        try:
            feats[j], conf[j], mask[j] = select_regions(det, c, config.max_regions)
        except ValueError as exc:
            raise FeatureError(f"{where}: clip {j}: {exc}") from None
    frames = np.array(clip_center_frames(record.boundaries, record.duration, record.num_frames))
    return RegionFeatures(feats, conf, mask, frames)


@dataclass
class PreparedVideo:
    record: VideoRecord
    frames: FrameFeatures
    regions: RegionFeatures


def feature_path(data_dir: str | os.PathLike, video_id: str) -> Path:
    return Path(data_dir) / "features" / f"{video_id}.npz"


def prepare_video(record: VideoRecord, path: str | os.PathLike, config: ModelConfig) -> PreparedVideo:
    ff = load_feature_file(path)
    where = str(path)
    return PreparedVideo(record, prepare_frames(ff, config, where), prepare_regions(ff, record, config, where))


def num_workers() -> int:
    """Worker cap from ``GEBC_NUM_WORKERS`` (default: CPU count)."""
    env = os.environ.get("GEBC_NUM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def prepare_dataset(
    records: Sequence[VideoRecord], data_dir: str | os.PathLike, config: ModelConfig
) -> list[PreparedVideo]:
    paths = [feature_path(data_dir, r.video_id) for r in records]
    workers = min(num_workers(), max(1, len(records)))
    if workers == 1:
        return [prepare_video(r, p, config) for r, p in zip(records, paths)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(prepare_video, records, paths, [config] * len(records)))
