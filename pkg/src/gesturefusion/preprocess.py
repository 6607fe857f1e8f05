"""Turn a :class:`SequenceRecord` into a fixed-timestep :class:`Clip`.

Order of operations in :func:`build_clip`: trim to the gesture boundaries,
then depth frames are scaled to [0, 1], cropped to the ROI and resized, and
skeletons are made palm-relative; finally both streams are truncated or
zero-padded to ``timestep`` frames with a shared validity mask.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset_io import GestureClass, SequenceRecord

DEFAULT_TIMESTEP = 32
DEFAULT_IMAGE_SIZE = 227
PALM_JOINT = 1
CACHE_VERSION = 1


class PreprocessError(ValueError):
    pass


@dataclass(eq=False)
class Clip:
    depth: np.ndarray | None  # (T, S, S, 1) float32 in [0, 1]
    skeleton: np.ndarray | None  # (T, 44) float32
    mask: np.ndarray  # (T,) bool, prefix of True
    label: GestureClass
    subject_id: int
    sequence_id: str = ""

    @property
    def timestep(self) -> int:
        return len(self.mask)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def normalize_depth_frame(frame: np.ndarray) -> np.ndarray:
    if frame.dtype != np.uint16:
        raise PreprocessError(f"depth frame must be uint16, got {frame.dtype}")
    return frame.astype(np.float64) / 65535.0


def crop_and_resize(frame: np.ndarray, roi, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Crop ``roi`` = (x, y, w, h) from a 2-D frame and resize bilinearly to size x size.

    Uses half-pixel centres with edge clamping, so a roi already of the target
    size comes back unchanged.
    """
    x, y, w, h = (int(v) for v in roi)
    if w < 1 or h < 1:
        raise PreprocessError(f"degenerate roi {tuple(roi)}")
    fh, fw = frame.shape[:2]
    if x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise PreprocessError(f"roi {tuple(roi)} outside frame {fw}x{fh}")
    patch = np.asarray(frame[y : y + h, x : x + w], dtype=np.float64)
    if (h, w) == (size, size):
        return patch.copy()
    t = torch.from_numpy(np.ascontiguousarray(patch))[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def trim_sequence(record: SequenceRecord) -> SequenceRecord:
    start, end = record.trim
    sl = slice(start, end + 1)
    return dataclasses.replace(
        record,
        depth_frames=record.depth_frames[sl],
        skeleton_2d=record.skeleton_2d[sl],
        roi=record.roi[sl],
        trim=(0, end - start),
    )


def normalize_skeleton(record: SequenceRecord, palm_joint: int = PALM_JOINT) -> np.ndarray:
    """Subtract the first frame's palm position; returns (N, 44) in x0, y0, x1, y1... order."""
    joints = np.asarray(record.skeleton_2d, dtype=np.float64)
    rel = joints - joints[0, palm_joint]
    return rel.reshape(len(joints), -1)


def resample_timesteps(stream, timestep: int = DEFAULT_TIMESTEP, mask=None):
    """Truncate to the first ``timestep`` elements or zero-pad up to it.

    ``mask``, when given, marks which leading elements of ``stream`` are real,
    which makes the operation idempotent on its own output.
    Returns ``(fixed_stream, mask)``.
    """
    arr = np.asarray(stream)
    n = len(arr) if mask is None else int(np.asarray(mask).sum())
    if n < 1:
        raise PreprocessError("cannot resample an empty stream")
    keep = min(n, timestep)
    out = np.zeros((timestep,) + arr.shape[1:], dtype=arr.dtype)
    out[:keep] = arr[:keep]
    out_mask = np.zeros(timestep, dtype=bool)
    out_mask[:keep] = True
    return out, out_mask


def build_clip(
    record: SequenceRecord,
    timestep: int = DEFAULT_TIMESTEP,
    image_size: int = DEFAULT_IMAGE_SIZE,
    modalities=("depth", "skeleton"),
) -> Clip:
    rec = trim_sequence(record)
    depth = skeleton = None
    mask = None
    if "depth" in modalities:
        # frames past the timestep are dropped anyway, so skip their resize
        n = min(rec.n_frames, timestep)
        frames = np.stack(
            [crop_and_resize(normalize_depth_frame(rec.depth_frames[i]), rec.roi[i], image_size) for i in range(n)]
        )
        depth, mask = resample_timesteps(frames.astype(np.float32)[..., None], timestep)
        np.clip(depth, 0.0, 1.0, out=depth)
    if "skeleton" in modalities:
        skeleton, mask = resample_timesteps(normalize_skeleton(rec).astype(np.float32), timestep)
    if mask is None:
        raise PreprocessError("no modality selected")
    return Clip(depth, skeleton, mask, record.label, record.subject_id, record.sequence_id)


# ---------------------------------------------------------------- clip cache


def cache_header(timestep: int, image_size: int) -> dict:
    return {
        "version": CACHE_VERSION,
        "timestep": timestep,
        "image_size": image_size,
        "truncation": "first",
        "palm_joint": PALM_JOINT,
        "depth_scale": 65535,
    }


def save_clip(clip: Clip, path, image_size: int) -> None:
    header = cache_header(clip.timestep, image_size)
    header.update(
        gesture_id=clip.label.gesture_id,
        finger_config=clip.label.finger_config,
        subject_id=clip.subject_id,
        sequence_id=clip.sequence_id,
    )
    arrays = {"mask": clip.mask, "header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    if clip.depth is not None:
        arrays["depth"] = clip.depth
    if clip.skeleton is not None:
        arrays["skeleton"] = clip.skeleton
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_clip(path, timestep: int, image_size: int) -> Clip:
    """Load a cached clip, rejecting it if it was built with other parameters."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        expected = cache_header(timestep, image_size)
        stale = {k: (header.get(k), v) for k, v in expected.items() if header.get(k) != v}
        if stale:
            raise PreprocessError(f"stale clip cache {path}: {stale}")
        return Clip(
            depth=data["depth"] if "depth" in data else None,
            skeleton=data["skeleton"] if "skeleton" in data else None,
            mask=data["mask"],
            label=GestureClass(header["gesture_id"], header["finger_config"]),
            subject_id=header["subject_id"],
            sequence_id=header["sequence_id"],
        )
