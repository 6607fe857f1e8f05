"""DHG-14/28 dataset access: on-disk index, sequence loading, LOSO folds and
a synthetic generator that writes the same layout.

Layout (read and written)::

    root/informations_troncage_sequences.txt      G F S E start end
    root/gesture_G/finger_F/subject_S/essai_E/
        depth_0.png ... depth_{N-1}.png            16-bit grayscale
        skeleton_image.txt                         N lines x 44 numbers
        skeleton_world.txt                         optional, ignored
        general_informations.txt                   frame x y w h

Trim boundaries are inclusive on both ends.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

N_JOINTS = 22
SKELETON_WIDTH = 2 * N_JOINTS
N_GESTURES = 14
TRIM_TABLE = "informations_troncage_sequences.txt"
SKELETON_FILE = "skeleton_image.txt"
INFO_FILE = "general_informations.txt"

# (tag, full name, grain) in gesture_id order
GESTURES: tuple[tuple[str, str, str], ...] = (
    ("G", "Grab", "fine"),
    ("T", "Tap", "coarse"),
    ("E", "Expand", "fine"),
    ("P", "Pinch", "fine"),
    ("R-CW", "Rotation Clockwise", "fine"),
    ("R-CCW", "Rotation Counter-clockwise", "fine"),
    ("S-R", "Swipe Right", "coarse"),
    ("S-L", "Swipe Left", "coarse"),
    ("S-U", "Swipe Up", "coarse"),
    ("S-D", "Swipe Down", "coarse"),
    ("S-X", "Swipe X", "coarse"),
    ("S-V", "Swipe V", "coarse"),
    ("S-+", "Swipe +", "coarse"),
    ("Sh", "Shake", "coarse"),
)

CLASS_MODES = ("c14", "c28")


class DatasetError(ValueError):
    pass


def n_classes(class_mode: str) -> int:
    if class_mode not in CLASS_MODES:
        raise ValueError(f"unknown class_mode {class_mode!r}, expected one of {CLASS_MODES}")
    return 14 if class_mode == "c14" else 28


def parse_class_mode(value) -> str:
    """Accept 14, "14", "c14" (and the 28 variants)."""
    text = str(value).strip().lower().lstrip("c")
    if text not in ("14", "28"):
        raise ValueError(f"class mode must be 14 or 28, got {value!r}")
    return "c" + text


@dataclass(frozen=True, order=True)
class GestureClass:
    gesture_id: int
    finger_config: int = 1

    def __post_init__(self):
        if not 1 <= self.gesture_id <= N_GESTURES:
            raise ValueError(f"gesture_id out of range: {self.gesture_id}")
        if self.finger_config not in (1, 2):
            raise ValueError(f"finger_config out of range: {self.finger_config}")

    @property
    def tag(self) -> str:
        return GESTURES[self.gesture_id - 1][0]

    @property
    def name(self) -> str:
        return GESTURES[self.gesture_id - 1][1]

    @property
    def grain(self) -> str:
        return GESTURES[self.gesture_id - 1][2]

    def index(self, class_mode: str) -> int:
        """1-based class index in the given mode."""
        if n_classes(class_mode) == 14:
            return self.gesture_id
        return (self.gesture_id - 1) * 2 + self.finger_config

    @classmethod
    def from_index(cls, index: int, class_mode: str) -> "GestureClass":
        """Inverse of :meth:`index`. In 14-class mode the finger config is 1."""
        c = n_classes(class_mode)
        if not 1 <= index <= c:
            raise ValueError(f"class index {index} out of range 1..{c}")
        if c == 14:
            return cls(index, 1)
        return cls((index - 1) // 2 + 1, (index - 1) % 2 + 1)


def gesture_of_index(index: int, class_mode: str) -> int:
    return GestureClass.from_index(index, class_mode).gesture_id


def class_tags(class_mode: str) -> list[str]:
    """Axis labels for confusion matrices: 'G', 'T', ... or 'G-1', 'G-2', ..."""
    if n_classes(class_mode) == 14:
        return [g[0] for g in GESTURES]
    return [f"{g[0]}-{f}" for g in GESTURES for f in (1, 2)]


def class_grains(class_mode: str) -> list[str]:
    c = n_classes(class_mode)
    return [GestureClass.from_index(i, class_mode).grain for i in range(1, c + 1)]


@dataclass(eq=False)
class SequenceRecord:
    subject_id: int
    trial_id: int
    label: GestureClass
    depth_frames: np.ndarray  # (N, H, W) uint16
    skeleton_2d: np.ndarray  # (N, 22, 2) float, (x, y) pixels
    roi: np.ndarray  # (N, 4) int, x y w h
    trim: tuple[int, int]

    def __post_init__(self):
        n = len(self.depth_frames)
        if n < 1:
            raise DatasetError("sequence has no frames")
        if len(self.skeleton_2d) != n or len(self.roi) != n:
            raise DatasetError(
                f"stream length mismatch: depth={n} skeleton={len(self.skeleton_2d)} roi={len(self.roi)}"
            )
        start, end = self.trim
        if not 0 <= start <= end < n:
            raise DatasetError(f"invalid trim {self.trim} for {n} frames")
        h, w = self.depth_frames.shape[1:3]
        x, y, bw, bh = (np.asarray(self.roi).T if n else ([], [], [], []))
        if np.any(x < 0) or np.any(y < 0) or np.any(x + bw > w) or np.any(y + bh > h):
            raise DatasetError("roi box outside frame bounds")

    @property
    def n_frames(self) -> int:
        return len(self.depth_frames)

    @property
    def sequence_id(self) -> str:
        return sequence_id(self.label.gesture_id, self.label.finger_config, self.subject_id, self.trial_id)


def sequence_id(gesture: int, finger: int, subject: int, trial: int) -> str:
    return f"g{gesture:02d}_f{finger}_s{subject:02d}_e{trial}"


@dataclass(frozen=True)
class IndexEntry:
    gesture_id: int
    finger_config: int
    subject_id: int
    trial_id: int
    path: Path
    trim: tuple[int, int]
    n_frames: int

    @property
    def label(self) -> GestureClass:
        return GestureClass(self.gesture_id, self.finger_config)

    @property
    def sequence_id(self) -> str:
        return sequence_id(self.gesture_id, self.finger_config, self.subject_id, self.trial_id)


@dataclass
class DatasetIndex:
    records: list[IndexEntry]
    class_mode: str = "c14"
    root: Path | None = None
    subjects: list[int] = field(init=False)

    def __post_init__(self):
        n_classes(self.class_mode)
        self.subjects = sorted({r.subject_id for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def for_subjects(self, subjects) -> list[IndexEntry]:
        wanted = set(subjects)
        return [r for r in self.records if r.subject_id in wanted]


@dataclass(frozen=True)
class Fold:
    test_subject: int
    train_subjects: frozenset[int]


# ---------------------------------------------------------------- reading

_DIR_PATTERNS = (
    ("gesture", re.compile(r"^gesture_(\d+)$")),
    ("finger", re.compile(r"^finger_(\d+)$")),
    ("subject", re.compile(r"^subject_(\d+)$")),
    ("essai", re.compile(r"^essai_(\d+)$")),
)


def _numbered_dirs(parent: Path, pattern: re.Pattern) -> list[tuple[int, Path]]:
    out = []
    for child in parent.iterdir():
        m = pattern.match(child.name)
        if m and child.is_dir():
            out.append((int(m.group(1)), child))
    return sorted(out)


def read_trim_table(path: Path) -> dict[tuple[int, int, int, int], tuple[int, int]]:
    if not path.is_file():
        raise FileNotFoundError(f"missing trim table: {path}")
    table = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DatasetError(f"{path}:{lineno}: expected 6 integers, got {len(parts)}")
            try:
                g, f, s, e, start, end = (int(p) for p in parts)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            table[(g, f, s, e)] = (start, end)
    return table


def read_skeleton_file(path: Path) -> np.ndarray:
    """Parse N lines of 44 numbers into an (N, 22, 2) array."""
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != SKELETON_WIDTH:
                raise DatasetError(
                    f"{path}:{lineno}: expected {SKELETON_WIDTH} values, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DatasetError(f"{path}: no skeleton rows")
    return np.asarray(rows, dtype=np.float64).reshape(-1, N_JOINTS, 2)


def read_roi_file(path: Path, n_frames: int) -> np.ndarray:
    roi = np.zeros((n_frames, 4), dtype=np.int64)
    seen = np.zeros(n_frames, dtype=bool)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise DatasetError(f"{path}:{lineno}: expected 'frame x y w h'")
            i, x, y, w, h = (int(float(p)) for p in parts)
            if not 0 <= i < n_frames:
                raise DatasetError(f"{path}:{lineno}: frame index {i} out of range")
            roi[i] = (x, y, w, h)
            seen[i] = True
    if not seen.all():
        raise DatasetError(f"{path}: roi missing for frame {int(np.argmin(seen))}")
    return roi


def scan_dataset(root_path, class_mode: str = "c14", validate: bool = True) -> DatasetIndex:
    """Index every sequence directory under ``root_path`` without decoding images.

    With ``validate`` the skeleton files are parsed, which both checks them and
    gives the frame count of each sequence.
    """
    root = Path(root_path)
    class_mode = parse_class_mode(class_mode)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    gestures = _numbered_dirs(root, _DIR_PATTERNS[0][1])
    if not gestures:
        raise DatasetError(f"no gesture directories found in {root}")
    trims = read_trim_table(root / TRIM_TABLE)

    entries = []
    for g, gdir in gestures:
        for f, fdir in _numbered_dirs(gdir, _DIR_PATTERNS[1][1]):
            for s, sdir in _numbered_dirs(fdir, _DIR_PATTERNS[2][1]):
                for e, edir in _numbered_dirs(sdir, _DIR_PATTERNS[3][1]):
                    key = (g, f, s, e)
                    if key not in trims:
                        raise DatasetError(f"{root / TRIM_TABLE}: no entry for sequence {key}")
                    skel = edir / SKELETON_FILE
                    if not skel.is_file():
                        raise FileNotFoundError(f"missing skeleton file: {skel}")
                    n = len(read_skeleton_file(skel)) if validate else -1
                    entries.append(IndexEntry(g, f, s, e, edir, trims[key], n))
    entries.sort(key=lambda r: (r.gesture_id, r.finger_config, r.subject_id, r.trial_id))
    return DatasetIndex(entries, class_mode, root)


def _read_depth_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise DatasetError(f"{path}: expected a 16-bit depth image, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint16)


def _depth_paths(seq_dir: Path) -> list[Path]:
    numbered = []
    for p in seq_dir.glob("depth_*.png"):
        m = re.match(r"^depth_(\d+)\.png$", p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    numbered.sort()
    if [i for i, _ in numbered] != list(range(len(numbered))):
        raise DatasetError(f"{seq_dir}: depth frames are not numbered 0..N-1")
    return [p for _, p in numbered]


def load_sequence(entry: IndexEntry) -> SequenceRecord:
    skeleton = read_skeleton_file(entry.path / SKELETON_FILE)
    paths = _depth_paths(entry.path)
    if len(paths) != len(skeleton):
        raise DatasetError(
            f"{entry.path}: {len(paths)} depth frames but {len(skeleton)} skeleton rows"
        )
    depth = np.stack([_read_depth_png(p) for p in paths])
    info = entry.path / INFO_FILE
    if info.is_file():
        roi = read_roi_file(info, len(paths))
    else:
        h, w = depth.shape[1:]
        roi = np.tile(np.array([0, 0, w, h], dtype=np.int64), (len(paths), 1))
    return SequenceRecord(
        subject_id=entry.subject_id,
        trial_id=entry.trial_id,
        label=entry.label,
        depth_frames=depth,
        skeleton_2d=skeleton,
        roi=roi,
        trim=tuple(entry.trim),
    )


def split_loso(index) -> list[Fold]:
    """One fold per subject, ascending subject id."""
    subjects = sorted(set(index.subjects if isinstance(index, DatasetIndex) else index))
    if len(subjects) < 2:
        raise DatasetError("leave-one-subject-out needs at least 2 subjects")
    return [Fold(s, frozenset(subjects) - {s}) for s in subjects]


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 3
    n_trials: int = 2
    frame_len_range: tuple[int, int] = (20, 48)
    image_size: tuple[int, int] = (48, 64)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.frame_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad frame_len_range {self.frame_len_range}")
        if self.n_subjects < 1 or self.n_trials < 1:
            raise ValueError("n_subjects and n_trials must be >= 1")
        if min(self.image_size) < 16:
            raise ValueError("image_size must be at least 16x16")


# Rest pose of the 22 DHG joints relative to the palm, in units of hand size:
# wrist, palm, then thumb (base, 1st, 2nd, tip), index, middle, ring, pinky.
def _rest_pose() -> np.ndarray:
    pts = [(0.0, 0.9), (0.0, 0.0)]
    for k, angle in enumerate(np.deg2rad([-60.0, -20.0, 0.0, 20.0, 40.0])):
        direction = np.array([np.sin(angle), -np.cos(angle)])
        base = direction * 0.45
        for j in range(4):
            pts.append(tuple(base + direction * 0.28 * j * (0.8 if k == 0 else 1.0)))
    return np.asarray(pts)


_REST = _rest_pose()
_FINGER_JOINTS = [list(range(2 + 4 * k, 6 + 4 * k)) for k in range(5)]


def _class_motion(seed: int, gesture: int, finger: int):
    """Class-specific palm path direction/curvature and per-joint articulation drift."""
    rng = np.random.default_rng([seed, 7919, gesture, finger])
    angle = 2 * np.pi * (gesture - 1) / N_GESTURES
    direction = np.array([np.cos(angle), np.sin(angle)])
    wiggle = (gesture % 4) + 1
    drift = rng.uniform(-0.6, 0.6, size=(N_JOINTS, 2))
    pose = _REST.copy()
    if finger == 1:
        # one extended finger: curl the others toward the palm
        for k in (0, 2, 3, 4):
            pose[_FINGER_JOINTS[k]] *= 0.45
    else:
        pose[2:] *= 1.15
    return direction, wiggle, drift, pose


def synthesize_sequence(spec: SyntheticSpec, gesture: int, finger: int, subject: int, trial: int) -> SequenceRecord:
    """Ground-truth record for one synthetic sequence (deterministic)."""
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, gesture, finger, subject, trial])
    subj_rng = np.random.default_rng([spec.seed, 104729, subject])
    direction, wiggle, drift, pose = _class_motion(spec.seed, gesture, finger)

    lo, hi = spec.frame_len_range
    n = int(rng.integers(lo, hi + 1))
    margin = n // 6
    start = int(rng.integers(0, margin + 1))
    end = int(rng.integers(n - 1 - margin, n))
    start = min(start, end)

    hand = min(h, w) * 0.16 * subj_rng.uniform(0.9, 1.1)
    center = np.array([w / 2, h / 2]) + subj_rng.uniform(-0.04, 0.04, 2) * min(h, w)
    amplitude = min(h, w) * 0.22
    normal = np.array([-direction[1], direction[0]])

    frames = np.zeros((n, h, w), dtype=np.uint16)
    skeleton = np.zeros((n, N_JOINTS, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    span = max(end - start, 1)
    for i in range(n):
        tau = float(np.clip((i - start) / span, 0.0, 1.0))
        palm = (
            center
            + amplitude * (tau - 0.5) * direction
            + 0.25 * amplitude * np.sin(np.pi * wiggle * tau) * normal
        )
        joints = palm + hand * (pose + tau * drift) + rng.normal(0.0, 0.05, (N_JOINTS, 2))
        joints = np.clip(joints, 0.0, [w - 1, h - 1])
        skeleton[i] = np.round(joints * 16) / 16

        img = np.full((h, w), 2000.0) + rng.normal(0.0, 100.0, (h, w))
        rx = hand * (0.55 if finger == 1 else 0.75)
        ry = hand * 0.65
        blob = ((xx - palm[0]) / rx) ** 2 + ((yy - palm[1]) / ry) ** 2 <= 1.0
        img[blob] = 30000.0
        for jx, jy in skeleton[i][2:]:
            img[(xx - jx) ** 2 + (yy - jy) ** 2 <= 2.25] = 42000.0 + 1500.0 * finger
        frames[i] = np.clip(np.round(img), 0, 65535).astype(np.uint16)

    lo_xy = np.floor(skeleton.reshape(-1, 2).min(0) - hand * 0.6).astype(int)
    hi_xy = np.ceil(skeleton.reshape(-1, 2).max(0) + hand * 0.6).astype(int)
    x0, y0 = np.maximum(lo_xy, 0)
    x1, y1 = np.minimum(hi_xy, [w, h])
    roi = np.tile(np.array([x0, y0, x1 - x0, y1 - y0], dtype=np.int64), (n, 1))
    return SequenceRecord(subject, trial, GestureClass(gesture, finger), frames, skeleton, roi, (start, end))


def iter_synthetic(spec: SyntheticSpec) -> Iterator[SequenceRecord]:
    for g in range(1, N_GESTURES + 1):
        for f in (1, 2):
            for s in range(1, spec.n_subjects + 1):
                for e in range(1, spec.n_trials + 1):
                    yield synthesize_sequence(spec, g, f, s, e)


def write_sequence(record: SequenceRecord, root: Path) -> Path:
    g, f = record.label.gesture_id, record.label.finger_config
    seq_dir = root / f"gesture_{g}" / f"finger_{f}" / f"subject_{record.subject_id}" / f"essai_{record.trial_id}"
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(record.depth_frames):
        Image.fromarray(np.ascontiguousarray(frame, dtype=np.uint16)).save(seq_dir / f"depth_{i}.png")
    with (seq_dir / SKELETON_FILE).open("w") as fh:
        for row in record.skeleton_2d.reshape(len(record.skeleton_2d), -1):
            fh.write(" ".join(f"{v:.4f}" for v in row) + "\n")
    with (seq_dir / INFO_FILE).open("w") as fh:
        for i, (x, y, w, h) in enumerate(record.roi):
            fh.write(f"{i} {x} {y} {w} {h}\n")
    return seq_dir


def generate_synthetic(spec: SyntheticSpec, out_path) -> Path:
    """Write a synthetic dataset in the DHG layout and return its root."""
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {root}: {exc}") from exc
    if not root.is_dir():
        raise DatasetError(f"output path is not a directory: {root}")
    lines = []
    for record in iter_synthetic(spec):
        write_sequence(record, root)
        lines.append(
            f"{record.label.gesture_id} {record.label.finger_config} {record.subject_id} "
            f"{record.trial_id} {record.trim[0]} {record.trim[1]}\n"
        )
    (root / TRIM_TABLE).write_text("".join(lines))
    return root


def load_all(entries: Sequence[IndexEntry]) -> list[SequenceRecord]:
    return [load_sequence(e) for e in entries]
