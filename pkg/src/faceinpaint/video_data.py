"""Frame ingestion, occlusion masks, landmark heatmaps and synthetic clips.

All frame data lives as ``T x H x W x 3`` float32 arrays in ``[-1, 1]``.
Masks are ``T x H x W`` uint8 arrays with ``1 = occluded``.

On-disk layout written by :func:`make_synthetic_dataset`::

    root/
      manifest.json
      videos/<video_id>/00000.png ...   8-bit RGB, zero-padded frame index
      landmarks/<video_id>.txt           one "t l row col" line per point
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DEFAULT_SIZE = (128, 128)
DEFAULT_CLIP_LENGTH = 32
DEFAULT_SIZE_RANGE = (0.25, 0.5)
DEFAULT_SIGMA = 1.5
MASK_FILL = 0.0
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class IngestionError(IOError):
    """A frame, mask or landmark file could not be read."""


class ParameterError(ValueError):
    """Invalid generator parameters."""


class NoReferenceError(RuntimeError):
    """No occlusion-free frame exists to serve as the reference."""


@dataclass
class FrameSequence:
    frames: np.ndarray
    frame_rate: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"expected T x H x W x 3 frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frames.min() < -1.0 or self.frames.max() > 1.0:
            raise ValueError("frame values must lie in [-1, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return t, h, w

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class BBox:
    top: int
    left: int
    height: int
    width: int

    def validate(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if self.height < 1 or self.width < 1:
            raise ParameterError(f"degenerate box {self}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise ParameterError(f"box {self} exceeds frame {shape}")

    @property
    def center(self) -> tuple[float, float]:
        return self.top + (self.height - 1) / 2, self.left + (self.width - 1) / 2

    def rasterize(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=np.uint8)
        m[self.top:self.top + self.height, self.left:self.left + self.width] = 1
        return m


@dataclass
class MaskSequence:
    masks: np.ndarray
    motion_kind: str = "static"
    boxes: list[BBox] = field(default_factory=list)

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ValueError(f"expected T x H x W masks, got {masks.shape}")
        if not np.all((masks == 0) | (masks == 1)):
            raise ValueError("mask values must be 0 or 1")
        self.masks = masks.astype(np.uint8)
        if self.motion_kind not in ("static", "moving"):
            raise ValueError(f"unknown motion kind {self.motion_kind!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.masks.shape

    def __len__(self) -> int:
        return self.masks.shape[0]


@dataclass
class LandmarkSet:
    points: np.ndarray  # T x L x 2, (row, col) pixels

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise ValueError(f"expected T x L x 2 landmarks, got {self.points.shape}")

    @property
    def num_landmarks(self) -> int:
        return self.points.shape[1]


@dataclass
class LandmarkMap:
    maps: np.ndarray  # T x H x W in [0, 1]


@dataclass
class InpaintingSample:
    masked_frames: FrameSequence
    masks: MaskSequence
    landmarks: LandmarkMap
    reference: np.ndarray
    ground_truth: FrameSequence
    video_id: str = ""

    def __post_init__(self):
        shape = self.ground_truth.shape
        if self.masked_frames.shape != shape or self.masks.shape != shape:
            raise ValueError("masked frames, masks and ground truth disagree on T, H, W")
        if self.landmarks.maps.shape != shape:
            raise ValueError("landmark maps disagree with frames on T, H, W")
        if self.reference.shape != self.ground_truth.frames.shape[1:]:
            raise ValueError(f"reference must be H x W x 3, got {self.reference.shape}")


@dataclass
class VideoEntry:
    video_id: str
    frame_paths: list[str]
    landmark_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    """Index of clips relative to ``root``.

    JSON schema::

        {"version": 1,
         "entries": [{"video_id": str, "frame_paths": [str, ...],
                      "landmark_path": str, "split": "train" | "val"}, ...]}

    Paths are relative to the directory holding the manifest.
    """

    entries: list[VideoEntry]
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in manifest")
        for e in self.entries:
            if e.split not in ("train", "val"):
                raise ValueError(f"unknown split {e.split!r} for {e.video_id}")

    def split(self, name: str) -> list[VideoEntry]:
        return [e for e in self.entries if e.split == name]

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        doc = {
            "version": MANIFEST_VERSION,
            "entries": [
                {"video_id": e.video_id, "frame_paths": list(e.frame_paths),
                 "landmark_path": e.landmark_path, "split": e.split}
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise IngestionError(f"unsupported manifest version {doc.get('version')!r} in {path}")
        entries = [VideoEntry(**e) for e in doc["entries"]]
        manifest = cls(entries, path.parent)
        for e in entries:
            for rel in [*e.frame_paths, e.landmark_path]:
                if not (manifest.root / rel).exists():
                    raise IngestionError(f"manifest entry {e.video_id}: missing file {manifest.root / rel}")
        return manifest


# ---------------------------------------------------------------------------
# ingestion


def frame_files(directory: str | Path) -> list[Path]:
    """PNG files of a clip directory in frame order (zero-padded names)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise IngestionError(f"no PNG frames in {directory}")
    return files


def _read_rgb8(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "RGBA", "L", "P"):
                raise IngestionError(f"{path}: unsupported image mode {img.mode} (need 8-bit)")
            return img.convert("RGB")
    except IngestionError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def load_frames(paths: Sequence[str | Path], target_size: tuple[int, int] = DEFAULT_SIZE,
                frame_rate: float | None = None) -> FrameSequence:
    """Decode 8-bit RGB images, resize bilinearly to ``(H, W)`` and map ``p -> p/127.5 - 1``."""
    if not paths:
        raise IngestionError("no frame paths given")
    h, w = target_size
    frames = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise IngestionError(f"missing frame file {p}")
        img = _read_rgb8(p)
        if img.size != (w, h):
            img = img.resize((w, h), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float32))
    arr = np.stack(frames) / np.float32(127.5) - np.float32(1.0)
    return FrameSequence(np.clip(arr, -1.0, 1.0), frame_rate)


def load_clip(directory: str | Path, target_size: tuple[int, int] | None = None) -> FrameSequence:
    files = frame_files(directory)
    if target_size is None:
        with Image.open(files[0]) as img:
            target_size = (img.height, img.width)
    return load_frames(files, target_size)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """Inverse of the load normalization, rounded to 8 bits."""
    return np.clip(np.rint((np.asarray(frames, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_frames(frames: FrameSequence | np.ndarray, directory: str | Path,
                names: Sequence[str] | None = None) -> list[Path]:
    arr = frames.frames if isinstance(frames, FrameSequence) else np.asarray(frames)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"{t:05d}.png" for t in range(arr.shape[0])]
    out = []
    for frame, name in zip(to_uint8(arr), names):
        path = directory / name
        Image.fromarray(frame, "RGB").save(path)
        out.append(path)
    return out


def save_masks(masks: MaskSequence, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for t, m in enumerate(masks.masks):
        path = directory / f"{t:05d}.png"
        Image.fromarray(m * np.uint8(255), "L").save(path)
        out.append(path)
    return out


def load_masks(directory: str | Path, target_size: tuple[int, int] | None = None) -> MaskSequence:
    """Read mask PNGs; any pixel above mid-gray counts as occluded."""
    files = frame_files(directory)
    masks = []
    for p in files:
        try:
            with Image.open(p) as img:
                img = img.convert("L")
                if target_size is not None and img.size != (target_size[1], target_size[0]):
                    img = img.resize((target_size[1], target_size[0]), Image.NEAREST)
                masks.append((np.asarray(img) > 127).astype(np.uint8))
        except Exception as exc:
            raise IngestionError(f"cannot decode mask {p}: {exc}") from exc
    arr = np.stack(masks)
    kind = "static" if all(np.array_equal(arr[0], m) for m in arr) else "moving"
    return MaskSequence(arr, kind)


# ---------------------------------------------------------------------------
# masks


def _box_side_bounds(shape: tuple[int, int], size_range: tuple[float, float]) -> tuple[int, int]:
    lo_frac, hi_frac = size_range
    if not 0 < lo_frac <= hi_frac <= 0.5:
        raise ParameterError(f"size_range must satisfy 0 < min <= max <= 0.5, got {size_range}")
    side = min(shape)
    lo = max(1, math.ceil(lo_frac * side))
    hi = math.floor(hi_frac * side)
    if hi < lo:
        raise ParameterError(f"size_range {size_range} yields no box side on a {shape} frame")
    return lo, hi


def _sample_box(rng: np.random.Generator, shape: tuple[int, int],
                size_range: tuple[float, float]) -> BBox:
    # sides uniform on the integers [ceil(min_frac*S), floor(max_frac*S)], S = min(H, W)
    lo, hi = _box_side_bounds(shape, size_range)
    bh, bw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    top = int(rng.integers(0, shape[0] - bh + 1))
    left = int(rng.integers(0, shape[1] - bw + 1))
    return BBox(top, left, bh, bw)


def generate_static_mask(rng_seed: int, T: int, shape: tuple[int, int] = DEFAULT_SIZE,
                         size_range: tuple[float, float] = DEFAULT_SIZE_RANGE) -> MaskSequence:
    """One uniformly sampled box replicated over all ``T`` frames."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    rng = np.random.default_rng(rng_seed)
    box = _sample_box(rng, shape, size_range)
    m = box.rasterize(shape)
    return MaskSequence(np.repeat(m[None], T, axis=0), "static", [box] * T)


def generate_moving_mask(rng_seed: int, T: int, shape: tuple[int, int] = DEFAULT_SIZE,
                         size_range: tuple[float, float] = DEFAULT_SIZE_RANGE,
                         max_step: int = 5) -> MaskSequence:
    """Fixed-size box whose position does a clamped uniform random walk.

    Each frame the box moves by an integer offset drawn uniformly from
    ``[-max_step, max_step]`` per axis, then is clamped to stay inside the frame,
    so consecutive centers never differ by more than ``max_step``.
    """
    if T < 1:
        raise ParameterError("T must be >= 1")
    if max_step < 1:
        raise ParameterError(f"max_step must be >= 1, got {max_step}")
    rng = np.random.default_rng(rng_seed)
    box = _sample_box(rng, shape, size_range)
    h, w = shape
    top, left = box.top, box.left
    boxes = []
    for t in range(T):
        if t > 0:
            dy, dx = (int(v) for v in rng.integers(-max_step, max_step + 1, size=2))
            top = min(max(top + dy, 0), h - box.height)
            left = min(max(left + dx, 0), w - box.width)
        boxes.append(BBox(top, left, box.height, box.width))
    masks = np.stack([b.rasterize(shape) for b in boxes])
    return MaskSequence(masks, "moving", boxes)


def apply_mask(gt: FrameSequence, m: MaskSequence) -> FrameSequence:
    if gt.shape != m.shape:
        raise ValueError(f"frame shape {gt.shape} and mask shape {m.shape} disagree")
    occluded = m.masks.astype(bool)[..., None]
    return FrameSequence(np.where(occluded, np.float32(MASK_FILL), gt.frames), gt.frame_rate)


# ---------------------------------------------------------------------------
# landmarks


def render_landmarks(lm: LandmarkSet, shape: tuple[int, int],
                     sigma: float = DEFAULT_SIGMA) -> LandmarkMap:
    """One Gaussian blob per landmark, summed and clamped to [0, 1]."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    h, w = shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    maps = np.zeros((lm.points.shape[0], h, w), dtype=np.float64)
    for t, pts in enumerate(lm.points):
        for r, c in pts:
            maps[t] += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
    return LandmarkMap(np.clip(maps, 0.0, 1.0).astype(np.float32))


def save_landmarks(lm: LandmarkSet, path: str | Path) -> Path:
    """Write ``t l row col`` rows, one per landmark per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# t l row col"]
    for t, pts in enumerate(lm.points):
        for l, (r, c) in enumerate(pts):
            lines.append(f"{t} {l} {float(r)!r} {float(c)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_landmarks(path: str | Path) -> LandmarkSet:
    path = Path(path)
    try:
        rows = np.loadtxt(path, comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read landmarks {path}: {exc}") from exc
    if rows.shape[1] != 4:
        raise IngestionError(f"{path}: expected 4 columns 't l row col'")
    t_idx = rows[:, 0].astype(int)
    l_idx = rows[:, 1].astype(int)
    T, L = t_idx.max() + 1, l_idx.max() + 1
    if len(rows) != T * L:
        raise IngestionError(f"{path}: every frame must list the same {L} landmarks")
    points = np.zeros((T, L, 2))
    points[t_idx, l_idx] = rows[:, 2:]
    return LandmarkSet(points)


# ---------------------------------------------------------------------------
# samples


def select_reference(gt: FrameSequence, m: MaskSequence, training: bool = True) -> np.ndarray:
    """Ground-truth frame 0 when training, else the first frame with an empty mask."""
    if len(gt) < 1:
        raise ValueError("empty clip")
    if training:
        return gt.frames[0].copy()
    for t in range(len(m)):
        if not m.masks[t].any():
            return gt.frames[t].copy()
    raise NoReferenceError("no reference available: every frame carries an occlusion")


def make_sample(gt: FrameSequence, masks: MaskSequence, landmarks: LandmarkSet | LandmarkMap,
                reference: np.ndarray | None = None, sigma: float = DEFAULT_SIGMA,
                video_id: str = "") -> InpaintingSample:
    if isinstance(landmarks, LandmarkSet):
        landmarks = render_landmarks(landmarks, gt.shape[1:], sigma)
    if reference is None:
        reference = select_reference(gt, masks, training=True)
    return InpaintingSample(apply_mask(gt, masks), masks, landmarks,
                            np.asarray(reference, dtype=np.float32), gt, video_id)


def load_entry(manifest: DatasetManifest, entry: VideoEntry,
               target_size: tuple[int, int] | None = None) -> tuple[FrameSequence, LandmarkSet]:
    paths = [manifest.root / p for p in entry.frame_paths]
    if target_size is None:
        with Image.open(paths[0]) as img:
            target_size = (img.height, img.width)
    frames = load_frames(paths, target_size)
    lm = load_landmarks(manifest.root / entry.landmark_path)
    if lm.points.shape[0] != len(frames):
        raise IngestionError(f"{entry.video_id}: {lm.points.shape[0]} landmark frames vs {len(frames)} images")
    return frames, lm


def mask_for(kind: str, seed: int, T: int, shape: tuple[int, int],
             size_range: tuple[float, float] = DEFAULT_SIZE_RANGE, max_step: int = 5) -> MaskSequence:
    if kind == "static":
        return generate_static_mask(seed, T, shape, size_range)
    if kind == "moving":
        return generate_moving_mask(seed, T, shape, size_range, max_step)
    raise ParameterError(f"unknown mask kind {kind!r}")


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class FaceParams:
    """Per-video parameters of the procedural face."""

    head_row: float
    head_col: float
    semi_rows: float
    semi_cols: float
    drift_rows: float
    drift_cols: float
    curve_amp: float
    curve_period: float
    curve_phase: float
    background: tuple[float, float, float]
    skin: tuple[float, float, float]

    def head_center(self, t: int, T: int) -> tuple[float, float]:
        phase = 2 * math.pi * t / max(T, 1)
        return (self.head_row + self.drift_rows * math.sin(phase),
                self.head_col + self.drift_cols * math.sin(phase + 1.0))

    def mouth_curve(self, t: int) -> float:
        # signed apex offset in rows; positive = smile (apex below corners)
        return self.curve_amp * math.sin(2 * math.pi * t / self.curve_period + self.curve_phase)

    def landmarks(self, t: int, T: int) -> np.ndarray:
        """Left eye, right eye, left mouth corner, right mouth corner, mouth apex."""
        cr, cc = self.head_center(t, T)
        a, b = self.semi_rows, self.semi_cols
        eye_r = cr - 0.25 * a
        mouth_r = cr + 0.4 * a
        return np.array([
            [eye_r, cc - 0.35 * b],
            [eye_r, cc + 0.35 * b],
            [mouth_r, cc - 0.3 * b],
            [mouth_r, cc + 0.3 * b],
            [mouth_r + self.mouth_curve(t), cc],
        ])


def _face_params(rng: np.random.Generator, shape: tuple[int, int]) -> FaceParams:
    h, w = shape
    semi_rows = rng.uniform(0.30, 0.38) * h
    semi_cols = rng.uniform(0.22, 0.30) * w
    drift_rows = rng.uniform(0.0, 0.08) * h
    drift_cols = rng.uniform(0.0, 0.08) * w
    # keep the whole ellipse inside the frame for every drift value
    head_row = rng.uniform(semi_rows + drift_rows, h - 1 - semi_rows - drift_rows)
    head_col = rng.uniform(semi_cols + drift_cols, w - 1 - semi_cols - drift_cols)
    return FaceParams(
        head_row=head_row, head_col=head_col, semi_rows=semi_rows, semi_cols=semi_cols,
        drift_rows=drift_rows, drift_cols=drift_cols,
        curve_amp=rng.uniform(0.08, 0.15) * semi_rows,
        curve_period=rng.uniform(6.0, 12.0), curve_phase=rng.uniform(0, 2 * math.pi),
        background=tuple(rng.uniform(-0.9, -0.2, size=3)),
        skin=tuple(rng.uniform(0.1, 0.7, size=3)),
    )


def render_face(params: FaceParams, t: int, T: int, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    cr, cc = params.head_center(t, T)
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = params.background
    head = ((rows - cr) / params.semi_rows) ** 2 + ((cols - cc) / params.semi_cols) ** 2 <= 1.0
    img[head] = params.skin
    pts = params.landmarks(t, T)
    eye_radius = max(1.0, 0.12 * params.semi_cols)
    for r, c in pts[:2]:
        img[(rows - r) ** 2 + (cols - c) ** 2 <= eye_radius ** 2] = (-0.8, -0.8, -0.7)
    # mouth: parabola through both corners with apex offset by the current curvature
    (r0, c0), (_, c1), (ra, _) = pts[2], pts[3], pts[4]
    half = (c1 - c0) / 2
    u = (cols - (c0 + half)) / half
    curve_row = r0 + (ra - r0) * (1 - u ** 2)
    mouth = (np.abs(u) <= 1) & (np.abs(rows - curve_row) <= max(0.8, 0.03 * params.semi_rows))
    img[mouth] = (0.6, -0.6, -0.5)
    return img.astype(np.float32)


def synthetic_clip(rng_seed: int, T: int, shape: tuple[int, int]) -> tuple[FrameSequence, LandmarkSet, FaceParams]:
    """Render one procedural clip in memory (no disk I/O)."""
    params = _face_params(np.random.default_rng(rng_seed), shape)
    frames = np.stack([render_face(params, t, T, shape) for t in range(T)])
    points = np.stack([params.landmarks(t, T) for t in range(T)])
    return FrameSequence(np.clip(frames, -1, 1)), LandmarkSet(points), params


def make_synthetic_dataset(root: str | Path, rng_seed: int = 0, n_videos: int = 4,
                           T: int = DEFAULT_CLIP_LENGTH, shape: tuple[int, int] = DEFAULT_SIZE,
                           val_every: int = 5) -> DatasetManifest:
    """Write procedurally animated face clips, landmark files and a manifest.

    Every ``val_every``-th video (1-based) goes to the ``val`` split.
    """
    if n_videos < 1:
        raise ParameterError("n_videos must be >= 1")
    root = Path(root)
    try:
        (root / "videos").mkdir(parents=True, exist_ok=True)
        (root / "landmarks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot write dataset under {root}: {exc}") from exc
    seeds = np.random.default_rng(rng_seed).integers(0, 2 ** 31, size=n_videos)
    entries = []
    for i, seed in enumerate(seeds):
        vid = f"vid{i:03d}"
        frames, lm, _ = synthetic_clip(int(seed), T, shape)
        paths = save_frames(frames, root / "videos" / vid)
        lm_path = save_landmarks(lm, root / "landmarks" / f"{vid}.txt")
        split = "val" if val_every and (i + 1) % val_every == 0 else "train"
        entries.append(VideoEntry(vid, [str(p.relative_to(root)) for p in paths],
                                  str(lm_path.relative_to(root)), split))
    manifest = DatasetManifest(entries, root)
    manifest.save()
    return manifest
