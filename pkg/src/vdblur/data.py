"""Frame I/O, YCbCr conversion, temporal windows and synthetic blur.

Color transform is full-range BT.601 (the JPEG convention): with R, G, B in [0, 1],

    Y  =       0.299    R + 0.587    G + 0.114    B
    Cb = 0.5 - 0.168736 R - 0.331264 G + 0.5      B
    Cr = 0.5 + 0.5      R - 0.418688 G - 0.081312 B

The inverse is the exact matrix inverse, so RGB -> YCbCr -> RGB is lossless up to
floating point rounding.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DatasetError

log = logging.getLogger(__name__)

RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LAYOUTS = ("videodeblurring_quant", "videodeblurring_qual", "blurred_kitti", "generic_pairs")


def _as_unit_rgb(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    return frame.astype(np.float64)


def rgb_to_ycbcr(frame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an ``H x W x 3`` RGB frame (uint8, or float in [0, 1]) into Y, Cb, Cr in [0, 1]."""
    rgb = _as_unit_rgb(frame)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis, got shape {rgb.shape}")
    ycc = rgb @ RGB_TO_YCBCR.T + CHROMA_OFFSET
    return ycc[..., 0], ycc[..., 1], ycc[..., 2]


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`; returns float RGB clipped to [0, 1]."""
    ycc = np.stack([np.asarray(y, np.float64), np.asarray(cb, np.float64), np.asarray(cr, np.float64)], axis=-1)
    rgb = (ycc - CHROMA_OFFSET) @ YCBCR_TO_RGB.T
    return np.clip(rgb, 0.0, 1.0)


def to_uint8(rgb) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    path: str = ""
    fps: float | None = None
    name: str = ""
    group: str = ""  # camera side for stereo layouts

    def __post_init__(self):
        if not len(self.frames):
            return
        shapes = self.frames.sizes() if isinstance(self.frames, FrameFiles) else [f.shape for f in self.frames]
        for i, shape in enumerate(shapes):
            if shape != shapes[0]:
                raise DatasetError(f"{self.path or self.name}: frame {i} has shape {shape}, expected {shapes[0]}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


@dataclass
class FrameWindow:
    luma: np.ndarray  # T x H x W, float32 in [0, 1]
    chroma_cb: np.ndarray
    chroma_cr: np.ndarray

    @property
    def T(self) -> int:
        return self.luma.shape[0]

    @property
    def center_index(self) -> int:
        return (self.T - 1) // 2

    @property
    def center(self) -> np.ndarray:
        return self.luma[self.center_index]


@dataclass
class SamplePair:
    window: FrameWindow
    target: np.ndarray  # H x W sharp center luma


@dataclass
class _DecodedClip:
    luma: np.ndarray  # F x H x W float32
    cb: np.ndarray
    cr: np.ndarray


def decode_clip(clip: VideoClip) -> _DecodedClip:
    ys, cbs, crs = [], [], []
    for f in clip.frames:
        y, cb, cr = rgb_to_ycbcr(f)
        ys.append(y)
        cbs.append(cb)
        crs.append(cr)
    return _DecodedClip(
        np.asarray(ys, np.float32), np.asarray(cbs, np.float32), np.asarray(crs, np.float32)
    )


def window_indices(n_frames: int, center: int, T: int) -> list[int]:
    """Frame indices of the window around ``center`` with edge replication."""
    h = (T - 1) // 2
    return [min(max(center + k, 0), n_frames - 1) for k in range(-h, h + 1)]


def iter_windows(clip: VideoClip, T: int = 5) -> Iterator[FrameWindow]:
    """Windows in frame order; each frame is decoded once and dropped when no longer needed."""
    if T < 1 or T % 2 == 0:
        raise ConfigurationError(f"window length T must be a positive odd integer, got {T}")
    n = len(clip)
    if n == 0:
        raise DatasetError(f"clip {clip.path or clip.name!r} has no frames")
    cache: dict[int, tuple] = {}
    for i in range(n):
        idx = window_indices(n, i, T)
        for j in idx:
            if j not in cache:
                cache[j] = tuple(c.astype(np.float32) for c in rgb_to_ycbcr(clip.frames[j]))
        for j in [j for j in cache if j < idx[0]]:
            del cache[j]
        yield FrameWindow(np.stack([cache[j][0] for j in idx]), cache[i][1], cache[i][2])


def make_windows(clip: VideoClip, T: int = 5) -> list[FrameWindow]:
    return list(iter_windows(clip, T))


def synthetic_blur(sharp: VideoClip, n: int) -> VideoClip:
    """Temporal box average over ``n`` frames centered on each frame (edge replicated)."""
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"blur length n must be a positive odd integer, got {n}")
    if n > len(sharp):
        raise ConfigurationError(f"blur length {n} exceeds clip length {len(sharp)}")
    is_uint8 = sharp.frames[0].dtype == np.uint8
    stack = np.asarray(sharp.frames, np.float64)
    out = []
    for t in range(len(sharp)):
        mean = stack[window_indices(len(sharp), t, n)].mean(axis=0)
        out.append(np.clip(np.rint(mean), 0, 255).astype(np.uint8) if is_uint8 else mean)
    return VideoClip(out, path=sharp.path, fps=sharp.fps, name=sharp.name, group=sharp.group)


# ---------------------------------------------------------------------------
# file I/O


def _numeric_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def list_frames(directory: Path) -> list[Path]:
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_SUFFIXES]
    return sorted(files, key=_numeric_key)


def _cache_path(path: Path) -> Path | None:
    root = os.environ.get("VDBLUR_CACHE")
    if not root:
        return None
    st = path.stat()
    key = hashlib.sha1(f"{path.resolve()}:{st.st_mtime_ns}:{st.st_size}".encode()).hexdigest()
    return Path(root) / f"{key}.npy"


def read_frame(path: Path) -> np.ndarray:
    path = Path(path)
    cached = _cache_path(path)
    if cached is not None and cached.exists():
        return np.load(cached)
    with Image.open(path) as im:
        frame = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        np.save(cached, frame)
    return frame


def write_frame(path: Path, frame) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        frame = to_uint8(frame)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame).save(path)


class FrameFiles(SequenceABC):
    """Frame images on disk, read on access so long clips need not fit in memory."""

    def __init__(self, paths: Sequence[Path]):
        self.paths = [Path(p) for p in paths]

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [read_frame(p) for p in self.paths[i]]
        return read_frame(self.paths[i])

    def sizes(self) -> list[tuple[int, int, int]]:
        """Frame shapes from the image headers, without decoding pixels."""
        out = []
        for p in self.paths:
            with Image.open(p) as im:
                out.append((im.height, im.width, 3))
        return out


def load_clip(directory, name: str | None = None, group: str = "", lazy: bool = False) -> VideoClip:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"clip directory not found: {directory}")
    files = list_frames(directory)
    if not files:
        raise DatasetError(f"no frame images in {directory}")
    frames = FrameFiles(files) if lazy else [read_frame(p) for p in files]
    return VideoClip(frames, path=str(directory), name=name or directory.name, group=group)


def save_clip(clip: VideoClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        write_frame(directory / f"{i:05d}.png", f)


_LAYOUT_HELP = {
    "generic_pairs": "root/blurry/<clip>/<NNNNN>.png and root/sharp/<clip>/<NNNNN>.png",
    "videodeblurring_quant": "root[/quantitative_datasets]/<clip>/input/*.jpg and <clip>/GT/*.jpg",
    "videodeblurring_qual": "root[/qualitative_datasets]/<clip>/input/*.jpg (no ground truth)",
    "blurred_kitti": "root/blurry/<scene>/{left,right}/*.png with optional root/sharp/<scene>/{left,right}/",
}


def _subdirs(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_dir())


def load_dataset(root, layout: str = "generic_pairs", lazy: bool = False) -> list[tuple[VideoClip, VideoClip | None]]:
    """Load (blurry, sharp) clip pairs from a directory tree; ``sharp`` is None when absent.

    With ``lazy=True`` frames stay on disk until used (see :class:`FrameFiles`).
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}; expected {_LAYOUT_HELP[layout]}")

    def fail(msg):
        raise DatasetError(f"{msg}; expected layout {layout}: {_LAYOUT_HELP[layout]}")

    pairs: list[tuple[VideoClip, VideoClip | None]] = []
    if layout == "generic_pairs":
        bdir, sdir = root / "blurry", root / "sharp"
        if not bdir.is_dir() or not sdir.is_dir():
            fail(f"missing blurry/ or sharp/ under {root}")
        bnames = [p.name for p in _subdirs(bdir)]
        snames = [p.name for p in _subdirs(sdir)]
        if bnames != snames:
            fail(f"clip names differ: blurry={bnames} sharp={snames}")
        for n in bnames:
            pairs.append((load_clip(bdir / n, lazy=lazy), load_clip(sdir / n, lazy=lazy)))
    elif layout in ("videodeblurring_quant", "videodeblurring_qual"):
        sub = "quantitative_datasets" if layout.endswith("quant") else "qualitative_datasets"
        base = root / sub if (root / sub).is_dir() else root
        clips = [d for d in _subdirs(base) if (d / "input").is_dir()]
        if not clips:
            fail(f"no <clip>/input directories under {base}")
        for d in clips:
            blurry = load_clip(d / "input", name=d.name, lazy=lazy)
            sharp = None
            if layout.endswith("quant"):
                if not (d / "GT").is_dir():
                    fail(f"{d} has input/ but no GT/")
                sharp = load_clip(d / "GT", name=d.name, lazy=lazy)
            pairs.append((blurry, sharp))
    else:
        bdir = root / "blurry"
        if not bdir.is_dir():
            fail(f"missing blurry/ under {root}")
        sdir = root / "sharp"
        for scene in _subdirs(bdir):
            for side in ("left", "right"):
                if not (scene / side).is_dir():
                    fail(f"{scene} lacks {side}/")
                blurry = load_clip(scene / side, name=scene.name, group=side, lazy=lazy)
                sharp = None
                if sdir.is_dir():
                    if not (sdir / scene.name / side).is_dir():
                        fail(f"no sharp frames for {scene.name}/{side}")
                    sharp = load_clip(sdir / scene.name / side, name=scene.name, group=side, lazy=lazy)
                pairs.append((blurry, sharp))
        if not pairs:
            fail(f"no scenes under {bdir}")

    for blurry, sharp in pairs:
        if sharp is not None and (len(blurry) != len(sharp) or blurry.shape != sharp.shape):
            fail(f"clip {blurry.name}: blurry {len(blurry)}x{blurry.shape} vs sharp {len(sharp)}x{sharp.shape}")
    return pairs


def _sample(blurry: VideoClip, sharp: VideoClip, i: int, T: int) -> SamplePair:
    idx = window_indices(len(blurry), i, T)
    dec = {j: rgb_to_ycbcr(blurry.frames[j]) for j in sorted(set(idx))}
    luma = np.stack([dec[j][0] for j in idx]).astype(np.float32)
    window = FrameWindow(luma, dec[i][1].astype(np.float32), dec[i][2].astype(np.float32))
    return SamplePair(window, rgb_to_ycbcr(sharp.frames[i])[0].astype(np.float32))


class LazySamples(SequenceABC):
    """Training samples of file-backed clips, decoded when drawn."""

    def __init__(self, pairs, T: int):
        self.pairs = list(pairs)
        self.T = T
        self.index = [(c, i) for c, (b, _) in enumerate(self.pairs) for i in range(len(b))]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[j] for j in range(*k.indices(len(self)))]
        c, i = self.index[k]
        blurry, sharp = self.pairs[c]
        return _sample(blurry, sharp, i, self.T)


def build_samples(pairs: Iterable[tuple[VideoClip, VideoClip | None]], T: int) -> Sequence[SamplePair]:
    """One (window, sharp center luma) sample per frame.

    Clips loaded with ``lazy=True`` give a :class:`LazySamples` view that reads
    frames when a sample is drawn; in-memory clips are decoded up front.
    """
    pairs = list(pairs)
    for blurry, sharp in pairs:
        if sharp is None:
            raise DatasetError(f"clip {blurry.name} has no ground truth; cannot build training samples")
    if T < 1 or T % 2 == 0:
        raise ConfigurationError(f"window length T must be a positive odd integer, got {T}")
    if any(isinstance(b.frames, FrameFiles) for b, _ in pairs):
        return LazySamples(pairs, T)
    samples = []
    for blurry, sharp in pairs:
        targets = decode_clip(sharp).luma
        for i, w in enumerate(iter_windows(blurry, T)):
            samples.append(SamplePair(w, targets[i]))
    return samples


def crop_positions(H: int, W: int, patch: int) -> int:
    """Number of distinct crop offsets for a ``patch x patch`` crop."""
    return max(H - patch + 1, 0) * max(W - patch + 1, 0)


# ---------------------------------------------------------------------------
# synthetic scenes


def _smooth_noise(rng: np.random.Generator, shape, scale: int) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="wrap")


def make_canvas(rng: np.random.Generator, H: int, W: int, saturation: float = 0.15, grain: float = 0.01) -> np.ndarray:
    """Random scene in the dead-leaves style: overlapping shapes over soft shading.

    Shapes cover the canvas several times over, so most of the picture is made of
    sharp edges between flat regions, which is what motion blur destroys. Structure
    lives mostly in brightness; color is a weak tint per shape.
    """
    from scipy.ndimage import gaussian_filter

    n = _smooth_noise(rng, (H, W), 8)
    lum = rng.uniform(0.35, 0.65) + 0.12 * n / (n.std() + 1e-12)
    tint = np.stack([_smooth_noise(rng, (H, W), 16) for _ in range(3)], axis=-1)
    tint = saturation * 0.5 * tint / (tint.std() + 1e-12)
    for _ in range(int(H * W / 40)):
        level = rng.uniform(0.05, 0.95)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        hh, ww = rng.uniform(2, 10, size=2)
        y0, y1 = max(int(cy - hh), 0), min(int(np.ceil(cy + hh)) + 1, H)
        x0, x1 = max(int(cx - ww), 0), min(int(np.ceil(cx + ww)) + 1, W)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        if rng.random() < 0.5:
            mask = ((yy - cy) / hh) ** 2 + ((xx - cx) / ww) ** 2 < 1
        else:
            mask = (abs(yy - cy) < hh) & (abs(xx - cx) < ww)
        lum[y0:y1, x0:x1][mask] = level + 0.03 * (yy[mask] - cy) / hh
        tint[y0:y1, x0:x1][mask] = saturation * rng.uniform(-1, 1, size=3)
    lum = lum + grain * gaussian_filter(rng.standard_normal((H, W)), sigma=0.7)
    return np.clip(lum[..., None] + tint, 0.0, 1.0)


def pan_speeds(rng: np.random.Generator, n_frames: int, max_speed: float, smooth: float = 2.0) -> np.ndarray:
    """Per-frame camera speed for a steady handheld pan.

    A smoothed Gaussian process around 0.8 ``max_speed``, clipped to
    [0.5, 1] ``max_speed``, so every frame carries blur of similar length.
    """
    from scipy.ndimage import gaussian_filter1d

    pad = int(4 * smooth) + 1
    z = gaussian_filter1d(rng.standard_normal(n_frames + 2 * pad), smooth)[pad:-pad]
    return max_speed * np.clip(0.8 + 0.5 * z, 0.5, 1.0)


def make_synthetic_clip(
    rng: np.random.Generator, n_frames: int = 24, size: tuple[int, int] = (64, 64), max_speed: float = 1.5
) -> VideoClip:
    """Sharp clip from a camera drifting over a random canvas.

    Speed follows :func:`pan_speeds` and the heading wanders a little every
    frame, so temporal averaging smears edges over a few pixels in a direction
    that neighboring frames reveal.
    """
    from scipy.ndimage import shift as nd_shift

    H, W = size
    margin = int(np.ceil(max_speed * n_frames)) + 8
    canvas = make_canvas(rng, H + 2 * margin, W + 2 * margin)
    pos = np.array([margin, margin], dtype=np.float64)
    direction = rng.standard_normal(2)
    direction /= np.linalg.norm(direction) + 1e-12
    speeds = pan_speeds(rng, n_frames, max_speed)
    frames = []
    for t in range(n_frames):
        iy, ix = int(np.floor(pos[0])), int(np.floor(pos[1]))
        fy, fx = pos[0] - iy, pos[1] - ix
        crop = canvas[iy : iy + H + 1, ix : ix + W + 1]
        crop = nd_shift(crop, (-fy, -fx, 0), order=1, mode="nearest")[:H, :W]
        frames.append(to_uint8(crop))
        direction = direction + 0.3 * rng.standard_normal(2)
        direction /= np.linalg.norm(direction) + 1e-12
        pos = np.clip(pos + speeds[t] * direction, 1, [canvas.shape[0] - H - 2, canvas.shape[1] - W - 2])
    return VideoClip(frames)


def make_synthetic_dataset(
    root,
    n_clips: int = 5,
    n_frames: int = 24,
    size: tuple[int, int] = (64, 64),
    blur_n: int = 5,
    seed: int = 0,
    max_speed: float = 1.5,
) -> list[tuple[VideoClip, VideoClip]]:
    """Write a ``generic_pairs`` dataset of synthetic clips and return the pairs."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_clips):
        sharp = make_synthetic_clip(rng, n_frames, size, max_speed)
        sharp.name = f"clip{k:03d}"
        blurry = synthetic_blur(sharp, blur_n)
        pairs.append((blurry, sharp))
        if root is not None:
            save_clip(sharp, Path(root) / "sharp" / sharp.name)
            save_clip(blurry, Path(root) / "blurry" / sharp.name)
    return pairs


# the ten held-out videos of the VideoDeblurring quantitative set, as released
VIDEODEBLURRING_TEST_CLIPS = (
    "IMG_0030", "IMG_0049", "IMG_0021", "720p_240fps_2", "IMG_0032",
    "IMG_0033", "IMG_0031", "IMG_0003", "IMG_0039", "IMG_0037",
)
SPLITS = ("all", "train", "test")


def select_split(pairs: Sequence, split: str = "all", test_names: Sequence[str] = VIDEODEBLURRING_TEST_CLIPS) -> list:
    """Keep the train or test videos of a standard split, by clip name."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    if split == "all":
        return list(pairs)
    names = set(test_names)
    if not any(b.name in names for b, _ in pairs):
        raise DatasetError(f"none of the test clips {sorted(names)} found; use --split all for other datasets")
    return [p for p in pairs if (p[0].name in names) == (split == "test")]


def split_pairs(pairs: Sequence, n_val: int) -> tuple[list, list]:
    """Hold out the last ``n_val`` clips."""
    if n_val <= 0 or len(pairs) <= n_val:
        return list(pairs), []
    return list(pairs[:-n_val]), list(pairs[-n_val:])
