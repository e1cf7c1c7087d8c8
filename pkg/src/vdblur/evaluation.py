"""PSNR reports, ablations and window-length studies."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .data import FrameWindow, VideoClip, iter_windows, to_uint8, write_frame, ycbcr_to_rgb
from .errors import DatasetError
from .model import Generator

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
INPUT_LABEL = "INPUT"

# Reported averages on the VideoDeblurring test split, for reference only.
REFERENCE_PSNR = {
    "INPUT": 27.14,
    "PSDEBLUR": 25.08,
    "WFA": 28.35,
    "DBN (single)": 28.37,
    "DBN (noalign)": 30.05,
    "DBN (flow)": 30.05,
    "DBLRNet (single)": 29.98,
    "DBLRNet (multi)": 31.56,
    "DBLRNet": 33.04,
    "DBLRGAN": 33.19,
}
REFERENCE_INPUT_PER_VIDEO = (24.14, 30.52, 28.38, 27.31, 22.60, 29.31, 27.74, 23.86, 30.59, 26.98)


def psnr(a, b, max_val: float = 255.0) -> float:
    """``10 log10(max_val^2 / MSE)`` over all elements; identical inputs give 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not max_val > 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * math.log10(max_val**2 / mse), PSNR_CAP))


@dataclass
class MethodScores:
    method: str
    per_video: list[tuple[str, float]]
    groups: list[str] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean([v for _, v in self.per_video])) if self.per_video else float("nan")

    def group_average(self, group: str) -> float:
        vals = [v for (_, v), g in zip(self.per_video, self.groups) if g == group]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    """Rows of per-video PSNR (dB), one per method, plus run metadata."""

    rows: list[MethodScores]
    metadata: dict = field(default_factory=dict)

    def row(self, method: str) -> MethodScores:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    @property
    def videos(self) -> list[str]:
        return [vid for vid, _ in self.rows[0].per_video] if self.rows else []

    @property
    def group_labels(self) -> list[str]:
        if not self.rows:
            return []
        return sorted({g for g in self.rows[0].groups if g})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        groups = self.group_labels
        w.writerow(["method", *self.videos, *[f"psnr_{g}" for g in groups], "average"])
        for r in self.rows:
            w.writerow(
                [r.method, *[f"{v:.6f}" for _, v in r.per_video], *[f"{r.group_average(g):.6f}" for g in groups],
                 f"{r.average:.6f}"]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        groups = self.group_labels
        header = ["Methods", *self.videos, *[f"PSNR-{g.upper()}" for g in groups], "Average (PSNR)"]
        body = [
            [r.method, *[f"{v:.2f}" for _, v in r.per_video], *[f"{r.group_average(g):.2f}" for g in groups],
             f"{r.average:.2f}"]
            for r in self.rows
        ]
        widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(str(c).rjust(wd) for c, wd in zip(row, widths))
        return "\n".join([fmt(header), "  ".join("-" * wd for wd in widths), *map(fmt, body)]) + "\n"

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.txt").write_text(self.to_text())


# ---------------------------------------------------------------------------
# inference


class IdentityModel:
    """Returns the blurry center luma unchanged; scores exactly like the input."""

    T = 5

    def __init__(self, T: int = 5):
        self.T = T

    def restore(self, windows: Sequence[FrameWindow]) -> list[np.ndarray]:
        return [w.center for w in windows]


def _model_T(model) -> int:
    return model.spec.T if isinstance(model, Generator) else model.T


def _batch_for(shape) -> int:
    # keep a batch near a megapixel so full-resolution frames do not exhaust memory
    H, W = shape[:2]
    return int(min(8, max(1, 2**20 // max(H * W, 1))))


def restore_luma(model, windows: Sequence[FrameWindow], batch: int | None = None) -> list[np.ndarray]:
    """Inference-mode luma for each window, clamped to [0, 1]."""
    if not isinstance(model, Generator):
        return model.restore(windows)
    if not windows:
        return []
    batch = batch or _batch_for(windows[0].center.shape)
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(windows), batch):
                x = torch.as_tensor(np.stack([w.luma for w in windows[i : i + batch]]), dtype=param.dtype)
                out.extend(model(x).clamp(0.0, 1.0).numpy())
    finally:
        model.train(was_training)
    return out


def iter_deblurred(model, clip: VideoClip, T: int | None = None) -> Iterator[np.ndarray]:
    """Restored uint8 RGB frames in order, decoding a few input frames at a time."""
    T = _model_T(model) if T is None else T
    batch = _batch_for(clip.shape)
    buf: list[FrameWindow] = []

    def flush():
        lumas = restore_luma(model, buf, batch)
        return [to_uint8(ycbcr_to_rgb(y, w.chroma_cb, w.chroma_cr)) for y, w in zip(lumas, buf)]

    for w in iter_windows(clip, T):
        buf.append(w)
        if len(buf) == batch:
            yield from flush()
            buf = []
    if buf:
        yield from flush()


def deblur_clip(model, clip: VideoClip, T: int | None = None) -> list[np.ndarray]:
    """Restore every frame of ``clip``; returns uint8 RGB frames."""
    return list(iter_deblurred(model, clip, T))


def clip_psnr(restored: Sequence[np.ndarray], sharp: VideoClip) -> float:
    """Mean over frames of full-frame 8-bit RGB PSNR."""
    return float(np.mean([psnr(a, b) for a, b in zip(restored, sharp.frames)]))


def _video_id(clip: VideoClip, i: int) -> str:
    base = clip.name or f"video{i + 1}"
    return f"{base}/{clip.group}" if clip.group else base


def _require_pairs(pairs) -> None:
    if not pairs:
        raise DatasetError("empty evaluation set")
    for blurry, sharp in pairs:
        if sharp is None:
            raise DatasetError(
                f"clip {blurry.name!r} has no ground truth; PSNR needs paired data "
                "(use `deblur` for qualitative results)"
            )


def input_scores(pairs) -> MethodScores:
    _require_pairs(pairs)
    return MethodScores(
        INPUT_LABEL,
        [(_video_id(b, i), clip_psnr(b.frames, s)) for i, (b, s) in enumerate(pairs)],
        [b.group for b, _ in pairs],
    )


def evaluate(
    model,
    pairs: Sequence[tuple[VideoClip, VideoClip]],
    method: str = "DBLRNet",
    include_input: bool = True,
    dump_dir=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Score ``model`` (a Generator, checkpoint path, or IdentityModel) on paired clips."""
    _require_pairs(pairs)
    if isinstance(model, (str, Path)):
        from .training import load_generator

        metadata = {"checkpoint": str(model), **(metadata or {})}
        model = load_generator(model)
    T = _model_T(model)
    rows = []
    if include_input:
        rows.append(input_scores(pairs))
    per_video = []
    for i, (blurry, sharp) in enumerate(pairs):
        scores = []
        for k, restored in enumerate(iter_deblurred(model, blurry, T)):
            truth = sharp.frames[k]
            scores.append(psnr(restored, truth))
            if dump_dir is not None:
                write_frame(Path(dump_dir) / _video_id(blurry, i) / f"{k:05d}.png",
                            np.concatenate([blurry.frames[k], restored, truth], axis=1))
        per_video.append((_video_id(blurry, i), float(np.mean(scores))))
    rows.append(MethodScores(method, per_video, [b.group for b, _ in pairs]))
    return EvalReport(rows, dict(metadata or {}))


def validation_psnr(model: Generator, pairs, T: int) -> float:
    return float(np.mean([clip_psnr(deblur_clip(model, b, T), s) for b, s in pairs]))


# ---------------------------------------------------------------------------
# studies


ABLATION_LABELS = {
    "single2d": "DBLRNet (single)",
    "multi2d": "DBLRNet (multi)",
    "net3d": "DBLRNet",
    "gan": "DBLRGAN",
}


@dataclass
class StudyResult:
    """Per-setting EvalReports over seeds, with seed-averaged PSNR."""

    reports: dict[str, list[EvalReport]]
    method_of: dict[str, str]

    def mean_psnr(self, key) -> float:
        reps = self.reports[key]
        return float(np.mean([r.row(self.method_of[key]).average for r in reps]))

    def input_psnr(self) -> float:
        first = next(iter(self.reports.values()))[0]
        return first.row(INPUT_LABEL).average

    def ranking(self) -> list:
        return sorted(self.reports, key=self.mean_psnr, reverse=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_seeds = max(len(v) for v in self.reports.values())
        w.writerow(["setting", "method", *[f"seed{i}" for i in range(n_seeds)], "mean_psnr", "rank"])
        ranks = {k: i + 1 for i, k in enumerate(self.ranking())}
        for k, reps in self.reports.items():
            vals = [f"{r.row(self.method_of[k]).average:.6f}" for r in reps]
            w.writerow([k, self.method_of[k], *vals, f"{self.mean_psnr(k):.6f}", ranks[k]])
        w.writerow([INPUT_LABEL, INPUT_LABEL, *[""] * n_seeds, f"{self.input_psnr():.6f}", ""])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'setting':>10}  {'method':<18} {'mean PSNR':>10}"]
        for k in self.ranking():
            lines.append(f"{str(k):>10}  {self.method_of[k]:<18} {self.mean_psnr(k):>10.3f}")
        lines.append(f"{INPUT_LABEL:>10}  {INPUT_LABEL:<18} {self.input_psnr():>10.3f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.txt").write_text(self.to_text())


def ablation_study(
    config,
    train_pairs,
    val_pairs,
    variants: Sequence[str] = ("single2d", "multi2d", "net3d", "gan"),
    seeds: Sequence[int] = (0,),
    gan_steps: int | None = None,
) -> StudyResult:
    """Train each variant with identical data, steps and seed; score on ``val_pairs``."""
    from .training import train_gan, train_generator

    reports: dict[str, list[EvalReport]] = {}
    for variant in variants:
        if variant not in ABLATION_LABELS:
            raise ValueError(f"unknown ablation variant {variant!r}")
        for seed in seeds:
            cfg = config.replace(seed=seed, variant="net3d" if variant == "gan" else variant)
            state = train_generator(cfg, train_pairs)
            model = state.generator
            if variant == "gan":
                gcfg = cfg.replace(max_steps=gan_steps or max(1, cfg.max_steps // 4))
                model = train_gan(gcfg, train_pairs, state, val_pairs=val_pairs).best_model()
            label = ABLATION_LABELS[variant]
            rep = evaluate(model, val_pairs, method=label, metadata={"variant": variant, "seed": seed})
            reports.setdefault(variant, []).append(rep)
            log.info("ablation %s seed %d: %.3f dB", variant, seed, rep.row(label).average)
    return StudyResult(reports, {v: ABLATION_LABELS[v] for v in variants})


def window_study(config, train_pairs, val_pairs, T_list: Sequence[int] = (3, 5, 7, 9, 11), seeds: Sequence[int] = (0,)) -> StudyResult:
    """One net3d per window length, same step budget each."""
    from .training import train_generator

    reports: dict = {}
    for T in T_list:
        for seed in seeds:
            cfg = config.replace(seed=seed, variant="net3d", window_T=T)
            state = train_generator(cfg, train_pairs)
            rep = evaluate(state.generator, val_pairs, method=f"T={T}", metadata={"T": T, "seed": seed})
            reports.setdefault(T, []).append(rep)
    return StudyResult(reports, {T: f"T={T}" for T in T_list})
