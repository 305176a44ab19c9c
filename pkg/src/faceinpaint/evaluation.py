"""MSE / PSNR / SSIM / LPIPS-style / FID on unit-range frames, and corpus reports.

Metric functions take arrays in ``[0, 1]`` (``T x H x W x 3`` or a single
``H x W x 3`` frame). :func:`evaluate_corpus` reads 8-bit PNGs and divides by
255 before measuring.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .video_data import frame_files

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NEG_EIG_TOL = 1e-8
REPORT_VERSION = 1


class PairingError(ValueError):
    pass


def _pair(out, gt) -> tuple[np.ndarray, np.ndarray]:
    out = np.asarray(out, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if out.shape != gt.shape:
        raise ValueError(f"shape mismatch: {out.shape} vs {gt.shape}")
    return out, gt


def to_unit(frames) -> np.ndarray:
    """Map ``[-1, 1]`` frames to ``[0, 1]``."""
    return (np.asarray(frames, dtype=np.float64) + 1.0) / 2.0


def mse(out, gt) -> float:
    out, gt = _pair(out, gt)
    return float(np.mean((out - gt) ** 2))


def psnr_from_mse(value: float, data_range: float = 1.0) -> float:
    if value <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / value))


def psnr(out, gt, data_range: float = 1.0) -> float:
    return psnr_from_mse(mse(out, gt), data_range)


def frame_psnr(out, gt) -> float:
    """Mean of per-frame PSNR over the clip."""
    out, gt = _pair(out, gt)
    if out.ndim == 3:
        return psnr(out, gt)
    return float(np.mean([psnr(o, g) for o, g in zip(out, gt)]))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """SSIM map of two ``(..., H, W)`` planes over valid 11x11 Gaussian windows."""
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x ** 2
    var_y = _filter_valid(y * y, g) - mu_y ** 2
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))


def ssim(out, gt, data_range: float = 1.0) -> float:
    """Single-scale SSIM, per channel, averaged over channels and frames."""
    out, gt = _pair(out, gt)
    if out.ndim == 3:
        out, gt = out[None], gt[None]
    # channels-last to (T, 3, H, W)
    per = ssim_map(np.moveaxis(out, -1, -3), np.moveaxis(gt, -1, -3), data_range)
    return float(per.mean(axis=(-2, -1)).mean())


def _unit_features(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def lpips_like(out, gt, extractor) -> float:
    """Mean over layers of the mean squared difference of channel-normalised features."""
    out, gt = _pair(out, gt)
    if out.ndim == 3:
        out, gt = out[None], gt[None]
    dtype = next(extractor.parameters()).dtype
    to_t = lambda a: torch.from_numpy(np.moveaxis(a * 2.0 - 1.0, -1, -3).copy()).to(dtype)
    with torch.no_grad():
        fo = extractor.layers(to_t(out))
        fg = extractor.layers(to_t(gt))
        dists = [((_unit_features(a) - _unit_features(b)) ** 2).mean() for a, b in zip(fo, fg)]
    return float(torch.stack(dists).mean())


def pooled_features(frames, extractor) -> np.ndarray:
    """One ``D``-vector per frame: global average of the extractor's last layer."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    dtype = next(extractor.parameters()).dtype
    x = torch.from_numpy(np.moveaxis(frames * 2.0 - 1.0, -1, -3).copy()).to(dtype)
    with torch.no_grad():
        last = extractor.layers(x)[-1]
    return last.mean(dim=(-2, -1)).double().numpy()


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features) -> GaussianStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need an N x D feature matrix with N >= 2, got {f.shape}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise ValueError(f"{what} has eigenvalue {w.min():.3e} below -{NEG_EIG_TOL}")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    ``Tr (S_a S_b)^{1/2}`` is evaluated as the trace of the square root of the
    symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, which has the same spectrum.
    """
    for s in (a, b):
        if not (np.all(np.isfinite(s.mu)) and np.all(np.isfinite(s.sigma))):
            raise ValueError("non-finite Gaussian statistics")
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("statistics have different dimensions")
    root_a = _psd_sqrt(a.sigma, "sigma_a")
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigh((inner + inner.T) / 2)[0]
    if w.min(initial=0.0) < -NEG_EIG_TOL:
        raise ValueError(f"covariance product has eigenvalue {w.min():.3e} below -{NEG_EIG_TOL}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_sqrt)


def fid_from_features(fa, fb) -> float:
    return frechet_distance(gaussian_stats(fa), gaussian_stats(fb))


# ---------------------------------------------------------------------------
# corpus reports


@dataclass
class VideoMetrics:
    video_id: str
    mse: float
    psnr: float
    ssim: float
    lpips: float
    fid: float | None  # this video's frames alone; informational
    frames: int


@dataclass
class MetricsReport:
    """Per-video metrics, their arithmetic means, and one pooled FID.

    ``averaged.psnr`` is the mean of per-video (per-frame averaged) PSNR;
    ``averaged.psnr_pooled`` is PSNR of the averaged MSE.
    """

    per_video: list[VideoMetrics]
    averaged: dict[str, float]
    fid: float
    extractor: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "extractor": self.extractor,
            "fid": self.fid,
            "averaged": dict(self.averaged),
            "per_video": [asdict(v) for v in self.per_video],
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls([VideoMetrics(**v) for v in d["per_video"]], dict(d["averaged"]), d["fid"],
                   d["extractor"], dict(d.get("config", {})))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        """Plain-text table in the column order MSE, PSNR, SSIM, LPIPS, FID."""
        a = self.averaged
        rows = [
            ("MSE (lower)", f"{a['mse']:.4f}"),
            ("PSNR (higher)", f"{a['psnr']:.2f}"),
            ("SSIM (higher)", f"{a['ssim']:.4f}"),
            ("LPIPS (lower)", f"{a['lpips']:.4f}"),
            ("FID (lower)", f"{self.fid:.4f}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Metric'.ljust(width)} | Value", f"{'-' * width}-+-------"]
        lines += [f"{name.ljust(width)} | {val}" for name, val in rows]
        lines.append(f"videos: {len(self.per_video)}; PSNR of mean MSE: {a['psnr_pooled']:.2f}; "
                     f"features: {self.extractor} (values not comparable across extractors)")
        return "\n".join(lines)


def _read_unit_clip(directory: Path) -> tuple[list[str], np.ndarray]:
    files = frame_files(directory)
    frames = []
    for p in files:
        with Image.open(p) as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0)
    return [p.name for p in files], np.stack(frames)


def evaluate_clips(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]], extractor,
                   config: dict | None = None) -> MetricsReport:
    """``pairs`` of ``(video_id, pred, gt)`` unit-range clips."""
    per_video, feats_pred, feats_gt = [], [], []
    for vid, pred, gt in pairs:
        fp = pooled_features(pred, extractor)
        fg = pooled_features(gt, extractor)
        feats_pred.append(fp)
        feats_gt.append(fg)
        per_video.append(VideoMetrics(
            video_id=vid, mse=mse(pred, gt), psnr=frame_psnr(pred, gt), ssim=ssim(pred, gt),
            lpips=lpips_like(pred, gt, extractor),
            fid=fid_from_features(fp, fg) if len(fp) >= 2 else None, frames=len(pred)))
    averaged = {k: float(np.mean([getattr(v, k) for v in per_video])) for k in ("mse", "psnr", "ssim", "lpips")}
    averaged["psnr_pooled"] = psnr_from_mse(averaged["mse"])
    fid = fid_from_features(np.concatenate(feats_pred), np.concatenate(feats_gt))
    return MetricsReport(per_video, averaged, fid, extractor.descriptor, config or {})


def evaluate_corpus(pred_dir: str | Path, gt_dir: str | Path, extractor,
                    config: dict | None = None) -> MetricsReport:
    """Pair ``pred_dir/<video_id>/`` with ``gt_dir/<video_id>/`` and measure everything."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids = {p.name for p in pred_dir.iterdir() if p.is_dir()}
    gt_ids = {p.name for p in gt_dir.iterdir() if p.is_dir()}
    if pred_ids != gt_ids or not pred_ids:
        raise PairingError(f"unpaired videos: only in pred {sorted(pred_ids - gt_ids)}, "
                           f"only in gt {sorted(gt_ids - pred_ids)}")
    pairs = []
    for vid in sorted(pred_ids):
        names_p, pred = _read_unit_clip(pred_dir / vid)
        names_g, gt = _read_unit_clip(gt_dir / vid)
        if names_p != names_g or pred.shape != gt.shape:
            raise PairingError(f"{vid}: frame names or sizes differ between pred and gt")
        pairs.append((vid, pred, gt))
    cfg = {"pred": str(pred_dir), "gt": str(gt_dir), **(config or {})}
    return evaluate_clips(pairs, extractor, cfg)
