"""Image metrics and report containers."""
import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from .exceptions import ValidationError

PSNR_CAP = 99.0
PROTOCOLS = ("full-view", "left-half", "extrapolation")
LUMA = np.array([0.2126, 0.7152, 0.0722])


def _prepare(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    a, b = np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:mask.ndim]:
            raise ValidationError("mask does not match image shape")
        a, b = a[mask], b[mask]
    return a, b


def compute_psnr(a, b, mask=None):
    """PSNR in dB of linear images clamped to [0, 1]; identical inputs give the 99 dB cap."""
    a, b = _prepare(a, b, mask)
    mse = float(np.mean((a - b) ** 2)) if a.size else 0.0
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def compute_ssim(a, b):
    """SSIM on the luma of clamped linear rgb: 11x11 Gaussian window (sigma 1.5),
    K1 = 0.01, K2 = 0.03, data range 1."""
    a, b = _prepare(a, b)
    if a.ndim == 3:
        a, b = a @ LUMA, b @ LUMA
    win = min(11, *(s if s % 2 else s - 1 for s in a.shape))
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, win_size=win))


@dataclass
class ImageScore:
    image_id: str
    psnr: float
    ssim: float
    lpips: float = None
    extra: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    """Per-image scores with aggregates; LPIPS is reserved and always null."""
    protocol: str
    scores: list = field(default_factory=list)
    label: str = ""
    failures: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.protocol!r}")

    def add(self, image_id, pred, target, **extra):
        score = ImageScore(str(image_id), compute_psnr(pred, target), compute_ssim(pred, target),
                           extra=extra)
        self.scores.append(score)
        return score

    def _values(self, key):
        return np.array([getattr(s, key) if hasattr(s, key) else s.extra[key]
                         for s in self.scores], dtype=np.float64)

    def mean(self, key="psnr"):
        return float(self._values(key).mean()) if self.scores else float("nan")

    def median(self, key="psnr"):
        return float(np.median(self._values(key))) if self.scores else float("nan")

    def to_dict(self):
        keys = ["psnr", "ssim"] + sorted({k for s in self.scores for k in s.extra})
        return {
            "protocol": self.protocol, "label": self.label,
            "images": [asdict(s) for s in self.scores],
            "aggregate": {k: {"mean": self.mean(k), "median": self.median(k)} for k in keys},
            "lpips": None,
            "failures": self.failures, "notes": self.notes,
        }

    def to_csv(self):
        keys = sorted({k for s in self.scores for k in s.extra})
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["image_id", "psnr", "ssim", *keys])
        for s in self.scores:
            w.writerow([s.image_id, f"{s.psnr:.4f}", f"{s.ssim:.4f}",
                        *(f"{s.extra[k]:.4f}" for k in keys)])
        return buf.getvalue()


REPORT_SCHEMA = {
    "type": "object",
    "required": ["protocol", "label", "images", "aggregate", "lpips", "failures"],
    "properties": {
        "protocol": {"enum": list(PROTOCOLS)},
        "label": {"type": "string"},
        "images": {"type": "array"},
        "aggregate": {"type": "object"},
        "lpips": {"type": "null"},
        "failures": {"type": "array"},
    },
}


def validate_report(d):
    """Minimal structural check of a serialized :class:`MetricsReport`."""
    for key in REPORT_SCHEMA["required"]:
        if key not in d:
            raise ValidationError(f"report is missing {key!r}")
    if d["protocol"] not in PROTOCOLS:
        raise ValidationError(f"bad protocol {d['protocol']!r}")
    if d["lpips"] is not None:
        raise ValidationError("lpips is reserved and must be null")
    for img in d["images"]:
        for key in ("image_id", "psnr", "ssim"):
            if key not in img:
                raise ValidationError(f"image score is missing {key!r}")
        if not np.isfinite(img["psnr"]) or not np.isfinite(img["ssim"]):
            raise ValidationError("non-finite score")
    return True
