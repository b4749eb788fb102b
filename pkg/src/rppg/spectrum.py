"""Welch power spectra, heart-rate extraction, and agreement metrics.

HR is read as 60x the frequency of the largest Welch-spectrum peak inside
the physiological band (0.7-4.0 Hz, i.e. 42-240 bpm). Zero-padding the FFT
to 4096 points interpolates the spectrum finely enough that a 128-sample
clip resolves HR to well under half a beat per minute.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

HR_BAND_HZ = (0.7, 4.0)
DEFAULT_FFT_LEN = 4096
DEFAULT_SEGMENT_LEN = 128

# in-band peak must clear this fraction of the global PSD peak, otherwise
# the signal carries no pulse information in the band (Hann leakage from a
# tone 1 Hz outside the band lands near 1e-6, safely below this)
_MIN_INBAND_RATIO = 1e-5

# below this (relative to mean squared amplitude) the spectrum is floating
# dust from mean removal of a constant signal
_FLAT_FLOOR = 1e-18


class SignalError(ValueError):
    """Signal violates a spectral-estimation precondition."""


@dataclass
class RppgSignal:
    """A sampled waveform: per-frame values at the video frame rate."""

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate <= 0:
            raise SignalError("sample rate must be positive")
        if len(self.samples) < 2 * self.rate:
            raise SignalError(f"signal too short for a spectrum: {len(self.samples)} samples at {self.rate}/s")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("signal contains NaN/Inf")

    def __len__(self):
        return len(self.samples)


@dataclass
class HrEstimate:
    bpm: float

    def __post_init__(self):
        lo, hi = 60.0 * HR_BAND_HZ[0], 60.0 * HR_BAND_HZ[1]
        if not (lo <= self.bpm <= hi):
            raise SignalError(f"HR {self.bpm:.1f} bpm outside the plausible band [{lo:.0f}, {hi:.0f}]")


def welch_psd(signal: RppgSignal, segment_len=None, overlap=0.5, fft_len=DEFAULT_FFT_LEN):
    """Averaged periodogram: Hann-windowed, mean-removed, 50%-overlapped
    segments, zero-padded to ``fft_len``.

    Returns (freqs in Hz up to rate/2, one-sided power density >= 0).
    """
    x = signal.samples
    n = len(x)
    if segment_len is None:
        segment_len = min(DEFAULT_SEGMENT_LEN, n)
    if n < segment_len:
        raise SignalError(f"signal shorter than segment: {n} < {segment_len}")
    step = max(1, segment_len - int(segment_len * overlap))
    k = np.arange(segment_len)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * k / segment_len)
    scale = 1.0 / (signal.rate * float(np.sum(window**2)))

    power = np.zeros(fft_len // 2 + 1)
    count = 0
    for start in range(0, n - segment_len + 1, step):
        seg = x[start : start + segment_len]
        seg = (seg - seg.mean()) * window
        spec = np.fft.rfft(seg, n=fft_len)
        power += (spec.real**2 + spec.imag**2) * scale
        count += 1
    power /= count
    power[1:-1] *= 2.0  # one-sided
    freqs = np.fft.rfftfreq(fft_len, d=1.0 / signal.rate)
    return freqs, power


def estimate_hr(signal: RppgSignal, band=HR_BAND_HZ, segment_len=None, overlap=0.5, fft_len=DEFAULT_FFT_LEN) -> HrEstimate:
    """60x the argmax frequency of the Welch spectrum inside ``band``.

    Errors when the band holds no real peak (flat signal, or all power
    concentrated outside the band).
    """
    freqs, power = welch_psd(signal, segment_len, overlap, fft_len)
    in_band = (freqs >= band[0]) & (freqs <= band[1])
    if not np.any(in_band):
        raise SignalError("frequency grid does not cover the HR band")
    peak_global = float(power.max())
    band_power = power[in_band]
    flat_floor = _FLAT_FLOOR * max(1.0, float(np.mean(signal.samples**2)))
    if peak_global <= flat_floor or float(band_power.max()) < _MIN_INBAND_RATIO * peak_global:
        raise SignalError("no in-band power: signal carries no pulse in the HR band")
    f_peak = freqs[in_band][int(np.argmax(band_power))]
    return HrEstimate(bpm=60.0 * float(f_peak))


def video_hr(clip_signals) -> HrEstimate:
    """Arithmetic mean of the per-clip HR estimates for one video."""
    if not clip_signals:
        raise SignalError("no clips to estimate from")
    values = [estimate_hr(s).bpm for s in clip_signals]
    return HrEstimate(bpm=float(np.mean(values)))


@dataclass
class BlandAltman:
    """Agreement data: pairwise means vs differences with 1.96-sigma limits."""

    means: list
    diffs: list
    bias: float
    loa_lower: float
    loa_upper: float


@dataclass
class EvalReport:
    """Per-video HR pairs plus MAE/RMSE/Pearson R and agreement data."""

    pairs: list  # (hr_pred, hr_gt) per video
    mae: float
    rmse: float
    r: float
    bland_altman: BlandAltman
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "pairs": [[p, g] for p, g in self.pairs],
            "mae_bpm": self.mae,
            "rmse_bpm": self.rmse,
            "pearson_r": self.r,
            "bland_altman": {
                "means": self.bland_altman.means,
                "diffs": self.bland_altman.diffs,
                "bias": self.bland_altman.bias,
                "loa_lower": self.bland_altman.loa_lower,
                "loa_upper": self.bland_altman.loa_upper,
            },
            "meta": self.meta,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        d = json.loads(text)
        ba = d["bland_altman"]
        return cls(
            pairs=[(p, g) for p, g in d["pairs"]],
            mae=d["mae_bpm"],
            rmse=d["rmse_bpm"],
            r=d["pearson_r"],
            bland_altman=BlandAltman(ba["means"], ba["diffs"], ba["bias"], ba["loa_lower"], ba["loa_upper"]),
            meta=d.get("meta", {}),
        )


def compute_metrics(pairs, meta=None) -> EvalReport:
    """MAE, RMSE and Pearson R over (predicted, ground-truth) HR pairs,
    plus Bland-Altman agreement arrays."""
    pairs = [(float(p), float(g)) for p, g in pairs]
    if len(pairs) < 2:
        raise ValueError("need at least two videos for correlation")
    pred = np.array([p for p, _ in pairs])
    gt = np.array([g for _, g in pairs])
    err = pred - gt
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err**2)))
    pc = pred - pred.mean()
    gc = gt - gt.mean()
    denom = math.sqrt(float(np.sum(pc**2)) * float(np.sum(gc**2)))
    if denom == 0.0:
        raise ValueError("zero-variance HR values: correlation undefined")
    r = float(np.sum(pc * gc) / denom)

    diffs = err
    sd = float(np.std(diffs))
    bias = float(np.mean(diffs))
    ba = BlandAltman(
        means=list(((pred + gt) / 2.0)),
        diffs=list(diffs),
        bias=bias,
        loa_lower=bias - 1.96 * sd,
        loa_upper=bias + 1.96 * sd,
    )
    return EvalReport(pairs=pairs, mae=mae, rmse=rmse, r=r, bland_altman=ba, meta=meta or {})
