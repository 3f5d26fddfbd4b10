"""Signal containers, frequency transforms and QAM constellations.

All waveforms are uniformly sampled complex baseband fields.  Amplitudes are
in sqrt(W), so ``mean(|x|**2)`` is the optical power in W.  The absolute
optical frequency that maps to baseband DC is carried as metadata only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ComplexWaveform",
    "DualPolWaveform",
    "Spectrum",
    "Constellation",
    "build_constellation",
    "to_spectrum",
    "to_waveform",
    "shift_frequency",
    "evm_db",
    "write_waveform",
    "read_waveform",
    "CONSTELLATION_KINDS",
]


def _frozen_array(x, dtype=complex):
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ComplexWaveform:
    """Complex field sampled at ``sample_rate`` around ``center_freq``."""

    samples: np.ndarray
    sample_rate: float
    center_freq: float = 0.0

    def __post_init__(self):
        s = _frozen_array(self.samples)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("waveform needs a nonempty 1-D sample array")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) / self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def time(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples) -> "ComplexWaveform":
        return replace(self, samples=samples)


@dataclass(frozen=True, eq=False)
class DualPolWaveform:
    """Two polarization tributaries on one shared grid."""

    pol_x: ComplexWaveform
    pol_y: ComplexWaveform

    def __post_init__(self):
        a, b = self.pol_x, self.pol_y
        if (len(a) != len(b) or a.sample_rate != b.sample_rate
                or a.center_freq != b.center_freq):
            raise ValueError("polarizations must share sample_rate, length and center_freq")

    @classmethod
    def from_array(cls, arr, sample_rate, center_freq=0.0) -> "DualPolWaveform":
        arr = np.asarray(arr)
        return cls(ComplexWaveform(arr[0], sample_rate, center_freq),
                   ComplexWaveform(arr[1], sample_rate, center_freq))

    def as_array(self) -> np.ndarray:
        """Samples stacked as a (2, N) array (a fresh, writable copy)."""
        return np.vstack([self.pol_x.samples, self.pol_y.samples])

    def with_array(self, arr) -> "DualPolWaveform":
        return DualPolWaveform.from_array(arr, self.sample_rate, self.center_freq)

    def __len__(self):
        return len(self.pol_x)

    @property
    def sample_rate(self) -> float:
        return self.pol_x.sample_rate

    @property
    def center_freq(self) -> float:
        return self.pol_x.center_freq

    @property
    def power(self) -> float:
        """Total power over both polarizations."""
        return self.pol_x.power + self.pol_y.power


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Centered DFT of a waveform.

    ``bins`` are ordered from ``-sample_rate/2`` upward and scaled by
    ``1/sqrt(N)`` so that ``sum(|bins|**2) / sample_rate`` equals the
    waveform energy.
    """

    bins: np.ndarray
    bin_spacing: float
    center_freq: float = 0.0

    def __post_init__(self):
        b = _frozen_array(self.bins)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("spectrum needs a nonempty 1-D bin array")
        object.__setattr__(self, "bins", b)

    @property
    def sample_rate(self) -> float:
        return self.bin_spacing * self.bins.size

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.bins) ** 2) / self.sample_rate)

    def freqs(self) -> np.ndarray:
        """Relative bin frequencies spanning [-fs/2, fs/2)."""
        n = self.bins.size
        return (np.arange(n) - n // 2) * self.bin_spacing


def to_spectrum(w: ComplexWaveform) -> Spectrum:
    n = len(w)
    bins = np.fft.fftshift(np.fft.fft(w.samples)) / np.sqrt(n)
    return Spectrum(bins, w.sample_rate / n, w.center_freq)


def to_waveform(s: Spectrum) -> ComplexWaveform:
    n = s.bins.size
    samples = np.fft.ifft(np.fft.ifftshift(s.bins)) * np.sqrt(n)
    return ComplexWaveform(samples, s.sample_rate, s.center_freq)


def shift_frequency(w: ComplexWaveform, df: float) -> tuple[ComplexWaveform, float]:
    """Move the content of ``w`` up by ``df`` Hz on the relative grid.

    The shift is rounded to a whole number of DFT bins so it stays exact and
    circular; the applied shift is returned alongside the new waveform.  The
    center-frequency metadata is lowered by the same amount so absolute
    frequencies are preserved.
    """
    n = len(w)
    k = int(round(df * n / w.sample_rate))
    applied = k * w.sample_rate / n
    ramp = np.exp(2j * np.pi * k * np.arange(n) / n)
    out = ComplexWaveform(w.samples * ramp, w.sample_rate, w.center_freq - applied)
    return out, applied


def evm_db(received, reference) -> float:
    """EVM in dB after the least-squares complex scale of ``reference``."""
    y = np.ravel(np.asarray(received))
    x = np.ravel(np.asarray(reference))
    a = np.vdot(x, y) / np.vdot(x, x)
    err = np.sum(np.abs(y - a * x) ** 2)
    ref = np.sum(np.abs(a * x) ** 2)
    if err == 0:
        return -np.inf
    return float(10 * np.log10(err / ref))


# --- constellations ---------------------------------------------------------

CONSTELLATION_KINDS = ("QPSK", "16QAM", "36QAM")


@dataclass(frozen=True, eq=False)
class Constellation:
    """QAM point set with bit labels.

    ``grid`` keeps the unnormalized odd-integer coordinates; ``points`` are
    ``grid * scale``.
    """

    kind: str
    points: np.ndarray
    labels: np.ndarray  # (M, m) array of 0/1
    grid: np.ndarray
    scale: float = field(default=1.0)

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points))
        object.__setattr__(self, "grid", _frozen_array(self.grid))
        object.__setattr__(self, "labels", _frozen_array(self.labels, dtype=np.uint8))

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    @property
    def size(self) -> int:
        return self.points.size

    def label_strings(self) -> list[str]:
        return ["".join(str(b) for b in row) for row in self.labels]

    def rescaled(self, scale: float) -> "Constellation":
        return replace(self, points=self.grid * scale, scale=scale)

    def nearest(self, y) -> np.ndarray:
        """Index of the closest point for every sample of ``y``."""
        y = np.asarray(y)
        d = np.abs(y.reshape(-1, 1) - self.points.reshape(1, -1))
        return np.argmin(d, axis=1).reshape(y.shape)


def _gray(n_bits: int) -> np.ndarray:
    codes = np.arange(2 ** n_bits)
    codes = codes ^ (codes >> 1)
    return ((codes[:, None] >> np.arange(n_bits - 1, -1, -1)) & 1).astype(np.uint8)


def _square_qam(levels_all: np.ndarray, keep: np.ndarray, bits_per_axis: int):
    """Gray-labeled square QAM restricted to the levels in ``keep``."""
    axis_gray = _gray(bits_per_axis)
    idx = [int(np.flatnonzero(levels_all == lv)[0]) for lv in keep]
    pts, labs = [], []
    for qi in idx:  # imag
        for ii in idx:  # real
            pts.append(levels_all[ii] + 1j * levels_all[qi])
            labs.append(np.concatenate([axis_gray[ii], axis_gray[qi]]))
    return np.array(pts), np.array(labs, dtype=np.uint8)


def build_constellation(kind: str) -> Constellation:
    """Unit-energy (uniform prior) constellation with Gray-consistent labels.

    36QAM is the {±1, ±3, ±5}² grid.  Its 6-bit labels are those of
    Gray-labeled 64QAM on the same points, i.e. per-axis 3-bit Gray codes of
    the 8-level alphabet with the outer levels ±7 dropped.
    """
    key = kind.upper().replace("-", "")
    if key == "QPSK":
        lv = np.array([-1.0, 1.0])
        pts, labs = _square_qam(lv, lv, 1)
    elif key == "16QAM":
        lv = np.array([-3.0, -1.0, 1.0, 3.0])
        pts, labs = _square_qam(lv, lv, 2)
    elif key == "36QAM":
        lv = np.array([-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0])
        pts, labs = _square_qam(lv, lv[1:-1], 3)
    else:
        raise ValueError(f"unsupported constellation kind {kind!r}; "
                         f"expected one of {CONSTELLATION_KINDS}")
    scale = 1.0 / np.sqrt(np.mean(np.abs(pts) ** 2))
    return Constellation(key, pts * scale, labs, pts, scale)


# --- waveform dump format ---------------------------------------------------

_MAGIC = b"SLWV"
_VERSION = 1
_HEADER = struct.Struct("<4sIQd8x")  # 32 bytes, last 8 reserved


def write_waveform(path, w: ComplexWaveform) -> None:
    """Write ``w`` as header + little-endian interleaved float64 (re, im)."""
    body = np.empty(2 * len(w), dtype="<f8")
    body[0::2] = w.samples.real
    body[1::2] = w.samples.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, len(w), float(w.sample_rate)))
        fh.write(body.tobytes())


def read_waveform(path, center_freq: float = 0.0) -> ComplexWaveform:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, fs = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * n:
        raise ValueError(f"{path}: expected {n} samples, found {body.size // 2}")
    return ComplexWaveform(body[0::2] + 1j * body[1::2], fs, center_freq)
