"""Two-slice optical arbitrary waveform generation and measurement.

Transmit side: RRC pulse shaping, complementary spectral slicing onto two
comb tones, per-slice driver impairments, the overlap-interference phase lock
and polarization-multiplexing emulation.  Receive side: two-LO coherent
capture of each polarization, overlap-based inter-slice phase estimation and
stitching back onto the full-band grid.

Slices are carried at the full-band sample rate, each centred on its tone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .sigcore import (ComplexWaveform, DualPolWaveform, shift_frequency,
                      write_waveform)
from .shaping import PilotFrame

__all__ = [
    "SliceSpec",
    "SceState",
    "TxImpairment",
    "PdmeConfig",
    "SliceRecord",
    "SceLockError",
    "rrc_response",
    "rrc_impulse",
    "shape_pulse",
    "matched_filter",
    "crossover_weights",
    "slice_waveform",
    "recombine",
    "sce_error",
    "sce_lock",
    "apply_tx_impairments",
    "pdme",
    "rx_slice_detect",
    "estimate_phase_offset",
    "stitch",
    "stitch_pair",
]

FULL_SCALE_TONES = (192.980e12, 193.124e12)


class SceLockError(RuntimeError):
    """The combining loop did not lock; ``residual`` holds the last estimate."""

    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class SliceSpec:
    """Geometry of the two-slice synthesis.

    ``overlap_width`` is both the width of the shared band and the width of
    the raised-cosine crossover between the slice filters.
    """

    tone_freqs: tuple[float, float] = FULL_SCALE_TONES
    overlap_width: float = 8e9
    rolloff: float = 0.05
    symbol_rate: float = 300e9
    n_slices: int = 2

    def __post_init__(self):
        if self.n_slices != 2:
            raise ValueError("only two slices are supported")
        if not self.fsr > 0:
            raise ValueError("tone_freqs must be increasing")
        if not 0 < self.overlap_width < self.fsr:
            raise ValueError("overlap_width must lie in (0, fsr)")
        if not 0 <= self.rolloff <= 1:
            raise ValueError("rolloff must lie in [0, 1]")
        if not self.symbol_rate > 0:
            raise ValueError("symbol_rate must be positive")

    @property
    def fsr(self) -> float:
        return self.tone_freqs[1] - self.tone_freqs[0]

    @property
    def center_freq(self) -> float:
        return 0.5 * (self.tone_freqs[0] + self.tone_freqs[1])

    def tone_offsets(self) -> tuple[float, float]:
        c = self.center_freq
        return (self.tone_freqs[0] - c, self.tone_freqs[1] - c)

    @classmethod
    def scaled(cls, factor: float, rolloff: float = 0.05) -> "SliceSpec":
        """Full-scale geometry with every frequency span multiplied by ``factor``.

        The centre stays at the full-scale absolute frequency.
        """
        c = 0.5 * (FULL_SCALE_TONES[0] + FULL_SCALE_TONES[1])
        half = 0.5 * (FULL_SCALE_TONES[1] - FULL_SCALE_TONES[0]) * factor
        return cls((c - half, c + half), 8e9 * factor, rolloff, 300e9 * factor)


# --- pulse shaping ------------------------------------------------------------

def rrc_response(f, symbol_rate, rolloff):
    """Root-raised-cosine amplitude response, unity in the passband."""
    f = np.abs(np.asarray(f, dtype=float))
    T = 1.0 / symbol_rate
    f1 = (1 - rolloff) / (2 * T)
    f2 = (1 + rolloff) / (2 * T)
    h = np.zeros_like(f)
    h[f <= f1] = 1.0
    if rolloff > 0:
        mid = (f > f1) & (f <= f2)
        h[mid] = np.sqrt(0.5 * (1 + np.cos(np.pi * T / rolloff * (f[mid] - f1))))
    return h


def rrc_impulse(t, symbol_rate, rolloff):
    """Closed-form RRC impulse response (peak 1 + rolloff(4/pi - 1) at t=0)."""
    T = 1.0 / symbol_rate
    x = np.asarray(t, dtype=float) / T
    b = rolloff
    out = np.empty_like(x)
    at0 = np.isclose(x, 0.0)
    sing = np.isclose(np.abs(4 * b * x), 1.0) if b > 0 else np.zeros_like(at0)
    reg = ~(at0 | sing)
    xr = x[reg]
    num = np.sin(np.pi * xr * (1 - b)) + 4 * b * xr * np.cos(np.pi * xr * (1 + b))
    den = np.pi * xr * (1 - (4 * b * xr) ** 2)
    out[reg] = num / den
    out[at0] = 1 + b * (4 / np.pi - 1)
    if b > 0:
        out[sing] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                      + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
    return out


def shape_pulse(frame, spec: SliceSpec, sps: int) -> ComplexWaveform:
    """RRC-shaped waveform of ``frame`` at ``sps`` samples/symbol, unit power.

    Filtering is circular (frequency domain), so the waveform is periodic
    with the frame.  Symbol k sits at sample ``k * sps``.
    """
    symbols = frame.symbols if isinstance(frame, PilotFrame) else np.asarray(frame)
    sps = int(sps)
    if sps < 2 * (1 + spec.rolloff):
        raise ValueError(f"sps={sps} too small for rolloff {spec.rolloff}; "
                         f"need at least {2 * (1 + spec.rolloff):g}")
    n = symbols.size * sps
    up = np.zeros(n, dtype=complex)
    up[::sps] = symbols
    fs = sps * spec.symbol_rate
    f = np.fft.fftfreq(n, 1 / fs)
    x = np.fft.ifft(np.fft.fft(up) * rrc_response(f, spec.symbol_rate, spec.rolloff))
    p = np.mean(np.abs(x) ** 2)
    if p == 0:
        raise ValueError("cannot shape an all-zero frame")
    return ComplexWaveform(x / np.sqrt(p), fs, spec.center_freq)


def matched_filter(w: ComplexWaveform, symbol_rate: float, rolloff: float,
                   sps_out: int = 1) -> np.ndarray:
    """Apply the RRC matched filter and resample to ``sps_out`` samples/symbol.

    Resampling is done by truncating/zero-padding the spectrum, which is exact
    for a band-limited periodic record whose length is a whole number of
    symbols.  The output is not power-normalized.
    """
    x = np.asarray(w.samples)
    n = x.size
    n_sym = n * symbol_rate / w.sample_rate
    if abs(n_sym - round(n_sym)) > 1e-6:
        raise ValueError("record must hold a whole number of symbols")
    n_out = int(round(n_sym)) * int(sps_out)
    f = np.fft.fftfreq(n, 1 / w.sample_rate)
    X = np.fft.fft(x) * rrc_response(f, symbol_rate, rolloff)
    return _resample_spectrum(X, n_out) * (n_out / n)


def _resample_spectrum(X, n_out):
    n = X.size
    if n_out == n:
        return np.fft.ifft(X)
    if n_out < n and n % n_out == 0:
        # integer decimation: folding the spectrum equals sampling, aliases included
        return np.fft.ifft(X.reshape(n // n_out, n_out).sum(axis=0))
    Y = np.zeros(n_out, dtype=complex)
    h = min(n, n_out) // 2
    Y[:h] = X[:h]
    Y[-h:] = X[-h:]
    return np.fft.ifft(Y)


# --- slicing ------------------------------------------------------------------

def crossover_weights(f, spec: SliceSpec):
    """Complementary amplitude weights (w1, w2) on relative frequency ``f``.

    w1 is one below the overlap band and rolls off with a raised cosine
    across it; w2 = 1 - w1.  Both equal 0.5 at the midpoint between tones.
    """
    f = np.asarray(f, dtype=float)
    W = spec.overlap_width
    u = np.clip((f + W / 2) / W, 0.0, 1.0)
    w1 = 0.5 * (1 + np.cos(np.pi * u))
    return w1, 1.0 - w1


def _common_freqs(n, fs):
    return np.fft.fftfreq(n, 1 / fs)


def slice_waveform(w: ComplexWaveform, spec: SliceSpec):
    """Split ``w`` into two slices, each moved down to baseband at its tone."""
    n = len(w)
    fs = w.sample_rate
    f = _common_freqs(n, fs)
    S = np.fft.fft(w.samples)
    limit = fs / 2 - spec.fsr / 2
    outside = np.sum(np.abs(S[np.abs(f) > limit]) ** 2)
    if outside > 1e-10 * np.sum(np.abs(S) ** 2):
        raise ValueError("signal exceeds the band representable after slicing")
    w1, w2 = crossover_weights(f, spec)
    slices = []
    for wk, tone in zip((w1, w2), spec.tone_freqs):
        part = ComplexWaveform(np.fft.ifft(S * wk), fs, w.center_freq)
        moved, _ = shift_frequency(part, -(tone - w.center_freq))
        slices.append(moved)
    return slices[0], slices[1]


def _to_center(s: ComplexWaveform, center: float) -> ComplexWaveform:
    moved, _ = shift_frequency(s, s.center_freq - center)
    return ComplexWaveform(moved.samples, moved.sample_rate, center)


def recombine(s1: ComplexWaveform, s2: ComplexWaveform, spec: SliceSpec,
              phase: float = 0.0) -> ComplexWaveform:
    """Coherent sum of the slices on the common grid; ``phase`` rotates slice 1."""
    a = _to_center(s1, spec.center_freq)
    b = _to_center(s2, spec.center_freq)
    return ComplexWaveform(a.samples * np.exp(1j * phase) + b.samples,
                           a.sample_rate, spec.center_freq)


def _overlap_terms(a: np.ndarray, b: np.ndarray, fs: float, spec: SliceSpec):
    """Cross term sum(A B*) and magnitude sum(|A||B|) over the overlap band."""
    f = _common_freqs(a.size, fs)
    band = np.abs(f) <= spec.overlap_width / 2
    A = np.fft.fft(a)[band]
    B = np.fft.fft(b)[band]
    return np.sum(A * np.conj(B)), np.sum(np.abs(A) * np.abs(B)), \
        np.sum(np.abs(A) ** 2) + np.sum(np.abs(B) ** 2)


def _tx_overlap(s1, s2, spec):
    a = _to_center(s1, spec.center_freq)
    b = _to_center(s2, spec.center_freq)
    cross, mag, _ = _overlap_terms(a.samples, b.samples, a.sample_rate, spec)
    if mag <= 1e-300:
        raise ValueError("no power in the overlap band")
    return cross, mag


def sce_error(s1, s2, spec: SliceSpec, injected_phase: float) -> float:
    """Combiner error signal for slice 1 carrying an extra phase ``injected_phase``.

    Equals sin(phase) for noiseless slices cut from one waveform.
    """
    cross, mag = _tx_overlap(s1, s2, spec)
    return float((np.exp(1j * injected_phase) * cross).imag / mag)


@dataclass(frozen=True)
class SceState:
    phase_error: float = 0.0
    error_signal: float = 0.0
    loop_gain: float = 0.5
    locked: bool = False
    tolerance: float = 1e-3
    iterations: int = 0
    dither_events: int = 0
    trajectory: tuple = ()

    def __post_init__(self):
        if not 0 < self.loop_gain <= 2:
            raise ValueError("loop_gain must lie in (0, 2]")


def sce_lock(s1, s2, spec: SliceSpec, state: SceState, max_iters: int = 200,
             dither: float = 0.1):
    """Run the combiner loop ``phi <- phi - gain * U_err`` until locked.

    ``state.phase_error`` is the starting optical phase of slice 1 relative to
    slice 2.  The loop sees only the error signal; lock is declared when the
    in-phase/quadrature residual of the overlap interference is below
    ``state.tolerance``.  At the unstable point (U_err ~ 0 with destructive
    interference) the actuator is kicked by ``dither`` radians.

    Returns (slice 1 with its final phase applied, slice 2, new state).
    """
    cross, mag = _tx_overlap(s1, s2, spec)
    phi = float(state.phase_error)
    g = state.loop_gain
    traj = [phi]
    kicks = 0
    it = 0
    while True:
        z = np.exp(1j * phi) * cross / mag
        u = float(z.imag)
        resid = float(np.angle(z))
        if abs(resid) < state.tolerance:
            break
        if it >= max_iters:
            raise SceLockError(f"no lock after {max_iters} iterations "
                               f"(residual {resid:.3g} rad)", resid)
        if abs(u) < state.tolerance and z.real < 0:
            phi += dither
            kicks += 1
        else:
            phi -= g * u
        traj.append(phi)
        it += 1
    new = replace(state, phase_error=phi, error_signal=u, locked=True,
                  iterations=it, dither_events=kicks, trajectory=tuple(traj))
    return s1.with_samples(s1.samples * np.exp(1j * phi)), s2, new


# --- transmitter impairments --------------------------------------------------

@dataclass(frozen=True)
class TxImpairment:
    """Driver/modulator non-idealities; defaults are ideal."""

    bandwidth_3db: float = np.inf
    iq_gain_imbalance: float = 0.0   # dB
    iq_phase_imbalance: float = 0.0  # degrees
    iq_skew: float = 0.0             # s
    floor_snr: float = np.inf        # dB

    def __post_init__(self):
        if not self.bandwidth_3db > 0:
            raise ValueError("bandwidth_3db must be positive")
        if not self.floor_snr > 0:
            raise ValueError("floor_snr must exceed 0 dB")

    def without_noise(self) -> "TxImpairment":
        return replace(self, floor_snr=np.inf)

    def noise_only(self) -> "TxImpairment":
        return TxImpairment(floor_snr=self.floor_snr)


def apply_tx_impairments(w: ComplexWaveform, imp: TxImpairment, seed,
                         symbol_rate: float | None = None) -> ComplexWaveform:
    """Low-pass, IQ gain/phase imbalance and skew, then additive noise.

    The low-pass has the zero-phase magnitude of a 2nd-order Butterworth,
    1/sqrt(1 + (f/B)^4).  The noise level makes Es/N0 equal ``floor_snr``
    when ``symbol_rate`` is given; otherwise the SNR is taken over the full
    sample band.
    """
    x = np.array(w.samples, dtype=complex)
    n = x.size
    fs = w.sample_rate
    f = np.fft.fftfreq(n, 1 / fs)
    if np.isfinite(imp.bandwidth_3db):
        x = np.fft.ifft(np.fft.fft(x) / np.sqrt(1 + (f / imp.bandwidth_3db) ** 4))
    if imp.iq_gain_imbalance or imp.iq_phase_imbalance or imp.iq_skew:
        i, q = x.real, x.imag
        if imp.iq_skew:
            q = np.fft.ifft(np.fft.fft(q) * np.exp(-2j * np.pi * f * imp.iq_skew)).real
        gi = 10 ** (imp.iq_gain_imbalance / 40)
        gq = 10 ** (-imp.iq_gain_imbalance / 40)
        th = np.deg2rad(imp.iq_phase_imbalance)
        x = gi * i + 1j * gq * (q * np.cos(th) + i * np.sin(th))
    if np.isfinite(imp.floor_snr):
        p = np.mean(np.abs(x) ** 2)
        band = fs / symbol_rate if symbol_rate else 1.0
        var = p * band / 10 ** (imp.floor_snr / 10)
        rng = np.random.default_rng(seed)
        x = x + np.sqrt(var / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return w.with_samples(x)


# --- polarization multiplexing emulator -----------------------------------------

@dataclass(frozen=True)
class PdmeConfig:
    delay: float = 84e-9
    split_ratio: float = 0.5

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be nonnegative")
        if self.split_ratio != 0.5:
            raise ValueError("only a 1:1 split is supported")

    def delay_samples(self, sample_rate: float) -> int:
        return int(round(self.delay * sample_rate))


def pdme(w: ComplexWaveform, cfg: PdmeConfig) -> DualPolWaveform:
    """Split-and-delay: pol_x = w, pol_y = w circularly delayed."""
    k = cfg.delay_samples(w.sample_rate)
    return DualPolWaveform(w, w.with_samples(np.roll(w.samples, k)))


# --- receiver -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SliceRecord:
    """One captured slice of one polarization, centred on its LO."""

    waveform: ComplexWaveform
    slice_index: int
    pol: str
    lo_freq: float
    bandwidth: float
    seed: int | list
    injected_offset: float = field(default=0.0)

    def sidecar(self) -> dict:
        return {
            "slice_index": self.slice_index,
            "pol": self.pol,
            "lo_freq": self.lo_freq,
            "bandwidth": self.bandwidth,
            "seed": self.seed,
            "injected_offset": self.injected_offset,
            "sample_rate": self.waveform.sample_rate,
            "length": len(self.waveform),
        }

    def dump(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.slwv`` and ``<stem>.json``."""
        stem = Path(stem)
        wav = stem.with_suffix(".slwv")
        side = stem.with_suffix(".json")
        write_waveform(wav, self.waveform)
        side.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return wav, side


def _rx_filter(f, bandwidth, edge=0.1):
    """Flat to ``bandwidth``, raised-cosine roll-off over ``edge*bandwidth``."""
    a = np.abs(f)
    h = np.ones_like(a)
    lo, hi = bandwidth, bandwidth * (1 + edge)
    mid = (a > lo) & (a < hi)
    h[mid] = 0.5 * (1 + np.cos(np.pi * (a[mid] - lo) / (hi - lo)))
    h[a >= hi] = 0.0
    return h


def rx_slice_detect(field: DualPolWaveform, lo_freqs, rx_bandwidth: float, seed,
                    spec: SliceSpec, *, snr_db: float = np.inf, phase_offsets=None):
    """Coherently capture two slices of each polarization.

    Each record is the field mixed down by its LO (times ``exp(-j theta_k)``
    for the LO phase ``theta_k``), receiver noise, then the electrical
    low-pass.  LO phases are drawn uniformly from the seed unless
    ``phase_offsets`` is given; both polarizations share an LO.  ``snr_db``
    is the in-band signal-to-noise PSD ratio, taking the signal PSD as
    ``pol_power / symbol_rate``.

    Returns ``[[x1, x2], [y1, y2]]``.
    """
    need = spec.fsr / 2 + spec.overlap_width / 2
    if not rx_bandwidth > need:
        raise ValueError(f"rx_bandwidth {rx_bandwidth:g} Hz must exceed "
                         f"fsr/2 + overlap/2 = {need:g} Hz")
    rng = np.random.default_rng(seed)
    if phase_offsets is None:
        phase_offsets = rng.uniform(-np.pi, np.pi, size=2)
    n = len(field)
    fs = field.sample_rate
    f = np.fft.fftfreq(n, 1 / fs)
    h = _rx_filter(f, rx_bandwidth)
    out = []
    for pol, wave in (("x", field.pol_x), ("y", field.pol_y)):
        p_sig = wave.power
        row = []
        for k in range(2):
            # nominal tone offset and LO error are rounded to the grid separately so
            # a common LO error lands identically on both slices
            mixed, a1 = shift_frequency(wave, -(spec.tone_freqs[k] - field.center_freq))
            mixed, a2 = shift_frequency(mixed, -(lo_freqs[k] - spec.tone_freqs[k]))
            applied = a1 + a2
            x = mixed.samples * np.exp(-1j * phase_offsets[k])
            if np.isfinite(snr_db):
                var = p_sig / spec.symbol_rate * fs / 10 ** (snr_db / 10)
                x = x + np.sqrt(var / 2) * (rng.standard_normal(n)
                                            + 1j * rng.standard_normal(n))
            x = np.fft.ifft(np.fft.fft(x) * h)
            row.append(SliceRecord(ComplexWaveform(x, fs, mixed.center_freq), k, pol,
                                   field.center_freq - applied, rx_bandwidth,
                                   seed if np.isscalar(seed) else [int(v) for v in seed],
                                   float(phase_offsets[k])))
        out.append(row)
    return out


def _record_on_common_grid(rec: SliceRecord, spec: SliceSpec) -> np.ndarray:
    # the receiver knows only the nominal LO spacing, not the common LO error
    k = rec.slice_index
    moved, _ = shift_frequency(rec.waveform, spec.tone_offsets()[k])
    return moved.samples


def estimate_phase_offset(r1: SliceRecord, r2: SliceRecord, spec: SliceSpec,
                          min_fraction: float = 1e-6) -> float:
    """arg of sum(S1 S2*) over the overlap band, in (-pi, pi]."""
    a = _record_on_common_grid(r1, spec)
    b = _record_on_common_grid(r2, spec)
    if a.size != b.size:
        raise ValueError("records are on different grids")
    cross, mag, band_power = _overlap_terms(a, b, r1.waveform.sample_rate, spec)
    # Parseval: spectral power is N times the time-domain sum
    total = a.size * (np.sum(np.abs(a) ** 2) + np.sum(np.abs(b) ** 2))
    if not band_power > min_fraction * total or mag == 0:
        raise ValueError("overlap power below threshold; phase estimate meaningless")
    phi = float(np.angle(cross))
    return np.pi if phi == -np.pi else phi


def stitch_pair(r1: SliceRecord, r2: SliceRecord, phase: float,
                spec: SliceSpec) -> ComplexWaveform:
    if (len(r1.waveform) != len(r2.waveform)
            or r1.waveform.sample_rate != r2.waveform.sample_rate):
        raise ValueError("grid mismatch between slice records")
    fs = r1.waveform.sample_rate
    a = _record_on_common_grid(r1, spec)
    b = _record_on_common_grid(r2, spec) * np.exp(1j * phase)
    f = _common_freqs(a.size, fs)
    w1, w2 = crossover_weights(f, spec)
    x = np.fft.ifft(np.fft.fft(a) * w1 + np.fft.fft(b) * w2)
    return ComplexWaveform(x, fs, spec.center_freq)


def stitch(records, phase, spec: SliceSpec) -> DualPolWaveform:
    """Phase-align slice 2 to slice 1 and sum with the crossover weights.

    ``phase`` comes from :func:`estimate_phase_offset`; a scalar applies to
    both polarizations, a pair gives one value per polarization.
    """
    phases = np.broadcast_to(np.asarray(phase, dtype=float), (2,))
    x = stitch_pair(records[0][0], records[0][1], phases[0], spec)
    y = stitch_pair(records[1][0], records[1][1], phases[1], spec)
    return DualPolWaveform(x, y)
