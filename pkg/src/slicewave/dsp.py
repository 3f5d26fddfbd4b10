"""Coherent receiver DSP.

Chain: chromatic dispersion compensation, matched filtering to 2 samples
per symbol, pilot-aided 2x2 butterfly LMS with decimation to 1 sample per
symbol, frequency-offset recovery, pilot-aided carrier phase recovery and a
widely-linear LMS stage against transmitter IQ imbalance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .channel import apply_dispersion, dispersion_phase
from .sigcore import DualPolWaveform
from .slicer import matched_filter

__all__ = [
    "DspConfig",
    "EqualizedFrame",
    "DemodulationError",
    "EqualizerConvergenceError",
    "FrequencyOffsetError",
    "CycleSlipWarning",
    "cd_compensate",
    "resample_2sps",
    "mimo_equalize",
    "freq_offset_recover",
    "carrier_phase_recover",
    "wl_postequalize",
    "strip_pilots",
    "discard_head",
    "demodulate",
]


class DemodulationError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


class EqualizerConvergenceError(RuntimeError):
    pass


class FrequencyOffsetError(ValueError):
    pass


class CycleSlipWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class DspConfig:
    """Receiver settings.

    ``pilots`` holds the transmitted frame of each polarization (pilot
    positions, pilot symbols and, for metrics, the data).  ``points`` is the
    data constellation used for decision-directed updates.
    """

    symbol_rate: float
    pilots: tuple
    points: np.ndarray
    rolloff: float = 0.05
    cdc_total_ps_per_nm: float = 0.0
    cdc_slope_ps_per_nm2: float = 0.0
    reference_wavelength: float = 1550.0
    cd_block_size: int | None = None
    mimo_taps: int = 15
    mimo_init: str = "ls"
    mimo_step: float = 5e-3
    mimo_passes: int = 4
    mimo_step_decay: float = 0.5
    mimo_dd_step: float = 0.0
    pll_kp: float = 0.03
    pll_ki: float = 3e-4
    mimo_mse_threshold: float = 0.5
    cpr_interp: str = "linear"
    cpr_window: int = 101
    wl_taps: int = 5
    wl_step: float = 2e-3
    wl_passes: int = 6
    sps_in: int = 2

    def __post_init__(self):
        if self.mimo_taps % 2 != 1 or self.mimo_taps < 1:
            raise ValueError("mimo_taps must be odd")
        if not 0 < self.mimo_step < 1:
            raise ValueError("mimo_step must lie in (0, 1)")
        if self.sps_in != 2:
            raise ValueError("the butterfly equalizer takes 2 samples/symbol")
        if self.mimo_init not in ("ls", "identity"):
            raise ValueError("mimo_init must be 'ls' or 'identity'")
        if self.cpr_interp not in ("linear", "nearest"):
            raise ValueError("cpr_interp must be 'linear' or 'nearest'")
        if self.wl_taps and self.wl_taps % 2 != 1:
            raise ValueError("wl_taps must be odd (0 disables the stage)")
        if len(self.pilots) != 2:
            raise ValueError("one pilot frame per polarization required")
        object.__setattr__(self, "points", np.asarray(self.points, dtype=complex))

    @property
    def pilot_period(self) -> int:
        pos = self.pilots[0].pilot_positions
        return int(np.median(np.diff(pos))) if pos.size > 1 else len(self.pilots[0])


@dataclass(frozen=True, eq=False)
class EqualizedFrame:
    """Dual-polarization symbols at 1 sample/symbol, shape (2, N)."""

    symbols: np.ndarray
    pilots: tuple
    symbol_rate: float
    residual_pilots_removed: bool = False
    estimated_freq_offset: float = 0.0
    phase_track: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.atleast_2d(np.array(self.symbols, dtype=complex))
        if s.shape[0] != 2:
            raise ValueError("symbols must have shape (2, N)")
        object.__setattr__(self, "symbols", s)

    def __len__(self):
        return self.symbols.shape[1]

    def refs(self) -> np.ndarray:
        return np.vstack([p.symbols for p in self.pilots])

    def pilot_masks(self) -> np.ndarray:
        return np.vstack([p.pilot_mask for p in self.pilots])


# --- chromatic dispersion ----------------------------------------------------------

def cd_compensate(record: DualPolWaveform, accumulated_D: float, slope_term: float = 0.0,
                  f0: float | None = None, reference_wavelength: float = 1550.0,
                  block_size: int | None = None) -> DualPolWaveform:
    """Undo accumulated dispersion [ps/nm] and slope [ps/nm^2].

    Whole-record frequency-domain filtering by default.  With ``block_size``
    the record is processed by overlap-save in blocks of that FFT size with
    half-block overlap (record treated as periodic).
    """
    if len(record) == 0:
        raise ValueError("empty record")
    if accumulated_D == 0 and slope_term == 0:
        return record
    fc = record.center_freq if f0 is None else f0
    if block_size is None:
        r = record if f0 is None else DualPolWaveform.from_array(
            record.as_array(), record.sample_rate, fc)
        out = apply_dispersion(r, -accumulated_D, -slope_term, reference_wavelength)
        return record.with_array(out.as_array())

    nfft = int(block_size)
    ov = nfft // 2
    hop = nfft - ov
    fq = np.fft.fftfreq(nfft, 1 / record.sample_rate)
    H = np.exp(-1j * dispersion_phase(fq, fc, accumulated_D, slope_term, reference_wavelength))
    x = record.as_array()
    n = x.shape[1]
    n_blocks = -(-n // hop)
    # periodic extension: ov/2 samples of history ahead of each kept segment
    ext = np.take(x, np.arange(-(ov // 2), n_blocks * hop + nfft - hop - ov // 2), axis=1,
                  mode="wrap")
    y = np.empty((2, n_blocks * hop), dtype=complex)
    for b in range(n_blocks):
        seg = ext[:, b * hop: b * hop + nfft]
        out = np.fft.ifft(np.fft.fft(seg, axis=1) * H, axis=1)
        y[:, b * hop:(b + 1) * hop] = out[:, ov // 2: ov // 2 + hop]
    return record.with_array(y[:, :n])


def resample_2sps(record: DualPolWaveform, symbol_rate: float, rolloff: float) -> np.ndarray:
    """Matched-filter both polarizations and resample to 2 samples/symbol."""
    return np.vstack([matched_filter(record.pol_x, symbol_rate, rolloff, 2),
                      matched_filter(record.pol_y, symbol_rate, rolloff, 2)])


# --- 2x2 MIMO -------------------------------------------------------------------

@njit(cache=True)
def _nearest(y, points):
    best = 0
    bd = np.inf
    for j in range(points.size):
        d = (y.real - points[j].real) ** 2 + (y.imag - points[j].imag) ** 2
        if d < bd:
            bd = d
            best = j
    return points[best]


@njit(cache=True)
def _butterfly_pass(xp, h, ref, is_pilot, mu, mu_dd, use_dd, use_pll, points,
                    kp, ki, theta, omega, out, track):
    n_taps = h.shape[2]
    n_sym = ref.shape[1]
    se = 0.0
    cnt = 0
    for n in range(n_sym):
        for p in range(2):
            acc = 0j
            for q in range(2):
                for k in range(n_taps):
                    acc += h[p, q, k] * xp[q, 2 * n + k]
            out[p, n] = acc
            track[p, n] = theta[p]
            rot = np.exp(1j * theta[p])
            step = 0.0
            e = 0j
            if is_pilot[p, n]:
                d = ref[p, n] * rot
                e = d - acc
                se += e.real ** 2 + e.imag ** 2
                cnt += 1
                step = mu
                if use_pll:
                    z = acc * np.conj(ref[p, n]) * np.conj(rot)
                    eps = np.arctan2(z.imag, z.real)
                    theta[p] += kp * eps
                    omega[p] += ki * eps
            elif use_dd:
                d = _nearest(acc * np.conj(rot), points) * rot
                e = d - acc
                step = mu_dd
            if step > 0.0:
                for q in range(2):
                    for k in range(n_taps):
                        h[p, q, k] += step * e * np.conj(xp[q, 2 * n + k])
        if use_pll:
            theta[0] += omega[0]
            theta[1] += omega[1]
    return se / max(cnt, 1)


def _pilot_fo_estimate(x2, frames, symbol_rate, lags=(1, 8, 64, 512)):
    """FO from pilot pairs, insensitive to polarization mixing.

    r_n = x[:, 2 pos_n] conj(p_n) is the mixing column times exp(j theta_n);
    the phase of sum(r_{n+k} . conj(r_n)) is theta's increment over k pilot
    periods.  Lags grow geometrically, each refining the residual left by
    the previous one, so the range is that of lag 1 (R/2P) and the accuracy
    that of the longest lag.
    """
    rs, poss = [], []
    g = None
    for fr in frames:
        pos = fr.pilot_positions
        if pos.size < 2:
            continue
        rs.append(x2[:, 2 * pos] * np.conj(fr.pilot_symbols))
        poss.append(pos)
        g = int(np.median(np.diff(pos)))
    if g is None:
        return 0.0
    f = 0.0
    for lag in lags:
        acc = 0j
        for r, pos in zip(rs, poss):
            if pos.size <= 4 * lag:
                continue
            ok = (pos[lag:] - pos[:-lag]) == lag * g
            rr = r * np.exp(-2j * np.pi * f * pos / symbol_rate)
            acc += np.sum(np.sum(rr[:, lag:][:, ok] * np.conj(rr[:, :-lag][:, ok]), axis=0))
        if acc == 0:
            break
        f += float(np.angle(acc) / (2 * np.pi * lag * g) * symbol_rate)
    return f


def _ls_taps(xp, ref, mask, L, ridge=1e-3):
    """Least-squares butterfly taps from the pilots, or None if too few.

    The fit is ridge-regularized toward the identity butterfly so that
    directions the band-limited pilots do not excite stay put.
    """
    h = np.zeros((2, 2, L), dtype=complex)
    k = np.arange(L)
    for p in range(2):
        n = np.flatnonzero(mask[p])
        if n.size < 8 * L:
            return None
        A = np.hstack([xp[q][2 * n[:, None] + k[None, :]] for q in range(2)])
        h0 = np.zeros(2 * L, dtype=complex)
        h0[p * L + L // 2] = 1.0
        lam = ridge * np.mean(np.sum(np.abs(A) ** 2, axis=1))
        G = A.conj().T @ A + lam * np.eye(2 * L)
        sol = h0 + np.linalg.solve(G, A.conj().T @ (ref[p, n] - A @ h0))
        h[p, 0], h[p, 1] = sol[:L], sol[L:]
    return h


def mimo_equalize(record, cfg: DspConfig) -> EqualizedFrame:
    """Fractionally spaced 2x2 butterfly adapted by pilot-aided LMS.

    ``record`` is a (2, 2N) array or DualPolWaveform at 2 samples/symbol.
    A coarse frequency offset is first estimated from consecutive pilots and
    removed.  Taps start from the least-squares fit to the pilots
    (``mimo_init="ls"``, identity when pilots are scarce), so any fixed
    polarization state is absorbed at once.  Passes then adapt on pilots, the step shrinking by
    ``mimo_step_decay`` per pass; with ``mimo_dd_step > 0`` the final pass
    also adapts decision-directed between pilots (off by default: at low
    SNR decision errors bias the taps).  From the second pass a second-order
    pilot-driven PLL (gains per pilot ``pll_kp``, ``pll_ki``) tracks the
    carrier so the taps need not follow it.

    The output is decimated to 1 sample/symbol with the tracked carrier
    removed; the offset found so far (coarse estimate plus the mean slope of
    the removed track) is recorded in ``estimated_freq_offset``.
    """
    x = record.as_array() if isinstance(record, DualPolWaveform) else np.asarray(record, complex)
    n_sym = len(cfg.pilots[0])
    if x.shape != (2, 2 * n_sym):
        raise ValueError(f"record shape {x.shape} does not match 2 sps x {n_sym} symbols")
    x = x / np.sqrt(np.mean(np.abs(x) ** 2))
    R = cfg.symbol_rate
    fo = _pilot_fo_estimate(x, cfg.pilots, R)
    t = np.arange(2 * n_sym) / (2 * R)
    x = x * np.exp(-2j * np.pi * fo * t)

    L = cfg.mimo_taps
    xp = np.pad(x, ((0, 0), (L // 2, L // 2)), mode="wrap")
    ref = np.vstack([p.symbols for p in cfg.pilots])
    mask = np.vstack([p.pilot_mask for p in cfg.pilots])
    h = _ls_taps(xp, ref, mask, L) if cfg.mimo_init == "ls" else None
    if h is None:
        h = np.zeros((2, 2, L), dtype=complex)
        h[0, 0, L // 2] = 1.0
        h[1, 1, L // 2] = 1.0
    P = cfg.pilot_period
    kp, ki = cfg.pll_kp, cfg.pll_ki / P
    theta = np.zeros(2)
    omega = np.zeros(2)
    out = np.empty((2, n_sym), dtype=complex)
    track = np.zeros((2, n_sym))
    mse = []
    mu = cfg.mimo_step
    for k in range(cfg.mimo_passes):
        last = k == cfg.mimo_passes - 1
        use_pll = k > 0
        theta0 = theta - omega * n_sym if use_pll and k > 1 else np.zeros(2)
        theta = theta0.copy()
        mse.append(_butterfly_pass(xp, h, ref, mask, mu, cfg.mimo_dd_step,
                                   last and cfg.mimo_dd_step > 0, use_pll, cfg.points,
                                   kp, ki, theta, omega, out, track))
        mu *= cfg.mimo_step_decay
    if not mse[-1] < cfg.mimo_mse_threshold:
        raise EqualizerConvergenceError(
            f"pilot MSE {mse[-1]:.3g} above threshold {cfg.mimo_mse_threshold}")
    out = out * np.exp(-1j * track)
    # the taps share the carrier phase with the PLL, so the frequency actually
    # removed is the slope of the applied track, not the loop's final state
    f_pll = float(np.polyfit(np.arange(n_sym), track.mean(axis=0), 1)[0]) * R / (2 * np.pi)
    return EqualizedFrame(out, tuple(cfg.pilots), R, estimated_freq_offset=fo + f_pll,
                          phase_track=track,
                          diagnostics={"mimo_taps": h, "mimo_mse": mse,
                                       "coarse_freq_offset": fo})


# --- frequency offset ------------------------------------------------------------

def _fourth_power_fo(y, symbol_rate):
    n = y.shape[1]
    nfft = 1 << int(np.ceil(np.log2(4 * n)))
    S = np.sum(np.abs(np.fft.fft(y ** 4, nfft, axis=1)) ** 2, axis=0)
    k = int(np.argmax(S))
    f = np.fft.fftfreq(nfft, 1 / symbol_rate)[k]
    return f / 4


def _pilot_slope_fit(y, frames, smooth=1):
    """LS fit of a common slope (one intercept per pol) to unwrapped pilot phases.

    Pilot correlations are first summed over ``smooth`` neighbours so that
    noise does not trigger false 2*pi unwraps.  Returns (slope in
    rad/symbol, coherence of the fit residuals).
    """
    ts, ph, grp = [], [], []
    for p, fr in enumerate(frames):
        pos = fr.pilot_positions
        if pos.size < 2:
            continue
        z = y[p, pos] * np.conj(fr.pilot_symbols)
        t = pos.astype(float)
        k = min(smooth, pos.size // 2)
        if k > 1:
            z = np.convolve(z, np.ones(k), mode="valid")
            t = np.convolve(t, np.ones(k) / k, mode="valid")
        ts.append(t)
        ph.append(np.unwrap(np.angle(z)))
        grp.append(np.full(t.size, p))
    if not ts:
        raise FrequencyOffsetError("need at least two pilots per polarization")
    t = np.concatenate(ts)
    phi = np.concatenate(ph)
    g = np.concatenate(grp)
    A = np.column_stack([t] + [(g == p).astype(float) for p in np.unique(g)])
    coef, *_ = np.linalg.lstsq(A, phi, rcond=None)
    resid = phi - A @ coef
    return coef[0], abs(np.mean(np.exp(1j * resid)))


def freq_offset_recover(frame: EqualizedFrame, coarse: bool = True,
                        min_coherence: float = 0.2, smooth: int = 15) -> EqualizedFrame:
    """Estimate and remove a common frequency offset.

    The fine estimate is a least-squares fit to the unwrapped pilot phases,
    unambiguous for offsets below R/(2 P smooth) with pilot period P.  With
    ``coarse`` a fourth-power spectral peak (range R/8) is tried as a
    pre-correction and kept only if it leaves the pilot phases more
    coherent, since at low SNR the peak can land on noise.  Residuals that
    stay incoherent mean the offset was out of range and the pilot phase
    aliased.
    """
    R = frame.symbol_rate
    y = frame.symbols
    idx = np.arange(y.shape[1])
    candidates = [0.0]
    if coarse:
        candidates.append(_fourth_power_fo(y, R))
    best = None
    for fc in candidates:
        slope, coh = _pilot_slope_fit(y * np.exp(-2j * np.pi * fc * idx / R), frame.pilots,
                                      smooth)
        if best is None or coh > best[1]:
            best = (fc + slope * R / (2 * np.pi), coh)
    f_tot, coherence = best
    if coherence < min_coherence:
        raise FrequencyOffsetError("pilot phases incoherent after the fit; frequency "
                                   "offset out of range or aliased")
    out = y * np.exp(-2j * np.pi * f_tot * idx / R)
    return replace(frame, symbols=out,
                   estimated_freq_offset=frame.estimated_freq_offset + f_tot)


# --- carrier phase ------------------------------------------------------------------

def carrier_phase_recover(frame: EqualizedFrame, window: int = 1, interp: str = "linear",
                          slip_threshold: float = 0.75 * np.pi) -> EqualizedFrame:
    """Pilot-aided phase estimation and interpolation.

    Pilot correlations are averaged over ``window`` neighbouring pilots
    (odd, centred), unwrapped along the pilot sequence and interpolated to
    every symbol.  A wrapped step above ``slip_threshold`` between adjacent
    pilot estimates raises a :class:`CycleSlipWarning`.
    """
    y = frame.symbols
    n = y.shape[1]
    idx = np.arange(n)
    track = np.zeros((2, n))
    for p, fr in enumerate(frame.pilots):
        pos = fr.pilot_positions
        if pos.size == 0:
            continue
        z = y[p, pos] * np.conj(fr.pilot_symbols)
        # keep the centred window no longer than the pilot sequence
        w = min(window, pos.size - (pos.size % 2 == 0))
        if w > 1:
            z = np.convolve(z, np.ones(w), mode="same")
        step = np.angle(z[1:] * np.conj(z[:-1]))
        if np.any(np.abs(step) > slip_threshold):
            warnings.warn("inter-pilot phase step near pi; possible cycle slip",
                          CycleSlipWarning, stacklevel=2)
        phi = np.angle(z[0]) + np.concatenate([[0.0], np.cumsum(step)])
        if interp == "linear":
            track[p] = np.interp(idx, pos, phi)
        else:
            nearest = np.clip(np.searchsorted(pos, idx), 0, pos.size - 1)
            left = np.clip(nearest - 1, 0, pos.size - 1)
            use_left = np.abs(idx - pos[left]) < np.abs(pos[nearest] - idx)
            track[p] = phi[np.where(use_left, left, nearest)]
    out = y * np.exp(-1j * track)
    prev = frame.phase_track if frame.phase_track is not None else 0.0
    return replace(frame, symbols=out, phase_track=prev + track)


# --- widely-linear equalizer ---------------------------------------------------------

@njit(cache=True)
def _wl_pass(xp, a, b, ref, train, mu, out):
    L = a.size
    se = 0.0
    cnt = 0
    for n in range(ref.size):
        acc = 0j
        for k in range(L):
            acc += a[k] * xp[n + k] + b[k] * np.conj(xp[n + k])
        out[n] = acc
        if train[n]:
            e = ref[n] - acc
            se += e.real ** 2 + e.imag ** 2
            cnt += 1
            for k in range(L):
                a[k] += mu * e * np.conj(xp[n + k])
                b[k] += mu * e * xp[n + k]
    return se / max(cnt, 1)


def wl_postequalize(frame: EqualizedFrame, wl_taps: int = 5, step: float = 2e-3,
                    passes: int = 6, reference=None) -> EqualizedFrame:
    """Widely-linear LMS per polarization: y = sum a x + sum b conj(x).

    Trains on pilots, or on every symbol when ``reference`` (shape (2, N))
    is supplied.  Taps start at a centred identity with b = 0.  Per-pass
    training MSE and final taps are stored in ``diagnostics``.
    """
    if wl_taps % 2 != 1:
        raise ValueError("wl_taps must be odd")
    y = frame.symbols
    n = y.shape[1]
    L = wl_taps
    if reference is not None:
        ref = np.asarray(reference, dtype=complex)
        train = np.ones((2, n), dtype=bool)
    else:
        ref = frame.refs()
        train = frame.pilot_masks()
    out = np.empty_like(y)
    taps, mses = [], []
    for p in range(2):
        xp = np.pad(y[p], (L // 2, L // 2), mode="wrap")
        a = np.zeros(L, dtype=complex)
        a[L // 2] = 1.0
        b = np.zeros(L, dtype=complex)
        hist = []
        o = np.empty(n, dtype=complex)
        for _ in range(passes):
            hist.append(_wl_pass(xp, a, b, ref[p], train[p], step, o))
        out[p] = o
        taps.append((a.copy(), b.copy()))
        mses.append(hist)
    diag = dict(frame.diagnostics)
    diag.update(wl_taps=taps, wl_mse=mses)
    return replace(frame, symbols=out, diagnostics=diag)


# --- framing helpers -----------------------------------------------------------------

def strip_pilots(frame: EqualizedFrame) -> EqualizedFrame:
    if frame.residual_pilots_removed:
        return frame
    masks = frame.pilot_masks()
    data = [frame.symbols[p, ~masks[p]] for p in range(2)]
    if data[0].size != data[1].size:
        raise ValueError("polarizations carry different pilot counts")
    track = None
    if frame.phase_track is not None:
        track = np.vstack([frame.phase_track[p, ~masks[p]] for p in range(2)])
    return replace(frame, symbols=np.vstack(data), residual_pilots_removed=True,
                   phase_track=track)


def discard_head(frame: EqualizedFrame, n: int) -> EqualizedFrame:
    """Drop the first ``n`` symbols (equalizer convergence transient)."""
    track = None if frame.phase_track is None else frame.phase_track[:, n:]
    return replace(frame, symbols=frame.symbols[:, n:], phase_track=track)


def demodulate(record: DualPolWaveform, cfg: DspConfig) -> EqualizedFrame:
    """Full receiver chain; returns data symbols with pilots removed."""
    if record is None or len(record) == 0:
        raise DemodulationError("input", "empty record")

    def stage(name, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ValueError, RuntimeError) as exc:
            raise DemodulationError(name, exc) from exc

    r = stage("cd_compensate", cd_compensate, record, cfg.cdc_total_ps_per_nm,
              cfg.cdc_slope_ps_per_nm2, None, cfg.reference_wavelength, cfg.cd_block_size)
    x2 = stage("resample", resample_2sps, r, cfg.symbol_rate, cfg.rolloff)
    fr = stage("mimo_equalize", mimo_equalize, x2, cfg)
    fr = stage("freq_offset_recover", freq_offset_recover, fr)
    fr = stage("carrier_phase_recover", carrier_phase_recover, fr, cfg.cpr_window,
               cfg.cpr_interp)
    if cfg.wl_taps > 0:
        fr = stage("wl_postequalize", wl_postequalize, fr, cfg.wl_taps, cfg.wl_step,
                   cfg.wl_passes)
    return strip_pilots(fr)

