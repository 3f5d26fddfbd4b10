"""WDM comb assembly and the recirculating-loop fiber channel.

Units follow fiber-optics convention at the interfaces (km, dB/km,
ps/(nm km), ps/(nm^2 km), um^2, dBm) and SI internally.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.constants import c as C_LIGHT, h as PLANCK
from scipy.stats import unitary_group

from .sigcore import DualPolWaveform

__all__ = [
    "FiberParams",
    "EdfaParams",
    "LoopConfig",
    "WdmConfig",
    "LoopTelemetry",
    "GuardIntervalWarning",
    "dispersion_phase",
    "apply_dispersion",
    "add_dummies",
    "span_propagate",
    "amplify",
    "haar_unitary",
    "scramble_polarization",
    "equalize_channels",
    "run_loop",
    "telemetry_csv",
    "dbm_to_w",
    "w_to_dbm",
    "OSNR_REF_BANDWIDTH",
]

OSNR_REF_BANDWIDTH = 12.5e9  # 0.1 nm at 1550 nm
MANAKOV = 8.0 / 9.0


class GuardIntervalWarning(UserWarning):
    """Dispersive spread is comparable to the record length (circular wrap)."""


def dbm_to_w(p_dbm):
    return 1e-3 * 10 ** (np.asarray(p_dbm) / 10)


def w_to_dbm(p_w):
    return 10 * np.log10(np.asarray(p_w) / 1e-3)


@dataclass(frozen=True)
class FiberParams:
    """Single-mode fiber span.

    length [km], alpha [dB/km], D [ps/(nm km)], S [ps/(nm^2 km)],
    Aeff [um^2], n2 [m^2/W], reference_wavelength [nm].
    """

    length: float = 55.0
    alpha: float = 0.157
    D: float = 20.5
    S: float = 0.06
    Aeff: float = 150.0
    n2: float = 2.2e-20
    reference_wavelength: float = 1550.0

    def __post_init__(self):
        if self.length < 0 or self.alpha < 0 or self.n2 < 0:
            raise ValueError("length, alpha and n2 must be nonnegative")
        if not (self.Aeff > 0 and self.reference_wavelength > 0):
            raise ValueError("Aeff and reference_wavelength must be positive")

    @property
    def gamma(self) -> float:
        """Nonlinear coefficient in 1/(W km)."""
        lam = self.reference_wavelength * 1e-9
        return 2 * np.pi * self.n2 / (lam * self.Aeff * 1e-12) * 1e3

    @property
    def span_loss_db(self) -> float:
        return self.alpha * self.length


@dataclass(frozen=True)
class EdfaParams:
    """Line amplifier: total output power [dBm], noise figure [dB]; ``bandwidth``
    [Hz] limits the ASE band (None = whole simulation band)."""

    output_power: float = 17.0
    noise_figure: float = 5.0
    bandwidth: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.output_power):
            raise ValueError("output_power must be finite")
        if self.noise_figure < 3.01:
            raise ValueError("noise_figure below the 3.01 dB quantum limit")


@dataclass(frozen=True)
class WdmConfig:
    """ASE-dummy comb around the channel under test.

    ``cut_index`` is the CUT position among the 1 + n_dummies channels;
    None centres it.
    """

    spacing: float = 306.25e9
    n_dummies: int = 10
    dummy_bandwidth: float = 300e9
    cut_index: int | None = None

    def __post_init__(self):
        if self.n_dummies < 0:
            raise ValueError("n_dummies must be nonnegative")
        if not 0 < self.dummy_bandwidth <= self.spacing:
            raise ValueError("dummy_bandwidth must lie in (0, spacing]")

    @property
    def n_channels(self) -> int:
        return 1 + self.n_dummies

    def offsets(self) -> np.ndarray:
        """Channel centre offsets from the CUT, CUT included (0)."""
        cut = self.n_dummies // 2 if self.cut_index is None else self.cut_index
        if not 0 <= cut <= self.n_dummies:
            raise ValueError("cut_index out of range")
        return (np.arange(self.n_channels) - cut) * self.spacing


Nonlinearity = Union[str, float]


@dataclass(frozen=True)
class LoopConfig:
    """Recirculating loop.

    ``nonlinearity`` is "off" or the split-step size in km.
    ``ase_psd_scale`` multiplies the ASE density; set it to
    full_rate / simulated_rate when running a scaled-down symbol rate so the
    in-band OSNR matches the full-rate system.
    """

    spans_per_loop: int = 11
    fiber: FiberParams = field(default_factory=FiberParams)
    edfa: EdfaParams = field(default_factory=EdfaParams)
    scrambler_seed: int = 0
    noise_seed: int = 1
    gff: bool = True
    comb_equalization: bool = True
    nonlinearity: Nonlinearity = "off"
    ase_psd_scale: float = 1.0

    def __post_init__(self):
        if self.spans_per_loop < 1:
            raise ValueError("spans_per_loop must be >= 1")
        if self.nonlinearity != "off":
            if not float(self.nonlinearity) > 0:
                raise ValueError("nonlinearity must be 'off' or a positive step in km")
        if not self.ase_psd_scale > 0:
            raise ValueError("ase_psd_scale must be positive")

    @property
    def loop_length(self) -> float:
        return self.spans_per_loop * self.fiber.length

    def distance(self, n_roundtrips: int) -> float:
        return n_roundtrips * self.loop_length


# --- dispersion ---------------------------------------------------------------

def _beta(D_acc, S_acc, lam):
    """beta2*L [s^2] and beta3*L [s^3] from accumulated D [ps/nm], S [ps/nm^2]."""
    D_si = D_acc * 1e-3          # ps/nm -> s/m
    S_si = S_acc * 1e6           # ps/nm^2 -> s/m^2
    b2 = -D_si * lam ** 2 / (2 * np.pi * C_LIGHT)
    b3 = (lam / (2 * np.pi * C_LIGHT)) ** 2 * (lam ** 2 * S_si + 2 * lam * D_si)
    return b2, b3


def dispersion_phase(f, center_freq, D_acc, S_acc=0.0, reference_wavelength=1550.0):
    """Spectral phase of accumulated dispersion on relative frequencies ``f``.

    exp(j(b2/2)w^2 + j(b3/6)w^3) expanded around the signal centre, with
    b2 taken at the centre frequency.  Constant and group-delay terms are
    dropped.  A ``center_freq`` of 0 means "at the reference wavelength".
    """
    lam = reference_wavelength * 1e-9
    b2, b3 = _beta(D_acc, S_acc, lam)
    f0 = C_LIGHT / lam
    oc = 2 * np.pi * (center_freq - f0) if center_freq > 0 else 0.0
    w = 2 * np.pi * np.asarray(f, dtype=float)
    return 0.5 * (b2 + b3 * oc) * w ** 2 + b3 / 6 * w ** 3


def apply_dispersion(field: DualPolWaveform, D_acc, S_acc=0.0,
                     reference_wavelength=1550.0) -> DualPolWaveform:
    n = len(field)
    f = np.fft.fftfreq(n, 1 / field.sample_rate)
    H = np.exp(1j * dispersion_phase(f, field.center_freq, D_acc, S_acc,
                                     reference_wavelength))
    X = np.fft.fft(field.as_array(), axis=1) * H
    return field.with_array(np.fft.ifft(X, axis=1))


def _occupied_bandwidth(x, fs, frac=0.99):
    P = np.sum(np.abs(np.fft.fftshift(np.fft.fft(x, axis=-1), axes=-1)) ** 2, axis=0)
    c = np.cumsum(P) / np.sum(P)
    lo = np.searchsorted(c, (1 - frac) / 2)
    hi = np.searchsorted(c, 1 - (1 - frac) / 2)
    return (hi - lo) * fs / P.size


def _check_guard(field: DualPolWaveform, D_acc, lam_nm):
    if D_acc == 0:
        return True
    bw = _occupied_bandwidth(field.as_array(), field.sample_rate)
    dlam = (lam_nm * 1e-9) ** 2 / C_LIGHT * bw * 1e9  # nm
    spread = abs(D_acc) * dlam * 1e-12                # s
    duration = len(field) / field.sample_rate
    if spread > duration / 2:
        warnings.warn(f"dispersive spread {spread:.3g} s exceeds half the record "
                      f"({duration:.3g} s); circular wrap-around", GuardIntervalWarning,
                      stacklevel=3)
        return False
    return True


# --- fiber ----------------------------------------------------------------------

def span_propagate(field: DualPolWaveform, p: FiberParams,
                   nonlinearity: Nonlinearity = "off") -> DualPolWaveform:
    """Propagate over one span.

    Linear mode: dispersive all-pass, then lumped loss.  SSFM mode: symmetric
    split-step with distributed loss and the Manakov nonlinear phase
    (8/9) gamma (|Ex|^2 + |Ey|^2) L_eff per step.
    """
    if p.length == 0:
        return field
    lam = p.reference_wavelength
    _check_guard(field, p.D * p.length, lam)
    a_np = p.alpha / (10 * np.log10(np.e))  # 1/km, power
    if nonlinearity == "off":
        out = apply_dispersion(field, p.D * p.length, p.S * p.length, lam)
        return out.with_array(out.as_array() * 10 ** (-p.span_loss_db / 20))

    step = float(nonlinearity)
    n_steps = max(1, int(np.ceil(p.length / step - 1e-9)))
    dz = p.length / n_steps
    n = len(field)
    f = np.fft.fftfreq(n, 1 / field.sample_rate)
    half = np.exp(1j * dispersion_phase(f, field.center_freq, p.D * dz / 2,
                                        p.S * dz / 2, lam)) * np.exp(-a_np * dz / 4)
    leff = dz if a_np == 0 else (1 - np.exp(-a_np * dz)) / a_np
    g = MANAKOV * p.gamma
    x = field.as_array()
    for _ in range(n_steps):
        x = np.fft.ifft(np.fft.fft(x, axis=1) * half, axis=1)
        pw = np.sum(np.abs(x) ** 2, axis=0)
        x = x * np.exp(1j * g * pw * leff)
        x = np.fft.ifft(np.fft.fft(x, axis=1) * half, axis=1)
    return field.with_array(x)


# --- amplifier ------------------------------------------------------------------

def _optical_freq(field):
    return field.center_freq if field.center_freq > 0 else C_LIGHT / 1550e-9


def ase_psd(gain, e: EdfaParams, nu, scale=1.0):
    """ASE density per polarization [W/Hz]: (G - 1) h nu NF / 2."""
    return max(gain - 1.0, 0.0) * PLANCK * nu * 10 ** (e.noise_figure / 10) / 2 * scale


def amplify(field: DualPolWaveform, e: EdfaParams, seed, *, target_power: float | None = None,
            psd_scale: float = 1.0, return_gain: bool = False):
    """Set the total output power and add ASE independently per polarization.

    ``target_power`` [W] overrides ``e.output_power`` (used when only part of
    the comb is simulated).
    """
    p_in = field.power
    if not p_in > 0:
        raise ValueError("input power must be positive")
    p_out = dbm_to_w(e.output_power) if target_power is None else target_power
    G = float(p_out / p_in)
    x = field.as_array() * np.sqrt(G)
    rho = ase_psd(G, e, _optical_freq(field), psd_scale)
    if rho > 0:
        n = len(field)
        fs = field.sample_rate
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
        noise *= np.sqrt(rho * fs / 2)
        if e.bandwidth is not None and e.bandwidth < fs:
            f = np.fft.fftfreq(n, 1 / fs)
            noise = np.fft.ifft(np.fft.fft(noise, axis=1) * (np.abs(f) <= e.bandwidth / 2),
                                axis=1)
        x = x + noise
    out = field.with_array(x)
    return (out, G) if return_gain else out


# --- polarization scrambler -------------------------------------------------------

def haar_unitary(seed, roundtrip_index) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(roundtrip_index)])
    return unitary_group.rvs(2, random_state=rng)


def scramble_polarization(field: DualPolWaveform, seed, roundtrip_index) -> DualPolWaveform:
    U = haar_unitary(seed, roundtrip_index)
    return field.with_array(U @ field.as_array())


# --- WDM ----------------------------------------------------------------------------

def _check_band(offsets, bw, fs):
    edge = np.max(np.abs(offsets)) + bw / 2 if len(offsets) else 0.0
    if edge > fs / 2:
        raise ValueError(f"WDM comb spans ±{edge:.4g} Hz but the grid only "
                         f"covers ±{fs / 2:.4g} Hz")


def add_dummies(cut: DualPolWaveform, cfg: WdmConfig, seed) -> DualPolWaveform:
    """Add band-limited complex Gaussian dummies at the CUT's per-pol power."""
    if cfg.n_dummies == 0:
        return cut
    n = len(cut)
    fs = cut.sample_rate
    offs = cfg.offsets()
    offs = offs[offs != 0]
    _check_band(offs, cfg.dummy_bandwidth, fs)
    f = np.fft.fftfreq(n, 1 / fs)
    rng = np.random.default_rng(seed)
    x = cut.as_array()
    p_pol = np.mean(np.abs(x) ** 2, axis=1, keepdims=True)
    for off in offs:
        band = np.abs(f - off) <= cfg.dummy_bandwidth / 2
        N = (rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))) * band
        d = np.fft.ifft(N, axis=1)
        d *= np.sqrt(p_pol / np.mean(np.abs(d) ** 2, axis=1, keepdims=True))
        x = x + d
    return cut.with_array(x)


def equalize_channels(field: DualPolWaveform, cfg: WdmConfig) -> DualPolWaveform:
    """Ideal comb equalizer: every channel band scaled to the mean channel power."""
    n = len(field)
    fs = field.sample_rate
    f = np.fft.fftfreq(n, 1 / fs)
    X = np.fft.fft(field.as_array(), axis=1)
    bands = [np.abs(f - off) <= cfg.spacing / 2 for off in cfg.offsets()]
    powers = np.array([np.sum(np.abs(X[:, b]) ** 2) for b in bands])
    target = powers.mean()
    for b, pw in zip(bands, powers):
        if pw > 0:
            X[:, b] *= np.sqrt(target / pw)
    return field.with_array(np.fft.ifft(X, axis=1))


# --- loop -----------------------------------------------------------------------------

@dataclass(frozen=True)
class LoopTelemetry:
    loop_index: int
    distance_km: float
    power_dbm: float
    osnr_db: float
    accumulated_dispersion: float  # ps/nm


def run_loop(field: DualPolWaveform, cfg: LoopConfig, n_roundtrips: int, *,
             wdm: WdmConfig | None = None, simulated_channels: int = 1, start: int = 0):
    """Propagate ``n_roundtrips`` times around the loop.

    Each round trip: spans_per_loop x (span, EDFA), gain flattening, comb
    power equalization and a fresh polarization scrambler state.  The EDFA
    output power is the total comb power; when only ``simulated_channels``
    of the ``wdm.n_channels`` channels are in ``field`` the target is scaled
    down accordingly.

    ``start`` is the number of round trips already made; it continues the
    per-round-trip seeds, scrambler states and telemetry so a long run can
    be split into consecutive calls.

    Returns (field, [LoopTelemetry per round trip]).  The OSNR column is the
    analytic accumulated-ASE estimate for the CUT in 0.1 nm, referred to the
    full-rate system (the ``ase_psd_scale`` factor is taken out).
    """
    if n_roundtrips < 0 or start < 0:
        raise ValueError("n_roundtrips and start must be >= 0")
    n_total = wdm.n_channels if wdm is not None else 1
    p_target = dbm_to_w(cfg.edfa.output_power) * simulated_channels / n_total
    p_cut = p_target / simulated_channels
    nu = _optical_freq(field)
    span_gain = 10 ** (cfg.fiber.span_loss_db / 10)
    rho_span = 2 * ase_psd(span_gain, cfg.edfa, nu, cfg.ase_psd_scale)  # both pols
    telem = []
    n_acc = start * cfg.spans_per_loop * rho_span
    for loop in range(start, start + n_roundtrips):
        for span in range(cfg.spans_per_loop):
            field = span_propagate(field, cfg.fiber, cfg.nonlinearity)
            field = amplify(field, cfg.edfa, [cfg.noise_seed, loop, span],
                            target_power=p_target, psd_scale=cfg.ase_psd_scale)
            n_acc += rho_span
        if cfg.comb_equalization and wdm is not None and simulated_channels > 1:
            field = equalize_channels(field, wdm)
        field = scramble_polarization(field, cfg.scrambler_seed, loop)
        d_acc = (loop + 1) * cfg.spans_per_loop * cfg.fiber.length * cfg.fiber.D
        telem.append(LoopTelemetry(loop + 1, cfg.distance(loop + 1), float(w_to_dbm(field.power)),
                                   float(10 * np.log10(p_cut * cfg.ase_psd_scale
                                                       / (n_acc * OSNR_REF_BANDWIDTH))),
                                   d_acc))
    return field, telem


def telemetry_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["loop_index", "distance_km", "power_dbm", "osnr_db"])
    for r in rows:
        w.writerow([r.loop_index, f"{r.distance_km:.6g}", f"{r.power_dbm:.6f}",
                    f"{r.osnr_db:.6f}"])
    return buf.getvalue()
