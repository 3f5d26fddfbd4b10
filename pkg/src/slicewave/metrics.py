"""Performance metrics: SNR, GMI/NGMI, FEC selection and net bit rates."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .channel import OSNR_REF_BANDWIDTH
from .sigcore import DualPolWaveform

__all__ = [
    "AlignmentError",
    "RateWarning",
    "FecFamily",
    "RateReport",
    "align",
    "estimate_snr",
    "load_noise_to_osnr",
    "gmi",
    "ngmi",
    "net_bit_rate",
    "air",
    "select_fec_rate",
    "spectral_efficiency",
    "make_report",
    "reports_csv",
    "reports_json",
    "CSV_COLUMNS",
]


class AlignmentError(ValueError):
    pass


class RateWarning(UserWarning):
    pass


def _as_rows(x) -> np.ndarray:
    s = getattr(x, "symbols", x)
    return np.atleast_2d(np.asarray(s, dtype=complex))


def align(rx, tx, min_correlation: float = 0.1) -> tuple[np.ndarray, int]:
    """Circularly shift ``tx`` rows to line up with ``rx``.

    The lag comes from the peak of the circular cross-correlation of the
    first row.  Raises :class:`AlignmentError` when the normalized peak is
    below ``min_correlation``.
    """
    y = _as_rows(rx)
    x = _as_rows(tx)
    if x.shape != y.shape:
        raise AlignmentError(f"shape mismatch {y.shape} vs {x.shape}")
    c = np.fft.ifft(np.fft.fft(y[0]) * np.conj(np.fft.fft(x[0])))
    lag = int(np.argmax(np.abs(c)))
    norm = np.sqrt(np.sum(np.abs(x[0]) ** 2) * np.sum(np.abs(y[0]) ** 2))
    rho = np.abs(c[lag]) / norm if norm > 0 else 0.0
    if not rho >= min_correlation:
        raise AlignmentError(f"no correlation peak (normalized peak {rho:.3g})")
    return np.roll(x, lag, axis=1), lag


def estimate_snr(rx, tx, cap_db: float = 60.0, aligned: bool = False) -> float:
    """Per-symbol SNR [dB] after optimal complex scaling, averaged over rows.

    For each row the received symbols ``y`` are scaled by ``1/a`` with
    ``a = <x, y> / <x, x>``; the SNR is ``sum|x|² / sum|y/a - x|²``.  This
    form is unbiased for additive noise.  Rows are averaged in linear
    units and the result is capped at ``cap_db``.
    """
    y = _as_rows(rx)
    x = _as_rows(tx) if aligned else align(y, tx)[0]
    vals = []
    for xr, yr in zip(x, y):
        a = np.vdot(xr, yr) / np.vdot(xr, xr)
        if a == 0:
            vals.append(0.0)
            continue
        err = np.sum(np.abs(yr / a - xr) ** 2)
        sig = np.sum(np.abs(xr) ** 2)
        vals.append(np.inf if err == 0 else sig / err)
    s = float(np.mean(vals))
    if s <= 0:
        return -np.inf
    return float(min(10 * np.log10(s), cap_db))


def load_noise_to_osnr(field: DualPolWaveform, osnr_db: float, seed: int,
                       ref_bandwidth: float = OSNR_REF_BANDWIDTH,
                       signal_power: float | None = None) -> DualPolWaveform:
    """Add white noise for the requested OSNR.

    Noise PSD summed over both polarizations is ``P / (OSNR * ref_bandwidth)``.
    ``P`` is ``signal_power`` when given (use it to exclude noise already on
    the field), else the total field power.
    """
    if np.isinf(osnr_db) and osnr_db > 0:
        return field
    P = field.power if signal_power is None else float(signal_power)
    n_psd = P / (10 ** (osnr_db / 10) * ref_bandwidth)
    var = n_psd / 2 * field.sample_rate
    rng = np.random.default_rng([seed, 0x4F53])
    n = len(field)
    noise = (rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))) * np.sqrt(var / 2)
    return field.with_array(field.as_array() + noise)


def gmi(rx, tx, dist, min_symbols: int = 10_000, aligned: bool = True,
        chunk: int = 65536) -> float:
    """Bit-metric GMI in bits/symbol per polarization.

    Uses a Gaussian auxiliary channel with the noise variance estimated from
    the data and the prior of ``dist`` (a ShapingDistribution):

        GMI = H - sum_i E[ log2( sum_s q(y|s) P(s) / sum_{s: b_i(s)=b_i} q(y|s) P(s) ) ]
    """
    y = _as_rows(rx)
    x = _as_rows(tx) if aligned else align(y, tx)[0]
    y = y.ravel()
    x = x.ravel()
    if y.size < min_symbols:
        raise ValueError(f"GMI needs at least {min_symbols} symbols, got {y.size}")
    c = dist.constellation
    a = np.vdot(x, y) / np.vdot(x, x)
    y = y / a
    sigma2 = max(float(np.mean(np.abs(y - x) ** 2)), 1e-12)
    pts = c.points
    logp = np.log(np.maximum(dist.probs, 1e-300))
    tx_idx = c.nearest(x)
    labels = c.labels.astype(bool)
    H = dist.entropy
    loss = 0.0
    for s in range(0, y.size, chunk):
        yc = y[s:s + chunk]
        L = -np.abs(yc[:, None] - pts[None, :]) ** 2 / sigma2 + logp[None, :]
        total = logsumexp(L, axis=1)
        bits = labels[tx_idx[s:s + chunk]]  # (n, m)
        for i in range(c.m):
            same = labels[:, i][None, :] == bits[:, i][:, None]
            li = logsumexp(np.where(same, L, -np.inf), axis=1)
            loss += float(np.sum(total - li))
    g = H - loss / np.log(2) / y.size
    return float(np.clip(g, 0.0, H))


def ngmi(g: float, entropy: float, m: int, tol: float = 1e-9) -> float:
    """NGMI = 1 - (H - GMI) / m."""
    if not (-tol <= g <= entropy + tol and entropy <= m + tol):
        raise ValueError(f"need 0 <= GMI ({g}) <= H ({entropy}) <= m ({m})")
    return 1.0 - (entropy - g) / m


def net_bit_rate(symbol_rate: float, pilot_rate: float, entropy: float, rc: float,
                 m: int, n_pol: int = 2) -> float:
    """``n_pol R (1 - Rp)(H - (1 - rc) m)`` in bit/s; negative values clip to 0."""
    per = entropy - (1.0 - rc) * m
    if per < 0:
        warnings.warn(f"H - (1-rc)m = {per:.3g} < 0; rate clipped to zero",
                      RateWarning, stacklevel=2)
        return 0.0
    return n_pol * symbol_rate * (1.0 - pilot_rate) * per


def air(symbol_rate: float, pilot_rate: float, entropy: float, ngmi_value: float,
        m: int, n_pol: int = 2) -> float:
    """Achievable information rate: the net rate with rc replaced by NGMI."""
    return net_bit_rate(symbol_rate, pilot_rate, entropy, ngmi_value, m, n_pol)


@dataclass(frozen=True)
class FecFamily:
    """Code rates with the NGMI each needs for error-free decoding."""

    rates: tuple
    ngmi_thresholds: tuple

    def __post_init__(self):
        r = tuple(float(v) for v in self.rates)
        t = tuple(float(v) for v in self.ngmi_thresholds)
        if len(r) != len(t) or not r:
            raise ValueError("rates and thresholds must be nonempty and equal length")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("rates must be strictly increasing")
        if any(not 0 < v < 1 for v in r):
            raise ValueError("rates must lie in (0, 1)")
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "ngmi_thresholds", t)

    @classmethod
    def default(cls, margin: float = 0.02) -> "FecFamily":
        """Rates 0.50..0.90 in 0.05 steps plus 0.74, threshold = rate + margin."""
        r = sorted(set(np.round(np.arange(0.50, 0.9001, 0.05), 2)) | {0.74})
        return cls(tuple(r), tuple(round(v + margin, 10) for v in r))


def select_fec_rate(ngmi_value: float, family: FecFamily) -> float | None:
    """Highest code rate whose NGMI threshold is met, or None."""
    ok = [r for r, t in zip(family.rates, family.ngmi_thresholds) if ngmi_value >= t]
    return max(ok) if ok else None


def spectral_efficiency(net_rate: float, channel_spacing: float) -> float:
    if channel_spacing <= 0:
        raise ValueError("channel spacing must be positive")
    return net_rate / channel_spacing


CSV_COLUMNS = ("distance_km", "snr_db", "gmi", "ngmi", "air_tbps", "rc", "net_tbps",
               "se_bps_hz")


@dataclass(frozen=True)
class RateReport:
    distance_km: float
    snr_db: float
    gmi: float
    ngmi: float
    air: float
    selected_rc: float | None
    net_bit_rate: float
    spectral_efficiency: float
    entropy: float
    m: int
    symbol_rate: float
    pilot_rate: float
    channel_spacing: float

    def row(self) -> dict:
        return {
            "distance_km": self.distance_km,
            "snr_db": self.snr_db,
            "gmi": self.gmi,
            "ngmi": self.ngmi,
            "air_tbps": self.air / 1e12,
            "rc": "" if self.selected_rc is None else self.selected_rc,
            "net_tbps": self.net_bit_rate / 1e12,
            "se_bps_hz": self.spectral_efficiency,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        # SE of the net rate rounded to 0.1 Tb/s, as usually quoted
        d["se_nominal_bps_hz"] = round(self.net_bit_rate / 1e11) * 1e11 / self.channel_spacing
        return d


def make_report(distance_km: float, snr_db: float, gmi_value: float, dist, *,
                symbol_rate: float, pilot_rate: float, channel_spacing: float,
                family: FecFamily | None = None) -> RateReport:
    """Bundle the rate figures for one measurement point."""
    family = family or FecFamily.default()
    H, m = dist.entropy, dist.constellation.m
    n = ngmi(gmi_value, H, m)
    rc = select_fec_rate(n, family)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RateWarning)
        a = air(symbol_rate, pilot_rate, H, n, m)
        net = 0.0 if rc is None else net_bit_rate(symbol_rate, pilot_rate, H, rc, m)
    return RateReport(float(distance_km), float(snr_db), float(gmi_value), float(n), a, rc,
                      net, spectral_efficiency(net, channel_spacing), H, m, symbol_rate,
                      pilot_rate, channel_spacing)


def reports_csv(reports, extra: dict | None = None) -> str:
    """CSV text; ``extra`` maps column name to one value per report."""
    extra = extra or {}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS) + list(extra), lineterminator="\n")
    w.writeheader()
    for i, r in enumerate(reports):
        row = r.row()
        for k, vals in extra.items():
            row[k] = vals[i]
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def reports_json(reports, extra: dict | None = None, **meta) -> str:
    """JSON text: ``meta`` at top level, one object per report under "points"."""
    extra = extra or {}

    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v

    body = []
    for i, r in enumerate(reports):
        d = r.to_dict()
        d.update({k: vals[i] for k, vals in extra.items()})
        body.append({k: clean(v) for k, v in d.items()})
    return json.dumps({**meta, "points": body}, indent=2, sort_keys=True) + "\n"
