"""Maxwell-Boltzmann constellation shaping, symbol sources and pilot framing."""
from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .sigcore import Constellation, build_constellation

__all__ = [
    "ShapingDistribution",
    "PilotFrame",
    "entropy_bits",
    "mb_distribution",
    "limit_entropy",
    "solve_nu",
    "shaped",
    "draw_symbols",
    "pilot_period",
    "frame_with_pilots",
    "qpsk_pilots",
]


def entropy_bits(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


@dataclass(frozen=True, eq=False)
class ShapingDistribution:
    """Per-point probabilities over a constellation rescaled to unit energy
    under those probabilities."""

    constellation: Constellation
    probs: np.ndarray
    nu: float
    entropy: float

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.shape != (self.constellation.size,):
            raise ValueError("one probability per constellation point required")
        if abs(p.sum() - 1.0) > 1e-12 or np.any(p < 0):
            raise ValueError("probabilities must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def mean_energy(self) -> float:
        return float(np.sum(self.probs * np.abs(self.constellation.points) ** 2))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index,label,re,im,prob\n")
        c = self.constellation
        for i, (pt, lab) in enumerate(zip(c.points, c.label_strings())):
            buf.write(f"{i},{lab},{pt.real:.12g},{pt.imag:.12g},{self.probs[i]:.12g}\n")
        return buf.getvalue()


def _mb_probs(c: Constellation, nu: float) -> np.ndarray:
    e = np.abs(c.grid) ** 2
    # subtracting the minimum keeps large nu from underflowing to 0/0
    w = np.exp(-nu * (e - e.min()))
    return w / w.sum()


def mb_distribution(c: Constellation, nu: float) -> ShapingDistribution:
    """Maxwell-Boltzmann prior ``p_i ∝ exp(-nu |g_i|²)``.

    ``nu`` acts on the odd-integer grid coordinates, so it does not depend on
    any normalization.  The returned constellation has unit mean energy under
    ``p``.
    """
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    p = _mb_probs(c, nu)
    scale = 1.0 / np.sqrt(np.sum(p * np.abs(c.grid) ** 2))
    return ShapingDistribution(c.rescaled(scale), p, float(nu), entropy_bits(p))


def limit_entropy(c: Constellation) -> float:
    """Entropy as nu -> inf: uniform over the innermost ring."""
    e = np.abs(c.grid) ** 2
    return float(np.log2(np.count_nonzero(np.isclose(e, e.min()))))


def solve_nu(c: Constellation, target_entropy: float) -> float:
    """Shaping exponent that gives ``target_entropy`` bits/symbol."""
    h_max = np.log2(c.size)
    h_min = limit_entropy(c)
    if abs(target_entropy - h_max) <= 1e-12:
        return 0.0
    if not (h_min < target_entropy < h_max):
        raise ValueError(f"target entropy {target_entropy} outside ({h_min}, {h_max}]")

    def f(nu):
        return entropy_bits(_mb_probs(c, nu)) - target_entropy

    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    nu = brentq(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(nu)


def shaped(kind: str, entropy: float | None = None) -> ShapingDistribution:
    """Convenience: constellation ``kind`` shaped to ``entropy`` (None = uniform)."""
    c = build_constellation(kind)
    nu = 0.0 if entropy is None else solve_nu(c, entropy)
    return mb_distribution(c, nu)


def draw_symbols(d: ShapingDistribution, n: int, seed: int,
                 return_indices: bool = False):
    """I.i.d. symbols from ``d``; deterministic for a given seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.choice(d.constellation.size, size=n, p=d.probs)
    sym = d.constellation.points[idx]
    if return_indices:
        return sym, idx
    return sym


# --- pilots -----------------------------------------------------------------

def qpsk_pilots(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5049])
    bits = rng.integers(0, 2, size=(n, 2))
    return ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / np.sqrt(2)


def pilot_period(rate: float) -> int:
    return int(round(1.0 / rate))


@dataclass(frozen=True, eq=False)
class PilotFrame:
    symbols: np.ndarray
    pilot_positions: np.ndarray
    pilot_symbols: np.ndarray
    pilot_rate: float

    def __post_init__(self):
        for name, dt in (("symbols", complex), ("pilot_positions", np.int64),
                         ("pilot_symbols", complex)):
            a = np.array(getattr(self, name), dtype=dt)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.symbols.size

    @property
    def pilot_mask(self) -> np.ndarray:
        m = np.zeros(self.symbols.size, dtype=bool)
        m[self.pilot_positions] = True
        return m

    @property
    def data(self) -> np.ndarray:
        return self.symbols[~self.pilot_mask]

    @property
    def realized_rate(self) -> float:
        return self.pilot_positions.size / self.symbols.size

    def roll(self, shift: int) -> "PilotFrame":
        """Circularly delay the frame by ``shift`` symbols."""
        n = self.symbols.size
        pos = (self.pilot_positions + shift) % n
        order = np.argsort(pos)
        return replace(self, symbols=np.roll(self.symbols, shift),
                       pilot_positions=pos[order],
                       pilot_symbols=self.pilot_symbols[order])


def frame_with_pilots(data, rate: float, seed: int) -> PilotFrame:
    """Insert a known QPSK pilot every ``round(1/rate)`` symbols, starting at 0.

    The frame length N is the smallest one holding all data symbols, so the
    pilot count is ``ceil(len(data) / (P - 1))``.
    """
    data = np.asarray(data, dtype=complex)
    if not 0 <= rate < 0.5:
        raise ValueError("pilot rate must lie in [0, 0.5)")
    if rate == 0:
        return PilotFrame(data, np.empty(0, dtype=np.int64), np.empty(0, dtype=complex), 0.0)
    period = pilot_period(rate)
    n_pilots = -(-data.size // (period - 1))
    n = data.size + n_pilots
    pos = np.arange(n_pilots) * period
    pilots = qpsk_pilots(n_pilots, seed)
    sym = np.empty(n, dtype=complex)
    mask = np.zeros(n, dtype=bool)
    mask[pos] = True
    sym[mask] = pilots
    sym[~mask] = data
    return PilotFrame(sym, pos, pilots, rate)
