"""Fast built-in invariant checks (``slicewave selftest``)."""
from __future__ import annotations

import math

import numpy as np

from .channel import LoopConfig, apply_dispersion
from .metrics import FecFamily, air, net_bit_rate, select_fec_rate, spectral_efficiency
from .shaping import shaped, solve_nu
from .sigcore import DualPolWaveform, build_constellation, evm_db
from .slicer import SceState, SliceSpec, recombine, sce_lock, shape_pulse, slice_waveform

__all__ = ["CHECKS", "run_selftest"]


def _rates():
    # exact values 1.622052e12 and 2.40957e12 (2 R (1 - Rp)(H - (1 - rc) m))
    a = net_bit_rate(300e9, 0.0205, 3.8, 0.74, 4)
    b = net_bit_rate(300e9, 0.0205, 5.0, 0.85, 6)
    return math.isclose(a, 1.622052e12, rel_tol=1e-12) and math.isclose(b, 2.40957e12,
                                                                          rel_tol=1e-12)


def _air_bound():
    fam = FecFamily.default()
    for n in np.linspace(0.5, 1.0, 51):
        rc = select_fec_rate(n, fam)
        if rc is not None and air(300e9, 0.0205, 3.8, n, 4) < net_bit_rate(300e9, 0.0205, 3.8,
                                                                            rc, 4):
            return False
    return True


def _se():
    return (abs(spectral_efficiency(1.6e12, 306.25e9) - 5.22) < 0.05
            and abs(spectral_efficiency(2.4e12, 306.25e9) - 7.84) < 0.05)


def _distance():
    cfg = LoopConfig()
    return [cfg.distance(n) for n in (2, 11, 15, 18)] == [1210, 6655, 9075, 10890]


def _entropy():
    from .shaping import entropy_bits, mb_distribution
    ok = True
    for kind, h in (("16QAM", 3.8), ("36QAM", 5.0)):
        c = build_constellation(kind)
        ok &= abs(entropy_bits(mb_distribution(c, solve_nu(c, h)).probs) - h) < 1e-9
    return ok


def _slicing():
    spec = SliceSpec.scaled(0.04)
    d = shaped("16QAM", 3.8)
    rng = np.random.default_rng(0)
    sym = d.constellation.points[rng.choice(d.constellation.size, 4096, p=d.probs)]
    w = shape_pulse(sym, spec, 4)
    s1, s2 = slice_waveform(w, spec)
    return evm_db(recombine(s1, s2, spec).samples, w.samples) < -40


def _sce():
    spec = SliceSpec.scaled(0.04)
    rng = np.random.default_rng(1)
    w = shape_pulse(rng.standard_normal(4096) + 1j * rng.standard_normal(4096), spec, 4)
    s1, s2 = slice_waveform(w, spec)
    for g in (0.25, 0.5, 1.0):
        _, _, st = sce_lock(s1, s2, spec, SceState(phase_error=3.0, loop_gain=g))
        phi = 3.0
        for got in st.trajectory[1:]:
            phi = phi - g * math.sin(phi)
            if abs(got - phi) > 1e-6:
                return False
    return True


def _cd():
    spec = SliceSpec.scaled(0.04)
    rng = np.random.default_rng(2)
    w = shape_pulse(rng.standard_normal(2 ** 14) + 1j * rng.standard_normal(2 ** 14), spec, 4)
    f = DualPolWaveform(w, w)
    d = 6655 * 20.5
    back = apply_dispersion(apply_dispersion(f, d, 6655 * 0.06), -d, -6655 * 0.06)
    return evm_db(back.pol_x.samples, w.samples) < -40


CHECKS = {
    "net bit rate formula": _rates,
    "AIR >= net rate at the selected code": _air_bound,
    "spectral efficiency": _se,
    "loop distance accounting": _distance,
    "entropy targeting": _entropy,
    "slice/recombine reconstruction": _slicing,
    "slice phase lock matches scalar map": _sce,
    "dispersion round trip": _cd,
}


def run_selftest(verbose: bool = False) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            passed = bool(fn())
        except Exception as exc:  # report, keep going
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
