import csv
import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slicewave.metrics import (CSV_COLUMNS, AlignmentError, FecFamily, RateWarning, air, align,
                               estimate_snr, gmi, load_noise_to_osnr, make_report, net_bit_rate,
                               ngmi, reports_csv, reports_json, select_fec_rate,
                               spectral_efficiency)
from slicewave.shaping import draw_symbols, shaped
from slicewave.sigcore import DualPolWaveform
from slicewave.slicer import SliceSpec, matched_filter, shape_pulse

from oracles import gh_gmi

R_FULL = 300e9
RP = 0.0205


def _awgn(x, snr_db, seed):
    rng = np.random.default_rng(seed)
    s = np.sqrt(np.mean(np.abs(x) ** 2) / 10 ** (snr_db / 10) / 2)
    return x + s * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))


class TestAlign:
    def test_recovers_shift(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 1000)) + 1j * rng.standard_normal((2, 1000))
        y = np.roll(x, 37, axis=1)
        got, lag = align(y, x)
        assert lag == 37
        assert np.array_equal(got, y)

    def test_uncorrelated_raises(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 4096)) + 0j
        with pytest.raises(AlignmentError):
            align(y, x)

    def test_zero_signal_raises(self):
        with pytest.raises(AlignmentError):
            align(np.zeros(4096), np.ones(4096))

    def test_shape_mismatch(self):
        with pytest.raises(AlignmentError):
            align(np.ones((2, 10)), np.ones((2, 11)))


class TestEstimateSnr:
    def test_identical_is_capped(self):
        x = draw_symbols(shaped("16QAM"), 1000, 0)
        assert estimate_snr(x, x, aligned=True) == 60.0

    def test_awgn_15db(self):
        x = draw_symbols(shaped("16QAM", 3.8), 10 ** 5, 1)
        y = _awgn(x, 15.0, 2)
        assert estimate_snr(y, x, aligned=True) == pytest.approx(15.0, abs=0.1)

    @given(st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3, allow_nan=False,
                              allow_infinity=False))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, a):
        x = draw_symbols(shaped("16QAM"), 4096, 3)
        y = _awgn(x, 12.0, 4)
        assert estimate_snr(a * y, x, aligned=True) == pytest.approx(
            estimate_snr(y, x, aligned=True), abs=1e-9)

    def test_dual_pol_average(self):
        x = np.vstack([draw_symbols(shaped("QPSK"), 20000, s) for s in (5, 6)])
        y = np.vstack([_awgn(x[0], 10.0, 7), _awgn(x[1], 20.0, 8)])
        lin = (10 + 100) / 2
        assert estimate_snr(y, x, aligned=True) == pytest.approx(10 * np.log10(lin), abs=0.1)

    def test_aligns_by_default(self):
        x = draw_symbols(shaped("16QAM"), 8192, 9)
        y = np.roll(_awgn(x, 18.0, 10), 100)
        assert estimate_snr(y, x) == pytest.approx(18.0, abs=0.2)


class TestOsnrLoading:
    @staticmethod
    def _snr_after(osnr_db, ref_bandwidth, n_sym=2 ** 15):
        spec = SliceSpec.scaled(0.04)
        R = spec.symbol_rate
        rng = np.random.default_rng(11)
        sym = (rng.choice([-1, 1], (2, n_sym)) + 1j * rng.choice([-1, 1], (2, n_sym))) / np.sqrt(2)
        wx, wy = (shape_pulse(s, spec, 4) for s in sym)
        fld = DualPolWaveform(wx, wy)
        noisy = load_noise_to_osnr(fld, osnr_db, 12, ref_bandwidth=ref_bandwidth)
        y = np.vstack([matched_filter(p, R, spec.rolloff) for p in (noisy.pol_x, noisy.pol_y)])
        return estimate_snr(y, sym, aligned=True), R

    def test_bref_equals_symbol_rate(self):
        R = SliceSpec.scaled(0.04).symbol_rate
        snr, _ = self._snr_after(40.0, R)
        assert snr == pytest.approx(40.0, abs=0.3)

    def test_twice_the_reference(self):
        R = SliceSpec.scaled(0.04).symbol_rate
        snr, _ = self._snr_after(20.0, R / 2)
        assert snr == pytest.approx(20.0 - 10 * np.log10(2), abs=0.3)

    def test_infinite_osnr_is_identity(self):
        spec = SliceSpec.scaled(0.04)
        w = shape_pulse(np.ones(64) + 0j, spec, 4)
        fld = DualPolWaveform(w, w)
        assert load_noise_to_osnr(fld, np.inf, 0) is fld

    def test_signal_power_override(self):
        spec = SliceSpec.scaled(0.04)
        rng = np.random.default_rng(13)
        w = shape_pulse(rng.standard_normal(4096) + 1j * rng.standard_normal(4096), spec, 4)
        fld = DualPolWaveform(w, w)
        a = load_noise_to_osnr(fld, 20.0, 1, ref_bandwidth=1e9)
        b = load_noise_to_osnr(fld, 20.0, 1, ref_bandwidth=1e9, signal_power=4 * fld.power)
        na = a.as_array() - fld.as_array()
        nb = b.as_array() - fld.as_array()
        assert np.allclose(nb, 2 * na)


class TestGmi:
    def test_noiseless_equals_entropy(self):
        d = shaped("16QAM", 3.8)
        x = draw_symbols(d, 20000, 0)
        assert gmi(x, x, d) == pytest.approx(3.8, abs=1e-3)

    def test_no_signal_gives_zero(self):
        d = shaped("16QAM")
        x = draw_symbols(d, 20000, 1)
        assert gmi(_awgn(x, -30.0, 2), x, d) < 0.05

    @pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0, 15.0, 20.0])
    def test_matches_quadrature(self, snr_db):
        d = shaped("16QAM")
        x = draw_symbols(d, 2 ** 17, 3)
        y = _awgn(x, snr_db, 4)
        assert gmi(y, x, d) == pytest.approx(gh_gmi(d, snr_db), abs=0.02)

    def test_quadrature_oracle_sane(self):
        # the quadrature itself must behave: between 0 and H, increasing in SNR
        d = shaped("16QAM")
        vals = [gh_gmi(d, s) for s in (0, 10, 20, 30)]
        assert all(0 <= v <= 4 for v in vals)
        assert vals == sorted(vals)
        assert vals[-1] == pytest.approx(4.0, abs=1e-3)

    def test_shaped_prior_quadrature(self):
        d = shaped("16QAM", 3.8)
        x = draw_symbols(d, 2 ** 17, 5)
        assert gmi(_awgn(x, 12.0, 6), x, d) == pytest.approx(gh_gmi(d, 12.0), abs=0.02)

    def test_scale_invariant(self):
        d = shaped("16QAM", 3.8)
        x = draw_symbols(d, 20000, 7)
        y = _awgn(x, 12.0, 8)
        assert gmi(3j * y, x, d) == pytest.approx(gmi(y, x, d), abs=1e-9)

    def test_too_few_symbols(self):
        d = shaped("QPSK")
        x = draw_symbols(d, 100, 9)
        with pytest.raises(ValueError, match="at least"):
            gmi(x, x, d)

    def test_ngmi_monotone_on_awgn(self):
        d = shaped("16QAM", 3.8)
        x = draw_symbols(d, 2 ** 15, 10)
        vals = [ngmi(gmi(_awgn(x, s, 11), x, d), d.entropy, 4) for s in range(0, 25, 4)]
        assert all(0 <= v <= 1 for v in vals)
        assert np.all(np.diff(vals) >= 0)


class TestNgmi:
    @pytest.mark.parametrize("g, h, m, expected", [
        (3.8, 3.8, 4, 1.0),
        (0.0, 4.0, 4, 0.0),
        (2.76, 3.8, 4, 0.74),
        (4.0, 5.0, 6, 1 - 1 / 6),
    ])
    def test_values(self, g, h, m, expected):
        assert ngmi(g, h, m) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("g, h, m", [(-0.5, 3.8, 4), (4.0, 3.8, 4), (3.0, 4.5, 4)])
    def test_ordering_violated(self, g, h, m):
        with pytest.raises(ValueError):
            ngmi(g, h, m)

    @given(st.floats(0, 1), st.floats(0.5, 4.0))
    def test_range(self, frac, h):
        v = ngmi(frac * h, h, 4)
        assert 1 - h / 4 - 1e-12 <= v <= 1 + 1e-12


class TestRates:
    @staticmethod
    def _exact(R, rp, h, rc, m):
        F = Fraction
        return 2 * F(R) * (1 - F(str(rp))) * (F(str(h)) - (1 - F(str(rc))) * m)

    @pytest.mark.parametrize("h, rc, m, expected", [(3.8, 0.74, 4, 1.622052e12),
                                                    (5.0, 0.85, 6, 2.40957e12)])
    def test_operating_points(self, h, rc, m, expected):
        got = net_bit_rate(R_FULL, RP, h, rc, m)
        assert self._exact(300_000_000_000, RP, h, rc, m) == Fraction(str(expected))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_uncoded_bound(self):
        assert net_bit_rate(R_FULL, 0.0, 3.8, 1.0, 4) == pytest.approx(2 * R_FULL * 3.8)

    def test_negative_clips_with_warning(self):
        with pytest.warns(RateWarning):
            assert net_bit_rate(R_FULL, RP, 2.0, 0.5, 6) == 0.0

    @given(st.floats(1e9, 1e12), st.floats(0, 0.3), st.floats(2, 4), st.floats(0.5, 1))
    def test_linear_in_r_affine_in_rc(self, R, rp, h, rc):
        base = net_bit_rate(1.0, rp, h, rc, 4, n_pol=2) if h - (1 - rc) * 4 >= 0 else None
        if base is None:
            return
        assert net_bit_rate(R, rp, h, rc, 4) == pytest.approx(R * base, rel=1e-9)
        # d/d rc = 2 R (1 - Rp) m
        lo = net_bit_rate(R, rp, h, rc, 4)
        hi = net_bit_rate(R, rp, h, min(rc + 0.01, 1.0), 4)
        step = min(rc + 0.01, 1.0) - rc
        assert hi - lo == pytest.approx(2 * R * (1 - rp) * 4 * step, rel=1e-6, abs=1e-3)

    def test_air_at_unity(self):
        assert air(R_FULL, RP, 3.8, 1.0, 4) == pytest.approx(2 * R_FULL * (1 - RP) * 3.8)

    def test_air_inverse(self):
        # 1.6 Tb/s at H = 3.8, m = 4 needs NGMI = 1 - (3.8 - 1.6e12 / (2 R (1 - Rp))) / 4
        n = 1 - (3.8 - 1.6e12 / (2 * R_FULL * (1 - RP))) / 4
        assert n == pytest.approx(0.7306, abs=5e-5)
        assert air(R_FULL, RP, 3.8, n, 4) == pytest.approx(1.6e12, rel=1e-12)

    @given(st.floats(0.52, 1.0))
    def test_air_bounds_net_rate(self, n):
        rc = select_fec_rate(n, FecFamily.default())
        if rc is not None:
            assert air(R_FULL, RP, 3.8, n, 4) >= net_bit_rate(R_FULL, RP, 3.8, rc, 4)


class TestFec:
    def test_default_family(self):
        fam = FecFamily.default()
        assert fam.rates[0] == 0.5 and fam.rates[-1] == 0.9
        assert 0.74 in fam.rates and 0.85 in fam.rates
        assert all(math.isclose(t, r + 0.02) for r, t in zip(fam.rates, fam.ngmi_thresholds))

    @pytest.mark.parametrize("n, rc", [(1.0, 0.9), (0.765, 0.74), (0.76, 0.74), (0.759, 0.7),
                                       (0.52, 0.5), (0.519, None), (0.0, None)])
    def test_select(self, n, rc):
        assert select_fec_rate(n, FecFamily.default()) == rc

    @pytest.mark.parametrize("rates, thr", [((0.6, 0.5), (0.62, 0.52)), ((0.5,), (0.5, 0.6)),
                                            ((), ()), ((0.5, 1.2), (0.52, 1.22))])
    def test_invalid_family(self, rates, thr):
        with pytest.raises(ValueError):
            FecFamily(rates, thr)


class TestSpectralEfficiency:
    @pytest.mark.parametrize("rate, se", [(1.6e12, 5.22), (2.4e12, 7.84), (0.0, 0.0)])
    def test_values(self, rate, se):
        assert spectral_efficiency(rate, 306.25e9) == pytest.approx(se, abs=0.005)

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            spectral_efficiency(1e12, 0.0)


class TestReports:
    @staticmethod
    def _reports():
        d = shaped("16QAM", 3.8)
        return [make_report(km, snr, g, d, symbol_rate=R_FULL, pilot_rate=RP,
                            channel_spacing=306.25e9)
                for km, snr, g in ((0.0, 15.0, 3.6), (9075.0, 9.0, 2.8), (20000.0, 1.0, 0.5))]

    def test_invariants(self):
        for r in self._reports():
            assert r.net_bit_rate <= r.air
            assert r.spectral_efficiency == pytest.approx(r.net_bit_rate / 306.25e9)

    def test_no_code_gives_zero_net(self):
        r = self._reports()[-1]
        assert r.selected_rc is None and r.net_bit_rate == 0.0

    def test_csv_columns(self):
        text = reports_csv(self._reports(), {"config_hash": ["abc"] * 3})
        rows = list(csv.DictReader(io.StringIO(text)))
        assert list(rows[0]) == list(CSV_COLUMNS) + ["config_hash"]
        assert len(rows) == 3
        assert rows[2]["rc"] == ""
        assert float(rows[1]["distance_km"]) == 9075.0

    def test_json_roundtrip(self):
        data = json.loads(reports_json(self._reports(), seed=3))
        assert data["seed"] == 3
        assert len(data["points"]) == 3
        p = data["points"][0]
        assert p["se_nominal_bps_hz"] == pytest.approx(
            round(p["net_bit_rate"] / 1e11) * 1e11 / 306.25e9)

    def test_text_is_deterministic(self):
        assert reports_csv(self._reports()) == reports_csv(self._reports())
