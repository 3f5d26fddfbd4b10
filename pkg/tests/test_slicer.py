import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicewave.metrics import estimate_snr
from slicewave.shaping import draw_symbols, shaped
from slicewave.sigcore import ComplexWaveform, DualPolWaveform, evm_db, read_waveform
from slicewave.slicer import (PdmeConfig, SceLockError, SceState, SliceSpec, TxImpairment,
                              apply_tx_impairments, crossover_weights, estimate_phase_offset,
                              matched_filter, pdme, recombine, rrc_impulse, rx_slice_detect,
                              sce_error, sce_lock, shape_pulse, slice_waveform, stitch)

SPEC = SliceSpec.scaled(0.04)
R = SPEC.symbol_rate
RX_BW = 0.3 * R


def _scalar_map(phi0, g, n):
    out = [phi0]
    for _ in range(n):
        out.append(out[-1] - g * math.sin(out[-1]))
    return out


def _pcs_wave(n_sym, seed=1, spec=SPEC):
    d = shaped("16QAM", 3.8)
    return shape_pulse(draw_symbols(d, n_sym, seed), spec, 4)


def _tone(freq, n=4096, fs=4 * R, center=SPEC.center_freq):
    t = np.arange(n) / fs
    return ComplexWaveform(np.exp(2j * np.pi * freq * t), fs, center)


@pytest.fixture(scope="module")
def pcs_wave():
    return _pcs_wave(2 ** 14)


@pytest.fixture(scope="module")
def pcs_slices(pcs_wave):
    return slice_waveform(pcs_wave, SPEC)


@pytest.fixture(scope="module")
def field(pcs_wave):
    return DualPolWaveform(pcs_wave, pcs_wave)


class TestSliceSpec:
    def test_scaled_geometry(self):
        assert SPEC.fsr == pytest.approx(144e9 * 0.04)
        assert SPEC.overlap_width == pytest.approx(8e9 * 0.04)
        assert SPEC.symbol_rate == pytest.approx(12e9)
        assert SPEC.center_freq == pytest.approx(0.5 * (192.980e12 + 193.124e12))

    def test_full_scale(self):
        s = SliceSpec()
        assert s.fsr == pytest.approx(144e9) and s.tone_freqs[0] == 192.980e12

    @pytest.mark.parametrize("kw", [{"overlap_width": 0.0}, {"n_slices": 3},
                                    {"tone_freqs": (2.0, 1.0)}, {"rolloff": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SliceSpec(**kw)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3 * R, 3 * R))
    def test_weights_complementary(self, f):
        w1, w2 = crossover_weights(f, SPEC)
        assert w1 + w2 == pytest.approx(1.0, abs=1e-15)


class TestShapePulse:
    def test_impulse_response(self):
        spec = SliceSpec.scaled(0.04, rolloff=0.1)
        sym = np.zeros(512, complex)
        sym[0] = 1
        w = shape_pulse(sym, spec, 4)
        t = (np.arange(len(w)) - len(w) * (np.arange(len(w)) >= len(w) // 2)) / w.sample_rate
        assert np.argmax(np.abs(w.samples)) == 0
        assert evm_db(w.samples, rrc_impulse(t, spec.symbol_rate, 0.1)) < -40

    def test_unit_power(self, pcs_wave):
        assert pcs_wave.power == pytest.approx(1.0, rel=1e-12)

    def test_matched_filter_nyquist(self):
        sym = draw_symbols(shaped("16QAM"), 4096, 2)
        w = shape_pulse(sym, SPEC, 4)
        y = matched_filter(w, R, SPEC.rolloff, 1)
        a = np.vdot(sym, y) / np.vdot(sym, sym)
        assert np.max(np.abs(y / a - sym)) < 1e-6

    def test_occupied_bandwidth(self, pcs_wave):
        P = np.abs(np.fft.fftshift(np.fft.fft(pcs_wave.samples))) ** 2
        f = np.fft.fftshift(np.fft.fftfreq(len(pcs_wave), 1 / pcs_wave.sample_rate))
        order = np.argsort(np.abs(f))
        c = np.cumsum(P[order]) / P.sum()
        bw = 2 * np.abs(f[order][np.searchsorted(c, 0.99)])
        assert R * (1 - SPEC.rolloff) < bw <= R * (1 + SPEC.rolloff)

    def test_sps_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            shape_pulse(np.ones(8), SPEC, 2)


class TestSlicing:
    def test_perfect_reconstruction(self, pcs_wave, pcs_slices):
        assert evm_db(recombine(*pcs_slices, SPEC).samples, pcs_wave.samples) < -40

    def test_midpoint_split(self):
        s1, s2 = slice_waveform(_tone(0.0, fs=4 * R), SPEC)
        a1 = np.abs(np.fft.fft(s1.samples)).max() / 4096
        a2 = np.abs(np.fft.fft(s2.samples)).max() / 4096
        assert a1 == pytest.approx(0.5, abs=1e-9) and a2 == pytest.approx(0.5, abs=1e-9)

    def test_stopband_rejection(self):
        f_bin = round(-0.3 * SPEC.fsr / (4 * R / 4096)) * 4 * R / 4096
        s1, s2 = slice_waveform(_tone(f_bin), SPEC)
        assert 10 * np.log10(s2.power / s1.power) < -60

    def test_slices_centred_on_tones(self, pcs_slices):
        assert pcs_slices[0].center_freq == pytest.approx(SPEC.tone_freqs[0])
        assert pcs_slices[1].center_freq == pytest.approx(SPEC.tone_freqs[1])

    def test_out_of_band(self):
        fs = 4 * R
        near_edge = _tone(round(0.48 * 4096) * fs / 4096, fs=fs)
        with pytest.raises(ValueError, match="representable"):
            slice_waveform(near_edge, SPEC)


class TestSce:
    @pytest.mark.parametrize("phi,expected", [(0.0, 0.0), (0.1, math.sin(0.1)),
                                              (-0.1, -math.sin(0.1))])
    def test_error_signal(self, pcs_slices, phi, expected):
        assert sce_error(*pcs_slices, SPEC, phi) == pytest.approx(expected, abs=1e-6)

    def test_zero_start_locked(self, pcs_slices):
        _, _, st_ = sce_lock(*pcs_slices, SPEC, SceState(phase_error=0.0))
        assert st_.locked and st_.iterations == 0

    def test_one_radian(self, pcs_slices):
        _, _, st_ = sce_lock(*pcs_slices, SPEC, SceState(phase_error=1.0, loop_gain=0.5))
        assert st_.locked and st_.iterations <= 40
        assert abs(st_.phase_error) < 1e-3
        assert np.allclose(st_.trajectory, _scalar_map(1.0, 0.5, st_.iterations), atol=1e-6)

    def test_unstable_point_dither(self, pcs_slices):
        _, _, st_ = sce_lock(*pcs_slices, SPEC, SceState(phase_error=math.pi))
        assert st_.dither_events >= 1 and st_.locked
        assert abs(np.angle(np.exp(1j * st_.phase_error))) < 1e-3

    def test_locked_slices_reconstruct(self, pcs_wave, pcs_slices):
        a, b, _ = sce_lock(*pcs_slices, SPEC, SceState(phase_error=2.0))
        assert evm_db(recombine(a, b, SPEC).samples, pcs_wave.samples) < -40

    def test_no_lock(self, pcs_slices):
        with pytest.raises(SceLockError) as exc:
            sce_lock(*pcs_slices, SPEC, SceState(phase_error=1.0, loop_gain=0.01), max_iters=5)
        assert exc.value.residual > 0.5

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3.0, 3.0), st.sampled_from([0.25, 0.5, 1.0]))
    def test_matches_scalar_map(self, pcs_slices, phi0, g):
        _, _, st_ = sce_lock(*pcs_slices, SPEC, SceState(phase_error=phi0, loop_gain=g))
        oracle = _scalar_map(phi0, g, len(st_.trajectory) - 1)
        assert np.max(np.abs(np.array(st_.trajectory) - oracle)) < 1e-6
        assert st_.locked


class TestTxImpairments:
    def test_identity(self, pcs_wave):
        out = apply_tx_impairments(pcs_wave, TxImpairment(), 0)
        assert np.array_equal(out.samples, pcs_wave.samples)

    def test_floor_snr(self):
        sym = draw_symbols(shaped("16QAM", 3.8), 2 ** 15, 3)
        w = shape_pulse(sym, SPEC, 4)
        out = apply_tx_impairments(w, TxImpairment(floor_snr=15.0), 9, symbol_rate=R)
        y = matched_filter(out, R, SPEC.rolloff, 1)
        assert estimate_snr(y, sym, aligned=True) == pytest.approx(15.0, abs=0.2)

    def test_image_rejection(self):
        # closed form: image/signal = tanh(ln(10) g / 40) for gain imbalance g dB
        fs = 4 * R
        f0 = 64 * fs / 4096
        out = apply_tx_impairments(_tone(f0, fs=fs, center=0.0),
                                   TxImpairment(iq_gain_imbalance=1.0), 0)
        X = np.abs(np.fft.fft(out.samples))
        irr = 20 * np.log10(X[-64] / X[64])
        assert irr == pytest.approx(20 * np.log10(np.tanh(np.log(10) / 40)), abs=0.01)
        assert irr == pytest.approx(-24.8, abs=0.05)

    def test_bandwidth_3db(self):
        fs = 4 * R
        f0 = 256 * fs / 4096
        out = apply_tx_impairments(_tone(f0, fs=fs), TxImpairment(bandwidth_3db=f0), 0)
        assert 10 * np.log10(out.power) == pytest.approx(-3.01, abs=0.01)

    @pytest.mark.parametrize("kw", [{"bandwidth_3db": 0.0}, {"floor_snr": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TxImpairment(**kw)


class TestPdme:
    def test_zero_delay(self, pcs_wave):
        f = pdme(pcs_wave, PdmeConfig(delay=0.0))
        assert np.array_equal(f.pol_x.samples, f.pol_y.samples)

    def test_full_scale_delay(self):
        assert PdmeConfig(delay=84e-9).delay_samples(600e9) == 50400

    def test_correlation_peak(self, pcs_wave):
        f = pdme(pcs_wave, PdmeConfig(delay=84e-9))
        lag = PdmeConfig(delay=84e-9).delay_samples(pcs_wave.sample_rate)
        c = np.fft.ifft(np.fft.fft(f.pol_y.samples) * np.conj(np.fft.fft(f.pol_x.samples)))
        assert int(np.argmax(np.abs(c))) == lag
        assert f.pol_x.power == pytest.approx(f.pol_y.power, rel=1e-12)

    def test_negative_delay(self):
        with pytest.raises(ValueError):
            PdmeConfig(delay=-1e-9)


class TestReceiver:
    def test_bandwidth_precondition(self, field):
        with pytest.raises(ValueError, match="must exceed"):
            rx_slice_detect(field, SPEC.tone_freqs, SPEC.fsr / 2, 0, SPEC)

    def test_ideal_stitch(self, field, pcs_wave):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 3, SPEC)
        ph = [estimate_phase_offset(*recs[p], SPEC) for p in range(2)]
        out = stitch(recs, ph, SPEC)
        # the stitched field keeps the common phase of slice 1's LO
        assert evm_db(out.pol_x.samples, pcs_wave.samples) < -35

    def test_wrong_phase_notch(self, field, pcs_wave):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 3, SPEC)
        ph = estimate_phase_offset(*recs[0], SPEC)
        good = evm_db(stitch(recs, ph, SPEC).pol_x.samples, pcs_wave.samples)
        bad = evm_db(stitch(recs, ph + np.pi, SPEC).pol_x.samples, pcs_wave.samples)
        assert bad - good > 10

    def test_single_slice_linearity(self, field):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 3, SPEC, phase_offsets=(0, 0))
        zero = [[r[0], type(r[1])(r[1].waveform.with_samples(np.zeros(len(field))),
                                   1, r[1].pol, r[1].lo_freq, r[1].bandwidth, r[1].seed)]
                for r in recs]
        out = stitch(zero, 0.0, SPEC).pol_x.samples
        alone = stitch([[recs[0][0], zero[0][1]]] * 2, 0.0, SPEC).pol_x.samples
        one = stitch(recs, 0.0, SPEC).pol_x.samples
        assert np.allclose(out, alone)
        assert not np.allclose(out, one)

    def test_recovers_injected_difference(self, field):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 4, SPEC, snr_db=20.0,
                               phase_offsets=(0.3, -0.7))
        assert estimate_phase_offset(*recs[0], SPEC) == pytest.approx(-1.0, abs=1e-2)

    def test_identical_slices(self, field):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 0, SPEC, phase_offsets=(0, 0))
        assert abs(estimate_phase_offset(*recs[0], SPEC)) < 1e-9

    def test_constructed_offset(self, field):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 0, SPEC,
                               phase_offsets=(0.0, np.pi / 3))
        assert estimate_phase_offset(*recs[0], SPEC) == pytest.approx(np.pi / 3, abs=1e-9)

    def test_no_overlap_power(self, field):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 0, SPEC)
        r = recs[0][1]
        empty = type(r)(r.waveform.with_samples(np.zeros(len(field))), 1, "x", r.lo_freq,
                        r.bandwidth, r.seed)
        with pytest.raises(ValueError, match="overlap power"):
            estimate_phase_offset(recs[0][0], empty, SPEC)

    def test_lo_error_common(self, field):
        err = 4e6
        recs = rx_slice_detect(field, tuple(t + err for t in SPEC.tone_freqs), RX_BW, 0, SPEC)
        ph = estimate_phase_offset(*recs[0], SPEC)
        fs = field.sample_rate
        df = round(err * len(field) / fs) * fs / len(field)
        assert abs(recs[0][0].lo_freq - SPEC.tone_freqs[0] - err) <= fs / len(field)
        ref = field.pol_x.samples * np.exp(-2j * np.pi * df * np.arange(len(field)) / fs)
        assert evm_db(stitch(recs, ph, SPEC).pol_x.samples, ref) < -35

    def test_dump(self, field, tmp_path):
        recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, [5, 1], SPEC)
        wav, side = recs[1][0].dump(tmp_path / "rec")
        meta = json.loads(side.read_text())
        assert meta["pol"] == "y" and meta["seed"] == [5, 1]
        assert meta["lo_freq"] == pytest.approx(SPEC.tone_freqs[0])
        assert np.array_equal(read_waveform(wav).samples, recs[1][0].waveform.samples)

    def test_deterministic(self, field):
        a = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 7, SPEC, snr_db=15)
        b = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, 7, SPEC, snr_db=15)
        assert np.array_equal(a[1][1].waveform.samples, b[1][1].waveform.samples)


class TestPhaseEstimatorStatistics:
    @staticmethod
    def _trials(field, snr_db, n, seed=0):
        rng = np.random.default_rng(seed)
        errs = []
        for i in range(n):
            off = rng.uniform(-np.pi, np.pi, 2)
            recs = rx_slice_detect(field, SPEC.tone_freqs, RX_BW, [seed, i], SPEC,
                                   snr_db=snr_db, phase_offsets=off)
            est = estimate_phase_offset(*recs[0], SPEC)
            errs.append(np.angle(np.exp(1j * (est - (off[1] - off[0])))))
        return np.array(errs)

    def test_unbiased(self, pcs_wave):
        errs = self._trials(DualPolWaveform(pcs_wave, pcs_wave), 15.0, 150, seed=3)
        assert abs(errs.mean()) < 3 * errs.std() / np.sqrt(errs.size)

    @pytest.mark.slow
    def test_rms_at_10db(self):
        w = _pcs_wave(2 ** 14)
        errs = self._trials(DualPolWaveform(w, w), 10.0, 500, seed=1)
        assert np.sqrt(np.mean(errs ** 2)) < 0.02
