"""End-to-end scenarios: transmitter, channel, receiver and sweeps.

Everything runs on a desk-scale grid: every frequency span of the full
system (symbol rate, slice spacing, overlap, LO error) is multiplied by
``scale``.  Rate figures use the full-scale symbol rate, and ASE and
OSNR loading are referred to the full-rate system so SNR-vs-OSNR curves
keep their full-scale axes.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import LoopConfig, WdmConfig, run_loop
from .dsp import DspConfig, EqualizedFrame, demodulate
from .metrics import FecFamily, RateReport, align, estimate_snr, gmi, load_noise_to_osnr, \
    make_report, OSNR_REF_BANDWIDTH
from .shaping import PilotFrame, ShapingDistribution, draw_symbols, frame_with_pilots, \
    pilot_period, shaped
from .sigcore import ComplexWaveform, DualPolWaveform, evm_db, shift_frequency
from .slicer import PdmeConfig, SceState, SliceSpec, TxImpairment, apply_tx_impairments, \
    estimate_phase_offset, pdme, recombine, rx_slice_detect, sce_lock, shape_pulse, \
    slice_waveform, stitch

__all__ = [
    "SCENARIOS",
    "MODULATIONS",
    "TxConfig",
    "RxConfig",
    "ExperimentConfig",
    "TxResult",
    "PointResult",
    "SweepResult",
    "distribution",
    "transmit",
    "receive",
    "evaluate",
    "run_sweep",
    "stitch_test",
    "calibrate_tx",
    "config_hash",
]

SCENARIOS = ("b2b_sweep", "transmission_sweep", "stitch_test", "calibrate_tx")
MODULATIONS = {"pcs16qam": "16QAM", "pcs36qam": "36QAM", "qpsk": "QPSK"}


@dataclass(frozen=True)
class TxConfig:
    """Transmitter settings.  ``bandwidth_ratio`` is the per-slice driver
    3-dB bandwidth in units of the symbol rate; ``floor_snr`` [dB] is the
    Es/N0 of the additive transmitter noise floor."""

    pilot_rate: float = 0.0205
    rolloff: float = 0.05
    bandwidth_ratio: float = 0.5
    iq_gain_imbalance: float = 0.2
    iq_phase_imbalance: float = 1.0
    iq_skew: float = 0.0
    floor_snr: float = 15.21
    sce_gain: float = 0.5
    pdme_delay: float = 84e-9


@dataclass(frozen=True)
class RxConfig:
    """Receiver settings.  ``lo_error`` is the common LO frequency error at
    full scale; ``snr_db`` the receiver's own in-band noise (inf = none)."""

    bandwidth_ratio: float = 0.3
    lo_error: float = 100e6
    snr_db: float = np.inf


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "b2b_sweep"
    modulation: str = "pcs16qam"
    entropy: float | None = 3.8
    full_symbol_rate: float = 300e9
    scale: float = 0.04
    n_samples: int = 2 ** 18
    sps: int = 4
    seed: int = 1
    tx: TxConfig = field(default_factory=TxConfig)
    rx: RxConfig = field(default_factory=RxConfig)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(ase_psd_scale=25.0))
    wdm: WdmConfig = field(default_factory=WdmConfig)
    dsp: dict = field(default_factory=dict)
    fec: FecFamily = field(default_factory=FecFamily.default)
    osnr_db: tuple = (15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
    loops: tuple = (0, 2, 6, 11, 15, 18)
    calibration_target: float = 15.0
    dump_constellations: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.modulation not in MODULATIONS:
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.entropy is not None and not self.entropy > 0:
            raise ValueError("entropy must be positive")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")
        if self.n_samples % self.sps:
            raise ValueError("n_samples must be a multiple of sps")
        object.__setattr__(self, "osnr_db", tuple(float(v) for v in self.osnr_db))
        object.__setattr__(self, "loops", tuple(int(v) for v in self.loops))
        if self.scenario == "b2b_sweep" and not self.osnr_db:
            raise ValueError("b2b_sweep needs a nonempty osnr_db list")
        if self.scenario == "transmission_sweep":
            if not self.loops:
                raise ValueError("transmission_sweep needs a nonempty loops list")
            if any(n < 0 for n in self.loops) or list(self.loops) != sorted(set(self.loops)):
                raise ValueError("loops must be distinct, nonnegative and increasing")
        # fail early on an unreachable entropy or bad DSP overrides
        distribution(self)
        self.dsp_config(((PilotFrame(np.ones(4), [0, 2], [1, 1], 0.5),) * 2), np.ones(1))

    @property
    def symbol_rate(self) -> float:
        return self.full_symbol_rate * self.scale

    @property
    def n_symbols(self) -> int:
        return self.n_samples // self.sps

    @property
    def slice_spec(self) -> SliceSpec:
        return SliceSpec.scaled(self.scale, self.tx.rolloff)

    def dsp_config(self, frames, points, cdc: float = 0.0) -> DspConfig:
        return DspConfig(self.symbol_rate, tuple(frames), points, rolloff=self.tx.rolloff,
                         cdc_total_ps_per_nm=cdc,
                         reference_wavelength=self.loop.fiber.reference_wavelength,
                         **self.dsp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loop"]["nonlinearity"] = str(self.loop.nonlinearity)
        return _jsonable(d)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not np.isfinite(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, np.generic):
        return v.item()
    return v


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def distribution(cfg: ExperimentConfig) -> ShapingDistribution:
    kind = MODULATIONS[cfg.modulation]
    h = cfg.entropy
    if h is not None and abs(h - np.log2(len(shaped(kind).probs))) < 1e-12:
        h = None
    return shaped(kind, h)


# --- transmitter ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TxResult:
    field: DualPolWaveform
    frames: tuple            # transmitted PilotFrame per polarization
    dist: ShapingDistribution
    signal_power: float      # total power excluding the Tx noise floor
    sce: SceState
    waveform: ComplexWaveform  # ideal single-pol waveform before slicing


def _frame(cfg: ExperimentConfig, dist, seed) -> PilotFrame:
    n = cfg.n_symbols
    P = pilot_period(cfg.tx.pilot_rate)
    n_data = n - -(-n // P)
    fr = frame_with_pilots(draw_symbols(dist, n_data, [seed, 1]), cfg.tx.pilot_rate, seed)
    if len(fr) != n:
        raise ValueError(f"cannot fill {n} symbols with pilot period {P}")
    return fr


def transmit(cfg: ExperimentConfig, seed: int | None = None, *,
             impairments: bool = True) -> TxResult:
    """Shape, slice, impair, phase-lock, recombine, add the floor, emulate PDM.

    With ``impairments=False`` the slices are ideal and no floor is added.
    """
    seed = cfg.seed if seed is None else seed
    dist = distribution(cfg)
    spec = cfg.slice_spec
    R = cfg.symbol_rate
    fr = _frame(cfg, dist, seed)
    w = shape_pulse(fr, spec, cfg.sps)
    s1, s2 = slice_waveform(w, spec)
    if impairments:
        imp = TxImpairment(bandwidth_3db=cfg.tx.bandwidth_ratio * R,
                           iq_gain_imbalance=cfg.tx.iq_gain_imbalance,
                           iq_phase_imbalance=cfg.tx.iq_phase_imbalance,
                           iq_skew=cfg.tx.iq_skew)
        s1 = apply_tx_impairments(s1, imp, [seed, 2, 1])
        s2 = apply_tx_impairments(s2, imp, [seed, 2, 2])
    phi0 = np.random.default_rng([seed, 3]).uniform(-3.0, 3.0)
    a, b, state = sce_lock(s1, s2, spec, SceState(phase_error=phi0, loop_gain=cfg.tx.sce_gain))
    tx = recombine(a, b, spec)
    p_clean = tx.power
    if impairments and np.isfinite(cfg.tx.floor_snr):
        tx = apply_tx_impairments(tx, TxImpairment(floor_snr=cfg.tx.floor_snr), [seed, 4], R)
    pc = PdmeConfig(delay=cfg.tx.pdme_delay)
    k = pc.delay_samples(tx.sample_rate)
    if k % cfg.sps:
        raise ValueError("PDME delay must be a whole number of symbols")
    fld = pdme(tx, pc)
    return TxResult(fld, (fr, fr.roll(k // cfg.sps)), dist, 2 * p_clean, state, w)


# --- receiver -----------------------------------------------------------------------

def _lo_freqs(cfg: ExperimentConfig):
    err = cfg.rx.lo_error * cfg.scale
    return tuple(t + err for t in cfg.slice_spec.tone_freqs)


def detect(cfg: ExperimentConfig, fld: DualPolWaveform, seed) -> DualPolWaveform:
    """OAWM capture, per-polarization phase estimation and stitching."""
    spec = cfg.slice_spec
    recs = rx_slice_detect(fld, _lo_freqs(cfg), cfg.rx.bandwidth_ratio * cfg.symbol_rate, seed,
                           spec, snr_db=cfg.rx.snr_db)
    phases = [estimate_phase_offset(*recs[p], spec) for p in range(2)]
    return stitch(recs, phases, spec)


def receive(cfg: ExperimentConfig, fld: DualPolWaveform, frames, dist, seed,
            cdc: float = 0.0) -> EqualizedFrame:
    rec = detect(cfg, fld, seed)
    return demodulate(rec, cfg.dsp_config(frames, dist.constellation.points, cdc))


@dataclass(frozen=True, eq=False)
class PointResult:
    report: RateReport
    extra: dict
    constellation: np.ndarray   # (2, n) equalized data symbols kept for dumps


def evaluate(cfg: ExperimentConfig, eq: EqualizedFrame, frames, dist,
             distance_km: float) -> tuple[RateReport, np.ndarray]:
    """Rate report for one equalized frame.

    The equalizer's convergence transient, 2 x taps x pilot period symbols,
    is excluded from all metrics.
    """
    taps = cfg.dsp_config(frames, dist.constellation.points).mimo_taps
    head = 2 * taps * pilot_period(cfg.tx.pilot_rate)
    tx = np.vstack([f.data for f in frames])
    y = eq.symbols
    tx, _ = align(y, tx)
    y, tx = y[:, head:], tx[:, head:]
    snr = estimate_snr(y, tx, aligned=True)
    g = gmi(y, tx, dist)
    rep = make_report(distance_km, snr, g, dist, symbol_rate=cfg.full_symbol_rate,
                      pilot_rate=cfg.tx.pilot_rate, channel_spacing=cfg.wdm.spacing,
                      family=cfg.fec)
    return rep, y


# --- sweeps ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SweepResult:
    config: ExperimentConfig
    points: list
    telemetry: list = field(default_factory=list)

    @property
    def reports(self):
        return [p.report for p in self.points]


def _workers(n_jobs: int) -> int:
    env = os.environ.get("SLICEWAVE_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def _b2b_job(args):
    cfg, tx, osnr, i = args
    fld = load_noise_to_osnr(tx.field, osnr, [cfg.seed, 100 + i],
                             ref_bandwidth=OSNR_REF_BANDWIDTH * cfg.scale,
                             signal_power=tx.signal_power)
    eq = receive(cfg, fld, tx.frames, tx.dist, [cfg.seed, 200 + i])
    rep, y = evaluate(cfg, eq, tx.frames, tx.dist, 0.0)
    return PointResult(rep, {"osnr_db": osnr}, y)


def _tx_job(args):
    cfg, fld, frames, dist, n, i = args
    d_acc = cfg.loop.distance(n) * cfg.loop.fiber.D
    eq = receive(cfg, fld, frames, dist, [cfg.seed, 200 + i], cdc=d_acc)
    rep, y = evaluate(cfg, eq, frames, dist, cfg.loop.distance(n))
    return PointResult(rep, {}, y)


def _map(fn, jobs):
    n = _workers(len(jobs))
    if n == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


def run_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Execute a b2b or transmission sweep; rows come back in sweep order."""
    if cfg.scenario == "b2b_sweep":
        tx = transmit(cfg)
        jobs = [(cfg, tx, o, i) for i, o in enumerate(cfg.osnr_db)]
        return SweepResult(cfg, _map(_b2b_job, jobs))
    if cfg.scenario == "transmission_sweep":
        tx = transmit(cfg)
        # the CUT alone is simulated; the amplifiers see the whole comb's power
        loop = replace(cfg.loop, noise_seed=cfg.loop.noise_seed + 1000 * cfg.seed)
        fld = tx.field.with_array(tx.field.as_array())
        done = 0
        telem, jobs = [], []
        for i, n in enumerate(cfg.loops):
            fld, t = run_loop(fld, loop, n - done, wdm=cfg.wdm, simulated_channels=1,
                              start=done)
            telem += t
            done = n
            jobs.append((cfg, fld, tx.frames, tx.dist, n, i))
        return SweepResult(cfg, _map(_tx_job, jobs), telem)
    raise ValueError(f"scenario {cfg.scenario!r} is not a sweep")


# --- other scenarios -------------------------------------------------------------------

def stitch_test(cfg: ExperimentConfig, seed: int | None = None) -> float:
    """EVM [dB] of the stitched field against the ideal unsliced waveform.

    No channel, ideal slices (no Tx impairments or floor), so the error
    comes from the slicing, the residual of the slice phase lock and the
    receiver's phase estimation.  The known common LO offset is applied to
    the reference before comparing.
    """
    seed = cfg.seed if seed is None else seed
    tx = transmit(cfg, seed, impairments=False)
    rec = detect(cfg, tx.field, [seed, 5])
    ideal = pdme(tx.waveform, PdmeConfig(delay=cfg.tx.pdme_delay))
    err = cfg.rx.lo_error * cfg.scale
    evms = []
    for ref, got in ((ideal.pol_x, rec.pol_x), (ideal.pol_y, rec.pol_y)):
        ref_shifted, _ = shift_frequency(ref, -err)
        evms.append(evm_db(got.samples, ref_shifted.samples))
    return float(max(evms))


def loopback_snr(cfg: ExperimentConfig, seed: int | None = None) -> float:
    """SNR through Tx and Rx with no channel noise."""
    seed = cfg.seed if seed is None else seed
    tx = transmit(cfg, seed)
    eq = receive(cfg, tx.field, tx.frames, tx.dist, [seed, 200])
    rep, _ = evaluate(cfg, eq, tx.frames, tx.dist, 0.0)
    return rep.snr_db


def calibrate_tx(cfg: ExperimentConfig, target_db: float | None = None, tol: float = 0.02,
                 max_iter: int = 10) -> tuple[float, float]:
    """Fit ``tx.floor_snr`` so the loopback SNR equals ``target_db``.

    Treats the loopback as 1/SNR = 1/floor + 1/other and updates
    floor <- 1/(1/target - 1/other).  Returns (floor_snr_db, achieved_db).
    """
    target = cfg.calibration_target if target_db is None else target_db
    floor = cfg.tx.floor_snr if np.isfinite(cfg.tx.floor_snr) else target + 3.0
    lin = lambda db: 10 ** (db / 10)  # noqa: E731
    for _ in range(max_iter):
        c = replace(cfg, tx=replace(cfg.tx, floor_snr=floor))
        got = loopback_snr(c)
        if abs(got - target) <= tol:
            return floor, got
        inv_other = 1 / lin(got) - 1 / lin(floor)
        inv_floor = 1 / lin(target) - max(inv_other, 0.0)
        if inv_floor <= 0:
            raise ValueError(f"target {target} dB unreachable: impairments alone give "
                             f"{-10 * np.log10(inv_other):.2f} dB")
        floor = float(-10 * np.log10(inv_floor))
    raise RuntimeError(f"calibration did not converge (last {got:.3f} dB at floor {floor:.3f})")
