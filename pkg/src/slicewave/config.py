"""TOML experiment configuration, validated against a JSON schema.

Layout (every key optional; defaults are the desk-scale values)::

    scenario = "b2b_sweep"        # b2b_sweep | transmission_sweep | stitch_test | calibrate_tx
    modulation = "pcs16qam"       # pcs16qam | pcs36qam | qpsk
    entropy = 3.8                 # bits/symbol; default 3.8, 5.0 or uniform by modulation
    seed = 1
    scale = 0.04                  # desk-scale frequency factor
    n_samples = 262144
    sps = 4
    full_symbol_rate = 300e9
    calibration_target = 15.0

    [tx]      pilot_rate, rolloff, bandwidth_ratio, iq_gain_imbalance,
              iq_phase_imbalance, iq_skew, floor_snr, sce_gain, pdme_delay
    [rx]      bandwidth_ratio, lo_error, snr_db
    [loop]    spans_per_loop, scrambler_seed, noise_seed, gff, comb_equalization,
              nonlinearity ("off" or step in km), ase_psd_scale
    [loop.fiber]  length, alpha, D, S, Aeff, n2, reference_wavelength
    [loop.edfa]   output_power (total comb power, dBm), noise_figure, bandwidth
    [wdm]     spacing, n_dummies, dummy_bandwidth, cut_index
    [dsp]     any DspConfig tunable (mimo_taps, mimo_step, cpr_window, ...)
    [fec]     rates = [...], ngmi_thresholds = [...]
    [sweep]   osnr_db = [...], loops = [...]
    [output]  dump_constellations = true
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .channel import EdfaParams, FiberParams, LoopConfig, WdmConfig
from .dsp import DspConfig
from .experiment import MODULATIONS, SCENARIOS, ExperimentConfig, RxConfig, TxConfig
from .metrics import FecFamily

__all__ = ["ConfigError", "SCHEMA", "DEFAULT_ENTROPY", "load_config", "config_from_dict"]

# entropy used when the file names a modulation but no entropy (None = uniform)
DEFAULT_ENTROPY = {"pcs16qam": 3.8, "pcs36qam": 5.0, "qpsk": None}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending key."""

    def __init__(self, message, path=()):
        super().__init__(message)
        self.path = list(path)

    def as_dict(self) -> dict:
        return {"error": "config", "path": self.path, "message": str(self)}


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}


def _obj(props, extra=False):
    return {"type": "object", "properties": props, "additionalProperties": extra}


_DSP_KEYS = [f.name for f in dataclasses.fields(DspConfig)
             if f.name not in ("symbol_rate", "pilots", "points", "rolloff",
                               "cdc_total_ps_per_nm", "reference_wavelength")]

SCHEMA = _obj({
    "scenario": {"enum": list(SCENARIOS)},
    "modulation": {"enum": list(MODULATIONS)},
    "entropy": _pos,
    "seed": {"type": "integer", "minimum": 0},
    "scale": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "n_samples": {"type": "integer", "minimum": 1024},
    "sps": {"type": "integer", "minimum": 3},
    "full_symbol_rate": _pos,
    "calibration_target": _num,
    "tx": _obj({
        "pilot_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
        "rolloff": {"type": "number", "minimum": 0, "maximum": 1},
        "bandwidth_ratio": _pos,
        "iq_gain_imbalance": _num,
        "iq_phase_imbalance": _num,
        "iq_skew": _num,
        "floor_snr": _pos,
        "sce_gain": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
        "pdme_delay": {"type": "number", "minimum": 0},
    }),
    "rx": _obj({"bandwidth_ratio": _pos, "lo_error": _num, "snr_db": _num}),
    "loop": _obj({
        "spans_per_loop": {"type": "integer", "minimum": 1},
        "scrambler_seed": {"type": "integer", "minimum": 0},
        "noise_seed": {"type": "integer", "minimum": 0},
        "gff": {"type": "boolean"},
        "comb_equalization": {"type": "boolean"},
        "nonlinearity": {"oneOf": [{"const": "off"}, _pos]},
        "ase_psd_scale": _pos,
        "fiber": _obj({k: _num for k in ("length", "alpha", "D", "S", "Aeff", "n2",
                                         "reference_wavelength")}),
        "edfa": _obj({"output_power": _num, "noise_figure": _num, "bandwidth": _pos}),
    }),
    "wdm": _obj({"spacing": _pos, "n_dummies": {"type": "integer", "minimum": 0},
                 "dummy_bandwidth": _pos, "cut_index": {"type": "integer", "minimum": 0}}),
    "dsp": _obj({k: {"type": ["number", "string"]} for k in _DSP_KEYS}),
    "fec": _obj({"rates": {"type": "array", "items": _pos, "minItems": 1},
                 "ngmi_thresholds": {"type": "array", "items": _num, "minItems": 1}}),
    "sweep": _obj({"osnr_db": {"type": "array", "items": _num},
                   "loops": {"type": "array", "items": {"type": "integer", "minimum": 0}}}),
    "output": _obj({"dump_constellations": {"type": "boolean"}}),
})


def config_from_dict(d: dict, **overrides) -> ExperimentConfig:
    """Validate ``d`` and build the config; ``overrides`` replace top-level keys."""
    d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message, exc.absolute_path) from None
    base = ExperimentConfig.__dataclass_fields__
    try:
        top = {k: d[k] for k in base if k in d}
        if "entropy" not in d and "modulation" in d:
            top["entropy"] = DEFAULT_ENTROPY[d["modulation"]]
        loop_d = dict(d.get("loop", {}))
        fiber = FiberParams(**loop_d.pop("fiber", {}))
        edfa = EdfaParams(**loop_d.pop("edfa", {}))
        loop = replace(ExperimentConfig().loop, fiber=fiber, edfa=edfa, **loop_d)
        fec_d = d.get("fec")
        fec = FecFamily.default()
        if fec_d:
            rates = fec_d.get("rates", fec.rates)
            thr = fec_d.get("ngmi_thresholds", [r + 0.02 for r in rates])
            fec = FecFamily(tuple(rates), tuple(thr))
        sweep = d.get("sweep", {})
        kw = dict(top, tx=TxConfig(**d.get("tx", {})), rx=RxConfig(**d.get("rx", {})),
                  loop=loop, wdm=WdmConfig(**d.get("wdm", {})), dsp=dict(d.get("dsp", {})),
                  fec=fec)
        if "osnr_db" in sweep:
            kw["osnr_db"] = tuple(sweep["osnr_db"])
        if "loops" in sweep:
            kw["loops"] = tuple(sweep["loops"])
        if "dump_constellations" in d.get("output", {}):
            kw["dump_constellations"] = d["output"]["dump_constellations"]
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    p = Path(path)
    try:
        d = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from None
    return config_from_dict(d, **overrides)
