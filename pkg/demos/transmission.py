"""Bit rate versus distance for a loop sweep.

    python demos/transmission.py [config.toml]
"""
import sys
from dataclasses import replace
from pathlib import Path

from slicewave.config import load_config
from slicewave.experiment import run_sweep

cfg_path = (sys.argv[1] if len(sys.argv) > 1
            else Path(__file__).parent / "configs" / "transmission.toml")
cfg = replace(load_config(cfg_path), dump_constellations=False)
res = run_sweep(cfg)

print(f"{'km':>6} {'SNR':>6} {'NGMI':>6} {'AIR':>6} {'rc':>5} {'net':>6} {'SE':>5}")
for r in res.reports:
    rc = "-" if r.selected_rc is None else f"{r.selected_rc:.2f}"
    print(f"{r.distance_km:6.0f} {r.snr_db:6.2f} {r.ngmi:6.3f} {r.air / 1e12:6.3f} {rc:>5} "
          f"{r.net_bit_rate / 1e12:6.3f} {r.spectral_efficiency:5.2f}")
print("rates in Tb/s, SE in bit/s/Hz")
print("loop telemetry (launch power dBm, OSNR dB):")
for t in res.telemetry:
    print(f"  loop {t.loop_index:2d}  {t.distance_km:6.0f} km  {t.power_dbm:5.2f}  {t.osnr_db:5.2f}")
