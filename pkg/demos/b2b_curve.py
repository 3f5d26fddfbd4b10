"""Back-to-back curve against the two-term noise model.

    python demos/b2b_curve.py [config.toml]

Prints measured SNR next to 1/SNR = 1/SNR_osnr + 1/SNR_floor, where the
floor is the loopback SNR measured with no added noise.
"""
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from slicewave.config import load_config
from slicewave.experiment import loopback_snr, run_sweep

cfg_path = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "configs" / "b2b.toml"
cfg = replace(load_config(cfg_path), dump_constellations=False)

floor = loopback_snr(cfg)
res = run_sweep(cfg)
print(f"loopback SNR {floor:.2f} dB")
print(f"{'OSNR':>6} {'SNR':>7} {'model':>7} {'NGMI':>6}")
for osnr, rep in zip(cfg.osnr_db, res.reports):
    s_osnr = osnr + 10 * np.log10(12.5e9 / cfg.full_symbol_rate)
    model = -10 * np.log10(10 ** (-s_osnr / 10) + 10 ** (-floor / 10))
    print(f"{osnr:6.1f} {rep.snr_db:7.2f} {model:7.2f} {rep.ngmi:6.3f}")
