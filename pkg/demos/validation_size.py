"""How little clean data does FIP need?

Purifies the default backdoored model with one, two and five clean
samples per class (five per class is the full 1% split at this scale).

    python demos/validation_size.py [output_dir]
"""

import sys

import numpy as np

from fiplab import config, pipeline
from fiplab.fip import fip_purify
from fiplab.nn import load_checkpoint

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-validation"
cfg = config.load_config()
res = pipeline.run(cfg, stages=["gen-data", "train"], out_dir=out)
exp = pipeline._load_experiment(res.out_dir / "data.npz")
backdoor = load_checkpoint(res.out_dir / "backdoor.ckpt")

rng = np.random.default_rng(0)
for k in (1, 2, 5):
    idx = np.concatenate([rng.choice(np.flatnonzero(exp.val.labels == c), k, replace=False) for c in range(3)])
    purified, _ = fip_purify(backdoor, exp.val.subset(np.sort(idx)), config.fip_config(cfg["defense"]), log=False)
    m = exp.metrics(purified)
    print(f"{k} per class ({3 * k:2d} samples): ACC {m.acc:.3f} ASR {m.asr:.3f}")
