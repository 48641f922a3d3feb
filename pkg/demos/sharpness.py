"""Is a backdoored model sitting in a sharper minimum than a clean one?

Trains a benign and a patch-poisoned MLP on the synthetic stripe dataset
from the same initialization, then compares the top Hessian eigenvalue,
the Hutchinson trace and the stochastic-Lanczos spectral density of the
two models on the same ground-truth-labelled batch.

    python demos/sharpness.py [output_dir]
"""

import sys

import numpy as np

from fiplab import pipeline
from fiplab.nn import load_checkpoint
from fiplab.smoothness import spectral_density

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-sharpness"
res = pipeline.run(stages=["gen-data", "train", "analyze"], out_dir=out)
exp = pipeline._load_experiment(res.out_dir / "data.npz")
analysis = pipeline._read_json(res.out_dir / "analysis.json")

print(f"{'model':<9s} {'ACC':>6s} {'ASR':>6s} {'lambda_max':>11s} {'trace':>16s}")
for name in ("benign", "backdoor"):
    m, s = analysis["metrics"][name], analysis["smoothness"][name]
    print(f"{name:<9s} {m['acc']:6.3f} {m['asr']:6.3f} {s['lambda_max']:11.3f} {s['trace']:8.3f} +- {s['trace_stderr']:.3f}")

# Spectral mass beyond the benign model's top eigenvalue.
benign = analysis["smoothness"]["benign"]["lambda_max"]
for name in ("benign", "backdoor"):
    dens = spectral_density(load_checkpoint(res.out_dir / f"{name}.ckpt"), exp.hessian_batch, 30, 5, seed=0)
    tail = dens.weights[np.abs(dens.nodes) > benign].sum()
    print(f"{name:<9s} density mass with |lambda| > {benign:.3f}: {tail:.4f}")
