"""Removing the backdoor: FIP, fast FIP and plain fine-tuning side by side.

All three start from the same backdoored checkpoint and use the same clean
validation split. FIP penalizes the Fisher trace and anchors to the
starting weights; fast FIP tunes only singular-value shifts and biases;
vanilla fine-tuning is FIP with both penalties switched off.

    python demos/purification.py [output_dir]
"""

import sys

from fiplab import config, pipeline
from fiplab.ffip import ffip_purify
from fiplab.fip import fip_purify
from fiplab.nn import load_checkpoint
from fiplab.smoothness import lambda_max
from fiplab.train import fine_tune

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-purification"
cfg = config.load_config()
res = pipeline.run(cfg, stages=["gen-data", "train"], out_dir=out)
exp = pipeline._load_experiment(res.out_dir / "data.npz")
backdoor = load_checkpoint(res.out_dir / "backdoor.ckpt")
d = cfg["defense"]

runs = {"none": (backdoor, None)}
model, trace = fip_purify(backdoor, exp.val, config.fip_config(d))
runs["fip"] = (model, trace.seconds)
model, trace = ffip_purify(backdoor, exp.val, config.fip_config(d, for_ffip=True))
runs["ffip"] = (model, trace.seconds)
vanilla = config.fip_config(d).train_config()
model, _ = fine_tune(backdoor, exp.val, vanilla)
runs["vanilla-ft"] = (model, None)

print(f"validation samples: {len(exp.val)}")
print(f"{'defense':<11s} {'ACC':>6s} {'ASR':>6s} {'lambda_max':>11s} {'seconds':>8s}")
for name, (m, sec) in runs.items():
    met = exp.metrics(m)
    lam = abs(lambda_max(m, exp.hessian_batch, iters=100, tol=1e-4)[0])
    print(f"{name:<11s} {met.acc:6.3f} {met.asr:6.3f} {lam:11.3f} {'' if sec is None else f'{sec:8.2f}'}")
