"""Five-stage experiment pipeline: data, training, smoothness, purification, report.

Every stage writes its artifacts into the output directory and finishes by
writing a ``stage-<name>.json`` marker holding its wall-clock and the config
checksum.  A stage whose marker matches the current config is reused unless
forced; a stage that reruns forces every later stage to rerun as well.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (
    LabeledDataset,
    PoisonBookkeeping,
    PoisonPlan,
    TriggerSpec,
    default_blend_pattern,
    gen_synthetic,
    ground_truth_view,
    load_idx,
    poison,
    poisoned_test_set,
    split,
)
from .errors import PrerequisiteError, SchemaMismatchError
from .ffip import ffip_purify
from .fip import fip_purify
from .nn import Batch, init_mlp, load_checkpoint, save_checkpoint
from .smoothness import analyze, spectral_density
from .svd import full_count, tunable_count
from .train import evaluate, fine_tune, train, write_trace_csv

STAGES = ("gen-data", "train", "analyze", "purify", "report")
# config sections each stage depends on, cumulative along the pipeline
STAGE_SECTIONS = {
    "gen-data": ("dataset", "attack", "analysis"),
    "train": ("dataset", "attack", "analysis", "model", "train"),
    "analyze": ("dataset", "attack", "analysis", "model", "train"),
    "purify": ("dataset", "attack", "analysis", "model", "train", "defense"),
    "report": ("dataset", "attack", "analysis", "model", "train", "defense", "report"),
}
STAGE_OUTPUT = {
    "gen-data": "data.npz",
    "train": "backdoor.ckpt",
    "analyze": "analysis.json",
    "purify": "purified.ckpt",
    "report": "report.json",
}
OUTPUT_ENV = "FIPLAB_OUTPUT_DIR"


@dataclass
class Experiment:
    """Everything the stages exchange, rebuilt from disk on demand."""

    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    poisoned: LabeledDataset
    book: PoisonBookkeeping
    ptest: LabeledDataset
    pbook: PoisonBookkeeping
    hess_idx: np.ndarray

    @property
    def hessian_batch(self):
        gt = ground_truth_view(self.poisoned, self.book)
        return Batch(gt.inputs[self.hess_idx], gt.labels[self.hess_idx])

    def metrics(self, model):
        return evaluate(model, self.test, self.ptest, self.pbook)


def build_trigger(attack, image_shape):
    if attack["kind"] == "blend":
        return TriggerSpec.blend(default_blend_pattern(image_shape, attack["pattern_seed"]), attack["alpha"])
    h, w = image_shape
    k = attack["size"]
    row = h - k if attack.get("row") is None else attack["row"]
    col = w - k if attack.get("col") is None else attack["col"]
    return TriggerSpec("patch", row=row, col=col, size=k, value=attack["value"])


def build_plan(attack, image_shape):
    return PoisonPlan(
        build_trigger(attack, image_shape), attack["poison_rate"], attack["label_map"], attack["target"], attack["seed"]
    )


def build_experiment(cfg):
    """Datasets, clean validation split (taken before poisoning) and the Hessian batch."""
    ds = cfg["dataset"]
    if ds["source"] == "synthetic":
        kw = dict(image_size=ds["image_size"], noise_level=ds["noise_level"], contrast=ds["contrast"])
        full = gen_synthetic(ds["class_count"], ds["per_class"], seed=ds["seed"], **kw)
        test = gen_synthetic(ds["class_count"], ds["test_per_class"], seed=ds["test_seed"], **kw)
    else:
        full = load_idx(ds["train_images"], ds["train_labels"], ds["class_count"])
        test = load_idx(ds["test_images"], ds["test_labels"], ds["class_count"])
    train_ds, val = split(full, ds.get("val_fraction"), seed=ds["split_seed"], per_class=ds.get("val_per_class"))
    plan = build_plan(cfg["attack"], full.image_shape)
    poisoned, book = poison(train_ds, plan)
    ptest, pbook = poisoned_test_set(test, plan)
    a = cfg["analysis"]
    n = min(a["batch_size"], len(poisoned))
    hess_idx = np.random.default_rng(a["batch_seed"]).choice(len(poisoned), n, replace=False)
    return Experiment(train_ds, val, test, poisoned, book, ptest, pbook, hess_idx)


def model_dims(cfg, exp):
    return [int(np.prod(exp.train.image_shape))] + list(cfg["model"]["hidden"]) + [exp.train.class_count]


# ---------------------------------------------------------------- persistence


def _save_experiment(exp, path):
    arrays = {}
    for name in ("train", "val", "test", "poisoned", "ptest"):
        ds = getattr(exp, name)
        arrays[f"{name}_images"] = ds.images
        arrays[f"{name}_labels"] = ds.labels
    for name in ("book", "pbook"):
        b = getattr(exp, name)
        for f in ("indices", "original", "assigned"):
            arrays[f"{name}_{f}"] = getattr(b, f)
        arrays[f"{name}_epsilon"] = np.array(b.epsilon)
    arrays["hess_idx"] = exp.hess_idx
    arrays["class_count"] = np.array(exp.train.class_count)
    np.savez(path, **arrays)


def _load_experiment(path):
    z = np.load(path)
    c = int(z["class_count"])
    ds = {n: LabeledDataset(z[f"{n}_images"], z[f"{n}_labels"], c, n) for n in ("train", "val", "test", "poisoned", "ptest")}
    books = {
        n: PoisonBookkeeping(z[f"{n}_indices"], z[f"{n}_original"], z[f"{n}_assigned"], float(z[f"{n}_epsilon"]))
        for n in ("book", "pbook")
    }
    return Experiment(hess_idx=z["hess_idx"], **ds, **books)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path):
    return json.loads(Path(path).read_text())


def _metrics_dict(m):
    return {"acc": m.acc, "asr": m.asr, "lcr": m.lcr}


def _smoothness(model, batch, acfg, density_steps, density_probes):
    rep = analyze(model, batch, acfg)
    dens = spectral_density(model, batch, density_steps, density_probes, acfg.seed)
    return rep.to_dict(), dens


def _density_rows(label, dens):
    return [{"model": label, "probe": int(p), "node": float(x), "weight": float(w)}
            for x, w, p in zip(dens.nodes, dens.weights, dens.probe_of_node)]


# ---------------------------------------------------------------- stages


class Pipeline:
    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        root = out_dir or os.environ.get(OUTPUT_ENV) or cfg["report"]["output_dir"]
        self.out = Path(root)
        self.checksum = cfgmod.config_checksum(cfg)

    def path(self, name):
        return self.out / name

    def marker(self, stage):
        return self.path(f"stage-{stage}.json")

    def stage_checksum(self, stage):
        return cfgmod.config_checksum({k: self.cfg[k] for k in STAGE_SECTIONS[stage]})

    def _marker_data(self, stage):
        m = self.marker(stage)
        return _read_json(m) if m.exists() and self.path(STAGE_OUTPUT[stage]).exists() else None

    def is_current(self, stage):
        """Marker matches this config and was built on the current upstream marker."""
        data = self._marker_data(stage)
        if data is None or data.get("config_checksum") != self.stage_checksum(stage):
            return False
        i = STAGES.index(stage)
        if i == 0:
            return True
        prev = STAGES[i - 1]
        up = self._marker_data(prev)
        return up is not None and data.get("upstream") == up.get("token") and self.is_current(prev)

    def write_marker(self, stage, seconds, extra):
        i = STAGES.index(stage)
        up = self._marker_data(STAGES[i - 1]) if i else None
        token = hashlib.sha256(f"{stage}:{time.time_ns()}:{os.getpid()}".encode()).hexdigest()[:16]
        _write_json(self.marker(stage), {
            "config_checksum": self.stage_checksum(stage),
            "seconds": seconds,
            "token": token,
            "upstream": None if up is None else up.get("token"),
            **extra,
        })

    def experiment(self):
        return _load_experiment(self.path("data.npz"))

    def analysis_cfg(self):
        return cfgmod.analysis_config(self.cfg["analysis"])

    def stage_gen_data(self):
        exp = build_experiment(self.cfg)
        _save_experiment(exp, self.path("data.npz"))
        return {"train": len(exp.train), "val": len(exp.val), "test": len(exp.test),
                "poisoned": len(exp.book), "trigger_epsilon": exp.book.epsilon}

    def stage_train(self):
        exp = self.experiment()
        m0 = init_mlp(model_dims(self.cfg, exp), seed=self.cfg["model"]["seed"])
        tr = self.cfg["train"]
        benign, trace_b = train(m0, exp.train, cfgmod.train_config(tr["benign"]), exp.test, (exp.ptest, exp.pbook))
        backdoor, trace_k = train(m0, exp.poisoned, cfgmod.train_config(tr["backdoor"]), exp.test, (exp.ptest, exp.pbook))
        save_checkpoint(benign, self.path("benign.ckpt"))
        save_checkpoint(backdoor, self.path("backdoor.ckpt"))
        write_trace_csv(trace_b, self.path("benign_trace.csv"))
        write_trace_csv(trace_k, self.path("backdoor_trace.csv"))
        return {"benign_checksum": benign.checksum(), "backdoor_checksum": backdoor.checksum()}

    def stage_analyze(self):
        exp = self.experiment()
        a = self.cfg["analysis"]
        batch = exp.hessian_batch
        out = {"metrics": {}, "smoothness": {}}
        rows = []
        for label in ("benign", "backdoor"):
            m = load_checkpoint(self.path(f"{label}.ckpt"))
            out["metrics"][label] = _metrics_dict(exp.metrics(m))
            out["smoothness"][label], dens = _smoothness(m, batch, self.analysis_cfg(), a["lanczos_steps"], a["density_probes"])
            rows += _density_rows(label, dens)
        _write_json(self.path("analysis.json"), out)
        _write_rows(self.path("density-analyze.csv"), rows)
        return {}

    def stage_purify(self):
        exp = self.experiment()
        d = self.cfg["defense"]
        backdoor = load_checkpoint(self.path("backdoor.ckpt"))
        info = {"mode": d["mode"]}
        if d["mode"] == "vanilla-ft":
            fcfg = cfgmod.fip_config(d)
            t = time.perf_counter()
            purified, trace = fine_tune(backdoor, exp.val, fcfg.train_config())
            info["purify_seconds"] = time.perf_counter() - t
            write_trace_csv(trace, self.path("purify_trace.csv"))
        else:
            ffip = d["mode"] == "ffip"
            fcfg = cfgmod.fip_config(d, for_ffip=ffip)
            purified, trace = (ffip_purify if ffip else fip_purify)(backdoor, exp.val, fcfg)
            trace.to_csv(self.path("purify_trace.csv"))
            trace.fisher.save(self.path("fisher.bin"))
            info["purify_seconds"] = trace.seconds
            info["seconds_per_epoch"] = trace.seconds / max(fcfg.epochs, 1)
            if ffip:
                info["svd_seconds"] = trace.svd_seconds
        info["lr"] = fcfg.lr
        save_checkpoint(purified, self.path("purified.ckpt"))
        a = self.cfg["analysis"]
        info["metrics"] = _metrics_dict(exp.metrics(purified))
        info["smoothness"], dens = _smoothness(purified, exp.hessian_batch, self.analysis_cfg(), a["lanczos_steps"], a["density_probes"])
        _write_json(self.path("purify.json"), info)
        _write_rows(self.path("density-purify.csv"), _density_rows("purified", dens))
        return {}

    def stage_report(self):
        report = build_report(self)
        _write_json(self.path("report.json"), report)
        _write_rows(self.path("metrics.csv"), [
            {"model": k, **report["metrics"][k]} for k in ("benign", "before", "after")
        ])
        _write_rows(self.path("smoothness.csv"), [
            {"model": k, **report["smoothness"][k]} for k in ("benign", "before", "after")
        ])
        dens = _read_rows(self.path("density-analyze.csv")) + _read_rows(self.path("density-purify.csv"))
        _write_rows(self.path("density.csv"), dens)
        return {"report_checksum": report_checksum(report)}


def _write_rows(path, rows):
    with Path(path).open("w", newline="") as fh:
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def _read_rows(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def report_checksum(report):
    """sha256 of the report without its wall-clock ``timings`` block."""
    body = {k: v for k, v in report.items() if k != "timings"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def build_report(pipe):
    cfg = pipe.cfg
    analysis = _read_json(pipe.path("analysis.json"))
    purify = _read_json(pipe.path("purify.json"))
    dims = model_dims(cfg, pipe.experiment())
    shapes = [(o, i) for i, o in zip(dims[:-1], dims[1:])]
    n_bias = sum(dims[1:])
    before, after = analysis["smoothness"]["backdoor"], purify["smoothness"]
    benign = analysis["smoothness"]["benign"]
    m_before, m_after = analysis["metrics"]["backdoor"], purify["metrics"]
    timings = {s: _read_json(pipe.marker(s))["seconds"] for s in STAGES[:-1]}
    return {
        "schema_version": cfgmod.SCHEMA_VERSION,
        "config_checksum": pipe.checksum,
        "defense_mode": purify["mode"],
        "metrics": {"benign": analysis["metrics"]["benign"], "before": m_before, "after": m_after},
        "smoothness": {"benign": benign, "before": before, "after": after},
        "sharpness": {
            "lambda_ratio_backdoor_over_benign": before["lambda_max"] / benign["lambda_max"],
            "trace_ratio_backdoor_over_benign": before["trace"] / benign["trace"],
            "verdict": "SHARPER" if before["lambda_max"] > benign["lambda_max"] and before["trace"] > benign["trace"]
            else "NOT_SHARPER",
            "lambda_reduction_after_purification": before["lambda_max"] / after["lambda_max"],
        },
        "drops": {
            "asr": 100.0 * (m_before["asr"] - m_after["asr"]),
            "acc": 100.0 * (m_before["acc"] - m_after["acc"]),
        },
        "tunable_parameters": {
            "weights_full": full_count(shapes),
            "weights_ffip": tunable_count(shapes),
            "total_full": full_count(shapes) + n_bias,
            "total_ffip": tunable_count(shapes) + n_bias,
        },
        "timings": {
            "stage_seconds": timings,
            "purify_seconds": purify.get("purify_seconds"),
            "seconds_per_epoch": purify.get("seconds_per_epoch"),
            "svd_seconds": purify.get("svd_seconds"),
        },
        "provenance": {
            "dataset_seed": cfg["dataset"]["seed"],
            "split_seed": cfg["dataset"]["split_seed"],
            "attack_seed": cfg["attack"]["seed"],
            "model_seed": cfg["model"]["seed"],
            "train_seeds": {k: v["seed"] for k, v in cfg["train"].items()},
            "analysis_seed": cfg["analysis"]["seed"],
            "hessian_batch_seed": cfg["analysis"]["batch_seed"],
            "defense_seed": cfg["defense"]["seed"],
            "label_mode": "ground-truth",
        },
    }


@dataclass
class RunResult:
    out_dir: Path
    report: dict | None
    seconds: dict = field(default_factory=dict)  # wall-clock of this invocation per stage
    cached: dict = field(default_factory=dict)

    @property
    def report_checksum(self):
        return None if self.report is None else report_checksum(self.report)


def select_stages(selector):
    """``None``/"all" -> every stage; a stage name -> that stage; a list -> those stages."""
    if selector in (None, "all"):
        return list(STAGES)
    names = [selector] if isinstance(selector, str) else list(selector)
    for n in names:
        if n not in STAGES:
            raise ValueError(f"unknown stage {n!r}; choose from {', '.join(STAGES)}")
    return [s for s in STAGES if s in names]


def run(config=None, stages=None, force=False, out_dir=None):
    """Run the selected stages; ``config`` is a path, a dict, or None for the defaults."""
    cfg = config if isinstance(config, dict) else cfgmod.load_config(config)
    if isinstance(config, dict):
        cfgmod.validate(cfg)
    pipe = Pipeline(cfg, out_dir)
    pipe.out.mkdir(parents=True, exist_ok=True)
    _write_json(pipe.path("config.json"), cfg)
    selected = select_stages(stages)
    result = RunResult(pipe.out, None)
    upstream_ran = False
    for stage in selected:
        for prev in STAGES[: STAGES.index(stage)]:
            if prev not in selected and not pipe.is_current(prev):
                raise PrerequisiteError(prev, STAGE_OUTPUT[prev])
        if not force and not upstream_ran and pipe.is_current(stage):
            result.seconds[stage] = 0.0
            result.cached[stage] = True
            continue
        start = time.perf_counter()
        extra = getattr(pipe, "stage_" + stage.replace("-", "_"))()
        seconds = time.perf_counter() - start
        pipe.write_marker(stage, seconds, extra)
        result.seconds[stage] = seconds
        result.cached[stage] = False
        upstream_ran = True
    if pipe.path("report.json").exists() and pipe.is_current("report"):
        result.report = _read_json(pipe.path("report.json"))
    return result


# ---------------------------------------------------------------- diff


@dataclass
class ReportDiff:
    deltas: dict

    def text(self):
        lines = []
        for key, value in self.deltas.items():
            lines.append(f"{key:<28s} {value:+.2f}")
        return "\n".join(lines)


def _load_report(r):
    return r if isinstance(r, dict) else _read_json(r)


def diff_reports(a, b, row="after"):
    """Drops from report ``a`` to report ``b`` in percentage points (``a - b``).

    With ``a`` the no-defense result and ``b`` a defended one this is the
    usual "average drop" row: positive ASR drop is good, positive ACC drop is
    the clean-accuracy cost.  Smoothness is compared as ``a / b`` ratios.
    """
    a, b = _load_report(a), _load_report(b)
    if a.get("schema_version") != b.get("schema_version"):
        raise SchemaMismatchError(f"schema {a.get('schema_version')} vs {b.get('schema_version')}")
    ma, mb = a["metrics"][row], b["metrics"][row]
    deltas = {f"{k}_drop": round(100.0 * ma[k] - 100.0 * mb[k], 10) for k in ("asr", "acc", "lcr") if k in ma and k in mb}
    sa, sb = a.get("smoothness", {}).get(row), b.get("smoothness", {}).get(row)
    if sa and sb:
        deltas["lambda_max_ratio"] = sa["lambda_max"] / sb["lambda_max"]
        deltas["trace_ratio"] = sa["trace"] / sb["trace"]
    return ReportDiff(deltas)
