"""Monte-Carlo fault-injection experiments and sweep reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, nn
from ..faults import (FaultModel, apply_faults, apply_states, cell_states, derive_seed, mismatch_counts,
                      sample_fault_mask)
from ..mapping import MappingScheme, encode, map_layer, reconstruct_effective_weights
from ..pruning import magnitude_prune, mismatch_expectation, prune_ratio

CSV_COLUMNS = ("scheme", "p_off", "p_on", "prune_ratio", "trials", "acc_mean", "acc_std", "acc_min",
               "acc_max", "mismatch_cell", "mismatch_weight", "expectation_E_prime", "seed")
REPORT_FORMAT = "reramft-report"
REPORT_VERSION = 1


@dataclass
class PointStats:
    accuracies: list
    mismatch_cell: float
    mismatch_weight: float

    @property
    def trials(self):
        return len(self.accuracies)

    @property
    def acc_mean(self):
        return float(np.mean(self.accuracies))

    @property
    def acc_std(self):
        return float(np.std(self.accuracies, ddof=1)) if self.trials > 1 else 0.0

    @property
    def acc_sem(self):
        return self.acc_std / math.sqrt(self.trials)

    @property
    def acc_min(self):
        return float(np.min(self.accuracies))

    @property
    def acc_max(self):
        return float(np.max(self.accuracies))

    def summary(self):
        return {"trials": self.trials, "acc_mean": self.acc_mean, "acc_std": self.acc_std,
                "acc_min": self.acc_min, "acc_max": self.acc_max, "mismatch_cell": self.mismatch_cell,
                "mismatch_weight": self.mismatch_weight, "accuracies": list(self.accuracies)}


class _TrialRunner:
    """Everything one Monte-Carlo trial needs; mapped tiles are built once."""

    def __init__(self, model, scheme, fault_model, dataset, seed, tile_rows, tile_cols,
                 fixed_device, include_padding):
        self.model = model
        self.data = dataset.reshaped(model.input_shape)
        self.fault_model = fault_model
        self.seed = seed
        self.fixed_device = fixed_device
        self.include_padding = include_padding
        self.mapped = [(i, map_layer(model.layers[i].matrix(), scheme, tile_rows, tile_cols))
                       for i in model.prunable()]

    def __call__(self, trial):
        t = 0 if self.fixed_device else trial
        new, cc, nc, cw, nw = {}, 0, 0, 0, 0
        for i, mapped in self.mapped:
            mask = sample_fault_mask(mapped, self.fault_model, derive_seed(self.seed, t, i),
                                     include_padding=self.include_padding)
            faulted = apply_faults(mapped, mask)
            counts = mismatch_counts(mapped, faulted)
            cc, nc, cw, nw = cc + counts[0], nc + counts[1], cw + counts[2], nw + counts[3]
            new[i] = self.model.layers[i].from_matrix(reconstruct_effective_weights(faulted))
        acc = nn.evaluate_accuracy(self.model.with_weights(new), self.data)
        return acc, cc, nc, cw, nw


_WORKER = None


def _init_worker(args):
    global _WORKER
    _WORKER = _TrialRunner(*args)


def _run_worker(trial):
    return _WORKER(trial)


def evaluate_with_faults(model, scheme, fault_model, dataset, trials=100, seed=0, *, tile_rows=128,
                         tile_cols=128, jobs=1, fixed_device=False, include_padding=False):
    """Map, fault, reconstruct and score the model ``trials`` times.

    Trial ``t`` of layer ``i`` draws its mask from ``derive_seed(seed, t, i)``,
    so results do not depend on ``jobs``. Biases stay digital and are never
    faulted.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    scheme = MappingScheme.parse(scheme)
    args = (model, scheme, fault_model, dataset, seed, tile_rows, tile_cols, fixed_device, include_padding)
    if jobs > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(args,)) as pool:
            results = list(pool.map(_run_worker, range(trials), chunksize=max(1, trials // (4 * jobs))))
    else:
        runner = _TrialRunner(*args)
        results = [runner(t) for t in range(trials)]
    accs = [r[0] for r in results]
    cells = sum(r[2] for r in results)
    weights = sum(r[4] for r in results)
    return PointStats(accs, sum(r[1] for r in results) / cells, sum(r[3] for r in results) / weights)


# --- sweeps ------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    model_path: str
    dataset: str
    schemes: list
    fault_points: list  # [[p_off, p_on], ...]
    ratios: list = field(default_factory=lambda: [0.0])
    trials: int = 100
    seed: int = 0
    out: str = "report.csv"
    split: str = "test"
    eval_subset: int | None = None
    tile_rows: int = 128
    tile_cols: int = 128
    finetune_epochs: int = 0
    finetune_lr: float = 0.02
    finetune_momentum: float = 0.9
    include_padding: bool = False
    fixed_device: bool = False

    def __post_init__(self):
        self.schemes = [MappingScheme.parse(s).value for s in self.schemes]
        self.fault_points = [[float(a), float(b)] for a, b in self.fault_points]
        self.ratios = [float(r) for r in self.ratios]
        if not self.schemes or not self.fault_points or not self.ratios:
            raise ValueError("sweep grids must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for p_off, p_on in self.fault_points:
            FaultModel(p_off, p_on)
        if any(not 0 <= r <= 1 for r in self.ratios):
            raise ValueError("pruning ratios must lie in [0, 1]")

    @classmethod
    def from_rates(cls, rates, on_off_ratio=5.2, **kwargs):
        fms = [FaultModel.from_rate(r, on_off_ratio) for r in rates]
        return cls(fault_points=[[f.p_off, f.p_on] for f in fms], **kwargs)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        cfg = self.to_dict()
        cfg.pop("out")
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()

    def grid(self):
        for scheme in self.schemes:
            for p_off, p_on in self.fault_points:
                for ratio in self.ratios:
                    yield scheme, p_off, p_on, ratio


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    points: list
    provenance: dict

    def csv_text(self):
        return csv_payload(self.points)

    def to_json(self):
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION, "config": self.spec.to_dict(),
                "provenance": self.provenance, "points": self.points}


def _fmt(x):
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def csv_payload(points):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in points:
        w.writerow([_fmt(p.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def prune_for_sweep(model, ratio, *, finetune_epochs=0, train_data=None, lr=0.02, momentum=0.9, seed=0):
    """Global magnitude pruning (all weighted layers pooled) plus optional masked fine-tuning.

    Ratio 0 returns the input model untouched.
    """
    if ratio == 0:
        return model
    pruned = magnitude_prune(model, model.prunable(), ratio)
    if finetune_epochs > 0:
        if train_data is None:
            raise ValueError("fine-tuning needs training data")
        pruned = nn.train_sgd(pruned, train_data, finetune_epochs, lr, momentum, seed=seed, respect_mask=True)
    return pruned


def _environment():
    return {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "prng": "philox4x64-10 keyed by splitmix64(seed, trial, layer)",
            "biases_faulted": False}


def _progress_path(out):
    return Path(str(out) + ".progress.jsonl")


def _load_progress(path, fingerprint):
    if not path.exists():
        return {}
    done = {}
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("fingerprint") != fingerprint:
        raise ValueError(f"{path} belongs to a different sweep configuration; remove it to start over")
    for rec in lines[1:]:
        done[tuple(rec["key"])] = rec["point"]
    return done


def sweep(spec, *, model=None, dataset=None, train_data=None, jobs=1, log=None):
    """Evaluate every (scheme, fault point, pruning ratio) grid point.

    Completed points are appended to ``<out>.progress.jsonl`` as they finish;
    rerunning the same spec skips them. Final results go to ``spec.out``
    (CSV) and ``spec.out`` with a ``.json`` suffix (full report).
    """
    from .io import load_dataset, load_model

    started = time.time()
    if model is None:
        model = load_model(spec.model_path)
    if dataset is None:
        dataset = load_dataset(spec.dataset, spec.split)
    dataset = dataset.subset(spec.eval_subset)
    if spec.finetune_epochs > 0 and train_data is None:
        train_data = load_dataset(spec.dataset, "train")

    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    progress = _progress_path(out)
    fp = spec.fingerprint()
    done = _load_progress(progress, fp)
    if not progress.exists():
        with open(progress, "w") as fh:
            fh.write(json.dumps({"fingerprint": fp, "config": spec.to_dict()}, sort_keys=True) + "\n")

    pruned = {}
    points = []
    for scheme, p_off, p_on, ratio in spec.grid():
        key = (scheme, p_off, p_on, ratio)
        if key in done:
            points.append(done[key])
            continue
        point = {"scheme": scheme, "p_off": p_off, "p_on": p_on, "prune_ratio": ratio,
                 "trials": spec.trials, "seed": spec.seed}
        try:
            if ratio not in pruned:
                pruned[ratio] = prune_for_sweep(model, ratio, finetune_epochs=spec.finetune_epochs,
                                                train_data=train_data, lr=spec.finetune_lr,
                                                momentum=spec.finetune_momentum, seed=spec.seed)
            m = pruned[ratio]
            stats = evaluate_with_faults(m, scheme, FaultModel(p_off, p_on), dataset, spec.trials, spec.seed,
                                         tile_rows=spec.tile_rows, tile_cols=spec.tile_cols, jobs=jobs,
                                         fixed_device=spec.fixed_device, include_padding=spec.include_padding)
            r_p = prune_ratio(m)
            point.update(stats.summary())
            point.update({"status": "ok", "measured_prune_ratio": r_p,
                          "acc_clean": nn.evaluate_accuracy(m, dataset),
                          "expectation_E_prime": mismatch_expectation(p_off, p_on, r_p)})
        except Exception as exc:  # recorded, sweep continues
            point.update({"status": "error", "error": f"{type(exc).__name__}: {exc}"})
        with open(progress, "a") as fh:
            fh.write(json.dumps({"key": list(key), "point": point}, sort_keys=True) + "\n")
        if log is not None:
            log(point)
        points.append(point)

    prov = _environment()
    prov["wall_time_s"] = time.time() - started
    prov["seed"] = spec.seed
    report = ExperimentReport(spec, points, prov)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(report.csv_text())
    os.replace(tmp, out)
    out.with_suffix(".json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    return report


# --- analytic check ----------------------------------------------------------

def verify_expectation(cells, fault_model, ratios, trials=1, seed=0):
    """Monte-Carlo per-weight mismatch vs. the analytic expectation, single-cell setting.

    A nonnegative layer of ``cells`` weights, the first ``round(R_p * cells)``
    of them zero, is mapped one cell per weight (the positive column of the
    two-column scheme). Returns one row per ratio with the analytic value,
    the empirical rate and its z-score.
    """
    if cells < 1 or trials < 1:
        raise ValueError("cells and trials must be >= 1")
    rows = []
    for j, r_p in enumerate(ratios):
        n_zero = int(round(r_p * cells))
        w = np.zeros(cells)
        w[n_zero:] = np.linspace(0.05, 0.95, cells - n_zero)
        g = encode(MappingScheme.TWO_COLUMN, w)[..., 0]
        mism = 0
        for t in range(trials):
            states = cell_states(cells, fault_model, derive_seed(seed, j, t))
            mism += int(np.count_nonzero(apply_states(g, states) != g))
        n = cells * trials
        actual_rp = n_zero / cells
        e = mismatch_expectation(fault_model.p_off, fault_model.p_on, actual_rp)
        emp = mism / n
        sigma = math.sqrt(e * (1 - e) / n)
        z = (emp - e) / sigma if sigma > 0 else (0.0 if emp == e else math.inf)
        rows.append({"R_p": actual_rp, "p_off": fault_model.p_off, "p_on": fault_model.p_on,
                     "E_prime": e, "empirical": emp, "z": z, "samples": n})
    return rows
