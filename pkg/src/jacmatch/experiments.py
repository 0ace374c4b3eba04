"""Experiment grids: distillation, noise robustness, two-headed transfer, ablations, reporting.

Every grid cell is one ``(config, seed)`` training run.  Cells are independent
and may run in worker processes; each is deterministic on its own, so results
do not depend on ``jobs``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, ExperimentConfig
from .training import InvariantViolation, RunResult, load_result, resolve_teacher, train

DISTILL_METHODS = {
    "Cross-Entropy (CE) training": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0},
    "CE + match activations": {"alpha": 1.0, "beta": 1.0, "gamma": 0.0},
    "CE + match Jacobians": {"alpha": 1.0, "beta": 0.0, "gamma": 1.0},
    "CE + match {activations + Jacobians}": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "Match activations only": {"alpha": 0.0, "beta": 1.0, "gamma": 0.0},
    "Match {activations + Jacobians}": {"alpha": 0.0, "beta": 1.0, "gamma": 1.0},
}

TRANSFER_METHODS = {
    "Cross-Entropy (CE) training on untrained student network": {"beta": 0.0, "gamma": 0.0, "attention_weight": 0.0},
    "CE on pre-trained student network (Oracle)": {"beta": 0.0, "gamma": 0.0, "attention_weight": 0.0},
    "CE + match activations": {"gamma": 0.0, "attention_weight": 0.0},
    "CE + match {activations + Jacobians}": {"attention_weight": 0.0},
    "CE + match {activations + attention}": {"gamma": 0.0},
    "CE + match {activations + attention + Jacobians}": {},
}
ORACLE = "CE on pre-trained student network (Oracle)"
CE_ONLY = "Cross-Entropy (CE) training on untrained student network"

POOL_WINDOWS = ("full", "s/3", "s/5", "s/7", "none")


# cell execution ---------------------------------------------------------------------

def _cell(args):
    raw, seed, out_dir = args
    return train(ExperimentConfig.from_dict(raw), seed, out_dir)


def run_cells(cells, out_dir, jobs: int = 1) -> list:
    """Run ``[(config, seed), ...]`` and return RunResults in the same order."""
    out_dir = Path(out_dir)
    seen = set()
    for cfg, _ in cells:
        # teachers are trained once, up front, so workers never race on the cache
        if cfg["teacher"] is not None and cfg.hash() not in seen:
            resolve_teacher(cfg, out_dir)
            seen.add(cfg.hash())
    args = [(cfg.to_dict(), seed, str(out_dir)) for cfg, seed in cells]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_cell, args))
    return [_cell(a) for a in args]


def summarize(results, value) -> dict:
    """Mean and population stddev of ``value(result)`` over seeds; hashes must agree."""
    hashes = {r.config_hash for r in results}
    if len(hashes) > 1:
        raise InvariantViolation(f"refusing to aggregate results with differing config hashes {sorted(hashes)}")
    vals = np.array([value(r) for r in results], dtype=np.float64)
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals),
            "config_hash": hashes.pop(), "values": vals.tolist()}


def pooled_std(a: dict, b: dict) -> float:
    return float(np.sqrt((a["std"] ** 2 + b["std"] ** 2) / 2))


def _write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _seeds(config, seeds):
    return list(seeds) if seeds is not None else list(config["seeds"])


def _slug(label: str) -> str:
    keep = "".join(c if c.isalnum() else "-" for c in label.lower())
    return "-".join(p for p in keep.split("-") if p)


# Table 1 analogue ---------------------------------------------------------------------

def distill_grid(base: ExperimentConfig, n_per_class, methods=None, seeds=None, out_dir=None,
                 jobs: int = 1) -> dict:
    """Test accuracy for every (method, per-class subset size); ``"full"`` means no subsetting."""
    if base["teacher"] is None:
        raise ConfigError("distill-grid needs a teacher (checkpoint or training recipe)")
    methods = list(methods or DISTILL_METHODS)
    unknown = [m for m in methods if m not in DISTILL_METHODS]
    if unknown:
        raise ConfigError(f"unknown distillation methods {unknown}; expected {list(DISTILL_METHODS)}")
    out_dir = Path(out_dir or base["out_dir"])
    seeds = _seeds(base, seeds)
    cells, keys = [], []
    for m in methods:
        for n in n_per_class:
            cfg = base.with_overrides(name=f"distill-{_slug(m)}-n{n}",
                                      subset_per_class=None if n == "full" else int(n),
                                      loss=DISTILL_METHODS[m])
            for s in seeds:
                cells.append((cfg, s))
                keys.append((m, n))
    results = run_cells(cells, out_dir, jobs)
    table = {m: {str(n): summarize([r for r, k in zip(results, keys) if k == (m, n)],
                                   lambda r: r.test_accuracy)
                 for n in n_per_class} for m in methods}
    header = ["method"] + [f"{n}{suffix}" for n in n_per_class for suffix in ("_mean", "_std")]
    rows = [[m] + [table[m][str(n)][k] for n in n_per_class for k in ("mean", "std")] for m in methods]
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(out_dir / "distill_grid.csv", header, rows)
    _write_json(out_dir / "distill_grid.json", {"n_per_class": [str(n) for n in n_per_class], "table": table})
    return table


# Table 2 analogue ---------------------------------------------------------------------

def robustness_grid(base: ExperimentConfig, lambdas, sigmas, seeds=None, out_dir=None, jobs: int = 1) -> dict:
    """Accuracy under test-time Gaussian noise for each Jacobian-norm penalty weight."""
    out_dir = Path(out_dir or base["out_dir"])
    seeds = _seeds(base, seeds)
    sigmas = [float(s) for s in sigmas]
    cells, keys = [], []
    for lam in lambdas:
        cfg = base.with_overrides(name=f"robust-lambda{lam:g}", loss={"penalty": float(lam)},
                                  test_sigmas=sigmas)
        for s in seeds:
            cells.append((cfg, s))
            keys.append(lam)
    results = run_cells(cells, out_dir, jobs)
    table = {}
    for lam in lambdas:
        runs = [r for r, k in zip(results, keys) if k == lam]
        table[f"{lam:g}"] = {f"{sg:g}": summarize(runs, lambda r, i=i: r.robustness[i][1])
                             for i, sg in enumerate(sigmas)}
    header = ["lambda"] + [f"sigma={sg:g}{suffix}" for sg in sigmas for suffix in ("_mean", "_std")]
    rows = [[f"{lam:g}"] + [table[f"{lam:g}"][f"{sg:g}"][k] for sg in sigmas for k in ("mean", "std")]
            for lam in lambdas]
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(out_dir / "robustness_grid.csv", header, rows)
    _write_json(out_dir / "robustness_grid.json", {"sigmas": sigmas, "table": table})
    return table


# Table 3 analogue ---------------------------------------------------------------------

def _check_transfer_heads(base: ExperimentConfig, out_dir):
    teacher, _ = resolve_teacher(base, out_dir)
    heads = base["student"]["heads"] or {}
    spec = base.loss_spec()
    if spec.match_head not in heads or spec.ce_head not in heads or spec.match_head == spec.ce_head:
        raise ConfigError("transfer needs a two-headed student with distinct loss.match_head and loss.ce_head")
    if heads[spec.match_head] != teacher.n_outputs(spec.teacher_head):
        raise ConfigError(f"student head {spec.match_head!r} has {heads[spec.match_head]} outputs "
                          f"but the teacher has {teacher.n_outputs(spec.teacher_head)}")
    return teacher


def oracle_checkpoint(base: ExperimentConfig, out_dir, seed: int) -> Path:
    """Student architecture trained with CE on the source task, used as initialization."""
    spec = base.loss_spec()
    src = base["teacher"]["task"] or base["task"]
    raw = base.to_dict()
    raw.update(name="oracle-pretrain", task=src, teacher=None, subset_per_class=None)
    raw["student"]["init_checkpoint"] = None
    raw["loss"] = {"alpha": 1.0, "ce_head": spec.match_head}
    cfg = ExperimentConfig.from_dict(raw)
    path = Path(out_dir) / "oracles" / f"oracle-{cfg.hash()}-s{seed}.jmck"
    if not path.exists():
        train(cfg, seed, Path(out_dir) / "oracles", model_path=path)
    return path


def transfer_run(base: ExperimentConfig, methods=None, seeds=None, out_dir=None, jobs: int = 1) -> dict:
    """Two-headed transfer: CE on the target head plus matching terms on the source head."""
    out_dir = Path(out_dir or base["out_dir"])
    _check_transfer_heads(base, out_dir)
    methods = list(methods or TRANSFER_METHODS)
    unknown = [m for m in methods if m not in TRANSFER_METHODS]
    if unknown:
        raise ConfigError(f"unknown transfer methods {unknown}; expected {list(TRANSFER_METHODS)}")
    seeds = _seeds(base, seeds)
    cells, keys = [], []
    for m in methods:
        for s in seeds:
            over = {"name": f"transfer-{_slug(m)}", "loss": TRANSFER_METHODS[m]}
            if m == ORACLE:
                over["student"] = {"init_checkpoint": str(oracle_checkpoint(base, out_dir, s))}
                over["name"] += f"-s{s}"
            cells.append((base.with_overrides(**over), s))
            keys.append(m)
    results = run_cells(cells, out_dir, jobs)
    table = {}
    for m in methods:
        runs = [r for r, k in zip(results, keys) if k == m]
        # oracle cells differ only in their init checkpoint, one per seed
        if m == ORACLE:
            runs = [RunResult(**{**r.to_dict(), "config_hash": "oracle"}) for r in runs]
        row = {"accuracy": summarize(runs, lambda r: r.test_accuracy)}
        taps = sorted({t for r in runs for t in r.jacobian_reduction})
        row["jacobian_reduction_pct"] = {
            t: summarize(runs, lambda r, t=t: r.jacobian_reduction[t]["reduction_pct"]) for t in taps}
        table[m] = row
    taps = sorted({t for row in table.values() for t in row["jacobian_reduction_pct"]})
    header = ["method", "accuracy_mean", "accuracy_std"] + [f"{t}_reduction_pct" for t in taps]
    rows = [[m, table[m]["accuracy"]["mean"], table[m]["accuracy"]["std"]]
            + [table[m]["jacobian_reduction_pct"][t]["mean"] if t in table[m]["jacobian_reduction_pct"] else ""
               for t in taps] for m in methods]
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(out_dir / "transfer.csv", header, rows)
    _write_json(out_dir / "transfer.json", table)
    return table


# Tables 3-4 ablations -----------------------------------------------------------------

def _validate_tap(base, pair, out_dir):
    teacher, _ = resolve_teacher(base, out_dir)
    s = base["student"]
    probe = nn.build(s["arch"], teacher.input_shape, 2, s["width"], s["heads"], s["hidden"], s["activation"])
    t_shape, s_shape = teacher.tap_shape(pair[0]), probe.tap_shape(pair[1])
    if tuple(t_shape[-2:]) != tuple(s_shape[-2:]):
        raise ConfigError(f"tap spatial sizes differ: teacher tap {pair[0]} {tuple(t_shape)}, "
                          f"student tap {pair[1]} {tuple(s_shape)}")


def ablate(base: ExperimentConfig, axis: str, values, seeds=None, out_dir=None, jobs: int = 1) -> dict:
    """Accuracy and Jacobian-loss reduction along ``axis`` in {"tap-depth", "pool-window"}."""
    out_dir = Path(out_dir or base["out_dir"])
    if base["teacher"] is None:
        raise ConfigError("ablations need a teacher")
    seeds = _seeds(base, seeds)
    cells, keys = [], []
    for v in values:
        if axis == "tap-depth":
            pair = [int(v[0]), int(v[1])]
            _validate_tap(base, pair, out_dir)
            over = {"loss": {"tap_pairs": [pair]}}
            label = f"{pair[0]}-{pair[1]}"
        elif axis == "pool-window":
            over = {"loss": {"pool_window": v}}
            label = str(v)
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected 'tap-depth' or 'pool-window'")
        cfg = base.with_overrides(name=f"ablate-{axis}-{_slug(label)}", **over)
        for s in seeds:
            cells.append((cfg, s))
            keys.append(label)
    results = run_cells(cells, out_dir, jobs)
    table = {}
    for label in dict.fromkeys(keys):
        runs = [r for r, k in zip(results, keys) if k == label]
        term = sorted(runs[0].jacobian_reduction)
        table[label] = {
            "accuracy": summarize(runs, lambda r: r.test_accuracy),
            "jacobian_reduction_pct": summarize(
                runs, lambda r: float(np.mean([r.jacobian_reduction[t]["reduction_pct"] for t in term]))
                if term else 0.0),
        }
    rows = [[label, t["accuracy"]["mean"], t["accuracy"]["std"], t["jacobian_reduction_pct"]["mean"]]
            for label, t in table.items()]
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_table(out_dir / f"ablate_{axis}.csv", [axis, "accuracy_mean", "accuracy_std", "reduction_pct_mean"],
                 rows)
    _write_json(out_dir / f"ablate_{axis}.json", table)
    return table


# reporting ----------------------------------------------------------------------------

def report(paths, out_path=None) -> dict:
    """Aggregate per-run results (directories or result.json files) grouped by run name.

    Runs sharing a name must share a config hash.
    """
    results = [load_result(p) for p in paths]
    if not results:
        raise ConfigError("no results to report")
    groups: dict = {}
    for r in results:
        groups.setdefault(r.name, []).append(r)
    table = {}
    for name, runs in sorted(groups.items()):
        table[name] = {"test_accuracy": summarize(runs, lambda r: r.test_accuracy),
                       "seeds": sorted(r.seed for r in runs)}
    if out_path:
        _write_table(out_path, ["name", "config_hash", "n_seeds", "accuracy_mean", "accuracy_std"],
                     [[n, t["test_accuracy"]["config_hash"], t["test_accuracy"]["n"],
                       t["test_accuracy"]["mean"], t["test_accuracy"]["std"]] for n, t in table.items()])
    return table
