"""Verification labs behind ``jacmatch verify``: noise equivalence, exactness, dataset bound."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import bound, data, nn
from . import noise_lab as lab

SIGMAS = (0.2, 0.1, 0.05, 0.025)
SLOPE_TARGET = 4.0
SLOPE_TOL = 0.5
KIND_FOR_FAMILY = {"squared": "squared", "squared-error": "squared", "cross-entropy": "cross-entropy",
                   "penalty-squared": "penalty-squared", "penalty-cross-entropy": "penalty-cross-entropy"}


def smooth_pair(seed: int, dim: int = 2, k: int = 2) -> tuple:
    """Sigmoid teacher [dim, 5, k] and student [dim, 4, k], seeded."""
    return (nn.mlp([dim, 5, k], "sigmoid").init_params(seed),
            nn.mlp([dim, 4, k], "sigmoid").init_params(seed + 1000))


def relu_fixture() -> tuple:
    """Teacher 2*relu(x) with its breakpoint at 0, student the identity."""
    t = nn.Network((1,), [nn.Dense(1, 1), nn.ReLU()], {"out": nn.Dense(1, 1)})
    t.params = {"trunk.0.weight": np.ones((1, 1)), "trunk.0.bias": np.zeros(1),
                "head.out.weight": 2 * np.ones((1, 1)), "head.out.bias": np.zeros(1)}
    s = nn.Network((1,), [], {"out": nn.Dense(1, 1)})
    s.params = {"head.out.weight": np.ones((1, 1)), "head.out.bias": np.zeros(1)}
    return t, s


def sigmoid_fixture() -> tuple:
    """Steep sigmoid teacher against the identity: curvature makes the expansion inexact."""
    t = nn.mlp([1, 3, 1], "sigmoid").init_params(2)
    t.params["trunk.0.weight"] = 4 * t.params["trunk.0.weight"]
    return t, relu_fixture()[1]


def noise_equivalence(family: str = "squared", sigmas=SIGMAS, n_pairs: int = 20, dim: int = 2,
                      seed: int = 0, with_curvature: bool = False) -> dict:
    """Residual slope for ``n_pairs`` seeded smooth pairs; passes when every slope is 4 +- 0.5.

    Cross-entropy kinds carry no asserted exponent and always report ``passed = None``.
    """
    if family not in KIND_FOR_FAMILY:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(KIND_FOR_FAMILY)}")
    kind = KIND_FOR_FAMILY[family]
    rows = []
    for i in range(n_pairs):
        t, s = smooth_pair(seed + i, dim)
        rng = np.random.default_rng([seed, i])
        x = rng.normal(size=dim)
        y = np.eye(2)[i % 2]
        study = lab.residual_scaling_study(kind, t, s, x, sigmas, y=y, with_curvature=with_curvature)
        rows.append({"pair": seed + i, "x": x.tolist(), **study.to_dict()})
    asserted = kind in ("squared", "penalty-squared")
    slopes = [r["slope"] for r in rows if r["slope"] is not None]
    ok = [r["slope"] is None or abs(r["slope"] - SLOPE_TARGET) <= SLOPE_TOL for r in rows]
    return {
        "lab": "noise-equiv", "family": family, "sigmas": list(sigmas), "with_curvature": with_curvature,
        "n_pairs": n_pairs, "slopes": slopes,
        "slope_min": min(slopes) if slopes else None, "slope_max": max(slopes) if slopes else None,
        "n_within_tolerance": int(sum(ok)),
        "passed": bool(all(ok)) if asserted else None,
        "pairs": rows,
    }


def exactness(n_samples: int = 100_000, seed: int = 0) -> dict:
    """ReLU fixture must pass inside its linear region; the sigmoid control must fail."""
    t, s = relu_fixture()
    relu = lab.piecewise_exactness_check(t, s, np.array([1.0]), radius=0.5, sigma=0.4,
                                         n_samples=n_samples, seed=seed)
    t, s = sigmoid_fixture()
    control = lab.piecewise_exactness_check(t, s, np.array([1.0]), radius=0.5, sigma=0.4,
                                            n_samples=n_samples, seed=seed)
    return {"lab": "exactness", "relu": relu.to_dict(), "sigmoid_control": control.to_dict(),
            "passed": bool(relu.passed and not control.passed)}


def _random_instance(seed: int):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    t = nn.mlp([dim, int(rng.integers(2, 9)), k]).init_params(seed)
    s = nn.mlp([dim, int(rng.integers(2, 9)), k]).init_params(seed + 10 ** 6)
    source = rng.normal(size=(int(rng.integers(1, 80)), dim))
    target = rng.normal(size=(int(rng.integers(1, 30)), dim)) * rng.uniform(0.5, 2.0)
    return t, s, source, target


def dataset_bound(n_instances: int = 100, seed: int = 0, jobs: int = 1) -> dict:
    """Check the mean-versus-max inequality on seeded random instances."""
    reports = []
    for i in range(n_instances):
        t, s, src, tgt = _random_instance(seed + i)
        reports.append(bound.check_dataset_bound(t, s, src, tgt, jobs=jobs).to_dict())
    failures = [i for i, r in enumerate(reports) if not r["holds"]]
    return {"lab": "bound", "n_instances": n_instances, "n_holds": n_instances - len(failures),
            "failures": failures, "min_slack": min(r["slack"] for r in reports),
            "passed": not failures, "instances": reports}


def superset_trials(n_trials: int = 100, seed: int = 0) -> dict:
    """Hausdorff distance never grows when the target set gains points.

    Odd trials add random points, even trials add noise-augmented copies of the target.
    """
    rows = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, i])
        src = rng.normal(size=(int(rng.integers(1, 60)), 3))
        tgt = rng.normal(size=(int(rng.integers(1, 20)), 3))
        if i % 2 == 0:
            ds = data.Dataset(tgt, np.zeros(len(tgt), dtype=int), 1)
            extra = data.add_input_noise(ds, float(rng.uniform(0.05, 1.0)), [seed, i]).inputs
        else:
            extra = rng.normal(size=(int(rng.integers(1, 10)), 3))
        before, after = bound.superset_monotonicity(src, tgt, extra)
        rows.append({"trial": i, "noise_copies": i % 2 == 0, "before": before, "after": after,
                     "holds": after <= before})
    failures = [r["trial"] for r in rows if not r["holds"]]
    return {"lab": "superset", "n_trials": n_trials, "failures": failures, "passed": not failures,
            "trials": rows}


def summary_lines(report: dict) -> list:
    lab_name = report["lab"]
    if lab_name == "noise-equiv":
        lines = [f"noise-equiv family={report['family']} sigmas={report['sigmas']} "
                 f"curvature={report['with_curvature']}"]
        lines += [f"  pair {r['pair']}: slope={r['slope']} status={r['status']}" for r in report["pairs"]]
        lines.append(f"  within 4 +- 0.5: {report['n_within_tolerance']}/{report['n_pairs']} "
                     f"passed={report['passed']}")
        return lines
    if lab_name == "exactness":
        r, c = report["relu"], report["sigmoid_control"]
        return [f"exactness relu: passed={r['passed']} residual={r['residual']:.3e} tol={r['tolerance']:.3e}",
                f"exactness sigmoid control: passed={c['passed']} residual={c['residual']:.3e} "
                f"tol={c['tolerance']:.3e}",
                f"  overall passed={report['passed']}"]
    if lab_name == "bound":
        head = "instance lhs max_term K H_a rhs slack"
        rows = [f"{i} {r['lhs']:.6g} {r['max_term']:.6g} {r['lipschitz']:.6g} {r['hausdorff']:.6g} "
                f"{r['rhs']:.6g} {r['slack']:.6g}" for i, r in enumerate(report["instances"])]
        return [head] + rows + [f"holds {report['n_holds']}/{report['n_instances']}"]
    return [f"superset trials: {report['n_trials'] - len(report['failures'])}/{report['n_trials']} non-increasing"]


def write(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"verify_{report['lab']}.json"
    lab.write_report(path, report)
    (out / f"verify_{report['lab']}.txt").write_text("\n".join(summary_lines(report)) + "\n")
    return path
