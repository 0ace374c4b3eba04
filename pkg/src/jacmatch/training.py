"""Deterministic, resumable training of students (and teachers) on the composite loss."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, losses, nn
from .autodiff import Tape, grad
from .config import ExperimentConfig
from .optim import Optimizer


class NumericFailure(FloatingPointError):
    """Non-finite loss or gradient (CLI exit code 3)."""

    def __init__(self, term, epoch, checkpoint):
        self.term, self.epoch, self.checkpoint = term, epoch, checkpoint
        super().__init__(f"non-finite {term} at epoch {epoch}; last good checkpoint: {checkpoint}")


class InvariantViolation(AssertionError):
    """A structural guarantee did not hold (CLI exit code 4)."""


@dataclass
class RunResult:
    name: str
    config_hash: str
    seed: int
    n_train: int
    epochs: list
    train_accuracy: float
    test_accuracy: float
    robustness: list
    jacobian_reduction: dict
    teacher_digest: Optional[str] = None
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for acc in [self.train_accuracy, self.test_accuracy] + [a for _, a in self.robustness]:
            if not 0.0 <= acc <= 100.0:
                raise InvariantViolation(f"accuracy {acc} outside [0, 100]")

    def to_dict(self) -> dict:
        d = asdict(self)
        # timing lives in a sidecar so result files stay bit-reproducible
        d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)

    def term_names(self) -> list:
        return sorted({k for e in self.epochs for k in e if k not in ("epoch", "lr", "total")})


# data and teachers -------------------------------------------------------------------

def prepare_data(config: ExperimentConfig) -> tuple:
    """Normalized ``(train, test)``; test uses the training statistics."""
    task = config["task"]
    if "binary" in task:
        b = task["binary"]
        layout = data.ImageLayout(b["channels"], b["height"], b["width"], b["n_classes"])
        train = data.load_image_binary(b["train"], layout, normalize=False)
        test = data.load_image_binary(b["test"], layout, normalize=False)
    else:
        train, test = data.generate(config.task(), config.data_seed)
    train = train.normalize()
    return train, test.normalize(train.mean, train.std)


def accuracy(net, ds, head=None) -> float:
    if len(ds) == 0:
        return 0.0
    pred = np.argmax(net.predict_logits(ds.inputs, head), axis=1)
    return float(100.0 * np.mean(pred == ds.labels))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def teacher_config(config: ExperimentConfig) -> ExperimentConfig:
    """Plain cross-entropy run that produces the teacher on its (source) task."""
    t = config["teacher"]
    return ExperimentConfig.from_dict({
        "name": "teacher",
        "task": t.get("task") or config["task"],
        "student": {"arch": t["arch"], "width": t["width"], "hidden": t["hidden"],
                    "activation": t["activation"]},
        "optimizer": {k: v for k, v in config["optimizer"].items() if k != "milestones"},
        "epochs": t["epochs"],
        "batch_size": config["batch_size"],
        "seeds": [t["seed"]],
    })


def resolve_teacher(config: ExperimentConfig, cache_dir) -> tuple:
    """(teacher network, checkpoint path).  Trains and caches it when no checkpoint is given."""
    t = config["teacher"]
    if t is None:
        return None, None
    if t["checkpoint"]:
        path = Path(t["checkpoint"])
        if not path.exists():
            raise FileNotFoundError(f"teacher checkpoint {path} not found")
        return nn.load_network(path), path
    tcfg = teacher_config(config)
    path = Path(cache_dir) / "teachers" / f"teacher-{tcfg.hash()}.jmck"
    if not path.exists():
        train(tcfg, t["seed"], Path(cache_dir) / "teachers", model_path=path)
    return nn.load_network(path), path


def build_student(config: ExperimentConfig, input_shape, n_classes, seed) -> nn.Network:
    s = config["student"]
    net = nn.build(s["arch"], input_shape, n_classes, s["width"], s["heads"], s["hidden"],
                   s["activation"]).init_params(seed)
    if s["init_checkpoint"]:
        tensors, _ = nn.load_checkpoint(s["init_checkpoint"])
        net.load_params({k: v for k, v in tensors.items() if not k.startswith("optim.")}, strict=False)
    return net


# the loop ----------------------------------------------------------------------------

def _needs_second_order(spec: losses.LossSpec) -> bool:
    return spec.penalty > 0 or (spec.gamma > 0 and (spec.sigma > 0 or bool(spec.tap_pairs)))


def jacobian_terms(spec, teacher, student, X) -> dict:
    """Current value of every Jacobian-matching term the spec configures (weights ignored)."""
    if teacher is None or len(X) == 0:
        return {}
    out = {}
    for pair in spec.tap_pairs:
        v = losses.match_attention_jacobians(teacher, student, X, tuple(pair), spec.jac_strategy.pool_window)
        out[f"attention_jacobian@{pair[0]}-{pair[1]}"] = float(v.data)
    if not spec.tap_pairs and spec.gamma > 0:
        v = losses.match_jacobians_sq(teacher, student, X, spec.jac_strategy, spec.sigma,
                                      student_head=spec.match_head, teacher_head=spec.teacher_head)
        out["jacobian"] = float(v.data)
    return out


def run_epoch(student, teacher, spec, X, y, optimizer, epoch: int, seed: int, batch: int,
              check_second_order: bool = False, checkpoint=None) -> dict:
    """One pass over ``(X, y)`` in the order drawn from ``(seed, epoch)``; returns per-term means."""
    n = len(X)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    sums: dict = {}
    total_sum, batches = 0.0, 0
    for lo in range(0, n, batch):
        idx = order[lo: lo + batch]
        tape = Tape()
        params = {k: tape.watch(v) for k, v in student.params.items()}
        try:
            total, terms = losses.composite_loss(spec, X[idx], y[idx], student, params, teacher)
        except losses.LossTermError as exc:
            raise NumericFailure(f"{exc.term} term", epoch, checkpoint) from exc
        if check_second_order and batches == 0 and tape.count_differentiated_nodes() == 0:
            raise InvariantViolation("Jacobian terms configured but no second-order nodes on the tape")
        names = sorted(params)
        grads = grad(total, [params[k] for k in names])
        g = {k: gr.data for k, gr in zip(names, grads)}
        bad = [k for k, v in g.items() if not np.isfinite(v).all()]
        if bad or not np.isfinite(total.data).all():
            raise NumericFailure(f"gradient of {bad[0]}" if bad else "total loss", epoch, checkpoint)
        optimizer.step(student.params, g, epoch)
        for t in terms:
            sums[t.name] = sums.get(t.name, 0.0) + t.raw
        total_sum += float(total.data)
        batches += 1
    record = {"epoch": epoch + 1, "lr": optimizer.config.schedule.at(epoch), "total": total_sum / max(batches, 1)}
    record.update({k: v / max(batches, 1) for k, v in sorted(sums.items())})
    return record


def run_dir(config: ExperimentConfig, seed: int, out_dir=None) -> Path:
    return Path(out_dir or config["out_dir"]) / f"{config['name']}-{config.hash()}-s{seed}"


def train(config: ExperimentConfig, seed: int, out_dir=None, resume: bool = False,
          stop_after: Optional[int] = None, model_path=None) -> RunResult:
    """Train one (config, seed) cell.

    Writes ``checkpoint.jmck`` after every epoch, and at the end ``result.json``,
    ``epochs.csv``, ``model.jmck`` and a ``timing.json`` sidecar.  With
    ``stop_after`` the run halts after that many epochs in this session (the
    checkpoint allows ``resume``).  Returns ``None`` when halted early.
    """
    started = time.perf_counter()
    out = run_dir(config, seed, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.loss_spec()
    train_ds, test_ds = prepare_data(config)
    if config["subset_per_class"]:
        train_ds = data.subset_per_class(train_ds, config["subset_per_class"], seed)
    teacher, teacher_path = resolve_teacher(config, Path(out_dir or config["out_dir"]))
    student = build_student(config, train_ds.input_shape, train_ds.n_classes, seed)
    if teacher is not None:
        want = teacher.n_outputs(spec.teacher_head)
        got = student.n_outputs(spec.match_head)
        if spec.beta > 0 and want != got:
            raise ValueError(f"student head {spec.match_head!r} has {got} outputs but the teacher has {want}")
    ce_head = spec.ce_head
    if spec.alpha > 0 and student.n_outputs(ce_head) != train_ds.n_classes:
        raise ValueError(f"student head {ce_head!r} has {student.n_outputs(ce_head)} outputs "
                         f"for a {train_ds.n_classes}-class task")

    optimizer = Optimizer(config.optimizer_config())
    ckpt = out / "checkpoint.jmck"
    X_eval = train_ds.inputs[: config["reduction_examples"]]
    history, start = [], 0
    if resume and ckpt.exists():
        tensors, meta = nn.load_checkpoint(ckpt)
        if meta.get("config_hash") != config.hash():
            raise ValueError(f"{ckpt} belongs to config {meta.get('config_hash')}, not {config.hash()}")
        student.load_params({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        optimizer.load_state_tensors(tensors)
        history, start, initial = meta["history"], meta["epoch"], meta["initial_jacobian"]
    else:
        initial = jacobian_terms(spec, teacher, student, X_eval)
        _save(ckpt, student, optimizer, config, 0, history, initial)

    second_order = _needs_second_order(spec)
    epochs = config["epochs"]
    stop = epochs if stop_after is None else min(epochs, start + stop_after)
    for epoch in range(start, stop):
        record = run_epoch(student, teacher, spec, train_ds.inputs, train_ds.labels, optimizer, epoch, seed,
                           config["batch_size"], check_second_order=second_order and epoch == start,
                           checkpoint=ckpt)
        history.append(record)
        _save(ckpt, student, optimizer, config, epoch + 1, history, initial)
    if stop < epochs:
        return None

    final = jacobian_terms(spec, teacher, student, X_eval)
    reduction = {k: {"initial": initial[k], "final": final[k],
                     "reduction_pct": 100.0 * (initial[k] - final[k]) / initial[k] if initial[k] > 0 else 0.0}
                 for k in initial}
    robustness = []
    for i, s in enumerate(config["test_sigmas"]):
        noisy = data.add_input_noise(test_ds, s, [seed, i])
        robustness.append([float(s), accuracy(student, noisy, ce_head)])
    result = RunResult(
        name=config["name"], config_hash=config.hash(), seed=seed, n_train=len(train_ds), epochs=history,
        train_accuracy=accuracy(student, train_ds, ce_head), test_accuracy=accuracy(student, test_ds, ce_head),
        robustness=robustness, jacobian_reduction=reduction,
        teacher_digest=file_digest(teacher_path) if teacher_path else None)
    nn.save_network(model_path or out / "model.jmck", student,
                    metadata={"config_hash": config.hash(), "seed": seed})
    write_result(out, result)
    result.wall_clock = time.perf_counter() - started
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": result.wall_clock}) + "\n")
    return result


def _save(path, student, optimizer, config, epoch, history, initial):
    tensors = dict(student.params)
    tensors.update(optimizer.state_tensors())
    nn.save_checkpoint(path, tensors, {"config_hash": config.hash(), "epoch": epoch, "history": history,
                                       "initial_jacobian": initial, "network": student.to_spec()})


def write_result(out: Path, result: RunResult) -> None:
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    names = result.term_names()
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "total"] + names)
        for e in result.epochs:
            w.writerow([e["epoch"], repr(e["lr"]), repr(e["total"])] + [repr(e.get(k, "")) for k in names])


def load_result(path) -> RunResult:
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    return RunResult.from_dict(json.loads(path.read_text()))
