"""SGD with momentum and Adam over dicts of numpy parameters, with step-drop schedules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("sgd-momentum", "adam")


@dataclass(frozen=True)
class Schedule:
    """Initial rate times ``factor`` for every milestone epoch already reached."""

    lr: float = 1e-3
    milestones: tuple = ()
    factor: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        m = tuple(int(e) for e in self.milestones)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {list(m)}")
        if not self.factor > 0:
            raise ValueError(f"schedule factor must be > 0, got {self.factor}")
        object.__setattr__(self, "milestones", m)

    def at(self, epoch: int) -> float:
        drops = sum(1 for e in self.milestones if epoch >= e)
        return self.lr * self.factor ** drops


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        sched = Schedule(d.pop("lr", 1e-3), tuple(d.pop("milestones", ())), d.pop("factor", 0.1))
        return cls(schedule=sched, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        s = d.pop("schedule")
        d.update(lr=s["lr"], milestones=list(s["milestones"]), factor=s["factor"])
        return d


class Optimizer:
    """Stateful update rule.  ``state`` round-trips through checkpoints."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.steps = 0
        self.slots: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, epoch: int) -> None:
        lr = self.config.schedule.at(epoch)
        self.steps += 1
        c = self.config
        for name in sorted(params):
            g = grads[name]
            if c.kind == "sgd-momentum":
                v = self.slots.get(f"v.{name}")
                v = g.copy() if v is None else c.momentum * v + g
                self.slots[f"v.{name}"] = v
                params[name] = params[name] - lr * v
            else:
                m = self.slots.get(f"m.{name}", np.zeros_like(g))
                v = self.slots.get(f"v.{name}", np.zeros_like(g))
                m = c.beta1 * m + (1 - c.beta1) * g
                v = c.beta2 * v + (1 - c.beta2) * g * g
                self.slots[f"m.{name}"], self.slots[f"v.{name}"] = m, v
                m_hat = m / (1 - c.beta1 ** self.steps)
                v_hat = v / (1 - c.beta2 ** self.steps)
                params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + c.eps)

    def state_tensors(self) -> dict:
        out = {f"optim.{k}": v for k, v in self.slots.items()}
        out["optim.steps"] = np.array([float(self.steps)])
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        self.slots = {k[len("optim."):]: np.array(v) for k, v in tensors.items()
                      if k.startswith("optim.") and k != "optim.steps"}
        self.steps = int(tensors["optim.steps"][0]) if "optim.steps" in tensors else 0
