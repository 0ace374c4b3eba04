"""Small, fast experiment configs shared by the harness tests."""

import copy

from jacmatch.config import ExperimentConfig, _merge

TASK = {"kind": "gaussian-blobs", "n_classes": 3, "noise": 0.5, "n_train_per_class": 12,
        "n_test_per_class": 6, "image_side": 4, "dim": 2, "seed": 0}


def raw(out_dir, **over):
    base = {
        "name": "tiny",
        "task": copy.deepcopy(TASK),
        "student": {"arch": "vgg-1s", "width": 4},
        "epochs": 3,
        "batch_size": 8,
        "seeds": [0],
        "out_dir": str(out_dir),
    }
    return _merge(base, over)


def with_teacher(out_dir, **over):
    d = raw(out_dir, teacher={"arch": "vgg-2t", "width": 4, "epochs": 2})
    return _merge(d, over)


def config(out_dir, teach=False, **over) -> ExperimentConfig:
    return ExperimentConfig.from_dict(with_teacher(out_dir, **over) if teach else raw(out_dir, **over))
