import json

import numpy as np
import pytest

from jacmatch import data as D


def blobs(**kw):
    args = dict(kind="gaussian-blobs", n_classes=4, noise=0.5, n_train_per_class=30, n_test_per_class=10)
    args.update(kw)
    return D.SyntheticTask(**args)


@pytest.mark.parametrize("kind", D.TASK_KINDS)
def test_generate_is_balanced_and_deterministic(kind):
    task = D.SyntheticTask(kind=kind, n_classes=3, noise=0.1, n_train_per_class=20, n_test_per_class=7)
    tr, te = D.generate(task, 5)
    assert tr.class_counts() == [20] * 3 and te.class_counts() == [7] * 3
    tr2, te2 = D.generate(task, 5)
    assert np.array_equal(tr.inputs, tr2.inputs) and np.array_equal(te.labels, te2.labels)
    other, _ = D.generate(task, 6)
    assert not np.array_equal(tr.inputs, other.inputs)
    rows = {r.tobytes() for r in tr.inputs}
    assert not any(r.tobytes() in rows for r in te.inputs)


def test_zero_noise_blobs_are_linearly_separable():
    from sklearn.linear_model import LogisticRegression
    tr, _ = D.generate(blobs(noise=0.0), 0)
    probe = LogisticRegression(C=1e4, max_iter=5000).fit(tr.inputs, tr.labels)
    assert probe.score(tr.inputs, tr.labels) == 1.0


def test_negative_noise_rejected():
    with pytest.raises(ValueError, match="noise"):
        blobs(noise=-0.1)


def test_image_rendering_shape_and_linearity():
    tr, _ = D.generate(blobs(dim=2, image_side=8), 0)
    assert tr.input_shape == (2, 8, 8)
    points, _ = D.generate(blobs(dim=2), 0)
    t = D.spatial_templates(2, 8, 0)
    np.testing.assert_allclose(tr.inputs, points.inputs[:, :, None, None] * t[None], atol=0)


def test_subset_full_count_is_identity():
    tr, _ = D.generate(blobs(), 1)
    sub = D.subset_per_class(tr, 30, seed=0)
    assert np.array_equal(sub.inputs, tr.inputs)


def test_subset_one_per_class_on_many_classes():
    ds = D.Dataset(np.arange(300.0)[:, None], np.repeat(np.arange(100), 3), 100)
    sub = D.subset_per_class(ds, 1, seed=2)
    assert len(sub) == 100 and len(set(sub.labels.tolist())) == 100


def test_subset_insufficient_class_named():
    ds = D.Dataset(np.zeros((5, 1)), [0, 0, 0, 1, 1], 2)
    with pytest.raises(ValueError, match="class 1"):
        D.subset_per_class(ds, 3, seed=0)


def test_subset_seeds_differ_with_hypergeometric_overlap():
    ds = D.Dataset(np.arange(2000.0)[:, None], np.repeat([0, 1], 1000), 2)
    a = set(D.subset_per_class(ds, 100, 1).inputs[:, 0].tolist())
    b = set(D.subset_per_class(ds, 100, 2).inputs[:, 0].tolist())
    assert a != b
    # expected overlap per class 100*100/1000 = 10, i.e. 20 overall; sd about 4
    assert 5 <= len(a & b) <= 40 and len(a | b) == 400 - len(a & b)


def test_load_image_binary_exact_pixels(tmp_path):
    layout = D.ImageLayout(channels=2, height=1, width=2, n_classes=10)
    raw = bytes([3, 0, 255, 51, 102, 7, 255, 0, 0, 255])
    path = tmp_path / "two.bin"
    path.write_bytes(raw)
    ds = D.load_image_binary(path, layout, normalize=False)
    assert ds.labels.tolist() == [3, 7]
    np.testing.assert_array_equal(ds.inputs[0], [[[0.0, 1.0]], [[0.2, 0.4]]])
    np.testing.assert_array_equal(ds.inputs[1], [[[1.0, 0.0]], [[0.0, 1.0]]])
    norm = D.load_image_binary(path, layout)
    assert norm.normalized
    np.testing.assert_allclose(norm.inputs.mean(axis=(0, 2, 3)), 0.0, atol=1e-15)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    ds = D.load_image_binary(path, D.ImageLayout(3, 2, 2, 10))
    assert len(ds) == 0


def test_load_rejects_bad_label_and_truncation(tmp_path):
    layout = D.ImageLayout(1, 1, 1, 100)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes([255, 10]))
    with pytest.raises(ValueError, match="offset 0"):
        D.load_image_binary(bad, layout)
    short = tmp_path / "short.bin"
    short.write_bytes(bytes([1, 10, 2]))
    with pytest.raises(ValueError, match="offset 2"):
        D.load_image_binary(short, layout)


def test_noise_zero_is_identity_and_labels_kept():
    tr, _ = D.generate(blobs(), 0)
    assert D.add_input_noise(tr, 0.0, 1) is tr
    noisy = D.add_input_noise(tr, 0.5, 1)
    assert np.array_equal(noisy.labels, tr.labels)
    assert not np.array_equal(noisy.inputs, tr.inputs)
    with pytest.raises(ValueError):
        D.add_input_noise(tr, -1.0, 0)


def test_noise_variance():
    ds = D.Dataset(np.zeros((100_000, 3)), np.zeros(100_000, int), 1)
    noisy = D.add_input_noise(ds, 0.7, seed=4)
    var = noisy.inputs.var(axis=0)
    assert np.all(np.abs(var - 0.49) <= 0.02 * 0.49)


def test_normalize_twice_rejected():
    tr, _ = D.generate(blobs(image_side=4), 0)
    once = tr.normalize()
    with pytest.raises(ValueError, match="already normalized"):
        once.normalize()


def test_normalize_with_train_stats():
    tr, te = D.generate(blobs(image_side=4), 0)
    ntr = tr.normalize()
    nte = te.normalize(ntr.mean, ntr.std)
    np.testing.assert_array_equal(nte.mean, ntr.mean)
    np.testing.assert_allclose(ntr.inputs.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)


def test_manifest_json(tmp_path):
    tr, _ = D.generate(blobs(), 9)
    path = tmp_path / "m.json"
    tr.normalize().write_manifest(path)
    m = json.loads(path.read_text())
    assert m["counts"] == [30] * 4 and m["seed"] == 9 and m["normalized"]


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 1)), [0], 2)
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((1, 1)), [2], 2)
