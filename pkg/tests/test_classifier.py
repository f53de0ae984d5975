import struct

import numpy as np
import pytest

from cascade_fpr.classifier import (
    NODULE_ACCURACY,
    OVERALL_ACCURACY,
    ArchError,
    ArchSpec,
    Hyper,
    ModelFormatError,
    TrainingError,
    accuracy_from_probs,
    evaluate_accuracy,
    init_model,
    load_model,
    model_from_bytes,
    model_to_bytes,
    predict,
    predict_proba,
    save_model,
    train,
)
from cascade_fpr.tensor import Dense, ShapeError, softmax

SMALL = ArchSpec.standard(8, (4,), 8, 1)


def toy_set(n, seed):
    """Patches a*U + b*V with label [a > b]; |a - b| >= 0.2 keeps a margin."""
    rng = np.random.default_rng(seed)
    basis = np.random.default_rng(99).random((2, 8, 8, 1))
    a = rng.uniform(0, 1, n)
    b = np.clip(a + rng.choice([-1, 1], n) * rng.uniform(0.2, 0.6, n), 0, 1)
    keep = np.abs(a - b) >= 0.2
    a, b = a[keep], b[keep]
    patches = a[:, None, None, None] * basis[0] + b[:, None, None, None] * basis[1]
    return patches, (a > b).astype(np.int64)


def logistic_oracle(x, y, steps=3000, lr=0.5):
    """Plain full-batch logistic regression; returns training accuracy."""
    x = np.c_[x.reshape(len(x), -1), np.ones(len(x))]
    w = np.zeros(x.shape[1])
    for _ in range(steps):
        p = 1 / (1 + np.exp(-x @ w))
        w -= lr * x.T @ (p - y) / len(y)
    return float(((x @ w > 0) == (y == 1)).mean())


def test_default_param_count_closed_form():
    conv = 3 * 3 * 3 * 16 + 16 + 3 * 3 * 16 * 32 + 32 + 3 * 3 * 32 * 64 + 64
    fc = 6 * 6 * 64 * 128 + 128 + 128 * 2 + 2
    assert ArchSpec().parameter_count() == conv + fc == 318882


def test_invalid_arch_rejected():
    with pytest.raises(ArchError):
        init_model(ArchSpec((8, 8, 1), ()), 0)
    with pytest.raises(ArchError):
        init_model(ArchSpec((8, 8, 1), (("conv", 2), ("dense", 3))), 0)
    with pytest.raises(ArchError):
        init_model(ArchSpec((6, 6, 1), (("pool",), ("pool",), ("dense", 2))), 0)


def test_init_deterministic_and_scaled():
    a, b = init_model(SMALL, 5), init_model(SMALL, 5)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
    assert model_to_bytes(a) == model_to_bytes(b)
    for layer in a.network.layers:
        if layer.params:
            limit = np.sqrt(6 / layer.fan_in)
            w = next(v for k, v in layer.params.items() if k != "bias")
            assert np.abs(w).max() <= limit and np.all(layer.params["bias"] == 0)
    c = init_model(SMALL, 6)
    assert any(not np.array_equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_zero_final_layer_gives_half():
    model = init_model(SMALL, 1)
    last = [l for l in model.network.layers if isinstance(l, Dense)][-1]
    last.params["weights"][...] = 0
    probs = predict_proba(model, np.random.default_rng(0).random((5, 8, 8, 1)))
    np.testing.assert_array_equal(probs, 0.5)


def test_probabilities_normalised_and_repeatable():
    model = init_model(SMALL, 2)
    x = np.random.default_rng(1).random((6, 8, 8, 1))
    x[3] = x[0]
    p = predict_proba(model, x)
    assert p[3] == p[0] and np.all((p > 0) & (p < 1))
    logits = model.network.forward(x)
    model.network._taped = False
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(softmax(logits)[:, 1], p, atol=1e-15)
    assert predict(model, x[1]) == p[1]


def test_predict_dim_mismatch():
    with pytest.raises(ShapeError):
        predict_proba(init_model(SMALL, 0), np.zeros((2, 8, 8, 3)))


def test_zero_epochs_unchanged():
    model = init_model(SMALL, 3)
    before = model_to_bytes(model)
    x, y = toy_set(40, 1)
    train(model, x, y, x, y, OVERALL_ACCURACY, Hyper(epochs=0), np.random.default_rng(0))
    assert model_to_bytes(model) == before and model.log == []


def test_training_deterministic():
    x, y = toy_set(60, 2)
    hyper = Hyper(epochs=3, learning_rate=0.05)
    a = train(init_model(SMALL, 4), x, y, x, y, OVERALL_ACCURACY, hyper, np.random.default_rng(8))
    b = train(init_model(SMALL, 4), x, y, x, y, OVERALL_ACCURACY, hyper, np.random.default_rng(8))
    assert model_to_bytes(a) == model_to_bytes(b)
    assert a.log == b.log


def test_separable_toy_reaches_full_accuracy():
    x, y = toy_set(300, 3)
    vx, vy = toy_set(120, 4)
    assert logistic_oracle(x, y) == 1.0  # separability confirmed independently
    model = train(init_model(SMALL, 0), x, y, vx, vy, OVERALL_ACCURACY, Hyper(epochs=20, learning_rate=0.05),
                  np.random.default_rng(1))
    assert evaluate_accuracy(model, vx, vy, OVERALL_ACCURACY) == 1.0
    assert model.meta["criterion_value"] == 1.0


def test_selection_keeps_best_epoch():
    x, y = toy_set(100, 5)
    model = train(init_model(SMALL, 1), x, y, x, y, OVERALL_ACCURACY, Hyper(epochs=6, learning_rate=0.05),
                  np.random.default_rng(2))
    values = [r["criterion"] for r in model.log]
    chosen = [r["epoch"] for r in model.log if r["selected"]]
    assert len(chosen) == 1
    best = max(values)
    assert chosen[0] == max(i + 1 for i, v in enumerate(values) if v == best)  # latest tie wins
    assert evaluate_accuracy(model, x, y, OVERALL_ACCURACY) == best


def test_earliest_tie_break():
    x, y = toy_set(100, 5)
    model = train(init_model(SMALL, 1), x, y, x, y, OVERALL_ACCURACY,
                  Hyper(epochs=6, learning_rate=0.05, tie_break="earliest"), np.random.default_rng(2))
    values = [r["criterion"] for r in model.log]
    assert model.meta["selected_epoch"] == values.index(max(values)) + 1


def test_nodule_accuracy_on_nodules_only_equals_accuracy():
    x, y = toy_set(80, 6)
    pos = y == 1
    model = init_model(SMALL, 2)
    assert evaluate_accuracy(model, x[pos], y[pos], NODULE_ACCURACY) == \
        evaluate_accuracy(model, x[pos], y[pos], OVERALL_ACCURACY)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_epoch_and_batch():
    x, y = toy_set(40, 7)
    x[-1, 0, 0, 0] = np.inf
    with pytest.raises(TrainingError, match=r"epoch 1, batch \d+"):
        train(init_model(SMALL, 0), x, y, x[:5], y[:5], OVERALL_ACCURACY, Hyper(epochs=2, batch_size=64),
              np.random.default_rng(0))


# accuracy -------------------------------------------------------------------

def test_accuracy_cases():
    y = np.array([0, 1, 1, 0])
    assert accuracy_from_probs(np.array([0.1, 0.9, 0.7, 0.2]), y, OVERALL_ACCURACY) == 1.0
    assert accuracy_from_probs(np.full(4, 0.5 - 1e-9), y, OVERALL_ACCURACY) == 0.5
    with pytest.raises(ValueError):
        accuracy_from_probs(np.array([0.3]), np.array([0]), NODULE_ACCURACY)


def test_accuracy_matches_confusion_count():
    rng = np.random.default_rng(12)
    p, y = rng.random(37), rng.integers(0, 2, 37)
    tp = tn = fn = fp = 0
    for pi, yi in zip(p, y):
        if yi == 1:
            tp, fn = (tp + 1, fn) if pi >= 0.5 else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pi >= 0.5 else (fp, tn + 1)
    assert accuracy_from_probs(p, y, OVERALL_ACCURACY) == (tp + tn) / 37
    assert accuracy_from_probs(p, y, NODULE_ACCURACY) == tp / (tp + fn)


# persistence ----------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    model = init_model(SMALL, 9)
    model.meta["note"] = "x"
    save_model(model, tmp_path / "m.cfpr")
    back = load_model(tmp_path / "m.cfpr")
    x = np.random.default_rng(3).random((100, 8, 8, 1))
    np.testing.assert_array_equal(predict_proba(back, x), predict_proba(model, x))
    assert back.meta == model.meta and back.arch == model.arch


def test_corrupt_magic_and_version():
    data = bytearray(model_to_bytes(init_model(SMALL, 0)))
    with pytest.raises(ModelFormatError, match="magic"):
        model_from_bytes(b"XXXX" + bytes(data[4:]))
    data[4] = 9
    with pytest.raises(ModelFormatError, match="version"):
        model_from_bytes(bytes(data))


def test_truncated_file_rejected():
    data = model_to_bytes(init_model(SMALL, 0))
    with pytest.raises(ModelFormatError, match="size"):
        model_from_bytes(data[:-8])


def test_size_accounting():
    model = init_model(SMALL, 0)
    data = model_to_bytes(model)
    _, desc_len = struct.unpack_from("<HI", data, 4)
    (count,) = struct.unpack_from("<Q", data, 10 + desc_len)
    assert count == SMALL.parameter_count()
    assert len(data) == 4 + 2 + 4 + desc_len + 8 + 8 * count
