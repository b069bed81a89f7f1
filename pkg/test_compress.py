"""
Tests for size accounting, pruning, distillation and head quantization.
"""

import numpy as np
import pytest

from hivesig.compress import (
    distill,
    distillation_loss,
    head_param_names,
    prune_layers,
    prune_neurons,
    quantize_head,
    quantized_size_estimate,
    size_report,
    softmax_with_temperature,
    tensor_size_report,
    total_loss,
)
from hivesig.autograd import cross_entropy, one_hot, softmax
from hivesig.config import DistillConfig, NetworkConfig, TrainingConfig
from hivesig.errors import (
    EmptyCalibration,
    InputError,
    InvalidFraction,
    InvalidTemperature,
    ShapeIncompatible,
    UnknownLayer,
)
from hivesig.network import LayerSpec, Model, NetworkSpec, build_head, build_student, build_teacher
from hivesig.quantization import QuantParams, calibrate, dequantize, quantize
from hivesig.training import train

FAST = TrainingConfig(max_epochs=2, batch_size=8, lr0=1e-3, seed=5)
PRUNED_WIDTHS = [28, 28, 56, 56, 112, 112, 224, 224]


@pytest.fixture(scope="module")
def teacher_model():
    return Model.initialize(build_teacher(), 0)


@pytest.fixture(scope="module")
def pruned_teacher(teacher_model):
    pruned, _ = prune_neurons(teacher_model, 0.125, seed=0)
    return pruned


def test_head_size_in_bytes(teacher_model):
    head = {n: teacher_model.params[n] for n in head_param_names(teacher_model)}
    rep = tensor_size_report(head)
    assert rep.params == 262_604
    assert rep.bytes == 1_050_416


def test_quantized_size_estimate():
    assert round(quantized_size_estimate(2.5, 1.002), 2) == 1.75
    assert quantized_size_estimate(2.0, 0.0) == 2.0


def test_student_size_before_and_after_quantization():
    student = Model.initialize(build_student(), 0)
    before = size_report(student)
    assert before.params == 658_060
    assert before.bytes == 2_632_240
    assert before.buffer_bytes > 0

    quantized = quantize_head(student, np.zeros((2, 3, 64, 64), dtype=np.float32))
    after = size_report(quantized)
    assert after.params == 658_060
    assert after.bytes == 395_456 * 4 + 262_604 + 8 * 16
    assert after.bytes == 1_844_556


def test_neuron_pruning_matches_narrower_teacher(teacher_model, pruned_teacher):
    narrower = build_teacher(NetworkConfig(teacher_widths=PRUNED_WIDTHS, head_hidden=56))
    assert narrower.count_params() == 1_099_656
    assert pruned_teacher.count_params() == 1_099_656
    assert [pruned_teacher.spec.layer(f"conv{i}").out_channels for i in range(1, 9)] == PRUNED_WIDTHS
    assert pruned_teacher.spec.layer("fc1").units == 56
    assert pruned_teacher.spec.layer("fc2").units == 4
    x = np.zeros((1, 3, 64, 64), dtype=np.float32)
    assert pruned_teacher.predict_logits(x).shape == (1, 4)


def test_neuron_pruning_report(teacher_model):
    _, report = prune_neurons(teacher_model, 0.125, seed=0, layers=["conv1"])
    assert report.removed_units == {"conv1": 4}
    assert report.params_before == 1_435_820
    assert report.params_after < report.params_before
    assert report.size_after == report.params_after * 4


@pytest.mark.parametrize("fraction", [-0.1, 1.0, 1.5])
def test_invalid_prune_fraction(tiny_spec, fraction):
    with pytest.raises(InvalidFraction):
        prune_neurons(Model.initialize(tiny_spec, 0), fraction)


def test_zero_fraction_keeps_everything(tiny_spec):
    model = Model.initialize(tiny_spec, 0)
    pruned, report = prune_neurons(model, 0.0)
    assert report.removed_units == {}
    for name in model.params:
        np.testing.assert_array_equal(pruned.params[name], model.params[name])


def test_magnitude_pruning_keeps_strongest_filters(tiny_spec, toy_dataset):
    model = Model.initialize(tiny_spec, 0)
    w = model.params["conv1.weight"]
    w[1] *= 100.0
    w[3] *= 100.0
    pruned, _ = prune_neurons(model, 0.5, strategy="magnitude", layers=["conv1"])
    np.testing.assert_array_equal(pruned.params["conv1.weight"], w[[1, 3]])
    np.testing.assert_array_equal(pruned.params["conv2.weight"], model.params["conv2.weight"][:, [1, 3]])
    assert pruned.predict(toy_dataset.x[:4]).shape == (4,)


def test_neuron_pruning_rejects_class_layer(tiny_spec):
    with pytest.raises(ShapeIncompatible):
        prune_neurons(Model.initialize(tiny_spec, 0), 0.5, layers=["fc2"])


def test_layer_pruning_counts(teacher_model, pruned_teacher):
    out, report = prune_layers(pruned_teacher, ["conv2", "conv4", "conv6"])
    assert report.layer_deltas == {"conv2": 7_084, "conv4": 28_280, "conv6": 113_008}
    assert out.count_params() == 951_284
    assert out.predict_logits(np.zeros((1, 3, 64, 64), dtype=np.float32)).shape == (1, 4)

    full, _ = prune_layers(teacher_model, ["conv2", "conv4", "conv6"])
    assert full.count_params() == 1_435_820 - 9_248 - 36_928 - 147_584


def identity_conv_model(seed=0):
    """conv1 -> relu -> pool, then an identity conv2 (+ identity batchnorm) and the head."""
    layers = [
        LayerSpec(kind="conv", name="conv1", out_channels=4, has_bn=True),
        LayerSpec(kind="relu", name="relu1"),
        LayerSpec(kind="maxpool", name="pool1", pool=4),
        LayerSpec(kind="conv", name="conv2", out_channels=4, has_bn=True),
        LayerSpec(kind="relu", name="relu2"),
        LayerSpec(kind="maxpool", name="pool2", pool=4),
    ] + build_head(8, 0.5, 4)
    model = Model.initialize(NetworkSpec(input_shape=(3, 64, 64), layers=layers, n_classes=4), seed)
    kernel = np.zeros((4, 4, 3, 3), dtype=np.float32)
    kernel[np.arange(4), np.arange(4), 1, 1] = 1.0
    model.params["conv2.weight"] = kernel
    model.params["conv2.bias"] = np.zeros(4, dtype=np.float32)
    model.params["conv2.bn.gamma"] = np.ones(4, dtype=np.float32)
    model.params["conv2.bn.beta"] = np.zeros(4, dtype=np.float32)
    model.running["conv2.bn.mean"] = np.zeros(4, dtype=np.float32)
    # var + eps == 1
    model.running["conv2.bn.var"] = np.full(4, 1.0 - 1e-5, dtype=np.float32)
    return model


def test_removing_identity_layer_keeps_logits(toy_dataset):
    model = identity_conv_model()
    pruned, report = prune_layers(model, ["conv2"])
    assert report.removed_layers == ["conv2"]
    assert [ly.name for ly in pruned.spec.layers[:4]] == ["conv1", "relu1", "pool1", "pool2"]
    np.testing.assert_allclose(
        pruned.predict_logits(toy_dataset.x), model.predict_logits(toy_dataset.x), rtol=1e-5, atol=1e-5
    )


def test_layer_pruning_width_change_names_layer(teacher_model):
    with pytest.raises(ShapeIncompatible) as info:
        prune_layers(teacher_model, ["conv3"])
    assert info.value.layer == "conv3"


def test_layer_pruning_rejects_non_conv_and_unknown(teacher_model):
    with pytest.raises(ShapeIncompatible):
        prune_layers(teacher_model, ["relu1"])
    with pytest.raises(UnknownLayer):
        prune_layers(teacher_model, ["conv42"])


def test_temperature_keeps_argmax():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        logits = rng.normal(size=int(rng.integers(2, 8))) * 5
        t = float(rng.uniform(0.1, 20.0))
        probs = softmax_with_temperature(logits, t)
        assert np.argmax(probs) == np.argmax(logits)
        assert probs.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_invalid_temperature(temperature):
    with pytest.raises(InvalidTemperature):
        softmax_with_temperature(np.zeros(3), temperature)


def test_distillation_loss_of_uniform_student():
    teacher = np.array([[0.9, 0.1]])
    assert distillation_loss(np.array([[0.5, 0.5]]), teacher) == pytest.approx(np.log(2.0))


def test_total_loss_weights():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    teacher = softmax(rng.normal(size=(6, 4)))
    gt = cross_entropy(softmax(logits), one_hot(labels, 4))
    soft = distillation_loss(softmax_with_temperature(logits, 3.0), teacher)
    assert total_loss(logits, labels, teacher, 0.0, 1.0, 3.0) == gt
    assert total_loss(logits, labels, teacher, 1.0, 0.0, 3.0) == soft
    assert total_loss(logits, labels, teacher, 0.7, 0.3, 3.0) == pytest.approx(0.7 * soft + 0.3 * gt)


def test_distill_without_soft_targets_equals_training(tiny_spec, tiny_spec_factory, toy_dataset):
    teacher, _ = train(tiny_spec, toy_dataset, FAST)
    student_spec = tiny_spec_factory(width1=2, width2=2, hidden=4)
    cfg = DistillConfig(alpha=0.0, beta=1.0, epochs=2, training=FAST)
    distilled, history = distill(teacher, student_spec, toy_dataset, cfg)
    trained, _ = train(student_spec, toy_dataset, FAST, epochs=2)
    for name in trained.params:
        np.testing.assert_array_equal(distilled.params[name], trained.params[name])
    assert {"distill_loss", "gt_loss"} <= set(history[0])


def test_distill_produces_smaller_student(tiny_spec, tiny_spec_factory, toy_dataset):
    teacher = Model.initialize(tiny_spec, 0)
    teacher.meta = {"class_names": toy_dataset.class_names}
    student_spec = tiny_spec_factory(width1=2, width2=2, hidden=4)
    student, history = distill(teacher, student_spec, toy_dataset, DistillConfig(epochs=1, training=FAST))
    assert student.count_params() < teacher.count_params()
    assert student.meta["class_names"] == toy_dataset.class_names
    assert len(history) == 1


def test_quantize_head_leaves_body_untouched(tiny_spec, toy_dataset):
    model, _ = train(tiny_spec, toy_dataset, FAST)
    quantized = quantize_head(model, toy_dataset.x[:8])
    head = set(head_param_names(model))
    assert set(quantized.quantized) == head
    for name, values in model.params.items():
        if name not in head:
            assert quantized.params[name].tobytes() == values.tobytes()
    info = quantized.meta["quantization"]
    assert info["calibration_samples"] == 8
    assert 0.0 <= info["agreement"] <= 1.0
    for name in head:
        q, qp = quantized.quantized[name]
        assert q.dtype == np.int8
        err = np.abs(dequantize(q, qp) - model.params[name])
        assert err.max() <= qp.scale / 2 + 1e-6


def test_quantized_head_keeps_accuracy(tiny_spec, toy_dataset_factory):
    data = toy_dataset_factory(per_class=32)
    model, _ = train(tiny_spec, data, FAST.model_copy(update={"max_epochs": 12, "lr0": 1e-2}))
    quantized = quantize_head(model, data.x)
    float_acc = float(np.mean(model.predict(data.x) == data.y))
    int8_acc = float(np.mean(quantized.predict(data.x) == data.y))
    assert abs(int8_acc - float_acc) <= 0.015
    assert quantized.meta["quantization"]["agreement"] >= 0.985


def test_quantize_head_needs_calibration(tiny_spec):
    with pytest.raises(EmptyCalibration):
        quantize_head(Model.initialize(tiny_spec, 0), np.zeros((0, 3, 64, 64)))


def test_quantized_model_cannot_be_pruned(tiny_spec, toy_dataset):
    quantized = quantize_head(Model.initialize(tiny_spec, 0), toy_dataset.x[:4])
    with pytest.raises(InputError):
        prune_neurons(quantized, 0.5)
    with pytest.raises(InputError):
        prune_layers(quantized, ["conv2"])


def test_quantization_error_is_bounded():
    rng = np.random.default_rng(0)
    ranges = [(-128, 127), (0, 255), (-8, 7)]
    for i in range(100):
        q_min, q_max = ranges[i % len(ranges)]
        qp = calibrate(rng.normal(loc=rng.uniform(-2, 2), scale=rng.uniform(0.01, 5), size=50), q_min, q_max)
        values = rng.uniform(qp.x_min, qp.x_max, size=1000)
        q = quantize(values, qp)
        assert q.min() >= q_min and q.max() <= q_max
        err = np.abs(dequantize(q, qp) - values)
        assert err.max() <= qp.scale / 2 * (1 + 1e-9) + 1e-12

        outside = np.array([qp.x_max + 10 * qp.scale, qp.x_min - 10 * qp.scale])
        assert quantize(outside, qp).tolist() == [q_max, q_min]


def test_degenerate_calibration():
    qp = calibrate(np.zeros(10))
    assert qp.scale == 1.0
    assert qp.zero_point == qp.q_min
    with pytest.raises(EmptyCalibration):
        calibrate([])
    with pytest.raises(InputError):
        QuantParams(scale=0.0, zero_point=0)
