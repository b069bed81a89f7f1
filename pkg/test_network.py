"""
Tests for network specs, parameter accounting, the forward pass and HSM1 checkpoints.
"""

import numpy as np
import pytest

from hivesig.checkpoint import decode_model, encode_model, load_model, save_model
from hivesig.compress import prune_layers, prune_neurons, quantize_head
from hivesig.config import NetworkConfig
from hivesig.errors import (
    ChecksumMismatch,
    IoFailure,
    ShapeIncompatible,
    ShapeMismatch,
    UnknownLayer,
    VersionMismatch,
)
from hivesig.network import (
    LayerSpec,
    Model,
    NetworkSpec,
    build_head,
    build_spec,
    build_student,
    build_teacher,
    count_params,
)


def test_head_parameter_breakdown():
    head = build_head(64, 0.5, 4)
    assert count_params(head, (256, 4, 4)) == 262_604
    fc1 = 4096 * 64 + 64
    assert fc1 == 262_208
    assert fc1 + 2 * 64 + (64 * 4 + 4) + 2 * 4 == 262_604


def test_builder_parameter_counts():
    assert build_teacher().count_params() == 1_435_820
    assert build_student().count_params() == 658_060
    assert build_teacher(preset="large").count_params() == 5_650_444


def test_compact_head_is_smaller():
    compact = build_teacher(NetworkConfig(compact_head=True))
    assert compact.layer("fc1").units == 36
    assert compact.count_params() < build_teacher().count_params()


def test_teacher_shapes():
    spec = build_teacher()
    shapes = spec.infer_shapes()
    assert shapes[-1] == (4,)
    assert spec.input_shapes()["flatten"] == (256, 4, 4)
    assert spec.input_shapes()["fc1"] == (4096,)


def test_grayscale_and_class_count_variants():
    spec = build_spec("student", channels=1, n_classes=2)
    assert spec.input_shape == (1, 64, 64)
    assert spec.infer_shapes()[-1] == (2,)


def test_spec_must_end_in_class_layer():
    layers = [LayerSpec(kind="flatten", name="flatten"), LayerSpec(kind="dense", name="fc", units=3)]
    with pytest.raises(ShapeIncompatible):
        NetworkSpec(input_shape=(1, 4, 4), layers=layers, n_classes=4).infer_shapes()


def test_spec_lookups():
    spec = build_student()
    assert spec.index("conv1") == 0
    with pytest.raises(UnknownLayer):
        spec.layer("conv99")
    with pytest.raises(UnknownLayer):
        build_spec("resnet")


def test_initialize_is_seeded(tiny_spec):
    a = Model.initialize(tiny_spec, 3)
    b = Model.initialize(tiny_spec, 3)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
        assert a.params[name].dtype == np.float32
    np.testing.assert_array_equal(a.params["conv1.bn.gamma"], 1.0)
    np.testing.assert_array_equal(a.running["conv1.bn.var"], 1.0)


def test_forward_and_predict(tiny_spec, toy_dataset):
    model = Model.initialize(tiny_spec, 0)
    logits = model.predict_logits(toy_dataset.x[:5])
    assert logits.shape == (5, 4)
    probs = model.predict_proba(toy_dataset.x[:5])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert model.predict(toy_dataset.x[:5]).shape == (5,)


def test_forward_records_shapes_and_stops_early(tiny_spec, toy_dataset):
    model = Model.initialize(tiny_spec, 0)
    shapes = []
    model.forward(toy_dataset.x[:2], shapes=shapes)
    assert dict(shapes)["pool2"] == (4, 4, 4)
    assert model.predict_logits(toy_dataset.x[:2], until="flatten").shape == (2, 64)


def test_forward_rejects_wrong_input(tiny_spec):
    model = Model.initialize(tiny_spec, 0)
    with pytest.raises(ShapeMismatch):
        model.forward(np.zeros((1, 1, 64, 64), dtype=np.float32))


def test_model_validates_parameter_shapes(tiny_spec):
    model = Model.initialize(tiny_spec, 0)
    params = dict(model.params)
    params["fc1.weight"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ShapeIncompatible):
        Model(tiny_spec, params, model.running)


def test_checkpoint_round_trip_is_stable(tmp_path, tiny_spec, toy_dataset):
    model = Model.initialize(tiny_spec, 1)
    model.meta = {"class_names": toy_dataset.class_names, "features": {"representation": "mel"}}
    path = tmp_path / "m.hsm"
    save_model(model, path)
    back = load_model(path)
    assert encode_model(back) == path.read_bytes()
    assert back.meta == model.meta
    np.testing.assert_array_equal(back.predict_logits(toy_dataset.x[:3]), model.predict_logits(toy_dataset.x[:3]))


def test_checkpoint_keeps_pruned_architecture(tmp_path, tiny_spec, toy_dataset):
    narrowed, _ = prune_neurons(Model.initialize(tiny_spec, 1), 0.5, seed=0)
    pruned, _ = prune_layers(narrowed, ["conv2"])
    assert pruned.count_params() < Model.initialize(tiny_spec, 1).count_params()
    path = tmp_path / "pruned.hsm"
    save_model(pruned, path)
    back = load_model(path)
    assert back.spec.model_dump() == pruned.spec.model_dump()
    assert back.count_params() == pruned.count_params()
    assert back.spec.layer("conv1").out_channels == 2
    assert back.spec.layer("fc1").units == 4
    np.testing.assert_array_equal(back.predict_logits(toy_dataset.x[:5]), pruned.predict_logits(toy_dataset.x[:5]))


def test_checkpoint_keeps_quantized_head(tiny_spec, toy_dataset):
    model = quantize_head(Model.initialize(tiny_spec, 1), toy_dataset.x[:8])
    back = decode_model(encode_model(model))
    assert sorted(back.quantized) == sorted(model.quantized)
    for name, (q, qp) in model.quantized.items():
        np.testing.assert_array_equal(back.quantized[name][0], q)
        assert back.quantized[name][1] == qp


def test_checkpoint_corruption_is_detected(tiny_spec):
    blob = bytearray(encode_model(Model.initialize(tiny_spec, 0)))
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_model(bytes(flipped))
    with pytest.raises(VersionMismatch):
        decode_model(b"NOPE" + bytes(blob[4:]))
    bumped = bytearray(blob)
    bumped[4] = 2
    with pytest.raises(VersionMismatch):
        decode_model(bytes(bumped))


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(IoFailure):
        load_model(tmp_path / "missing.hsm")
