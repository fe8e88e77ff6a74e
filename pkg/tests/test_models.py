"""Model construction, feature/head split, adapter, checkpoints, counters."""

import numpy as np
import pytest

import rrmkit.tensor as T
from rrmkit.errors import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    DimensionError,
)
from rrmkit.models import (
    AffineSpec,
    ArchDescriptor,
    FlattenSpec,
    ReluSpec,
    TemperatureScaled,
    attach_adapter,
    build_model,
    cnn2_descriptor,
    load_checkpoint,
    mlp_descriptor,
    save_checkpoint,
)
from rrmkit.tensor import Tensor


def count_params(model):
    return sum(t.data.size for t in model.params.values())


# ---------------------------------------------------------------------------
# construction


def test_build_model_deterministic():
    desc = mlp_descriptor(3, (8,), 2)
    a = build_model(desc, np.random.default_rng(5))
    b = build_model(desc, np.random.default_rng(5))
    assert a.param_hash() == b.param_hash()


def test_mlp_parameter_count_354():
    model = build_model(mlp_descriptor(2, (16, 16), 2), np.random.default_rng(0))
    assert count_params(model) == 354  # 2*16+16 + 16*16+16 + 16*2+2


def test_inconsistent_descriptor_rejected():
    desc = ArchDescriptor(
        input_shape=(4,),
        layers=(AffineSpec(4, 8), ReluSpec(), AffineSpec(9, 8)),
        penultimate_dim=8,
        num_classes=2,
    )
    with pytest.raises(ConfigurationError):
        build_model(desc, np.random.default_rng(0))


def test_wrong_penultimate_dim_rejected():
    desc = ArchDescriptor(
        input_shape=(4,),
        layers=(AffineSpec(4, 8),),
        penultimate_dim=9,
        num_classes=2,
    )
    with pytest.raises(ConfigurationError):
        build_model(desc, np.random.default_rng(0))


def test_biases_start_at_zero_weights_bounded():
    model = build_model(mlp_descriptor(4, (8,), 2), np.random.default_rng(1))
    assert not np.any(model.params["layer0.b"].data)
    limit = np.sqrt(6.0 / 4)
    assert np.all(np.abs(model.params["layer0.W"].data) <= limit)


# ---------------------------------------------------------------------------
# features / logits


def test_features_head_composition(tiny_mlp, rng):
    x = rng.normal(size=(5, 3))
    feats, logits = tiny_mlp.forward(x)
    manual = feats.data @ tiny_mlp.params["head.W"].data + tiny_mlp.params["head.b"].data
    np.testing.assert_array_equal(logits.data, manual)
    assert feats.shape == (5, tiny_mlp.descriptor.penultimate_dim)
    assert logits.shape == (5, 2)


def test_linear_extractor_features_equal_matmul(rng):
    desc = ArchDescriptor(
        input_shape=(4,), layers=(AffineSpec(4, 3),), penultimate_dim=3, num_classes=2
    )
    model = build_model(desc, np.random.default_rng(3))
    x = rng.normal(size=(6, 4))
    expected = x @ model.params["layer0.W"].data + model.params["layer0.b"].data
    np.testing.assert_allclose(model.features(x).data, expected, atol=1e-12)


def test_zero_head_weights_give_constant_logits(tiny_mlp, rng):
    tiny_mlp.params["head.W"].data[:] = 0.0
    tiny_mlp.params["head.b"].data[:] = 0.0
    logits = tiny_mlp.logits(rng.normal(size=(4, 3))).data
    assert not np.any(logits)


def test_input_shape_mismatch(tiny_mlp):
    with pytest.raises(DimensionError):
        tiny_mlp.logits(np.zeros((2, 5)))


def test_cnn_descriptor_runs(rng):
    desc = cnn2_descriptor(input_shape=(1, 8, 8), channels=(2, 4), penultimate_dim=16, num_classes=3)
    model = build_model(desc, np.random.default_rng(0))
    logits = model.logits(rng.normal(size=(2, 1, 8, 8)))
    assert logits.shape == (2, 3)


# ---------------------------------------------------------------------------
# adapter


def _wide_model(width):
    desc = mlp_descriptor(4, (width,), 2)
    return build_model(desc, np.random.default_rng(2))


def test_adapter_2048_to_512():
    adapted = attach_adapter(_wide_model(2048), 512, np.random.default_rng(0))
    assert adapted.descriptor.feature_dim == 512
    x = np.random.default_rng(1).normal(size=(2, 4))
    assert adapted.features(x).shape == (2, 512)
    assert adapted.logits(x).shape == (2, 2)


def test_adapter_4096_to_2048():
    adapted = attach_adapter(_wide_model(4096), 2048, np.random.default_rng(0))
    assert adapted.descriptor.feature_dim == 2048


def test_adapter_equal_width_rejected():
    with pytest.raises(ConfigurationError):
        attach_adapter(_wide_model(512), 512, np.random.default_rng(0))


def test_double_adapter_rejected():
    adapted = attach_adapter(_wide_model(64), 16, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        attach_adapter(adapted, 8, np.random.default_rng(0))


def test_adapter_preserves_original_parameters():
    base = _wide_model(64)
    adapted = attach_adapter(base, 16, np.random.default_rng(0))
    np.testing.assert_array_equal(adapted.params["layer0.W"].data, base.params["layer0.W"].data)


# ---------------------------------------------------------------------------
# phases and counters


def test_forward_counts_once_per_phase(tiny_mlp, rng):
    x = rng.normal(size=(3, 3))
    tiny_mlp.forward(x)  # default phase: train
    with tiny_mlp.phase("attack"):
        tiny_mlp.features(x)
        tiny_mlp.logits(x)
    with tiny_mlp.phase("eval"):
        tiny_mlp.logits(x)
    assert tiny_mlp.counters["train"].forwards == 1
    assert tiny_mlp.counters["attack"].forwards == 2
    assert tiny_mlp.counters["eval"].forwards == 1
    assert tiny_mlp.total_counts().forwards == 4
    assert tiny_mlp.total_counts().backwards == 0


def test_backward_counts(tiny_mlp, tiny_batch):
    x, y = tiny_batch
    loss = T.softmax_cross_entropy(tiny_mlp.logits(x), y)
    tiny_mlp.backward(loss)
    assert tiny_mlp.counters["train"].backwards == 1


def test_phase_restores_previous(tiny_mlp):
    with tiny_mlp.phase("eval"):
        with tiny_mlp.phase("attack"):
            assert tiny_mlp._phase == "attack"
        assert tiny_mlp._phase == "eval"
    assert tiny_mlp._phase == "train"


# ---------------------------------------------------------------------------
# temperature-scaled view


def test_temperature_scaled_divides_logits(tiny_mlp, rng):
    x = rng.normal(size=(2, 3))
    base_logits = tiny_mlp.logits(x).data
    scaled = TemperatureScaled(tiny_mlp, 30.0)
    np.testing.assert_allclose(scaled.logits(x).data, base_logits / 30.0, atol=1e-12)
    # counters are shared with the base model
    assert tiny_mlp.counters["train"].forwards == 2


def test_temperature_scaled_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        TemperatureScaled(_wide_model(4), 0.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_byte_identical(tmp_path, tiny_mlp):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(tiny_mlp, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.param_hash() == tiny_mlp.param_hash()
    assert loaded.seed == tiny_mlp.seed
    assert loaded.method_tag == tiny_mlp.method_tag


def test_checkpoint_logits_bit_exact(tmp_path, tiny_mlp, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_mlp, path)
    loaded = load_checkpoint(path)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(loaded.logits(x).data, tiny_mlp.logits(x).data)


def test_checkpoint_truncation_detected(tmp_path, tiny_mlp):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_mlp, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(raw[:4])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_trailing_garbage_detected(tmp_path, tiny_mlp):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_mlp, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, tiny_mlp):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_mlp, path)
    raw = path.read_bytes()
    # corrupt the magic
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_with_adapter_round_trips(tmp_path):
    adapted = attach_adapter(_wide_model(64), 16, np.random.default_rng(0))
    path = tmp_path / "a.ckpt"
    save_checkpoint(adapted, path)
    loaded = load_checkpoint(path)
    assert loaded.descriptor.adapter_dim == 16
    assert loaded.param_hash() == adapted.param_hash()


# ---------------------------------------------------------------------------
# descriptor serialization


def test_descriptor_dict_round_trip():
    desc = cnn2_descriptor(input_shape=(1, 8, 8), channels=(2, 4), penultimate_dim=16, num_classes=3)
    assert ArchDescriptor.from_dict(desc.to_dict()) == desc
    mdesc = mlp_descriptor(5, (7, 9), 4)
    assert ArchDescriptor.from_dict(mdesc.to_dict()) == mdesc


def test_param_hash_tracks_changes(tiny_mlp):
    before = tiny_mlp.param_hash()
    tiny_mlp.params["head.b"].data[0] += 1e-9
    assert tiny_mlp.param_hash() != before
