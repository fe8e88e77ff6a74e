"""Robust dataset generation: representation matching by gradient descent."""

import numpy as np
import pytest

from rrmkit.data import Dataset
from rrmkit.errors import ConfigurationError, ContractError
from rrmkit.models import AffineSpec, ArchDescriptor, build_model, mlp_descriptor
from rrmkit.robustify import RobustifyConfig, robustify_dataset, robustify_image


def _linear_teacher(dim=6, feat=3, seed=0):
    desc = ArchDescriptor(
        input_shape=(dim,), layers=(AffineSpec(dim, feat),),
        penultimate_dim=feat, num_classes=2,
    )
    model = build_model(desc, np.random.default_rng(seed))
    model.frozen = True
    return model


class TestRobustifyConfig:
    def test_defaults(self):
        cfg = RobustifyConfig()
        assert cfg.steps == 1000
        assert cfg.step_size == 0.1

    @pytest.mark.parametrize("kwargs", [dict(steps=0), dict(step_size=0.0), dict(step_size=-1.0)])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            RobustifyConfig(**kwargs)


class TestRobustifyImage:
    def test_fixed_point_returns_init_unchanged(self, rng):
        teacher = _linear_teacher()
        x = rng.normal(size=6)
        out, initial, final = robustify_image(teacher, x, x.copy(), RobustifyConfig(steps=50))
        np.testing.assert_array_equal(out, x)
        assert initial < 1e-10
        assert final < 1e-10

    def test_linear_teacher_objective_decreases(self, rng):
        teacher = _linear_teacher()
        for _ in range(5):
            x = rng.normal(size=6)
            init = rng.normal(size=6)
            _, initial, final = robustify_image(
                teacher, x, init, RobustifyConfig(steps=200, step_size=0.05)
            )
            assert final < initial

    def test_linear_teacher_converges_without_normalization(self, rng):
        teacher = _linear_teacher()
        x = rng.normal(size=6)
        init = rng.normal(size=6)
        # the un-squared distance has a step-size-limited floor, so use a
        # small step and enough iterations to get well below the start
        out, initial, final = robustify_image(
            teacher, x, init,
            RobustifyConfig(steps=2000, step_size=0.01, normalize_gradient=False),
        )
        assert final < 0.05 * initial
        # representations match even though the inputs need not
        import rrmkit.tensor as T
        from rrmkit.tensor import Tensor

        with T.no_grad():
            fx = teacher.features(x[None]).data
            fr = teacher.features(out[None]).data
        np.testing.assert_allclose(fr, fx, atol=0.2)

    def test_unfrozen_teacher_rejected(self, rng):
        teacher = _linear_teacher()
        teacher.frozen = False
        with pytest.raises(ContractError):
            robustify_image(teacher, rng.normal(size=6), rng.normal(size=6), RobustifyConfig(steps=5))

    def test_shape_mismatch_rejected(self, rng):
        teacher = _linear_teacher()
        with pytest.raises(ConfigurationError):
            robustify_image(teacher, rng.normal(size=6), rng.normal(size=5), RobustifyConfig(steps=5))

    def test_clamp_box_respected(self, rng):
        teacher = _linear_teacher()
        x = rng.normal(size=6)
        init = rng.normal(size=6)
        out, _, _ = robustify_image(
            teacher, x, init, RobustifyConfig(steps=50, step_size=0.5, clamp_box=(-0.5, 0.5))
        )
        assert np.all(out >= -0.5) and np.all(out <= 0.5)

    def test_batch_input_shapes(self, rng):
        teacher = _linear_teacher()
        x = rng.normal(size=(4, 6))
        init = rng.normal(size=(4, 6))
        out, _, _ = robustify_image(teacher, x, init, RobustifyConfig(steps=20))
        assert out.shape == (4, 6)

    def test_mlp_teacher_supported(self, rng):
        teacher = build_model(mlp_descriptor(6, (8,), 2), np.random.default_rng(1))
        teacher.frozen = True
        x = rng.normal(size=6)
        init = rng.normal(size=6)
        _, initial, final = robustify_image(teacher, x, init, RobustifyConfig(steps=100))
        assert final <= initial


class TestRobustifyDataset:
    def _dataset(self, rng, n=8):
        return Dataset(inputs=rng.normal(size=(n, 6)), labels=rng.integers(0, 2, size=n))

    def test_size_and_labels_preserved(self, rng):
        teacher = _linear_teacher()
        ds = self._dataset(rng)
        out = robustify_dataset(teacher, ds, RobustifyConfig(steps=20), np.random.default_rng(3))
        assert len(out) == len(ds)
        np.testing.assert_array_equal(out.labels, ds.labels)

    def test_deterministic_under_seed(self, rng):
        teacher = _linear_teacher()
        ds = self._dataset(rng)
        cfg = RobustifyConfig(steps=20)
        a = robustify_dataset(teacher, ds, cfg, np.random.default_rng(3))
        b = robustify_dataset(teacher, ds, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_metadata_records_objectives(self, rng):
        teacher = _linear_teacher()
        ds = self._dataset(rng)
        out = robustify_dataset(teacher, ds, RobustifyConfig(steps=20), np.random.default_rng(3))
        info = out.metadata["robustified"]
        assert info["steps"] == 20
        assert info["mean_final_objective"] <= info["mean_initial_objective"]

    def test_empty_dataset_rejected(self):
        teacher = _linear_teacher()
        empty = Dataset(inputs=np.zeros((0, 6)), labels=np.zeros(0, dtype=int))
        with pytest.raises(ConfigurationError):
            robustify_dataset(teacher, empty, RobustifyConfig(steps=5), np.random.default_rng(0))
