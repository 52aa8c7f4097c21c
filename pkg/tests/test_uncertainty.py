from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from edgereg.data import Volume3D
from edgereg.errors import ArgumentError
from edgereg.nonrigid_net import NonRigidModelConfig, NonRigidRegNet
from edgereg.rigid_net import RigidModelConfig, RigidRegNet
from edgereg.uncertainty import (
    DEFAULT_PASSES,
    UncertaintyResult,
    mc_predict,
    population_stats,
    render_uncertainty,
)


def _active_nonrigid(p: float, seed: int = 0) -> NonRigidRegNet:
    """A small non-rigid model whose output actually depends on the dropout masks."""
    torch.manual_seed(seed)
    model = NonRigidRegNet(NonRigidModelConfig(variant=3, base_channels=4, levels=2,
                                               dilation_rates=[1, 2], dropout_p=p))
    with torch.no_grad():
        model.flow.weight.normal_(std=0.2)
    return model


def _pair(n=16, seed=0):
    g = np.random.default_rng(seed)
    return Volume3D(g.random((n, n, n))), Volume3D(g.random((n, n, n)))


class TestMonteCarlo:
    def test_default_passes(self):
        assert DEFAULT_PASSES == 10

    def test_zero_dropout_has_zero_variance(self):
        m, f = _pair()
        res = mc_predict(_active_nonrigid(0.0), m, f)
        assert np.all(res.variance_map == 0.0)
        assert res.dropout_p == 0.0

    def test_active_dropout_has_variance(self):
        m, f = _pair()
        res = mc_predict(_active_nonrigid(0.3), m, f)
        assert res.variance_map.max() > 0

    def test_single_pass(self):
        m, f = _pair()
        res = mc_predict(_active_nonrigid(0.3), m, f, passes=1)
        assert res.passes == 1 and np.all(res.variance_map == 0)

    def test_bad_pass_count(self):
        m, f = _pair()
        with pytest.raises(ArgumentError):
            mc_predict(_active_nonrigid(0.3), m, f, passes=0)

    def test_same_seed_byte_identical(self):
        m, f = _pair()
        model = _active_nonrigid(0.3)
        a = mc_predict(model, m, f, passes=4, seed=9)
        b = mc_predict(model, m, f, passes=4, seed=9)
        c = mc_predict(model, m, f, passes=4, seed=10)
        assert a.variance_map.tobytes() == b.variance_map.tobytes()
        assert a.mean_warped.data.tobytes() == b.mean_warped.data.tobytes()
        assert a.variance_map.tobytes() != c.variance_map.tobytes()

    def test_global_rng_untouched(self):
        m, f = _pair()
        model = _active_nonrigid(0.3)
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        mc_predict(model, m, f, passes=2)
        assert torch.equal(torch.rand(3), expected)

    def test_modes_restored(self):
        model = _active_nonrigid(0.3).train()
        m, f = _pair()
        mc_predict(model, m, f, passes=2)
        assert all(mod.training for mod in model.modules())

    def test_rigid_parameter_statistics(self):
        torch.manual_seed(0)
        model = RigidRegNet(RigidModelConfig(variant=1, base_channels=4, dropout_p=0.3))
        with torch.no_grad():
            model.fc2.weight.normal_(std=0.5)
        m, f = _pair()
        res = mc_predict(model, m, f, passes=5)
        assert res.param_mean.shape == (12,) and res.param_variance.shape == (12,)
        assert res.param_variance.max() > 0

    def test_no_dropout_rejected(self):
        model = torch.nn.Conv3d(2, 3, 1)
        with pytest.raises(ArgumentError):
            mc_predict(model, *_pair())

    def test_keep_passes(self):
        m, f = _pair()
        res = mc_predict(_active_nonrigid(0.3), m, f, passes=3, keep_passes=True)
        stack = np.stack(res.per_pass_outputs)
        mean, var = population_stats(stack)
        assert np.array_equal(var, res.variance_map)
        np.testing.assert_allclose(res.mean_warped.data, np.clip(mean, 0, 1), atol=1e-7)

    def test_standard_error_scaling(self):
        """SE = sqrt(var / N) shrinks by sqrt(10) from 10 to 100 passes, within 20%."""
        m, f = _pair()
        model = _active_nonrigid(0.3)
        se = {}
        for n in (10, 100):
            res = mc_predict(model, m, f, passes=n, seed=1)
            se[n] = np.sqrt(res.variance_map.mean() / n)
        ratio = se[10] / se[100]
        assert abs(ratio / np.sqrt(10) - 1.0) <= 0.2


class TestPopulationStats:
    @given(st.integers(0, 10_000), st.integers(2, 12))
    def test_order_invariant(self, seed, n):
        g = np.random.default_rng(seed)
        samples = g.normal(size=(n, 4, 3))
        perm = g.permutation(n)
        a = population_stats(samples)
        b = population_stats(samples[perm])
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_divide_by_n(self):
        mean, var = population_stats(np.array([[1.0], [3.0]]))
        assert mean[0] == 2.0 and var[0] == 1.0

    @given(st.integers(0, 10_000))
    def test_matches_numpy(self, seed):
        samples = np.random.default_rng(seed).normal(size=(7, 5))
        mean, var = population_stats(samples)
        np.testing.assert_allclose(mean, samples.mean(axis=0), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(var, samples.var(axis=0), rtol=1e-10, atol=1e-15)


class TestRender:
    def _result(self, var):
        mean = Volume3D(np.full(var.shape, 0.4))
        return UncertaintyResult(mean, var, passes=10, dropout_p=0.1)

    def test_hotspot(self, tmp_path):
        var = np.zeros((8, 9, 10))
        var[3, 4, 5] = 0.25
        paths = render_uncertainty(self._result(var), 2, 5, tmp_path)
        names = [p.name for p in paths]
        assert names == ["axis2_slice005_mean.png", "axis2_slice005_variance.png",
                         "axis2_slice005_overlay.png", "axis2_slice005_variance_max.txt"]
        heat = np.asarray(Image.open(paths[1]))
        assert heat.shape == (8, 9, 3)
        assert tuple(heat[3, 4]) == (255, 255, 255)
        assert heat.sum() == 3 * 255
        overlay = np.asarray(Image.open(paths[2])).astype(int)
        grey = round(0.4 * 255)
        assert tuple(overlay[0, 0]) == (grey, grey, grey)
        grey_f = np.float64(np.float32(0.4))
        hot = int(np.rint(((1 - 0.5) * grey_f + 0.5 * 1.0) * 255.0))
        assert tuple(overlay[3, 4]) == (hot, hot, hot)
        assert float(paths[3].read_text()) == 0.25

    def test_flat_variance(self, tmp_path):
        paths = render_uncertainty(self._result(np.zeros((8, 8, 8))), 0, 0, tmp_path)
        assert np.asarray(Image.open(paths[1])).max() == 0

    def test_deterministic_bytes(self, tmp_path):
        var = np.random.default_rng(0).random((8, 8, 8))
        a = render_uncertainty(self._result(var), 1, 3, tmp_path / "a")
        b = render_uncertainty(self._result(var), 1, 3, tmp_path / "b")
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))

    @pytest.mark.parametrize("axis,index", [(3, 0), (0, 8), (1, -1)])
    def test_bad_slice(self, tmp_path, axis, index):
        with pytest.raises(ArgumentError):
            render_uncertainty(self._result(np.zeros((8, 8, 8))), axis, index, tmp_path)

    def test_negative_variance_rejected(self):
        with pytest.raises(ArgumentError):
            self._result(np.full((8, 8, 8), -1.0))
