from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from edgereg.edge_kernels import (
    EdgeKernelBank,
    FrozenLaplacian,
    KernelSnapshot,
    edge_forward,
    export_evolution,
    export_heatmaps,
    init_edge_bank,
    laplacian3d,
    load_snapshots,
    pca_project,
    save_snapshots,
    select_top_channels,
    snapshot,
    write_pca_csv,
)
from edgereg.errors import ArgumentError, ShapeError

from .conftest import central_fd
from .helpers import top_channels_sort


def _conv_base(vol: np.ndarray) -> np.ndarray:
    k = torch.from_numpy(laplacian3d())[None, None]
    return F.conv3d(torch.from_numpy(vol)[None, None], k, padding=1)[0, 0].numpy()


class TestLaplacian:
    def test_stencil(self):
        k = laplacian3d()
        assert k[1, 1, 1] == -6
        assert np.count_nonzero(k == 1) == 6
        assert np.count_nonzero(k == 0) == 20
        assert k.sum() == 0

    def test_constant_volume(self):
        out = _conv_base(np.full((8, 8, 8), 0.7))
        assert np.abs(out[1:-1, 1:-1, 1:-1]).max() <= 1e-12

    def test_quadratic_gives_two(self):
        """Second difference of x^2 is exactly 2."""
        x = np.arange(8, dtype=np.float64)
        vol = np.broadcast_to((x ** 2)[:, None, None], (8, 8, 8)).copy()
        out = _conv_base(vol)
        np.testing.assert_array_equal(out[1:-1, 1:-1, 1:-1], 2.0)

    def test_26_connectivity_option(self):
        assert laplacian3d(26).sum() == 0
        with pytest.raises(ArgumentError):
            laplacian3d(18)


class TestInitialisation:
    def test_zero_entries_stay_zero(self):
        bank = init_edge_bank(3, 32, seed=5)
        mask = laplacian3d() == 0
        w = bank.weight.detach().numpy()
        assert np.all(w[:, :, mask] == 0)

    def test_scaled_by_c_in(self):
        bank = EdgeKernelBank(4, 32, perturbation_scale=0.0)
        np.testing.assert_allclose(bank.weight.detach().numpy()[0, 0], laplacian3d() / 4, atol=1e-7)

    def test_perturbation_law(self):
        """Centre entries over 10^4 filters: hat/(-6) has mean ~1 and std ~0.1."""
        bank = EdgeKernelBank(1, 10_000, select_n=1, seed=0)
        ratio = bank.weight.detach().double().numpy()[:, 0, 1, 1, 1] / -6.0
        assert abs(ratio.mean() - 1.0) <= 0.01
        assert abs(ratio.std() - 0.1) <= 0.01

    def test_filters_distinct(self):
        w = EdgeKernelBank(1, 32, seed=3).weight.detach().numpy().reshape(32, -1)
        diffs = np.abs(w[:, None] - w[None]).max(axis=-1)
        assert np.all(diffs[~np.eye(32, dtype=bool)] > 0)

    def test_seed_determinism(self):
        a, b, c = EdgeKernelBank(seed=9), EdgeKernelBank(seed=9), EdgeKernelBank(seed=10)
        assert torch.equal(a.weight, b.weight)
        assert not torch.equal(a.weight, c.weight)

    def test_bias_zero(self):
        assert torch.all(EdgeKernelBank().bias == 0)

    def test_select_n_bound(self):
        with pytest.raises(ArgumentError):
            EdgeKernelBank(1, 8, select_n=16)

    def test_unperturbed_constant_response(self):
        bank = EdgeKernelBank(1, 4, select_n=2, perturbation_scale=0.0)
        x = torch.full((1, 1, 8, 8, 8), 0.3)
        out = F.conv3d(x, bank.weight, padding=1)
        assert out[..., 1:-1, 1:-1, 1:-1].abs().max().item() <= 1e-6


class TestEdgeForward:
    def test_ordering_forced(self):
        act = torch.tensor([3.0, 1.0, 2.0]).reshape(1, 3, 1, 1, 1).expand(1, 3, 4, 4, 4)
        _, idx = select_top_channels(act, 2)
        assert idx.tolist() == [[0, 2]]

    def test_ties_ascending(self):
        act = torch.ones(1, 6, 3, 3, 3)
        _, idx = select_top_channels(act, 4)
        assert idx.tolist() == [[0, 1, 2, 3]]

    def test_against_sort_oracle(self, rng):
        bank = EdgeKernelBank(2, 32, 16, seed=1)
        x = torch.from_numpy(rng.random((3, 2, 8, 8, 8)).astype(np.float32))
        out, idx = bank(x, return_indices=True)
        act = bank.activations(x).detach().numpy()
        assert idx.tolist() == top_channels_sort(act, 16)
        expected = np.stack([act[n, idx[n].numpy()] for n in range(3)])
        assert np.array_equal(out.detach().numpy(), expected)

    def test_same_spatial_size(self):
        out = edge_forward(EdgeKernelBank(), torch.rand(1, 1, 9, 10, 11))
        assert out.shape == (1, 16, 9, 10, 11)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            EdgeKernelBank(2)(torch.rand(1, 1, 8, 8, 8))

    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_selection_scale_invariant(self, lam, seed):
        bank = EdgeKernelBank(1, 32, 16, seed=seed % 7)
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(1, 1, 8, 8, 8, generator=g, dtype=torch.float64)
        bank = bank.double()
        _, a = bank(x, return_indices=True)
        _, b = bank(lam * x, return_indices=True)
        assert set(a[0].tolist()) == set(b[0].tolist())

    def test_gradient_check(self):
        """d(sum of outputs)/d(filters) vs central differences, 6^3 input, c_out 4, select 2."""
        torch.manual_seed(0)
        bank = EdgeKernelBank(1, 4, 2, seed=2).double()
        x = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)
        bank(x).sum().backward()
        grad = bank.weight.grad.clone()

        def fn(w):
            with torch.no_grad():
                act = F.leaky_relu(F.conv3d(x, w, bank.bias, padding=1), bank.leaky_slope)
                return select_top_channels(act, 2)[0].sum()

        w0 = bank.weight.detach().clone()
        fd = torch.zeros_like(w0)
        for idx in np.ndindex(*w0.shape):
            fd[idx] = central_fd(fn, w0, idx, 1e-5)
        err = (grad - fd).abs().max() / fd.abs().max()
        assert err.item() <= 1e-4

    def test_frozen_bank_unchanged_by_step(self):
        bank = EdgeKernelBank(1, 8, 4, trainable=False)
        before = bank.weight.detach().clone()
        head = torch.nn.Conv3d(4, 1, 1)
        params = [p for p in list(bank.parameters()) + list(head.parameters()) if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=0.1)
        head(bank(torch.rand(1, 1, 8, 8, 8))).sum().backward()
        opt.step()
        assert torch.equal(bank.weight, before)

    def test_frozen_laplacian(self):
        lap = FrozenLaplacian(16)
        assert len(list(lap.parameters())) == 0
        assert lap(torch.rand(1, 1, 8, 8, 8)).shape == (1, 16, 8, 8, 8)


class TestAnalytics:
    def test_pca_identical_kernels(self):
        k = np.tile(laplacian3d().reshape(1, 1, 3, 3, 3), (5, 1, 1, 1, 1))
        pts, ratios = pca_project(k)
        assert np.all(pts == 0) and np.all(ratios == 0)

    def test_pca_rank_one(self):
        base = laplacian3d().reshape(27)
        e1 = np.zeros(27)
        e1[4] = 1.0
        k = np.stack([base + t * e1 for t in (-1.0, 0.0, 1.0)])
        pts, ratios = pca_project(k)
        assert ratios[1] == 0.0
        assert ratios[0] == pytest.approx(1.0)
        assert np.all(pts[:, 1] == 0)
        np.testing.assert_allclose(pts[:, 0], [-1, 0, 1], atol=1e-12)

    def test_pca_ratio_order(self, rng):
        pts, ratios = pca_project(rng.normal(size=(20, 1, 3, 3, 3)))
        assert ratios[0] >= ratios[1] >= 0 and ratios.sum() <= 1 + 1e-12
        assert pts.shape == (20, 2)

    def test_pca_needs_three(self):
        with pytest.raises(ArgumentError):
            pca_project(np.zeros((2, 27)))

    def test_pca_matches_covariance_eigen(self, rng):
        x = rng.normal(size=(30, 27))
        _, ratios = pca_project(x)
        ev = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1]
        np.testing.assert_allclose(ratios, ev[:2] / ev.sum(), rtol=1e-10)

    def test_heatmaps_deterministic(self, tmp_path):
        snap = snapshot(EdgeKernelBank(seed=4), 0)
        a = export_heatmaps(snap, tmp_path / "a")
        b = export_heatmaps(snap, tmp_path / "b")
        assert len(a) == 32 * 3
        assert a[0].name == "kernel000_slice0.png"
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))

    def test_heatmap_grey_scale(self, tmp_path):
        from PIL import Image

        snap = KernelSnapshot(0, laplacian3d().reshape(1, 1, 3, 3, 3))
        export_heatmaps(snap, tmp_path, upscale=1)
        img = np.asarray(Image.open(tmp_path / "kernel000_slice1.png"))
        assert img.dtype == np.uint8 and img.shape == (3, 3)
        assert img[1, 1] == 0 and img[0, 1] == 149 and img[0, 0] == 128

    def test_csv_format(self, tmp_path):
        pts, ratios = pca_project(np.random.default_rng(0).normal(size=(4, 27)))
        write_pca_csv(pts, ratios, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "kernel_id,pc1,pc2"
        assert len(lines) == 6 and lines[-1].startswith("explained_variance,")

    def test_snapshot_round_trip_and_evolution(self, tmp_path):
        bank = EdgeKernelBank(seed=1)
        snaps = [snapshot(bank, e) for e in (0, 10, 20)]
        save_snapshots({"edge_moving": snaps}, tmp_path / "s.npz")
        back = load_snapshots(tmp_path / "s.npz")["edge_moving"]
        assert [s.epoch for s in back] == [0, 10, 20]
        assert np.array_equal(back[2].filters, snaps[2].filters)
        paths = export_evolution(back, tmp_path / "evo")
        assert paths and paths[0].name == "evolution_kernel000.png"
