from __future__ import annotations

import csv

import numpy as np
import pytest

from edgereg.checkpoint import save_checkpoint
from edgereg.cli import main
from edgereg.nonrigid_net import NonRigidModelConfig, NonRigidRegNet
from edgereg.rigid_net import RigidModelConfig, RigidRegNet
from edgereg.volume_io import PhantomPair, read_volume


@pytest.fixture
def workspace(tmp_path):
    assert main(["gen-phantom", "--out", str(tmp_path / "pairs"), "--count", "2", "--dims", "16", "16", "16",
                 "--affine-mag", "2", "--disp-mag", "1"]) == 0
    rigid = save_checkpoint(RigidRegNet(RigidModelConfig(variant=2, base_channels=4)), tmp_path / "r.erck")
    nonrigid = save_checkpoint(
        NonRigidRegNet(NonRigidModelConfig(variant=1, base_channels=4, levels=2, dilation_rates=[1, 2])),
        tmp_path / "n.erck",
    )
    return tmp_path, rigid, nonrigid


class TestCli:
    def test_gen_phantom_single(self, tmp_path):
        assert main(["gen-phantom", "--out", str(tmp_path / "p"), "--seed", "3", "--dims", "16", "16", "16",
                     "--modality-shift"]) == 0
        pair = PhantomPair.load(tmp_path / "p")
        assert pair.moving.dims == (16, 16, 16) and pair.modality_remap != "identity"

    def test_register_untrained_is_identity(self, workspace):
        tmp, rigid, nonrigid = workspace
        pair_dir = tmp / "pairs" / "pair_0000"
        out = tmp / "reg"
        assert main(["register", "--rigid", str(rigid), "--nonrigid", str(nonrigid), "--pair", str(pair_dir),
                     "--out", str(out), "--mc-passes", "2"]) == 0
        warped = read_volume(out / "warped.vol")
        assert np.array_equal(warped.data, PhantomPair.load(pair_dir).moving.data)
        assert (out / "field.vol").exists() and (out / "variance.npy").exists()
        assert (out / "loss.csv").read_text().startswith("D,R,alpha,total")

    def test_evaluate(self, workspace):
        tmp, rigid, _ = workspace
        assert main(["evaluate", "--rigid", str(rigid), "--pairs", str(tmp / "pairs"),
                     "--out", str(tmp / "eval.csv")]) == 0
        with open(tmp / "eval.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["pair_id"] for r in rows] == ["pair_0000", "pair_0001"]

    def test_uncertainty(self, workspace):
        tmp, _, nonrigid = workspace
        out = tmp / "unc"
        assert main(["uncertainty", "--model", str(nonrigid), "--pair", str(tmp / "pairs" / "pair_0001"),
                     "--passes", "3", "--out", str(out)]) == 0
        assert (out / "axis2_slice008_overlay.png").exists()

    def test_train_and_inspect(self, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("stage = rigid\nvariant = 4\nepochs = 2\nbase_channels = 4\n"
                       "dataset = phantom:count=2,affine=2,dims=16\nsnapshot_every = 1\n")
        out = tmp_path / "run"
        assert main(["--threads", "1", "train", "--config", str(cfg), "--out", str(out),
                     "--set", "learning_rate=1e-3"]) == 0
        assert (out / "model.erck").exists() and (out / "train_log.csv").exists()
        assert main(["inspect-kernels", "--snapshots", str(out / "kernel_snapshots.npz"),
                     "--out", str(tmp_path / "k")]) == 0
        assert (tmp_path / "k" / "edge_moving" / "pca.csv").exists()
        assert (tmp_path / "k" / "edge_moving" / "evolution" / "evolution_kernel000.png").exists()
        assert main(["inspect-kernels", "--model", str(out / "model.erck"), "--out", str(tmp_path / "k2")]) == 0

    def test_argument_error_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["register"])
        assert exc.value.code == 2

    def test_data_error_exit_3(self, workspace):
        tmp, rigid, _ = workspace
        bad = tmp / "bad_pair"
        bad.mkdir()
        (bad / "fixed.vol").write_bytes(b"garbage")
        assert main(["register", "--rigid", str(rigid), "--pair", str(bad), "--out", str(tmp / "x")]) == 3

    def test_corrupt_checkpoint_exit_3(self, workspace):
        tmp, rigid, _ = workspace
        blob = rigid.read_bytes()
        rigid.write_bytes(blob[:-3])
        assert main(["register", "--rigid", str(rigid), "--pair", str(tmp / "pairs" / "pair_0000"),
                     "--out", str(tmp / "x")]) == 3

    def test_kind_mismatch_exit_3(self, workspace):
        tmp, _, nonrigid = workspace
        assert main(["register", "--rigid", str(nonrigid), "--pair", str(tmp / "pairs" / "pair_0000"),
                     "--out", str(tmp / "x")]) == 3

    def test_numeric_failure_exit_4(self, tmp_path, monkeypatch):
        import edgereg.cli as cli
        from edgereg.errors import NumericError

        def boom(*args, **kwargs):
            raise NumericError("non-finite loss")

        monkeypatch.setattr(cli, "train", boom)
        cfg = tmp_path / "t.cfg"
        cfg.write_text("epochs = 1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
