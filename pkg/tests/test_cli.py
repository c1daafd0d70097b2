import numpy as np
import pytest

from pamr.cli import main
from pamr.data import load_dataset_dir, read_xyz
from pamr.metrics import format_metrics
from pamr.training import MetricsRow

TINY_CFG = """
# architecture
n_points = 32
sizes = 16,8
ks = 4,4
dims = 8,16
heads = 2
encoder_blocks = 1
decoder_blocks = 1
la_window = 3
la_groups = 4

# training
epochs = 2
batch_size = 4
base_lr = 0.001
warmup_epochs = 1
seed = 5
mask_ratio = 0.6
augment = false
head_hidden = 16
holdout_fraction = 0.25
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


@pytest.fixture
def dataset(tmp_path, cfg_file):
    d = tmp_path / "data"
    rc = main([
        "gen-data", "--config", cfg_file, "--out", str(d),
        "--kinds", "sphere,cube,torus,cylinder", "--per-class", "3",
        "--n-points", "64", "--jitter", "0.02",
    ])
    assert rc == 0
    return str(d)


class TestMetricsFormat:
    def test_header_only_when_empty(self):
        assert format_metrics([]) == "step,epoch,lr,loss\n"

    def test_accuracy_column_appears_when_present(self):
        rows = [MetricsRow(1, 0, 0.5, 1.25, 0.75)]
        text = format_metrics(rows)
        assert text.splitlines()[0] == "step,epoch,lr,loss,accuracy"
        assert text.splitlines()[1] == "1,0,0.5,1.25,0.75"

    def test_floats_round_trip_through_repr(self):
        lr = 1.0 / 3.0
        text = format_metrics([MetricsRow(1, 0, lr, 2.0 / 7.0)])
        _, _, lr_s, loss_s = text.splitlines()[1].split(",")
        assert float(lr_s) == lr
        assert float(loss_s) == 2.0 / 7.0


class TestUsage:
    def test_unknown_subcommand_exits_2(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_unknown_flag_exits_2(self, capsys):
        assert main(["gradcheck", "--wat"]) == 2
        capsys.readouterr()

    def test_missing_required_flag_exits_2(self, capsys):
        assert main(["pretrain"]) == 2
        capsys.readouterr()

    def test_runtime_error_exits_1(self, tmp_path, capsys):
        rc = main(["pretrain", "--data", str(tmp_path), "--out", str(tmp_path / "o")])
        captured = capsys.readouterr()
        assert rc == 1
        assert "error:" in captured.err

    def test_bad_config_key_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_key = 1\n")
        rc = main(["gradcheck", "--config", str(cfg)])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err


class TestGenData:
    def test_echoes_resolved_config(self, tmp_path, cfg_file, capsys):
        rc = main(["gen-data", "--config", cfg_file, "--out", str(tmp_path / "d"),
                   "--kinds", "sphere", "--per-class", "1", "--n-points", "64"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "# resolved config" in out
        assert "mask_ratio = 0.6" in out
        assert "sizes = 16,8" in out

    def test_writes_labeled_clouds(self, dataset):
        clouds = load_dataset_dir(dataset)
        assert len(clouds) == 12
        labels = sorted({c.label for c in clouds})
        assert labels == [0, 1, 2, 3]
        assert all(len(c) == 64 for c in clouds)

    def test_deterministic_across_runs(self, tmp_path, cfg_file, capsys):
        args = ["gen-data", "--config", cfg_file, "--kinds", "torus",
                "--per-class", "2", "--n-points", "64"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        for name in ("torus_0000.xyz", "torus_0001.xyz"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestPretrainCommand:
    def test_writes_metrics_and_checkpoint(self, tmp_path, cfg_file, dataset, capsys):
        out_dir = tmp_path / "run"
        rc = main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(out_dir)])
        printed = capsys.readouterr().out
        assert rc == 0
        assert "# resolved config" in printed
        assert (out_dir / "model.ckpt").exists()
        lines = (out_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,lr,loss"
        assert len(lines) == 1 + 2 * 3  # 2 epochs x ceil(12/4) batches

    def test_rerun_byte_identical(self, tmp_path, cfg_file, dataset, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            rc = main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(out)])
            assert rc == 0
        capsys.readouterr()
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_seed_flag_changes_run(self, tmp_path, cfg_file, dataset, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(a)]) == 0
        assert main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(b),
                     "--seed", "99"]) == 0
        capsys.readouterr()
        assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()


class TestFinetuneCommand:
    def test_end_to_end_with_checkpoint(self, tmp_path, cfg_file, dataset, capsys):
        pre = tmp_path / "pre"
        assert main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(pre)]) == 0
        ft = tmp_path / "ft"
        rc = main(["finetune", "--config", cfg_file, "--data", dataset, "--out", str(ft),
                   "--checkpoint", str(pre / "model.ckpt")])
        printed = capsys.readouterr().out
        assert rc == 0
        assert "train accuracy" in printed and "holdout accuracy" in printed
        assert (ft / "classifier.ckpt").exists()
        header = (ft / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,epoch,lr,loss,accuracy"

    def test_fingerprint_mismatch_fails_without_override(self, tmp_path, cfg_file, dataset, capsys):
        pre = tmp_path / "pre"
        assert main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(pre)]) == 0
        other = tmp_path / "other.cfg"
        other.write_text(TINY_CFG.replace("heads = 2", "heads = 1"))
        rc = main(["finetune", "--config", str(other), "--data", dataset,
                   "--out", str(tmp_path / "ft"), "--checkpoint", str(pre / "model.ckpt")])
        assert rc == 1
        assert "fingerprint" in capsys.readouterr().err


class TestFewshotCommand:
    def test_prints_mean_and_std(self, tmp_path, cfg_file, capsys):
        d = tmp_path / "data"
        assert main(["gen-data", "--config", cfg_file, "--out", str(d),
                     "--kinds", "sphere,cube", "--per-class", "6",
                     "--n-points", "64", "--jitter", "0.02"]) == 0
        cfg2 = tmp_path / "fs.cfg"
        cfg2.write_text(TINY_CFG + "n_way = 2\nm_shot = 2\ntrials = 2\ntest_per_class = 3\nepochs = 5\n")
        # the extended config duplicates epochs; rewrite cleanly instead
        cfg2.write_text(
            TINY_CFG.replace("epochs = 2", "epochs = 5")
            + "n_way = 2\nm_shot = 2\ntrials = 2\ntest_per_class = 3\n"
        )
        out = tmp_path / "fs"
        rc = main(["fewshot", "--config", str(cfg2), "--data", str(d), "--out", str(out)])
        printed = capsys.readouterr().out
        assert rc == 0
        assert "2-way 2-shot over 2 trials" in printed
        lines = (out / "fewshot.csv").read_text().splitlines()
        assert lines[0] == "trial,accuracy"
        assert len(lines) == 3


class TestReconstructCommand:
    def test_three_files_per_input(self, tmp_path, cfg_file, dataset, capsys):
        pre = tmp_path / "pre"
        assert main(["pretrain", "--config", cfg_file, "--data", dataset, "--out", str(pre)]) == 0
        clouds = sorted(__import__("pathlib").Path(dataset).glob("*.xyz"))[:2]
        out = tmp_path / "rec"
        rc = main(["reconstruct", "--config", cfg_file, "--checkpoint", str(pre / "model.ckpt"),
                   "--out", str(out), str(clouds[0]), str(clouds[1])])
        capsys.readouterr()
        assert rc == 0
        written = sorted(p.name for p in out.iterdir())
        assert len(written) == 6
        for stem in (clouds[0].stem, clouds[1].stem):
            for suffix in ("original", "masked", "reconstructed"):
                assert f"{stem}.{suffix}.xyz" in written
        # masked file holds the visible subset: strictly fewer rows than scale 1
        masked = read_xyz(out / f"{clouds[0].stem}.masked.xyz")
        original = read_xyz(out / f"{clouds[0].stem}.original.xyz")
        assert len(masked) < 16
        assert len(original) == 64


class TestGradcheckCommand:
    def test_exits_zero_and_prints_max_err(self, cfg_file, capsys):
        rc = main(["gradcheck", "--config", cfg_file])
        printed = capsys.readouterr().out
        assert rc == 0
        assert "max rel err" in printed
        assert "gradient checks passed" in printed


class TestAblateCommand:
    @pytest.fixture
    def quick_cfg(self, tmp_path):
        p = tmp_path / "quick.cfg"
        p.write_text(
            TINY_CFG.replace("epochs = 2", "epochs = 1").replace(
                "warmup_epochs = 1", "warmup_epochs = 0"
            )
        )
        return str(p)

    @pytest.fixture
    def small_data(self, tmp_path, quick_cfg):
        d = tmp_path / "abl_data"
        assert main(["gen-data", "--config", quick_cfg, "--out", str(d),
                     "--kinds", "sphere,torus", "--per-class", "2",
                     "--n-points", "64", "--jitter", "0.02"]) == 0
        return str(d)

    def test_mask_ratio_axis_rows(self, tmp_path, quick_cfg, small_data, capsys):
        out = tmp_path / "mask.csv"
        rc = main(["ablate", "--axis", "mask-ratio", "--config", quick_cfg,
                   "--data", small_data, "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "mask_ratio,final_loss"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0.9", "0.8", "0.7", "0.6", "0.5"]
        for ln in lines[1:]:
            assert np.isfinite(float(ln.split(",")[1]))

    def test_la_grid_axis_rows(self, tmp_path, quick_cfg, small_data, capsys):
        out = tmp_path / "grid.csv"
        rc = main(["ablate", "--axis", "la-grid", "--config", quick_cfg,
                   "--data", small_data, "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "la_window,la_groups,final_loss"
        assert [tuple(ln.split(",")[:2]) for ln in lines[1:]] == [
            ("5", "16"), ("5", "32"), ("7", "16"), ("7", "32")]

    def test_branch_axis_rows_and_determinism(self, tmp_path, quick_cfg, small_data, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            rc = main(["ablate", "--axis", "la-branches", "--config", quick_cfg,
                       "--data", small_data, "--out", str(out)])
            assert rc == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()
        lines = a.read_text().splitlines()
        assert lines[0] == "avg_branch,max_branch,final_loss"
        assert [tuple(ln.split(",")[:2]) for ln in lines[1:]] == [
            ("true", "true"), ("true", "false"), ("false", "true"), ("false", "false")]
