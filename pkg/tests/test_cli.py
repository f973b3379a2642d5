import numpy as np
import pytest

from cfdiff.cli import main
from cfdiff.container import read_tensors
from cfdiff.runconfig import save_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpus + two tiny checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus_cfg = root / "corpus.cfg"
    save_config(
        corpus_cfg,
        {
            "corpus": {"train_count": "10", "val_count": "4", "test_count": "6", "seed": "3"},
            "paths": {"out_dir": str(root / "corpus")},
        },
    )
    assert main(["synth", "--config", str(corpus_cfg)]) == 0

    net = {
        "condition_mode": "attention",
        "base": "8",
        "channel_mults": "1,2",
        "heads": "2",
        "d_tau": "2",
        "groups": "2",
        "time_dim": "16",
        "attn_levels": "1",
    }
    train_cfg = root / "train.cfg"
    save_config(
        train_cfg,
        {
            "paths": {"corpus_dir": str(root / "corpus"), "checkpoint_out": str(root / "attn.cfd")},
            "net": net,
            "schedule": {"T": "100"},
            "train": {"steps": "12", "batch_size": "4", "lr": "0.001", "seed": "0"},
        },
    )
    assert main(["train", "--config", str(train_cfg)]) == 0

    train_ada = root / "train_ada.cfg"
    save_config(
        train_ada,
        {
            "paths": {"corpus_dir": str(root / "corpus"), "checkpoint_out": str(root / "ada.cfd")},
            "net": dict(net, condition_mode="adagroup"),
            "schedule": {"T": "100"},
            "train": {"steps": "12", "batch_size": "4", "lr": "0.001", "seed": "0"},
        },
    )
    assert main(["train", "--config", str(train_ada)]) == 0
    return root


def test_synth_outputs(workdir):
    out = workdir / "corpus"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.tsv", "test.cfd", "train.cfd", "val.cfd"]
    train = read_tensors(out / "train.cfd")
    assert train["images"].shape == (10, 2, 32, 32)
    assert train["masks"].shape == (10, 32, 32)
    assert train["labels"].shape == (10,)
    manifest = (out / "manifest.tsv").read_text().strip().splitlines()
    assert len(manifest) == 20
    assert manifest[0].split("\t")[2] == "train"


def test_synth_idempotent(workdir, tmp_path):
    cfg = tmp_path / "c.cfg"
    save_config(
        cfg,
        {
            "corpus": {"train_count": "4", "val_count": "2", "test_count": "2", "seed": "3"},
            "paths": {"out_dir": str(tmp_path / "a")},
        },
    )
    assert main(["synth", "--config", str(cfg)]) == 0
    first = (tmp_path / "a" / "train.cfd").read_bytes()
    assert main(["synth", "--config", str(cfg)]) == 0
    assert (tmp_path / "a" / "train.cfd").read_bytes() == first


def test_synth_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    save_config(cfg, {"corpus": {"train_cont": "4"}, "paths": {"out_dir": str(tmp_path)}})
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "train_cont" in capsys.readouterr().err


def test_train_rejects_missing_required_key(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    save_config(cfg, {"paths": {"checkpoint_out": str(tmp_path / "x.cfd")}})
    assert main(["train", "--config", str(cfg)]) == 2
    assert "corpus_dir" in capsys.readouterr().err


def test_train_writes_loss_log(workdir):
    log = (workdir / "attn.loss.csv").read_text().splitlines()
    assert log[0] == "step,loss,ema_loss"
    assert log[-1].startswith("# realized_drop_fraction=")


def test_counterfactual_roundtrip_outputs(workdir):
    out = workdir / "cf.cfd"
    code = main(
        [
            "counterfactual",
            "--checkpoint",
            str(workdir / "attn.cfd"),
            "--input",
            str(workdir / "corpus" / "test.cfd"),
            "--out",
            str(out),
            "--w",
            "1.5",
            "--L",
            "5",
            "--ddim-steps",
            "20",
            "--pgm",
            str(workdir / "pgm"),
        ]
    )
    assert code == 0
    tensors = read_tensors(out)
    assert tensors["heatmaps"].shape == (6, 1, 32, 32)
    assert tensors["counterfactuals"].shape == (6, 2, 32, 32)
    assert np.all(tensors["heatmaps"] >= 0)
    pgm = (workdir / "pgm" / "heatmap_0000.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n")
    assert len(list((workdir / "pgm").iterdir())) == 6


def test_eval_baseline_and_threshold_exit_code(workdir, tmp_path):
    cfg = tmp_path / "eval.cfg"
    save_config(
        cfg,
        {"eval": {"method": "baseline", "corpus_dir": str(workdir / "corpus"), "split": "test"}},
    )
    out = tmp_path / "eval.csv"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0].startswith("method,")
    assert len(rows) == 2

    save_config(
        cfg,
        {
            "eval": {"method": "baseline", "corpus_dir": str(workdir / "corpus"), "split": "test"},
            "thresholds": {"ceil_dice": "0.999"},
        },
    )
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 1


def test_eval_counterfactual_runs(workdir, tmp_path):
    cfg = tmp_path / "eval.cfg"
    save_config(
        cfg,
        {
            "eval": {
                "method": "counterfactual",
                "checkpoint": str(workdir / "attn.cfd"),
                "corpus_dir": str(workdir / "corpus"),
                "split": "val",
                "w": "1.0",
                "l_fraction": "0.2",
                "ddim_steps": "20",
            }
        },
    )
    out = tmp_path / "eval.csv"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    row = out.read_text().strip().splitlines()[1].split(",")
    assert row[0] == "counterfactual"
    assert row[2] == "4"  # L column


def test_sweep_row_count(workdir, tmp_path):
    cfg = tmp_path / "sweep.cfg"
    save_config(
        cfg,
        {
            "sweep": {
                "checkpoint": str(workdir / "attn.cfd"),
                "corpus_dir": str(workdir / "corpus"),
                "split": "val",
                "w_grid": "0,1",
                "l_fractions": "0.1,0.2,0.3",
                "ddim_steps": "20",
            }
        },
    )
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 3


def test_ablate_emits_four_rows(workdir, tmp_path):
    cfg = tmp_path / "ablate.cfg"
    save_config(
        cfg,
        {
            "ablate": {
                "checkpoint_adagroup": str(workdir / "ada.cfd"),
                "checkpoint_attention": str(workdir / "attn.cfd"),
                "corpus_dir": str(workdir / "corpus"),
                "split": "test",
                "w": "2.0",
                "l_fraction": "0.2",
                "ddim_steps": "20",
            }
        },
    )
    out = tmp_path / "ablation.csv"
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == [
        "cdpm",
        "implicit_guidance",
        "attention_conditioning",
        "dynamic_normalization",
    ]


def test_eval_heatmap_container_perfect_scores(workdir, tmp_path):
    from cfdiff.container import write_tensors

    masks = read_tensors(workdir / "corpus" / "test.cfd")["masks"]
    heat_path = tmp_path / "heat.cfd"
    write_tensors(heat_path, {"heatmaps": masks[:, None].astype(np.float32)})
    cfg = tmp_path / "eval.cfg"
    save_config(
        cfg,
        {
            "eval": {
                "method": "heatmaps",
                "heatmaps": str(heat_path),
                "corpus_dir": str(workdir / "corpus"),
                "split": "test",
            }
        },
    )
    out = tmp_path / "eval.csv"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    row = out.read_text().strip().splitlines()[1].split(",")
    assert float(row[6]) == 1.0  # auprc
    assert float(row[7]) == 1.0  # ceil_dice


def test_counterfactual_constant_checkpoint_roundtrip(workdir, tmp_path):
    import torch

    from cfdiff.checkpoint import save_checkpoint
    from cfdiff.net import CondUNet, Denoiser, NetConfig
    from cfdiff.pipeline import to_model_range
    from cfdiff.schedule import build_schedule

    net = CondUNet(NetConfig(base=8, channel_mults=(1,), heads=2, d_tau=2, groups=2, time_dim=16, attn_levels=(), mid_attn=False))
    with torch.no_grad():  # constant (zero) denoiser
        net.out_conv.weight.zero_()
        net.out_conv.bias.zero_()
    ckpt = tmp_path / "const.cfd"
    save_checkpoint(ckpt, Denoiser(net), build_schedule(100))
    out = tmp_path / "cf.cfd"
    code = main(
        [
            "counterfactual",
            "--checkpoint", str(ckpt),
            "--input", str(workdir / "corpus" / "val.cfd"),
            "--out", str(out),
            "--w", "1.0",
            "--L", "10",
            "--ddim-steps", "20",
            "--normalization", "none",
        ]
    )
    assert code == 0
    images = read_tensors(workdir / "corpus" / "val.cfd")["images"]
    cf = read_tensors(out)["counterfactuals"]
    assert np.allclose(cf, to_model_range(images), atol=1e-5)


def test_thread_cap_env(monkeypatch):
    from cfdiff.cli import thread_cap

    monkeypatch.setenv("CFDIFF_THREADS", "3")
    assert thread_cap() == 3
    assert thread_cap(8) == 3
    assert thread_cap(2) == 2
    monkeypatch.delenv("CFDIFF_THREADS")
    assert thread_cap(1) == 1


def test_missing_config_flag(capsys):
    assert main(["train"]) == 2
    assert "--config" in capsys.readouterr().err


def test_config_echo_in_outputs(workdir):
    from cfdiff.container import u8_to_text

    tensors = read_tensors(workdir / "attn.cfd")
    echo = u8_to_text(tensors["meta/config"])
    assert "[net]" in echo and "condition_mode = attention" in echo
