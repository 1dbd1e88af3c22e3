import pytest

from dxformer import cli
from dxformer.metrics import MetricsReport


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    root = tmp_path / "data"
    code, _, _ = run(capsys, "synth", f"--out_dir={root}", "--num_videos=6", "--num_folds=3",
                     "--t_min=30", "--t_max=50", "--input_dim=6")
    assert code == 0
    return root


def test_metrics_on_ground_truth_is_perfect(capsys, dataset):
    code, out, _ = run(capsys, "metrics", f"--pred_dir={dataset / 'labels'}", f"--gt_dir={dataset / 'labels'}",
                       f"--mapping={dataset / 'mapping.txt'}")
    assert code == 0
    assert out.splitlines()[:5] == ["f1_10=100.00", "f1_25=100.00", "f1_50=100.00", "edit=100.00", "acc=100.00"]


def test_metrics_report_file_matches_stdout(capsys, dataset, tmp_path):
    out_file = tmp_path / "report.txt"
    code, out, _ = run(capsys, "metrics", f"--pred_dir={dataset / 'labels'}", f"--gt_dir={dataset / 'labels'}",
                       f"--mapping={dataset / 'mapping.txt'}", "--edit_mode=pooled", f"--out={out_file}")
    assert code == 0 and out_file.read_text() == out
    assert MetricsReport.from_record(out).edit_mode == "pooled"


def test_train_eval_predict_pipeline(capsys, dataset, tmp_path):
    run_dir = tmp_path / "run"
    args = ["train", f"--data_dir={dataset}", f"--split={dataset / 'splits/fold2.txt'},{dataset / 'splits/fold3.txt'}",
            f"--out_dir={run_dir}", "--model_dim=8", "--blocks_per_stage=3", "--num_decoders=1", "--epochs=2"]
    code, out, _ = run(capsys, *args)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("epoch=1 step=") and "loss=" in lines[0] and "train_acc=" in lines[0]
    assert not any(line.startswith("timing") for line in lines)
    ckpt = run_dir / "final.dxck"
    assert ckpt.is_file()

    # same command again: same checkpoint bytes, same log
    first = ckpt.read_bytes()
    code, again, _ = run(capsys, *args)
    assert code == 0 and again == out and ckpt.read_bytes() == first

    code, report, _ = run(capsys, "eval", f"--checkpoint={ckpt}", f"--data_dir={dataset}",
                          f"--split={dataset / 'splits/fold1.txt'}")
    assert code == 0 and MetricsReport.from_record(report).num_videos == 2

    pred = tmp_path / "pred"
    code, _, _ = run(capsys, "predict", f"--checkpoint={ckpt}", f"--data_dir={dataset}", f"--out_dir={pred}")
    assert code == 0 and len(list(pred.glob("*.txt"))) == 6

    # scoring the written predictions reproduces eval on the full set
    code, via_files, _ = run(capsys, "metrics", f"--pred_dir={pred}", f"--gt_dir={dataset / 'labels'}",
                             f"--mapping={dataset / 'mapping.txt'}")
    code2, via_eval, _ = run(capsys, "eval", f"--checkpoint={ckpt}", f"--data_dir={dataset}")
    assert code == code2 == 0 and via_files == via_eval


def test_timing_line_is_opt_in(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, "train", f"--data_dir={dataset}", f"--out_dir={tmp_path / 'r'}", "--model_dim=4",
                       "--blocks_per_stage=1", "--num_decoders=0", "--epochs=1", "--timing=true")
    assert code == 0
    assert [line for line in out.splitlines() if line.startswith("timing")][0].startswith("timing wall_seconds=")


def test_config_file_and_override_precedence(capsys, dataset, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(f"# comment\ndata_dir={dataset}\nout_dir={tmp_path / 'r'}\nmodel_dim=4\n"
                   "blocks_per_stage=1\nnum_decoders=0\nepochs=3\n")
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--epochs=1")
    assert code == 0 and len([line for line in out.splitlines() if line.startswith("epoch=")]) == 1


@pytest.mark.parametrize("argv, code, needle", [
    (["train", "--nonsense=1"], 2, "unrecognized"),
    (["synth"], 2, "out_dir"),
    (["synth", "--out_dir=x", "--num_videos=abc"], 2, "num_videos"),
    (["gradcheck", "--seeds=0"], 1, "seeds"),
    (["metrics", "--pred_dir=a", "--gt_dir=b", "--mapping=/no/such/file"], 1, "FileNotFoundError"),
    (["eval", "--checkpoint=c.dxck"], 2, "features_dir"),
    (["frobnicate"], 2, "invalid choice"),
    (["train", "--config=/no/such.cfg"], 2, "config file not found"),
])
def test_errors_exit_nonzero_with_one_line(capsys, argv, code, needle):
    got, out, err = run(capsys, *argv)
    assert got == code
    assert len(err.strip().splitlines()) == 1 and needle in err
    assert out == ""


def test_unknown_key_in_config_file_names_the_line(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("out_dir=x\n\nlearning_rat=0.1\n")
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 2 and "bad.cfg:3" in err and "learning_rat" in err


def test_malformed_config_line(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just words\n")
    code, _, err = run(capsys, "synth", "--config", str(cfg))
    assert code == 2 and "key=value" in err


def test_bad_value_from_dataclass_validation(capsys, tmp_path):
    code, _, err = run(capsys, "synth", f"--out_dir={tmp_path}", "--num_classes=1")
    assert code == 1 and "num_classes" in err


@pytest.mark.parametrize("command", cli.COMMANDS)
def test_help_lists_every_key(capsys, command):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in cli.SCHEMAS[command]:
        assert f"--{key.name}" in out


def test_train_schema_has_workers_and_no_derived_dims():
    names = {k.name for k in cli.SCHEMAS["train"]}
    assert "workers" in names and "input_dim" not in names and "num_classes" not in names


def test_shipped_configs_parse():
    train = cli.resolve("train", "toy_train", {})
    assert train["model_dim"] == 32 and train["blocks_per_stage"] == 5 and train["num_decoders"] == 3
    assert cli.resolve("gradcheck", "toy_gradcheck", {})["seeds"] == 20


def test_gradcheck_on_shipped_config(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config=toy_gradcheck", "--seeds=2")
    assert code == 0
    lines = out.splitlines()
    names = [line.split()[0].split("=")[1] for line in lines]
    assert {"matmul", "conv1d", "windowed_attention", "da_block_encoder", "da_block_decoder", "seg_loss",
            "model"} <= set(names)
    assert all(line.endswith("ok=true") for line in lines)
