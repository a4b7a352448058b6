import os
import subprocess
import sys

import pytest

from crossfuse import config as C
from crossfuse.cli import main
from crossfuse.datagen import GenConfig
from crossfuse.train import TrainConfig

GEN = "n = 20\nseed = 2\n"
TRAIN = """# one quick cell
epochs = 1
lr = 0.003
batch_size = 8
seeds = 0
folds = 0,1
learn_loss_weights = false
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


class TestConfigFiles:
    def test_types_and_comments(self, tmp_path):
        cfg, rest = C.load(_write(tmp_path / "t.cfg", TRAIN + "tables = loss\n"), TrainConfig, ("tables",))
        assert cfg.epochs == 1 and cfg.lr == 0.003 and cfg.seeds == [0] and cfg.folds == [0, 1]
        assert cfg.learn_loss_weights is False and rest == {"tables": "loss"}

    def test_tuple_field(self, tmp_path):
        cfg, _ = C.load(_write(tmp_path / "g.cfg", "depth_range = 10, 14\n"), GenConfig)
        assert cfg.depth_range == (10.0, 14.0)

    @pytest.mark.parametrize("text, msg", [
        ("epochs 3\n", "expected key=value"),
        ("epochs = 3\nepochs = 4\n", "duplicate"),
        ("bogus = 1\n", "unknown key"),
        ("epochs = three\n", "cannot parse"),
        ("learn_loss_weights = maybe\n", "boolean"),
        ("epochs = 0\n", "epochs"),
    ])
    def test_errors(self, tmp_path, text, msg):
        with pytest.raises(C.ConfigFileError, match=msg):
            C.load(_write(tmp_path / "bad.cfg", text), TrainConfig)

    def test_dump_round_trip(self, tmp_path):
        cfg = TrainConfig(epochs=3, seeds=[1, 2], learn_loss_weights=False, loss="imima+sdm")
        C.dump(cfg, tmp_path / "out.cfg")
        again, _ = C.load(str(tmp_path / "out.cfg"), TrainConfig)
        assert again == cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = _write(root / "gen.cfg", GEN)
    train = _write(root / "train.cfg", TRAIN)
    ablate = _write(root / "ablate.cfg", TRAIN.replace("folds = 0,1", "folds = 0") + "tables = loss\n")
    assert main(["generate", "--config", gen, "--out", str(root / "data")]) == 0
    return root, gen, train, ablate


def _read_csvs(d):
    return {name: open(os.path.join(d, name), "rb").read() for name in sorted(os.listdir(d)) if name.endswith(".csv")}


def test_cli_outputs_are_byte_identical(workspace, capsys):
    root, gen, train, ablate = workspace
    data = str(root / "data")
    outs = {}
    for run in ("a", "b"):
        assert main(["generate", "--config", gen, "--out", str(root / f"data_{run}")]) == 0
        assert main(["train", "--config", train, "--data", data, "--out", str(root / f"train_{run}")]) == 0
        model = str(root / "train_a" / "model_fused_cross-self_vtmf_s0_f1")
        assert main(["evaluate", "--model", model, "--data", data, "--fold", "1",
                     "--out", str(root / f"eval_{run}")]) == 0
        assert main(["ablate", "--config", ablate, "--data", data, "--out", str(root / f"ablate_{run}")]) == 0
        os.makedirs(root / f"cam_{run}", exist_ok=True)
        assert main(["cam", "--model", model, "--case", "3", "--out", str(root / f"cam_{run}" / "h.pgm"),
                     "--data", data]) == 0
        outs[run] = {kind: _read_csvs(root / f"{kind}_{run}") for kind in ("train", "eval", "ablate", "cam")}
        outs[run]["gen"] = {n: open(root / f"data_{run}" / n, "rb").read() for n in ("folds.json", "genconfig.json")}
    assert outs["a"] == outs["b"]
    assert {"metrics.csv", "table3_loss.csv", "roc_fused_cross-self_vtmf_s0_f0.csv"} <= set(outs["a"]["ablate"])
    assert {"metrics.csv", "history_fused_cross-self_vtmf_s0_f0.csv"} <= set(outs["a"]["train"])
    header = outs["a"]["train"]["metrics.csv"].decode().splitlines()[0]
    assert header == "mode,topology,loss,fold,seed,acc,recall,prec,f1,auc"
    assert (root / "cam_a" / "h.pgm").read_text().startswith("P2\n32 32\n255\n")
    capsys.readouterr()


def test_loss_table_rows(workspace):
    root = workspace[0]
    lines = (root / "ablate_a" / "table3_loss.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["imima", "sdm", "mlm", "imima+sdm", "imima+mlm", "vtmf"]
    assert lines[0].split(",")[-3:] == ["cells", "failed", "status"]


@pytest.mark.parametrize("argv, msg", [
    (["train", "--config", "{train}", "--data", "{root}/missing", "--out", "{root}/x"], "does not exist"),
    (["evaluate", "--model", "{root}", "--data", "{root}/data", "--fold", "0"], "not a checkpoint"),
    (["generate", "--config", "{root}/nope.cfg", "--out", "{root}/y"], "No such file"),
    (["cam", "--model", "{root}/train_a/model_fused_cross-self_vtmf_s0_f1", "--case", "999",
      "--out", "{root}/c.pgm", "--data", "{root}/data"], "case 999"),
    (["evaluate", "--model", "{root}/train_a/model_fused_cross-self_vtmf_s0_f1", "--data", "{root}/data",
      "--fold", "7"], "fold 7"),
])
def test_errors_exit_nonzero_with_diagnostic(workspace, capsys, argv, msg):
    root, _, train, _ = workspace
    if not (root / "train_a").exists():
        pytest.skip("needs the determinism run's checkpoint")
    args = [a.format(root=root, train=train) for a in argv]
    assert main(args) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"crossfuse {args[0]}: error:") and msg in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "crossfuse.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("generate", "train", "evaluate", "ablate", "cam"):
        assert cmd in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "crossfuse.cli", "train"], capture_output=True, text=True)
    assert bad.returncode != 0 and "required" in bad.stderr


def test_shipped_configs_match_defaults():
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    assert C.load(os.path.join(root, "generate.cfg"), GenConfig)[0] == GenConfig()
    assert C.load(os.path.join(root, "train.cfg"), TrainConfig)[0] == TrainConfig()
    cfg, rest = C.load(os.path.join(root, "ablate.cfg"), TrainConfig, ("tables",))
    assert cfg == TrainConfig() and rest == {"tables": "modality,topology,loss"}
