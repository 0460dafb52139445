import json
import subprocess
import sys

import numpy as np
import pytest

from linguine.cli import main
from linguine.forest import save_forest
from linguine.phantom import PhantomConfig, generate_study

from _suite import tumour_click

COMMANDS = ["gen-phantom", "landmarks", "register", "propagate", "run-study", "train-cvc", "eval"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, trained_forest):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-phantom", "--out", str(root / "study"), "--seed", "3"]) == 0
    save_forest(trained_forest, root / "forest.json")
    study = generate_study(PhantomConfig(seed=3))
    click = ",".join(f"{v:.4f}" for v in tumour_click(study, "t0").position)
    return root, click


@pytest.mark.parametrize("command", COMMANDS)
def test_help_for_every_command(capsys, command):
    with pytest.raises(SystemExit) as exit_:
        main([command, "--help"])
    assert exit_.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "linguine", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("linguine")


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exit_:
        main(["register", "--src"])
    assert exit_.value.code == 2
    with pytest.raises(SystemExit) as exit_:
        main(["no-such-command"])
    assert exit_.value.code == 2


def test_gen_phantom_layout(workspace):
    root, _ = workspace
    manifest = json.loads((root / "study" / "manifest.json").read_text())
    assert [s["scan_id"] for s in manifest["scans"]] == ["t0", "t1", "t2", "t3"]
    assert (root / "study" / "truth.json").exists()


def test_landmarks_and_register(capsys, workspace, tmp_path):
    root, _ = workspace
    for t in ("t0", "t1"):
        code, _ = run(capsys, "landmarks", "--labels", root / "study" / f"{t}_labels.nii.gz",
                      "--out", tmp_path / f"{t}.json")
        assert code == 0
    lms = json.loads((tmp_path / "t0.json").read_text())
    assert len(lms) == 46
    code, _ = run(capsys, "register", "--src", tmp_path / "t0.json", "--dst", tmp_path / "t1.json",
                  "--out", tmp_path / "T.json")
    assert code == 0
    T = json.loads((tmp_path / "T.json").read_text())
    R = np.array(T["R"]).reshape(3, 3)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9) and T["n_pairs"] == 46


def test_run_study_then_eval(capsys, workspace, tmp_path):
    root, click = workspace
    code, err = run(capsys, "run-study", "--manifest", root / "study" / "manifest.json", "--source", "t0",
                    "--click", click, "--cvc", root / "forest.json", "--out", tmp_path / "out")
    assert code == 0, err.err
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["pairs"]) == 3
    assert all(p["dice"] >= 0.95 for p in report["pairs"])
    assert len(list((tmp_path / "out" / "masks").iterdir())) == 3

    code, err = run(capsys, "eval", "--report", tmp_path / "out" / "report.json", "--out", tmp_path / "ev")
    assert code == 0, err.err
    summary = json.loads((tmp_path / "ev" / "eval.json").read_text())["summary"]
    assert summary["methods"]["linguine"]["mean_dice"] > summary["methods"]["unguided"]["mean_dice"]
    for name in ("eval.csv", "eval_dice.png", "click_validity.png"):
        assert (tmp_path / "ev" / name).stat().st_size > 0
    assert (tmp_path / "ev" / "eval_dice.png").read_bytes()[:4] == b"\x89PNG"


def test_propagate_is_idempotent(capsys, workspace, tmp_path):
    root, click = workspace
    outs = []
    for i in range(2):
        code, err = run(capsys, "propagate", "--manifest", root / "study" / "manifest.json", "--source", "t0",
                        "--dest", "t2", "--click", click, "--cvc", root / "forest.json",
                        "--out", tmp_path / f"o{i}")
        assert code == 0, err.err
        outs.append(tmp_path / f"o{i}")
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    assert (outs[0] / "masks" / "t2_k0.nii.gz").read_bytes() == (outs[1] / "masks" / "t2_k0.nii.gz").read_bytes()


def test_train_cvc(capsys, workspace, tmp_path):
    root, _ = workspace
    args = ["train-cvc", "--manifest", root / "study" / "manifest.json", "--n-trees", "5", "--seed", "2",
            "--dump-data", tmp_path / "d.jsonl"]
    assert run(capsys, *args, "--out", tmp_path / "a.json")[0] == 0
    assert run(capsys, "train-cvc", "--data", tmp_path / "d.jsonl", "--n-trees", "5", "--seed", "2",
               "--out", tmp_path / "b.json")[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["version"] == 1


def test_operation_error_exits_1_with_json(capsys, workspace, tmp_path):
    root, _ = workspace
    code, err = run(capsys, "propagate", "--manifest", root / "study" / "manifest.json", "--source", "t0",
                    "--dest", "t1", "--click", "1,1,1", "--no-cvc", "--out", tmp_path / "x")
    assert code == 1
    payload = json.loads(err.err.strip().splitlines()[-1])
    assert payload["error"] == "NoTumourAtClickError" and payload["command"] == "propagate"
    code, err = run(capsys, "propagate", "--manifest", root / "study" / "manifest.json", "--source", "t0",
                    "--dest", "t1", "--click", "1,1,1", "--out", tmp_path / "x")
    assert code == 1  # no forest and filtering not disabled
    code, err = run(capsys, "register", "--src", tmp_path / "missing.json", "--dst", tmp_path / "missing.json")
    assert code == 1 and json.loads(err.err.strip().splitlines()[-1])["command"] == "register"
