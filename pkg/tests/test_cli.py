import json

import pytest

from stride.cli import build_parser, main
from stride.training import read_records


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["gen", "--seed", "5", "--out", str(out), "--subjects", "2", "--trials", "3", "--base-clips", "2"]) == 0
    assert main(["pretrain", "--seed", "5", "--out", str(out), "--epochs", "1"]) == 0
    return out


def test_gen_defaults():
    args = build_parser().parse_args(["gen", "--seed", "1"])
    assert (args.subjects, args.trials, args.base_clips) == (8, 90, 48)


def test_seed_is_required(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen"])
    assert exc.value.code == 2
    assert "--seed" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["loocv", "--seed", "1", "--folds", "1"],
    ["loocv", "--seed", "1", "--task", "speed"],
    ["livesim", "--seed", "1", "--duration-s", "0"],
    ["eval", "--bootstrap", "-3"],
])
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_gen_writes_manifest(work):
    man = json.loads((work / "gen.manifest.json").read_text())
    assert man["seed"] == 5 and set(man["outputs"]) == {str(work / "dataset.gait"), str(work / "base.gait")}
    assert len(man["manifest_hash"]) == 32


def test_missing_input_exit_3(tmp_path):
    assert main(["loocv", "--seed", "1", "--out", str(tmp_path), "--data", str(tmp_path / "nope.gait")]) == 3
    assert main(["eval", "--out", str(tmp_path)]) == 3


def test_bad_magic_exit_4(work, tmp_path):
    bad = tmp_path / "bad.gait"
    bad.write_bytes(b"NOPE" + bytes(64))
    assert main(["loocv", "--seed", "1", "--out", str(tmp_path), "--data", str(bad), "--weights-dir", str(work)]) == 4
    (tmp_path / "base_cop.sfw").write_bytes(b"JUNK" + bytes(64))
    (tmp_path / "base_toi.sfw").write_bytes((work / "base_toi.sfw").read_bytes())
    assert main(["livesim", "--seed", "1", "--out", str(tmp_path), "--duration-s", "0.1"]) == 4


def test_task_mismatch_exit_5(work, tmp_path):
    code = main(["livesim", "--seed", "1", "--out", str(tmp_path), "--duration-s", "0.1", "--repeats", "1",
                 "--cop-weights", str(work / "base_toi.sfw"), "--toi-weights", str(work / "base_toi.sfw")])
    assert code == 5


def test_unknown_subject_exit_2(work, tmp_path):
    assert main(["finetune", "--seed", "1", "--out", str(tmp_path), "--data", str(work / "dataset.gait"),
                 "--weights-dir", str(work), "--subject", "99"]) == 2


def test_finetune_writes_weights(work, tmp_path):
    assert main(["finetune", "--seed", "1", "--out", str(tmp_path), "--data", str(work / "dataset.gait"),
                 "--weights-dir", str(work), "--subject", "1", "--task", "toi", "--epochs", "2"]) == 0
    assert (tmp_path / "ft_toi_s1.sfw").is_file()


def loocv_args(work, out):
    return ["loocv", "--seed", "2", "--out", str(out), "--data", str(work / "dataset.gait"),
            "--weights-dir", str(work), "--subjects", "1", "--trials", "2", "--epochs", "3"]


def test_loocv_rows_and_rerun(work, tmp_path):
    assert main(loocv_args(work, tmp_path / "a")) == 0
    assert main(loocv_args(work, tmp_path / "b")) == 0
    recs = read_records(tmp_path / "a" / "records.csv")
    assert len(recs) == 2 * 2 * 15  # two trials, two tasks, fifteen horizons
    assert {r.subject for r in recs} == {1}
    for name in ("records.csv", "baseline_records.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ha = json.loads((tmp_path / "a" / "loocv.manifest.json").read_text())["manifest_hash"]
    hb = json.loads((tmp_path / "b" / "loocv.manifest.json").read_text())["manifest_hash"]
    assert ha == hb  # the output directory is not part of the hashed configuration


def test_downstream_commands(work, tmp_path):
    assert main(loocv_args(work, tmp_path)) == 0
    assert main(["eval", "--out", str(tmp_path), "--bootstrap", "50"]) == 0
    assert main(["plots", "--out", str(tmp_path)]) == 0
    for name in ("eval.csv", "residuals.csv", "regressions.csv", "cop_mae_fh.svg", "toi_mean_ftoi.svg"):
        assert (tmp_path / name).is_file()


def test_lmm_command(work, tmp_path):
    # Two subjects are the fewest that give the random effects something to estimate.
    assert main(["loocv", "--seed", "2", "--out", str(tmp_path), "--data", str(work / "dataset.gait"),
                 "--weights-dir", str(work), "--trials", "3", "--epochs", "2", "--task", "toi"]) == 0
    assert main(["lmm", "--out", str(tmp_path)]) == 0
    head = (tmp_path / "lmm_report.csv").read_text().splitlines()[0]
    assert "term" in head


def test_livesim_command(work, tmp_path, capsys):
    assert main(["livesim", "--seed", "1", "--out", str(tmp_path),
                 "--cop-weights", str(work / "base_cop.sfw"), "--toi-weights", str(work / "base_toi.sfw"),
                 "--duration-s", "0.5", "--repeats", "2"]) == 0
    reps = json.loads((tmp_path / "livesim.json").read_text())
    assert len(reps) == 2 and all(r["frames_emitted"] == 30 for r in reps)
    assert "mean" in capsys.readouterr().out
