import numpy as np
import pytest

from aikd.cli import main
from aikd.data import load_manifest, quality_scores_csv

SYNTH = ["--n-identities", "3", "--images-per-identity", "20", "--image-size", "48"]


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "4", *SYNTH, "--out", str(root / "train")]) == 0
    assert main(["synth", "--seed", "4", *SYNTH, "--split", "test", "--out", str(root / "test")]) == 0
    (root / "run.cfg").write_text(
        f"# distillation run\nmanifest = {root / 'train' / 'manifest.csv'}\n"
        f"identities = {root / 'train' / 'truth.csv'}\nepochs = 3\nprefit_epochs = 2\nbatch_size = 16\n")
    assert main(["distill", "--config", str(root / "run.cfg"), "--seed", "4", "--out", str(root / "run")]) == 0
    return root


def _eval_args(ws, out, *extra):
    return ["evaluate", "--manifest", str(ws / "test" / "manifest.csv"), "--pairs", str(ws / "test" / "pairs.csv"),
            "--checkpoint", str(ws / "run" / "student_final.aikd"),
            "--fr-checkpoint", str(ws / "run" / "teacher.aikd"), "--fmr", "0.05", "--seed", "4",
            "--out", str(out), *extra]


def test_synth_outputs(workspace):
    files = _files(workspace / "train")
    assert sum(k.startswith("images/") for k in files) == 60
    assert {"manifest.csv", "pairs.csv", "truth.csv"} <= set(files)


def test_synth_deterministic(workspace, tmp_path):
    assert main(["synth", "--seed", "4", *SYNTH, "--out", str(tmp_path / "again")]) == 0
    assert _files(tmp_path / "again") == _files(workspace / "train")


def test_synth_config_error_exit_2(tmp_path, capsys):
    assert main(["synth", "--n-identities", "1", "--out", str(tmp_path)]) == 2
    assert main(["synth", "--sigma-min", "3", "--sigma-max", "1", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_distill_outputs(workspace):
    files = _files(workspace / "run")
    assert set(files) == {"teacher.aikd", "student_final.aikd", "student_swa.aikd", "epoch_stats.csv"}
    rows = files["epoch_stats.csv"].decode().strip().splitlines()
    assert rows[0] == "epoch,mean_cos,mean_l1,mean_obj,skipped"
    assert len(rows) - 1 == 3


def test_distill_rerun_is_byte_identical(workspace, tmp_path):
    assert main(["distill", "--config", str(workspace / "run.cfg"), "--seed", "4", "--out", str(tmp_path)]) == 0
    assert _files(tmp_path) == _files(workspace / "run")


def test_flags_override_config(workspace, tmp_path):
    assert main(["distill", "--config", str(workspace / "run.cfg"), "--epochs", "1", "--seed", "4",
                 "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "epoch_stats.csv").read_text().strip().splitlines()) == 2


def test_distill_user_errors(workspace, tmp_path):
    assert main(["distill", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    m = load_manifest(workspace / "train" / "manifest.csv")
    path = workspace / "train" / "unlabeled.csv"
    text = m.to_csv().splitlines()
    path.write_text("\n".join([text[0]] + [",".join(r.split(",")[:-1] + [""]) for r in text[1:]]) + "\n")
    assert main(["distill", "--manifest", str(path), "--prefit-epochs", "0", "--out", str(tmp_path)]) == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("no_such_option = 1\n")
    assert main(["distill", "--config", str(bad_cfg), "--out", str(tmp_path)]) == 2
    assert main(["distill", "--not-a-flag"]) == 2


def test_evaluate_modes(workspace, tmp_path):
    out = tmp_path / "e"
    args = _eval_args(workspace, out, "--quality", "model", "--quality", "oracle",
                      "--alignment", "proper", "--alignment", "perturbed:3", "--alignment", "perturbed:0")
    assert main(args) == 0
    files = _files(out)
    assert files["summary_model_proper.csv"] == files["summary_model_perturbed0.csv"]
    assert files["edc_model_proper.csv"] == files["edc_model_perturbed0.csv"]
    assert files["summary_model_proper.csv"] != files["summary_model_perturbed3.csv"]
    norm = float(files["summary_oracle_proper.csv"].decode().splitlines()[1].split(",")[1])
    assert norm < 1
    # rerun reproduces every file
    rerun = _eval_args(workspace, tmp_path / "e2", *args[len(_eval_args(workspace, out)):])
    assert main(rerun) == 0
    assert _files(tmp_path / "e2") == files


def test_evaluate_missing_score_names_image(workspace, tmp_path, capsys):
    m = load_manifest(workspace / "test" / "manifest.csv")
    csv = tmp_path / "q.csv"
    csv.write_text("\n".join(quality_scores_csv(m, np.zeros(len(m))).splitlines()[:-1]) + "\n")
    assert main(_eval_args(workspace, tmp_path / "o", "--quality", str(csv))) == 2
    assert m.records[-1].image_path in capsys.readouterr().err


def test_evaluate_external_quality_and_compare(workspace, tmp_path):
    m = load_manifest(workspace / "test" / "manifest.csv")
    gen = np.random.default_rng(0)
    (tmp_path / "rnd.csv").write_text(quality_scores_csv(m, gen.uniform(size=len(m))))
    (tmp_path / "gt.csv").write_text(quality_scores_csv(m, m.qualities))
    assert main(_eval_args(workspace, tmp_path / "e", "--quality", f"rnd={tmp_path / 'rnd.csv'}")) == 0
    assert (tmp_path / "e" / "summary_rnd_proper.csv").exists()
    args = ["compare", "--manifest", str(workspace / "test" / "manifest.csv"),
            "--pairs", str(workspace / "test" / "pairs.csv"), "--fr-checkpoint", str(workspace / "run" / "teacher.aikd"),
            "--fmr", "0.05", "--out", str(tmp_path / "c"), f"rnd={tmp_path / 'rnd.csv'}", f"gt={tmp_path / 'gt.csv'}",
            f"gt2={tmp_path / 'gt.csv'}"]
    assert main(args) == 0
    rows = (tmp_path / "c" / "comparison_proper.csv").read_text().strip().splitlines()
    assert rows[0].startswith("rank,method")
    names = [r.split(",")[1] for r in rows[1:]]
    assert names.index("gt") + 1 == names.index("gt2")


def test_grad_check_command(capsys):
    assert main(["grad-check", "--draws", "5", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("max_rel_err") == 5 and "PASS" in out
    assert main(["grad-check", "--draws", "5", "--seed", "2", "--inject-bug"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_plot_is_deterministic(workspace, tmp_path):
    out = tmp_path / "e"
    assert main(_eval_args(workspace, out, "--quality", "oracle")) == 0
    for d in ("p1", "p2"):
        assert main(["plot", str(out / "edc_oracle_proper.csv"), "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / "p1" / "edc.svg").read_bytes(), (tmp_path / "p2" / "edc.svg").read_bytes()
    assert a == b and a.lstrip().startswith(b"<?xml")


def test_output_env_var(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("AIKD_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["synth", "--seed", "1", "--n-identities", "2", "--images-per-identity", "2",
                 "--image-size", "32"]) == 0
    assert (tmp_path / "env" / "manifest.csv").exists()


def test_inputs_not_mutated(workspace, tmp_path):
    before = _files(workspace / "test")
    assert main(_eval_args(workspace, tmp_path / "e", "--alignment", "perturbed:3")) == 0
    assert _files(workspace / "test") == before
