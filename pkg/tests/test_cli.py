import pytest

from rationale_distill.checkpoint import read_keyvalue
from rationale_distill.cli import build_parser, main

COMMANDS = {"gen-data", "train-teacher", "train-student", "train-vanilla", "eval", "grid", "report"}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "d"), "--n-train", "40", "--n-dev", "16", "--n-test", "16",
                 "--n-facts", "8", "--attributes-per-subject", "2"]) == 0
    assert main(["train-teacher", "--data", str(root / "d"), "--out", str(root / "t"), "--epochs", "1"]) == 0
    return root


def last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def test_all_commands_exist():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == COMMANDS


def test_teacher_run_files(work):
    meta = read_keyvalue(work / "t" / "run.txt")
    assert meta["method"] == "knife_teacher" and meta["teacher_bottleneck"] == "True"
    assert (work / "t" / "metrics.csv").read_text().startswith("# run_id=")


def test_student_and_eval_agree(work, capsys):
    assert main(["train-student", "--data", str(work / "d"), "--teacher", str(work / "t"), "--out",
                 str(work / "s"), "--epochs", "1", "--variant", "in"]) == 0
    trained = last_line(capsys)
    assert main(["eval", "--data", str(work / "d"), "--model", str(work / "s")]) == 0
    assert last_line(capsys) == trained.split()[-1]
    header = (work / "s" / "metrics.csv").read_text().splitlines()[0]
    assert "lambda_task=0.0 lambda_kd_in=1.0 lambda_kd_out=0.0 bottleneck=True" in header


def test_vanilla_ir_o_is_evaluated_without_rationales(work, capsys):
    assert main(["train-vanilla", "--data", str(work / "d"), "--mode", "IR->O", "--out", str(work / "v"),
                 "--epochs", "1"]) == 0
    trained = last_line(capsys)
    main(["eval", "--data", str(work / "d"), "--model", str(work / "v")])
    assert last_line(capsys) == trained.split()[-1]


def test_config_file_and_flag_precedence(work, tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(f"[data]\ndata = {work / 'd'}\n[hyper]\nepochs = 0\n[grid]\nseeds = 0,1\n")
    assert main(["grid", "--config", str(ini), "--grid", "bottleneck", "--out", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    assert out.index("Student (In)  No") < out.index("Student (In)  Yes") < out.index("Teacher")
    runs = (tmp_path / "g" / "runs.csv").read_text().splitlines()
    assert len(runs) == 1 + 4 * 2
    assert main(["report", str(tmp_path / "g")]) == 0
    assert capsys.readouterr().out == out
    assert main(["train-vanilla", "--config", str(ini), "--epochs", "1"]) == 0


def test_report_exits_nonzero_on_failed_cell(tmp_path, capsys):
    (tmp_path / "runs.csv").write_text("group,name,seed,dev_acc,test_acc,error\n"
                                       "g,a,0,0.5,0.5,\ng,b,0,,,ConfigurationError: nope\n")
    assert main(["report", str(tmp_path / "runs.csv")]) == 1
    assert "FAILED" in capsys.readouterr().out


def test_missing_required_arguments(work):
    with pytest.raises(SystemExit):
        main(["train-student", "--data", str(work / "d")])
    with pytest.raises(SystemExit):
        main(["train-vanilla", "--epochs", "1"])
    with pytest.raises(SystemExit):
        main(["eval", "--data", str(work / "d"), "--model", str(work / "t"), "--bottleneck", "maybe"])
