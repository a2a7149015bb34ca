import csv
import hashlib
import json

import pytest

from boicr.cli import main
from boicr.data import dumps_detections, load_dataset
from boicr.geometry import Detection


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--classes", "3", "--train", "8", "--test", "4", "--seed", "1", "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_writes_files_and_manifest(self, dataset):
        for name in ("train.jsonl", "test.jsonl", "scene.json", "manifest.json"):
            assert (dataset / name).is_file()
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["outputs"] == ["train.jsonl", "test.jsonl", "scene.json"]
        assert manifest["dataset_fingerprint"] == _sha(dataset / "train.jsonl")
        assert len(load_dataset(dataset / "train.jsonl")[0]) == 8

    def test_rerun_is_identical(self, dataset, tmp_path):
        assert main(["gen-data", "--classes", "3", "--train", "8", "--test", "4", "--seed", "1",
                     "--out", str(tmp_path)]) == 0
        for name in ("train.jsonl", "test.jsonl", "manifest.json"):
            assert _sha(tmp_path / name) == _sha(dataset / name)

    def test_missing_out_is_usage_error(self, monkeypatch, capsys):
        monkeypatch.delenv("BOICR_OUT_DIR", raising=False)
        with pytest.raises(SystemExit) as exc:
            main(["gen-data"])
        assert exc.value.code == 2
        assert "--out" in capsys.readouterr().err

    def test_env_var_supplies_out(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BOICR_OUT_DIR", str(tmp_path / "env"))
        assert main(["gen-data", "--classes", "2", "--train", "2", "--test", "1"]) == 0
        assert (tmp_path / "env" / "train.jsonl").is_file()

    def test_bad_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--classes", "many", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestTrainEval:
    def test_zero_steps_checkpoint_is_initialisation(self, dataset, tmp_path):
        from boicr.trainer import Checkpoint

        assert main(["train", "--data", str(dataset / "train.jsonl"), "--steps", "0", "--out", str(tmp_path)]) == 0
        ckpt = Checkpoint.load(tmp_path / "checkpoint.json")
        init = ckpt.config.build_model().state()
        for name, value in init.items():
            assert (ckpt.params[name] == value).all()
        assert (tmp_path / "loss_log.csv").read_text().count("\n") == 1

    def test_flags_reach_the_config(self, dataset, tmp_path):
        from boicr.trainer import Checkpoint

        assert main(["train", "--data", str(dataset / "train.jsonl"), "--steps", "3", "--k", "2",
                     "--lambda", "fixed:0.5", "--ignore", "off", "--distill", "off", "--lb", "50",
                     "--lambda-max", "0.6", "--seed", "4", "--lr-schedule", "0:0.02,2:0.002",
                     "--out", str(tmp_path)]) == 0
        cfg = Checkpoint.load(tmp_path / "checkpoint.json").config
        assert (cfg.num_agents, cfg.lambda_mode, cfg.fixed_lambda) == (2, "fixed", 0.5)
        assert (cfg.ignore, cfg.distillation, cfg.l_b, cfg.lambda_max, cfg.seed) == (False, False, 50.0, 0.6, 4)
        assert cfg.lr_schedule == [(0, 0.02), (2, 0.002)]
        header = (tmp_path / "loss_log.csv").read_text().splitlines()[0]
        assert header == "step,lambda,lambda_ign,lr,L_class,L_agent_1,L_agent_2,L_distill,L_total"

    @pytest.mark.parametrize("flag, value", [("--lambda", "sometimes"), ("--ignore", "yes"),
                                             ("--lr-schedule", "0-0.1")])
    def test_bad_train_flags(self, dataset, tmp_path, flag, value):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(dataset / "train.jsonl"), flag, value, "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_train_then_eval_is_deterministic(self, dataset, tmp_path):
        run = tmp_path / "run"
        args = ["train", "--data", str(dataset / "train.jsonl"), "--steps", "6", "--seed", "3", "--out", str(run)]
        assert main(args) == 0
        first = _sha(run / "checkpoint.json"), _sha(run / "loss_log.csv")
        assert main(args) == 0
        assert (_sha(run / "checkpoint.json"), _sha(run / "loss_log.csv")) == first
        ckpt = json.loads((run / "checkpoint.json").read_text())
        assert ckpt["manifest"]["manifest"] == "manifest.json"

        reports = []
        for name in ("e1", "e2"):
            assert main(["eval", "--data", str(dataset / "test.jsonl"), "--checkpoint", str(run / "checkpoint.json"),
                         "--out", str(tmp_path / name)]) == 0
            reports.append(_sha(tmp_path / name / "report.csv"))
        assert reports[0] == reports[1]
        rows = list(csv.reader((tmp_path / "e1" / "report.csv").open()))
        assert rows[0] == ["class", "ap", "corloc", "tp", "fp", "gt"] and rows[-1][0] == "mean"

    def test_oracle_detections_score_perfectly(self, dataset, tmp_path):
        samples, _ = load_dataset(dataset / "test.jsonl")
        dets = dumps_detections((s.image_id, [Detection(b, c, 1.0) for c, b in s.gt]) for s in samples)
        (tmp_path / "oracle.jsonl").write_text(dets)
        assert main(["eval", "--data", str(dataset / "test.jsonl"), "--detections", str(tmp_path / "oracle.jsonl"),
                     "--out", str(tmp_path / "r")]) == 0
        mean = (tmp_path / "r" / "report.csv").read_text().splitlines()[-1].split(",")
        assert mean[1] == "1.0" and mean[2] == "1.0"

    def test_empty_test_set(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text('{"feature_dim": 2, "format": "boicr-dataset", "num_classes": 2, "version": 1}\n')
        (tmp_path / "none.jsonl").write_text("")
        assert main(["eval", "--data", str(empty), "--detections", str(tmp_path / "none.jsonl"),
                     "--out", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "report.csv").read_text().splitlines()[-1] == "mean,,,0,0,0"

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        code = main(["eval", "--data", str(dataset / "test.jsonl"), "--checkpoint", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)])
        assert code == 1
        assert "checkpoint not found" in capsys.readouterr().err

    def test_malformed_dataset(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"feature_dim": 2, "format": "boicr-dataset", "num_classes": 2, "version": 1}\n{"x": 1}\n')
        assert main(["train", "--data", str(bad), "--out", str(tmp_path)]) == 1
        assert "line 2" in capsys.readouterr().err


def test_ablate_smoke(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), "--seeds", "1", "--steps", "10", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [int(r["id"]) for r in rows] == [1, 2, 3, 4, 5]
    assert [(r["K"], r["lambda"], r["lambda_ign"], r["distillation"]) for r in rows] == [
        ("3", "0.5", "0", "No"), ("3", "adaptive", "0", "No"), ("3", "adaptive", "adaptive", "No"),
        ("3", "adaptive", "adaptive", "Yes"), ("4", "adaptive", "adaptive", "No")]
    for r in rows:
        for key in ("mAP", "CorLoc", "CorLoc_train"):
            assert 0.0 <= float(r[key]) <= 1.0


class TestScheduleDump:
    def test_rows(self, tmp_path):
        assert main(["schedule-dump", "--steps", "60000", "--every", "100", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "schedule.csv").open()))
        assert float(rows[0]["lambda"]) == 0.0 and float(rows[0]["lambda_ign"]) == 0.51
        assert float(rows[-1]["lambda"]) == 0.5 and rows[-1]["step"] == "60000"
        row900 = next(r for r in rows if r["step"] == "900")
        assert float(row900["lambda"]) == pytest.approx(0.17992896226062675, abs=1e-15)
        lams = [float(r["lambda"]) for r in rows]
        assert all(b > a for a, b in zip(lams, lams[1:]))

    def test_stdout(self, capsys, monkeypatch):
        monkeypatch.delenv("BOICR_OUT_DIR", raising=False)
        assert main(["schedule-dump", "--steps", "4"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "step,lambda,lambda_ign" and len(lines) == 6
