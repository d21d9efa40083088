import csv
import json

import numpy as np
import pytest

from frucforge import cli
from frucforge.fcdnet import NetConfig, build
from frucforge.video import read_y4m, synth_video, write_y4m


@pytest.fixture()
def src_video(tmp_path):
    video = synth_video(32, 32, 15, 12, "textured-noise",
                        motion="translate:1,0", noise_sigma=2.0, seed=3)
    path = tmp_path / "src.y4m"
    write_y4m(video, path)
    return path


@pytest.fixture()
def checkpoint(tmp_path):
    net = build(NetConfig(crop_size=16, block1_count=1, block1_channels=10,
                          block2_count=1, block2_channels=8,
                          block3_channel_plan=(8, 12), seed=0))
    path = tmp_path / "tiny.fcdw"
    net.save(path)
    return path


def run(argv):
    return cli.main(argv)


class TestForge:
    def test_double_rate_duplication_mask_alternates(self, tmp_path, src_video):
        out = tmp_path / "forged.y4m"
        mask = tmp_path / "mask.csv"
        code = run(["forge", "--in", str(src_video), "--out", str(out),
                    "--scheme", "nni", "--dst-fps", "30", "--mask", str(mask)])
        assert code == 0
        rows = list(csv.DictReader(open(mask)))
        flags = [int(r["forged"]) for r in rows]
        assert flags == [0, 1] * 12
        assert len(read_y4m(out)) == 24

    @pytest.mark.parametrize("scheme,dst,expected", [
        ("nni", "20", 1 / 4), ("bi", "25", 4 / 5), ("mci", "30", 1 / 2)])
    def test_mask_fraction_matches_schedule(self, tmp_path, src_video,
                                            scheme, dst, expected):
        out = tmp_path / "f.y4m"
        mask = tmp_path / "m.csv"
        assert run(["forge", "--in", str(src_video), "--out", str(out),
                    "--scheme", scheme, "--dst-fps", dst, "--mask", str(mask)]) == 0
        flags = [int(r["forged"]) for r in csv.DictReader(open(mask))]
        cycle = {"20": 4, "25": 5, "30": 2}[dst]
        whole = (len(flags) // cycle) * cycle
        assert sum(flags[:whole]) / whole == pytest.approx(expected)

    def test_missing_input_is_data_error(self, tmp_path):
        code = run(["forge", "--in", str(tmp_path / "nope.y4m"),
                    "--out", str(tmp_path / "o.y4m"), "--scheme", "nni",
                    "--dst-fps", "30"])
        assert code == 2

    def test_bad_flag_is_usage_error(self, src_video, capsys):
        assert run(["forge", "--in", str(src_video), "--frobnicate"]) == 1

    def test_reencode_hook_template_validated(self, tmp_path, src_video):
        assert run(["forge", "--in", str(src_video), "--out", str(tmp_path / "o.y4m"),
                    "--scheme", "nni", "--dst-fps", "30",
                    "--reencode-cmd", "cat"]) == 1

    def test_reencode_hook_runs(self, tmp_path, src_video):
        out = tmp_path / "o.y4m"
        assert run(["forge", "--in", str(src_video), "--out", str(out),
                    "--scheme", "nni", "--dst-fps", "30",
                    "--reencode-cmd", "cp {in} {out}"]) == 0
        assert len(read_y4m(out)) == 24


class TestDetect:
    def test_emits_json_lines(self, tmp_path, src_video, checkpoint):
        out = tmp_path / "verdicts.jsonl"
        code = run(["detect", str(src_video), "--checkpoint", str(checkpoint),
                    "--stacks", "3", "--out", str(out)])
        assert code == 0
        (record,) = [json.loads(l) for l in out.read_text().splitlines()]
        assert record["decision"] in ("original", "forged")
        assert len(record["votes"]) == 3
        assert len(record["probs"]) == 3

    def test_short_video_exit_2_names_minimum(self, tmp_path, checkpoint, capsys):
        from conftest import make_video
        short = make_video([np.zeros((16, 16))] * 5)
        path = tmp_path / "short.y4m"
        write_y4m(short, path)
        code = run(["detect", str(path), "--checkpoint", str(checkpoint)])
        assert code == 2
        assert "6" in capsys.readouterr().err

    def test_reproducible_output_bytes(self, tmp_path, src_video, checkpoint):
        outs = []
        for name in ("a.jsonl", "b.jsonl"):
            out = tmp_path / name
            assert run(["detect", str(src_video), "--checkpoint", str(checkpoint),
                        "--seed", "5", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestLocalize:
    def test_csv_and_svg_outputs(self, tmp_path, src_video, checkpoint):
        csv_path = tmp_path / "scores.csv"
        svg_path = tmp_path / "scores.svg"
        code = run(["localize", "--in", str(src_video),
                    "--checkpoint", str(checkpoint),
                    "--out-csv", str(csv_path), "--out-svg", str(svg_path)])
        assert code == 0
        rows = list(csv.DictReader(open(csv_path)))
        assert len(rows) == 12
        svg = svg_path.read_text()
        assert svg.splitlines()[0].startswith("<!--")
        assert "<svg" in svg and "polyline" in svg and "dasharray" in svg

    def test_reproducible_csv_bytes(self, tmp_path, src_video, checkpoint):
        blobs = []
        for name in ("a.csv", "b.csv"):
            path = tmp_path / name
            assert run(["localize", "--in", str(src_video),
                        "--checkpoint", str(checkpoint),
                        "--out-csv", str(path)]) == 0
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]


class TestReport:
    def _write_manifest(self, path, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "prediction"])
            for i, (label, pred) in enumerate(rows):
                writer.writerow([f"v{i}.y4m", label, pred])

    def test_confusion_example(self, tmp_path, capsys):
        manifest = tmp_path / "manifest.csv"
        rows = [(1, 1)] * 9 + [(1, 0)] + [(0, 1)] * 2 + [(0, 0)] * 8
        self._write_manifest(manifest, rows)
        out = tmp_path / "metrics.csv"
        assert run(["report", str(manifest), "--out", str(out)]) == 0
        assert "85.71" in capsys.readouterr().out
        (row,) = list(csv.DictReader(open(out)))
        assert row["f1"] == "85.71"
        assert row["tnr"] == "80.00"

    def test_missing_columns_is_data_error(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("a,b\n1,2\n")
        assert run(["report", str(manifest)]) == 2


class TestConfigAndPipeline:
    def test_config_file_defaults_and_override(self, tmp_path, src_video, checkpoint):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("stacks = 5\nseed = 7  # comment\n")
        out = tmp_path / "v.jsonl"
        assert run(["detect", str(src_video), "--checkpoint", str(checkpoint),
                    "--config", str(cfg), "--out", str(out)]) == 0
        record = json.loads(out.read_text().splitlines()[0])
        assert record["n_stacks"] == 5 and record["seed"] == 7

    def test_unknown_config_key_rejected_with_location(self, tmp_path, src_video,
                                                       checkpoint, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("unknown_thing = 1\n")
        assert run(["detect", str(src_video), "--checkpoint", str(checkpoint),
                    "--config", str(cfg)]) == 1
        assert "run.cfg:1" in capsys.readouterr().err

    def test_dataset_then_train_smoke(self, tmp_path):
        data = tmp_path / "data"
        assert run(["dataset", "--videos", "4", "--crop", "32", "--out", str(data),
                    "--seed", "1"]) == 0
        caches = list(data.glob("*.fcds"))
        assert len(caches) == 1
        rundir = tmp_path / "run"
        assert run(["train", str(caches[0]), "--epochs", "1", "--batch", "4",
                    "--out", str(rundir)]) == 0
        assert (rundir / "model.fcdw").exists()
        assert (rundir / "training.csv").exists()
        manifest = (rundir / "run-manifest.txt").read_text()
        assert "crop_size=32" in manifest
