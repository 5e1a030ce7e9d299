import csv
import json

import numpy as np
import pytest
import yaml

from advmask import cli
from advmask.data import load_image, save_dataset, save_image
from advmask.masks import MaskTexture, white_mask
from advmask.optimizer import read_history_csv
from advmask.synthetic import synthetic_dataset


def run(tmp_path, command, config, out, capsys=None, **flags):
    path = tmp_path / f"{command}-{out}.yaml"
    path.write_text(yaml.safe_dump(config))
    argv = [command, "--config", str(path), "--out", str(tmp_path / out)]
    for k, v in flags.items():
        argv += [f"--{k}", str(v)]
    return cli.main(argv)


SMALL = {"seed": 1, "dataset": {"synthetic": {"identities": 4, "images": 3, "seed": 2}},
         "gallery": {"images_per_identity": 2}, "optimizer": {"max_iterations": 2, "batch_size": 4}}


def test_train_zero_iterations_is_white(tmp_path):
    cfg = dict(SMALL, optimizer={"max_iterations": 0})
    assert run(tmp_path, "train", cfg, "t0") == 0
    mask = MaskTexture.load(tmp_path / "t0" / "mask.png")
    assert np.array_equal(mask.pixels, white_mask().pixels)
    for name in ("mask.png", "mask.meta.json", "history.csv", "config.snapshot.yaml"):
        assert (tmp_path / "t0" / name).exists()


def test_train_deterministic_bytes(tmp_path):
    assert run(tmp_path, "train", SMALL, "a") == 0
    assert run(tmp_path, "train", SMALL, "b") == 0
    for name in ("mask.png", "mask.support.png", "mask.meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    strip = lambda p: [(r["iteration"], r["sim_loss"], r["total_loss"]) for r in csv.DictReader(open(p))]
    assert strip(tmp_path / "a" / "history.csv") == strip(tmp_path / "b" / "history.csv")


def test_seed_flag_overrides(tmp_path):
    assert run(tmp_path, "train", SMALL, "s", seed=5) == 0
    assert json.loads((tmp_path / "s" / "mask.meta.json").read_text())["seed"] == 5


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    cfg = dict(SMALL, eval={"checkpoint": str(tmp_path / "nowhere"), "conditions": ["adv"]})
    assert run(tmp_path, "eval", cfg, "e") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert str(tmp_path / "nowhere") in err["path"] and "nowhere" in err["message"]


def test_internal_error_exit_1(tmp_path, monkeypatch, capsys):
    def boom(ctx):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.HANDLERS, "report", boom)
    assert run(tmp_path, "report", SMALL, "r") == 1
    assert json.loads(capsys.readouterr().err.strip())["message"] == "kaput"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = dict(SMALL, models={"names": ["toy", "toy-a", "toy-b"]})
    assert run(tmp, "train", cfg, "ckpt") == 0
    return tmp / "ckpt"


def test_eval_outputs_and_snapshot_rerun(tmp_path, trained):
    cfg = dict(SMALL, eval={"checkpoint": str(trained), "conditions": ["clean", "blue", "random", "adv"]})
    assert run(tmp_path, "eval", cfg, "ev") == 0
    out = tmp_path / "ev"
    for name in ("report.csv", "summary.json", "similarity_boxplot.png", "config.snapshot.yaml"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["means"]["toy"]) == {"clean", "blue", "random", "adv"}
    again = cli.main(["eval", "--config", str(out / "config.snapshot.yaml"), "--out", str(tmp_path / "ev2")])
    assert again == 0
    assert (out / "report.csv").read_bytes() == (tmp_path / "ev2" / "report.csv").read_bytes()


def test_transfer_single_cell_equals_eval(tmp_path, trained):
    cfg = dict(SMALL, eval={"checkpoint": str(trained), "conditions": ["adv"]},
               transfer={"masks": {"uni": {"path": str(trained)}}, "controls": []})
    assert run(tmp_path, "eval", cfg, "ev") == 0
    assert run(tmp_path, "transfer", cfg, "tr") == 0
    matrix = json.loads((tmp_path / "tr" / "summary.json").read_text())
    evals = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert matrix["values"] == [[evals["means"]["toy"]["adv"]]]
    assert (tmp_path / "tr" / "transfer_heatmap.png").exists()


def test_three_model_transfer_matches_independent_evals(tmp_path, trained):
    names = ["toy", "toy-a", "toy-b"]
    cfg = dict(SMALL, models={"names": names}, transfer={"masks": {"uni": str(trained)}, "controls": []})
    assert run(tmp_path, "transfer", cfg, "tr") == 0
    values = json.loads((tmp_path / "tr" / "summary.json").read_text())["values"][0]
    for name, value in zip(names, values):
        single = dict(SMALL, models={"names": [name]}, eval={"checkpoint": str(trained), "conditions": ["adv"]})
        assert run(tmp_path, "eval", single, f"ev-{name}") == 0
        mean = json.loads((tmp_path / f"ev-{name}" / "summary.json").read_text())["means"][name]["adv"]
        assert value == mean


def test_calibrate_from_scores(tmp_path):
    scores = tmp_path / "impostors.txt"
    scores.write_text("\n".join(f"{i / 100:.2f}" for i in range(100)))
    assert run(tmp_path, "calibrate", {"calibrate": {"scores": str(scores)}}, "cal") == 0
    assert json.loads((tmp_path / "cal" / "threshold.json").read_text())["threshold"] == 0.99


def test_calibrate_from_images(tmp_path):
    assert run(tmp_path, "calibrate", SMALL, "cal") == 0
    payload = json.loads((tmp_path / "cal" / "threshold.json").read_text())
    assert -1 <= payload["threshold"] <= 1 and payload["impostor_pairs"]["toy"] > 0


@pytest.fixture
def enrolled(tmp_path):
    faces = synthetic_dataset(4, 1, seed=8)
    save_dataset(tmp_path / "data", faces)
    return faces


def _frames(folder, images):
    for i, image in enumerate(images):
        save_image(folder / f"{i:03d}.png", image)


def test_simulate_enrolled_threshold_zero(tmp_path, enrolled):
    _frames(tmp_path / "frames", [enrolled[0].image] * 5)
    cfg = {"dataset": {"root": str(tmp_path / "data")}, "gallery": {"mode": "plain"},
           "simulate": {"threshold": 0.0, "streams": [{"frames": str(tmp_path / "frames"), "identity": "id000"}]}}
    assert run(tmp_path, "simulate", cfg, "sim") == 0
    summary = json.loads((tmp_path / "sim" / "summary.json").read_text())
    assert summary["streams"][0]["recognition_rate"] == 1.0
    assert len(list(csv.DictReader(open(tmp_path / "sim" / "events.csv")))) == 5


def test_simulate_seven_of_ten(tmp_path, enrolled):
    _frames(tmp_path / "frames", [enrolled[0].image] * 7 + [enrolled[1].image] * 3)
    cfg = {"dataset": {"root": str(tmp_path / "data")}, "gallery": {"mode": "plain"},
           "simulate": {"threshold": 0.5, "streams": [{"frames": str(tmp_path / "frames"), "identity": "id000"}]}}
    assert run(tmp_path, "simulate", cfg, "sim") == 0
    stream = json.loads((tmp_path / "sim" / "summary.json").read_text())["streams"][0]
    assert stream["recognized"] == 7 and stream["identified"] is True


def test_simulate_missing_threshold_file(tmp_path, enrolled):
    cfg = {"dataset": {"root": str(tmp_path / "data")},
           "simulate": {"threshold_file": str(tmp_path / "none.json"), "streams": [{"frames": "x", "identity": "a"}]}}
    assert run(tmp_path, "simulate", cfg, "sim") == 2


def test_defend_empty_input(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    assert run(tmp_path, "defend", {"defend": {"input": str(tmp_path / "empty")}}, "d") == 0
    assert (tmp_path / "d" / "manifest.csv").read_text().strip() == "source_path,output_path,mask_name,identity,seed"
    assert any("no images" in r.message for r in caplog.records)


def test_defend_substitute_and_adv_training(tmp_path, enrolled, trained):
    assert run(tmp_path, "defend", {"defend": {"input": str(tmp_path / "data")}}, "sub") == 0
    rows = list(csv.DictReader(open(tmp_path / "sub" / "manifest.csv")))
    assert len(rows) == 4
    for row in rows:
        assert (tmp_path / "sub" / "sanitized" / row["identity"]).is_dir()
        assert load_image(row["output_path"]).shape == (112, 112, 3)
    cfg = {"defend": {"mode": "adv_training", "input": str(tmp_path / "data"),
                      "masks": {"universal": str(trained), "second": str(trained)}}}
    assert run(tmp_path, "defend", cfg, "adv") == 0
    rows = list(csv.DictReader(open(tmp_path / "adv" / "manifest.csv")))
    assert len(rows) == 4 * (1 + 2)


def test_report_regenerates_plots(tmp_path, trained):
    cfg = dict(SMALL, eval={"checkpoint": str(trained), "conditions": ["clean", "adv"]})
    assert run(tmp_path, "eval", cfg, "ev") == 0
    (tmp_path / "ev" / "similarity_boxplot.png").unlink()
    assert run(tmp_path, "report", {"report": {"input": str(tmp_path / "ev")}}, "ev") == 0
    assert (tmp_path / "ev" / "similarity_boxplot.png").exists()


def test_synth_command(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--identities", "2", "--images", "2"]) == 0
    assert len(list((tmp_path / "s").glob("*/*.png"))) == 4


def test_workers_flag(tmp_path):
    assert run(tmp_path, "calibrate", SMALL, "w", workers=2) == 0


def test_train_toy_200_iterations_improves(tmp_path):
    cfg = {"seed": 7, "dataset": {"synthetic": {"identities": 20, "images": 5, "seed": 7}},
           "optimizer": {"max_iterations": 200}}
    assert run(tmp_path, "train", cfg, "t") == 0
    rows = read_history_csv(tmp_path / "t" / "history.csv")
    assert len(rows) == 200 and rows[-1].sim_loss < rows[0].sim_loss
