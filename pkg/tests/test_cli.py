import json

import pytest

from bwseg import cli

SUBCOMMANDS = ["phantom", "preprocess", "boundary", "augment-preview", "train", "segment", "evaluate",
               "consistency", "hyperoxia"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([sub, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def _err(err):
    lines = err.strip().splitlines()
    return json.loads(lines[-1])


def test_unknown_flag_is_usage_error(capsys):
    code, out, err = run(["boundary", "--label", "x", "--out", "y", "--frobnicate"], capsys)
    assert code == cli.EXIT_USAGE and out == ""
    assert _err(err)["error"] == "usage"
    assert run(["nosuch"], capsys)[0] == cli.EXIT_USAGE


def test_missing_file(tmp_path, capsys):
    code, _, err = run(["boundary", "--label", str(tmp_path / "none.raw"), "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_MISSING and _err(err)["exit_code"] == 3
    assert not (tmp_path / "o").exists()


def test_schema_violation(tmp_path, capsys):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"phantom": {"T": "many"}}))
    code, _, err = run(["phantom", "--config", str(p), "--out", str(tmp_path / "d")], capsys)
    assert code == cli.EXIT_CONFIG and "phantom/T" in _err(err)["message"]
    p.write_text("{not json")
    assert run(["phantom", "--config", str(p), "--out", str(tmp_path / "d")], capsys)[0] == cli.EXIT_CONFIG
    p.write_text(json.dumps({"phantom": {"dims": [16, 16, 16]}}))  # valid schema, shape does not fit
    assert run(["phantom", "--config", str(p), "--out", str(tmp_path / "d")], capsys)[0] == cli.EXIT_CONFIG


def test_data_error(tmp_path, capsys):
    bad = tmp_path / "y.raw"
    bad.write_bytes(b"garbage" * 10)
    code, _, err = run(["boundary", "--label", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_DATA and _err(err)["error"] == "data"


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    (d / "p.json").write_text(json.dumps({"n_subjects": 5, "phantom": {"T": 8, "phase_bounds": [3, 8]},
                                          "variation": {"max_labels": 2}}))
    assert cli.main(["phantom", "--config", str(d / "p.json"), "--out", str(d / "data")]) == 0
    return d


def test_train_missing_val_writes_nothing(small_dataset, tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"train": [str(small_dataset / "data" / "subj000")],
                               "val": [str(small_dataset / "data" / "missing")], "epochs": 1}))
    code, _, err = run(["train", "--config", str(cfg), "--out", str(tmp_path / "m")], capsys)
    assert code == cli.EXIT_CONFIG and "val" in _err(err)["message"]
    assert not (tmp_path / "m").exists()


def test_boundary_outputs(small_dataset, tmp_path, capsys):
    from bwseg.fileio import read_label, read_volume

    listing = json.loads((small_dataset / "data" / "dataset.json").read_text())
    subj = (small_dataset / "data" / listing["train"][0]).parent
    label = sorted((subj / "labels").glob("*.raw"))[0]
    code, out, _ = run(["boundary", "--label", str(label), "--out", str(tmp_path / "b"), "-K", "5"], capsys)
    assert code == 0 and json.loads(out)["K"] == 5
    w = read_volume(tmp_path / "b" / "weights.raw")
    assert set(w.data.ravel().tolist()) <= {0.0, 1.0, 40.0}
    assert read_label(tmp_path / "b" / "band.raw").count() == json.loads(out)["band_voxels"]
