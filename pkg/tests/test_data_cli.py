import json
import subprocess
import sys

import numpy as np
import pytest

from streamdp.central import CentralPosterior
from streamdp.cli import main
from streamdp.data import DatasetFormatError, generate, read_dataset, read_labels, write_dataset, write_labels
from streamdp.engine import TIMING_FIELDS, held_out_ll
from streamdp.expfam import ConventionalNiw


def test_dataset_round_trip_is_byte_identical(tmp_path):
    x = np.random.default_rng(0).normal(size=(17, 3)) * 1e3
    x[0, 0] = 0.1
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_dataset(p1, x)
    back = read_dataset(p1)
    np.testing.assert_array_equal(back, x)
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("text", ["", "d,2\n", "d,2\nn,2\n1.0,2.0\n", "d,2\nn,1\n1.0\n", "x,2\nn,0\n",
                                  "d,1\nn,1\nabc\n", "d,1\nn,1\nnan\n"])
def test_malformed_datasets_rejected(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DatasetFormatError):
        read_dataset(p)


def test_labels_round_trip(tmp_path):
    write_labels(tmp_path / "l.csv", [3, 0, 1])
    assert read_labels(tmp_path / "l.csv").tolist() == [3, 0, 1]


def test_generate_single_row(niw2_prior):
    train, test = generate(1, 2, 1, niw2_prior, seed=0)
    assert train.x.shape == (1, 2) and test is None


def test_generate_full_size_dataset(niw2_prior):
    train, test = generate(100_000, 2, 100, niw2_prior, seed=0, n_test=1000)
    assert train.x.shape == (100_000, 2) and test.x.shape == (1000, 2)
    assert len(np.unique(train.labels)) == 100


def test_generated_sample_mean_matches_component(niw2_prior):
    train, _ = generate(100_000, 2, 1, niw2_prior, seed=1)
    mean, cov = train.means[0], train.covs[0]
    se = np.sqrt(np.diag(cov) / len(train.x))
    assert np.all(np.abs(train.x.mean(0) - mean) <= 3 * se)
    np.testing.assert_allclose(np.cov(train.x.T), cov, rtol=0.05)


def test_generate_rejects_bad_arguments(niw2_prior):
    with pytest.raises(ValueError):
        generate(0, 2, 1, niw2_prior)
    with pytest.raises(ValueError):
        generate(10, 3, 1, niw2_prior)


# ---------------------------------------------------------------------------
# command line

@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["generate", "--n", "600", "--d", "2", "--clusters", "5", "--n-test", "100", "--seed", "2",
                 "--out-dir", str(out)]) == 0
    return out


def test_generate_writes_files(dataset_dir):
    for name in ("train.csv", "test.csv", "train_labels.csv", "test_labels.csv", "truth.json"):
        assert (dataset_dir / name).exists()
    assert read_dataset(dataset_dir / "train.csv").shape == (600, 2)


def _run(dataset_dir, out, *extra):
    return main(["run", "--train", str(dataset_dir / "train.csv"), "--test", str(dataset_dir / "test.csv"),
                 "--out-dir", str(out), *extra])


def test_run_writes_outputs_and_eval_matches(dataset_dir, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(dataset_dir, out, "--workers", "2", "--seed", "5", "--backend", "thread") == 0
    for name in ("trace.jsonl", "summary.csv", "posterior.json"):
        assert (out / name).exists()
    capsys.readouterr()
    assert main(["eval", "--posterior", str(out / "posterior.json"), "--test", str(dataset_dir / "test.csv")]) == 0
    printed = float(capsys.readouterr().out.strip())
    central = CentralPosterior.load(out / "posterior.json")
    assert printed == pytest.approx(held_out_ll(central, read_dataset(dataset_dir / "test.csv")), abs=1e-6)
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[1].split(",")[0] == "2"


def test_run_is_deterministic_excluding_timing(dataset_dir, tmp_path):
    docs = []
    for name in ("a", "b"):
        assert _run(dataset_dir, tmp_path / name, "--seed", "3") == 0
        recs = [json.loads(line) for line in (tmp_path / name / "trace.jsonl").read_text().splitlines()]
        for rec in recs:
            for f in TIMING_FIELDS:
                rec.pop(f)
        docs.append(recs)
    assert docs[0] == docs[1]
    assert (tmp_path / "a" / "posterior.json").read_bytes() == (tmp_path / "b" / "posterior.json").read_bytes()


def test_no_component_id_flag(dataset_dir, tmp_path):
    assert _run(dataset_dir, tmp_path / "r", "--no-component-id", "--workers", "3", "--backend", "thread") == 0
    recs = [json.loads(line) for line in (tmp_path / "r" / "trace.jsonl").read_text().splitlines()]
    assert not any(r["lap_solved"] for r in recs)


def test_config_file_and_eval_every(dataset_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"prior": {"kappa0": 0.01}, "minibatch_size": 100, "alpha": 2.0}))
    assert main(["run", "--config", str(cfg), "--train", str(dataset_dir / "train.csv"),
                 "--test", str(dataset_dir / "test.csv"), "--out-dir", str(tmp_path / "r"),
                 "--eval-every", "2"]) == 0
    recs = [json.loads(line) for line in (tmp_path / "r" / "trace.jsonl").read_text().splitlines()]
    assert len(recs) == 6
    assert [r["held_out_ll"] is not None for r in recs] == [False, True] * 3
    assert CentralPosterior.load(tmp_path / "r" / "posterior.json").alpha == 2.0


def test_batch_verb(dataset_dir, tmp_path, capsys):
    out = tmp_path / "batch.json"
    assert main(["batch", "--train", str(dataset_dir / "train.csv"), "--out", str(out), "--truncation", "30"]) == 0
    assert CentralPosterior.load(out).k <= 30
    assert "K=" in capsys.readouterr().out


def test_eval_of_empty_posterior(tmp_path, dataset_dir, capsys):
    from streamdp.expfam import to_natural
    central = CentralPosterior(to_natural(ConventionalNiw(np.zeros(2), 1e-3, np.eye(2), 4.0)), 5.0)
    central.save(tmp_path / "p.json")
    assert main(["eval", "--posterior", str(tmp_path / "p.json"), "--test", str(dataset_dir / "test.csv")]) == 0
    assert np.isfinite(float(capsys.readouterr().out))


def test_errors_exit_nonzero(tmp_path, dataset_dir, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["run", "--config", str(bad), "--train", str(dataset_dir / "train.csv"),
                 "--test", str(dataset_dir / "test.csv"), "--out-dir", str(tmp_path / "x")]) == 1
    assert "unknown config keys" in capsys.readouterr().err
    d3 = tmp_path / "d3.csv"
    write_dataset(d3, np.zeros((3, 3)))
    assert _run(dataset_dir, tmp_path / "y", "--workers", "1") == 0
    assert main(["eval", "--posterior", str(tmp_path / "y" / "posterior.json"), "--test", str(d3)]) == 1
    assert "dimension" in capsys.readouterr().err
    assert main(["eval", "--posterior", str(tmp_path / "missing.json"), "--test", str(d3)]) == 1
    assert main(["run", "--train", str(d3), "--test", str(dataset_dir / "test.csv"),
                 "--out-dir", str(tmp_path / "z")]) == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "streamdp", "generate", "--n", "5", "--clusters", "2",
                          "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "streamdp", "run"], capture_output=True, text=True)
    assert res.returncode != 0
