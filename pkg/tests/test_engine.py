import math

import numpy as np
import pytest
from scipy import stats

from streamdp.central import CentralPosterior
from streamdp.data import generate
from streamdp.engine import (TIMING_FIELDS, RunConfig, batch_vi, held_out_ll, partition, run,
                             _minibatch_seed)
from streamdp.expfam import ConventionalNiw, from_natural, log_predictive, to_natural
from streamdp.minibatch_vi import run_minibatch_vi


@pytest.fixture(scope="module")
def small_data():
    prior = ConventionalNiw(np.zeros(2), 1e-3, np.eye(2), 4.0)
    train, test = generate(1000, 2, 8, prior, seed=3, n_test=200)
    return prior, train.x, test.x


def _strip(rec):
    doc = rec.to_json()
    for f in TIMING_FIELDS:
        doc.pop(f)
    return doc


def test_partition_covers_all_rows():
    parts = partition(103, 10, seed=1)
    assert len(parts) == 11
    assert sorted(np.concatenate(parts).tolist()) == list(range(103))


def test_single_worker_is_deterministic(small_data):
    prior, x, xt = small_data
    cfg = RunConfig(prior=prior, n_workers=1, seed=4)
    c1, t1 = run(cfg, x, xt)
    c2, t2 = run(cfg, x, xt)
    assert [_strip(r) for r in t1.records] == [_strip(r) for r in t2.records]
    for a, b in zip(c1.etas, c2.etas):
        assert a.allclose(b, atol=0)
    assert t1.final_held_out_ll == t2.final_held_out_ll


@pytest.mark.parametrize("n_workers", [1, 3])
def test_every_minibatch_merged_once(small_data, n_workers):
    prior, x, xt = small_data
    cfg = RunConfig(prior=prior, n_workers=n_workers, minibatch_size=64, backend="thread", seed=1)
    central, trace = run(cfg, x, xt)
    assert trace.n_merges == math.ceil(len(x) / 64)
    assert sorted(r.minibatch for r in trace.records) == list(range(trace.n_merges))
    assert [r.version for r in trace.records] == list(range(1, trace.n_merges + 1))
    assert trace.matchings_solved <= trace.n_merges
    assert central.snapshot().t_stats.sum() == pytest.approx(len(x), rel=1e-9)
    assert trace.final_k == central.k
    assert trace.records[-1].held_out_ll == trace.final_held_out_ll


def test_single_minibatch_equals_vi_plus_merge(small_data):
    prior, x, xt = small_data
    x = x[:40]
    cfg = RunConfig(prior=prior, minibatch_size=50, seed=7)
    central, trace = run(cfg, x, xt)
    base = to_natural(prior)
    rows = partition(len(x), 50, 7)[0]
    mb = run_minibatch_vi(x[rows], [], [], base, cfg.alpha, k_max=cfg.k_max, tol=cfg.tol,
                          max_iters=cfg.max_iters, seed=_minibatch_seed(7, 0))
    assert trace.n_merges == 1 and central.k == mb.k_m
    for a, b in zip(central.etas, mb.etas):
        assert a.allclose(b, atol=0)


def test_ablation_never_solves_lap(small_data):
    prior, x, xt = small_data
    cfg = RunConfig(prior=prior, n_workers=4, backend="thread", component_id_enabled=False)
    _, trace = run(cfg, x, xt)
    assert trace.matchings_solved == 0
    assert all(r.sigma == list(range(r.k_m)) for r in trace.records)


def test_eval_every_records_ll(small_data):
    prior, x, xt = small_data
    _, trace = run(RunConfig(prior=prior, eval_every=5), x, xt)
    marked = [r.version for r in trace.records if r.held_out_ll is not None]
    assert marked == [v for v in range(1, trace.n_merges + 1) if v % 5 == 0 or v == trace.n_merges]


def test_process_backend_runs(small_data):
    prior, x, xt = small_data
    central, trace = run(RunConfig(prior=prior, n_workers=2, backend="process"), x[:300], xt)
    assert trace.backend == "process" and trace.n_merges == 6
    assert central.snapshot().t_stats.sum() == pytest.approx(300, rel=1e-9)


def test_run_rejects_bad_input(small_data):
    prior, x, xt = small_data
    with pytest.raises(ValueError):
        run(RunConfig(prior=prior), x[:, :1], xt)
    with pytest.raises(ValueError):
        run(RunConfig(prior=prior), x, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        run(RunConfig(prior=prior, n_workers=0), x, xt)
    with pytest.raises(ValueError):
        run(RunConfig(prior=prior, backend="gpu"), x, xt)


def test_trace_files(small_data, tmp_path):
    prior, x, xt = small_data
    _, trace = run(RunConfig(prior=prior), x[:200], xt)
    trace.write_jsonl(tmp_path / "t.jsonl")
    trace.write_summary_csv(tmp_path / "s.csv")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == trace.n_merges
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert "final_held_out_ll" in header and "matchings_solved" in header


# ---------------------------------------------------------------------------
# held-out log-likelihood

def test_held_out_ll_empty_posterior_is_prior_predictive(base2):
    central = CentralPosterior(base2, 2.0)
    x = np.array([[0.5, -1.0], [3.0, 2.0]])
    want = np.mean([log_predictive(base2, row) for row in x])
    assert held_out_ll(central, x) == pytest.approx(want, abs=1e-12)


def test_held_out_ll_two_components_by_hand():
    base = to_natural(ConventionalNiw([0.0], 1.0, [[1.0]], 3.0))
    central = CentralPosterior(base, 1.0)
    from test_component_id import hard_minibatch
    empty = central.snapshot()
    central.merge(empty, hard_minibatch([[-5.0], [-4.0], [5.0]], [0, 0, 1], empty, base, 2))
    x = np.array([[-4.5], [0.0], [6.0]])
    weights = np.array([2.0, 1.0, 1.0]) / 4.0
    total = 0.0
    for row in x:
        dens = 0.0
        for w, eta in zip(weights, list(central.etas) + [base]):
            p = from_natural(eta)
            dof = p.nu - 1 + 1
            scale = np.sqrt(p.psi[0, 0] * (p.kappa + 1) / (p.kappa * dof))
            dens += w * stats.t.pdf(row[0], df=dof, loc=p.mu[0], scale=scale)
        total += np.log(dens)
    assert held_out_ll(central, x) == pytest.approx(total / len(x), abs=1e-10)


def test_held_out_ll_rejects_empty(base2):
    with pytest.raises(ValueError):
        held_out_ll(CentralPosterior(base2, 1.0), np.zeros((0, 2)))


def test_batch_vi_separates_clusters():
    prior = ConventionalNiw([0.0], 1e-3, [[1.0]], 3.0)
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-20, 1, 100), rng.normal(20, 1, 100)])[:, None]
    central, mb = batch_vi(x, prior, alpha=1.0, truncation=20)
    big = np.sort(central.snapshot().t_stats)[::-1]
    assert big[:2] == pytest.approx([100, 100], abs=1.0)
    assert big[2:].sum() < 1.0
