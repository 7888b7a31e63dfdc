"""Acceptance criteria 1-10.

Each test prints one ``CRITERION n PASS|FAIL`` line (also repeated in the
pytest terminal summary). Criteria 7-9 train the full desk-scale Darcy
model twice and take well over an hour on one CPU core; they carry the
``slow`` marker so ``-m "not slow"`` skips them.
"""

import time

import numpy as np
import pytest

from sp2gno import checks
from sp2gno.checkpoint import Checkpoint, checkpoint_bytes, load_checkpoint, parse_checkpoint
from sp2gno.cli import main
from sp2gno.data import (BundleSettings, Dataset, PointCloudSample, dataset_bundles,
                         dataset_bytes, load_dataset, parse_dataset, subsample_dataset)
from sp2gno.embedding import anchor_count
from sp2gno.model import ModelConfig, init_parameters
from sp2gno.training import Normalizer, TrainConfig, evaluate, read_history, train

from conftest import ACCEPTANCE_LINES

# criterion 7 setup
GRID, N_TRAIN, N_VAL, N_TEST, SEED = 32, 200, 20, 40, 0
# 10-sample overfit run: the first ten training samples, full default model,
# per-sample steps and the learning rate halved every OVERFIT_DECAY epochs
OVERFIT_SAMPLES, OVERFIT_EPOCHS, OVERFIT_BATCH, OVERFIT_DECAY = 10, 600, 1, 150
# 24 x 24-equivalent cloud for the cross-resolution check
SUBSAMPLE_NODES, SUBSAMPLE_SEED = 24 * 24, 0


def report(number: int, passed: bool, detail: str):
    line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def _summary(results):
    return "; ".join(r.line() for r in results)


# ------------------------------------------------------------------ 1-6: properties

def test_criterion_1_lemma1_bound():
    start = time.perf_counter()
    results = checks.lemma1_suite(n_graphs=50, seed=0)
    elapsed = time.perf_counter() - start
    stated = results[0]
    report(1, stated.passed and elapsed < 120,
           f"{stated.line()}; {elapsed:.1f}s (limit 120s)")


def test_criterion_2_eigensolver_oracle():
    results = checks.eigensolver_suite(n_graphs=20, seed=0, n_max=200, m_max=16)
    report(2, all(r.passed for r in results), _summary(results))


def test_criterion_3_gradient_check():
    start = time.perf_counter()
    results = checks.model_gradcheck(seed=0, eps=1e-6, limit=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.value)
    report(3, all(r.passed for r in results) and elapsed < 60,
           f"{len(results)} tensors, worst {worst.name} {worst.value:.2e} (limit 1e-4); "
           f"{elapsed:.1f}s (limit 60s)")


def test_criterion_4_embedding_oracle():
    results = checks.embedding_suite(n_graphs=20, seed=0, n_max=100)
    report(4, all(r.passed for r in results), _summary(results))


def test_criterion_5_permutation():
    result = checks.permutation_check(seed=0, n=30)
    report(5, result.passed, result.line())


def test_criterion_6_gate_and_branch_contracts():
    results = checks.contract_checks(seed=0)
    report(6, all(r.passed for r in results), _summary(results))


# ------------------------------------------------------------------ 10: formats

def _random_dataset(rng):
    shared = rng.random() < 0.5
    dim, d_a, d_u = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    count = int(rng.integers(1, 6))
    coords = rng.standard_normal((int(rng.integers(2, 40)), dim))
    samples = []
    for i in range(count):
        c = coords if shared else rng.standard_normal((int(rng.integers(2, 40)), dim))
        n = c.shape[0]
        samples.append(PointCloudSample(c, rng.standard_normal((n, d_a)),
                                        rng.standard_normal((n, d_u)), f"id-{i}"))
    cut = int(rng.integers(0, count + 1))
    return Dataset(samples, dim, d_a, d_u, "shared" if shared else "per-sample",
                   [("train", 0, cut), ("test", cut, count)])


def _random_checkpoint(rng):
    config = ModelConfig(d_a=int(rng.integers(1, 4)), d_u=int(rng.integers(1, 3)),
                         dim=int(rng.integers(1, 4)), width=int(rng.integers(1, 9)),
                         n_blocks=int(rng.integers(1, 4)), m=int(rng.integers(1, 8)),
                         n_anchors=int(rng.integers(1, 10)), edge_width=int(rng.integers(1, 9)),
                         gate_width=int(rng.integers(1, 17)))
    params = init_parameters(config, int(rng.integers(1 << 31)))
    for p in params.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    d_in = config.d_a + config.dim
    norm = Normalizer(rng.standard_normal(d_in), rng.uniform(0.1, 2, d_in),
                      rng.standard_normal(config.d_u), rng.uniform(0.1, 2, config.d_u))
    basis = {"eigenvalues": rng.uniform(size=config.m)} if rng.random() < 0.5 else {}
    return Checkpoint(params, norm, {"seed": str(int(rng.integers(100)))}, basis)


def test_criterion_10_format_round_trips():
    rng = np.random.default_rng(0)
    data_ok = ckpt_ok = 0
    for _ in range(10):
        raw = dataset_bytes(_random_dataset(rng))
        data_ok += dataset_bytes(parse_dataset(raw)) == raw
        raw = checkpoint_bytes(_random_checkpoint(rng))
        ckpt_ok += checkpoint_bytes(parse_checkpoint(raw)) == raw
    report(10, data_ok == 10 and ckpt_ok == 10,
           f"SPGN {data_ok}/10 and checkpoint {ckpt_ok}/10 byte-identical after save-load-save")


# ------------------------------------------------------------------ 7-9: desk-scale Darcy

def _train_run(data, out, cache):
    start = time.perf_counter()
    code = main(["train", "--data", str(data), "--out", str(out), "--seed", str(SEED),
                 "--cache-dir", str(cache)])
    assert code == 0
    return time.perf_counter() - start


def _mean_rel_l2(checkpoint, data, split, out, cache):
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--split", split,
                 "--out", str(out), "--cache-dir", str(cache)]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    return float(np.mean([float(r.split(",")[1]) for r in rows]))


@pytest.fixture(scope="module")
def darcy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("darcy")
    data = root / "darcy32.spgn"
    assert main(["gen-darcy", "--grid", str(GRID), "--count", str(N_TRAIN + N_VAL + N_TEST),
                 "--val-count", str(N_VAL), "--test-count", str(N_TEST), "--seed", str(SEED),
                 "--out", str(data)]) == 0
    seconds = _train_run(data, root / "run1", root / "cache1")
    return root, data, seconds


@pytest.mark.slow
def test_criterion_7_darcy_learning(darcy_run):
    root, data, seconds = darcy_run
    ck = root / "run1" / "checkpoint.spgc"
    test_err = _mean_rel_l2(ck, data, "test", root / "eval_test", root / "cache1")
    train_err = _mean_rel_l2(ck, data, "train", root / "eval_train", root / "cache1")

    ds = load_dataset(data).split("train").subset(range(OVERFIT_SAMPLES))
    n = anchor_count(ds.n_nodes)
    bundles = dataset_bundles(ds, BundleSettings(k=20, m=32, n_anchors=n, anchor_seed=SEED,
                                                 eig_seed=SEED))
    params = init_parameters(ModelConfig(d_a=1, d_u=1, dim=2, n_anchors=n), SEED)
    norm = Normalizer.fit(ds)
    result = train(params, ds, bundles, norm,
                   TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=OVERFIT_BATCH,
                               decay_step=OVERFIT_DECAY, shuffle_seed=SEED))
    params.load_state_dict(result.best_state)
    overfit_err = evaluate(params, ds, bundles, norm)["mean_relative_l2"]

    passed = test_err <= 0.10 and train_err <= 0.05 and overfit_err <= 0.02
    target = "met" if seconds <= 1800 else "missed"
    report(7, passed,
           f"test rel-L2 {test_err:.4f} (limit 0.10), train {train_err:.4f} (limit 0.05), "
           f"{OVERFIT_SAMPLES}-sample overfit {overfit_err:.4f} (limit 0.02); "
           f"training took {seconds / 60:.1f} min (30 min target {target})")


@pytest.mark.slow
def test_criterion_8_cross_resolution(darcy_run, tmp_path):
    root, data, _ = darcy_run
    ck = root / "run1" / "checkpoint.spgc"
    native = _mean_rel_l2(ck, data, "test", tmp_path / "native", root / "cache1")
    pred_path = tmp_path / "pred576.spgn"
    assert main(["predict", "--checkpoint", str(ck), "--data", str(data), "--split", "test",
                 "--out", str(pred_path), "--subsample", str(SUBSAMPLE_NODES),
                 "--subsample-seed", str(SUBSAMPLE_SEED),
                 "--cache-dir", str(root / "cache1")]) == 0
    pred = load_dataset(pred_path)
    truth = subsample_dataset(load_dataset(data).split("test"), SUBSAMPLE_NODES, SUBSAMPLE_SEED)
    errs = [np.linalg.norm(p.u - t.u) / np.linalg.norm(t.u)
            for p, t in zip(pred.samples, truth.samples)]
    assert all(np.array_equal(p.coordinates, t.coordinates)
               for p, t in zip(pred.samples, truth.samples))
    frozen = load_checkpoint(ck).params.config.n_anchors
    coarse = float(np.mean(errs))
    report(8, coarse <= 2 * native,
           f"{SUBSAMPLE_NODES}-node cloud rel-L2 {coarse:.4f} vs native {native:.4f} "
           f"(limit 2x = {2 * native:.4f}); frozen n = {frozen}")


@pytest.mark.slow
def test_criterion_9_determinism(darcy_run):
    root, data, _ = darcy_run
    _train_run(data, root / "run2", root / "cache2")   # fresh bundle cache as well
    h1 = read_history(root / "run1" / "history.csv")
    h2 = read_history(root / "run2" / "history.csv")
    keys = [k for k in h1[0] if k != "wall_seconds"]
    worst = max(abs(a[k] - b[k]) for a, b in zip(h1, h2) for k in keys)
    same_len = len(h1) == len(h2)
    same_ckpt = all((root / "run1" / f).read_bytes() == (root / "run2" / f).read_bytes()
                    for f in ("checkpoint.spgc", "last.spgc"))
    report(9, same_len and worst <= 1e-12 and same_ckpt,
           f"{len(h1)} epochs, max history difference {worst:.1e} (limit 1e-12); "
           f"checkpoints bit-identical: {same_ckpt}")
