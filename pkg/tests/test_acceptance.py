"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records one pass/fail line, printed in the terminal summary.
"""

import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from perturblab import checkpoint, experiments, perturb
from perturblab.data import gen_synthetic
from perturblab.ensemble import fuse_params, fuse_scores
from perturblab.evaluate import ScoreSet, evaluate, score_dataset, tdr_at_fdr
from perturblab.network import LayerSpec, Model, ModelSpec, TrainConfig, default_spec, forward, grad_check, init_model, train
from perturblab.params import ParamStore
from perturblab.sweep import SweepConfig, run_sweep
from perturblab.tensor import tensor_std

pytestmark = pytest.mark.acceptance

_replications = []


@contextmanager
def criterion(log, n, title, budget_s):
    detail = []
    t0 = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        log[n] = (False, title, time.perf_counter() - t0, f"{type(exc).__name__}: {str(exc).splitlines()[0][:200]}")
        raise
    secs = time.perf_counter() - t0
    over = secs > budget_s
    if over:
        detail.append(f"over the {budget_s} s budget")
    log[n] = (not over, title, secs, "; ".join(detail))
    assert not over, f"criterion {n} took {secs:.1f} s, budget {budget_s} s"


def dense_model(w):
    w = np.asarray(w, np.float32).reshape(-1, 1)
    spec = ModelSpec((LayerSpec("gap", "gap"), LayerSpec("dense", "dense", 0, len(w), 1)), (1, 1, len(w)))
    return Model(spec, ParamStore({("dense", "weights"): w, ("dense", "bias"): np.zeros(1, np.float32)}))


def test_c01_operator_identities(acceptance_log):
    with criterion(acceptance_log, 1, "operator identities", 1.0) as detail:
        m = init_model(default_spec(), 21)
        ref = checkpoint.to_bytes(m)
        scopes = ["entire"] + m.spec.param_layers
        for scope in scopes:
            for spec in (perturb.PerturbationSpec("gaussian", 0.0, scope, 3),
                         perturb.PerturbationSpec("zero_random", 0.0, scope, 3),
                         perturb.PerturbationSpec("zero_lowmag", 0.0, scope),
                         perturb.PerturbationSpec("scale", 1.0, scope)):
                assert checkpoint.to_bytes(perturb.apply(m, spec)) == ref, spec
            for kind in ("zero_random", "zero_lowmag"):
                out = perturb.apply(m, perturb.PerturbationSpec(kind, 1.0, scope, 3))
                for layer in (m.spec.param_layers if scope == "entire" else [scope]):
                    assert not out.params[layer, "weights"].any()
        detail.append(f"{len(scopes)} scopes x 4 identities, beta=1 on both zeroing kinds")


def test_c02_gaussian_statistics(acceptance_log):
    with criterion(acceptance_log, 2, "gaussian noise std within 1% of alpha*sigma", 5.0) as detail:
        m = dense_model(np.random.default_rng(2).normal(0.0, 0.05, 1_000_000 - 1))
        flat = np.concatenate([m.params["dense", "weights"].ravel(), m.params["dense", "bias"]]).astype(np.float64)
        sigma = tensor_std(flat)
        for alpha in (0.1, 0.5, 1.0):
            out = perturb.perturb_gaussian(m, alpha, seed=17)
            mod = np.concatenate([out.params["dense", "weights"].ravel(), out.params["dense", "bias"]])
            ratio = (mod - flat).std() / (alpha * sigma)
            detail.append(f"alpha {alpha}: ratio {ratio:.4f}")
            assert abs(ratio - 1) <= 0.01


def floor_count(beta: float, n: int) -> int:
    return int(Fraction(str(beta)) * n)  # exact decimal product, no float rounding


def test_c03_lowmag_properties(acceptance_log):
    betas = [round(0.1 * i, 1) for i in range(1, 10)]
    with criterion(acceptance_log, 3, "low-magnitude zeroing count, order, nesting", 10.0) as detail:
        rng = np.random.default_rng(3)
        for case in range(1000):
            n = int(rng.integers(1, 400))
            w = rng.normal(size=n) * rng.choice([1e-3, 1.0, 50.0])
            if case % 4 == 0:
                w = np.round(w, 1) + 0.05  # duplicated magnitudes, still nonzero
            m = dense_model(w)
            w32 = m.params["dense", "weights"].ravel()
            prev = np.zeros(n, bool)
            for beta in betas:
                out = perturb.perturb_zero_lowmag(m, beta).params["dense", "weights"].ravel()
                zero = out == 0
                assert zero.sum() == floor_count(beta, n), (case, beta)
                if zero.any() and (~zero).any():
                    assert np.abs(w32[zero]).max() <= np.abs(w32[~zero]).min()
                assert not (prev & ~zero).any()
                prev = zero
        detail.append("1000 cases x 9 betas")


def brute_force(labels, scores, target):
    bona = [s for l, s in zip(labels, scores) if l == 0]
    pa = [s for l, s in zip(labels, scores) if l == 1]
    best = None
    for t in sorted(set(bona) | {1.0}):
        if 100.0 * sum(1 for b in bona if b > t) / len(bona) <= target:
            best = t
            break
    return best, 100.0 * sum(1 for p in pa if p > best) / len(pa)


def test_c04_threshold_oracle(acceptance_log):
    with criterion(acceptance_log, 4, "tdr_at_fdr equals brute-force oracle", 30.0) as detail:
        rng = np.random.default_rng(4)
        for case in range(500):
            n = int(rng.integers(2, 301))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.random(n)
            if case % 3 == 0:
                scores = np.round(scores, 1)
            target = float(rng.choice([0.0, 0.2, 1.0, 5.0, 20.0, 100.0, rng.uniform(0, 100)]))
            r = tdr_at_fdr(ScoreSet(labels, scores), target)
            assert (r.threshold, r.tdr) == brute_force(labels.tolist(), scores.tolist(), target), case
        detail.append("500 score sets, n <= 300")


def test_c05_gradient_check(acceptance_log):
    with criterion(acceptance_log, 5, "gradient check", 30.0) as detail:
        from perturblab.data import gen_split
        batch = gen_split(4, 2, "train")
        res = grad_check(init_model(default_spec(), 3), batch.images, batch.labels.astype(np.int64),
                         n_params=128, details=True)
        detail.append(f"max rel err {res.max_rel_error:.2e} over {res.checked} params")
        assert res.checked >= 100 and res.max_rel_error <= 1e-3


def test_c06_fusion(acceptance_log, trained_model, small_split):
    with criterion(acceptance_log, 6, "fusion correctness", 10.0) as detail:
        x = small_split.images
        m = trained_model
        err = np.abs(forward(fuse_params([m, m]), x) - forward(m, x)).max()
        assert err <= 1e-6
        tripled = fuse_params([m, perturb.perturb_scale(m, 3.0)])
        for key, t in tripled.params.items():
            two = 2 * m.params[key]
            assert (np.abs(t - two) <= np.spacing(np.abs(two))).all(), key
        sets = [score_dataset(perturb.perturb_gaussian(m, 0.3, seed=s), small_split) for s in range(3)]
        fused = fuse_scores(sets)
        for i in range(len(fused)):
            assert fused.scores[i] == (sets[0].scores[i] + sets[1].scores[i] + sets[2].scores[i]) / 3
        detail.append(f"self-fusion score err {err:.1e}")


@pytest.fixture(scope="module")
def pipeline():
    """Data generation and training from scratch, timed for criterion 7."""
    t0 = time.perf_counter()
    tr, te = gen_synthetic()
    model = train(default_spec(), tr, TrainConfig(seed=1))
    return model, te, time.perf_counter() - t0


def test_c07_lowmag_robustness(acceptance_log, pipeline):
    model, test, train_secs = pipeline
    with criterion(acceptance_log, 7, "entire-network zero_lowmag 0.3 drops TDR by <= 10", 600.0 - train_secs) as detail:
        rep = run_sweep(SweepConfig("zero_lowmag", [0.0, 0.3]), model, test)
        drop = rep.rows[0].tdr - rep.rows[1].tdr
        detail.append(f"TDR {rep.rows[0].tdr:.2f} -> {rep.rows[1].tdr:.2f}, training {train_secs:.0f} s")
        assert drop <= 10


def test_cached_reference_model_matches_fresh_training(pipeline, trained_model):
    assert pipeline[0].params.equal_bits(trained_model.params)


def test_c08_layer_depth(acceptance_log, trained_model, default_data):
    with criterion(acceptance_log, 8, "conv1 more sensitive than conv4 at alpha 1.0", 600.0) as detail:
        sens = experiments.layer_depth_sensitivity(trained_model, default_data[1], alpha=1.0, repeats=20)
        pos, neg, p = experiments.sign_test(sens["conv1"], sens["conv4"])
        m1, m4 = np.mean(sens["conv1"]), np.mean(sens["conv4"])
        detail.append(f"mean {m1:.2f} vs {m4:.2f}, sign test {pos}+/{neg}- p={p:.1e}")
        assert m1 >= m4 and p < 0.05


def test_c09_training_free_improvement(acceptance_log, trained_model):
    with criterion(acceptance_log, 9, "perturbed >= original in 7/10, param ensemble >= original-2 in 8/10",
                   1800.0) as detail:
        for seed in range(10):
            _replications.append(experiments.improvement_replication(trained_model, seed))
        better = sum(r.perturbed.tdr >= r.original.tdr for r in _replications)
        ens_ok = sum(r.param_ensemble.tdr >= r.original.tdr - 2 for r in _replications)
        detail.append(f"perturbed {better}/10, ensemble {ens_ok}/10")
        assert better >= 7 and ens_ok >= 8


def test_default_preset_param_ensemble():
    """CLI example: the two default presets fused at parameter level."""
    if not _replications:
        pytest.skip("needs criterion 9 replications")
    ok = sum(r.preset_param_ensemble.tdr >= r.original.tdr - 2 for r in _replications)
    assert ok >= 8


def test_c10_sweep_determinism(acceptance_log, trained_model, default_data, tmp_path):
    with criterion(acceptance_log, 10, "byte-identical sweep CSV for any worker count", 300.0) as detail:
        outputs = []
        for workers in (1, 1, 2, 4):
            cfg = SweepConfig("gaussian", [0.5, 1.0], ["entire", "conv2"], repeats=3, master_seed=9, workers=workers)
            path = tmp_path / f"run{len(outputs)}.csv"
            run_sweep(cfg, trained_model, default_data[1], out=path)
            outputs.append((path.read_bytes(), path.with_suffix(".summary.json").read_bytes()))
        assert all(o == outputs[0] for o in outputs)
        detail.append("workers 1, 1, 2, 4 over 12 trials")
