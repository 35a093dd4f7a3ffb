"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

The trained-model criteria (5, 6) share networks through a cache, so the whole
file trains eight desk-preset models, about ten minutes on one core.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from sdcn import config as C
from sdcn import evaluation as E
from sdcn import gradcheck
from sdcn import layers as L
from sdcn import synth as S
from sdcn.cli import main
from sdcn.model import (NetworkConfig, TrainConfig, classification_layers, decompose,
                        decomposition_layers, init_params, predict_label, sdcn_loss, train)
from sdcn.sparse import build_dictionary, dictionary_from_training_set, somp, src_classify

from oracles import best_subset, direct_conv2d

DESK = C.PRESETS["desk"]
SEEDS = (0, 1, 2)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def detail(record_property, text):
    print(text)
    record_property("detail", text)


@lru_cache(maxsize=None)
def desk_data(seed):
    tr = S.build_training_set(DESK.n_per_class, (DESK.lambda_lo, DESK.lambda_hi), seed=seed,
                              h=DESK.chip, w=DESK.chip, n_grounds=DESK.n_grounds,
                              correlation_length=DESK.correlation_length,
                              ground_scale=DESK.ground_scale)
    te = S.build_test_set(DESK.test_lambdas, DESK.test_angles, seed=seed, h=DESK.chip,
                          w=DESK.chip, correlation_length=DESK.correlation_length,
                          ground_scale=DESK.ground_scale)
    return tr, te


@lru_cache(maxsize=None)
def trained(mode, seed, combo="HH-HV-VV"):
    tr, te = desk_data(seed)
    tr, te = S.select_channels(tr, combo), S.select_channels(te, combo)
    cfg = C.replace(DESK, seed=seed)
    t0 = time.process_time()
    params, _ = train(tr, cfg.network(len(tr.channels)), cfg.training(), mode=mode)
    return params, te, time.process_time() - t0


def accuracy_by_lambda(params, te):
    pred = predict_label(params, te.x_tilde)
    return {r.lam: r.value for r in E.accuracy_table("m", "c", pred, te.labels, te.lambdas)}


@criterion(1, "gradient fidelity")
def test_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    results = gradcheck.run(gradcheck.LAYERS, seed=0, cases=20)
    elapsed = time.perf_counter() - t0
    worst_layer = max((r for r in results if r.name != "end_to_end"), key=lambda r: r.max_error)
    e2e = next(r for r in results if r.name == "end_to_end")
    detail(record_property, f"worst layer {worst_layer.name} {worst_layer.max_error:.2e} "
           f"(< 1e-4), end-to-end {e2e.max_error:.2e} (< 1e-3), {elapsed:.1f}s (< 120s)")
    for r in results:
        assert r.passed, r.line()
    assert elapsed < 120


@criterion(2, "convolution oracle equivalence")
def test_convolution_oracle(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng([2, case])
        c_in, c_out = (int(v) for v in rng.integers(1, 5, size=2))
        h, w = (int(v) for v in rng.integers(3, 10, size=2))
        x = rng.standard_normal((c_in, h, w))
        k = rng.standard_normal((c_out, c_in, 3, 3))
        b = rng.standard_normal(c_out)
        for padding in (L.SAME, L.VALID):
            got = L.conv2d_forward(x, k, b, padding)
            ref = direct_conv2d(x, k, b, padding)
            assert got.shape == ref.shape
            worst = max(worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"50 cases x 2 paddings, worst relative error {worst:.2e} "
           f"(< 1e-6), {elapsed:.1f}s (< 30s)")
    assert worst < 1e-6
    assert elapsed < 30


@criterion(3, "architecture fidelity")
def test_architecture(record_property):
    cfg = NetworkConfig()
    dec = decomposition_layers(cfg)
    assert [s.kind for s in dec] == ["conv", "relu"] * 10 + ["conv"]
    assert all(s.padding == L.SAME for s in dec if s.kind == "conv")
    cls = classification_layers(cfg)
    assert [s.kind for s in cls[:9]] == ["conv", "relu", "pool"] * 3
    assert all(s.padding == L.VALID for s in cls if s.kind == "conv")
    assert [s.kind for s in cls[9:]] == ["flatten", "linear", "relu", "linear", "relu", "linear",
                                         "softmax"]
    assert [(s.n_out) for s in cls if s.kind == "linear"] == [512, 128, 2]
    assert cfg.gamma == 1.0

    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 32, 32))
    xt = x + rng.standard_normal(x.shape)
    rec = sdcn_loss(params, xt, x, np.eye(2)[[0, 1]])
    gap = abs(rec.total - (rec.l1 + 1.0 * rec.l2))
    detail(record_property, f"10 same conv+ReLU + reconstruction conv, 3 x (valid conv, ReLU, "
           f"pool), FC 512/128/2 + softmax; |total - (l1 + l2)| = {gap:.1e} (< 1e-12)")
    assert gap < 1e-12


@criterion(4, "protocol constants in presets")
def test_protocol_constants(record_property):
    paper = C.resolve("paper")
    assert (paper.lambda_lo, paper.lambda_hi) == (0.5, 5.5) == S.TRAIN_LAMBDA_RANGE
    assert paper.test_lambdas == (1.0, 2.0, 3.0, 4.0, 5.0) == S.TEST_LAMBDAS
    assert paper.n_per_class == 10_000
    assert len(S.TRAIN_ANGLES) == 12 and S.TRAIN_ANGLES == tuple(range(0, 360, 30))
    assert paper.test_angles == 100
    assert paper.epochs == 50 and TrainConfig().epochs == 50
    assert C.resolve().preset == "paper"  # the CLI default
    assert (paper.d1, paper.d2, paper.gamma) == (10, 3, 1.0)
    # the generators honor the same numbers
    tr = S.build_training_set(300, h=8, w=8, n_grounds=4)
    assert tr.lambdas.min() >= 0.5 and tr.lambdas.max() <= 5.5
    assert set(tr.meta["angle"].tolist()) <= set(S.TRAIN_ANGLES)
    te = S.build_test_set(h=8, w=8)
    assert len(te) == 5 * 10 * 100 and te.lambda_levels == S.TEST_LAMBDAS
    detail(record_property, "lambda ~ U[0.5, 5.5], test lambda {1..5}, 10000/class, "
           "12 train angles, 100 test angles, 50 epochs")


@pytest.mark.slow
@criterion(5, "denoising SNR gain (desk preset)")
def test_snr_gain(record_property):
    params, te, cpu = trained("sdcn", 0)
    recs = E.snr_table(lambda xt: decompose(params, xt), te, "SDCN")
    snr_in = {r.lam: r.value for r in recs if r.metric == "snr_input_db"}
    snr_out = {r.lam: r.value for r in recs if r.metric == "snr_denoised_db"}
    gain1 = snr_out[1.0] - snr_in[1.0]
    detail(record_property, "input/denoised dB: " + ", ".join(
        f"l={lam:g}: {snr_in[lam]:.1f}/{snr_out[lam]:.1f}" for lam in sorted(snr_in))
        + f"; gain at l=1 {gain1:.1f} dB (>= 5); training {cpu / 60:.1f} CPU min (<= 15)")
    assert all(snr_in[lam] < 0 for lam in S.TEST_LAMBDAS)
    assert all(snr_out[lam] > snr_in[lam] for lam in S.TEST_LAMBDAS)
    assert gain1 >= 5.0
    assert cpu <= 15 * 60


@pytest.mark.slow
@criterion(6, "accuracy orderings (desk preset)")
def test_accuracy_orderings(record_property):
    sdcn = [accuracy_by_lambda(*trained("sdcn", s)[:2]) for s in SEEDS]
    cnn = [accuracy_by_lambda(*trained("cnn_only", s)[:2]) for s in SEEDS]
    mean_sdcn = {lam: np.mean([a[lam] for a in sdcn]) for lam in S.TEST_LAMBDAS}
    mean_cnn = {lam: np.mean([a[lam] for a in cnn]) for lam in S.TEST_LAMBDAS}
    gaps = {lam: mean_sdcn[lam] - mean_cnn[lam] for lam in S.TEST_LAMBDAS}
    hh_hv = np.mean(list(accuracy_by_lambda(*trained("sdcn", 0, "HH-HV")[:2]).values()))
    hh_vv = np.mean(list(accuracy_by_lambda(*trained("sdcn", 0, "HH-VV")[:2]).values()))
    detail(record_property,
           "SDCN/CNN mean acc over 3 seeds: " + ", ".join(
               f"l={lam:g}: {mean_sdcn[lam]:.3f}/{mean_cnn[lam]:.3f}" for lam in S.TEST_LAMBDAS)
           + f"; SDCN HH-HV {hh_hv:.3f} vs HH-VV {hh_vv:.3f}")
    assert mean_sdcn[5.0] >= mean_cnn[5.0]
    assert all(g >= 0 for g in gaps.values())
    assert mean_sdcn[1.0] >= 0.90
    assert hh_hv <= hh_vv


def max_coherence(atoms, support):
    if len(support) < 2:
        return 0.0
    worst = 0.0
    for a in atoms:
        sub = a[:, support] / np.linalg.norm(a[:, support], axis=0)
        g = np.abs(sub.T @ sub - np.eye(len(support)))
        worst = max(worst, float(g.max()))
    return worst


@criterion(7, "SRC baseline correctness")
def test_src_baseline(record_property):
    t0 = time.perf_counter()
    # noiseless in-dictionary chips: a dictionary from a desk-size training set
    tr = S.build_training_set(1000, seed=0, h=24, w=24, n_grounds=20)
    d = dictionary_from_training_set(tr)
    clean, labels, *_ = S.clean_training_chips(24, 24)
    present = {c.tobytes() for c in tr.x}
    hits = [src_classify(d, c).label == lab for c, lab in zip(clean, labels)
            if c.tobytes() in present]
    # constructed mixtures over 24-column dictionaries, checked against exhaustive search
    rng = np.random.default_rng(7)
    n_mix, support_ok, label_ok, redrawn = 100, 0, 0, 0
    for _ in range(n_mix):
        targets = [S.make_object_chip(t, float(rng.uniform(0, 360)), h=16, w=16)
                   for t in S.TEMPLATES[:5]]
        confusers = [S.make_object_chip(t, float(rng.uniform(0, 360)), h=16, w=16)
                     for t in S.TEMPLATES[5:]]
        grounds = [S.make_ground_chip(S.GroundModel(seed=int(rng.integers(2**31))), 16, 16)
                   for _ in range(14)]
        dm = build_dictionary(np.stack(targets), np.stack(confusers), np.stack(grounds))
        # exact greedy recovery needs well-separated atoms: redraw supports whose
        # pairwise coherence in any channel reaches 0.3
        while True:
            cls = int(rng.integers(2))
            atom = int(rng.integers(5)) + 5 * cls
            n_g = int(rng.integers(0, 3))
            support = [atom] + (10 + rng.choice(14, n_g, replace=False)).tolist()
            if max_coherence(dm.atoms, support) < 0.3:
                break
            redrawn += 1
        coef = np.r_[rng.uniform(0.5, 2), rng.uniform(0.5, 2, n_g) * rng.choice([-1, 1], n_g)]
        sig = np.stack([a[:, support] @ coef for a in dm.atoms])
        code = somp(dm.atoms, sig, k=len(support))
        oracle, _ = best_subset(dm.atoms, sig, len(support))
        support_ok += sorted(code.support) == sorted(oracle) == sorted(support)
        label_ok += src_classify(dm, sig.reshape(3, 16, 16)).label == cls
    elapsed = time.perf_counter() - t0
    detail(record_property, f"in-dictionary {sum(hits)}/{len(hits)}, mixtures classified "
           f"{label_ok}/{n_mix}, supports equal to exhaustive oracle {support_ok}/{n_mix} "
           f"({redrawn} coherent supports redrawn), "
           f"{elapsed:.1f}s (< 120s)")
    assert len(hits) > 0 and all(hits)
    assert label_ok == n_mix and support_ok == n_mix
    assert elapsed < 120


@criterion(8, "pipeline determinism")
def test_pipeline_determinism(tmp_path, record_property):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["gen-data", "--preset", "desk", "--seed", "5", "--out-dir", str(out)]) == 0
        ck = out / "sdcn.sdcn"
        assert main(["train", "--preset", "desk", "--seed", "5", "--d1", "2", "--d2", "1",
                     "--chip", "12", "--epochs", "2", "--data", str(out / "train.sdcd"),
                     "--out", str(ck)]) == 0
        assert main(["eval", "--preset", "desk", "--seed", "5", "--test", str(out / "test.sdcd"),
                     "--train", str(out / "train.sdcd"), "--model", str(ck),
                     "--methods", "sdcn,src-sm", "--out-dir", str(out)]) == 0
        outputs.append(out)
    names = ["train.sdcd", "test.sdcd", "sdcn.sdcn", "sdcn.history.csv", "results.csv",
             "accuracy.svg", "snr.svg"]
    same = [(outputs[0] / n).read_bytes() == (outputs[1] / n).read_bytes() for n in names]
    detail(record_property, f"{sum(same)}/{len(names)} files byte-identical across two runs")
    assert all(same)


@criterion(9, "OMP invariants")
def test_omp_invariants(record_property):
    worst_orth, worst_rise = 0.0, -np.inf
    for run in range(200):
        rng = np.random.default_rng([9, run])
        c = int(rng.integers(1, 4))
        d = int(rng.integers(10, 60))
        k_atoms = int(rng.integers(5, 80))
        atoms = []
        for _ in range(c):
            a = rng.standard_normal((d, k_atoms))
            atoms.append(a / np.linalg.norm(a, axis=0))
        sig = rng.standard_normal((c, d))
        sig /= np.linalg.norm(sig)
        k = int(rng.integers(1, min(d, k_atoms)))
        full = somp(atoms, sig, k=k, tol=0.0)
        worst_rise = max(worst_rise, float(np.max(np.diff(full.history))))
        # greedy prefixes: the run stopped after i atoms is the i-th iteration of the full run
        for i in range(1, len(full.support) + 1):
            step = somp(atoms, sig, k=i, tol=0.0)
            assert step.support == full.support[:i]
            for p in range(c):
                sub = atoms[p][:, step.support]
                r = sig[p] - sub @ step.coefficients[p]
                worst_orth = max(worst_orth, float(np.max(np.abs(sub.T @ r))))
    detail(record_property, f"200 runs: max residual increase {worst_rise:.2e} (<= 0), "
           f"max |A_S^T r| {worst_orth:.2e} (< 1e-8)")
    assert worst_rise <= 0.0
    assert worst_orth < 1e-8
