"""Acceptance criteria 1-10.

Each test prints one ``CRITERION n: PASS|FAIL ...`` line. Run the file
directly (``python3 tests/test_acceptance.py``) or through pytest.
"""
import filecmp
import json
import math
import os
import sys
import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

sys.path.insert(0, os.path.dirname(__file__))

from _oracles import active_set_qp, dual_objective, full_alpha, kkt_residuals  # noqa: E402
from conftest import small_config, write_cases  # noqa: E402

from icasvm import metrics  # noqa: E402
from icasvm.cli import main as cli_main  # noqa: E402
from icasvm.ica import TemporalICA, load_model, projector, rank_mse  # noqa: E402
from icasvm.phantom import PhantomSpec, generate  # noqa: E402
from icasvm.pipeline import PipelineConfig, prepare_case, run_full  # noqa: E402
from icasvm.preprocess import FWHM_TO_SIGMA, find_midplanes, gaussian_smooth  # noqa: E402
from icasvm.svm import TranslatedSVC, calibrate_translation, load_svm  # noqa: E402
from icasvm.volume import DynamicVolume, load_mask, load_volume  # noqa: E402

import icasvm.svm as svm_mod  # noqa: E402


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {n}: {detail}"
    return report


# --- 1 ----------------------------------------------------------------------


def test_criterion_1_projector_laws(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_idem = worst_sym = 0.0
    for _ in range(200):
        p = int(rng.integers(2, 9))
        P = projector(rng.normal(size=(20, p)))
        n = np.linalg.norm(P)
        worst_idem = max(worst_idem, np.linalg.norm(P @ P - P) / n)
        worst_sym = max(worst_sym, np.linalg.norm(P.T - P) / n)
    el = time.perf_counter() - t0
    ok = worst_idem < 1e-8 and worst_sym < 1e-8 and el < 5
    verdict(1, ok, f"max idempotence {worst_idem:.2e}, max asymmetry {worst_sym:.2e}, {el:.2f}s")


# --- 2 ----------------------------------------------------------------------


def _mix(seed):
    rng = np.random.default_rng(seed)
    M, N = 5000, 20
    S = np.column_stack([rng.uniform(-1, 1, M), rng.laplace(size=M), rng.exponential(size=M)])
    S = (S - S.mean(0)) / S.std(0)
    A = rng.normal(size=(N, 3))
    X = S @ A.T
    noise_sd = math.sqrt(np.mean((X - X.mean(0)) ** 2) / 10 ** (30 / 10))
    return X + rng.normal(scale=noise_sd, size=X.shape), S


def test_criterion_2_ica_recovery(verdict):
    t0 = time.perf_counter()
    good = 0
    worst = 1.0
    for seed in range(50):
        X, S = _mix(seed)
        est = TemporalICA(n_components=3, random_state=seed).fit(X).sources(X)
        C = np.abs(np.corrcoef(S.T, est.T)[:3, 3:])
        r, c = linear_sum_assignment(-C)
        m = C[r, c].min()
        worst = min(worst, m)
        good += m >= 0.95
    el = time.perf_counter() - t0
    verdict(2, good >= 48 and el < 60, f"{good}/50 runs with matched |corr| >= 0.95 "
                                         f"(worst {worst:.4f}), {el:.1f}s")


# --- 3 ----------------------------------------------------------------------


def test_criterion_3_rank_mse_oracle(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        M, N = int(rng.integers(10, 40)), int(rng.integers(4, 12))
        p = int(rng.integers(1, N + 1))
        X = rng.normal(size=(M, N))
        A = rng.normal(size=(N, p))
        basis = TemporalICA(n_components=p)
        basis.mixing_, basis.order_, basis.n_features_in_ = A, np.arange(p), N
        _, mse = rank_mse(X, basis)
        S = np.linalg.lstsq(A, X.T, rcond=None)[0]
        ref = np.zeros(p)
        for k in range(p):
            acc = 0.0
            for i in range(M):
                for j in range(N):
                    acc += (X[i, j] - A[j, k] * S[k, i]) ** 2
            ref[k] = acc / (N * M)
        worst = max(worst, float(np.max(np.abs(mse - ref))))
    verdict(3, worst <= 1e-10, f"max |rank_mse - double sum| = {worst:.2e} over 20 instances")


# --- 4 ----------------------------------------------------------------------


def test_criterion_4_svm_optimality(verdict):
    t0 = time.perf_counter()
    worst_rel = worst_kkt = worst_eq = 0.0
    unpolished = 0
    kinds = ["linear", "polynomial", "rbf"]
    for seed in range(100):
        rng = np.random.default_rng(400 + seed)
        n = int(rng.integers(6, 41))
        X = rng.normal(size=(n, int(rng.integers(2, 5))))
        y = np.where(X[:, 0] + rng.normal(scale=0.7, size=n) > 0, 1.0, -1.0)
        y[:2] = [1.0, -1.0]
        C = float(rng.choice([0.1, 1.0, 10.0]))
        m = TranslatedSVC(kernel=kinds[seed % 3], C=C, degree=2, coef0=1.0).fit(X, y)
        Q = m.kernel_spec_(X, X) * np.outer(y, y)
        _, f_ref, polished = active_set_qp(Q, y, C)
        unpolished += not polished
        f = dual_objective(full_alpha(m, n), Q)
        worst_rel = max(worst_rel, abs(f - f_ref) / max(abs(f_ref), 1e-12))
        worst_kkt = max(worst_kkt, float(kkt_residuals(m, X, y).max()))
        worst_eq = max(worst_eq, abs(float(m.dual_coef_.sum())))
    el = time.perf_counter() - t0
    ok = worst_rel <= 1e-4 and worst_kkt < 1e-3 and worst_eq < 1e-8 and el < 120
    verdict(4, ok, f"max rel objective gap {worst_rel:.2e}, max KKT {worst_kkt:.2e}, "
                   f"max |sum alpha y| {worst_eq:.2e}, oracle unpolished {unpolished}, {el:.1f}s")


# --- 5 ----------------------------------------------------------------------


def _hand_model(sv, coef, bias, slacks):
    return TranslatedSVC.from_dict({
        "kernel": {"kind": "linear", "gamma": 1.0, "coef": 0.0, "degree": 3},
        "C": 1.0, "sv": svm_mod.encode_array(np.asarray(sv, dtype=float)),
        "coeffs": list(coef), "bias": bias, "slacks": list(slacks), "translation": 0.0,
        "flags": [], "classes": [-1, 1]})


def test_criterion_5_calibration_arithmetic(verdict):
    results = []
    # misclassified SVs on both sides: tau = mean(|-0.4|, |0.3|)
    tau, flags = svm_mod.translation_from_slacks([-0.4, 0.3], [1, -1], [1.4, 1.3])
    results.append(tau == 0.35 and flags == [])
    # model 1: slack > 1 tier, decisions equal positions since w = 1, w0 = 0
    m1 = calibrate_translation(_hand_model([[-0.4], [0.3], [1.0], [-1.0]],
                                           [1.0, -1.0, 0.85, -0.85], 0.0, [1.4, 1.3, 0, 0]))
    results.append(m1.translation_ == pytest.approx(0.35, abs=1e-15)
                   and not any(f.startswith("translation_") for f in m1.flags_))
    # model 2: only margin violators (0 < slack < 1), w = 1 after rescaling
    m2 = _hand_model([[0.6], [-0.2], [1.0], [-1.0]], [0.5, -0.5, 0.5, -0.5], 0.0,
                     [0.4, 0.8, 0.0, 0.0])
    m2.dual_coef_ = m2.dual_coef_ / 1.4
    m2 = calibrate_translation(m2)
    results.append(m2.translation_ == pytest.approx(0.4, abs=1e-12)
                   and "translation_margin_fallback_positive" in m2.flags_
                   and "translation_margin_fallback_negative" in m2.flags_)
    # model 3: no violators at all, tau = 0 and flagged
    m3 = calibrate_translation(_hand_model([[1.0], [-1.0]], [0.5, -0.5], 0.0, [0.0, 0.0]))
    results.append(m3.translation_ == 0.0 and "translation_zero" in m3.flags_)
    verdict(5, all(results), f"hand example, slack>1, margin fallback, flagged zero: {results}")


# --- 7 (and the shared run used by 6) -----------------------------------------


@pytest.fixture(scope="module")
def phantom_run(tmp_path_factory):
    t0 = time.perf_counter()
    d = tmp_path_factory.mktemp("acceptance_cases")
    cases = write_cases(d, range(100, 116))
    cfg = PipelineConfig(cases=cases, base_dir=str(d), n_benign_samples=1000, cv_folds=10,
                         ica={"method": "ica", "p": 8, "seed": 0}, seed=0)
    out = tmp_path_factory.mktemp("acceptance_run")
    report = run_full(cfg, out)
    return cfg, report, out, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_phantom_direction(phantom_run, verdict):
    cfg, rep, _, el = phantom_run
    s = rep["summary"]
    gain = (s["mean_dsc_tau"] - s["mean_dsc_d0"]) / s["mean_dsc_d0"]
    ok_a = gain >= 0.25

    # (b) for every kernel, every h >= 5 beats h = 2
    by = {}
    for row in rep["cv"]["grid"]:
        by.setdefault(row["kernel"]["kind"], {})[row["h"]] = row["auc"]
    ok_b = all(all(v[h] > v[2] for h in v if h >= 5) for v in by.values())
    b_detail = ", ".join(f"{k} h2 {v[2]:.4f} min(h>=5) {min(v[h] for h in v if h >= 5):.4f}"
                         for k, v in by.items())

    # (c) at every integer FP count from 1% of the negatives upwards
    n_neg = s["n_test_negatives"]
    levels = np.arange(math.ceil(0.01 * n_neg), n_neg + 1)
    ica = metrics.froc_at_fp(rep["_curves"]["ica_svm"], levels)
    ser = metrics.froc_at_fp(rep["_curves"]["ser"], levels)
    ok_c = bool(np.all(ica >= ser))
    worst = float(np.min(ica - ser))

    ok = ok_a and ok_b and ok_c and el < 600
    verdict(7, ok, f"(a) DSC {s['mean_dsc_d0']:.4f} -> {s['mean_dsc_tau']:.4f} "
                   f"(+{100 * gain:.1f}%) {ok_a}; (b) {b_detail} {ok_b}; "
                   f"(c) min sens gap {worst:.4f} over {levels.size} FP levels {ok_c}; {el:.0f}s")


# --- 6 ----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_threshold_monotonicity(phantom_run, verdict):
    cfg, rep, out, _ = phantom_run
    basis = load_model(out / "ica_model.json")
    model = load_svm(out / "svm_model.json")
    h = model.support_vectors_.shape[1]
    by_id = {c["id"]: c for c in cfg.cases}
    ok = True
    checked = []
    for cid in cfg.split["test"][:3]:
        entry = by_id[cid]
        c = prepare_case(cid, load_volume(cfg.path(entry["volume"])),
                         load_mask(cfg.path(entry["truth"])), cfg.fwhm)
        d = model.decision_function(basis.scores(c.curves, h))
        span = float(np.max(np.abs(d))) + 1.0
        prev = None
        tp_prev = fp_prev = -1
        for k in np.linspace(-span, span, 200):
            sel = d + k > 0
            tp, fp = int(np.sum(sel & c.labels)), int(np.sum(sel & ~c.labels))
            if prev is not None:
                ok &= bool(np.all(sel[prev])) and tp >= tp_prev and fp >= fp_prev
            prev, tp_prev, fp_prev = sel, tp, fp
        ok &= tp_prev == c.labels.sum() and fp_prev == (~c.labels).sum()
        checked.append(cid)
    verdict(6, ok, f"set inclusion over 200 k values on cases {checked}")


# --- 8 ----------------------------------------------------------------------


def _brute_auc(s, t):
    pos, neg = s[t], s[~t]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (
        pos.size * neg.size)


def test_criterion_8_metric_oracles(verdict):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(800 + seed)
        s = np.round(rng.normal(size=20), 1)
        t = rng.random(20) < 0.4
        t[:2] = [True, False]
        thr = float(rng.normal())
        pred = s > thr
        tp, fp = int(np.sum(pred & t)), int(np.sum(pred & ~t))
        tn, fn = int(np.sum(~pred & ~t)), int(np.sum(~pred & t))
        c = metrics.confusion(s, t, thr)
        assert (c["tp"], c["fp"], c["tn"], c["fn"]) == (tp, fp, tn, fn)
        errs = [abs(c["sensitivity"] - tp / (tp + fn)), abs(c["specificity"] - tn / (tn + fp)),
                abs(c["accuracy"] - (tp + tn) / 20),
                abs(metrics.dice(pred, t) - 2 * tp / (pred.sum() + t.sum())),
                abs(metrics.roc_auc(s, t)[1] - _brute_auc(s, t))]
        worst = max(worst, max(errs))
    a = np.zeros(20, bool)
    a[3:9] = True
    b = np.zeros(20, bool)
    b[12:15] = True
    trivial = metrics.dice(a, a) == 1.0 and metrics.dice(a, b) == 0.0
    verdict(8, worst <= 1e-12 and trivial,
            f"max deviation {worst:.2e} on 50 cases; trivial DSC exact {trivial}")


# --- 9 ----------------------------------------------------------------------


def test_criterion_9_preprocessing(verdict):
    results = {}
    # exactly mirror-symmetric noiseless phantom: average with its reflection
    spec = PhantomSpec(seed=0, noise_sigma=0.0)
    vol, _, _ = generate(spec)
    cx = spec.dims[0] // 2
    data = vol.data.copy()
    data[1:] = 0.5 * (vol.data[1:] + vol.data[1:][::-1])
    sym = DynamicVolume(data, vol.spacing, vol.dt)
    results["midplane"] = find_midplanes(sym).sagittal_mid == cx \
        and find_midplanes(vol).sagittal_mid == cx

    rng = np.random.default_rng(9)
    raw = rng.random((11, 9, 7, 3)) * 100
    sm = gaussian_smooth(DynamicVolume(raw, (1.0, 1.0, 1.0), 1.0), 2.0).data
    rel = np.abs(sm.sum(axis=(0, 1, 2)) - raw.sum(axis=(0, 1, 2))) / raw.sum(axis=(0, 1, 2))
    results["frame_sums"] = bool(np.all(rel < 1e-6))

    img = np.zeros((9, 9, 9))
    img[4, 4, 4] = 1.0
    got = gaussian_smooth(DynamicVolume(img[..., None], (1.0, 1.0, 1.0), 1.0), 2.0).data[..., 0]
    sigma = 2.0 * FWHM_TO_SIGMA
    r = int(np.floor(4 * sigma))
    k1 = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k1 /= k1.sum()
    dense = np.zeros_like(img)
    for x in range(9):
        for y in range(9):
            for z in range(9):
                acc = 0.0
                for i in range(-r, r + 1):
                    for j in range(-r, r + 1):
                        for k in range(-r, r + 1):
                            xx, yy, zz = x - i, y - j, z - k
                            if 0 <= xx < 9 and 0 <= yy < 9 and 0 <= zz < 9:
                                acc += k1[i + r] * k1[j + r] * k1[k + r] * img[xx, yy, zz]
                dense[x, y, z] = acc
    results["impulse"] = float(np.max(np.abs(got - dense))) <= 1e-8
    verdict(9, all(results.values()), f"{results}, max frame-sum rel err {rel.max():.1e}")


# --- 10 ---------------------------------------------------------------------


def test_criterion_10_determinism(small_cases, tmp_path, verdict):
    d, cases = small_cases
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(small_config(d, cases)))
    codes = [cli_main(["--seed", "3", "run-full", "--config", str(cfg), "--out",
                       str(tmp_path / name)]) for name in ("a", "b")]
    names = sorted(os.listdir(tmp_path / "a"))
    same_names = names == sorted(os.listdir(tmp_path / "b"))
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names,
                                               shallow=False)
    ok = codes == [0, 0] and same_names and not mismatch and not errors and len(match) > 0
    verdict(10, ok, f"{len(match)} files byte-identical, mismatched {mismatch}, exit codes {codes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
