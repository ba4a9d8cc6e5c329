"""End-to-end experiment: preprocess, balanced sampling, ICA, CV model
selection, SVM training, translation calibration, test-set evaluation."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold

from . import baselines, metrics
from .exceptions import ArgumentError, CaseError, IcaSvmError, LabelError, SamplingError, SpecError
from .ica import TemporalICA, TemporalPCA, save_model
from .preprocess import preprocess_volume
from .svm import KERNELS, TranslatedSVC, save_svm
from .volume import DynamicVolume, Mask3D, flatten, load_mask, load_volume, scatter_values, write_mask, write_volume

__all__ = ["CaseData", "PipelineConfig", "TrainingMatrix", "load_config", "prepare_case",
           "build_training_matrix", "cross_validate", "make_svm", "run_full"]

logger = logging.getLogger(__name__)


def _default_kernels():
    return [{"kind": "linear"},
            {"kind": "polynomial", "degree": 2, "gamma": "scale", "coef": 1.0},
            {"kind": "rbf", "gamma": "scale"}]


@dataclass
class PipelineConfig:
    """Experiment configuration, usually read from one JSON file.

    ``cases`` entries are ``{"id", "volume", "truth"}`` with DVOL paths
    relative to ``base_dir``. ``split`` maps "train"/"test" to case ids;
    when omitted the first half of the cases trains.
    """

    cases: list = field(default_factory=list)
    split: dict = None
    n_benign_samples: int = 5000
    fwhm: float = 2.0
    ica: dict = field(default_factory=lambda: {"method": "ica", "p": 8, "seed": 0})
    svm: dict = field(default_factory=lambda: {"kernels": _default_kernels(), "C": [1.0]})
    cv_folds: int = 10
    h_values: list = None
    seed: int = 0
    froc_points: int = 200
    ser_frames: list = None
    calibration_max_voxels: int = 200_000
    base_dir: str = "."

    def __post_init__(self):
        ids = [c["id"] for c in self.cases]
        if len(set(ids)) != len(ids):
            raise SpecError("case ids must be unique")
        if self.split is None:
            half = len(ids) // 2
            self.split = {"train": ids[:half], "test": ids[half:]}
        train, test = set(self.split["train"]), set(self.split["test"])
        if train & test and train != test:
            raise SpecError("train and test splits overlap")
        if (train | test) != set(ids):
            raise SpecError("splits must cover every case")
        if not train:
            raise SpecError("empty training split")
        if self.n_benign_samples < 10:
            raise SpecError("n_benign_samples must be >= 10")
        if self.cv_folds < 2:
            raise SpecError("cv_folds must be >= 2")
        for k in self.svm.get("kernels", []):
            if k["kind"] not in KERNELS:
                raise SpecError(f"unknown kernel {k['kind']!r}")

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def stage_seed(self, stage):
        """Independent integer seed per pipeline stage."""
        stages = ("sampling", "cv", "ica", "svm", "calibration")
        ss = np.random.SeedSequence([self.seed, stages.index(stage)])
        return int(ss.generate_state(1)[0])

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d


def load_config(path):
    with open(path) as fh:
        d = json.load(fh)
    d.setdefault("base_dir", os.path.dirname(os.path.abspath(path)))
    return PipelineConfig(**d)


@dataclass
class CaseData:
    """One preprocessed case restricted to its kept voxels."""

    case_id: str
    dims: tuple
    spacing: tuple
    curves: np.ndarray  # (n_kept, n_time)
    index: np.ndarray  # (n_kept, 3)
    labels: np.ndarray  # bool, lesion per kept voxel
    truth: Mask3D
    keep: Mask3D
    volume: object = None

    @property
    def n_kept(self):
        return self.curves.shape[0]


def prepare_case(case_id, vol, truth, fwhm=2.0):
    """Smooth, crop and flatten one case."""
    if truth.dims != vol.dims:
        raise ArgumentError(f"truth dims {truth.dims} != volume dims {vol.dims}")
    smoothed, keep, _ = preprocess_volume(vol, fwhm)
    vm = flatten(smoothed, keep)
    labels = truth.values[tuple(vm.index.T)]
    return CaseData(case_id, vol.dims, vol.spacing, vm.samples.copy(), vm.index, labels,
                    truth, keep, smoothed)


@dataclass
class TrainingMatrix:
    """Balanced training curves with provenance of each row."""

    curves: np.ndarray
    labels: np.ndarray  # +-1
    case_ids: np.ndarray
    rows: np.ndarray  # row into the case's kept-voxel arrays

    def __iter__(self):
        yield self.curves
        yield self.labels


def build_training_matrix(cases, n_benign, seed=0):
    """All lesion voxels (+1) against ``n_benign`` sampled benign voxels (-1).

    Benign voxels are drawn uniformly without replacement from the pooled
    kept non-lesion voxels. The lesion side is subsampled (or padded by
    resampling) to exactly ``n_benign`` rows so the classes balance.
    """
    rng = np.random.default_rng(seed)
    pos_ref, neg_ref = [], []
    for ci, c in enumerate(cases):
        rows = np.arange(c.n_kept)
        pos_ref.append(np.column_stack([np.full(c.labels.sum(), ci), rows[c.labels]]))
        neg_ref.append(np.column_stack([np.full((~c.labels).sum(), ci), rows[~c.labels]]))
    pos_ref = np.concatenate(pos_ref)
    neg_ref = np.concatenate(neg_ref)
    if neg_ref.shape[0] < n_benign:
        raise SamplingError(f"only {neg_ref.shape[0]} benign voxels for {n_benign} samples")
    if pos_ref.shape[0] == 0:
        raise SamplingError("no lesion voxels in the training cases")
    neg = neg_ref[np.sort(rng.choice(neg_ref.shape[0], n_benign, replace=False))]
    if pos_ref.shape[0] >= n_benign:
        pos = pos_ref[np.sort(rng.choice(pos_ref.shape[0], n_benign, replace=False))]
    else:
        extra = rng.choice(pos_ref.shape[0], n_benign - pos_ref.shape[0], replace=True)
        pos = np.concatenate([pos_ref, pos_ref[np.sort(extra)]])
    ref = np.concatenate([pos, neg])
    curves = np.stack([cases[ci].curves[r] for ci, r in ref])
    labels = np.concatenate([np.ones(n_benign), -np.ones(n_benign)])
    case_ids = np.array([cases[ci].case_id for ci in ref[:, 0]])
    return TrainingMatrix(curves, labels, case_ids, ref[:, 1])


def make_svm(kernel, C=1.0, seed=None):
    """Estimator from a kernel dict such as ``{"kind": "rbf", "gamma": "scale"}``."""
    return TranslatedSVC(kernel=kernel["kind"], C=C, gamma=kernel.get("gamma", "scale"),
                         coef0=kernel.get("coef", 0.0), degree=kernel.get("degree", 3),
                         random_state=seed)


def _kernel_name(k):
    return k["kind"]


def _stratified_folds(labels, n_folds, seed):
    for attempt in range(2):
        skf = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed + attempt)
        folds = list(skf.split(np.zeros(len(labels)), labels))
        if all(len(np.unique(labels[tr])) == 2 and len(np.unique(labels[va])) == 2
               for tr, va in folds):
            return folds
    raise LabelError("cross-validation produced a single-class fold twice")


def cross_validate(features, labels, kernels=None, C_values=(1.0,), h_values=None,
                   n_folds=10, seed=0):
    """Grid of mean validation AUC and error over kernel x C x h.

    ``features`` columns must already be in ranked component order; ``h``
    uses the first ``h`` columns. Selection maximizes mean AUC, ties going
    to the smaller ``h``, then kernel order linear < polynomial < rbf, then
    the smaller C.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    kernels = kernels or _default_kernels()
    h_values = list(h_values or range(1, X.shape[1] + 1))
    counts = [np.sum(y > 0), np.sum(y < 0)]
    if min(counts) < n_folds:
        raise LabelError(f"need >= {n_folds} samples per class, got {counts}")
    folds = _stratified_folds(y, n_folds, seed)
    rows = []
    for kernel in kernels:
        for C in C_values:
            for h in h_values:
                aucs, errs = [], []
                for tr, va in folds:
                    model = make_svm(kernel, C).fit(X[tr, :h], y[tr])
                    d = model.decision_function(X[va, :h])
                    aucs.append(metrics.roc_auc(d, y[va] > 0)[1])
                    errs.append(float(np.mean(np.where(d > 0, 1.0, -1.0) != y[va])))
                rows.append({"kernel": kernel, "C": float(C), "h": int(h),
                             "auc": float(np.mean(aucs)), "auc_std": float(np.std(aucs)),
                             "error": float(np.mean(errs))})
    order = {k: i for i, k in enumerate(KERNELS)}
    best = max(rows, key=lambda r: (r["auc"], -r["h"], -order[r["kernel"]["kind"]], -r["C"]))
    return {"grid": rows, "best": best, "n_folds": n_folds}


def _scores(basis, curves, h):
    return basis.scores(curves, h)


def _empirical_translation(decisions, labels):
    """Offset maximizing pooled DSC of ``d > t`` on a labelled voxel set."""
    order = np.argsort(-decisions, kind="stable")
    d, t = decisions[order], labels[order]
    tp = np.cumsum(t)
    k = np.arange(1, d.size + 1)
    dsc = 2.0 * tp / (k + t.sum())
    # only cut between distinct values
    valid = np.append(d[1:] < d[:-1], True)
    best = int(np.argmax(np.where(valid, dsc, -1.0)))
    thr = d[best + 1] if best + 1 < d.size else np.nextafter(d[best], -np.inf)
    return float((d[best] + thr) / 2.0), float(dsc[best])


def _fit_basis(cfg, curves):
    ica_cfg = cfg.ica
    p = int(ica_cfg.get("p", curves.shape[1]))
    if ica_cfg.get("method", "ica") == "pca":
        return TemporalPCA(n_components=p).fit(curves)
    return TemporalICA(n_components=p, random_state=int(ica_cfg.get("seed", cfg.stage_seed("ica"))),
                       tol=float(ica_cfg.get("tol", 1e-6)),
                       max_iter=int(ica_cfg.get("max_iter", 500))).fit(curves)


def _load_cases(cfg, ids):
    out = []
    by_id = {c["id"]: c for c in cfg.cases}
    for cid in ids:
        try:
            entry = by_id[cid]
            vol = load_volume(cfg.path(entry["volume"]))
            truth = load_mask(cfg.path(entry["truth"]))
            out.append(prepare_case(cid, vol, truth, cfg.fwhm))
        except (IcaSvmError, OSError, KeyError) as exc:
            raise CaseError(cid, exc) from exc
    return out


def run_full(cfg, out_dir=None, tau_override=None):
    """Run the whole experiment; optionally write artifacts into ``out_dir``.

    Returns the report dict. ``tau_override`` replaces the calibrated
    translation (e.g. 0.0 to disable calibration).
    """
    audit = []
    train_ids = list(cfg.split["train"])
    test_ids = list(cfg.split["test"])
    train_cases = _load_cases(cfg, train_ids)
    test_cases = _load_cases(cfg, test_ids)

    tm = build_training_matrix(train_cases, cfg.n_benign_samples, cfg.stage_seed("sampling"))
    audit.append({"stage": "sampling", "cases": sorted(set(tm.case_ids.tolist())),
                  "n_rows": int(tm.labels.size)})

    basis = _fit_basis(cfg, tm.curves)
    audit.append({"stage": "ica_fit", "cases": sorted(set(tm.case_ids.tolist())),
                  "n_rows": int(tm.curves.shape[0])})
    p = basis.mixing_.shape[1]
    feats = _scores(basis, tm.curves, p)

    svm_cfg = cfg.svm
    cv = cross_validate(feats, tm.labels, svm_cfg.get("kernels"), svm_cfg.get("C", [1.0]),
                        cfg.h_values, cfg.cv_folds, cfg.stage_seed("cv"))
    audit.append({"stage": "cross_validation", "cases": sorted(set(tm.case_ids.tolist())),
                  "n_rows": int(tm.labels.size)})
    best = cv["best"]
    h = best["h"]
    basis.n_retained = h
    train_feats = _scores(basis, tm.curves, h)
    model = make_svm(best["kernel"], best["C"], cfg.stage_seed("svm")).fit(train_feats, tm.labels)
    audit.append({"stage": "svm_train", "cases": sorted(set(tm.case_ids.tolist())),
                  "n_rows": int(tm.labels.size)})
    model.calibrate()
    tau_formula = model.translation_
    train_d = model.decision_function(train_feats)
    train_conf = metrics.confusion(train_d, tm.labels > 0, 0.0)
    training = {
        "hinge": metrics.hinge_loss(train_d, tm.labels),
        "accuracy": train_conf["accuracy"],
        "specificity": train_conf["specificity"],
        "sensitivity": train_conf["sensitivity"],
    }

    # calibration-validation set: every kept voxel of the training cases, so
    # the sweep sees the true class imbalance the balanced sample hides
    cal_d = np.concatenate([model.decision_function(_scores(basis, c.curves, h))
                            for c in train_cases])
    cal_y = np.concatenate([c.labels for c in train_cases])
    if cal_d.size > cfg.calibration_max_voxels:
        rng = np.random.default_rng(cfg.stage_seed("calibration"))
        pick = np.sort(rng.choice(cal_d.size, cfg.calibration_max_voxels, replace=False))
        cal_d, cal_y = cal_d[pick], cal_y[pick]
    tau_empirical, cal_dsc = _empirical_translation(cal_d, cal_y)
    audit.append({"stage": "calibration", "cases": sorted({c.case_id for c in train_cases}),
                  "n_rows": int(cal_d.size)})

    tau = tau_formula if tau_override is None else float(tau_override)
    model.translation_ = tau

    t1, tf = cfg.ser_frames or baselines.default_frames(test_cases[0].curves.shape[1])
    per_case = []
    pooled = {"d": [], "y": [], "ser": [], "dser": []}
    artifacts = {}
    for c in test_cases:
        d = model.decision_function(_scores(basis, c.curves, h))
        ser = baselines.ser_map(c.volume, t1, tf)[tuple(c.index.T)]
        dser = baselines.derivative_ser_map(c.volume, t1, tf)[tuple(c.index.T)]
        pooled["d"].append(d)
        pooled["y"].append(c.labels)
        pooled["ser"].append(ser)
        pooled["dser"].append(dser)
        dmap = scatter_values(d, c.index, c.dims, fill=-np.inf)
        masks = {name: dmap > thr for name, thr in
                 (("d0", 0.0), ("tau", tau), ("tau_empirical", tau_empirical))}
        truth = c.truth.values
        rep = metrics.evaluate(d, c.labels, tau, decisions=d,
                               froc_thresholds=_froc_thresholds(d, cfg.froc_points, tau))
        per_case.append({
            "case": c.case_id,
            "n_kept": int(c.n_kept),
            "n_lesion_kept": int(c.labels.sum()),
            "n_lesion_total": int(truth.sum()),
            "dsc_d0": metrics.dice(masks["d0"], truth),
            "dsc_tau": metrics.dice(masks["tau"], truth),
            "dsc_tau_empirical": metrics.dice(masks["tau_empirical"], truth),
            "report": _slim(rep.to_dict()),
        })
        artifacts[c.case_id] = (c, dmap, masks)
        audit.append({"stage": "test", "cases": [c.case_id], "n_rows": int(c.n_kept)})

    d_all = np.concatenate(pooled["d"])
    y_all = np.concatenate(pooled["y"])
    n_neg = int((~y_all).sum())
    roc, auc = metrics.roc_auc(d_all, y_all)
    curves = {
        "ica_svm": metrics.froc(d_all, y_all),
        "ser": metrics.froc(np.concatenate(pooled["ser"]), y_all),
        "derivative_ser": metrics.froc(np.concatenate(pooled["dser"]), y_all),
    }
    summary = {
        "mean_dsc_d0": float(np.mean([r["dsc_d0"] for r in per_case])),
        "mean_dsc_tau": float(np.mean([r["dsc_tau"] for r in per_case])),
        "mean_dsc_tau_empirical": float(np.mean([r["dsc_tau_empirical"] for r in per_case])),
        "test_auc": auc,
        "n_test_negatives": n_neg,
        "n_test_positives": int(y_all.sum()),
    }
    report = {
        "config": cfg.to_dict(),
        "basis": {"method": basis.kind, "p": int(p), "order": basis.order_.tolist(),
                  "mse": basis.mse_.tolist()},
        "cv": cv,
        "selected": {"kernel": best["kernel"], "C": best["C"], "h": h},
        "svm": {"n_sv": int(model.dual_coef_.size), "flags": list(model.flags_),
                "bias": model.intercept_, "kkt_gap": model.kkt_gap_},
        "translation": {"formula": tau_formula, "empirical": tau_empirical,
                        "empirical_calibration_dsc": cal_dsc, "used": tau},
        "training": training,
        "cases": per_case,
        "summary": summary,
        "froc": {k: _decimate(v, cfg.froc_points) for k, v in curves.items()},
        "audit": audit,
    }
    if out_dir is not None:
        _write_outputs(out_dir, report, basis, model, artifacts, roc, curves)
    report["_curves"] = curves
    report["_roc"] = roc
    return report


def _froc_thresholds(d, n, tau):
    lo, hi = float(np.min(d)), float(np.max(d))
    return sorted(set(np.linspace(lo - 1e-9, hi, n).tolist() + [0.0, tau]))


def _decimate(curve, n):
    if len(curve) <= n:
        return curve
    idx = np.unique(np.linspace(0, len(curve) - 1, n).round().astype(int))
    return [curve[i] for i in idx]


def _slim(d):
    d = dict(d)
    d.pop("roc", None)
    return d


def _write_outputs(out_dir, report, basis, model, artifacts, roc, curves):
    os.makedirs(out_dir, exist_ok=True)
    save_model(os.path.join(out_dir, "ica_model.json"), basis)
    save_svm(os.path.join(out_dir, "svm_model.json"), model)
    for cid, (c, dmap, masks) in artifacts.items():
        finite = np.where(np.isfinite(dmap), dmap, 0.0)
        write_volume(os.path.join(out_dir, f"{cid}_decision"),
                     DynamicVolume(finite, c.spacing, 0.0))
        for name, m in masks.items():
            write_mask(os.path.join(out_dir, f"{cid}_mask_{name}"), Mask3D(m, c.spacing))
    metrics.write_sweep_csv(os.path.join(out_dir, "roc.csv"), roc, ["fpr", "tpr", "threshold"])
    for name, curve in curves.items():
        metrics.write_sweep_csv(os.path.join(out_dir, f"froc_{name}.csv"), curve,
                                ["fp_voxels", "sensitivity", "threshold"])
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(metrics.dumps_report(report))
        fh.write("\n")
