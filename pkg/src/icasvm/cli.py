"""Command-line entry point: ``icasvm <verb> ...``.

Every verb reads and writes DVOL volumes/masks and JSON models. The exit
code is 0 on success, 1 when any case or stage fails and 2 on bad usage.
"""
import argparse
import json
import logging
import sys

import numpy as np

from . import baselines, metrics
from .exceptions import IcaSvmError
from .ica import TemporalICA, TemporalPCA, load_model, save_model
from .phantom import PhantomSpec, generate, load_spec
from .pipeline import build_training_matrix, load_config, make_svm, prepare_case, run_full
from .preprocess import preprocess_volume
from .svm import load_svm, save_svm
from .volume import DynamicVolume, Mask3D, flatten, load_mask, load_volume, scatter_values, write_mask, write_volume

logger = logging.getLogger("icasvm")


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _cases(args):
    return [prepare_case(f"case{i}", load_volume(v), load_mask(t), args.fwhm)
            for i, (v, t) in enumerate(args.case)]


def cmd_phantom(args):
    spec = load_spec(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec.seed = args.seed
    vol, truth, kept = generate(spec)
    write_volume(args.out_prefix, vol)
    write_mask(args.out_prefix + "_truth", truth)
    write_mask(args.out_prefix + "_kept", kept)
    logger.info("phantom %s: %d lesion voxels", args.out_prefix, truth.count())


def cmd_preprocess(args):
    smoothed, keep, planes = preprocess_volume(load_volume(args.inp), args.fwhm)
    write_volume(args.out, smoothed)
    if args.mask:
        write_mask(args.mask, keep)
    logger.info("midplane x=%d, coronal cut y=%d, kept %d voxels",
                planes.sagittal_mid, planes.coronal_cut, keep.count())


def cmd_fit_ica(args):
    cases = _cases(args)
    tm = build_training_matrix(cases, args.n_benign, _seed(args))
    if args.method == "pca":
        basis = TemporalPCA(n_components=args.p).fit(tm.curves)
    else:
        basis = TemporalICA(n_components=args.p, random_state=_seed(args)).fit(tm.curves)
    save_model(args.out, basis)


def cmd_train_svm(args):
    basis = load_model(args.ica)
    h = args.h or basis.n_components
    basis.n_retained = h
    cases = _cases(args)
    tm = build_training_matrix(cases, args.n_benign, _seed(args))
    kernel = {"kind": args.kernel, "gamma": args.gamma, "degree": args.degree, "coef": args.coef0}
    model = make_svm(kernel, args.C, _seed(args)).fit(basis.scores(tm.curves, h), tm.labels)
    save_svm(args.out, model)
    logger.info("trained %s SVM on %d rows: %d support vectors", args.kernel, tm.labels.size,
                model.dual_coef_.size)


def cmd_calibrate(args):
    model = load_svm(args.svm)
    model.calibrate(args.slack_eps)
    save_svm(args.out, model)
    logger.info("translation %.6g flags %s", model.translation_, model.flags_)


def _decision_map(args):
    basis = load_model(args.ica)
    model = load_svm(args.svm)
    h = model.support_vectors_.shape[1]
    vol = load_volume(args.inp)
    if args.mask:
        smoothed = preprocess_volume(vol, args.fwhm)[0]
        keep = load_mask(args.mask)
    else:
        smoothed, keep, _ = preprocess_volume(vol, args.fwhm)
    vm = flatten(smoothed, keep)
    d = model.decision_function(basis.scores(vm.samples, h))
    return vol, model, d, vm.index


def cmd_predict(args):
    vol, model, d, index = _decision_map(args)
    k = -model.translation_ if args.k is None else args.k
    dmap = scatter_values(d, index, vol.dims, fill=0.0)
    write_volume(args.out_prefix + "_decision", DynamicVolume(dmap, vol.spacing, 0.0))
    pred = scatter_values(d + k > 0, index, vol.dims, fill=False)
    write_mask(args.out_prefix + "_mask", Mask3D(pred, vol.spacing))


def cmd_eval(args):
    scores = load_volume(args.scores).frame(0)
    truth = load_mask(args.truth).values
    sel = load_mask(args.mask).values if args.mask else np.ones(truth.shape, dtype=bool)
    if args.defined:
        # undefined baseline voxels stay in the evaluation but never fire
        scores = np.where(load_mask(args.defined).values, scores, np.nan)
    s, t = scores[sel], truth[sel]
    rep = metrics.evaluate(s, t, args.threshold)
    out = rep.to_dict()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(metrics.dumps_report(out) + "\n")
    else:
        print(metrics.dumps_report({k: v for k, v in out.items() if k not in ("roc", "froc")}))
    if args.emit_plot_data:
        metrics.write_sweep_csv(args.emit_plot_data + "_roc.csv", rep.roc,
                                ["fpr", "tpr", "threshold"])
        metrics.write_sweep_csv(args.emit_plot_data + "_froc.csv", rep.froc,
                                ["fp_voxels", "sensitivity", "threshold"])


def cmd_run_full(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_full(cfg, args.out, args.tau_override)
    s = report["summary"]
    logger.info("mean DSC d=0 %.4f, at tau %.4f; test AUC %.4f",
                s["mean_dsc_d0"], s["mean_dsc_tau"], s["test_auc"])


def cmd_baseline(args):
    vol = load_volume(args.inp)
    fn = baselines.ser_map if args.kind == "ser" else baselines.derivative_ser_map
    m = fn(vol, args.t1, args.tf)
    defined = np.isfinite(m)
    write_volume(args.out, DynamicVolume(np.where(defined, m, 0.0), vol.spacing, 0.0))
    write_mask(_stem(args.out) + "_defined", Mask3D(defined, vol.spacing))


def _stem(path):
    for ext in (".json", ".raw", ".dvol"):
        if path.endswith(ext):
            return path[:-len(ext)]
    return path


def _gamma(text):
    return text if text == "scale" else float(text)


def _add_cases(p):
    p.add_argument("--case", nargs=2, action="append", required=True, metavar=("VOL", "TRUTH"),
                   help="training volume and its lesion mask; repeatable")
    p.add_argument("--fwhm", type=float, default=2.0)
    p.add_argument("--n-benign", type=int, default=5000)


def build_parser():
    ap = argparse.ArgumentParser(prog="icasvm", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="global seed for every random stage")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic case")
    p.add_argument("--spec", help="phantom spec JSON; defaults when omitted")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="smooth and crop one volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--fwhm", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", help="where to write the kept-region mask")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit-ica", help="fit the temporal basis on balanced training curves")
    _add_cases(p)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--method", choices=("ica", "pca"), default="ica")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_ica)

    p = sub.add_parser("train-svm", help="train the voxel classifier on basis scores")
    _add_cases(p)
    p.add_argument("--ica", required=True)
    p.add_argument("--h", type=int, default=None, help="retained components; all when omitted")
    p.add_argument("--kernel", choices=("linear", "polynomial", "rbf"), default="rbf")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--gamma", type=_gamma, default="scale", help="'scale' or a positive number")
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--coef0", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_svm)

    p = sub.add_parser("calibrate", help="compute the hyperplane translation from slacks")
    p.add_argument("--svm", required=True)
    p.add_argument("--slack-eps", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="score and segment one volume")
    p.add_argument("--ica", required=True)
    p.add_argument("--svm", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--mask", help="restrict to this kept-region mask instead of recomputing it")
    p.add_argument("--fwhm", type=float, default=2.0)
    p.add_argument("--k", type=float, default=None,
                   help="offset added to the decision; defaults to minus the stored translation")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="voxelwise metrics of a score map against truth")
    p.add_argument("--scores", required=True, help="score DVOL (first frame is used)")
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", help="evaluate only inside this mask")
    p.add_argument("--defined", help="mask of voxels with a defined score (baseline maps)")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out")
    p.add_argument("--emit-plot-data", metavar="PREFIX",
                   help="write PREFIX_roc.csv and PREFIX_froc.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-full", help="run the whole experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-override", type=float, default=None)
    p.set_defaults(func=cmd_run_full)

    p = sub.add_parser("baseline", help="signal enhancement ratio maps")
    p.add_argument("kind", choices=("ser", "dser"))
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--t1", type=int, default=None)
    p.add_argument("--tf", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (IcaSvmError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
