"""Command-line surface: dataset generation, training, generation, benchmarks."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import diffusion as dff
from . import persistence as pst
from . import shortcut as sct
from . import toybench as tb
from .counterfactual import (
    CFConfig,
    L1Target,
    Strategy,
    Variant,
    generate_counterfactual,
    generate_two_step,
)
from .metrics import PairedConfidences, auroc, flip_ratio, frechet_gaussian_distance, l1_distance, mad
from .models import TrainConfig, classify, train_classifier, train_denoiser
from .autodiff import Tensor

__all__ = ["cli_dispatch", "main"]

# CLI spellings for generation modes: "fastdime" is the single-pass method
# with self-optimized masking; "plain" disables masking entirely.
_VARIANTS = {
    "plain": (Variant.SINGLE, False),
    "fastdime": (Variant.SINGLE, True),
    "2step": (Variant.TWO_STEP, False),
    "2step+": (Variant.TWO_STEP_PLUS, True),
}
_STRATEGIES = {s.value: s for s in Strategy}


def _outdir(args) -> str:
    out = os.environ.get("FCF_OUT") or args.out
    os.makedirs(out, exist_ok=True)
    return out


def _write_dataset(dirname: str, dataset: sct.LabeledSet) -> None:
    os.makedirs(dirname, exist_ok=True)
    rows = ["filename,y,s"]
    for i in range(len(dataset)):
        name = f"img{i:05d}.pgm"
        pst.write_pgm(dataset.images[i], os.path.join(dirname, name))
        rows.append(f"{name},{dataset.y[i]},{dataset.s[i]}")
    with open(os.path.join(dirname, "labels.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")


def _read_dataset(dirname: str) -> sct.LabeledSet:
    images, ys, ss = [], [], []
    with open(os.path.join(dirname, "labels.csv")) as fh:
        next(fh)
        for line in fh:
            name, y, s = line.strip().split(",")
            images.append(pst.read_pgm(os.path.join(dirname, name))[None])
            ys.append(int(y))
            ss.append(int(s))
    return sct.LabeledSet(np.stack(images), np.array(ys), np.array(ss))


def _cmd_gen_data(args) -> int:
    out = _outdir(args)
    spec = sct.ShortcutDatasetSpec(seed=args.seed, pool_size=args.pool_size, gen_size=args.gen_size)
    for name, n, offset in (("gen", spec.gen_size, 0), ("pool", spec.pool_size, 1),
                            ("test-pool", spec.pool_size, 2)):
        subset = sct.synth_generate(spec, args.seed + offset, n)
        _write_dataset(os.path.join(out, name), subset)
    pst.write_config({"seed": args.seed, "pool_size": spec.pool_size, "gen_size": spec.gen_size,
                      "side": spec.side}, os.path.join(out, "dataset.cfg"))
    print(f"wrote gen/pool/test-pool under {out}")
    return 0


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)


def _cmd_train_denoiser(args) -> int:
    data = _read_dataset(args.data)
    schedule = dff.make_linear_schedule(args.steps)
    result = train_denoiser(data.images, schedule, _train_cfg(args), args.seed)
    pst.save_checkpoint(result.model, args.ckpt)
    print(f"denoiser saved to {args.ckpt}; final loss {result.losses[-1]:.4f}")
    return 0


def _cmd_train_classifier(args) -> int:
    data = _read_dataset(args.data)
    labels = data.y if args.label == "y" else data.s
    subset = None
    if args.train_only_where:
        key, value = args.train_only_where.split("=")
        column = data.y if key.strip() == "y" else data.s
        subset = column == int(value)
    result = train_classifier(data.images, labels, _train_cfg(args), args.seed, subset_mask=subset)
    pst.save_checkpoint(result.model, args.ckpt)
    print(f"classifier saved to {args.ckpt}; final loss {result.losses[-1]:.4f}")
    return 0


def _cmd_gen_cf(args) -> int:
    out = _outdir(args)
    denoiser = pst.load_checkpoint(args.denoiser)
    clf = pst.load_checkpoint(args.classifier)
    base = dff.make_linear_schedule(denoiser.n_timesteps)
    schedule = dff.respace(base, args.respace) if args.respace else base
    variant, masking = _VARIANTS[args.variant]
    cfg = CFConfig(
        tau=args.tau, tau_w=args.tau_w, lambda_c=args.lambda_c, lambda_1=args.lambda_1,
        lambda_p=args.lambda_p, l1_target=L1Target(args.l1_target),
        mask_threshold=args.threshold, dilation=args.dilation,
        strategy=_STRATEGIES[args.strategy], variant=variant, masking_enabled=masking,
    )
    image = pst.read_pgm(args.image)[None]
    rng = np.random.default_rng(args.seed)
    generate = generate_two_step if variant is not Variant.SINGLE else generate_counterfactual
    result = generate(image, args.target, denoiser, clf, schedule, cfg, rng)
    pst.write_pgm(result.x_c, os.path.join(out, "cf.pgm"))
    if result.mask is not None:
        pst.write_pgm(result.mask * 2.0 - 1.0, os.path.join(out, "mask.pgm"))
    report = {
        "config": {**_cfg_dict(cfg), "seed": args.seed, "respace": args.respace,
                   "variant": args.variant, "target": args.target},
        "results": [{
            "seed": args.seed, "level": "",
            "success": bool(result.success),
            "target_probability": float(result.probs[args.target]),
            "forward_calls": result.forward_calls,
            "backward_calls": result.backward_calls,
            "l1_to_original": l1_distance(image, result.x_c),
        }],
    }
    pst.write_report(report, os.path.join(out, "cf-report.json"))
    print(f"counterfactual written to {out} (flipped: {bool(result.success)})")
    return 0


def _cfg_dict(cfg: CFConfig) -> dict:
    d = asdict(cfg)
    for key in ("l1_target", "strategy", "variant"):
        d[key] = d[key].value if hasattr(d[key], "value") else str(d[key])
    return d


def _cmd_toy2d(args) -> int:
    out = _outdir(args)
    cfg = tb.ToyBenchConfig(tau=args.tau, runs=args.runs, seed=args.seed,
                            lambda_c=args.lambda_c,
                            use_trained_denoiser=args.trained_denoiser)
    result = tb.run_convergence_benchmark(cfg)
    tb.emit_curves_csv(result.curves, result.stderrs, os.path.join(out, "curves.csv"))
    tb.emit_convergence_plot(result.curves, os.path.join(out, "curves.svg"))
    summary = {
        "config": {"seed": cfg.seed, "tau": cfg.tau, "runs": cfg.runs, "lambda_c": cfg.lambda_c,
                   "schedule_steps": cfg.schedule_steps,
                   "strategies": [s.value for s in cfg.strategies]},
        "results": [
            {
                "seed": cfg.seed, "level": name,
                "final_distance": result.final_distance[name],
                "flip_ratio": result.flip_ratio[name],
                "forward_calls": result.call_counts[name].forward,
                "backward_calls": result.call_counts[name].backward,
                "wall_time_s": round(result.wall_time[name], 4),
            }
            for name in result.curves
        ],
    }
    pst.write_report(summary, os.path.join(out, "summary.json"))
    print(f"toy benchmark artifacts written to {out}")
    return 0


def _cmd_shortcut_audit(args) -> int:
    out = _outdir(args)
    levels = tuple(int(x) for x in args.levels.split(","))
    seeds = [int(x) for x in args.seeds.split(",")]
    spec = sct.ShortcutDatasetSpec(train_size=args.train_size, test_size=args.test_size,
                                   levels=levels, seed=args.seed)
    gen_cfg = sct.default_generation_config(tau=args.tau)
    reports = sct.run_detection(spec, seeds, gen_config=gen_cfg,
                                progress=(print if args.verbose else None))
    payload = {
        "config": {"seed": args.seed, "seeds": seeds, "levels": list(levels),
                   "train_size": spec.train_size, "test_size": spec.test_size,
                   "tau": args.tau, "generation": _cfg_dict(gen_cfg)},
        "results": [
            {"seed": r.seed, "level": r.level,
             **{name: getattr(r, name) for name in sct.ShortcutReport.METRIC_FIELDS},
             "n_cf": r.n_cf, "n_failed": r.n_failed}
            for r in reports
        ],
    }
    pst.write_report(payload, os.path.join(out, "shortcut-report.json"))
    for r in reports:
        print(f"seed={r.seed} k={r.level}: MAD={r.mad:.3f} MD(s=1)={r.md_s1:.3f} "
              f"MD(s=0)={r.md_s0:.3f} AUROC test_k/u/c="
              f"{r.auroc_test_k:.3f}/{r.auroc_test_u:.3f}/{r.auroc_test_cf:.3f}")
    print(f"report written to {os.path.join(out, 'shortcut-report.json')}")
    return 0


def _cmd_metrics(args) -> int:
    out = _outdir(args)
    originals = _read_dataset(args.originals)
    cfs = _read_dataset(args.counterfactuals)
    clf = pst.load_checkpoint(args.classifier)
    p_orig = classify(clf, originals.images)[:, args.target_class]
    p_cf = classify(clf, cfs.images)[:, args.target_class]
    pairs = PairedConfidences(p_orig, p_cf, shortcut_labels=originals.s)
    feats_o = clf.features(Tensor(originals.images)).data
    feats_c = clf.features(Tensor(cfs.images)).data
    results = {
        "l1": float(np.mean([l1_distance(a, b) for a, b in zip(originals.images, cfs.images)])),
        "mad": mad(pairs),
        "flip_ratio": flip_ratio(pairs),
        "auroc_orig_vs_cf": auroc(np.concatenate([p_orig, p_cf]),
                                  np.concatenate([np.ones_like(p_orig), np.zeros_like(p_cf)]).astype(int)),
        "frechet_feature_distance": frechet_gaussian_distance(feats_o, feats_c),
    }
    payload = {"config": {"seed": 0, "originals": args.originals,
                          "counterfactuals": args.counterfactuals,
                          "target_class": args.target_class},
               "results": [{"seed": 0, "level": "", **results}]}
    pst.write_report(payload, os.path.join(out, "metrics.json"))
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastcf",
                                description="Diffusion counterfactuals and shortcut audits")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shortcut dataset")
    g.add_argument("--out", default="out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pool-size", type=int, default=1600)
    g.add_argument("--gen-size", type=int, default=600)
    g.set_defaults(func=_cmd_gen_data)

    td = sub.add_parser("train-denoiser", help="fit the noise predictor")
    td.add_argument("--data", required=True)
    td.add_argument("--ckpt", required=True)
    td.add_argument("--steps", type=int, default=200)
    td.add_argument("--epochs", type=int, default=14)
    td.add_argument("--batch-size", type=int, default=32)
    td.add_argument("--lr", type=float, default=0.01)
    td.add_argument("--seed", type=int, default=0)
    td.set_defaults(func=_cmd_train_denoiser)

    tc = sub.add_parser("train-classifier", help="fit a task or shortcut classifier")
    tc.add_argument("--data", required=True)
    tc.add_argument("--ckpt", required=True)
    tc.add_argument("--label", choices=("y", "s"), default="y")
    tc.add_argument("--train-only-where", default="",
                    help="restrict training rows, e.g. y=1")
    tc.add_argument("--epochs", type=int, default=8)
    tc.add_argument("--batch-size", type=int, default=32)
    tc.add_argument("--lr", type=float, default=0.05)
    tc.add_argument("--seed", type=int, default=0)
    tc.set_defaults(func=_cmd_train_classifier)

    gc = sub.add_parser("gen-cf", help="generate one counterfactual image")
    gc.add_argument("--image", required=True)
    gc.add_argument("--denoiser", required=True)
    gc.add_argument("--classifier", required=True)
    gc.add_argument("--target", type=int, required=True)
    gc.add_argument("--tau", type=int, required=True)
    gc.add_argument("--tau-w", type=int, default=None)
    gc.add_argument("--respace", type=int, default=0)
    gc.add_argument("--lambda-c", type=float, default=1.0)
    gc.add_argument("--lambda-1", type=float, default=0.0)
    gc.add_argument("--lambda-p", type=float, default=0.0)
    gc.add_argument("--l1-target", choices=("noisy", "denoised"), default="denoised")
    gc.add_argument("--threshold", type=float, default=0.15)
    gc.add_argument("--dilation", type=int, default=1)
    gc.add_argument("--strategy", choices=sorted(_STRATEGIES), default="surrogate")
    gc.add_argument("--variant", choices=sorted(_VARIANTS), default="fastdime")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", default="out")
    gc.set_defaults(func=_cmd_gen_cf)

    ty = sub.add_parser("toy2d", help="two-Gaussian convergence benchmark")
    ty.add_argument("--runs", type=int, default=100)
    ty.add_argument("--tau", type=int, default=25)
    ty.add_argument("--seed", type=int, default=0)
    ty.add_argument("--lambda-c", type=float, default=80.0)
    ty.add_argument("--trained-denoiser", action="store_true")
    ty.add_argument("--out", default="out")
    ty.set_defaults(func=_cmd_toy2d)

    sa = sub.add_parser("shortcut-audit", help="end-to-end shortcut detection study")
    sa.add_argument("--levels", default="100,75,50")
    sa.add_argument("--seeds", default="1,2,3")
    sa.add_argument("--train-size", type=int, default=600)
    sa.add_argument("--test-size", type=int, default=400)
    sa.add_argument("--tau", type=int, default=10)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--verbose", action="store_true")
    sa.add_argument("--out", default="out")
    sa.set_defaults(func=_cmd_shortcut_audit)

    mt = sub.add_parser("metrics", help="evaluate a counterfactual set against originals")
    mt.add_argument("--originals", required=True)
    mt.add_argument("--counterfactuals", required=True)
    mt.add_argument("--classifier", required=True)
    mt.add_argument("--target-class", type=int, default=1)
    mt.add_argument("--out", default="out")
    mt.set_defaults(func=_cmd_metrics)
    return p


def cli_dispatch(argv) -> int:
    """Parse and run one command; exit status 0 on success, 2 on usage errors,
    1 with a one-line `error: <type>: <message>` otherwise."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
