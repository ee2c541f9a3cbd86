"""Two-Gaussian convergence benchmark comparing the gradient strategies.

One fixed starting point in class B is noised to level tau and guided toward
class A; the per-step mean distance to A's center (over many stochastic runs)
traces each strategy's convergence. The denoiser is the closed-form mixture
denoiser by default, so results carry no training variance; the guidance
classifier is a softened linear map of the exact mixture posterior.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as dff
from .counterfactual import (
    CallCounts,
    CFConfig,
    Strategy,
    Variant,
    count_denoiser_calls,
    generate_counterfactual,
)
from .errors import ParameterError
from .models import (
    GMMPrior,
    classify,
    gmm_posterior_denoiser,
    mixture_linear_classifier,
    train_denoiser,
    TrainConfig,
)

__all__ = [
    "ToyBenchConfig",
    "BenchResult",
    "default_prior",
    "run_convergence_benchmark",
    "emit_convergence_plot",
    "emit_curves_csv",
]


def default_prior() -> GMMPrior:
    return GMMPrior(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 0.0]], variances=[0.25, 0.25])


@dataclass
class ToyBenchConfig:
    """Benchmark protocol parameters; class A is component 0, B component 1."""

    prior: GMMPrior = field(default_factory=default_prior)
    tau: int = 25
    runs: int = 100
    strategies: tuple = (Strategy.SURROGATE, Strategy.THROUGH_DENOISER, Strategy.INNER_CHAIN)
    seed: int = 0
    schedule_steps: int = 200
    lambda_c: float = 80.0
    classifier_sharpness: float = 0.05
    target_component: int = 0
    start_component: int = 1
    control_runs: int = 2000
    use_trained_denoiser: bool = False

    def validate(self):
        if self.runs < 1:
            raise ParameterError("need at least one run")
        gap = float(np.linalg.norm(self.prior.means[self.target_component]
                                   - self.prior.means[self.start_component]))
        sigma = float(np.sqrt(self.prior.variances.max()))
        if gap <= 3.0 * sigma:
            raise ParameterError("mixture components must be separated by more than 3 sigma")
        return self


@dataclass
class BenchResult:
    curves: dict          # strategy name -> (tau + 1,) mean distance to A
    stderrs: dict         # strategy name -> (tau + 1,) standard errors
    final_distance: dict
    flip_ratio: dict
    call_counts: dict     # strategy name -> measured CallCounts
    predicted_counts: dict
    wall_time: dict
    unguided_histogram: np.ndarray
    config: ToyBenchConfig


def _distance_curve(result, target_mean) -> np.ndarray:
    states = [result.trace["initial_state"]] + [s["state"] for s in result.trace["snapshots"]]
    return np.stack([np.linalg.norm(s - target_mean, axis=1) for s in states])  # (tau+1, runs)


def run_convergence_benchmark(cfg: ToyBenchConfig) -> BenchResult:
    """Distance-to-A curves, flip ratios, and cost accounting per strategy."""
    cfg.validate()
    prior = cfg.prior
    schedule = dff.make_linear_schedule(cfg.schedule_steps)
    if cfg.use_trained_denoiser:
        rng = np.random.default_rng(cfg.seed)
        comp = rng.integers(0, prior.weights.size, size=4000)
        draws = prior.means[comp] + np.sqrt(prior.variances[comp])[:, None] * rng.standard_normal((4000, prior.dim))
        denoiser = train_denoiser(draws.astype(np.float32), schedule,
                                  TrainConfig(epochs=20, batch_size=64, lr=0.02), cfg.seed).model
    else:
        denoiser = gmm_posterior_denoiser(prior, schedule)
    clf = mixture_linear_classifier(prior, cfg.classifier_sharpness)
    target_mean = prior.means[cfg.target_component]
    start = np.tile(prior.means[cfg.start_component].astype(np.float32), (cfg.runs, 1))
    targets = np.full(cfg.runs, cfg.target_component, np.int64)

    curves, stderrs, finals, flips, counts, predicted, walls = {}, {}, {}, {}, {}, {}, {}
    for strategy in cfg.strategies:
        gen_cfg = CFConfig(tau=cfg.tau, lambda_c=cfg.lambda_c, strategy=strategy,
                           variant=Variant.SINGLE, record_trajectory=True)
        rng = np.random.default_rng(cfg.seed)
        t0 = time.perf_counter()
        res = generate_counterfactual(start, targets, denoiser, clf, schedule, gen_cfg, rng)
        walls[strategy.value] = time.perf_counter() - t0
        dists = _distance_curve(res, target_mean)
        curves[strategy.value] = dists.mean(axis=1)
        stderrs[strategy.value] = dists.std(axis=1, ddof=1) / np.sqrt(cfg.runs)
        finals[strategy.value] = float(dists[-1].mean())
        flips[strategy.value] = float(np.mean(res.success))
        counts[strategy.value] = CallCounts(res.forward_calls, res.backward_calls)
        predicted[strategy.value] = count_denoiser_calls(gen_cfg, schedule)

    control_rng = np.random.default_rng(cfg.seed + 1)
    control = dff.unconditional_sample(schedule, denoiser, (cfg.control_runs, prior.dim), control_rng)
    labels = classify(clf, control.data).argmax(axis=1)
    hist = np.bincount(labels, minlength=prior.weights.size) / cfg.control_runs

    return BenchResult(curves=curves, stderrs=stderrs, final_distance=finals, flip_ratio=flips,
                       call_counts=counts, predicted_counts=predicted, wall_time=walls,
                       unguided_histogram=hist, config=cfg)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def emit_curves_csv(curves: dict, stderrs: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "strategy", "mean_distance", "stderr"])
        for name in curves:
            err = stderrs.get(name) if stderrs else None
            for i, v in enumerate(curves[name]):
                writer.writerow([i, name, f"{v:.6f}", "" if err is None else f"{err[i]:.6f}"])


def emit_convergence_plot(curves: dict, path, width: int = 640, height: int = 440) -> None:
    """Standalone SVG line chart: one polyline per strategy, labeled axes."""
    if not curves:
        raise ParameterError("nothing to plot")
    left, right, top, bottom = 64, 16, 16, 48
    plot_w, plot_h = width - left - right, height - top - bottom
    n = max(len(c) for c in curves.values())
    ymax = max(float(np.max(c)) for c in curves.values()) or 1.0

    def sx(i):
        return left + plot_w * (i / max(n - 1, 1))

    def sy(v):
        return top + plot_h * (1.0 - v / ymax)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">step</text>',
        f'<text x="16" y="{top + plot_h / 2:.0f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14" transform="rotate(-90 16 {top + plot_h / 2:.0f})">distance to A</text>',
        f'<text x="{left - 6}" y="{top + plot_h + 4}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">0</text>',
        f'<text x="{left - 6}" y="{top + 10}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">{ymax:.2f}</text>',
    ]
    for idx, (name, curve) in enumerate(curves.items()):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{sx(i):.2f},{sy(float(v)):.2f}" for i, v in enumerate(curve))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 18 + 16 * idx
        parts.append(f'<rect x="{left + plot_w - 150}" y="{ly - 9}" width="12" height="3" fill="{color}"/>')
        parts.append(f'<text x="{left + plot_w - 132}" y="{ly}" font-family="sans-serif" '
                     f'font-size="12">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
