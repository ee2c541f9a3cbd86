"""Synthetic shortcut-learning study: data, curation, and the audit pipeline.

The synthetic world is a 32x32 grayscale image whose target class is the
eccentricity of a noisy ellipse; the shortcut is a small bright square near a
corner (present or absent independently of the ellipse). Training sets with a
controlled target/shortcut correlation are curated from a balanced pool, task
classifiers are trained per correlation level, and the audit measures how much
each classifier's confidence moves when the shortcut is counterfactually
flipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as dff
from .counterfactual import CFConfig, Strategy, Variant, generate_counterfactual
from .errors import ParameterError
from .metrics import PairedConfidences, auroc, flip_ratio, l1_distance, mad, md
from .models import TrainConfig, classify, train_classifier, train_denoiser

__all__ = [
    "LabeledSample",
    "LabeledSet",
    "ShortcutDatasetSpec",
    "ShortcutReport",
    "CfTestSet",
    "synth_generate",
    "curate_train",
    "curate_tests",
    "build_cf_testset",
    "run_detection",
    "default_generation_config",
]


@dataclass(frozen=True)
class LabeledSample:
    """One image with its target label y and shortcut label s."""

    x: np.ndarray
    y: int
    s: int


@dataclass
class LabeledSet:
    """Column-wise dataset: images (N, 1, side, side), y (N,), s (N,)."""

    images: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.y = np.asarray(self.y, np.int64)
        self.s = np.asarray(self.s, np.int64)

    def __len__(self):
        return self.images.shape[0]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.y[i]), int(self.s[i]))

    def take(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.images[idx], self.y[idx], self.s[idx])


@dataclass(frozen=True)
class ShortcutDatasetSpec:
    """Sizes, correlation levels, and rendering parameters for one study."""

    train_size: int = 600
    test_size: int = 400
    gen_size: int = 600
    pool_size: int = 1600
    levels: tuple = (100, 75, 50)
    seed: int = 0
    side: int = 32
    background: float = -0.8
    noise_sigma: float = 0.05
    marker_size: int = 5
    marker_intensity: float = 0.9

    def __post_init__(self):
        for name in ("train_size", "test_size", "gen_size", "pool_size"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for k in self.levels:
            if not 50 <= k <= 100:
                raise ParameterError(f"correlation level {k} outside [50, 100]")


def _render(rng, spec: ShortcutDatasetSpec, y: int, s: int) -> np.ndarray:
    side = spec.side
    img = np.full((side, side), spec.background, np.float32)
    # elongated ellipses mark the positive class, round ones the negative
    ratio = rng.uniform(1.6, 2.2) if y == 1 else rng.uniform(1.0, 1.3)
    a = rng.uniform(4.5, 6.5)
    b = a / ratio
    margin = 13.0 * side / 32.0
    cx = rng.uniform(margin, side - margin)
    cy = rng.uniform(margin, side - margin)
    theta = rng.uniform(0.0, math.pi)
    intensity = rng.uniform(0.0, 0.5)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = intensity
    if s == 1:
        m = spec.marker_size
        oy, ox = rng.integers(1, 4), rng.integers(1, 4)
        corner = rng.integers(0, 4)
        r0 = oy if corner < 2 else side - oy - m
        c0 = ox if corner % 2 == 0 else side - ox - m
        img[r0 : r0 + m, c0 : c0 + m] = spec.marker_intensity
    img += rng.normal(0.0, spec.noise_sigma, (side, side))
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synth_generate(spec: ShortcutDatasetSpec, seed: int, n: int | None = None) -> LabeledSet:
    """Deterministically render a pool with all four (y, s) cells equally sized."""
    n = spec.pool_size if n is None else int(n)
    if n % 4 != 0:
        raise ParameterError("pool size must be divisible by 4 for exact cell balance")
    rng = np.random.default_rng(seed)
    per = n // 4
    images, ys, ss = [], [], []
    for y in (0, 1):
        for s in (0, 1):
            for _ in range(per):
                images.append(_render(rng, spec, y, s))
                ys.append(y)
                ss.append(s)
    images = np.stack(images)[:, None, :, :]
    return LabeledSet(images, np.array(ys), np.array(ss))


def _cell_indices(pool: LabeledSet):
    return {
        (y, s): np.flatnonzero((pool.y == y) & (pool.s == s))
        for y in (0, 1)
        for s in (0, 1)
    }


def _take_cells(pool: LabeledSet, want: dict, start: dict | None = None) -> LabeledSet:
    cells = _cell_indices(pool)
    picked = []
    for key, count in want.items():
        offset = 0 if start is None else start.get(key, 0)
        avail = cells[key][offset:]
        if count > avail.size:
            raise ParameterError(
                f"pool has {avail.size} unused samples in cell {key}, need {count}"
            )
        picked.append(avail[:count])
    return pool.take(np.concatenate(picked))


def _exact_share(total: int, percent: int, what: str) -> int:
    num = total * percent
    if num % 100 != 0:
        raise ParameterError(f"{what}: {percent}% of {total} is not an integer count")
    return num // 100


def curate_train(pool: LabeledSet, k: int, size: int) -> LabeledSet:
    """Class-balanced training set where k% of positives carry the shortcut.

    The contamination is mirrored on the negative class ((100-k)% carry it),
    so k = 50 is exactly balanced in both labels.
    """
    if size % 2 != 0:
        raise ParameterError("training size must be even for exact class balance")
    half = size // 2
    n11 = _exact_share(half, k, "positive-class shortcut share")
    n01 = _exact_share(half, 100 - k, "negative-class shortcut share")
    want = {(1, 1): n11, (1, 0): half - n11, (0, 1): n01, (0, 0): half - n01}
    return _take_cells(pool, want)


def curate_tests(pool: LabeledSet, k: int, size: int) -> tuple[LabeledSet, LabeledSet]:
    """(test_k, test_u): an i.i.d.-correlated test set and a fully balanced one.

    test_u is drawn from the head of each cell, so it is identical across
    correlation levels; test_k comes from the remainder and never overlaps it.
    """
    if size % 4 != 0:
        raise ParameterError("test size must be divisible by 4")
    quarter = size // 4
    balanced = {(y, s): quarter for y in (0, 1) for s in (0, 1)}
    test_u = _take_cells(pool, balanced)
    half = size // 2
    n11 = _exact_share(half, k, "positive-class shortcut share")
    n01 = _exact_share(half, 100 - k, "negative-class shortcut share")
    want = {(1, 1): n11, (1, 0): half - n11, (0, 1): n01, (0, 0): half - n01}
    test_k = _take_cells(pool, want, start=balanced)
    return test_k, test_u


@dataclass
class CfTestSet:
    """Shortcut-flipped counterfactuals of a balanced test set.

    ``s`` keeps the ORIGINAL shortcut labels (the audit groups by them);
    ``flip_targets`` records the label each generation aimed for. Failed
    generations are dropped; ``kept`` maps rows back into the source set.
    """

    images: np.ndarray
    y: np.ndarray
    s: np.ndarray
    flip_targets: np.ndarray
    kept: np.ndarray
    n_failed: int


def default_generation_config(tau: int = 10, tau_w: int | None = None) -> CFConfig:
    """Masked surrogate-guided generation tuned for the synthetic images."""
    return CFConfig(
        tau=tau,
        tau_w=tau_w,
        lambda_c=60.0,
        lambda_1=5.0,
        lambda_p=0.0,
        mask_threshold=0.30,
        dilation=5,
        strategy=Strategy.SURROGATE,
        variant=Variant.SINGLE,
        masking_enabled=True,
        clip_range=(-1.0, 1.0),
    )


def build_cf_testset(test_u: LabeledSet, shortcut_clf, denoiser, schedule, cfg: CFConfig,
                     rng) -> CfTestSet:
    """Flip each sample's shortcut label via guided generation.

    Target labels are the opposite of the true shortcut labels; task labels
    ride along unchanged. Per-sample failures are excluded and counted.
    """
    images, kept, targets = [], [], []
    n_failed = 0
    for i in range(len(test_u)):
        target = 1 - int(test_u.s[i])
        try:
            res = generate_counterfactual(
                test_u.images[i], target, denoiser, shortcut_clf, schedule, cfg, rng
            )
        except (FloatingPointError, ValueError, RuntimeError):
            n_failed += 1
            continue
        images.append(res.x_c)
        kept.append(i)
        targets.append(target)
    kept = np.asarray(kept, np.int64)
    return CfTestSet(
        images=np.stack(images) if images else np.empty((0, 1, test_u.images.shape[2], test_u.images.shape[3]), np.float32),
        y=test_u.y[kept],
        s=test_u.s[kept],
        flip_targets=np.asarray(targets, np.int64),
        kept=kept,
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class ShortcutReport:
    """Audit output for one (pipeline seed, correlation level) pair."""

    seed: int
    level: int
    auroc_test_k: float
    auroc_test_u: float
    auroc_test_cf: float
    mad: float
    md_s1: float
    md_s0: float
    shortcut_flip_ratio: float
    cf_mean_l1: float
    n_cf: int
    n_failed: int

    METRIC_FIELDS = (
        "auroc_test_k", "auroc_test_u", "auroc_test_cf",
        "mad", "md_s1", "md_s0", "shortcut_flip_ratio", "cf_mean_l1",
    )


def _positive_probs(clf, images: np.ndarray) -> np.ndarray:
    return classify(clf, images)[:, 1]


def run_detection(spec: ShortcutDatasetSpec, seeds, *, schedule_steps: int = 200,
                  respaced_steps: int = 50, gen_config: CFConfig | None = None,
                  classifier_cfg: TrainConfig | None = None,
                  denoiser_cfg: TrainConfig | None = None,
                  progress=None) -> list[ShortcutReport]:
    """Full audit: per seed, train everything, flip shortcuts, measure movement.

    Returns one report per (seed, level), ordered by seed then by the spec's
    level order.
    """
    if isinstance(seeds, int):
        seeds = [seeds]
    classifier_cfg = classifier_cfg or TrainConfig(epochs=8, batch_size=32, lr=0.05)
    denoiser_cfg = denoiser_cfg or TrainConfig(epochs=14, batch_size=32, lr=0.01)
    gen_config = gen_config or default_generation_config()
    reports = []
    for seed in seeds:
        ss = np.random.SeedSequence(entropy=(spec.seed, seed))
        sub = ss.spawn(6)
        data_seed = int(sub[0].generate_state(1)[0])

        # generator-side split: denoiser and shortcut classifier never see the
        # task classifiers' data
        gen_set = synth_generate(spec, data_seed, spec.gen_size)
        pool = synth_generate(spec, data_seed + 1, spec.pool_size)
        test_pool = synth_generate(spec, data_seed + 2, spec.pool_size)

        base = dff.make_linear_schedule(schedule_steps)
        gen_schedule = dff.respace(base, respaced_steps)
        den_seed = int(sub[1].generate_state(1)[0])
        denoiser = train_denoiser(gen_set.images, base, denoiser_cfg, den_seed).model
        sclf_seed = int(sub[2].generate_state(1)[0])
        shortcut_clf = train_classifier(gen_set.images, gen_set.s, classifier_cfg, sclf_seed).model

        cf_rng = np.random.default_rng(int(sub[3].generate_state(1)[0]))
        _, test_u = curate_tests(test_pool, spec.levels[0], spec.test_size)
        cf_set = build_cf_testset(test_u, shortcut_clf, denoiser, gen_schedule, gen_config, cf_rng)
        if progress:
            progress(f"seed {seed}: generated {len(cf_set.kept)} counterfactuals "
                     f"({cf_set.n_failed} failed)")

        cf_probs_shortcut = _positive_probs(shortcut_clf, cf_set.images)
        # flip ratio counts confidence toward each sample's own flip target
        toward_target = np.where(cf_set.flip_targets == 1, cf_probs_shortcut, 1.0 - cf_probs_shortcut)
        sc_fr = flip_ratio(PairedConfidences(np.zeros_like(toward_target), toward_target))
        mean_l1 = float(np.mean([
            l1_distance(test_u.images[j], cf_set.images[i])
            for i, j in enumerate(cf_set.kept)
        ]))

        task_seed = int(sub[4].generate_state(1)[0])
        for li, k in enumerate(spec.levels):
            d_k = curate_train(pool, k, spec.train_size)
            f_k = train_classifier(d_k.images, d_k.y, classifier_cfg, task_seed + li).model
            test_k, _ = curate_tests(test_pool, k, spec.test_size)

            au_k = auroc(_positive_probs(f_k, test_k.images), test_k.y)
            au_u = auroc(_positive_probs(f_k, test_u.images), test_u.y)
            au_c = auroc(_positive_probs(f_k, cf_set.images), cf_set.y)

            orig_conf = _positive_probs(f_k, test_u.images[cf_set.kept])
            cf_conf = _positive_probs(f_k, cf_set.images)
            pairs = PairedConfidences(orig_conf, cf_conf, shortcut_labels=cf_set.s)
            reports.append(ShortcutReport(
                seed=seed,
                level=k,
                auroc_test_k=au_k,
                auroc_test_u=au_u,
                auroc_test_cf=au_c,
                mad=mad(pairs),
                md_s1=md(pairs, group=1),
                md_s0=md(pairs, group=0),
                shortcut_flip_ratio=sc_fr,
                cf_mean_l1=mean_l1,
                n_cf=len(cf_set.kept),
                n_failed=cf_set.n_failed,
            ))
            if progress:
                progress(f"seed {seed} level {k}: MAD={reports[-1].mad:.3f} "
                         f"AUROC k/u={au_k:.2f}/{au_u:.2f}")
    return reports
