"""Guided counterfactual generation.

An input is noised to level tau, then denoised step by step while a weighted
loss (classifier toward the target label, L1 closeness, optional perceptual
term) shifts each reverse-step mean by -gradient * variance. Three gradient
routes are supported: a full inner reverse chain differentiated end to end,
one backward pass through the denoiser, and the cheap route that treats the
denoised estimate itself as the free variable. A self-optimized binary mask,
recomputed from the denoised estimate each step after a warm-up, confines
changes spatially; two-pass variants re-run generation under a mask frozen
from a completed first pass.

Vectors may be passed as (N, D) batches: rows evolve independently, sharing
only the per-step RNG draws. Images are one sample per call, shaped (C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import diffusion as dff
from .autodiff import CallCounter, Tensor
from .errors import ConfigError, ParameterError, ShapeError
from .models import classify

__all__ = [
    "Strategy",
    "Variant",
    "L1Target",
    "CFConfig",
    "CFResult",
    "MaskState",
    "CallCounts",
    "cf_loss_gradient",
    "gradient_surrogate",
    "gradient_through_denoiser",
    "gradient_inner_chain",
    "extract_mask",
    "apply_mask",
    "generate_counterfactual",
    "generate_two_step",
    "count_denoiser_calls",
    "preset_config",
    "PRESETS",
]

INNER_CHAIN_LIMIT = 512  # tape length guard; quadratic cost beyond this is never desk-scale


class Strategy(Enum):
    INNER_CHAIN = "inner-chain"
    THROUGH_DENOISER = "through-denoiser"
    SURROGATE = "surrogate"


class Variant(Enum):
    SINGLE = "single"
    TWO_STEP = "two-step"
    TWO_STEP_PLUS = "two-step-plus"


class L1Target(Enum):
    NOISY = "noisy"
    DENOISED = "denoised"


@dataclass
class CFConfig:
    """All generation hyperparameters for one counterfactual run."""

    tau: int
    tau_w: int | None = None
    lambda_c: float = 1.0
    lambda_1: float = 0.0
    lambda_p: float = 0.0
    l1_target: L1Target = L1Target.DENOISED
    mask_threshold: float = 0.15
    dilation: int = 1
    strategy: Strategy = Strategy.SURROGATE
    variant: Variant = Variant.SINGLE
    masking_enabled: bool = False
    clip_range: tuple | None = None
    record_trajectory: bool = False

    def __post_init__(self):
        if self.tau_w is None:
            self.tau_w = max(1, self.tau // 2)

    def validate(self, schedule=None):
        if not 1 <= self.tau_w <= self.tau:
            raise ConfigError(f"need 1 <= tau_w <= tau, got tau_w={self.tau_w}, tau={self.tau}")
        if schedule is not None and self.tau > schedule.T:
            raise ConfigError(f"tau={self.tau} exceeds the {schedule.T}-step schedule")
        if self.dilation < 1 or self.dilation % 2 == 0:
            raise ConfigError(f"dilation must be odd and >= 1, got {self.dilation}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError(f"mask threshold must lie in (0, 1), got {self.mask_threshold}")
        if self.clip_range is not None and self.clip_range[0] >= self.clip_range[1]:
            raise ConfigError(f"empty clip range {self.clip_range}")
        if self.strategy is Strategy.INNER_CHAIN and self.tau > INNER_CHAIN_LIMIT:
            raise ConfigError(
                f"inner-chain tapes above tau={INNER_CHAIN_LIMIT} exceed the desk-scale memory budget"
            )
        return self


@dataclass
class MaskState:
    """Binary change-region mask; all zeros and inactive until warm-up ends."""

    mask: np.ndarray
    active: bool = False

    @classmethod
    def inactive(cls, spatial_shape):
        return cls(np.zeros(spatial_shape, np.float32), active=False)


class CallCounts(NamedTuple):
    forward: int
    backward: int


@dataclass
class CFResult:
    """A generated counterfactual plus everything needed to audit the run."""

    x_c: np.ndarray
    mask: np.ndarray | None
    trace: dict
    forward_calls: int
    backward_calls: int
    success: np.ndarray | bool
    target: np.ndarray | int
    probs: np.ndarray
    config: CFConfig


class GuidanceResult(NamedTuple):
    gradient: np.ndarray
    x_bar: np.ndarray
    eps_bar: np.ndarray
    info: dict


def _loss_terms(x_eval: Tensor, x_noisy: Tensor | None, x_0: np.ndarray, target, clf,
                cfg: CFConfig, embedder=None, rows: int = 1):
    """Weighted counterfactual loss as a tape scalar, plus per-sample diagnostics.

    Batch rows contribute additively (sum of per-sample losses) so gradients
    match independent single-sample runs exactly.
    """
    if cfg.lambda_p and embedder is None:
        raise ConfigError("lambda_p > 0 requires an embedder")
    x0t = Tensor(np.asarray(x_0, np.float32))
    info = {"loss_c": 0.0, "loss_1": 0.0, "loss_p": 0.0, "p_target": None}
    total = None

    def accumulate(term, weight):
        nonlocal total
        weighted = term * float(weight)
        total = weighted if total is None else total + weighted

    if cfg.lambda_c:
        logp = ad.log_softmax(clf.logits(x_eval))
        picked = ad.pick(logp, target)
        loss_c = -(picked.sum() if picked.data.ndim else picked)
        info["loss_c"] = loss_c.item() / rows
        info["p_target"] = float(np.exp(picked.data.astype(np.float64)).mean())
        accumulate(loss_c, cfg.lambda_c)
    if cfg.lambda_1:
        ref = x_noisy if cfg.l1_target is L1Target.NOISY else x_eval
        if ref is None:
            raise ConfigError("noisy-target L1 needs the noisy state")
        loss_1 = (ref - x0t).abs().mean() * float(rows)
        info["loss_1"] = loss_1.item() / rows
        accumulate(loss_1, cfg.lambda_1)
    if cfg.lambda_p:
        d = embedder(x_eval) - embedder(x0t)
        loss_p = (d * d).sum()
        info["loss_p"] = loss_p.item() / rows
        accumulate(loss_p, cfg.lambda_p)
    return total, info


def _grad_or_zero(leaf: Tensor | None, shape):
    if leaf is None or leaf.grad is None:
        return np.zeros(shape, np.float32)
    return leaf.grad


def cf_loss_gradient(x_eval, x_0, x_noisy, target, clf, cfg: CFConfig, embedder=None) -> np.ndarray:
    """Combined guidance gradient with the given states as free variables.

    The classifier and perceptual terms differentiate through ``x_eval``; the
    L1 term differentiates through whichever state it targets. Both
    contributions land on the same sampling variable, so they are summed.
    """
    xe = Tensor(np.asarray(x_eval, np.float32).copy(), requires_grad=True)
    xn = None
    if x_noisy is not None:
        track = bool(cfg.lambda_1) and cfg.l1_target is L1Target.NOISY
        xn = Tensor(np.asarray(x_noisy, np.float32).copy(), requires_grad=track)
    loss, _ = _loss_terms(xe, xn, x_0, target, clf, cfg, embedder)
    if loss is not None and loss.requires_grad:
        loss.backward()
    return _grad_or_zero(xe, xe.data.shape) + _grad_or_zero(xn, xe.data.shape)


def gradient_surrogate(x_c_t, t, model, schedule, x_0, target, clf, cfg, embedder=None,
                       counter=None, rows=1) -> GuidanceResult:
    """One denoiser call; the denoised estimate stands in for the input."""
    x_c_t = np.asarray(x_c_t, np.float32)
    eps_bar = model.predict_noise(Tensor(x_c_t), schedule.map_index(t), counter=counter).data
    x_bar = dff.denoised_estimate(schedule, x_c_t, eps_bar, t)
    if cfg.clip_range is not None:
        x_bar = np.clip(x_bar, *cfg.clip_range)
    xe = Tensor(x_bar.copy(), requires_grad=True)
    track = bool(cfg.lambda_1) and cfg.l1_target is L1Target.NOISY
    xn = Tensor(x_c_t.copy(), requires_grad=track)
    loss, info = _loss_terms(xe, xn, x_0, target, clf, cfg, embedder, rows=rows)
    if loss is not None and loss.requires_grad:
        loss.backward()
    g = _grad_or_zero(xe, x_c_t.shape) + _grad_or_zero(xn, x_c_t.shape)
    return GuidanceResult(g, x_bar, eps_bar, info)


def gradient_through_denoiser(x_c_t, t, model, schedule, x_0, target, clf, cfg, embedder=None,
                              counter=None, rows=1) -> GuidanceResult:
    """One forward and one backward denoiser pass; loss differentiates through
    the denoised-estimate map back to the noisy input."""
    x_c_t = np.asarray(x_c_t, np.float32)
    leaf = Tensor(x_c_t.copy(), requires_grad=True)
    eps_bar = model.predict_noise(leaf, schedule.map_index(t), counter=counter)
    x_bar = dff.denoised_estimate(schedule, leaf, eps_bar, t)
    if cfg.clip_range is not None:
        x_bar = ad.clip(x_bar, *cfg.clip_range)
    loss, info = _loss_terms(x_bar, leaf, x_0, target, clf, cfg, embedder, rows=rows)
    if loss is None:
        loss = (x_bar * 0.0).sum()  # zero guidance still pays the backward pass
    loss.backward()
    return GuidanceResult(_grad_or_zero(leaf, x_c_t.shape), x_bar.data, eps_bar.data, info)


def gradient_inner_chain(x_c_t, t, model, schedule, rng, x_0, target, clf, cfg, embedder=None,
                         counter=None, rows=1) -> GuidanceResult:
    """Differentiate through a full inner reverse chain from step t.

    The chain synthesizes a clean sample with the denoiser on the tape (t
    forward passes) and backpropagates the loss through all of them; one
    extra untaped call supplies the outer step's noise estimate.
    """
    if t > INNER_CHAIN_LIMIT:
        raise ConfigError(f"inner-chain tape at t={t} exceeds the desk-scale bound {INNER_CHAIN_LIMIT}")
    x_c_t = np.asarray(x_c_t, np.float32)
    eps_outer = model.predict_noise(Tensor(x_c_t), schedule.map_index(t), counter=counter).data
    leaf = Tensor(x_c_t.copy(), requires_grad=True)
    h = leaf
    for s in range(t, 0, -1):
        h = dff.posterior_step(schedule, model, h, s, rng, counter=counter).sample
    if cfg.clip_range is not None:
        h = ad.clip(h, *cfg.clip_range)
    loss, info = _loss_terms(h, leaf, x_0, target, clf, cfg, embedder, rows=rows)
    if loss is None:
        loss = (h * 0.0).sum()
    loss.backward()
    return GuidanceResult(_grad_or_zero(leaf, x_c_t.shape), h.data, eps_outer, info)


_STRATEGIES = {
    Strategy.SURROGATE: gradient_surrogate,
    Strategy.THROUGH_DENOISER: gradient_through_denoiser,
    Strategy.INNER_CHAIN: gradient_inner_chain,
}


def _difference_map(x_bar, x_0, vector_batch):
    d = np.abs(np.asarray(x_bar, np.float64) - np.asarray(x_0, np.float64))
    if d.ndim == 3:  # (c, h, w) images reduce over channels
        d = d.mean(axis=0)
    elif d.ndim == 1 or (d.ndim == 2 and vector_batch):
        pass
    elif d.ndim != 2:
        raise ShapeError(f"unsupported difference-map shape {d.shape}")
    return d


def extract_mask(x_bar, x_0, cfg: CFConfig, vector_batch: bool = False) -> MaskState:
    """Binarize the normalized denoised-vs-original difference, then dilate.

    The map is normalized by its max (per row for vector batches; an all-zero
    map stays zero), thresholded, and dilated with a square (or, for vectors,
    a line) structuring element of width ``cfg.dilation``.
    """
    d = _difference_map(x_bar, x_0, vector_batch)
    if vector_batch and d.ndim == 2:
        peak = d.max(axis=1, keepdims=True)
        norm = np.divide(d, peak, out=np.zeros_like(d), where=peak > 0)
        structure = np.ones((1, cfg.dilation), bool)
    else:
        peak = d.max()
        norm = d / peak if peak > 0 else np.zeros_like(d)
        structure = np.ones((cfg.dilation,) * d.ndim, bool)
    binary = norm >= cfg.mask_threshold
    if cfg.dilation > 1 and binary.any():
        binary = ndimage.binary_dilation(binary, structure=structure)
    return MaskState(binary.astype(np.float32), active=True)


def apply_mask(m: MaskState | np.ndarray, x_c_t, x_bar_t, x_t_fresh, x_0):
    """Keep counterfactual content inside the mask; substitute outside.

    Outside the mask the noisy state becomes the fresh forward draw and the
    denoised state becomes the original exactly.
    """
    mask = m.mask if isinstance(m, MaskState) else np.asarray(m, np.float32)
    x_c_t = np.asarray(x_c_t, np.float32)
    if x_c_t.ndim == 3 and mask.ndim == 2:
        mask = mask[None]
    for name, arr in (("x_bar", x_bar_t), ("fresh draw", x_t_fresh), ("original", x_0)):
        if np.shape(arr) != x_c_t.shape:
            raise ShapeError(f"{name} shape {np.shape(arr)} != state shape {x_c_t.shape}")
    keep = mask.astype(np.float32)
    drop = (1.0 - keep).astype(np.float32)
    x_c_masked = x_c_t * keep + np.asarray(x_t_fresh, np.float32) * drop
    x_bar_masked = np.asarray(x_bar_t, np.float32) * keep + np.asarray(x_0, np.float32) * drop
    return x_c_masked, x_bar_masked


def _forward_np(schedule, x_0, t, rng):
    if t == 0:
        return x_0.copy()
    abar = schedule.alpha_bar(t)
    eps = rng.standard_normal(x_0.shape).astype(np.float32)
    return (math.sqrt(abar) * x_0 + math.sqrt(1.0 - abar) * eps).astype(np.float32)


def generate_counterfactual(x, target, model, clf, schedule, cfg: CFConfig, rng,
                            embedder=None, fixed_mask=None) -> CFResult:
    """Run the full guided chain from noise level tau down to the clean image."""
    cfg.validate(schedule)
    x_0 = np.asarray(x, np.float32)
    vector_batch = x_0.ndim == 2
    rows = x_0.shape[0] if vector_batch else 1
    counter = CallCounter()
    inner_rng = rng.spawn(1)[0] if cfg.strategy is Strategy.INNER_CHAIN else None
    strategy = _STRATEGIES[cfg.strategy]

    eps0 = rng.standard_normal(x_0.shape).astype(np.float32)
    x_c = dff.forward_sample(schedule, x_0, cfg.tau, eps0)
    spatial = x_0.shape[-2:] if x_0.ndim == 3 else x_0.shape
    mask_state = MaskState.inactive(spatial)
    trace = {k: [] for k in ("loss_c", "loss_1", "loss_p", "p_target", "forward_calls", "backward_calls")}
    snapshots = [] if cfg.record_trajectory else None
    if snapshots is not None:
        trace["initial_state"] = x_c.copy()

    for t in range(cfg.tau, 0, -1):
        kwargs = dict(x_0=x_0, target=target, clf=clf, cfg=cfg, embedder=embedder,
                      counter=counter, rows=rows)
        if cfg.strategy is Strategy.INNER_CHAIN:
            kwargs["rng"] = inner_rng
        res = strategy(x_c, t, model, schedule, **kwargs)
        mean, var = dff.posterior_from_eps(schedule, x_c, res.eps_bar, t)
        x_next = mean - res.gradient * var
        if t > 1 and var > 0.0:
            x_next = x_next + math.sqrt(var) * rng.standard_normal(x_0.shape).astype(np.float32)
        x_next = x_next.astype(np.float32)

        x_bar_masked = None
        if (cfg.masking_enabled or fixed_mask is not None) and t <= cfg.tau_w:
            if fixed_mask is not None:
                mask_state = MaskState(np.asarray(fixed_mask, np.float32), active=True)
            else:
                mask_state = extract_mask(res.x_bar, x_0, cfg, vector_batch=vector_batch)
            x_fresh = _forward_np(schedule, x_0, t - 1, rng)
            x_next, x_bar_masked = apply_mask(mask_state, x_next, res.x_bar, x_fresh, x_0)

        for key in ("loss_c", "loss_1", "loss_p", "p_target"):
            trace[key].append(res.info[key])
        trace["forward_calls"].append(counter.forward)
        trace["backward_calls"].append(counter.backward)
        if snapshots is not None:
            snapshots.append({
                "t": t,
                "state": x_next.copy(),
                "x_bar": res.x_bar.copy(),
                "mask": mask_state.mask.copy() if mask_state.active else None,
                "x_bar_masked": None if x_bar_masked is None else x_bar_masked.copy(),
            })
        x_c = x_next

    if cfg.clip_range is not None:
        x_c = np.clip(x_c, *cfg.clip_range)
    probs = classify(clf, x_c)
    predicted = probs.argmax(axis=-1)
    tgt = np.asarray(target)
    success = predicted == tgt if vector_batch else bool(predicted == int(tgt))
    if snapshots is not None:
        trace["snapshots"] = snapshots
    return CFResult(
        x_c=x_c,
        mask=mask_state.mask if mask_state.active else None,
        trace=trace,
        forward_calls=counter.forward,
        backward_calls=counter.backward,
        success=success,
        target=target,
        probs=probs,
        config=cfg,
    )


def generate_two_step(x, target, model, clf, schedule, cfg: CFConfig, rng, embedder=None) -> CFResult:
    """Two-pass variants: freeze the mask from a completed first pass, rerun.

    The first pass runs without (TWO_STEP) or with (TWO_STEP_PLUS) the
    self-optimized mask; its output fixes a mask that the second pass applies
    unchanged at every step inside the warm-up window.
    """
    if cfg.variant not in (Variant.TWO_STEP, Variant.TWO_STEP_PLUS):
        raise ConfigError(f"two-step generation requires a two-step variant, got {cfg.variant}")
    first_cfg = replace(cfg, variant=Variant.SINGLE,
                        masking_enabled=cfg.variant is Variant.TWO_STEP_PLUS)
    first = generate_counterfactual(x, target, model, clf, schedule, first_cfg, rng, embedder=embedder)
    x_0 = np.asarray(x, np.float32)
    fixed = extract_mask(first.x_c, x_0, cfg, vector_batch=x_0.ndim == 2).mask
    second_cfg = replace(cfg, variant=Variant.SINGLE, masking_enabled=False)
    second = generate_counterfactual(x, target, model, clf, schedule, second_cfg, rng,
                                     embedder=embedder, fixed_mask=fixed)
    second.trace["first_pass"] = first.trace
    return replace(
        second,
        forward_calls=first.forward_calls + second.forward_calls,
        backward_calls=first.backward_calls + second.backward_calls,
        mask=fixed,
        config=cfg,
    )


def count_denoiser_calls(cfg: CFConfig, schedule=None) -> CallCounts:
    """Closed-form denoiser pass counts implied by the configuration."""
    if schedule is not None:
        cfg.validate(schedule)
    tau = cfg.tau
    if cfg.strategy is Strategy.SURROGATE:
        counts = CallCounts(tau, 0)
    elif cfg.strategy is Strategy.THROUGH_DENOISER:
        counts = CallCounts(tau, tau)
    else:
        inner = tau * (tau + 1) // 2
        counts = CallCounts(tau + inner, inner)
    if cfg.variant is not Variant.SINGLE:
        counts = CallCounts(2 * counts.forward, 2 * counts.backward)
    return counts


def preset_config(name: str) -> tuple[CFConfig, int]:
    """Named reference configurations: (generation config, respaced step count)."""
    try:
        cfg, steps = PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg), steps


PRESETS = {
    # Portrait-style attribute edits: perceptual term on, L1 anchored to the
    # noisy state, small dilation.
    "perceptual": (
        CFConfig(tau=60, tau_w=30, lambda_c=10.0, lambda_1=0.05, lambda_p=30.0,
                 l1_target=L1Target.NOISY, mask_threshold=0.15, dilation=5,
                 strategy=Strategy.SURROGATE, variant=Variant.SINGLE, masking_enabled=True),
        200,
    ),
    # Localized marker removal: heavy L1 on the denoised state, wide dilation,
    # no perceptual term.
    "localized": (
        CFConfig(tau=160, tau_w=80, lambda_c=1.0, lambda_1=50.0, lambda_p=0.0,
                 l1_target=L1Target.DENOISED, mask_threshold=0.15, dilation=21,
                 strategy=Strategy.SURROGATE, variant=Variant.SINGLE, masking_enabled=True),
        400,
    ),
}
