"""Small differentiable networks and their training loops.

Two denoiser architectures (an MLP for low-dimensional vectors, a three-layer
conv net for images) predict the noise added at a given timestep, conditioned
through a learned per-timestep embedding added to the first hidden layer.
Classifiers mirror the split (two-layer MLP, or two strided convs plus a
dense head). A closed-form denoiser for isotropic Gaussian mixtures backs the
toy benchmarks without any training noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import CallCounter, Tensor
from .errors import ParameterError, ShapeError, TrainingDivergedError

__all__ = [
    "TrainConfig",
    "TrainResult",
    "MlpDenoiser",
    "ConvDenoiser",
    "MlpClassifier",
    "ConvClassifier",
    "LinearClassifier",
    "mixture_linear_classifier",
    "GMMPrior",
    "GmmDenoiser",
    "gmm_posterior_denoiser",
    "classify",
    "input_gradient",
    "train_denoiser",
    "train_classifier",
]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9


class TrainResult(NamedTuple):
    model: "object"
    losses: list


class _Net:
    """Parameter store shared by all trainable models."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name, data, trainable=True):
        self.params[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=trainable)
        return self.params[name]

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def weight_vector(self) -> np.ndarray:
        """All parameters flattened in registration order (for checkpoints)."""
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def load_weight_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, np.float32)
        off = 0
        for p in self.params.values():
            n = p.data.size
            p.data = vec[off : off + n].reshape(p.data.shape).copy()
            off += n
        if off != vec.size:
            raise ShapeError(f"weight vector has {vec.size} entries, model needs {off}")


def _he(rng, fan_in, shape):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def _as_batch(x, sample_ndim):
    x = ad.astensor(x)
    if x.data.ndim == sample_ndim:
        return x.reshape((1,) + x.data.shape), True
    if x.data.ndim == sample_ndim + 1:
        return x, False
    raise ShapeError(f"expected {sample_ndim}- or {sample_ndim + 1}-dimensional input, got shape {x.data.shape}")


def _t_indices(t, n, n_timesteps):
    idx = np.asarray(t, dtype=np.int64)
    if idx.ndim == 0:
        idx = np.full(n, int(idx), dtype=np.int64)
    if np.any(idx < 1) or np.any(idx > n_timesteps):
        raise IndexError(f"timestep outside [1, {n_timesteps}]")
    return idx - 1


class MlpDenoiser(_Net):
    """dim -> hidden -> hidden -> dim noise predictor for vector data."""

    kind = "mlp_denoiser"

    def __init__(self, dim: int, n_timesteps: int, hidden: int = 128, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim, self.hidden, self.n_timesteps = dim, hidden, n_timesteps
        self._add("w1", _he(rng, dim, (dim, hidden)))
        self._add("b1", np.zeros(hidden))
        self._add("emb", np.zeros((n_timesteps, hidden)))
        self._add("w2", _he(rng, hidden, (hidden, hidden)))
        self._add("b2", np.zeros(hidden))
        self._add("w3", np.zeros((hidden, dim)))
        self._add("b3", np.zeros(dim))
        self._add("skip", np.zeros(dim))

    def dims(self):
        return [self.dim, self.hidden, self.n_timesteps]

    def predict_noise(self, x, t, counter: CallCounter | None = None) -> Tensor:
        xb, single = _as_batch(x, 1)
        if xb.data.shape[1] != self.dim:
            raise ShapeError(f"expected vectors of length {self.dim}")
        if counter is not None:
            counter.forward += 1
        p = self.params
        idx = _t_indices(t, xb.data.shape[0], self.n_timesteps)
        h = ad.matmul(xb, p["w1"]) + ad.expand_vector(p["b1"], (xb.data.shape[0], self.hidden), 1)
        h = ad.leaky_relu(h + ad.take_rows(p["emb"], idx))
        h = ad.leaky_relu(ad.matmul(h, p["w2"]) + ad.expand_vector(p["b2"], h.data.shape, 1))
        out = ad.matmul(h, p["w3"]) + ad.expand_vector(p["b3"], (h.data.shape[0], self.dim), 1)
        out = out + xb * ad.expand_vector(p["skip"], xb.data.shape, 1)
        out = ad.count_backward(out, counter)
        return out.reshape(self.dim) if single else out


class ConvDenoiser(_Net):
    """Three same-size conv layers for single- or few-channel images."""

    kind = "conv_denoiser"

    def __init__(self, channels: int, n_timesteps: int, hidden: int = 32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.hidden, self.n_timesteps = channels, hidden, n_timesteps
        k = 3
        self._add("k1", _he(rng, channels * k * k, (hidden, channels, k, k)))
        self._add("b1", np.zeros(hidden))
        self._add("emb", np.zeros((n_timesteps, hidden)))
        self._add("k2", _he(rng, hidden * k * k, (hidden, hidden, k, k)))
        self._add("b2", np.zeros(hidden))
        # zero-initialized head plus a learned input skip: the net starts as a
        # scaled identity, which is near-optimal at high noise levels
        self._add("k3", np.zeros((channels, hidden, k, k)))
        self._add("b3", np.zeros(channels))
        self._add("skip", np.zeros(channels))

    def dims(self):
        return [self.channels, self.hidden, self.n_timesteps]

    def predict_noise(self, x, t, counter: CallCounter | None = None) -> Tensor:
        xb, single = _as_batch(x, 3)
        if xb.data.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels}-channel images")
        if counter is not None:
            counter.forward += 1
        p = self.params
        n = xb.data.shape[0]
        idx = _t_indices(t, n, self.n_timesteps)
        h = ad.conv2d(xb, p["k1"], stride=1, padding=1)
        h = h + ad.expand_vector(p["b1"], h.data.shape, 1)
        # Per-timestep embedding enters as a channel bias, constant per sample.
        emb = ad.take_rows(p["emb"], idx)
        h = ad.leaky_relu(h + ad.expand_hw(emb, h.data.shape))
        h = ad.conv2d(h, p["k2"], stride=1, padding=1)
        h = ad.leaky_relu(h + ad.expand_vector(p["b2"], h.data.shape, 1))
        out = ad.conv2d(h, p["k3"], stride=1, padding=1)
        out = out + ad.expand_vector(p["b3"], out.data.shape, 1)
        out = out + xb * ad.expand_vector(p["skip"], xb.data.shape, 1)
        out = ad.count_backward(out, counter)
        return out.reshape(out.data.shape[1:]) if single else out


class MlpClassifier(_Net):
    """Two-layer MLP with softmax output."""

    kind = "mlp_classifier"

    def __init__(self, dim: int, n_classes: int = 2, hidden: int = 64, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim, self.hidden, self.n_classes = dim, hidden, n_classes
        self._add("w1", _he(rng, dim, (dim, hidden)))
        self._add("b1", np.zeros(hidden))
        self._add("w2", _he(rng, hidden, (hidden, n_classes)))
        self._add("b2", np.zeros(n_classes))

    def dims(self):
        return [self.dim, self.hidden, self.n_classes]

    def logits(self, x) -> Tensor:
        xb, single = _as_batch(x, 1)
        if xb.data.shape[1] != self.dim:
            raise ShapeError(f"expected vectors of length {self.dim}")
        p = self.params
        h = ad.relu(ad.matmul(xb, p["w1"]) + ad.expand_vector(p["b1"], (xb.data.shape[0], self.hidden), 1))
        out = ad.matmul(h, p["w2"]) + ad.expand_vector(p["b2"], (h.data.shape[0], self.n_classes), 1)
        return out.reshape(self.n_classes) if single else out

    def features(self, x) -> Tensor:
        """Penultimate activations; the default perceptual embedder."""
        xb, single = _as_batch(x, 1)
        p = self.params
        h = ad.relu(ad.matmul(xb, p["w1"]) + ad.expand_vector(p["b1"], (xb.data.shape[0], self.hidden), 1))
        return h.reshape(self.hidden) if single else h


class LinearClassifier(_Net):
    """Plain logistic model: logits = x W + b."""

    kind = "linear_classifier"

    def __init__(self, dim: int, n_classes: int = 2, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim, self.n_classes = dim, n_classes
        self._add("w", _he(rng, dim, (dim, n_classes)))
        self._add("b", np.zeros(n_classes))

    def dims(self):
        return [self.dim, self.n_classes]

    def logits(self, x) -> Tensor:
        xb, single = _as_batch(x, 1)
        if xb.data.shape[1] != self.dim:
            raise ShapeError(f"expected vectors of length {self.dim}")
        out = ad.matmul(xb, self.params["w"]) + ad.expand_vector(
            self.params["b"], (xb.data.shape[0], self.n_classes), 1
        )
        return out.reshape(self.n_classes) if single else out

    def features(self, x) -> Tensor:
        xb, single = _as_batch(x, 1)
        return xb.reshape(self.dim) if single else xb


def mixture_linear_classifier(prior: "GMMPrior", sharpness: float = 1.0) -> LinearClassifier:
    """Logistic classifier whose decision rule matches the mixture's posterior.

    ``sharpness = 1`` gives the exact posterior log-odds; smaller values
    soften the slope so classifier gradients stay informative away from the
    decision boundary (useful as a guidance signal).
    """
    w = (prior.means / prior.variances[:, None]).T * sharpness
    b = (-0.5 * np.square(prior.means).sum(1) / prior.variances + np.log(prior.weights)) * sharpness
    clf = LinearClassifier(prior.dim, prior.means.shape[0])
    clf.params["w"].data = w.astype(np.float32)
    clf.params["b"].data = b.astype(np.float32)
    return clf.freeze()


class ConvClassifier(_Net):
    """Two strided convs and a dense head for 32x32 images."""

    kind = "conv_classifier"

    def __init__(self, channels: int, n_classes: int = 2, side: int = 32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.n_classes, self.side = channels, n_classes, side
        c1, c2, k = 8, 16, 3
        self.feat_side = side // 4
        self.feat_dim = c2 * self.feat_side * self.feat_side
        self._add("k1", _he(rng, channels * k * k, (c1, channels, k, k)))
        self._add("b1", np.zeros(c1))
        self._add("k2", _he(rng, c1 * k * k, (c2, c1, k, k)))
        self._add("b2", np.zeros(c2))
        self._add("w", _he(rng, self.feat_dim, (self.feat_dim, n_classes)))
        self._add("b", np.zeros(n_classes))

    def dims(self):
        return [self.channels, self.n_classes, self.side]

    def features(self, x) -> Tensor:
        xb, single = _as_batch(x, 3)
        if xb.data.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels}-channel images")
        p = self.params
        h = ad.conv2d(xb, p["k1"], stride=2, padding=1)
        h = ad.relu(h + ad.expand_vector(p["b1"], h.data.shape, 1))
        h = ad.conv2d(h, p["k2"], stride=2, padding=1)
        h = ad.relu(h + ad.expand_vector(p["b2"], h.data.shape, 1))
        h = h.reshape(xb.data.shape[0], self.feat_dim)
        return h.reshape(self.feat_dim) if single else h

    def logits(self, x) -> Tensor:
        xb, single = _as_batch(x, 3)
        h = self.features(xb)
        out = ad.matmul(h, self.params["w"]) + ad.expand_vector(
            self.params["b"], (h.data.shape[0], self.n_classes), 1
        )
        return out.reshape(self.n_classes) if single else out


def classify(model, x) -> np.ndarray:
    """Softmax class probabilities for one sample or a batch."""
    logp = ad.log_softmax(model.logits(ad.astensor(x).detach()))
    return np.exp(logp.data.astype(np.float64)).astype(np.float32)


def input_gradient(model, x, target) -> np.ndarray:
    """Gradient of -log p(target | x) with respect to the input pixels."""
    leaf = Tensor(np.asarray(x, np.float32).copy(), requires_grad=True)
    logp = ad.log_softmax(model.logits(leaf))
    picked = ad.pick(logp, target)
    loss = -(picked.sum() if picked.data.ndim else picked)
    loss.backward()
    return leaf.grad.copy()


def _sgd_step(net: _Net, velocity: dict, lr: float, momentum: float):
    for name, p in net.params.items():
        if p.grad is None:
            continue
        v = velocity.get(name)
        v = p.grad if v is None else momentum * v + p.grad
        velocity[name] = v
        p.data = p.data - lr * v
    net.zero_grads()


def _check_finite(loss_val, trace):
    if not np.isfinite(loss_val):
        raise TrainingDivergedError(f"non-finite loss {loss_val} at step {len(trace)}", trace)


def train_denoiser(data: np.ndarray, schedule, cfg: TrainConfig, seed: int, model=None) -> TrainResult:
    """Fit a noise predictor by regressing the injected noise at random steps."""
    data = np.asarray(data, np.float32)
    if data.shape[0] == 0:
        raise ParameterError("empty training set")
    rng = np.random.default_rng(seed)
    if model is None:
        if data.ndim == 2:
            model = MlpDenoiser(data.shape[1], schedule.T, rng=rng)
        elif data.ndim == 4:
            model = ConvDenoiser(data.shape[1], schedule.T, rng=rng)
        else:
            raise ShapeError("training data must be (N, dim) vectors or (N, c, h, w) images")
    model.unfreeze()
    bars = schedule.alpha_bars.astype(np.float32)
    n = data.shape[0]
    expand = (slice(None),) + (None,) * (data.ndim - 1)
    velocity, trace = {}, []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            t = rng.integers(1, schedule.T + 1, size=batch.shape[0])
            eps = rng.standard_normal(batch.shape).astype(np.float32)
            ab = bars[t - 1][expand]
            x_t = np.sqrt(ab) * batch + np.sqrt(1.0 - ab) * eps
            pred = model.predict_noise(Tensor(x_t), t)
            diff = pred - Tensor(eps)
            loss = (diff * diff).mean()
            _check_finite(loss.item(), trace)
            loss.backward()
            _sgd_step(model, velocity, cfg.lr, cfg.momentum)
            trace.append(loss.item())
    model.freeze()
    return TrainResult(model, trace)


def train_classifier(data: np.ndarray, labels: np.ndarray, cfg: TrainConfig, seed: int,
                     model=None, n_classes: int = 2, subset_mask=None) -> TrainResult:
    """Fit a classifier with cross-entropy; ``subset_mask`` restricts the
    training rows (e.g. to one diagnostic group) without touching the data."""
    data = np.asarray(data, np.float32)
    labels = np.asarray(labels, np.int64)
    if subset_mask is not None:
        data, labels = data[subset_mask], labels[subset_mask]
    if data.shape[0] == 0:
        raise ParameterError("empty training set")
    rng = np.random.default_rng(seed)
    if model is None:
        if data.ndim == 2:
            model = MlpClassifier(data.shape[1], n_classes, rng=rng)
        elif data.ndim == 4:
            model = ConvClassifier(data.shape[1], n_classes, side=data.shape[2], rng=rng)
        else:
            raise ShapeError("training data must be (N, dim) vectors or (N, c, h, w) images")
    model.unfreeze()
    n = data.shape[0]
    velocity, trace = {}, []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logp = ad.log_softmax(model.logits(Tensor(data[idx])))
            loss = -ad.pick(logp, labels[idx]).mean()
            _check_finite(loss.item(), trace)
            loss.backward()
            _sgd_step(model, velocity, cfg.lr, cfg.momentum)
            trace.append(loss.item())
    model.freeze()
    return TrainResult(model, trace)


@dataclass(frozen=True)
class GMMPrior:
    """Isotropic Gaussian mixture: weights (K,), means (K, D), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, np.float64)
        m = np.asarray(self.means, np.float64)
        v = np.asarray(self.variances, np.float64)
        if w.ndim != 1 or m.ndim != 2 or v.shape != w.shape or m.shape[0] != w.shape[0]:
            raise ParameterError("mixture arrays have inconsistent shapes")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ParameterError("component weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ParameterError("component variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


class GmmDenoiser:
    """Exact MSE-optimal denoiser for an isotropic Gaussian mixture prior.

    The posterior mean E[x_0 | x_t] has a closed form (per-component Gaussian
    conditioning, weights from the marginal likelihoods), so the implied noise
    estimate is exact and differentiable with a hand-written reverse rule.
    """

    kind = "gmm_denoiser"

    def __init__(self, prior: GMMPrior, schedule):
        self.prior = prior
        self.schedule = schedule
        self.n_timesteps = schedule.T
        self.fallback_count = 0
        self.last_fallback = False

    def _moments(self, t):
        abar = self.schedule.alpha_bar(int(t))
        sqab = math.sqrt(abar)
        v = abar * self.prior.variances + (1.0 - abar)   # marginal variance per component
        c = sqab * self.prior.variances / v              # posterior shrinkage per component
        return abar, sqab, v, c

    def _posterior_terms(self, x, t):
        prior = self.prior
        abar, sqab, v, c = self._moments(t)
        xb = np.atleast_2d(np.asarray(x, np.float64))
        diff = xb[:, None, :] - sqab * prior.means[None]           # (N, K, D)
        sq = np.square(diff).sum(-1)                               # (N, K)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            score = np.log(prior.weights)[None] - 0.5 * prior.dim * np.log(2 * np.pi * v)[None] \
                - sq / (2.0 * v)[None]
        bad = ~np.isfinite(score).any(axis=1)
        self.last_fallback = bool(bad.any())
        if self.last_fallback:
            self.fallback_count += int(bad.sum())
            nearest = np.nanargmin(np.where(np.isfinite(sq), sq, np.inf), axis=1)
            score = np.where(bad[:, None], -np.inf, score)
            score[bad, nearest[bad]] = 0.0
        shifted = score - score.max(axis=1, keepdims=True)
        wt = np.exp(shifted)
        wt /= wt.sum(axis=1, keepdims=True)                        # (N, K)
        m = prior.means[None] + c[None, :, None] * diff            # (N, K, D)
        mean = (wt[..., None] * m).sum(1)                          # (N, D)
        return wt, m, diff, v, c, mean, bad

    def posterior_mean(self, x, t) -> np.ndarray:
        """Closed-form E[x_0 | x_t] at step t (numpy, no tape)."""
        x = np.asarray(x, np.float64)
        single = x.ndim == 1
        mean = self._posterior_terms(x, t)[5]
        out = mean.astype(np.float32)
        return out[0] if single else out

    def _posterior_mean_op(self, x: Tensor, t) -> Tensor:
        wt, m, diff, v, c, mean, bad = self._posterior_terms(x.data, t)
        single = x.data.ndim == 1
        shape = x.data.shape

        def vjp(g):
            gb = np.atleast_2d(g.astype(np.float64))
            grad_s = -diff / v[None, :, None]                      # d score / d x
            gbar = (wt[..., None] * grad_s).sum(1)
            um = (gb[:, None, :] * m).sum(-1)                      # (N, K)
            du = (wt * c[None]).sum(1)[:, None] * gb
            mix = ((um * wt)[..., None] * (grad_s - gbar[:, None, :])).sum(1)
            mix[bad] = 0.0  # frozen one-hot weights under the fallback
            out = (du + mix).astype(np.float32)
            return (out.reshape(shape),)

        data = mean.astype(np.float32)
        return Tensor._from_op(data[0] if single else data, (x,), vjp)

    def predict_noise(self, x, t, counter: CallCounter | None = None) -> Tensor:
        x = ad.astensor(x)
        t = int(t)
        if not 1 <= t <= self.n_timesteps:
            raise IndexError(f"timestep {t} outside [1, {self.n_timesteps}]")
        if counter is not None:
            counter.forward += 1
        abar, sqab, _, _ = self._moments(t)
        mean = self._posterior_mean_op(x, t)
        eps_bar = (x - mean * sqab) * (1.0 / math.sqrt(1.0 - abar))
        return ad.count_backward(eps_bar, counter)


def gmm_posterior_denoiser(prior: GMMPrior, schedule) -> GmmDenoiser:
    return GmmDenoiser(prior, schedule)
