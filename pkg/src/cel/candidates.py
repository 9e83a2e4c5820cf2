"""Candidate label set generation and synthetic feature generators.

Every generator draws one uniform number per (sample, class) pair from a
counter-based hash keyed by ``(seed, i, j)``. Output therefore does not depend
on iteration order, and for a fixed seed the uniform generator is monotone in
``rate``: a class included at a low rate is included at every higher rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import LabelSpace
from .exceptions import InsufficientSamplesError

logger = logging.getLogger(__name__)

GENERATOR_KINDS = ("instance_dependent", "uniform", "hierarchical")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "instance_dependent"
    rate: float = 0.1
    seed: int = 0
    aux_train_epochs: int = 200
    aux_temperature: float = 4.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; choose from {GENERATOR_KINDS}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture recipe.

    Class means are drawn from a standard normal in ``d`` dimensions and
    multiplied by ``1 / overlap``; samples add isotropic noise with standard
    deviation ``cluster_spread``. Small ``overlap`` gives well separated blobs.
    With ``n_superclasses`` set, classes are grouped round-robin into
    superclasses whose members share a common center, so that confusion
    concentrates inside each superclass.
    """

    q: int
    d: int
    m: int
    cluster_spread: float = 1.0
    overlap: float = 1.0
    seed: int = 0
    n_superclasses: int | None = None
    superclass_tightness: float = 0.35

    def __post_init__(self):
        if min(self.q, self.d, self.m) <= 0:
            raise ValueError("q, d and m must be positive")
        if self.cluster_spread <= 0 or self.overlap <= 0:
            raise ValueError("cluster_spread and overlap must be positive")


# ---------------------------------------------------------------------------
# counter-based randomness


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) draws keyed by ``(seed, row, col)``; broadcasts its inputs."""
    key = _splitmix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    rows = np.asarray(rows, dtype=np.uint64)
    cols = np.asarray(cols, dtype=np.uint64)
    h = _splitmix64(_splitmix64(key ^ rows) ^ cols)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _uniform_grid(seed: int, m: int, q: int) -> np.ndarray:
    return counter_uniform(seed, np.arange(m)[:, None], np.arange(q)[None, :])


# ---------------------------------------------------------------------------
# synthetic data


def synthesize_gaussian(spec: SyntheticSpec):
    """Draw ``spec.m`` points from ``spec.q`` Gaussian blobs.

    Returns ``(features, truth, label_space)``. Class sizes differ by at most
    one: label ``i % q`` is assigned before a seeded shuffle.
    """
    rng = np.random.default_rng(spec.seed)
    scale = 1.0 / spec.overlap
    superclass_of = None
    if spec.n_superclasses:
        superclass_of = tuple(int(c % spec.n_superclasses) for c in range(spec.q))
        centers = rng.standard_normal((spec.n_superclasses, spec.d))
        offsets = rng.standard_normal((spec.q, spec.d)) * spec.superclass_tightness
        means = (centers[list(superclass_of)] + offsets) * scale
    else:
        means = rng.standard_normal((spec.q, spec.d)) * scale

    truth = np.arange(spec.m) % spec.q
    truth = truth[rng.permutation(spec.m)]
    noise = rng.standard_normal((spec.m, spec.d)) * spec.cluster_spread
    features = (means[truth] + noise).astype(np.float32)
    return features, truth.astype(np.int64), LabelSpace(q=spec.q, superclass_of=superclass_of)


def train_aux_scorer(
    features,
    truth,
    epochs: int = 200,
    seed: int = 0,
    q: int | None = None,
    hidden: int = 64,
    lr: float = 0.01,
    weight_decay: float = 1e-4,
    temperature: float = 4.0,
) -> np.ndarray:
    """Fit a two-layer network on clean labels and return its softmax scores.

    The result is an ``(m, q)`` row-stochastic float64 matrix. Training is
    full-batch Adam on standardized features, deterministic per ``seed``.
    Logits are divided by ``temperature`` before the softmax; a sharp scorer
    (temperature 1) concentrates the flip mass on one or two confusers, where
    the probability clamp then discards most of it.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(truth, dtype=np.int64)
    q = int(q if q is not None else y.max() + 1)
    m = X.shape[0]
    if m < q:
        raise InsufficientSamplesError(f"insufficient samples: m={m} < q={q}")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xt = torch.as_tensor((X - mu) / sd, dtype=torch.float32)
    yt = torch.as_tensor(y)

    gen = torch.Generator().manual_seed(int(seed))
    net = nn.Sequential(nn.Linear(X.shape[1], hidden), nn.ReLU(), nn.Linear(hidden, q))
    with torch.no_grad():
        for p in net.parameters():
            if p.dim() > 1:
                bound = 1.0 / np.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(net(Xt), yt)
        loss.backward()
        opt.step()
    with torch.no_grad():
        scores = torch.softmax(net(Xt).double() / temperature, dim=1).numpy()
    return scores / scores.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# generators


def _scored_flips(scores, truth, eligible, rate, seed):
    """Shared core of the instance-dependent and hierarchical rules.

    For each sample the eligible noisy classes get relative weights
    ``xi = s / max(s)`` and inclusion probability
    ``min(1, rate * n_eligible * xi / sum(xi))`` so that the expected number
    of extra candidates is ``rate * n_eligible`` before clamping.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    m, q = scores.shape
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")

    s = np.where(eligible, scores, 0.0)
    n_elig = eligible.sum(axis=1)
    top = s.max(axis=1, initial=0.0)
    fallback = (n_elig > 0) & (top <= 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(top[:, None] > 0, s / top[:, None], 0.0)
        total = xi.sum(axis=1, keepdims=True)
        p = np.where(total > 0, rate * n_elig[:, None] * xi / total, 0.0)
    p[fallback] = np.where(eligible[fallback], rate, 0.0)
    p = np.clip(p, 0.0, 1.0)

    u = _uniform_grid(seed, m, q)
    candidates = eligible & (u < p)
    candidates[np.arange(m), truth] = True
    return candidates, int(fallback.sum()), int((n_elig == 0).sum())


def generate_instance_dependent(scores, truth, rate: float, seed: int, meta: dict | None = None):
    scores = np.asarray(scores, dtype=np.float64)
    m, q = scores.shape
    eligible = np.ones((m, q), dtype=bool)
    eligible[np.arange(m), np.asarray(truth)] = False
    candidates, fallback, _ = _scored_flips(scores, truth, eligible, rate, seed)
    if fallback:
        logger.warning("%d samples had all-zero noisy scores; used uniform flips", fallback)
    if meta is not None:
        meta.update(generator="instance_dependent", rate=rate, seed=seed, uniform_fallbacks=fallback)
    return candidates


def generate_uniform(truth, q: int, rate: float, seed: int, meta: dict | None = None):
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    truth = np.asarray(truth, dtype=np.int64)
    m = truth.shape[0]
    candidates = _uniform_grid(seed, m, q) < rate
    candidates[np.arange(m), truth] = True
    if meta is not None:
        meta.update(generator="uniform", rate=rate, seed=seed)
    return candidates


def generate_hierarchical(
    scores,
    truth,
    superclass_of: Sequence[int],
    rate: float,
    seed: int,
    meta: dict | None = None,
):
    """Instance-dependent flips confined to the truth's superclass."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    m, q = scores.shape
    supers = np.asarray(superclass_of)
    if supers.shape != (q,):
        raise ValueError(f"superclass map must cover all {q} classes")
    eligible = supers[None, :] == supers[truth][:, None]
    eligible[np.arange(m), truth] = False
    candidates, fallback, singletons = _scored_flips(scores, truth, eligible, rate, seed)
    if meta is not None:
        meta.update(
            generator="hierarchical",
            rate=rate,
            seed=seed,
            uniform_fallbacks=fallback,
            singleton_superclass_samples=singletons,
        )
    return candidates


def generate_candidates(config: GeneratorConfig, features, truth, label_space: LabelSpace, meta=None):
    """Dispatch on ``config.kind``; trains the auxiliary scorer when needed."""
    if config.kind == "uniform":
        return generate_uniform(truth, label_space.q, config.rate, config.seed, meta)
    scores = train_aux_scorer(
        features,
        truth,
        epochs=config.aux_train_epochs,
        seed=config.seed,
        q=label_space.q,
        temperature=config.aux_temperature,
    )
    if config.kind == "instance_dependent":
        out = generate_instance_dependent(scores, truth, config.rate, config.seed, meta)
    else:
        if label_space.superclass_of is None:
            raise ValueError("hierarchical generation needs a superclass map")
        out = generate_hierarchical(scores, truth, label_space.superclass_of, config.rate, config.seed, meta)
    if meta is not None:
        meta["aux_train_epochs"] = config.aux_train_epochs
        meta["aux_temperature"] = config.aux_temperature
    return out
