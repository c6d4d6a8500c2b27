"""Posterior-robustness quantities: exact KL, Fisher information, regularizer.

The central object is the Fisher information matrix of the decoder posterior
at a representation z,

    I(z) = sum_y q(y|z) * grad_z log q(y|z) grad_z log q(y|z)^T,

whose trace, scaled by half the channel noise variance, approximates the
expected KL divergence between the noise-free posterior q(.|z) and the noisy
posterior q(.|z_hat) to second order. That scaled trace is the closed-form
training penalty; the Monte-Carlo expected KL here is its independent check.

The trace is computed exactly, one backward pass per class, and the
computation is recorded on the tape: the per-class input-gradients are tape
nodes and the posterior weights q(y|z) are kept differentiable, so the trace
can sit inside a training loss and be differentiated once more. A
sampled-class estimator is available for large class counts; it is cheaper
but approximate, and its gradient ignores the dependence of the class
distribution on the parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import (ChannelSpec, draw_fading_coefficients, equalization_gains,
                      gaussian_noise)
from .models import DecoderModel
from .rng import CounterRng

logger = logging.getLogger(__name__)

KL_LOG_CLAMP = 1e-12


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for two categorical distributions over the same classes.

    q entries are clamped below at 1e-12 before the log; 0 * log 0 is 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"expected two distributions of equal length, got {p.shape}, {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0.0):
            raise ValueError(f"distribution {name} has negative entries")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError(f"distribution {name} sums to {dist.sum()!r}, not 1")
    if np.any(q < KL_LOG_CLAMP):
        logger.debug("kl_categorical clamped %d entries below %g",
                     int(np.sum(q < KL_LOG_CLAMP)), KL_LOG_CLAMP)
    q = np.maximum(q, KL_LOG_CLAMP)
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p_i || q_i) with the same clamping rule, no validation."""
    q = np.maximum(q, KL_LOG_CLAMP)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, KL_LOG_CLAMP)) - np.log(q)), 0.0)
    return terms.sum(axis=1)


@dataclass
class FisherResult:
    """Fisher information summary at a single representation."""

    trace: float
    class_grad_norms: list[float]
    matrix: np.ndarray | None = None


def _class_gradient_nodes(decoder: DecoderModel, z_node: ad.Tensor):
    """Per-class input-gradient nodes of the log posterior, one backward pass each.

    Returns (log_posteriors[b,C] node, list over classes of [b,k] gradient
    nodes). All returned nodes stay attached to the graph that produced
    z_node, so downstream expressions remain differentiable.
    """
    logq = decoder.log_posterior_all(z_node)
    batch = z_node.data.shape[0]
    grads = []
    for y in range(decoder.num_classes):
        labels = np.full(batch, y, dtype=np.int64)
        root = ad.sum_all(ad.gather_labels(logq, labels))
        grads.append(ad.backward(root, [z_node])[z_node])
    return logq, grads


def _sampled_class_labels(probs: np.ndarray, draws: int, rng: CounterRng) -> np.ndarray:
    """draws class labels per row, sampled from each row's distribution."""
    cumulative = np.cumsum(probs, axis=1)
    u = rng.uniforms(probs.shape[0] * draws).reshape(draws, probs.shape[0])
    u = u * cumulative[:, -1]
    labels = np.empty((draws, probs.shape[0]), dtype=np.int64)
    for i in range(probs.shape[0]):
        labels[:, i] = np.searchsorted(cumulative[i], u[:, i], side="right")
    return np.minimum(labels, probs.shape[1] - 1)


def fisher_trace_node(decoder: DecoderModel, z_node: ad.Tensor,
                      class_sample: int | None = None,
                      rng: CounterRng | None = None) -> ad.Tensor:
    """Per-sample Tr(I(z)) as a differentiable node, shape [b].

    Exact mode (class_sample None) evaluates sum_y q(y|z) ||grad_z log q||^2
    with one backward pass per class. Sampled mode averages ||grad_z log q||^2
    over class_sample labels drawn from q(.|z); approximate, for large C.
    """
    if class_sample is None:
        logq, grads = _class_gradient_nodes(decoder, z_node)
        batch = z_node.data.shape[0]
        trace = None
        for y, g in enumerate(grads):
            labels = np.full(batch, y, dtype=np.int64)
            weight = ad.exp(ad.gather_labels(logq, labels))
            term = ad.mul(weight, ad.sum_axis(ad.square(g), 1))
            trace = term if trace is None else ad.add(trace, term)
        return trace

    if class_sample < 1:
        raise ValueError("class_sample must be >= 1")
    if rng is None:
        raise ValueError("sampled-class mode needs a generator")
    logq = decoder.log_posterior_all(z_node)
    probs = np.exp(logq.data)
    labels = _sampled_class_labels(probs, class_sample, rng)
    trace = None
    for m in range(class_sample):
        root = ad.sum_all(ad.gather_labels(logq, labels[m]))
        g = ad.backward(root, [z_node])[z_node]
        term = ad.sum_axis(ad.square(g), 1)
        trace = term if trace is None else ad.add(trace, term)
    return ad.scale(trace, 1.0 / class_sample)


def fisher_trace(decoder: DecoderModel, z: np.ndarray,
                 want_matrix: bool = False) -> FisherResult:
    """Exact Fisher information summary at a single representation z[k]."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("fisher_trace takes a single representation vector")
    z_node = ad.Tensor(z.reshape(1, -1))
    logq, grads = _class_gradient_nodes(decoder, z_node)
    probs = np.exp(logq.data[0])
    gradients = np.stack([g.data[0] for g in grads])          # [C, k]
    norms = np.sqrt((gradients**2).sum(axis=1))
    trace = float(np.sum(probs * norms**2))
    matrix = None
    if want_matrix:
        matrix = np.einsum("c,ci,cj->ij", probs, gradients, gradients)
    return FisherResult(trace=trace, class_grad_norms=[float(v) for v in norms],
                        matrix=matrix)


def fisher_matrix(decoder: DecoderModel, z: np.ndarray) -> np.ndarray:
    """Full k x k Fisher information matrix at z."""
    return fisher_trace(decoder, z, want_matrix=True).matrix


def mean_fisher_trace(decoder: DecoderModel, z_batch: np.ndarray,
                      chunk: int = 512) -> float:
    """Mean Tr(I(z_i)) over a batch of representations."""
    z_batch = np.asarray(z_batch, dtype=np.float64)
    total = 0.0
    for start in range(0, z_batch.shape[0], chunk):
        node = fisher_trace_node(decoder, ad.Tensor(z_batch[start:start + chunk]))
        total += float(node.data.sum())
    return total / z_batch.shape[0]


def kl_quadratic(decoder: DecoderModel, z: np.ndarray, z_hat: np.ndarray) -> float:
    """Second-order surrogate 0.5 (z_hat - z)^T I(z) (z_hat - z)."""
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError("z and z_hat must have the same shape")
    delta = z_hat - z
    matrix = fisher_matrix(decoder, z)
    return float(0.5 * delta @ matrix @ delta)


def expected_kl_mc(decoder: DecoderModel, z: np.ndarray, spec: ChannelSpec,
                   samples: int, rng: CounterRng) -> tuple[float, float]:
    """Monte-Carlo estimate of E[KL(q(.|z) || q(.|z_hat))] over channel draws.

    Returns (mean, standard error). For Rayleigh fading, one coefficient is
    drawn per channel use.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected_kl_mc takes a single representation vector")
    values = _expected_kl_rows(decoder, z.reshape(1, -1), spec, samples, rng)[0]
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return mean, stderr


def _expected_kl_rows(decoder: DecoderModel, z_batch: np.ndarray, spec: ChannelSpec,
                      samples: int, rng: CounterRng, chunk_rows: int = 65536) -> np.ndarray:
    """KL draws per representation: returns array [n, samples]."""
    n, k = z_batch.shape
    p = decoder.decode(z_batch)
    out = np.empty((n, samples))
    draws_per_chunk = max(1, chunk_rows // max(n, 1))
    done = 0
    while done < samples:
        take = min(draws_per_chunk, samples - done)
        noise = gaussian_noise((take, n, k), spec.sigma2, rng)
        if spec.family == "rayleigh" and spec.sigma2 > 0.0:
            h = draw_fading_coefficients(take * n, rng).reshape(take, n)
            noise = noise / equalization_gains(h)[:, :, None]
        z_hat = z_batch[None, :, :] + noise
        q = decoder.decode(z_hat.reshape(take * n, k)).reshape(take, n, -1)
        for s in range(take):
            out[:, done + s] = _kl_rows(p, q[s])
        done += take
    return out


def mean_expected_kl(decoder: DecoderModel, z_batch: np.ndarray, spec: ChannelSpec,
                     samples: int, rng: CounterRng) -> tuple[float, float]:
    """Dataset mean of the per-sample MC expected KL; returns (mean, stderr of mean)."""
    values = _expected_kl_rows(decoder, np.asarray(z_batch, dtype=np.float64),
                               spec, samples, rng)
    per_sample = values.mean(axis=1)
    mean = float(per_sample.mean())
    total = values.size
    stderr = float(values.std(ddof=1) / math.sqrt(total)) if total > 1 else 0.0
    return mean, stderr


def penalty_from_covariance(decoder: DecoderModel, z: np.ndarray,
                            noise_cov: np.ndarray) -> float:
    """General second-order penalty 0.5 * Tr(I(z) . Sigma_n).

    Accepts any symmetric PSD covariance; the training path only ever uses
    the diagonal sigma2 * I case (see `regularizer`), but the general form is
    exposed so correlated-noise channels can be checked against it.
    """
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    matrix = fisher_matrix(decoder, z)
    if noise_cov.shape != matrix.shape:
        raise ValueError(f"covariance shape {noise_cov.shape} does not match "
                         f"representation dimension {matrix.shape[0]}")
    return float(0.5 * np.trace(matrix @ noise_cov))


def regularizer(decoder: DecoderModel, z: np.ndarray, sigma2: float,
                family: str = "awgn", h: complex | None = None) -> float:
    """Closed-form robustness penalty at z.

    AWGN: sigma2 / 2 * Tr(I(z)). Rayleigh, conditioned on h:
    sigma2 / (2 |h|^2) * Tr(I(z)).
    """
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be nonnegative")
    family = family.lower()
    if family not in ("awgn", "rayleigh"):
        raise ValueError(f"unknown channel family {family!r}")
    if family == "rayleigh" and h is None:
        raise ValueError("the Rayleigh penalty is conditional on h; pass it")
    trace = fisher_trace(decoder, z).trace
    if family == "awgn":
        return 0.5 * sigma2 * trace
    magnitude = float(equalization_gains(np.array([h]))[0])
    return 0.5 * sigma2 / magnitude**2 * trace
