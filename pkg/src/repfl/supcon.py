"""Supervised contrastive loss with analytic gradients, plus two-view augmentation.

For anchor ``j`` the candidate set A(j) is every other row of the batch,
P(j) the other rows sharing its label and N(j) the rest.  With
``s_ja = z_j . z_a / tau``::

    l_j = logsumexp_{a in A(j)} s_ja - logsumexp_{p in P(j)} s_jp + log|P(j)|

Anchors without positives contribute zero and are counted as skipped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import RngStream, as_matrix

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class ContrastiveBatch:
    z: np.ndarray
    labels: np.ndarray
    tau: float = 0.1
    degenerate: np.ndarray = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        z = as_matrix(self.z)
        labels = np.asarray(self.labels).astype(np.int64).ravel()
        if labels.shape[0] != z.shape[0]:
            raise ShapeError(f"{z.shape[0]} embeddings but {labels.shape[0]} labels")
        degenerate = (np.zeros(z.shape[0], dtype=bool) if self.degenerate is None
                      else np.asarray(self.degenerate, dtype=bool))
        norms = np.sqrt(np.einsum("ij,ij->i", z, z))
        bad = ~degenerate & (np.abs(norms - 1.0) > UNIT_TOL)
        if bad.any():
            raise ShapeError(f"rows {np.flatnonzero(bad)[:5].tolist()} are not unit-norm")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "degenerate", degenerate)

    def __len__(self):
        return self.z.shape[0]

    def anchor_sets(self, j: int):
        """Index arrays ``(A(j), P(j), N(j))`` for anchor ``j``."""
        n = len(self)
        a = np.array([k for k in range(n) if k != j], dtype=np.int64)
        same = self.labels[a] == self.labels[j]
        return a, a[same], a[~same]

    def positive_mask(self) -> np.ndarray:
        pos = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(pos, False)
        return pos


class SCLoss(NamedTuple):
    total: float
    per_anchor: np.ndarray
    skipped: int

    @property
    def mean(self) -> float:
        return self.total / len(self.per_anchor)


def _masked_lse(logits, mask):
    masked = np.where(mask, logits, -np.inf)
    peak = masked.max(axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(masked - peak).sum(axis=1)) + peak[:, 0]
    return lse


def _terms(batch: ContrastiveBatch):
    n = len(batch)
    logits = batch.z @ batch.z.T / batch.tau
    cand = ~np.eye(n, dtype=bool)
    pos = batch.positive_mask()
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    lse_a = _masked_lse(logits, cand)
    lse_p = _masked_lse(logits, pos)
    return logits, cand, pos, n_pos, valid, lse_a, lse_p


def softmax_weights(batch: ContrastiveBatch):
    """Return ``(P, X, valid)``.

    ``P[j, a]`` is the softmax of anchor j's similarities over A(j) and
    ``X[j, p]`` the softmax over P(j); rows of skipped anchors are zero.
    """
    logits, cand, pos, _, valid, lse_a, lse_p = _terms(batch)
    p_mat = np.where(cand, np.exp(logits - lse_a[:, None]), 0.0)
    safe_lse_p = np.where(valid, lse_p, 0.0)
    x_mat = np.where(pos, np.exp(logits - safe_lse_p[:, None]), 0.0)
    p_mat[~valid] = 0.0
    return p_mat, x_mat, valid


def sc_loss(batch: ContrastiveBatch) -> SCLoss:
    _, _, _, n_pos, valid, lse_a, lse_p = _terms(batch)
    per_anchor = np.zeros(len(batch))
    per_anchor[valid] = lse_a[valid] - lse_p[valid] + np.log(n_pos[valid])
    return SCLoss(float(per_anchor.sum()), per_anchor, int((~valid).sum()))


def _score_grad(batch):
    # d l_j / d s_ja = P_ja - X_ja
    p_mat, x_mat, _ = softmax_weights(batch)
    return p_mat - x_mat


def sc_grad_z(batch: ContrastiveBatch, full: bool = False) -> np.ndarray:
    """Gradient of the SC loss with respect to the embeddings.

    With ``full=False`` row j holds d l_j / d z_j, the anchor's own term
    ``(1/tau)(sum_p z_p (P_jp - X_jp) + sum_n z_n P_jn)``.  With
    ``full=True`` row k holds d(sum_j l_j)/d z_k, which also collects the
    contributions of z_k appearing as a positive or negative of other anchors.
    """
    w = _score_grad(batch)
    if full:
        return (w + w.T) @ batch.z / batch.tau
    return w @ batch.z / batch.tau


def project_to_tangent(z, grad_z, norms, eps: float = 1e-12):
    """Chain ``grad_z`` through ``z = r/||r||``: ``(I - z z^T) grad_z / ||r||``.

    Returns ``(grad_r, degenerate)``; degenerate rows come back zero.
    """
    z = as_matrix(z)
    grad_z = as_matrix(grad_z)
    norms = np.asarray(norms, dtype=np.float64).ravel()
    degenerate = ~(norms > eps)
    radial = np.einsum("ij,ij->i", z, grad_z)
    grad_r = (grad_z - radial[:, None] * z) / np.where(degenerate, 1.0, norms)[:, None]
    grad_r[degenerate] = 0.0
    return grad_r, degenerate


def sc_grad_r(batch: ContrastiveBatch, norms, full: bool = True):
    """Gradient with respect to the pre-normalization features r.

    ``full=True`` differentiates the whole batch loss (what training uses);
    ``full=False`` gives the per-anchor form d l_j / d r_j.
    """
    return project_to_tangent(batch.z, sc_grad_z(batch, full=full), norms)


def anchor_gradient_terms(batch: ContrastiveBatch, norm_j: float, j: int):
    """Split d l_j / d r_j into its positive-set and negative-set parts.

    Both parts carry the common ``1/(tau ||r_j||)`` factor.
    """
    p_mat, x_mat, valid = softmax_weights(batch)
    _, pos, neg = batch.anchor_sets(j)
    zj = batch.z[j]
    scale = 1.0 / (batch.tau * norm_j)
    if not valid[j]:
        zero = np.zeros_like(zj)
        return zero, zero
    tang_p = batch.z[pos] - np.outer(batch.z[pos] @ zj, zj)
    tang_n = batch.z[neg] - np.outer(batch.z[neg] @ zj, zj)
    pos_term = scale * ((p_mat[j, pos] - x_mat[j, pos]) @ tang_p)
    neg_term = scale * (p_mat[j, neg] @ tang_n)
    return pos_term, neg_term


def tangent_norm(zj, zp) -> float:
    """Norm of the component of ``zp`` orthogonal to ``zj``."""
    zj = np.asarray(zj, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    return float(np.linalg.norm(zp - (zj @ zp) * zj))


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic input perturbations used to make the two views.

    ``noise_std`` adds gaussian noise per feature, ``mask_prob`` zeroes
    features independently.  When ``image_shape=(h, w, c)`` is set, ``flip``
    mirrors the width axis with probability 1/2 and ``shift`` translates by
    up to that many pixels with zero padding.
    """

    noise_std: float = 0.05
    mask_prob: float = 0.1
    flip: bool = False
    shift: int = 0
    image_shape: tuple = None

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.shift < 0:
            raise ConfigError("shift must be non-negative")
        if (self.flip or self.shift) and self.image_shape is None:
            raise ConfigError("flip/shift need image_shape")

    @classmethod
    def identity(cls):
        return cls(noise_std=0.0, mask_prob=0.0)


def _image_ops(x, policy, gen):
    h, w, c = policy.image_shape
    imgs = x.reshape(-1, h, w, c).copy()
    if policy.flip:
        flip = gen.random(imgs.shape[0]) < 0.5
        imgs[flip] = imgs[flip, :, ::-1, :]
    if policy.shift:
        s = policy.shift
        padded = np.pad(imgs, ((0, 0), (s, s), (s, s), (0, 0)))
        offsets = gen.integers(0, 2 * s + 1, size=(imgs.shape[0], 2))
        for k, (dy, dx) in enumerate(offsets):
            imgs[k] = padded[k, dy:dy + h, dx:dx + w, :]
    return imgs.reshape(x.shape[0], -1)


def augment(samples, policy: AugmentationPolicy, gen: np.random.Generator):
    """One random view of every row."""
    x = as_matrix(samples).copy()
    if policy.image_shape is not None:
        if int(np.prod(policy.image_shape)) != x.shape[1]:
            raise ShapeError(f"image_shape {policy.image_shape} does not match {x.shape[1]} features")
        if policy.flip or policy.shift:
            x = _image_ops(x, policy, gen)
    if policy.noise_std > 0:
        x += policy.noise_std * gen.standard_normal(x.shape)
    if policy.mask_prob > 0:
        x *= gen.random(x.shape) >= policy.mask_prob
    return x


def augment_twice(samples, labels, policy: AugmentationPolicy, rng):
    """Two views per sample, interleaved so rows 2k and 2k+1 come from sample k."""
    x = as_matrix(samples)
    if x.shape[0] == 0:
        raise ShapeError("cannot augment an empty batch")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    out = np.empty((2 * x.shape[0], x.shape[1]))
    out[0::2] = augment(x, policy, gen)
    out[1::2] = augment(x, policy, gen)
    return out, np.repeat(np.asarray(labels), 2)
