"""Dense linear algebra helpers, keyed random streams and parameter init.

Matrices are plain ``float64`` numpy arrays; the helpers here add the shape
checks and degenerate-row handling the rest of the package relies on.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim} dimensions")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(m, eps: float = DEFAULT_EPS):
    """Scale each row to unit Euclidean norm.

    Returns ``(z, norms, degenerate)``. Rows whose norm is ``<= eps`` come
    back as zeros and are marked in the boolean ``degenerate`` mask.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("cannot normalize an empty matrix")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    degenerate = norms <= eps
    safe = np.where(degenerate, 1.0, norms)
    z = m / safe[:, None]
    z[degenerate] = 0.0
    return z, norms, degenerate


def _domain_key(domain: str) -> int:
    return zlib.crc32(domain.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, domain, client, round).

    Backed by a counter-based Philox generator, so a stream's draws depend
    only on its id and never on which thread or in which order it is used.
    """

    seed: int
    domain: str = "default"
    client: int = 0
    round: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            [int(self.seed) & 0xFFFFFFFF, _domain_key(self.domain),
             int(self.client) + 1, int(self.round) + 1])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, domain=None, client=None, round=None) -> "RngStream":
        return RngStream(
            self.seed,
            self.domain if domain is None else domain,
            self.client if client is None else client,
            self.round if round is None else round,
        )


def init_params(shape, rng, scheme: str = "uniform-fan-in") -> np.ndarray:
    """Draw a weight matrix uniformly from +-sqrt(1/fan_in).

    ``shape`` is ``(fan_in, fan_out)``. ``rng`` may be an :class:`RngStream`
    or an existing ``numpy.random.Generator``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) <= 0:
        raise ShapeError(f"invalid parameter shape {shape}")
    if scheme != "uniform-fan-in":
        raise ValueError(f"unknown init scheme {scheme!r}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    bound = np.sqrt(1.0 / shape[0])
    return gen.uniform(-bound, bound, size=shape)


def check_finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
