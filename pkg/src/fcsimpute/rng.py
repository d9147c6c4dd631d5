"""Hierarchically keyed random streams and the samplers built on them.

Every stream is a ``numpy.random.Generator`` over the counter-based Philox
bit generator, seeded from a ``SeedSequence`` whose spawn key encodes the
label path (replicate, imputation, interval, variable, ...).  The same path
always gives the same stream, so results do not depend on how work is spread
over processes.  Normal variates come from numpy's ziggurat sampler.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

# eigenvalue repair: negative eigenvalues down to -CLIP_TOL * max eigenvalue are set to zero
CLIP_TOL = 1e-6


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    labels: tuple[tuple[str, int], ...] = ()

    def child(self, tag: str, index: int = 0) -> "StreamKey":
        return StreamKey(self.master_seed, self.labels + ((str(tag), int(index)),))

    def spawn_key(self) -> tuple[int, ...]:
        out = []
        for tag, index in self.labels:
            if index < 0:
                raise ValueError("stream label indices must be non-negative")
            out.extend((_tag_code(tag), index))
        return tuple(out)

    def stream(self) -> np.random.Generator:
        return derive_stream(self)


def derive_stream(key: StreamKey) -> np.random.Generator:
    seq = np.random.SeedSequence(int(key.master_seed) & (2**64 - 1), spawn_key=key.spawn_key())
    return np.random.Generator(np.random.Philox(seq))


def mvn_factor(cov) -> np.ndarray:
    """Square-root factor ``L`` with ``L @ L.T == cov`` after eigenvalue clipping."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValueError("covariance must be symmetric")
    if cov.size == 0:
        return cov
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    top = max(vals.max(), 0.0)
    if vals.min() < -CLIP_TOL * top or (top == 0.0 and vals.min() < 0.0):
        raise np.linalg.LinAlgError(f"covariance is indefinite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def draw_mvn(rng, mean, cov, size=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ValueError(f"dimension mismatch: mean {mean.shape}, cov {cov.shape}")
    factor = mvn_factor(cov)
    shape = (mean.size,) if size is None else (size, mean.size)
    z = rng.standard_normal(shape)
    return mean + z @ factor.T


def draw_chi_square(rng, df, size=None):
    if df < 1:
        raise ValueError(f"chi-square degrees of freedom must be >= 1, got {df}")
    return rng.chisquare(df, size)


def draw_exponential(rng, rate, size=None):
    """Exponential variates by inversion, ``-log(u) / rate`` with ``u`` in (0, 1]."""
    rate = np.asarray(rate, dtype=float)
    if np.any(~np.isfinite(rate)) or np.any(rate <= 0):
        raise ValueError("exponential rate must be positive and finite")
    if size is None:
        size = rate.shape
    u = 1.0 - rng.random(size)
    with np.errstate(over="ignore"):  # a subnormal rate gives an infinite gap, which is correct
        out = -np.log(u) / rate
    return float(out) if np.ndim(out) == 0 else out


def draw_bernoulli(rng, p, size=None):
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("probability outside [0, 1]")
    if size is None:
        size = p.shape
    out = (rng.random(size) < p).astype(np.int64)
    return int(out) if np.ndim(out) == 0 else out
