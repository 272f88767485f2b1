"""Closed-form factorization of the generator's style space.

The latent-to-style response of the generator is the stack of the
w-columns of its per-stage affine weights (label-embedding columns and
biases excluded, so directions never touch the conditioning). Its
dominant right singular vectors, i.e. the eigenvectors of the small
symmetric Gram matrix, are the latent directions of maximal style change.
The eigensolver is a cyclic Jacobi iteration written here so the test
suite can check it against an independent power-iteration oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Generator
from .rng import Rng

JACOBI_TOL = 1e-10
EIGENVALUE_TIE = 1e-9


class FactorizationError(ValueError):
    pass


@dataclass(frozen=True)
class StyleBasis:
    """Top-k unit directions in w-space, eigenvalues descending."""

    directions: np.ndarray  # (k, w_dim) float64, rows unit-norm
    eigenvalues: np.ndarray  # (k,) float64, descending

    @property
    def k(self) -> int:
        return self.directions.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "directions": [[float(x) for x in row] for row in self.directions],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "StyleBasis":
        d = json.loads(Path(path).read_text())
        return StyleBasis(
            directions=np.asarray(d["directions"], dtype=np.float64),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=np.float64),
        )


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std of styles over standard-normal latents."""

    mean: np.ndarray  # (style_dim,) float64
    std: np.ndarray  # (style_dim,) float64, population (ddof=0)


def stacked_affine_weights(generator: Generator) -> np.ndarray:
    """The (style_dim, w_dim) stack of w-columns of every stage affine."""
    wd = generator.config.w_dim
    return np.concatenate(
        [a[:, :wd].astype(np.float64) for a in generator.affine_weights], axis=0
    )


def jacobi_eigh(matrix: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps rotate every upper-triangle pair in row order until the
    off-diagonal Frobenius norm is at most `tol`. Returns (eigenvalues,
    eigenvectors-as-columns), unsorted.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise FactorizationError(f"matrix must be square, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, float(np.abs(a).max()))):
        raise FactorizationError("matrix is not symmetric")
    v = np.eye(n)

    def off_norm() -> float:
        strict = a - np.diag(np.diag(a))
        return float(np.sqrt((strict**2).sum()))

    for _ in range(max_sweeps):
        if off_norm() <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    else:
        raise FactorizationError(
            f"Jacobi did not reach off-diagonal norm {tol} in {max_sweeps} sweeps"
        )
    return np.diag(a).copy(), v


def _canonical_sign(vec: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive."""
    idx = int(np.argmax(np.abs(vec)))
    return -vec if vec[idx] < 0 else vec


def _order_eigenpairs(values: np.ndarray, vectors: np.ndarray):
    """Descending by eigenvalue; ties broken on the sign-fixed components."""
    fixed = [_canonical_sign(vectors[:, i]) for i in range(vectors.shape[1])]
    order = sorted(
        range(len(values)),
        key=lambda i: (-values[i], tuple(-fixed[i])),
    )
    merged = list(order)
    # group indices whose eigenvalues agree within the tie tolerance and
    # re-sort each group lexicographically on the sign-fixed vector
    out: list[int] = []
    i = 0
    while i < len(merged):
        j = i
        while j + 1 < len(merged) and abs(values[merged[j + 1]] - values[merged[i]]) <= EIGENVALUE_TIE:
            j += 1
        group = sorted(merged[i : j + 1], key=lambda idx: tuple(-fixed[idx]))
        out.extend(group)
        i = j + 1
    vals = np.array([values[i] for i in out])
    vecs = np.stack([fixed[i] for i in out], axis=0)
    return vals, vecs


def factorize_matrix(stacked: np.ndarray, k: int) -> StyleBasis:
    """Top-k eigenpairs of stacked.T @ stacked via the Jacobi solver."""
    gram = stacked.T @ stacked
    values, vectors = jacobi_eigh(gram)
    vals, vecs = _order_eigenpairs(values, vectors)
    vals = np.maximum(vals, 0.0)  # Gram matrices are PSD up to round-off
    return StyleBasis(directions=vecs[:k].copy(), eigenvalues=vals[:k].copy())


def sefa_factorize(
    generator: Generator,
    k: int,
    empirical: bool = False,
    n_samples: int = 2048,
    seed: int = 0,
) -> StyleBasis:
    """Ranked orthonormal w-space directions of maximal style change.

    The closed-form path factorizes the affine weights directly. The
    empirical path estimates the same operator from the w-to-style
    cross-covariance over sampled latents and exists for comparison only.
    """
    wd = generator.config.w_dim
    if not (1 <= k <= wd):
        raise FactorizationError(f"k={k} outside [1, {wd}]")
    if empirical:
        stacked = _empirical_response(generator, n_samples, seed)
    else:
        stacked = stacked_affine_weights(generator)
    return factorize_matrix(stacked, k)


def _empirical_response(generator: Generator, n_samples: int, seed: int) -> np.ndarray:
    if n_samples < 2:
        raise FactorizationError("empirical mode needs n_samples >= 2")
    rng = Rng(seed)
    wd = generator.config.w_dim
    ws = np.empty((n_samples, wd), dtype=np.float64)
    styles = np.empty((n_samples, generator.config.style_dim), dtype=np.float64)
    for i in range(n_samples):
        w = rng.normal(size=wd)
        y = i % 2
        ws[i] = w
        styles[i] = generator.style_of(w.astype(np.float32), y)
    wc = ws - ws.mean(axis=0)
    sc = styles - styles.mean(axis=0)
    # cross-covariance ~= response matrix transposed (latents are whitened)
    cov_ww = wc.T @ wc / n_samples
    cov_ws = wc.T @ sc / n_samples
    return (np.linalg.solve(cov_ww, cov_ws)).T


def channel_stats(generator: Generator, n_samples: int, seed: int) -> ChannelStats:
    """Per-channel style mean/std over standard-normal w, labels alternating.

    Accumulation runs in float64 in a fixed sample order; std is the
    population value and is clamped at zero against round-off.
    """
    if n_samples < 2:
        raise FactorizationError("channel_stats needs n_samples >= 2")
    rng = Rng(seed)
    m = generator.config.style_dim
    total = np.zeros(m, dtype=np.float64)
    total_sq = np.zeros(m, dtype=np.float64)
    for i in range(n_samples):
        w = rng.normal(size=generator.config.w_dim).astype(np.float32)
        s = generator.style_of(w, i % 2).astype(np.float64)
        total += s
        total_sq += s * s
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0)
    return ChannelStats(mean=mean, std=np.sqrt(var))
