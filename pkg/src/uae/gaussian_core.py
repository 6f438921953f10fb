"""Small dense linear algebra for Gaussian posteriors.

Posteriors are parameterized by a mean and a lower-triangular scale factor
``L`` with ``Sigma = L @ L.T``.  Everything here works on plain numpy arrays
for a single posterior; the batched, differentiable counterparts used in
training (``sigma_point_tensor``, ``full_scale_tensor``) accept
:class:`~uae.autodiff.Node` inputs with arbitrary leading batch axes.
"""
import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidKappa,
    InvalidSelection,
    NoConvergence,
    NonPositiveDefinite,
)

PIVOT_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6
DEFAULT_KAPPA = 0.5


class PosteriorKind(enum.Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


class Heuristic(enum.Enum):
    RANDOM_POINTS = "random"
    RANDOM_PAIRS = "random-pairs"
    LARGEST_EIGENVALUE_PAIRS = "largest-pairs"
    ALL = "all"


@dataclass(frozen=True)
class GaussianPosterior:
    """Mean vector plus lower-triangular scale factor.

    ``mean`` and ``scale`` may be numpy arrays (validated eagerly) or
    autodiff nodes with leading batch axes (validated by the producer).
    """

    mean: object
    scale: object
    kind: PosteriorKind = PosteriorKind.DIAGONAL

    def __post_init__(self):
        if isinstance(self.mean, ad.Node) or isinstance(self.scale, ad.Node):
            return
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        n = mean.shape[-1]
        if scale.shape[-2:] != (n, n):
            raise DimensionMismatch(f"scale shape {scale.shape} does not match mean length {n}")
        if np.any(np.triu(scale, 1) != 0.0):
            raise ValueError("scale must be lower-triangular")
        diag = np.diagonal(scale, axis1=-2, axis2=-1)
        if np.any(diag <= 0.0):
            raise ValueError("scale diagonal must be strictly positive")
        if self.kind is PosteriorKind.DIAGONAL and np.any(np.tril(scale, -1) != 0.0):
            raise ValueError("diagonal posterior with off-diagonal scale entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def diagonal(cls, mean, sigmas):
        sigmas = np.asarray(sigmas, dtype=np.float64)
        return cls(np.asarray(mean, dtype=np.float64), sigmas[..., None] * np.eye(sigmas.shape[-1]),
                   PosteriorKind.DIAGONAL)

    @classmethod
    def full(cls, mean, scale):
        return cls(mean, scale, PosteriorKind.FULL)

    @property
    def n(self):
        return ad.value_of(self.mean).shape[-1]

    @property
    def covariance(self):
        L = ad.value_of(self.scale)
        return L @ np.swapaxes(L, -1, -2)


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray  # (2n+1, n), rows in chi_0 .. chi_2n order
    kappa: float
    origin: GaussianPosterior

    @property
    def n(self):
        return self.points.shape[-1]


@dataclass(frozen=True)
class SigmaSelection:
    heuristic: Heuristic = Heuristic.RANDOM_POINTS
    count: int = 2

    def resolved_count(self, n):
        return 2 * n + 1 if self.heuristic is Heuristic.ALL else self.count

    def validate(self, n):
        k = self.count
        if self.heuristic is Heuristic.ALL:
            return
        if k < 1:
            raise InvalidSelection("selection count must be positive")
        if self.heuristic is Heuristic.RANDOM_POINTS:
            if k > 2 * n + 1:
                raise InvalidSelection(f"cannot draw {k} of {2 * n + 1} sigma points")
        elif k % 2 or k > 2 * n:
            raise InvalidSelection(f"pair heuristics need an even count <= {2 * n}, got {k}")


@dataclass(frozen=True)
class TransformedMoments:
    mean: np.ndarray
    covariance: np.ndarray


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

def cholesky(matrix):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NonPositiveDefinite when a pivot falls to 1e-12 or below.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {a.shape}")
    L, status = _kernels.cholesky_batched(a[None], PIVOT_FLOOR)
    if status[0] >= 0:
        raise NonPositiveDefinite(f"pivot {status[0]} is not above {PIVOT_FLOOR}")
    return L[0]


def _tril_layout(n):
    rows, cols = np.tril_indices(n, -1)
    place = np.zeros((rows.size, n * n))
    place[np.arange(rows.size), rows * n + cols] = 1.0
    return rows, cols, place


def full_scale_tensor(sigmas, raw_correlations):
    """Differentiable version of :func:`build_full_scale` over leading batch axes."""
    sigmas = ad.as_node(sigmas)
    raw = ad.as_node(raw_correlations)
    n = sigmas.shape[-1]
    m = n * (n - 1) // 2
    if raw.shape[-1] != m:
        raise DimensionMismatch(f"need {m} correlations for n={n}, got {raw.shape[-1]}")
    diag = ad.reshape(sigmas, sigmas.shape + (1,)) * np.eye(n)
    if m == 0:
        return diag
    rows, cols, place = _tril_layout(n)
    r = ad.tanh(raw)
    vals = r * sigmas[..., rows] * sigmas[..., cols]
    lower = ad.reshape(vals @ place if vals.ndim > 1 else ad.reshape(vals, (1, m)) @ place,
                       sigmas.shape[:-1] + (n, n))
    return lower + diag


def build_full_scale(sigmas, correlations):
    """Lower-triangular factor with ``L[i,i] = sigma_i`` and
    ``L[i,j] = tanh(r_k) * sigma_i * sigma_j`` for ``i > j``, ``k`` running
    over the strict lower triangle in row-major order."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    correlations = np.atleast_1d(np.asarray(correlations, dtype=np.float64))
    if np.any(sigmas <= 0.0):
        raise ValueError("sigmas must be strictly positive")
    return full_scale_tensor(sigmas, correlations).value


# ---------------------------------------------------------------------------
# sigma points and the unscented transform
# ---------------------------------------------------------------------------

def _check_kappa(kappa, n):
    if not kappa > -n:
        raise InvalidKappa(f"kappa must exceed -n = {-n}, got {kappa}")


def sigma_point_tensor(mean, scale, kappa=DEFAULT_KAPPA):
    """Sigma points ``(..., 2n+1, n)`` for batched mean/scale nodes.

    Row 0 is the mean, rows 1..n add the columns of ``sqrt(kappa+n) L``,
    rows n+1..2n subtract them.
    """
    mean = ad.as_node(mean)
    scale = ad.as_node(scale)
    n = mean.shape[-1]
    _check_kappa(kappa, n)
    offsets = ad.transpose(scale) * np.sqrt(kappa + n)  # row i = column i of the factor
    mu = ad.reshape(mean, mean.shape[:-1] + (1, n))
    return ad.concat([mu, mu + offsets, mu - offsets], axis=-2)


def sigma_points(posterior, kappa=DEFAULT_KAPPA):
    pts = sigma_point_tensor(posterior.mean, posterior.scale, kappa).value
    return SigmaSet(points=pts, kappa=float(kappa), origin=posterior)


def unscented_moments(transformed_points):
    """Uniformly weighted mean and covariance of propagated sigma points."""
    pts = np.asarray(transformed_points, dtype=np.float64)
    if pts.size == 0 or pts.shape[0] == 0:
        raise EmptyInput("no transformed points")
    if pts.ndim == 1:
        pts = pts[:, None]
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    return TransformedMoments(mean=mean, covariance=0.5 * (cov + cov.T))


def axis_scores(scale, kind=PosteriorKind.DIAGONAL):
    """Per-axis spread used by the largest-eigenvalue pair heuristic.

    Diagonal posteriors rank by variance; full ones by the column norm of the
    factor (the sigma offsets are its columns).
    """
    L = ad.value_of(scale)
    if kind is PosteriorKind.DIAGONAL:
        return np.diagonal(L, axis1=-2, axis2=-1) ** 2
    return np.sum(L * L, axis=-2)


def selection_indices(selection, n, batch, rng, scores=None):
    """Integer indices ``(batch, K)`` into the ``2n+1`` sigma rows."""
    selection.validate(n)
    total = 2 * n + 1
    h = selection.heuristic
    if h is Heuristic.ALL:
        return np.broadcast_to(np.arange(total), (batch, total)).copy()
    k = selection.count
    if h is Heuristic.RANDOM_POINTS:
        order = np.argsort(rng.random((batch, total)), axis=1, kind="stable")
        return order[:, :k]
    half = k // 2
    if h is Heuristic.RANDOM_PAIRS:
        axes = np.argsort(rng.random((batch, n)), axis=1, kind="stable")[:, :half]
    else:
        if scores is None:
            raise InvalidSelection("largest-eigenvalue pairs need axis scores")
        scores = np.broadcast_to(scores, (batch, n))
        axes = np.argsort(-scores, axis=1, kind="stable")[:, :half]
    plus = axes + 1
    out = np.empty((batch, k), dtype=np.int64)
    out[:, 0::2] = plus
    out[:, 1::2] = plus + n
    return out


def select_sigmas(sigma_set, selection, rng_seed):
    """Pick K points from a sigma set; deterministic for a given seed."""
    n = sigma_set.n
    rng = np.random.default_rng(rng_seed)
    scores = axis_scores(sigma_set.origin.scale, sigma_set.origin.kind)
    idx = selection_indices(selection, n, 1, rng, scores=scores[None])[0]
    return [sigma_set.points[i].copy() for i in idx]


# ---------------------------------------------------------------------------
# eigenvalues
# ---------------------------------------------------------------------------

POWER_TOL = 1e-8
POWER_MAX_ITER = 500


def power_start(n):
    v = np.random.default_rng(0).standard_normal(n)
    return v / np.linalg.norm(v)


def top_eigenpairs(covariances, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Batched power iteration; returns (eigenvalues, unit eigenvectors)."""
    cov = np.asarray(covariances, dtype=np.float64)
    n = cov.shape[-1]
    lam, vecs, iters = _kernels.power_iteration(cov.reshape(-1, n, n), power_start(n), tol, max_iter)
    if np.any(iters < 0):
        raise NoConvergence(f"power iteration exceeded {max_iter} iterations")
    return lam.reshape(cov.shape[:-2]), vecs.reshape(cov.shape[:-1])


def largest_eigenvalue(posterior):
    """Largest covariance eigenvalue: max variance for diagonal posteriors,
    power iteration for full ones."""
    L = ad.value_of(posterior.scale)
    if posterior.kind is PosteriorKind.DIAGONAL:
        return float(np.max(np.diagonal(L) ** 2))
    lam, _ = top_eigenpairs(L @ L.T)
    return float(lam)


def largest_eigenvalue_tensor(scale, kind):
    """Differentiable largest eigenvalue over leading batch axes.

    For full covariances the top eigenvector is held constant and the
    Rayleigh quotient is differentiated, which gives the exact eigenvalue
    derivative.  The vector comes from a dense symmetric eigensolver: power
    iteration pins the eigenvalue long before the vector when the top two
    eigenvalues are close, and the gradient needs the vector.
    """
    scale = ad.as_node(scale)
    n = scale.shape[-1]
    if kind is PosteriorKind.DIAGONAL:
        diag = ad.sum_(scale * np.eye(n), axis=-1)
        return ad.amax(ad.square(diag), axis=-1)
    cov = scale @ ad.transpose(scale)
    _, vecs = np.linalg.eigh(cov.value)
    v = vecs[..., :, -1:]
    return ad.sum_(ad.sum_(cov * (v * np.swapaxes(v, -1, -2)), axis=-1), axis=-1)
