"""Ex-post density estimation: a full-covariance Gaussian mixture fit by EM
to encoded latent means, then sampled to generate new latents."""
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyInput,
    IncompatibleCheckpoint,
    NonPositiveDefinite,
    TooFewPoints,
    TruncatedFile,
)
from .gaussian_core import PIVOT_FLOOR

RIDGE = 1e-6
DEFAULT_COMPONENTS = 10
MAGIC = b"GMM1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, n)
    scales: np.ndarray  # (K, n, n) lower-triangular
    loglik_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        L = np.asarray(self.scales, dtype=np.float64)
        k, n = mu.shape
        if w.shape != (k,) or L.shape != (k, n, n):
            raise DimensionMismatch(f"weights {w.shape}, means {mu.shape}, scales {L.shape} disagree")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(np.triu(L, 1) != 0.0):
            raise ValueError("scales must be lower-triangular")
        if np.any(np.diagonal(L, axis1=1, axis2=2) <= 0.0):
            raise NonPositiveDefinite("scale diagonals must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", L)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def _as_points(points):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch(f"expected (count, n) points, got {x.shape}")
    return x


def _log_joint(model, x):
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return _kernels.gmm_log_prob(x, model.means, model.scales) + log_w


def gmm_loglik(model, points):
    """Mean log density of ``points`` under the mixture."""
    x = _as_points(points)
    if x.shape[0] == 0:
        raise EmptyInput("no points")
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"points have dim {x.shape[1]}, model has {model.dim}")
    return float(np.mean(logsumexp(_log_joint(model, x), axis=1)))


def _kmeans_pp(x, k, rng):
    n_pts = x.shape[0]
    centers = [x[rng.integers(n_pts)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n_pts, p=d2 / total)
        else:
            idx = rng.integers(n_pts)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _factor(covs):
    L, status = _kernels.cholesky_batched(covs, PIVOT_FLOOR)
    bad = np.flatnonzero(status >= 0)
    if bad.size:
        raise NonPositiveDefinite(f"component {bad[0]} covariance is singular despite the ridge")
    return L


def _m_step(x, resp, ridge):
    """Closed-form weights and means; covariances are the ridged scatter
    matrices, returned with the unridged scatter for the acceptance test."""
    n = x.shape[1]
    nk = resp.sum(axis=0) + 10.0 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    scatter = np.empty((len(nk), n, n))
    for c in range(len(nk)):
        diff = x - means[c]
        s = (resp[:, c, None] * diff).T @ diff / nk[c]
        scatter[c] = 0.5 * (s + s.T)
    return weights, means, scatter, scatter + ridge * np.eye(n)


def _expected_loglik(scale, scatter):
    # -(log|Sigma| + tr(Sigma^-1 S)) / 2 at the weighted mean
    inv = np.linalg.inv(scale)
    trace = np.einsum("ij,jk,ik->", inv, scatter, inv)
    return -np.sum(np.log(np.diag(scale))) - 0.5 * trace


def _generalized_update(old_scales, scatter, new_scales):
    """Keep a component's previous covariance when the ridged one would lower
    its expected complete-data log-likelihood, so every iteration is a
    generalized EM step and the log-likelihood cannot decrease."""
    out = new_scales.copy()
    for c in range(len(out)):
        if _expected_loglik(new_scales[c], scatter[c]) < _expected_loglik(old_scales[c], scatter[c]):
            out[c] = old_scales[c]
    return out


def _initial_model(x, k, rng, ridge):
    """Hard-assign points to their nearest k-means++ seed, then one M-step.
    A seed left without points keeps its position and the pooled covariance."""
    n_pts, n = x.shape
    centers = _kmeans_pp(x, k, rng)
    labels = np.argmin(np.sum((x[:, None, :] - centers[None]) ** 2, axis=2), axis=1)
    resp = np.zeros((n_pts, k))
    resp[np.arange(n_pts), labels] = 1.0
    weights, means, _, covs = _m_step(x, resp, ridge)
    empty = resp.sum(axis=0) == 0.0
    if np.any(empty):
        diff = x - x.mean(axis=0)
        covs[empty] = diff.T @ diff / n_pts + ridge * np.eye(n)
        means[empty] = centers[empty]
    return GmmModel(weights, means, _factor(covs))


def fit_em(latents, K=DEFAULT_COMPONENTS, seed=0, max_iter=200, tol=1e-6, ridge=RIDGE):
    """Fit a K-component full-covariance mixture by EM from a k-means++ start.

    Stops when the relative improvement of the mean log-likelihood drops below
    ``tol`` or after ``max_iter`` M-steps.  ``loglik_history`` on the result
    holds the mean log-likelihood at the start and after every M-step.
    """
    x = _as_points(latents)
    n_pts, n = x.shape
    if K < 1 or n < 1 or n_pts < K:
        raise TooFewPoints(f"need at least K={K} points in n>=1 dims, got {x.shape}")
    model = _initial_model(x, K, np.random.default_rng(seed), ridge)

    log_joint = _log_joint(model, x)
    history = [float(np.mean(logsumexp(log_joint, axis=1)))]
    for _ in range(max_iter):
        resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        weights, means, scatter, covs = _m_step(x, resp, ridge)
        scales = _generalized_update(model.scales, scatter, _factor(covs))
        model = GmmModel(weights, means, scales)
        log_joint = _log_joint(model, x)
        history.append(float(np.mean(logsumexp(log_joint, axis=1))))
        prev, cur = history[-2], history[-1]
        if cur - prev < tol * max(abs(prev), 1e-300):
            break
    return GmmModel(model.weights, model.means, model.scales, tuple(history))


def gmm_sample(model, count, seed):
    """Ancestral samples ``(count, n)``: component by weight, then mu + L eps."""
    rng = np.random.default_rng(seed)
    comps = rng.choice(model.n_components, size=count, p=model.weights)
    eps = rng.standard_normal((count, model.dim))
    return model.means[comps] + np.einsum("cij,cj->ci", model.scales[comps], eps)


def gmm_bytes(model):
    k, n = model.means.shape
    head = MAGIC + struct.pack("<III", FORMAT_VERSION, k, n)
    body = np.concatenate([model.weights, model.means.ravel(), model.scales.ravel()])
    return head + body.astype("<f8").tobytes()


def save_gmm(path, model):
    with open(path, "wb") as fh:
        fh.write(gmm_bytes(model))


def load_gmm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: not a GMM1 file")
    if len(data) < 16:
        raise TruncatedFile(f"{path}: header cut short")
    version, k, n = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: GMM format version {version}")
    count = k + k * n + k * n * n
    payload = data[16:]
    if len(payload) < 8 * count:
        raise TruncatedFile(f"{path}: expected {8 * count} payload bytes, got {len(payload)}")
    flat = np.frombuffer(payload[: 8 * count], dtype="<f8").astype(np.float64)
    return GmmModel(flat[:k], flat[k:k + k * n].reshape(k, n), flat[k + k * n:].reshape(k, n, n))
