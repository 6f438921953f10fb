"""Declarative loss assembly for the VAE / RAE / UAE model family.

A :class:`LossSpec` picks one cell of the ablation grid: reconstruction
strategy, latent sampler, posterior regularizer and decoder regularizer.
:func:`build_loss` evaluates it on a batch and returns per-element
``rec``, ``reg`` and ``dec_reg`` terms with
``total = rec + beta * reg + gamma * dec_reg``.
"""
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInterpolation, InconsistentSpec, ShapeMismatch, ZeroVector
from .gaussian_core import (
    DEFAULT_KAPPA,
    Heuristic,
    SigmaSelection,
    axis_scores,
    selection_indices,
    sigma_point_tensor,
)
from .nets import decoder_input_gradient, encode, forward
from .posterior_metrics import RegularizerKind, decoder_penalty, iwae_bound, regularize

LOG_2PI = math.log(2.0 * math.pi)


class Reconstruction(enum.Enum):
    PER_SAMPLE = "per-sample"
    MEAN_IMAGE = "mean-image"


class Sampler(enum.Enum):
    REPARAM = "reparam"
    SIGMA_POINTS = "sigma-points"
    MEAN_ONLY = "mean-only"


class DecoderReg(enum.Enum):
    NONE = "none"
    GRADIENT_PENALTY_RAE = "gp-rae"
    GRADIENT_PENALTY_UAE = "gp-uae"
    WEIGHT_DECAY_L2 = "l2"
    SPECTRAL_NORM = "spectral-norm"


_FULL_REGS = (RegularizerKind.KL_FULL, RegularizerKind.WASSERSTEIN_FULL)
_DIAG_REGS = (RegularizerKind.KL_DIAGONAL, RegularizerKind.WASSERSTEIN_DIAGONAL)


@dataclass(frozen=True)
class LossSpec:
    reconstruction: Reconstruction = Reconstruction.PER_SAMPLE
    sampler: Sampler = Sampler.REPARAM
    sigma_selection: SigmaSelection = field(default_factory=SigmaSelection)
    regularizer: RegularizerKind = RegularizerKind.KL_DIAGONAL
    latent_l2: bool = False
    decoder_reg: DecoderReg = DecoderReg.NONE
    K: int = 1
    beta: float = 2.5e-4
    gamma: float = 1e-6
    kappa: float = DEFAULT_KAPPA
    posterior: str = "diagonal"  # encoder head: "diagonal" | "full" | "mean"
    iwae: bool = False

    def __post_init__(self):
        if self.sampler is Sampler.MEAN_ONLY and self.K != 1:
            object.__setattr__(self, "K", 1)
        if self.sampler is Sampler.SIGMA_POINTS and self.sigma_selection.heuristic is not Heuristic.ALL:
            if self.sigma_selection.count != self.K:
                object.__setattr__(self, "sigma_selection",
                                   SigmaSelection(self.sigma_selection.heuristic, self.K))
        if self.K < 1:
            raise InconsistentSpec("K must be at least 1")
        if self.decoder_reg is DecoderReg.GRADIENT_PENALTY_UAE and self.sampler is Sampler.MEAN_ONLY:
            raise InconsistentSpec("the eigenvalue-weighted penalty needs a stochastic posterior")
        if self.posterior not in ("diagonal", "full", "mean"):
            raise InconsistentSpec(f"unknown posterior head {self.posterior!r}")
        if self.posterior == "mean":
            if self.sampler is not Sampler.MEAN_ONLY or self.regularizer is not RegularizerKind.NONE:
                raise InconsistentSpec("a mean-only encoder supports only the mean sampler without a posterior regularizer")
        elif self.sampler is Sampler.MEAN_ONLY:
            raise InconsistentSpec("the mean-only sampler needs a mean-only encoder")
        if self.regularizer in _FULL_REGS and self.posterior != "full":
            raise InconsistentSpec("full-covariance regularizer on a diagonal posterior")
        if self.regularizer in _DIAG_REGS and self.posterior != "diagonal":
            raise InconsistentSpec("diagonal regularizer on a full-covariance posterior")
        if self.iwae and (self.sampler is not Sampler.REPARAM or self.regularizer is not RegularizerKind.NONE):
            raise InconsistentSpec("IWAE uses reparameterized samples and no separate regularizer")

    def latent_count(self, n):
        if self.sampler is Sampler.SIGMA_POINTS:
            return self.sigma_selection.resolved_count(n)
        return self.K

    def validate(self, n):
        if self.sampler is Sampler.SIGMA_POINTS:
            try:
                self.sigma_selection.validate(n)
            except ValueError as exc:
                raise InconsistentSpec(str(exc)) from exc
        if self.kappa <= -n:
            raise InconsistentSpec(f"kappa {self.kappa} must exceed -{n}")


@dataclass
class BatchLoss:
    total: ad.Node
    parts: dict

    def objective(self):
        """Batch mean of the per-element totals (the training scalar)."""
        return ad.mean(self.total)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_KL = {"diagonal": RegularizerKind.KL_DIAGONAL, "full": RegularizerKind.KL_FULL}
_W2 = {"diagonal": RegularizerKind.WASSERSTEIN_DIAGONAL, "full": RegularizerKind.WASSERSTEIN_FULL}

_STOCHASTIC = {
    # name: (reconstruction, sampler, regularizer family, decoder penalty)
    "vae": (Reconstruction.PER_SAMPLE, Sampler.REPARAM, _KL, DecoderReg.NONE),
    "vae-gp": (Reconstruction.PER_SAMPLE, Sampler.REPARAM, _KL, DecoderReg.GRADIENT_PENALTY_UAE),
    "ut-vae": (Reconstruction.MEAN_IMAGE, Sampler.SIGMA_POINTS, _KL, DecoderReg.NONE),
    "ut-vae-gp": (Reconstruction.MEAN_IMAGE, Sampler.SIGMA_POINTS, _KL, DecoderReg.GRADIENT_PENALTY_UAE),
    "vae-star": (Reconstruction.PER_SAMPLE, Sampler.REPARAM, _W2, DecoderReg.NONE),
    "vae-star-gp": (Reconstruction.PER_SAMPLE, Sampler.REPARAM, _W2, DecoderReg.GRADIENT_PENALTY_UAE),
    "ut-vae-star": (Reconstruction.MEAN_IMAGE, Sampler.SIGMA_POINTS, _W2, DecoderReg.NONE),
    "uae": (Reconstruction.MEAN_IMAGE, Sampler.SIGMA_POINTS, _W2, DecoderReg.GRADIENT_PENALTY_UAE),
    "vae-dagger": (Reconstruction.MEAN_IMAGE, Sampler.REPARAM, _KL, DecoderReg.NONE),
    "ut-vae-ddagger": (Reconstruction.PER_SAMPLE, Sampler.SIGMA_POINTS, _KL, DecoderReg.NONE),
}

_RAE = {
    "rae-noreg": DecoderReg.NONE,
    "rae-gp": DecoderReg.GRADIENT_PENALTY_RAE,
    "rae-l2": DecoderReg.WEIGHT_DECAY_L2,
    "rae-sn": DecoderReg.SPECTRAL_NORM,
}

BASE_PRESETS = ("vae", "ut-vae", "rae-noreg", "rae-gp", "rae-l2", "rae-sn", "vae-star",
                "ut-vae-star", "uae", "vae-dagger", "ut-vae-ddagger", "iwae")
EXTRA_PRESETS = ("vae-gp", "ut-vae-gp", "vae-star-gp")
FULLCOV_PRESETS = tuple(f"{name}-fullcov" for name in
                        ("vae", "vae-gp", "ut-vae", "ut-vae-gp", "vae-star", "vae-star-gp",
                         "ut-vae-star", "uae"))
PRESETS = BASE_PRESETS + EXTRA_PRESETS + FULLCOV_PRESETS
DEFAULT_K = 2


def preset(name, **overrides):
    """LossSpec for a named model. ``overrides`` replace LossSpec fields;
    ``heuristic`` (a Heuristic or its string) sets the sigma selection."""
    heuristic = overrides.pop("heuristic", Heuristic.RANDOM_POINTS)
    heuristic = Heuristic(heuristic) if not isinstance(heuristic, Heuristic) else heuristic
    base = name[:-len("-fullcov")] if name.endswith("-fullcov") else name
    head = "full" if base != name else "diagonal"
    if name == "iwae":
        spec = LossSpec(Reconstruction.PER_SAMPLE, Sampler.REPARAM, regularizer=RegularizerKind.NONE,
                        K=DEFAULT_K, iwae=True)
    elif name in _RAE:
        spec = LossSpec(Reconstruction.PER_SAMPLE, Sampler.MEAN_ONLY, regularizer=RegularizerKind.NONE,
                        latent_l2=True, decoder_reg=_RAE[name], K=1, beta=1e-4, gamma=1e-6,
                        posterior="mean")
    elif base in _STOCHASTIC and (head == "diagonal" or name in FULLCOV_PRESETS):
        rec, sampler, family, dreg = _STOCHASTIC[base]
        spec = LossSpec(rec, sampler, SigmaSelection(heuristic, DEFAULT_K), family[head],
                        decoder_reg=dreg, K=DEFAULT_K, posterior=head)
    else:
        raise InconsistentSpec(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if "K" in overrides and spec.sampler is Sampler.SIGMA_POINTS:
        overrides.setdefault("sigma_selection", SigmaSelection(heuristic, overrides["K"]))
    return replace(spec, **overrides) if overrides else spec


# ---------------------------------------------------------------------------
# pieces
# ---------------------------------------------------------------------------

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def reconstruct_loss(x, decoded, strategy):
    """Squared error of the mean decode (MEAN_IMAGE) or mean squared error
    over decodes (PER_SAMPLE).

    ``x`` is ``(d,)`` or ``(batch, d)``; ``decoded`` is a list of K ``(d,)``
    vectors or a ``(K, d)`` / ``(batch, K, d)`` node.
    """
    if isinstance(decoded, (list, tuple)):
        decoded = ad.stack(decoded, axis=0)
    decoded = ad.as_node(decoded)
    x = ad.as_node(x)
    if decoded.ndim == x.ndim:
        decoded = ad.reshape(decoded, decoded.shape[:-1] + (1, decoded.shape[-1]))
    if decoded.shape[-1] != x.shape[-1] or decoded.shape[:-2] != x.shape[:-1] or decoded.shape[-2] < 1:
        raise ShapeMismatch(f"decoded {decoded.shape} incompatible with x {x.shape}")
    target = ad.reshape(x, x.shape[:-1] + (1, x.shape[-1]))
    if strategy is Reconstruction.MEAN_IMAGE:
        diff = ad.mean(decoded, axis=-2, keepdims=True) - target
        return ad.sum_(ad.sum_(ad.square(diff), axis=-1), axis=-1)
    diff = decoded - target
    return ad.mean(ad.sum_(ad.square(diff), axis=-1), axis=-1)


def _standard_normals(rng, shape):
    return rng.standard_normal(shape)


def draw_latents(posterior, spec, rng_seed):
    """Latent draws ``(..., K, n)``; gradients reach mean and scale pathwise.

    Returns the node and, for the reparameterized sampler, the standard
    normal draws it used (else ``None``).
    """
    rng = _rng(rng_seed)
    mu = ad.as_node(posterior.mean)
    L = ad.as_node(posterior.scale)
    n = mu.shape[-1]
    batch = mu.shape[:-1]
    spec.validate(n)
    mu_row = ad.reshape(mu, batch + (1, n))
    if spec.sampler is Sampler.MEAN_ONLY:
        return mu_row, None
    if spec.sampler is Sampler.REPARAM:
        eps = _standard_normals(rng, batch + (spec.K, n))
        return mu_row + ad.matmul(ad.Node(eps), ad.transpose(L)), eps
    points = sigma_point_tensor(mu, L, spec.kappa)
    flat = int(np.prod(batch)) if batch else 1
    scores = axis_scores(L.value, posterior.kind).reshape(flat, n)
    idx = selection_indices(spec.sigma_selection, n, flat, rng, scores=scores)
    if not batch:
        return points[idx[0]], None
    pts = ad.reshape(points, (flat, 2 * n + 1, n))
    chosen = pts[np.arange(flat)[:, None], idx]
    return ad.reshape(chosen, batch + (idx.shape[1], n)), None


def _decode(decoder, z, weights):
    n = z.shape[-1]
    flat = ad.reshape(z, (-1, n))
    out = forward(decoder, flat, weights)
    return ad.reshape(out, z.shape[:-1] + (decoder.out_dim,))


def _iwae_term(x, decoded, z, eps, posterior):
    """-log mean_k w_k with unit-variance Gaussian likelihood, standard normal
    prior and the encoder posterior; all normalizing constants kept."""
    d = x.shape[-1]
    n = z.shape[-1]
    target = ad.reshape(x, x.shape[:-1] + (1, d))
    log_lik = -0.5 * ad.sum_(ad.square(decoded - target), axis=-1) - 0.5 * d * LOG_2PI
    log_prior = -0.5 * ad.sum_(ad.square(z), axis=-1) - 0.5 * n * LOG_2PI
    L = ad.as_node(posterior.scale)
    log_det = ad.sum_(ad.log(ad.sum_(L * np.eye(n), axis=-1)), axis=-1)
    log_q = -0.5 * np.sum(eps * eps, axis=-1) - ad.reshape(log_det, log_det.shape + (1,)) - 0.5 * n * LOG_2PI
    return iwae_bound(log_lik + log_prior - log_q)


def _weight_decay(decoder, batch_shape):
    total = None
    for p in decoder.parameters():
        term = ad.sum_(ad.square(p))
        total = term if total is None else total + term
    return total * np.ones(batch_shape)


def build_loss(x, encoder, decoder, spec, rng_seed, advance_sn=True):
    """Per-element loss terms for inputs ``x`` (``(d,)`` or ``(batch, d)``).

    ``advance_sn=False`` evaluates a spectrally normalized decoder without
    moving its power-iteration state (repeatable evaluations)."""
    x = ad.as_node(x)
    if encoder.latent_dim != decoder.in_dim:
        raise InconsistentSpec("encoder latent width differs from decoder input width")
    if encoder.kind != spec.posterior:
        raise InconsistentSpec(f"spec wants a {spec.posterior!r} encoder head, got {encoder.kind!r}")
    if spec.decoder_reg is DecoderReg.SPECTRAL_NORM and not decoder.spectral_norm:
        raise InconsistentSpec("spectral-norm preset needs a spectrally normalized decoder")
    spec.validate(encoder.latent_dim)
    posterior = encode(encoder, x).posterior
    weights = decoder.effective_weights(advance=advance_sn)
    z, eps = draw_latents(posterior, spec, rng_seed)
    decoded = _decode(decoder, z, weights)
    batch_shape = x.shape[:-1]
    zero = ad.Node(np.zeros(batch_shape))

    if spec.iwae:
        rec = _iwae_term(x, decoded, z, eps, posterior)
    else:
        rec = reconstruct_loss(x, decoded, spec.reconstruction)

    if spec.latent_l2:
        reg = ad.sum_(ad.square(ad.as_node(posterior.mean)), axis=-1)
    elif spec.regularizer is RegularizerKind.NONE:
        reg = zero
    else:
        reg = regularize(spec.regularizer, posterior)

    dreg = spec.decoder_reg
    if dreg is DecoderReg.GRADIENT_PENALTY_RAE:
        dec = decoder_input_gradient(decoder, posterior.mean, weights=weights)
    elif dreg is DecoderReg.GRADIENT_PENALTY_UAE:
        dec = decoder_penalty(posterior, decoder, weights=weights)
    elif dreg is DecoderReg.WEIGHT_DECAY_L2:
        dec = _weight_decay(decoder, batch_shape)
    else:
        dec = zero

    total = rec + spec.beta * reg + spec.gamma * dec
    return BatchLoss(total=total, parts={"rec": rec, "reg": reg, "dec_reg": dec})


def slerp_midpoint(z1, z2):
    """Spherical interpolation at t = 1/2; arithmetic midpoint when the angle
    is below 1e-6. Antiparallel inputs have no unique great circle and raise
    DegenerateInterpolation."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise ZeroVector("slerp needs nonzero endpoints")
    omega = float(np.arccos(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0)))
    if omega < 1e-6:
        return 0.5 * (z1 + z2)
    if math.pi - omega < 1e-6:
        raise DegenerateInterpolation("antiparallel endpoints")
    return math.sin(omega / 2.0) / math.sin(omega) * (z1 + z2)
