"""Dense encoder/decoder networks on top of :mod:`uae.autodiff`.

Besides the plain forward pass this module provides the decoder input
Jacobian penalty.  The Jacobian is built by replaying the decoder forward
pass with one tangent row per latent direction (forward-mode propagation
expressed as ordinary graph ops), so the squared Frobenius norm is itself
a graph node and can be differentiated with a single reverse sweep.
"""
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import BadMagic, IncompatibleCheckpoint, ShapeMismatch, TruncatedFile
from .gaussian_core import SIGMA_FLOOR, GaussianPosterior, PosteriorKind, full_scale_tensor

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "tanh", "identity")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass
class Layer:
    weight: ad.Node  # (fan_in, fan_out); applied as x @ W + b
    bias: ad.Node
    activation: str = "leaky_relu"
    sn_u: np.ndarray = None  # persistent left singular vector when spectrally normalized

    @property
    def dims(self):
        return self.weight.shape


@dataclass
class DenseNet:
    layers: list
    spectral_norm: bool = False

    def __post_init__(self):
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.dims[1] != nxt.dims[0]:
                raise ShapeMismatch(f"layer dims do not chain: {prev.dims} -> {nxt.dims}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @classmethod
    def build(cls, dims, activations, rng, spectral_norm=False):
        """He-style uniform init scaled by fan-in; zero biases."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Layer(ad.Node(w, name="W"), ad.Node(np.zeros(fan_out), name="b"), act))
        return cls(layers, spectral_norm=spectral_norm)

    @property
    def in_dim(self):
        return self.layers[0].dims[0]

    @property
    def out_dim(self):
        return self.layers[-1].dims[1]

    @property
    def parameter_count(self):
        return sum(l.weight.value.size + l.bias.value.size for l in self.layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def effective_weights(self, advance=True):
        """Weight nodes as used in the forward pass.  With ``advance=False``
        the spectral-norm power-iteration state is left untouched."""
        if not self.spectral_norm:
            return [l.weight for l in self.layers]
        return [_sn_weight(l, advance) for l in self.layers]


def _activate(h, name):
    if name == "leaky_relu":
        return ad.leaky_relu(h, LEAKY_SLOPE)
    if name == "tanh":
        return ad.tanh(h)
    return h


def forward(net, inputs, weights=None):
    """Run ``net`` on a ``(batch, in_dim)`` (or ``(in_dim,)``) input."""
    x = ad.as_node(inputs)
    if x.shape[-1] != net.in_dim:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {net.in_dim}")
    weights = net.effective_weights() if weights is None else weights
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, net.in_dim))
    for layer, w in zip(net.layers, weights):
        x = _activate(x @ w + layer.bias, layer.activation)
    if single:
        x = ad.reshape(x, (net.out_dim,))
    return x


def decoder_input_gradient(decoder, z, weights=None):
    """Squared Frobenius norm of dD(z)/dz as a differentiable node.

    ``z`` is ``(n,)`` (scalar result) or ``(batch, n)`` (one value per row).
    """
    z = ad.as_node(z)
    n = decoder.in_dim
    if z.shape[-1] != n:
        raise ShapeMismatch(f"latent width {z.shape[-1]} != {n}")
    single = z.ndim == 1
    x = ad.reshape(z, (1, n)) if single else z
    weights = decoder.effective_weights() if weights is None else weights
    tangent = ad.Node(np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy())
    for layer, w in zip(decoder.layers, weights):
        h = x @ w + layer.bias
        tangent = tangent @ w
        x = _activate(h, layer.activation)
        if layer.activation == "leaky_relu":
            slope = np.where(h.value > 0.0, 1.0, LEAKY_SLOPE)
            tangent = tangent * slope[:, None, :]
        elif layer.activation == "tanh":
            deriv = 1.0 - ad.square(x)
            tangent = tangent * ad.reshape(deriv, (deriv.shape[0], 1, deriv.shape[1]))
    norm = ad.sum_(ad.sum_(ad.square(tangent), axis=-1), axis=-1)
    return ad.reshape(norm, ()) if single else norm


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

SN_ITERATIONS = 3
SN_WARMUP = 15


def _normalized(v):
    norm = np.linalg.norm(v)
    return v / norm if norm > 0.0 else v


def _sn_power(w, u, steps):
    v = np.zeros(w.shape[1])
    for _ in range(steps):
        v = _normalized(w.T @ u)
        u = _normalized(w @ v)
    return u, v


def _fresh_u(rows):
    return _normalized(np.random.default_rng(0).standard_normal(rows))


@dataclass
class SpectralState:
    u: np.ndarray = None


def spectral_normalize(weight, state=None, n_power_iterations=SN_ITERATIONS):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``state`` carries the left singular vector between calls; a fresh state
    runs a short warm-up first.  A zero matrix is returned unchanged.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.size == 0:
        raise ShapeMismatch("empty matrix")
    if not np.any(w):
        return w.copy()
    state = SpectralState() if state is None else state
    steps = n_power_iterations
    if state.u is None:
        state.u = _fresh_u(w.shape[0])
        steps += SN_WARMUP
    u, v = _sn_power(w, state.u, steps)
    state.u = u
    sigma = float(u @ w @ v)
    return w / sigma


def _sn_weight(layer, advance=True):
    w = layer.weight.value
    if not np.any(w):
        return layer.weight
    steps = SN_ITERATIONS
    u = layer.sn_u
    if u is None:
        u = _fresh_u(w.shape[0])
        steps += SN_WARMUP
    # every power step stays in the graph, so the gradient is that of the
    # estimate actually used rather than of a frozen (u, v) pair
    W = layer.weight
    u_node = ad.Node(u.reshape(-1, 1))
    for _ in range(steps):
        v_node = _unit(ad.matmul(ad.transpose(W), u_node))
        u_node = _unit(ad.matmul(W, v_node))
        if v_node is None or u_node is None:
            return W / float(np.linalg.norm(w, 2))
    if advance:
        layer.sn_u = u_node.value[:, 0].copy()
    sigma = ad.sum_(W * ad.matmul(u_node, ad.transpose(v_node)))
    return W / sigma


def _unit(col):
    if col is None or not np.any(col.value):
        return None
    return col / ad.sqrt(ad.sum_(ad.square(col)))


# ---------------------------------------------------------------------------
# encoder heads
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    posterior: GaussianPosterior
    raw_logvar_or_corr: object = None


@dataclass
class Encoder:
    net: DenseNet
    latent_dim: int
    kind: str = "diagonal"  # "diagonal" | "full" | "mean"

    def head_width(self):
        n = self.latent_dim
        return {"mean": n, "diagonal": 2 * n, "full": 2 * n + n * (n - 1) // 2}[self.kind]


def encode(encoder, x):
    """Map inputs to a (batched) posterior. Log-variance heads give
    ``sigma = exp(logvar / 2)``, floored at 1e-6."""
    out = forward(encoder.net, x)
    n = encoder.latent_dim
    mu = out[..., :n]
    if encoder.kind == "mean":
        eye = np.broadcast_to(np.eye(n) * SIGMA_FLOOR, mu.shape + (n,))
        return EncoderOutput(GaussianPosterior(mu, ad.Node(eye.copy()), PosteriorKind.DIAGONAL))
    logvar = out[..., n:2 * n]
    sigma = ad.maximum(ad.exp(logvar * 0.5), SIGMA_FLOOR)
    if encoder.kind == "diagonal":
        scale = ad.reshape(sigma, sigma.shape + (1,)) * np.eye(n)
        return EncoderOutput(GaussianPosterior(mu, scale, PosteriorKind.DIAGONAL), logvar)
    raw = out[..., 2 * n:]
    scale = full_scale_tensor(sigma, raw)
    return EncoderOutput(GaussianPosterior(mu, scale, PosteriorKind.FULL), (logvar, raw))


def make_models(data_dim, latent_dim, kind, rng, hidden=(64, 64), spectral_norm=False):
    width = Encoder(None, latent_dim, kind).head_width()
    enc_net = DenseNet.build([data_dim, *hidden, width], ["leaky_relu"] * len(hidden) + ["identity"], rng)
    enc = Encoder(enc_net, latent_dim, kind)
    dec_dims = [latent_dim, *reversed(hidden), data_dim]
    dec = DenseNet.build(dec_dims, ["leaky_relu"] * len(hidden) + ["tanh"], rng,
                         spectral_norm=spectral_norm)
    return enc, dec


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, applied in place to each parameter node's value."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(ad.value_of(p)) for p in params]
        state.v = [np.zeros_like(ad.value_of(p)) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        target = p.value if isinstance(p, ad.Node) else p
        if g.shape != target.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {target.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        target -= step
    return params, state


# ---------------------------------------------------------------------------
# checkpoint format: b"UAE1", u32 version, u32 meta length, meta (utf-8
# key=value lines), u32 net count, per net u32 layer count and per layer
# (u32 fan_in, u32 fan_out, u8 activation); then float64 little-endian
# weight (row-major) and bias arrays in layer order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"UAE1"
CHECKPOINT_VERSION = 1


def _encode_meta(meta):
    return "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")


def _decode_meta(raw):
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, val = line.partition("=")
            meta[key] = val
    return meta


def checkpoint_bytes(nets, meta):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    raw_meta = _encode_meta(meta)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw_meta)))
    buf.write(raw_meta)
    buf.write(struct.pack("<I", len(nets)))
    for net in nets:
        buf.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            fi, fo = layer.dims
            buf.write(struct.pack("<IIB", fi, fo, _ACT_CODE[layer.activation]))
    for net in nets:
        for layer, w in zip(net.layers, net.effective_weights(advance=False)):
            buf.write(np.ascontiguousarray(w.value, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(layer.bias.value, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, nets, meta):
    """Write nets (spectral normalization baked into the stored weights)."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(nets, meta))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.data):
            raise TruncatedFile("checkpoint ended early")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns ``(nets, meta)``."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path} is not a UAE1 checkpoint")
    version, meta_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {version}")
    meta = _decode_meta(reader.take(meta_len))
    (n_nets,) = reader.unpack("<I")
    shapes = []
    for _ in range(n_nets):
        (n_layers,) = reader.unpack("<I")
        shapes.append([reader.unpack("<IIB") for _ in range(n_layers)])
    nets = []
    for layer_shapes in shapes:
        layers = []
        for fi, fo, code in layer_shapes:
            w = np.frombuffer(reader.take(8 * fi * fo), dtype="<f8").reshape(fi, fo).astype(np.float64)
            b = np.frombuffer(reader.take(8 * fo), dtype="<f8").astype(np.float64)
            if code >= len(ACTIVATIONS):
                raise IncompatibleCheckpoint(f"unknown activation code {code}")
            layers.append(Layer(ad.Node(w, name="W"), ad.Node(b, name="b"), ACTIVATIONS[code]))
        nets.append(DenseNet(layers))
    return nets, meta
