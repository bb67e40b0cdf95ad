"""Real NVP density estimator on R^D.

A model is a fixed diagonal standardization followed by a stack of affine
coupling layers over a standard-normal base. Scale networks end in tanh,
which makes every per-layer log-determinant bounded by the number of
transformed coordinates and therefore makes the model density bounded
(see log_prob_upper_bound).
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .nn import Mlp, AdamState, ShapeError, TrainingError, adam_step

LOG_2PI = np.log(2.0 * np.pi)

MAGIC = b"NVP1"
_ACTIVATION_CODES = {"identity": 0, "tanh": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}

SCALE_FLOOR = 1e-8


class FormatError(ValueError):
    """Malformed serialized model; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")


class CouplingLayer:
    """Affine coupling bijection on R^D.

    Coordinates in identity_indices pass through unchanged; the complement
    is scaled by exp(s(.)) and shifted by t(.), both functions of the
    identity block. The scale net must end in tanh so |log det| is bounded
    by the size of the transformed block.
    """

    def __init__(self, dim, identity_indices, scale_net, translate_net):
        identity_indices = np.asarray(identity_indices, dtype=np.int64)
        if identity_indices.size == 0 or identity_indices.size >= dim:
            raise ValueError("identity indices must be a proper nonempty subset")
        mask = np.zeros(dim, dtype=bool)
        mask[identity_indices] = True
        self.dim = int(dim)
        self.identity_indices = np.flatnonzero(mask)
        self.transformed_indices = np.flatnonzero(~mask)
        n_id = self.identity_indices.size
        n_tr = self.transformed_indices.size
        if scale_net.in_dim != n_id or scale_net.out_dim != n_tr:
            raise ShapeError("scale net dims do not match index split")
        if translate_net.in_dim != n_id or translate_net.out_dim != n_tr:
            raise ShapeError("translate net dims do not match index split")
        if scale_net.output_activation != "tanh":
            raise ValueError("scale net must have a tanh output layer")
        self.scale_net = scale_net
        self.translate_net = translate_net

    def inverse_f(self, v):
        """Data-to-latent direction; returns (v', per-row log_det).

        v' equals v on the identity block and v*exp(s) + t on the
        complement; log_det is the sum of the s components.
        """
        v = np.asarray(v, dtype=np.float64)
        squeeze = v.ndim == 1
        if squeeze:
            v = v[None, :]
        if v.shape[1] != self.dim:
            raise ShapeError(f"expected dim {self.dim}, got {v.shape[1]}")
        x_id = v[:, self.identity_indices]
        s = self.scale_net.forward(x_id)
        t = self.translate_net.forward(x_id)
        out = v.copy()
        out[:, self.transformed_indices] = (
            v[:, self.transformed_indices] * np.exp(s) + t
        )
        log_det = s.sum(axis=1)
        if squeeze:
            return out[0], float(log_det[0])
        return out, log_det

    def forward_g(self, v_prime):
        """Latent-to-data direction; exact inverse of inverse_f."""
        v_prime = np.asarray(v_prime, dtype=np.float64)
        squeeze = v_prime.ndim == 1
        if squeeze:
            v_prime = v_prime[None, :]
        if v_prime.shape[1] != self.dim:
            raise ShapeError(f"expected dim {self.dim}, got {v_prime.shape[1]}")
        x_id = v_prime[:, self.identity_indices]
        s = self.scale_net.forward(x_id)
        t = self.translate_net.forward(x_id)
        out = v_prime.copy()
        out[:, self.transformed_indices] = (
            v_prime[:, self.transformed_indices] - t
        ) * np.exp(-s)
        return out[0] if squeeze else out


class Standardizer:
    """Fixed per-dimension affine map (x - shift) / scale."""

    def __init__(self, shift, scale):
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if shift.shape != scale.shape or shift.ndim != 1:
            raise ShapeError("shift and scale must be matching vectors")
        if not (np.all(np.isfinite(scale)) and np.all(scale > 0)):
            raise ValueError("scale entries must be positive and finite")
        self.shift = shift
        self.scale = scale

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        shift = samples.mean(axis=0)
        scale = samples.std(axis=0)
        degenerate = scale < SCALE_FLOOR
        if np.any(degenerate):
            warnings.warn(
                f"constant dimensions {np.flatnonzero(degenerate).tolist()} "
                f"floored at {SCALE_FLOOR}"
            )
            scale = np.maximum(scale, SCALE_FLOOR)
        return cls(shift, scale)

    def apply(self, x):
        return (x - self.shift) / self.scale

    def invert(self, z):
        return z * self.scale + self.shift

    @property
    def log_det(self):
        """log|d apply / dx| = -sum(log scale)."""
        return -float(np.log(self.scale).sum())


def default_masks(dim, n_layers):
    """Alternating even/odd identity blocks; evens (the larger half for odd
    D) pass through on even-numbered layers."""
    if dim < 2:
        raise ValueError("coupling layers need dim >= 2")
    evens = np.arange(0, dim, 2)
    odds = np.arange(1, dim, 2)
    return [evens if l % 2 == 0 else odds for l in range(n_layers)]


@dataclass
class FlowArchitecture:
    n_layers: int = 3
    hidden_widths: tuple = (256, 256)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one coupling layer")
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)


class FlowModel:
    """A stack of coupling layers over a standard-normal base density.

    In the data-to-latent direction the standardizer is applied first,
    then each layer's inverse_f in order. Sampling runs the layers'
    forward_g in reverse and un-standardizes.
    """

    def __init__(self, dim, layers, standardizer):
        if not layers:
            raise ValueError("need at least one coupling layer")
        for layer in layers:
            if layer.dim != dim:
                raise ShapeError("all layers must share the model dim")
        if standardizer.shift.size != dim:
            raise ShapeError("standardizer dim mismatch")
        self.dim = int(dim)
        self.layers = list(layers)
        self.standardizer = standardizer

    @classmethod
    def near_identity(cls, dim, arch=None, rng=None, standardizer=None):
        """Randomly initialized model; zero rng gives the exact identity."""
        arch = arch or FlowArchitecture()
        masks = default_masks(dim, arch.n_layers)
        layers = []
        for mask in masks:
            n_id = mask.size
            n_tr = dim - n_id
            dims = [n_id, *arch.hidden_widths, n_tr]
            layers.append(CouplingLayer(
                dim, mask,
                Mlp(dims, output_activation="tanh", rng=rng),
                Mlp(dims, output_activation="identity", rng=rng),
            ))
        return cls(dim, layers, standardizer or Standardizer.identity(dim))

    def _to_latent(self, theta):
        v = self.standardizer.apply(theta)
        log_det = np.zeros(v.shape[0])
        for layer in self.layers:
            v, ld = layer.inverse_f(v)
            log_det += ld
        return v, log_det

    def log_prob(self, theta):
        """Exact log density via the change-of-variable formula."""
        theta = np.asarray(theta, dtype=np.float64)
        squeeze = theta.ndim == 1
        if squeeze:
            theta = theta[None, :]
        if theta.shape[1] != self.dim:
            raise ShapeError(f"expected dim {self.dim}, got {theta.shape[1]}")
        z, log_det = self._to_latent(theta)
        base = -0.5 * (z * z).sum(axis=1) - 0.5 * self.dim * LOG_2PI
        out = base + log_det + self.standardizer.log_det
        return float(out[0]) if squeeze else out

    def log_prob_upper_bound(self):
        """Finite upper bound on log_prob over all of R^D.

        The base density peaks at -(D/2) log(2 pi); each layer's log-det
        is at most the number of transformed coordinates (tanh-bounded
        scale outputs); the standardizer contributes its constant log-det.
        """
        bound = -0.5 * self.dim * LOG_2PI + self.standardizer.log_det
        for layer in self.layers:
            bound += layer.transformed_indices.size
        return float(bound)

    def sample(self, n, rng):
        """n draws; z from the base, pushed through the layers in reverse."""
        if n <= 0:
            raise ValueError("n must be > 0")
        v = rng.standard_normal((n, self.dim))
        for layer in reversed(self.layers):
            v = layer.forward_g(v)
        return self.standardizer.invert(v)

    # -- training ----------------------------------------------------------

    def _parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.scale_net.parameters())
            params.extend(layer.translate_net.parameters())
        return params

    def _nll_and_grads(self, batch):
        """Mean negative log-likelihood on the batch and parameter grads.

        Backpropagates through the coupling stack by hand: each layer
        contributes to the loss both through its output (fed to later
        layers and the base density) and directly through its summed
        scale outputs (the log-determinant).
        """
        n = batch.shape[0]
        v = self.standardizer.apply(batch)
        inputs = []
        log_det = np.zeros(n)
        for layer in self.layers:
            inputs.append(v)
            v, ld = layer.inverse_f(v)
            log_det += ld
        z = v
        nll = float(np.mean(
            0.5 * (z * z).sum(axis=1) + 0.5 * self.dim * LOG_2PI - log_det
        )) - self.standardizer.log_det

        grads = []
        g = z / n                     # d nll / d z
        w_logdet = -1.0 / n           # d nll / d (per-row log_det)
        for layer, x in zip(reversed(self.layers), reversed(inputs)):
            idx = layer.identity_indices
            cdx = layer.transformed_indices
            x_id = x[:, idx]
            s = layer.scale_net.forward(x_id)
            exp_s = np.exp(s)
            g_c = g[:, cdx]
            ds = g_c * x[:, cdx] * exp_s + w_logdet
            dt = g_c
            s_grads, gx_s = layer.scale_net.backward(x_id, ds)
            t_grads, gx_t = layer.translate_net.backward(x_id, dt)
            grads[:0] = s_grads + t_grads
            g_prev = np.empty_like(g)
            g_prev[:, cdx] = g_c * exp_s
            g_prev[:, idx] = g[:, idx] + gx_s + gx_t
            g = g_prev
        return nll, grads

    def mean_nll(self, samples):
        return float(-np.mean(self.log_prob(samples)))


def fit(samples, arch=None, cfg=None):
    """Maximum-likelihood fit of a flow to a sample matrix.

    The standardizer is frozen from the sample moments before training.
    Full-data NLL is checkpointed every 100 iterations and the best
    checkpoint is returned, so the result is never worse than the
    near-identity initialization. The returned model carries the
    checkpoint trace in .fit_history.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need a sample matrix with at least 2 rows")
    if samples.shape[1] < 2:
        raise ValueError(
            "coupling layers need dim >= 2; 1-D targets are unsupported"
        )
    arch = arch or FlowArchitecture()
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    n, dim = samples.shape
    model = FlowModel.near_identity(
        dim, arch, rng=rng,
        standardizer=Standardizer.from_samples(samples),
    )
    params = model._parameters()
    state = AdamState(params, learning_rate=cfg.learning_rate)
    batch_size = min(cfg.batch_size, n)

    def snapshot():
        return [p.copy() for p in params]

    def restore(saved):
        for p, s in zip(params, saved):
            p[...] = s

    best_nll = model.mean_nll(samples)
    best_params = snapshot()
    history = [(0, best_nll)]
    for it in range(1, cfg.iterations + 1):
        batch = samples[rng.choice(n, size=batch_size, replace=False)]
        nll, grads = model._nll_and_grads(batch)
        if not np.isfinite(nll):
            raise TrainingError("non-finite training loss", iteration=it)
        adam_step(params, grads, state)
        if it % 100 == 0 or it == cfg.iterations:
            full_nll = model.mean_nll(samples)
            if not np.isfinite(full_nll):
                raise TrainingError("non-finite training loss", iteration=it)
            history.append((it, full_nll))
            if full_nll < best_nll:
                best_nll = full_nll
                best_params = snapshot()
    restore(best_params)
    model.fit_history = history
    return model


# -- serialization ---------------------------------------------------------

def _pack_mlp(net):
    parts = [struct.pack("<I", len(net.weights))]
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.asarray(b, dtype="<f8").tobytes())
        if i < n_layers - 1:
            act = 2  # relu hidden layers
        else:
            act = _ACTIVATION_CODES[net.output_activation]
        parts.append(struct.pack("<B", act))
    return b"".join(parts)


def serialize(model):
    """Bit-exact byte encoding of a FlowModel.

    Layout: magic "NVP1"; little-endian u32 D, u32 L; standardizer shift
    then scale (2*D float64); per layer: u32 identity-block size, the
    identity indices as u32, then the scale and translate nets each as
    (u32 layer count, per layer: u32 rows, u32 cols, row-major float64
    weights, float64 biases, u8 activation code).
    """
    parts = [MAGIC, struct.pack("<II", model.dim, len(model.layers))]
    parts.append(np.asarray(model.standardizer.shift, dtype="<f8").tobytes())
    parts.append(np.asarray(model.standardizer.scale, dtype="<f8").tobytes())
    for layer in model.layers:
        idx = layer.identity_indices
        parts.append(struct.pack("<I", idx.size))
        parts.append(np.asarray(idx, dtype="<u4").tobytes())
        parts.append(_pack_mlp(layer.scale_net))
        parts.append(_pack_mlp(layer.translate_net))
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated payload reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def f64_array(self, n, what):
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").copy()


def _unpack_mlp(reader, expected_in, expected_out):
    n_layers = reader.u32("mlp layer count")
    if n_layers == 0:
        raise FormatError("mlp with zero layers", reader.offset - 4)
    dims = None
    weights, biases, acts = [], [], []
    for i in range(n_layers):
        rows = reader.u32("weight rows")
        cols = reader.u32("weight cols")
        if rows == 0 or cols == 0:
            raise FormatError("zero-sized weight matrix", reader.offset - 8)
        w = reader.f64_array(rows * cols, "weights").reshape(rows, cols)
        b = reader.f64_array(cols, "biases")
        act_off = reader.offset
        act = reader.u8("activation code")
        if act not in (0, 1, 2):
            raise FormatError(f"unknown activation code {act}", act_off)
        if i < n_layers - 1 and act != 2:
            raise FormatError("hidden layer must be relu", act_off)
        if i == n_layers - 1 and act == 2:
            raise FormatError("relu output layers are unsupported", act_off)
        weights.append(w)
        biases.append(b)
        acts.append(act)
        if dims is None:
            dims = [rows]
        elif dims[-1] != rows:
            raise FormatError("inconsistent layer dims", reader.offset)
        dims.append(cols)
    if dims[0] != expected_in or dims[-1] != expected_out:
        raise FormatError(
            f"mlp dims {dims} inconsistent with coupling split", reader.offset
        )
    net = Mlp(dims, output_activation=_ACTIVATION_NAMES[acts[-1]])
    net.weights = weights
    net.biases = biases
    return net


def deserialize(data):
    """Inverse of serialize; raises FormatError naming the bad offset."""
    reader = _Reader(bytes(data))
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    dim = reader.u32("dim")
    n_layers = reader.u32("layer count")
    if dim < 2 or n_layers < 1:
        raise FormatError(f"invalid header dim={dim} L={n_layers}", 4)
    shift = reader.f64_array(dim, "standardizer shift")
    scale_off = reader.offset
    scale = reader.f64_array(dim, "standardizer scale")
    if not np.all(scale > 0):
        raise FormatError("non-positive standardizer scale", scale_off)
    layers = []
    for _ in range(n_layers):
        n_id = reader.u32("identity block size")
        if n_id == 0 or n_id >= dim:
            raise FormatError("identity block must be a proper subset",
                              reader.offset - 4)
        idx_off = reader.offset
        idx = np.frombuffer(
            reader.take(4 * n_id, "identity indices"), dtype="<u4"
        ).astype(np.int64)
        if np.unique(idx).size != n_id or idx.max() >= dim:
            raise FormatError("invalid identity indices", idx_off)
        scale_net = _unpack_mlp(reader, n_id, dim - n_id)
        if scale_net.output_activation != "tanh":
            raise FormatError("scale net must end in tanh", reader.offset)
        translate_net = _unpack_mlp(reader, n_id, dim - n_id)
        layers.append(CouplingLayer(dim, idx, scale_net, translate_net))
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after model", reader.offset)
    return FlowModel(dim, layers, Standardizer(shift, scale))
