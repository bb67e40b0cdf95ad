"""Dense feed-forward networks with explicit reverse-mode gradients, plus ADAM.

Everything here is float64 numpy. Networks are small (a few hidden layers
of a few hundred units), so an explicit layer-wise backward pass is simpler
and faster than a general autodiff tape.
"""

import numpy as np

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "tanh")

# float64 tanh rounds to exactly +/-1 for |z| > ~19; clamp one ulp inside
# so tanh outputs stay in the open interval (-1, 1)
_TANH_MAX = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a network."""


class TrainingError(RuntimeError):
    """Raised when optimization encounters a non-finite quantity."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


def glorot_uniform(rng, fan_in, fan_out):
    """Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Mlp:
    """Multi-layer perceptron with relu hidden units.

    Weights are stored as (fan_in, fan_out) matrices so a batched forward
    pass is ``x @ W + b`` with samples in rows.

    Parameters
    ----------
    layer_dims : sequence of int
        Input, hidden..., output widths.
    output_activation : {"identity", "tanh"}
    rng : numpy Generator, optional
        If given, weights are Glorot-uniform initialized; otherwise zeros.
    """

    def __init__(self, layer_dims, output_activation="identity", rng=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ShapeError(f"invalid layer dims {layer_dims}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_dims = layer_dims
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = glorot_uniform(rng, fan_in, fan_out)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Flat list of parameter arrays (weights then bias, per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"expected input with {self.in_dim} features, got shape {x.shape}"
            )
        return x, squeeze

    def forward(self, x):
        """Batched forward pass; accepts a vector or an (n, in_dim) array."""
        x, squeeze = self._check_input(x)
        out = self._forward_cached(x)[0]
        return out[0] if squeeze else out

    def _forward_cached(self, x):
        """Forward pass returning (output, pre-activations, activations)."""
        acts = [x]
        pre = []
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.output_activation == "tanh":
                h = np.clip(np.tanh(z), -_TANH_MAX, _TANH_MAX)
            else:
                h = z
            acts.append(h)
        return h, pre, acts

    def backward(self, x, cotangent):
        """Gradients of sum(cotangent * output) w.r.t. parameters and input.

        Returns (grads, input_cotangent) where grads mirrors parameters()
        and input_cotangent has the shape of x. Parameter gradients are
        summed over the batch.
        """
        x, squeeze = self._check_input(x)
        g = np.asarray(cotangent, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        if g.shape != (x.shape[0], self.out_dim):
            raise ShapeError(
                f"cotangent shape {g.shape} does not match output "
                f"({x.shape[0]}, {self.out_dim})"
            )
        out, pre, acts = self._forward_cached(x)
        if self.output_activation == "tanh":
            g = g * (1.0 - out * out)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (pre[i - 1] > 0)
        return grads, (g[0] if squeeze else g)


class AdamState:
    """ADAM optimizer state for a list of parameter arrays."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state):
    """One ADAM update with bias correction; mutates params and state.

    Raises TrainingError (carrying the current step index) on non-finite
    gradients.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state lengths differ")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", iteration=t)
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
