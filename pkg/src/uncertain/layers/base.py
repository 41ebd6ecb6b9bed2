"""The layer contract shared by every layer in the package.

A layer maps tensors (or RandomVariables) to tensors (or RandomVariables),
owns named parameters, and side-effects a list of scalar regularizer losses
during each call: returning regularizers explicitly would break composition,
so callers query ``layer.losses`` (or :func:`collect_losses`) after the call.
The loss list is cleared at the start of each call, which keeps repeated
calls from double-counting KL terms.

Initializers are callables ``(shape, seed) -> Tensor | Distribution``; a
Distribution return value marks the parameter as variational and is how
Bayesian layers differ from their deterministic counterparts.  Regularizers
are callables from a parameter RandomVariable to a scalar tensor.

Randomness: a layer derives every sample from (call seed, its own
``layer_index``, a per-site salt).  Layer indices are assigned in
construction order; call :func:`reset_layer_indices` before rebuilding a
model when run-to-run bit-reproducibility matters.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from ..distributions import Distribution, Normal, kl_divergence
from ..errors import LayerError, ShapeError
from ..rng import rng_from
from ..tensor import (
    Tensor,
    as_tensor,
    matmul,
    relu,
    sigmoid,
    softplus,
    tanh,
)

_layer_counter = itertools.count()


def reset_layer_indices():
    """Restart layer numbering; fresh models then reproduce seed streams."""
    global _layer_counter
    _layer_counter = itertools.count()


ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def resolve_activation(activation):
    if callable(activation):
        return activation
    try:
        return ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(
            f"unknown activation {activation!r}; "
            f"known: {sorted(k for k in ACTIVATIONS if k)}"
        ) from None


class Layer:
    """Base class: parameter registry, loss side channel, seed splitting."""

    def __init__(self, name=None):
        self.layer_index = next(_layer_counter)
        self.name = name or f"{type(self).__name__.lower()}_{self.layer_index}"
        self._params: dict[str, Tensor] = {}
        self._trainable: set[str] = set()
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, Layer] = {}
        self._losses: list[Tensor] = []

    # -- registry ----------------------------------------------------------
    def add_param(self, name, values, trainable=True) -> Tensor:
        t = values if isinstance(values, Tensor) else Tensor(values)
        self._params[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def add_buffer(self, name, values) -> Tensor:
        t = Tensor(values)
        self._buffers[name] = t
        return t

    def add_child(self, name, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def add_loss(self, value: Tensor):
        self._losses.append(value)

    # -- call protocol -----------------------------------------------------
    def call(self, x, seed):
        raise NotImplementedError

    def __call__(self, x, seed=0):
        self._losses = []
        return self.call(x, seed)

    @property
    def losses(self) -> list:
        """Regularizer scalars accumulated during the most recent call."""
        collected = []
        for child in self._children.values():
            collected.extend(child.losses)
        collected.extend(self._losses)
        return collected

    def rng(self, seed, *salts) -> np.random.Generator:
        return rng_from(seed, self.layer_index, *salts)

    # -- state -------------------------------------------------------------
    def named_state(self, trainable_only=False):
        """Yield (path, tensor) over params (and buffers) of the whole tree."""
        for name, t in self._params.items():
            if trainable_only and name not in self._trainable:
                continue
            yield name, t
        if not trainable_only:
            for name, t in self._buffers.items():
                yield name, t
        for child_name, child in self._children.items():
            for name, t in child.named_state(trainable_only):
                yield f"{child_name}/{name}", t

    def trainable_variables(self) -> dict[str, Tensor]:
        return dict(self.named_state(trainable_only=True))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_state()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_state())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing entries: {missing}")
        for name, t in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise ShapeError(
                    f"state entry {name!r} has shape {list(values.shape)}, "
                    f"expected {list(t.shape)}"
                )
            t.data[...] = values

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


def collect_losses(model: Layer) -> list:
    """Flat list of regularizer scalars from the model's last call."""
    return list(model.losses)


# ---------------------------------------------------------------------------
# initializers and regularizers
# ---------------------------------------------------------------------------

def _fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def glorot_uniform(shape, seed):
    """Scaled uniform with bound sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = _fans(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng_from(seed, "glorot").uniform(-bound, bound, shape))


def zeros_init(shape, seed):
    return Tensor(np.zeros(shape))


def trainable_normal(mean_stddev=0.1, stddev=0.1):
    """Variational-posterior initializer: a normal whose mean is drawn at
    fan-adjusted small scale and whose scale starts at ``stddev``."""

    def initializer(shape, seed):
        fan_in, fan_out = _fans(shape)
        loc_scale = mean_stddev * math.sqrt(2.0 / (fan_in + fan_out))
        loc = rng_from(seed, "posterior-mean").normal(0.0, loc_scale, shape)
        return Normal(Tensor(loc), Tensor(np.full(shape, stddev)))

    return initializer


def normal_kl(prior=None):
    """Default regularizer: KL from the parameter's posterior to its prior
    (standard normal unless given)."""
    prior = prior or Normal(0.0, 1.0)

    def regularizer(rv):
        return kl_divergence(rv.distribution, prior)

    return regularizer


# ---------------------------------------------------------------------------
# deterministic layers
# ---------------------------------------------------------------------------

class Dense(Layer):
    """Feedforward layer: activation(x @ kernel + bias)."""

    def __init__(self, units, activation=None, kernel_initializer=None,
                 bias_initializer=None, name=None):
        super().__init__(name)
        if units < 1:
            raise ValueError(f"units must be >= 1, got {units}")
        self.units = int(units)
        self.activation = resolve_activation(activation)
        self.kernel_initializer = kernel_initializer or glorot_uniform
        self.bias_initializer = bias_initializer or zeros_init
        self.kernel = None
        self.bias = None

    def _build(self, input_dim, seed):
        kernel = self.kernel_initializer((input_dim, self.units),
                                         rng_seed(seed, self, "kernel"))
        bias = self.bias_initializer((self.units,),
                                     rng_seed(seed, self, "bias"))
        for value, which in ((kernel, "kernel"), (bias, "bias")):
            if isinstance(value, Distribution):
                raise TypeError(
                    f"Dense got a distribution for its {which}; use a "
                    "variational layer for distribution initializers"
                )
        self.kernel = self.add_param("kernel", kernel)
        self.bias = self.add_param("bias", bias)

    def call(self, x, seed):
        x = as_tensor(x)
        if x.ndim != 2:
            raise ShapeError(
                f"{type(self).__name__} expects rank-2 input [batch, features], "
                f"got {list(x.shape)}; flatten first"
            )
        if self.kernel is None:
            self._build(x.shape[1], seed)
        return self.activation(matmul(x, self.kernel) + self.bias)


class Sequential(Layer):
    """Composition of layers in list order; losses concatenate after a call."""

    def __init__(self, layers, name=None):
        super().__init__(name)
        if not layers:
            raise ValueError("Sequential needs at least one layer")
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(f"layer{i}", layer)

    def call(self, x, seed):
        out = x
        for i, layer in enumerate(self.layers):
            try:
                out = layer(out, seed=seed)
            except LayerError:
                raise
            except Exception as exc:
                raise LayerError(
                    f"layer {i} ({layer.name}): {exc}"
                ) from exc
        return out

    # flows compose inside Sequential: reverse runs right to left and the
    # log-det terms of the pieces sum along the forward pass
    def reverse(self, y):
        out = y
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            if not hasattr(layer, "reverse"):
                from ..errors import NotReversibleError

                raise NotReversibleError(
                    f"layer {i} ({layer.name}) does not implement reverse"
                )
            out = layer.reverse(out)
        return out

    def log_det_jacobian(self, x):
        total = None
        out = as_tensor(x)
        for i, layer in enumerate(self.layers):
            if not hasattr(layer, "log_det_jacobian"):
                from ..errors import NotReversibleError

                raise NotReversibleError(
                    f"layer {i} ({layer.name}) has no log_det_jacobian"
                )
            term = layer.log_det_jacobian(out)
            total = term if total is None else total + term
            out = as_tensor(layer(out, seed=0))
        return total


def rng_seed(seed, layer, *salts) -> int:
    """Derive a child seed from (call seed, layer index, salts)."""
    from ..rng import mix

    return mix(seed, layer.layer_index, *salts)
