"""Gaussian-process layers in three estimator classes.

``GaussianProcess`` integrates exactly (prior or posterior predictive via a
dense solve), ``SparseGaussianProcess`` uses inducing variables with a KL
regularizer on the inducing output distribution, and
``RandomFourierFeatures`` projects onto fixed cosine features with a
variational readout.  All default to a zero mean function and a squared
exponential kernel, output one independent GP per unit sharing the kernel,
and return RandomVariables so deep stacks compose by feeding samples forward.
"""
from __future__ import annotations

import math

import numpy as np

from ..distributions import MultivariateNormal, Normal, kl_divergence
from ..errors import ShapeError
from ..tensor import (
    Tensor,
    as_tensor,
    concat,
    cos,
    exp,
    matmul,
    posdef_solve,
    reshape,
    softplus,
    softplus_inverse,
    sqrt,
    tensor_sum,
    transpose,
    where,
)
from .base import Layer, normal_kl, rng_seed, trainable_normal
from .variational import VariationalParameter

_VAR_FLOOR = 1e-10


class SquaredExponential:
    """k(x, x') = a^2 exp(-||x - x'||^2 / (2 l^2)) with log-space trainables."""

    def __init__(self, amplitude=1.0, lengthscale=1.0):
        if amplitude <= 0 or lengthscale <= 0:
            raise ValueError("amplitude and lengthscale must be positive")
        self.log_amplitude = Tensor(math.log(amplitude))
        self.log_lengthscale = Tensor(math.log(lengthscale))

    def variables(self):
        return {"log_amplitude": self.log_amplitude,
                "log_lengthscale": self.log_lengthscale}

    def __call__(self, x, x2):
        x, x2 = as_tensor(x), as_tensor(x2)
        if x.ndim != 2 or x2.ndim != 2 or x.shape[1] != x2.shape[1]:
            raise ShapeError(
                f"kernel inputs need matching feature dims, got "
                f"{list(x.shape)} and {list(x2.shape)}"
            )
        sq_x = tensor_sum(x * x, axis=1, keepdims=True)
        sq_x2 = tensor_sum(x2 * x2, axis=1, keepdims=True)
        sq_dist = sq_x + transpose(sq_x2) - 2.0 * matmul(x, transpose(x2))
        # rounding can push tiny distances slightly negative
        sq_dist = where(sq_dist.data > 0.0, sq_dist, 0.0)
        amp2 = exp(2.0 * self.log_amplitude)
        inv_2ell2 = 0.5 * exp(-2.0 * self.log_lengthscale)
        return amp2 * exp(-sq_dist * inv_2ell2)

    def diag(self, x):
        x = as_tensor(x)
        amp2 = exp(2.0 * self.log_amplitude)
        return amp2 * Tensor(np.ones(x.shape[0]))


class _GPLayer(Layer):
    """Shared kernel/mean plumbing for the three estimators."""

    def __init__(self, units, mean_fn=None, kernel=None, amplitude=1.0,
                 lengthscale=1.0, train_kernel=True, name=None):
        super().__init__(name)
        if units < 1:
            raise ValueError(f"units must be >= 1, got {units}")
        self.units = int(units)
        self.mean_fn = mean_fn
        self.kernel = kernel or SquaredExponential(amplitude, lengthscale)
        for k, v in self.kernel.variables().items():
            self.add_param(f"kernel_{k}", v, trainable=train_kernel)

    def _mean(self, x):
        if self.mean_fn is None:
            return Tensor(np.zeros((x.shape[0], self.units)))
        out = as_tensor(self.mean_fn(x))
        if out.shape != (x.shape[0], self.units):
            raise ShapeError(
                f"mean_fn returned {list(out.shape)}, expected "
                f"[{x.shape[0]}, {self.units}]"
            )
        return out


class GaussianProcess(_GPLayer):
    """Exact GP layer: the nonparametric counterpart of a dense layer.

    Without conditioning data the call returns the prior at the inputs; with
    ``conditional_inputs/outputs`` it returns the exact posterior predictive
    under Gaussian observation noise.  Exact integration needs no variational
    state, so no regularizer loss is ever appended.
    """

    def __init__(self, units, mean_fn=None, kernel=None,
                 conditional_inputs=None, conditional_outputs=None,
                 observation_noise=1e-3, amplitude=1.0, lengthscale=1.0,
                 train_kernel=True, train_noise=False, name=None):
        super().__init__(units, mean_fn, kernel, amplitude, lengthscale,
                         train_kernel, name)
        if (conditional_inputs is None) != (conditional_outputs is None):
            raise ValueError(
                "conditional_inputs and conditional_outputs come together"
            )
        self.conditional_inputs = None
        self.conditional_outputs = None
        if conditional_inputs is not None:
            cx = as_tensor(conditional_inputs)
            cy = as_tensor(conditional_outputs)
            if cx.ndim != 2 or cy.ndim != 2 or cx.shape[0] != cy.shape[0]:
                raise ShapeError(
                    f"conditioning data shapes disagree: {list(cx.shape)} vs "
                    f"{list(cy.shape)}"
                )
            if cy.shape[1] != self.units:
                raise ShapeError(
                    f"conditioning outputs have {cy.shape[1]} columns, "
                    f"expected units={self.units}"
                )
            self.conditional_inputs = self.add_buffer("conditional_inputs", cx.data)
            self.conditional_outputs = self.add_buffer("conditional_outputs", cy.data)
        self.log_noise = self.add_param(
            "log_noise", math.log(observation_noise), trainable=train_noise)

    def predictive(self, x):
        """Posterior (or prior) predictive as a MultivariateNormal."""
        x = as_tensor(x)
        if x.ndim != 2:
            raise ShapeError(
                f"GP input must be rank 2 [batch, features], got {list(x.shape)}"
            )
        mean = self._mean(x)
        k_xx = self.kernel(x, x)
        if self.conditional_inputs is None:
            return MultivariateNormal(mean, k_xx)
        cx, cy = self.conditional_inputs, self.conditional_outputs
        k_xn = self.kernel(x, cx)
        k_nn = self.kernel(cx, cx)
        noise = exp(2.0 * self.log_noise)
        gram = k_nn + noise * Tensor(np.eye(cx.shape[0]))
        residual = cy - self._mean(cx)
        post_mean = mean + matmul(k_xn, posdef_solve(gram, residual))
        post_cov = k_xx - matmul(k_xn, posdef_solve(gram, transpose(k_xn)))
        return MultivariateNormal(post_mean, post_cov)

    def call(self, x, seed):
        return self.predictive(as_tensor(x)).sample(self.rng(seed, "function"))


class SparseGaussianProcess(_GPLayer):
    """Inducing-variable GP with a variational N(m_u, S) over inducing outputs.

    The call returns per-point marginals sampled by reparameterization (the
    doubly stochastic estimator, which is what lets deep stacks train), and
    appends one loss: sum over units of KL(N(m_u, S) || N(0, K_zz)).

    S is parameterized by an unconstrained lower-triangular factor per unit
    whose diagonal passes through softplus, initialized so that S = K_zz and
    m_u = 0 (zero KL, prior-matched) at build time.  Inducing inputs start
    uniform over the bounding box of the first batch.
    """

    def __init__(self, units, num_inducing, mean_fn=None, kernel=None,
                 amplitude=1.0, lengthscale=1.0, train_kernel=True,
                 train_inducing=True, name=None):
        super().__init__(units, mean_fn, kernel, amplitude, lengthscale,
                         train_kernel, name)
        if num_inducing < 1:
            raise ValueError(f"num_inducing must be >= 1, got {num_inducing}")
        self.num_inducing = int(num_inducing)
        self.train_inducing = train_inducing
        self.inducing_inputs = None
        self.inducing_mean = None
        self.scale_raws = None
        self._tril_mask = None

    def _build(self, x, seed):
        m = self.num_inducing
        rng = self.rng(seed, "inducing")
        lo = x.data.min(axis=0)
        hi = x.data.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        z0 = rng.uniform(0.0, 1.0, (m, x.shape[1])) * span + lo
        self.inducing_inputs = self.add_param("inducing_inputs", z0,
                                              trainable=self.train_inducing)
        self.inducing_mean = self.add_param("inducing_mean",
                                            np.zeros((m, self.units)))
        k_zz = self.kernel(self.inducing_inputs, self.inducing_inputs).data
        chol = np.linalg.cholesky(k_zz + _VAR_FLOOR * np.eye(m))
        raw0 = np.tril(chol, -1)
        raw0[np.diag_indices(m)] = softplus_inverse(np.diag(chol))
        self.scale_raws = [
            self.add_param(f"inducing_scale_raw{u}", raw0.copy())
            for u in range(self.units)
        ]
        self._tril_mask = np.tril(np.ones((m, m)), -1)

    def _unit_scale(self, u):
        """Lower-triangular factor of S for unit u (softplus diagonal)."""
        m = self.num_inducing
        raw_u = self.scale_raws[u]
        strict = raw_u * Tensor(self._tril_mask)
        diag = softplus(raw_u) * Tensor(np.eye(m))
        return strict + diag

    def call(self, x, seed):
        x = as_tensor(x)
        if x.ndim != 2:
            raise ShapeError(
                f"GP input must be rank 2 [batch, features], got {list(x.shape)}"
            )
        if self.inducing_inputs is None:
            self._build(x, seed)
        z = self.inducing_inputs
        k_zz = self.kernel(z, z) + _VAR_FLOOR * Tensor(np.eye(self.num_inducing))
        k_zx = self.kernel(z, x)
        solved = posdef_solve(k_zz, k_zx)                     # K_zz^-1 K_zx
        mean = self._mean(x) + matmul(transpose(solved), self.inducing_mean)
        base_var = self.kernel.diag(x) - tensor_sum(k_zx * solved, axis=0)
        cols, kl_terms = [], []
        zero = Tensor(np.zeros((self.num_inducing, 1)))
        for u in range(self.units):
            scale_u = self._unit_scale(u)
            half = matmul(transpose(scale_u), solved)         # L^T K_zz^-1 K_zx
            var_u = base_var + tensor_sum(half * half, axis=0)
            var_u = where(var_u.data > _VAR_FLOOR, var_u, _VAR_FLOOR)
            cols.append(reshape(var_u, (x.shape[0], 1)))
            q_u = MultivariateNormal(
                _slice_col(self.inducing_mean, u),
                matmul(scale_u, transpose(scale_u)))
            p_u = MultivariateNormal(zero, k_zz)
            kl_terms.append(kl_divergence(q_u, p_u))
        variance = concat(cols, axis=1)
        total_kl = kl_terms[0]
        for term in kl_terms[1:]:
            total_kl = total_kl + term
        self.add_loss(total_kl)
        dist = Normal(mean, sqrt(variance))
        return dist.sample(self.rng(seed, "function"))


def _slice_col(t, u, width=1):
    from ..tensor import slice_last

    return slice_last(t, u, u + width)


class RandomFourierFeatures(Layer):
    """Kernel approximation by fixed random cosines with a variational readout.

    phi(x) = sqrt(2 a^2 / D) cos(x Omega / l + beta) with Omega ~ N(0, I) and
    beta ~ U[0, 2pi) frozen at build; the output is phi(x) @ W with W a
    mean-field variational matrix whose KL is appended as the single loss.
    """

    def __init__(self, units, num_features, kernel_initializer=None,
                 kernel_regularizer="default", amplitude=1.0, lengthscale=1.0,
                 kernel=None, train_kernel=True, name=None):
        super().__init__(name)
        if units < 1 or num_features < 1:
            raise ValueError("units and num_features must be >= 1")
        self.units = int(units)
        self.num_features = int(num_features)
        self.kernel = kernel or SquaredExponential(amplitude, lengthscale)
        for k, v in self.kernel.variables().items():
            self.add_param(f"kernel_{k}", v, trainable=train_kernel)
        self.kernel_initializer = kernel_initializer or trainable_normal()
        self.kernel_regularizer = (normal_kl() if kernel_regularizer == "default"
                                   else kernel_regularizer)
        self.directions = None
        self.phases = None
        self.readout = None

    def _build(self, input_dim, seed):
        rng = self.rng(seed, "features")
        self.directions = self.add_buffer(
            "directions", rng.standard_normal((input_dim, self.num_features)))
        self.phases = self.add_buffer(
            "phases", rng.uniform(0.0, 2.0 * math.pi, self.num_features))
        self.readout = VariationalParameter(
            self, "readout", (self.num_features, self.units),
            self.kernel_initializer, rng_seed(seed, self, "readout"))

    def features(self, x):
        """The cosine feature map phi(x), shape [batch, num_features]."""
        x = as_tensor(x)
        if x.ndim != 2:
            raise ShapeError(
                f"RFF input must be rank 2 [batch, features], got {list(x.shape)}"
            )
        if self.directions is None:
            raise RuntimeError("layer must be called once before features()")
        amp2 = exp(2.0 * self.kernel.log_amplitude)
        inv_ell = exp(-self.kernel.log_lengthscale)
        gain = sqrt(2.0 * amp2 * (1.0 / self.num_features))
        return gain * cos(matmul(x, self.directions) * inv_ell + self.phases)

    def call(self, x, seed):
        x = as_tensor(x)
        if self.directions is None:
            if x.ndim != 2:
                raise ShapeError(
                    f"RFF input must be rank 2 [batch, features], "
                    f"got {list(x.shape)}"
                )
            self._build(x.shape[1], seed)
        phi = self.features(x)
        w = self.readout.sample(self.rng(seed, "readout"))
        out = matmul(phi, w.value)
        if self.kernel_regularizer is not None:
            self.add_loss(self.kernel_regularizer(w))
        return out
