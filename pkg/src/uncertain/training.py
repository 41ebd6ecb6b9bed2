"""ELBO training: the per-step objective, Adam, and the fit loop.

The per-step loss is

    -(1/S) sum_s mean_batch log p(y | f(x; sample s)) + kl_scale * sum(losses)

where the KL regularizers come from the model's loss side channel after the
call.  ``kl_scale`` defaults to 1/N so the minibatch objective is an unbiased
estimate of the full-data ELBO divided by N; the unscaled-sum convention of
full-batch training corresponds to a constant kl_scale of 1.0 with
batch_size == N.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Prefetcher, batch_indices
from .distributions import RandomVariable
from .errors import ConfigError, TrainingError
from .layers.base import Layer, collect_losses
from .rng import mix
from .tensor import Tape, Tensor, tensor_mean

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ElboConfig:
    num_train_examples: int
    batch_size: int
    learning_rate: float = 1e-2
    max_steps: int = 1000
    mc_samples: int = 1
    kl_scale: object = "one_over_N"  # or a numeric constant
    seed: int = 0
    prefetch: int = 0

    def __post_init__(self):
        if self.batch_size > self.num_train_examples:
            raise ConfigError(
                f"batch_size {self.batch_size} exceeds "
                f"num_train_examples {self.num_train_examples}"
            )
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.kl_scale != "one_over_N":
            self.kl_scale = float(self.kl_scale)

    def kl_factor(self) -> float:
        if self.kl_scale == "one_over_N":
            return 1.0 / self.num_train_examples
        return float(self.kl_scale)


def _unique_params(model: Layer) -> dict[str, Tensor]:
    """Trainable variables, deduplicated when one tensor has two paths."""
    seen: set[int] = set()
    out = {}
    for name, tensor in model.trainable_variables().items():
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        out[name] = tensor
    return out


def _blame_non_finite(model: Layer) -> str:
    for child_name, child in getattr(model, "_children", {}).items():
        inner = _blame_non_finite(child)
        if inner:
            return f"{child_name}/{inner}"
    for loss in getattr(model, "_losses", []):
        if not np.all(np.isfinite(loss.data)):
            return model.name
    return ""


def elbo_step(model, batch_x, batch_y, cfg: ElboConfig, step,
              likelihood=None, params=None):
    """One ELBO evaluation with gradients.

    The model's output must be a RandomVariable (its ``log_prob`` is the
    likelihood) unless a ``likelihood(output, y) -> per-element log prob``
    is supplied.  Returns (loss Tensor, kl value, gradient map, params).
    """
    if params is None:
        params = _unique_params(model)
        if not params:
            # lazily-built layers create parameters on their first call
            model(batch_x, seed=mix(cfg.seed, "build"))
            params = _unique_params(model)
    tape = Tape()
    with tape:
        for p in params.values():
            tape.watch(p)
        log_lik = None
        for s in range(cfg.mc_samples):
            out = model(batch_x, seed=mix(cfg.seed, "step", step, "mc", s))
            if likelihood is not None:
                lp = likelihood(out, batch_y)
            elif isinstance(out, RandomVariable):
                lp = out.log_prob(batch_y)
            else:
                raise TrainingError(
                    "model output is a plain tensor and no likelihood was "
                    "supplied; end the model with a stochastic output layer "
                    "or pass likelihood="
                )
            term = tensor_mean(lp)
            log_lik = term if log_lik is None else log_lik + term
        log_lik = log_lik * (1.0 / cfg.mc_samples)
        kl_terms = collect_losses(model)
        kl_value = 0.0
        loss = -log_lik
        if kl_terms:
            total = kl_terms[0]
            for term in kl_terms[1:]:
                total = total + term
            kl_value = cfg.kl_factor() * total.item()
            loss = loss + cfg.kl_factor() * total
        if not np.isfinite(loss.data):
            blame = _blame_non_finite(model) or model.name
            raise TrainingError(
                f"non-finite loss at step {step}; first offending layer: "
                f"{blame} (log-lik={log_lik.item()!r})"
            )
        grads = tape.backward(loss) if loss.node_id is not None else {}
    return loss, kl_value, grads, params


def adam_init():
    return {"t": 0, "m": {}, "v": {}}


def adam_update(params: dict, grads: dict, state: dict, lr,
                beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Standard Adam with bias correction; updates parameter data in place."""
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        grad_t = grads.get(p.node_id)
        g = grad_t.data if grad_t is not None else np.zeros(p.shape)
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state["m"][name] = m
        state["v"][name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def fit(model, features, targets, cfg: ElboConfig, likelihood=None,
        batch_fn=None, log_fn=None):
    """Run the training loop; returns the [(step, loss, kl)] trace.

    ``batch_fn(x_batch, step) -> model input`` lets callers replace the model
    input per step (flows feed a fresh base sample instead of data).
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if not _unique_params(model):
        # lazily-built layers must create their parameters before the first
        # step's tape watches them
        probe = (batch_fn(features[:1], -1) if batch_fn is not None
                 else Tensor(features[:1]))
        model(probe, seed=mix(cfg.seed, "build"))
    state = adam_init()
    params = None
    trace = []
    batches = (
        (step, features[idx], targets[idx])
        for step, idx in enumerate(
            batch_indices(cfg.num_train_examples, cfg.batch_size,
                          cfg.max_steps, cfg.seed))
    )
    if cfg.prefetch > 0:
        batches = Prefetcher(batches, capacity=cfg.prefetch)
    for step, bx, by in batches:
        batch_x = batch_fn(bx, step) if batch_fn is not None else Tensor(bx)
        loss, kl, grads, params = elbo_step(
            model, batch_x, Tensor(by), cfg, step,
            likelihood=likelihood, params=params)
        adam_update(params, grads, state, cfg.learning_rate)
        trace.append((step, loss.item(), kl))
        if log_fn is not None:
            log_fn(step, loss.item(), kl)
    return trace


# ---------------------------------------------------------------------------
# config files: "key = value" lines, # comments
# ---------------------------------------------------------------------------

def parse_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{line_no}: expected 'key = value', got {raw!r}"
                )
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(
                    f"{path}:{line_no}: empty key or value in {raw!r}"
                )
            values[key] = value
    return values


def config_get(values: dict, key, cast, default):
    if key not in values:
        return default
    try:
        if cast is bool:
            lowered = values[key].lower()
            if lowered not in ("true", "false", "0", "1"):
                raise ValueError(f"not a boolean: {values[key]!r}")
            return lowered in ("true", "1")
        return cast(values[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None
