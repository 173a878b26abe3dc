"""Parameter network: dense MLP, physics constraint layer, NLL gradients, ADAM.

Plain numpy with hand-written backprop. The network maps normalised features
to raw outputs ``u`` (8 per interval); :func:`constrain` turns those into the
parameter vector

    (sigma_theta0, cov0, sigma_omega0, tau, kappa, D, q, r)

that feeds the closed-form Gaussian of :mod:`gridfreq.moments`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionMismatch, NonFiniteLoss
from .moments import SIGMA_FLOOR, gaussian_nll, omega_basis

PARAM_NAMES = ("sigma_theta0", "cov0", "sigma_omega0", "tau", "kappa", "D", "q", "r")
N_OUT = 8
CHECKPOINT_FORMAT = "gridfreq-mlp"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    n_hidden_layers: int = 3
    units: int = 64
    activation: str = "tanh"
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_hidden_layers < 1 or self.units < 1 or self.input_dim < 1:
            raise ConfigError("need input_dim, n_hidden_layers and units >= 1")
        if self.activation not in ("tanh", "sigmoid"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class Weights:
    config: MlpConfig
    W: list[np.ndarray]
    b: list[np.ndarray]

    def copy(self) -> "Weights":
        return Weights(self.config, [w.copy() for w in self.W], [b.copy() for b in self.b])

    def arrays(self) -> list[np.ndarray]:
        return [*self.W, *self.b]


@dataclass(frozen=True)
class ConstraintSpec:
    """Scalings ``s_j``, minima ``v_j`` and the safety factor ``delta``.

    Index ``j`` follows :data:`PARAM_NAMES` (1-based in the field names);
    ``s2`` and ``s4`` are not used by the constraint functions.
    """

    s1: float = 0.01
    s3: float = 0.1
    s5: float = 100.0
    s6: float = 0.01
    s7: float = 1e-3
    s8: float = 1e-6
    v1: float = 1e-3
    v3: float = 1e-3
    v4: float = 10.0
    v5: float = 30.0
    v6: float = 1e-4
    delta: float = 0.999

    def __post_init__(self):
        vals = asdict(self)
        if any(v <= 0 for k, v in vals.items() if k != "delta") or not 0 < self.delta < 1:
            raise ConfigError("scalings and minima must be positive, 0 < delta < 1")
        if self.v5 <= 2 * self.v4:
            raise ConfigError("need v5 > 2 v4 so that v4 < tau < kappa/2 is feasible")

    @classmethod
    def unscaled(cls) -> "ConstraintSpec":
        return cls(s1=1.0, s3=1.0, s5=1.0, s6=1.0, s7=1.0, s8=1.0)


class ThetaVector(NamedTuple):
    sigma_theta0: float
    cov0: float
    sigma_omega0: float
    tau: float
    kappa: float
    D: float
    q: float
    r: float


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else _sigmoid(z)


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation value
    return 1.0 - a * a if name == "tanh" else a * (1.0 - a)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def glorot_init(cfg: MlpConfig, seed: int) -> Weights:
    """Glorot-uniform weights ``U(-a, a)``, ``a = sqrt(6/(fan_in+fan_out))``; zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [cfg.input_dim] + [cfg.units] * cfg.n_hidden_layers + [N_OUT]
    W, b = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        W.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    return Weights(cfg, W, b)


class _Cache(NamedTuple):
    inputs: list[np.ndarray]
    acts: list[np.ndarray]
    masks: list[np.ndarray | None]


def _forward(w: Weights, X: np.ndarray, training: bool, rng) -> tuple[np.ndarray, _Cache]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != w.config.input_dim:
        raise DimensionMismatch(f"expected {w.config.input_dim} features, got {X.shape[1]}")
    p = w.config.dropout
    h = X
    inputs, acts, masks = [], [], []
    for W, b in zip(w.W[:-1], w.b[:-1]):
        inputs.append(h)
        a = _act(w.config.activation, h @ W + b)
        acts.append(a)
        if training and p > 0:
            # inverted dropout: no rescaling needed at inference
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            masks.append(mask)
            h = a * mask
        else:
            masks.append(None)
            h = a
    inputs.append(h)
    return h @ w.W[-1] + w.b[-1], _Cache(inputs, acts, masks)


def forward(w: Weights, x, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw outputs ``u``; shape ``(8,)`` for a single vector, ``(B, 8)`` for a batch."""
    if training and w.config.dropout > 0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    u, _ = _forward(w, x, training, rng)
    return u[0] if np.ndim(x) == 1 else u


def backward(w: Weights, cache: _Cache, du: np.ndarray) -> list[np.ndarray]:
    """Gradients matching :meth:`Weights.arrays` order (all W, then all b)."""
    n = len(w.W)
    gW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    g = du
    for k in range(n - 1, -1, -1):
        gW[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        if k == 0:
            break
        g = g @ w.W[k].T
        if cache.masks[k - 1] is not None:
            g = g * cache.masks[k - 1]
        g = g * _act_grad(w.config.activation, cache.acts[k - 1])
    return [*gW, *gb]


def constrain_array(U: np.ndarray, spec: ConstraintSpec, jacobian: bool = False):
    """Vectorised constraint layer on ``(B, 8)`` raw outputs.

    Evaluation order is 1, 3, 2, 5, 4, 6, 7, 8 because the covariance bound
    needs both standard deviations and the tau bound needs kappa.
    With ``jacobian=True`` also returns ``d theta / d u`` of shape ``(B, 8, 8)``.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    u1, u2, u3, u4, u5, u6, u7, u8 = U.T
    d = spec.delta
    th1 = _softplus(u1) * spec.s1 + spec.v1
    th3 = _softplus(u3) * spec.s3 + spec.v3
    t2 = np.tanh(u2)
    th2 = d * t2 * th1 * th3
    th5 = _softplus(u5) * spec.s5 + spec.v5
    sg4 = _sigmoid(u4)
    half_span = 0.5 * th5 - spec.v4
    th4 = spec.v4 + d * sg4 * half_span
    th6 = _softplus(u6) * spec.s6 + spec.v6
    th7 = u7 * spec.s7
    th8 = u8 * spec.s8
    theta = np.column_stack([th1, th2, th3, th4, th5, th6, th7, th8])
    if not jacobian:
        return theta
    J = np.zeros((U.shape[0], N_OUT, N_OUT))
    d1 = spec.s1 * _sigmoid(u1)
    d3 = spec.s3 * _sigmoid(u3)
    d5 = spec.s5 * _sigmoid(u5)
    J[:, 0, 0] = d1
    J[:, 1, 0] = d * t2 * th3 * d1
    J[:, 1, 1] = d * (1.0 - t2 * t2) * th1 * th3
    J[:, 1, 2] = d * t2 * th1 * d3
    J[:, 2, 2] = d3
    J[:, 3, 3] = d * sg4 * (1.0 - sg4) * half_span
    J[:, 3, 4] = 0.5 * d * sg4 * d5
    J[:, 4, 4] = d5
    J[:, 5, 5] = spec.s6 * _sigmoid(u6)
    J[:, 6, 6] = spec.s7
    J[:, 7, 7] = spec.s8
    return theta, J


def constrain(u, spec: ConstraintSpec) -> ThetaVector:
    return ThetaVector(*(float(v) for v in constrain_array(np.asarray(u)[None, :], spec)[0]))


class Batch(NamedTuple):
    """Arrays for a set of intervals sharing one sample grid ``t``."""

    X: np.ndarray  # (B, N) normalised features
    omega: np.ndarray  # (B, T)
    mu_theta0: np.ndarray  # (B,)
    mu_omega0: np.ndarray  # (B,)
    t: np.ndarray  # (T,)


def interval_nll(theta: np.ndarray, mu_theta0, mu_omega0, omega: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-interval summed NLL for parameter rows ``theta`` (B, 8)."""
    mean, var = _moments(theta, mu_theta0, mu_omega0, t)
    return gaussian_nll(omega, mean, var).sum(axis=1)


def _moments(theta, mu_theta0, mu_omega0, t):
    c = [theta[:, j:j + 1] for j in range(N_OUT)]
    b = omega_basis(c[3], c[4], t)
    mean = b.m_theta * mu_theta0[:, None] + b.m_omega * mu_omega0[:, None] + b.m_q * c[6] + b.m_r * c[7]
    var = b.v_theta * c[0] ** 2 + b.v_cov * c[1] + b.v_omega * c[2] ** 2 + b.v_noise * c[5] ** 2
    return mean, var


def nll_theta_gradient(theta: np.ndarray, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-interval NLL and ``d NLL / d theta`` (B, 8).

    The six parameters that enter mean or variance linearly (initial spreads,
    D, q, r) get exact derivatives through the basis functions. tau and kappa
    use central differences with step ``1e-6 * max(1, |theta_j|)``.
    """
    t = batch.t
    c = [theta[:, j:j + 1] for j in range(N_OUT)]
    b = omega_basis(c[3], c[4], t)
    mean = b.m_theta * batch.mu_theta0[:, None] + b.m_omega * batch.mu_omega0[:, None] + b.m_q * c[6] + b.m_r * c[7]
    var = b.v_theta * c[0] ** 2 + b.v_cov * c[1] + b.v_omega * c[2] ** 2 + b.v_noise * c[5] ** 2
    floor = SIGMA_FLOOR**2
    V = np.maximum(var, floor)
    resid = batch.omega - mean
    loss = (0.5 * (np.log(2 * np.pi) + np.log(V) + resid**2 / V)).sum(axis=1)
    dn_dm = -resid / V
    dn_dV = np.where(var > floor, 0.5 * (1.0 / V - resid**2 / V**2), 0.0)

    grad = np.empty_like(theta)
    grad[:, 0] = (dn_dV * b.v_theta).sum(axis=1) * 2.0 * theta[:, 0]
    grad[:, 1] = (dn_dV * b.v_cov).sum(axis=1)
    grad[:, 2] = (dn_dV * b.v_omega).sum(axis=1) * 2.0 * theta[:, 2]
    grad[:, 5] = (dn_dV * b.v_noise).sum(axis=1) * 2.0 * theta[:, 5]
    grad[:, 6] = (dn_dm * b.m_q).sum(axis=1)
    grad[:, 7] = (dn_dm * b.m_r).sum(axis=1)
    for j in (3, 4):
        h = 1e-6 * np.maximum(1.0, np.abs(theta[:, j]))
        up = theta.copy()
        dn = theta.copy()
        up[:, j] += h
        dn[:, j] -= h
        f_up = interval_nll(up, batch.mu_theta0, batch.mu_omega0, batch.omega, t)
        f_dn = interval_nll(dn, batch.mu_theta0, batch.mu_omega0, batch.omega, t)
        grad[:, j] = (f_up - f_dn) / (2.0 * h)
    return loss, grad


def nll_gradient(
    w: Weights,
    spec: ConstraintSpec,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Summed NLL over the batch and its gradient w.r.t. every weight array."""
    U, cache = _forward(w, batch.X, training, rng)
    theta, J = constrain_array(U, spec, jacobian=True)
    loss, g_theta = nll_theta_gradient(theta, batch)
    total = float(loss.sum())
    if not np.isfinite(total) or not np.all(np.isfinite(g_theta)):
        raise NonFiniteLoss("non-finite NLL or gradient in batch")
    dU = np.einsum("bi,bij->bj", g_theta, J)
    return total, backward(w, cache, dU)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, w: Weights) -> "AdamState":
        arrs = w.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])


def adam_step(w: Weights, grads: list[np.ndarray], state: AdamState, lr: float) -> tuple[Weights, AdamState]:
    """One bias-corrected ADAM update, in place on ``w`` and ``state``."""
    arrs = w.arrays()
    if len(grads) != len(arrs) or any(g.shape != a.shape for g, a in zip(grads, arrs)):
        raise DimensionMismatch("gradient shapes do not match the weights")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return w, state


@dataclass
class ParameterModel:
    """Weights plus constraint layer: features in, constrained parameters out."""

    weights: Weights
    spec: ConstraintSpec = field(default_factory=ConstraintSpec)

    def predict_theta(self, X) -> np.ndarray:
        return constrain_array(forward(self.weights, np.atleast_2d(X)), self.spec)

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.weights.config),
            "constraints": asdict(self.spec),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights.W, self.weights.b)],
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ParameterModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
        cfg = MlpConfig(**doc["config"])
        W = [np.array(layer["W"], dtype=float).reshape(-1, len(layer["b"])) for layer in doc["layers"]]
        b = [np.array(layer["b"], dtype=float) for layer in doc["layers"]]
        return cls(Weights(cfg, W, b), ConstraintSpec(**doc["constraints"]))
