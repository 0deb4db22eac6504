"""
Gaussian-emission hidden Markov model over anchor boxes.

States are anchors; each state emits 4-vector boxes from a Gaussian whose
mean is the anchor's coordinates. Means are frozen: EM only re-estimates
the transition matrix and the emission covariances. Everything runs in log
space.

Intended for small grids (tens to a few hundred states), where it serves as
a reference for the heuristic transition counts in :mod:`amtubes.transmat`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .geometry import AnchorGrid

COV_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class HmmUnderflowError(FloatingPointError):
    """Every state has zero probability at some step of the filter."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"all state likelihoods vanished at step {step}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HmmModel:
    """
    Parameters
    ----------
    transitions : ndarray, shape (N, N)
        Row-stochastic transition matrix.
    means : ndarray, shape (N, 4)
        Emission means (anchor boxes). Never updated by EM.
    covariances : ndarray, shape (N, 4, 4)
        Emission covariances, symmetric positive definite.
    initial : ndarray, shape (N,), optional
        Initial state distribution; uniform when omitted.
    """

    transitions: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    initial: np.ndarray | None = None

    def __post_init__(self):
        A = _readonly(self.transitions)
        mu = _readonly(self.means)
        cov = _readonly(self.covariances)
        n = mu.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"transition matrix shape {A.shape} does not match {n} states")
        if mu.ndim != 2 or cov.shape != (n, mu.shape[1], mu.shape[1]):
            raise ValueError("means must be (N, D) and covariances (N, D, D)")
        if np.any(A < 0) or not np.allclose(A.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise ValueError("covariances must be positive definite")
        pi = np.full(n, 1.0 / n) if self.initial is None else np.array(self.initial, dtype=float)
        if pi.shape != (n,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must be a probability vector over states")
        object.__setattr__(self, "transitions", A)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "initial", _readonly(pi))

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_anchor_grid(cls, grid: AnchorGrid, level: int = 0, sigma: float = 0.05,
                         transitions: np.ndarray | None = None) -> "HmmModel":
        """States are the anchors of one level, in cell-major slot order."""
        means = grid.flat(level)
        n = len(means)
        if transitions is None:
            transitions = np.full((n, n), 1.0 / n)
        cov = np.broadcast_to(np.eye(means.shape[1]) * sigma**2, (n, 4, 4))
        return cls(transitions, means, cov)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "transitions": self.transitions.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HmmModel":
        return cls(np.array(doc["transitions"]), np.array(doc["means"]),
                   np.array(doc["covariances"]), np.array(doc["initial"]))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "HmmModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _as_obs(obs) -> np.ndarray:
    o = np.asarray(obs, dtype=float)
    if o.ndim == 1:
        o = o[None, :]
    if o.ndim != 2 or len(o) == 0:
        raise ValueError("observation sequence must be a non-empty (T, D) array")
    if not np.all(np.isfinite(o)):
        raise ValueError("observations must be finite")
    return o


def log_emissions(model: HmmModel, obs) -> np.ndarray:
    """Gaussian log densities, shape ``(T, N)``."""
    o = _as_obs(obs)
    d = o.shape[1]
    inv = np.linalg.inv(model.covariances)
    _, logdet = np.linalg.slogdet(model.covariances)
    diff = o[:, None, :] - model.means[None, :, :]
    maha = np.einsum("tni,nij,tnj->tn", diff, inv, diff)
    return -0.5 * (d * _LOG_2PI + logdet[None, :] + maha)


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _filter(model: HmmModel, log_b: np.ndarray) -> tuple[np.ndarray, float]:
    log_a = _log(model.transitions)
    T, n = log_b.shape
    post = np.empty((T, n))
    loglik = 0.0
    prev = _log(model.initial)
    for t in range(T):
        if t > 0:
            prev = logsumexp(prev[:, None] + log_a, axis=0)
        joint = prev + log_b[t]
        c = logsumexp(joint)
        if not np.isfinite(c):
            raise HmmUnderflowError(t)
        loglik += c
        prev = joint - c
        post[t] = np.exp(prev)
    return post, float(loglik)


def forward_filter(model: HmmModel, obs) -> np.ndarray:
    """
    Filtered posteriors ``P(q_t | o_1..o_t)`` for every step.

    Returns
    -------
    ndarray, shape (T, N)
        Each row sums to one.
    """
    post, _ = _filter(model, log_emissions(model, obs))
    return post


def log_likelihood(model: HmmModel, obs) -> float:
    return _filter(model, log_emissions(model, obs))[1]


def predict_state(model: HmmModel, obs_prefix) -> tuple[int, np.ndarray]:
    """Most probable current state and its mean box; ties go to the lowest id."""
    post = forward_filter(model, obs_prefix)[-1]
    q = int(np.argmax(post))
    return q, model.means[q].copy()


def _forward_backward(log_a, log_pi, log_b):
    T, n = log_b.shape
    alpha = np.empty((T, n))
    beta = np.zeros((T, n))
    alpha[0] = log_pi + log_b[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + log_a, axis=0) + log_b[t]
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(log_a + (log_b[t + 1] + beta[t + 1])[None, :], axis=1)
    loglik = logsumexp(alpha[-1])
    if not np.isfinite(loglik):
        bad = int(np.argmax(~np.isfinite(logsumexp(alpha, axis=1))))
        raise HmmUnderflowError(bad)
    return alpha, beta, float(loglik)


def floor_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Clip eigenvalues from below; the result is symmetric positive definite."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    out = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class EmResult:
    model: HmmModel
    log_likelihoods: tuple[float, ...]
    n_iter: int
    converged: bool


def em_fit(model: HmmModel, sequences: Sequence, max_iters: int = 20, tol: float = 1e-6,
           cov_floor: float = COV_FLOOR) -> EmResult:
    """
    Baum-Welch with frozen means.

    Only the transition matrix and the covariances are re-estimated. Rows
    and covariances of states that receive no responsibility keep their
    previous values; every updated covariance is eigenvalue-floored at
    ``cov_floor`` so no state collapses to a singular Gaussian.

    ``log_likelihoods[k]`` is the total log-likelihood of ``sequences``
    under the model after ``k`` M-steps. Iteration stops once the gain
    drops below ``tol`` or after ``max_iters`` M-steps.
    """
    seqs = [_as_obs(s) for s in sequences]
    if not seqs:
        raise ValueError("em_fit needs at least one observation sequence")
    history: list[float] = []
    converged = False
    n_iter = 0
    tiny = np.finfo(float).tiny
    while True:
        log_a = _log(model.transitions)
        log_pi = _log(model.initial)
        n = model.n_states
        xi_sum = np.zeros((n, n))
        out_mass = np.zeros(n)
        occ = np.zeros(n)
        scatter = np.zeros_like(model.covariances)
        total = 0.0
        for o in seqs:
            log_b = log_emissions(model, o)
            alpha, beta, ll = _forward_backward(log_a, log_pi, log_b)
            total += ll
            gamma = np.exp(alpha + beta - ll)
            occ += gamma.sum(axis=0)
            diff = o[:, None, :] - model.means[None, :, :]
            scatter += np.einsum("tn,tni,tnj->nij", gamma, diff, diff)
            if len(o) > 1:
                out_mass += gamma[:-1].sum(axis=0)
                log_xi = (alpha[:-1, :, None] + log_a[None, :, :]
                          + (log_b[1:] + beta[1:])[:, None, :] - ll)
                xi_sum += np.exp(log_xi).sum(axis=0)
        history.append(total)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        if n_iter >= max_iters:
            break

        A = model.transitions.copy()
        live = out_mass > tiny
        A[live] = xi_sum[live] / xi_sum[live].sum(axis=1, keepdims=True)
        cov = model.covariances.copy()
        for i in np.flatnonzero(occ > tiny):
            cov[i] = floor_covariance(scatter[i] / occ[i], cov_floor)
        model = replace(model, transitions=A, covariances=cov)
        n_iter += 1
    return EmResult(model, tuple(history), n_iter, converged)


def sample(model: HmmModel, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(states, observations)`` of the given length."""
    states = np.empty(length, dtype=np.int64)
    obs = np.empty((length, model.means.shape[1]))
    q = rng.choice(model.n_states, p=model.initial)
    for t in range(length):
        if t > 0:
            q = rng.choice(model.n_states, p=model.transitions[q])
        states[t] = q
        obs[t] = rng.multivariate_normal(model.means[q], model.covariances[q])
    return states, obs
