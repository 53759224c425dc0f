"""Discrete diffusion over token sequences with an absorbing [MASK] state.

Tokens are 1-based: real tokens take values ``1..K`` and the mask token is
``K + 1``. Value 0 is never a token; models use it as padding.

Every transition matrix here is column-stochastic and indexed as
``Q[to, from]``, so ``q(x_t | x_{t-1}) = Q_t[x_t, x_{t-1}]``. Each step keeps a
real token with probability ``alpha + beta``, replaces it by any given real
token with probability ``beta`` and masks it with probability ``gamma``; the
mask state is absorbing.

All distribution arithmetic is carried out in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

__all__ = [
    "Codebook",
    "DegeneratePosteriorError",
    "ScheduleError",
    "TransitionSchedule",
    "backward_step",
    "build_schedule",
    "forward_corrupt",
    "posterior",
    "posterior_mixture",
]


class ScheduleError(ValueError):
    """Raised when a schedule yields probabilities outside [0, 1]."""


class DegeneratePosteriorError(ArithmeticError):
    """Raised when q(x_t | x_0) is zero for every admissible x_0."""


@dataclass(frozen=True)
class Codebook:
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be positive, got {self.K}")

    @property
    def mask_index(self) -> int:
        return self.K + 1


_TOL = 1e-12


class TransitionSchedule:
    """Per-step and cumulative corruption probabilities for steps ``0..T``.

    Index 0 of every array is the identity corruption (``alpha_bar[0] = 1``,
    ``gamma_bar[0] = 0``); per-step arrays are meaningful for ``t >= 1``.
    """

    def __init__(self, K: int, alpha_bar: Sequence[float], gamma_bar: Sequence[float], params=None):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        gamma_bar = np.asarray(gamma_bar, dtype=np.float64)
        if alpha_bar.shape != gamma_bar.shape or alpha_bar.ndim != 1:
            raise ScheduleError("alpha_bar and gamma_bar must be 1-D arrays of equal length")
        if len(alpha_bar) < 2:
            raise ScheduleError("schedule needs at least one diffusion step")
        if alpha_bar[0] != 1.0 or gamma_bar[0] != 0.0:
            raise ScheduleError("step 0 must be the identity (alpha_bar=1, gamma_bar=0)")
        if K < 2:
            raise ScheduleError(f"K must be >= 2, got {K}")
        self.K = int(K)
        self.codebook = Codebook(self.K)
        # (kind, values) used for serialization
        self.params = params or ("explicit", {})

        self.alpha_bar = alpha_bar
        self.gamma_bar = gamma_bar
        self.beta_bar = (1.0 - alpha_bar - gamma_bar) / K

        T = len(alpha_bar) - 1
        alpha = np.ones(T + 1)
        gamma = np.zeros(T + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in range(1, T + 1):
                if alpha_bar[t - 1] > 0:
                    alpha[t] = alpha_bar[t] / alpha_bar[t - 1]
                elif alpha_bar[t] == 0:
                    alpha[t] = 0.0
                else:
                    raise ScheduleError(f"alpha_bar increases from 0 at step {t}")
                if gamma_bar[t - 1] < 1:
                    gamma[t] = 1.0 - (1.0 - gamma_bar[t]) / (1.0 - gamma_bar[t - 1])
                elif gamma_bar[t] == 1:
                    gamma[t] = 1.0
                else:
                    raise ScheduleError(f"gamma_bar decreases from 1 at step {t}")
        beta = (1.0 - alpha - gamma) / K
        beta[0] = 0.0
        self.alpha, self.beta, self.gamma = alpha, beta, gamma

        for name, arr in [
            ("alpha", alpha), ("beta", beta), ("gamma", gamma),
            ("alpha_bar", alpha_bar), ("beta_bar", self.beta_bar), ("gamma_bar", gamma_bar),
        ]:
            bad = np.flatnonzero((arr < -_TOL) | (arr > 1 + _TOL) | ~np.isfinite(arr))
            if bad.size:
                t = int(bad[0])
                raise ScheduleError(f"{name}[{t}] = {arr[t]!r} is not a probability")
        # clip rounding noise so sampling never sees tiny negatives
        for arr in (self.alpha, self.beta, self.gamma, self.beta_bar):
            np.clip(arr, 0.0, 1.0, out=arr)

        self._torch = {
            name: torch.from_numpy(getattr(self, name).copy())
            for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar")
        }

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def mask_index(self) -> int:
        return self.K + 1

    def __repr__(self):
        kind, values = self.params
        return f"TransitionSchedule(T={self.T}, K={self.K}, kind={kind!r}, {values})"

    def __eq__(self, other):
        if not isinstance(other, TransitionSchedule):
            return NotImplemented
        return (
            self.K == other.K
            and np.array_equal(self.alpha_bar, other.alpha_bar)
            and np.array_equal(self.gamma_bar, other.gamma_bar)
        )

    __hash__ = None

    def _check_t(self, t, lo=0):
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def transition_matrix(self, t: int) -> np.ndarray:
        """One-step matrix ``Q_t`` of shape ``(K+1, K+1)``, indexed ``[to, from]``."""
        self._check_t(t)
        K = self.K
        Q = np.zeros((K + 1, K + 1))
        Q[:K, :K] = self.beta[t]
        Q[np.arange(K), np.arange(K)] += self.alpha[t]
        Q[K, :K] = self.gamma[t]
        Q[K, K] = 1.0
        return Q

    def cumulative_matrix(self, t: int) -> np.ndarray:
        """Closed-form ``Q_t @ ... @ Q_1`` (identity for ``t = 0``)."""
        self._check_t(t)
        K = self.K
        Q = np.zeros((K + 1, K + 1))
        Q[:K, :K] = self.beta_bar[t]
        Q[np.arange(K), np.arange(K)] += self.alpha_bar[t]
        Q[K, :K] = self.gamma_bar[t]
        Q[K, K] = 1.0
        return Q

    def table(self, name: str, t) -> torch.Tensor:
        """Look up a float64 schedule array at integer step(s) ``t``."""
        return self._torch[name][torch.as_tensor(t, dtype=torch.long)]

    # plain-text key=value serialization

    def to_text(self) -> str:
        kind, values = self.params
        lines = [f"kind={kind}", f"T={self.T}", f"K={self.K}"]
        if kind == "linear":
            lines += [f"a_T={values['a_T']!r}", f"g_T={values['g_T']!r}"]
        else:
            lines += [
                "alpha_bar=" + ",".join(repr(float(v)) for v in self.alpha_bar[1:]),
                "gamma_bar=" + ",".join(repr(float(v)) for v in self.gamma_bar[1:]),
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransitionSchedule":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ScheduleError(f"malformed schedule line: {line!r}")
            kv[key.strip()] = value.strip()
        try:
            kind, T, K = kv["kind"], int(kv["T"]), int(kv["K"])
            if kind == "linear":
                return build_schedule(T, K, a_T=float(kv["a_T"]), g_T=float(kv["g_T"]))
            if kind == "explicit":
                ab = [float(v) for v in kv["alpha_bar"].split(",")]
                gb = [float(v) for v in kv["gamma_bar"].split(",")]
                if len(ab) != T or len(gb) != T:
                    raise ScheduleError("cumulant list length does not match T")
                return cls.from_cumulants(K, ab, gb)
        except KeyError as exc:
            raise ScheduleError(f"missing schedule key {exc}") from None
        raise ScheduleError(f"unknown schedule kind {kind!r}")

    @classmethod
    def from_cumulants(cls, K: int, alpha_bar: Sequence[float], gamma_bar: Sequence[float]):
        """Schedule from cumulants at steps ``1..T`` (step 0 is prepended)."""
        ab = np.concatenate([[1.0], np.asarray(alpha_bar, dtype=np.float64)])
        gb = np.concatenate([[0.0], np.asarray(gamma_bar, dtype=np.float64)])
        return cls(K, ab, gb, params=("explicit", {}))


def build_schedule(T: int = 100, K: int = 128, a_T: float = 1e-5, g_T: float = 0.9) -> TransitionSchedule:
    """Linear cumulants: ``alpha_bar`` falls from 1 to ``a_T``, ``gamma_bar`` rises from 0 to ``g_T``."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if K < 2:
        raise ScheduleError(f"K must be >= 2, got {K}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha_bar = 1.0 - t * (1.0 - a_T) / T
    gamma_bar = t * g_T / T
    alpha_bar[0], gamma_bar[0] = 1.0, 0.0
    return TransitionSchedule(K, alpha_bar, gamma_bar, params=("linear", {"a_T": float(a_T), "g_T": float(g_T)}))


def _as_tokens(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.long)


def forward_corrupt(x0, t: int, sched: TransitionSchedule, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample ``x_t ~ q(x_t | x_0)`` independently per position."""
    x0 = _as_tokens(x0)
    sched._check_t(t)
    if t == 0:
        return x0.clone()
    if x0.numel() and (x0.min() < 1 or x0.max() > sched.K):
        raise ValueError("x0 must contain only real tokens 1..K")
    K = sched.K
    probs = torch.full(x0.shape + (K + 1,), float(sched.beta_bar[t]), dtype=torch.float64)
    probs[..., K] = float(sched.gamma_bar[t])
    probs.scatter_add_(-1, (x0 - 1).unsqueeze(-1), torch.full(x0.shape + (1,), float(sched.alpha_bar[t]), dtype=torch.float64))
    return _sample(probs, generator)


def _sample(probs: torch.Tensor, generator) -> torch.Tensor:
    flat = probs.reshape(-1, probs.shape[-1])
    if flat.shape[0] == 0:
        return torch.zeros(probs.shape[:-1], dtype=torch.long)
    idx = torch.multinomial(flat, 1, generator=generator).squeeze(-1)
    return (idx + 1).reshape(probs.shape[:-1])


def posterior(xt_val: int, x0_val: int, t: int, sched: TransitionSchedule) -> np.ndarray:
    """``q(x_{t-1} | x_t, x_0)`` as a length-(K+1) vector; entry ``j`` is token ``j+1``."""
    sched._check_t(t, lo=1)
    K = sched.K
    if not 1 <= x0_val <= K:
        raise ValueError(f"x0 value {x0_val} is not a real token")
    if not 1 <= xt_val <= K + 1:
        raise ValueError(f"x_t value {xt_val} out of range")
    p = np.zeros(K)
    p[x0_val - 1] = 1.0
    out = posterior_mixture(torch.tensor([xt_val]), torch.from_numpy(p)[None], t, sched)
    return out[0].numpy()


def posterior_mixture(xt: torch.Tensor, p_x0: torch.Tensor, t, sched: TransitionSchedule) -> torch.Tensor:
    """``sum_k q(x_{t-1} | x_t, x_0=k) p(x_0=k)`` for every position.

    Args:
        xt: token tensor of shape ``(...)`` with values in ``1..K+1``.
        p_x0: distribution over the K real tokens, shape ``(..., K)``.
        t: step ``>= 1``; an int or a tensor broadcastable to ``xt.shape``.

    Returns:
        float64 tensor of shape ``(..., K+1)``. Differentiable in ``p_x0``.

    Candidates ``x_0`` with ``q(x_t | x_0) = 0`` cannot have produced ``x_t``;
    their weight is dropped and the remaining mixture renormalized. If no
    candidate with positive weight is consistent, DegeneratePosteriorError.
    """
    xt = _as_tokens(xt)
    p = p_x0.to(torch.float64)
    K = sched.K
    if p.shape[:-1] != xt.shape or p.shape[-1] != K:
        raise ValueError(f"p_x0 shape {tuple(p.shape)} does not match x_t shape {tuple(xt.shape)} and K={K}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (t.min() < 1 or t.max() > sched.T):
        raise ValueError(f"step outside [1, {sched.T}]")
    t = t.expand(xt.shape) if t.dim() == 0 else t

    def col(name, step):
        return sched.table(name, step).unsqueeze(-1)

    a, b, g = col("alpha", t), col("beta", t), col("gamma", t)
    A, B, G = col("alpha_bar", t), col("beta_bar", t), col("gamma_bar", t)
    A1, B1, G1 = col("alpha_bar", t - 1), col("beta_bar", t - 1), col("gamma_bar", t - 1)

    is_mask = (xt == K + 1).unsqueeze(-1)
    # one-hot of x_t over the real tokens (all zero when x_t is the mask)
    onehot = torch.zeros(xt.shape + (K,), dtype=torch.float64)
    onehot.scatter_(-1, (xt.clamp(max=K) - 1).unsqueeze(-1), 1.0)
    onehot = onehot * (~is_mask)

    # likelihood q(x_t | x_0 = k)
    den = torch.where(is_mask, G.expand_as(p), B + A * onehot)
    valid = den > 0
    w = torch.where(valid, p / torch.where(valid, den, torch.ones_like(den)), torch.zeros_like(p))
    norm = torch.where(valid, p, torch.zeros_like(p)).sum(-1, keepdim=True)
    if bool((norm <= 0).any()):
        raise DegeneratePosteriorError("q(x_t | x_0) vanishes for every candidate x_0")
    S = w.sum(-1, keepdim=True)

    # v = Qbar_{t-1} @ w restricted to the K+1 targets; out = Q_t[x_t, :] * v
    v_real = B1 * S + A1 * w
    v_mask = G1 * S
    step_real = torch.where(is_mask, g.expand_as(p), b + a * onehot)
    step_mask = torch.where(is_mask, torch.ones_like(S), torch.zeros_like(S))
    out = torch.cat([step_real * v_real, step_mask * v_mask], dim=-1)
    return out / norm


def backward_step(
    xt,
    p_x0: torch.Tensor,
    t: int,
    sched: TransitionSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Sample ``x_{t-1}`` from the denoiser-weighted posterior mixture."""
    xt = _as_tokens(xt)
    p_x0 = torch.as_tensor(p_x0, dtype=torch.float64)
    if p_x0.shape[:-1] != xt.shape:
        raise ValueError(f"length mismatch: x_t {tuple(xt.shape)} vs p_x0 {tuple(p_x0.shape)}")
    if p_x0.shape[-1] != sched.K:
        raise ValueError(f"p_x0 must cover exactly K={sched.K} real tokens")
    if p_x0.numel() and not torch.allclose(p_x0.sum(-1), torch.ones((), dtype=torch.float64), atol=1e-6):
        raise ValueError("p_x0 rows must sum to 1")
    sched._check_t(t, lo=1)
    probs = posterior_mixture(xt, p_x0, t, sched)
    return _sample(probs.clamp(min=0.0), generator)
