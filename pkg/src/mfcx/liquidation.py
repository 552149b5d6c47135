"""Optimal liquidation with permanent impact driven by the mean trading speed.

Each trader holds inventory Q, trades at speed alpha and faces the price

    dS = lam * E[alpha] dt + sigma dW,    dQ = alpha dt,

paying E[ int (phi Q^2 + alpha S + k alpha^2) dt - Q_T (S_T - A Q_T) ].
The optimal speed is explicit: it depends on the randomness only through the
initial inventory q0 and on the population through E[Q0].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .core import STREAM_INITIAL, NoiseStream, ParticleEnsemble, TimeGrid, brownian_increments


class LiquidationError(ValueError):
    """Raised when a closed-form expression is undefined."""


@dataclass(frozen=True)
class InitialInventory:
    """Law of the initial inventory: constant, two-point or Gaussian."""

    kind: str = "constant"
    value: float = 1.0
    low: float = 0.0
    high: float = 0.0
    p_low: float = 0.5
    std: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "two-point", "gaussian"):
            raise ValueError(f"unknown inventory law {self.kind!r}")
        if self.kind == "two-point" and not 0.0 <= self.p_low <= 1.0:
            raise ValueError("p_low must be a probability")
        if self.kind == "gaussian" and self.std < 0:
            raise ValueError("std must be nonnegative")

    @classmethod
    def constant(cls, q: float) -> "InitialInventory":
        return cls("constant", value=q)

    @classmethod
    def two_point(cls, low: float, high: float, p_low: float = 0.5) -> "InitialInventory":
        return cls("two-point", low=low, high=high, p_low=p_low)

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "InitialInventory":
        return cls("gaussian", value=mean, std=std)

    @property
    def mean(self) -> float:
        if self.kind == "two-point":
            return self.p_low * self.low + (1 - self.p_low) * self.high
        return self.value

    def sample(self, n: int, noise: NoiseStream) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, float(self.value))
        gen = noise.generator(STREAM_INITIAL)
        if self.kind == "gaussian":
            return self.value + self.std * gen.standard_normal(n)
        return np.where(gen.random(n) < self.p_low, self.low, self.high)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.value, "std": self.std}
        return {"kind": "two-point", "low": self.low, "high": self.high, "p_low": self.p_low}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialInventory":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls.constant(float(d["value"]))
        if kind == "gaussian":
            return cls.gaussian(float(d["mean"]), float(d["std"]))
        if kind == "two-point":
            return cls.two_point(float(d["low"]), float(d["high"]), float(d.get("p_low", 0.5)))
        raise ValueError(f"unknown inventory law {kind!r}")


@dataclass(frozen=True)
class LiquidationParams:
    lam: float  # permanent impact
    k: float  # temporary impact
    phi: float  # running inventory penalty
    A: float  # terminal inventory penalty
    sigma: float = 1.0
    s0: float = 0.0
    T: float = 1.0
    q0: InitialInventory = InitialInventory.constant(1.0)

    def __post_init__(self) -> None:
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")
        if self.A <= 0:
            raise ValueError("A must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def convex_regime(self) -> bool:
        """Whether A >= lam / 2, the regime where the first-order condition is sufficient."""
        return self.A >= 0.5 * self.lam

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "k": self.k, "phi": self.phi, "A": self.A, "sigma": self.sigma,
                "s0": self.s0, "T": self.T, "Q0": self.q0.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "LiquidationParams":
        return cls(lam=float(d["lambda"]), k=float(d["k"]), phi=float(d["phi"]), A=float(d["A"]),
                   sigma=float(d.get("sigma", 1.0)), s0=float(d.get("s0", 0.0)), T=float(d.get("T", 1.0)),
                   q0=InitialInventory.from_dict(d.get("Q0", {"kind": "constant", "value": 1.0})))


@dataclass(frozen=True)
class LiquidationConstants:
    r: float
    d1: float
    d2: float
    c1: float
    c2: float


def derived_constants(params: LiquidationParams) -> LiquidationConstants:
    if params.k <= 0 or params.phi < 0:
        raise ValueError("need k > 0 and phi >= 0")
    sq = np.sqrt(params.phi * params.k)
    r = np.sqrt(params.phi / params.k)
    d1 = sq - params.A
    d2 = sq + params.A
    return LiquidationConstants(r=float(r), d1=float(d1), d2=float(d2), c1=float(2 * d1 + params.lam),
                                c2=float(2 * d2 - params.lam))


class LiquidationSolution:
    """Closed-form optimal speed and inventory.

    For phi > 0 the inventory is a combination of exp(+-r t) with
    r = sqrt(phi / k); for phi = 0 it is linear in t.  All formulas are
    written with exp(-r T) factored out so that large r T does not overflow.
    """

    def __init__(self, params: LiquidationParams) -> None:
        self.params = params
        self.constants = derived_constants(params)
        p, c = params, self.constants
        if p.phi > 0:
            e2 = np.exp(-2 * c.r * p.T)
            self._D1 = c.d1 * e2 + c.d2
            self._D2 = c.c1 * e2 + c.c2
            if abs(self._D1) <= 1e-12 * (abs(c.d1) * e2 + abs(c.d2)):
                raise LiquidationError("vanishing denominator d1 exp(-rT) + d2 exp(rT)")
            if abs(self._D2) <= 1e-12 * (abs(c.c1) * e2 + abs(c.c2)):
                raise LiquidationError("vanishing denominator c1 exp(-rT) + c2 exp(rT)")
        else:
            self._lin_den = 2 * p.k + (2 * p.A - p.lam) * p.T
            if abs(self._lin_den) <= 1e-12 * (2 * p.k + (2 * p.A + p.lam) * p.T):
                raise LiquidationError("vanishing denominator 2k + (2A - lambda) T")

    # -- phi = 0: straight-line trading ---------------------------------
    def _linear_alpha0(self, q0, Eq0):
        p = self.params
        mean_speed = (p.lam - 2 * p.A) * Eq0 / self._lin_den
        return (0.5 * p.lam * (Eq0 + mean_speed * p.T) - p.A * q0) / (p.k + p.A * p.T)

    def alpha0(self, q0, Eq0):
        """Initial trading speed."""
        return self.paths(0.0, q0, Eq0)[1]

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        T = self.params.T
        if np.any(t < -1e-12 * T) or np.any(t > T * (1 + 1e-12)):
            raise ValueError(f"time outside [0, {T}]")
        return np.clip(t, 0.0, T)

    def paths(self, t, q0, Eq0):
        """(Q_t, alpha_t) for initial inventory q0 and population mean Eq0."""
        t = self._check_t(t)
        q0 = np.asarray(q0, dtype=float)
        p, c = self.params, self.constants
        if p.phi == 0:
            a0 = self._linear_alpha0(q0, Eq0)
            return q0 + a0 * t, a0 + 0.0 * t
        r, T = c.r, p.T
        em = np.exp(-r * (2 * T - t))  # exp(-r(T-t)) * exp(-rT)
        ep = np.exp(-r * t)  # exp(r(T-t)) * exp(-rT)
        mf = p.lam * Eq0 / (self._D1 * self._D2)
        g_plus = np.exp(r * (t - 2 * T))
        g_minus = np.exp(-r * (t + 2 * T))
        Q = q0 * (c.d1 * em + c.d2 * ep) / self._D1 + 2 * np.sqrt(p.phi * p.k) * mf * (g_plus - g_minus)
        alpha = q0 * r * (c.d1 * em - c.d2 * ep) / self._D1 + 2 * p.phi * mf * (g_plus + g_minus)
        return Q, alpha

    def inventory(self, t, q0, Eq0):
        return self.paths(t, q0, Eq0)[0]

    def speed(self, t, q0, Eq0):
        return self.paths(t, q0, Eq0)[1]

    def integrated_inventory(self, t, q0, Eq0):
        """int_0^t Q_s ds in closed form."""
        t = self._check_t(t)
        q0 = np.asarray(q0, dtype=float)
        p, c = self.params, self.constants
        if p.phi == 0:
            a0 = self._linear_alpha0(q0, Eq0)
            return q0 * t + 0.5 * a0 * t**2
        r, T = c.r, p.T
        e2 = np.exp(-2 * r * T)
        first = q0 * (c.d1 * e2 * np.expm1(r * t) - c.d2 * np.expm1(-r * t)) / (r * self._D1)
        mf = p.lam * Eq0 / (self._D1 * self._D2)
        second = 2 * np.sqrt(p.phi * p.k) * mf * e2 * (np.expm1(r * t) + np.expm1(-r * t)) / r
        return first + second

    def y2_initial(self, q0, Eq0):
        """Initial value of the second adjoint component, lam E[Q0] - s0 - 2k alpha0."""
        p = self.params
        return p.lam * Eq0 - p.s0 - 2 * p.k * self.alpha0(q0, Eq0)

    def terminal_coupling_residual(self, q0, Eq0):
        """alpha(T) - (lam / 2k) E[Q_T] + (A / k) Q_T, zero at the optimum."""
        p = self.params
        QT, aT = self.paths(p.T, q0, Eq0)
        EQT = self.inventory(p.T, Eq0, Eq0)
        return aT - p.lam / (2 * p.k) * EQT + p.A / p.k * QT


def alpha0(params: LiquidationParams, q0, Eq0):
    return LiquidationSolution(params).alpha0(q0, Eq0)


def closed_form_paths(params: LiquidationParams, q0, Eq0, t):
    return LiquidationSolution(params).paths(t, q0, Eq0)


Speed = Union[Callable, np.ndarray, LiquidationSolution]


def simulate_market(params: LiquidationParams, speed: Speed, N: int, seed: int = 42, dt: float = 1e-3,
                    record_every: int = 1) -> ParticleEnsemble:
    """Interacting-particle simulation of price, inventory and wealth.

    `speed` is the optimal solution, a callable alpha(t, q0, Eq0) or a path
    array of shape (n_steps + 1,) or (N, n_steps + 1).  The price uses an
    Euler step with the ensemble mean speed; inventory integrates the speed
    with Simpson's rule (trapezoid for path arrays); wealth uses the trapezoid
    rule on -alpha (S + k alpha).
    """
    if N < 1:
        raise ValueError("need at least one particle")
    grid = TimeGrid.from_step(params.T, dt)
    rec = grid.subsample(record_every)
    noise = NoiseStream(seed)
    q0 = params.q0.sample(N, noise)
    Eq0 = params.q0.mean
    n = grid.n_steps
    h = params.T / n

    if isinstance(speed, LiquidationSolution):
        speed = speed.speed
    if callable(speed):
        fn = speed

        def alpha_at(j: int) -> np.ndarray:
            return np.broadcast_to(np.asarray(fn(grid.points[j], q0, Eq0), dtype=float), (N,)).copy()

        def dq(j: int, a_lo: np.ndarray, a_hi: np.ndarray) -> np.ndarray:
            mid = np.broadcast_to(np.asarray(fn(0.5 * (grid.points[j] + grid.points[j + 1]), q0, Eq0), dtype=float), (N,))
            return h * (a_lo + 4 * mid + a_hi) / 6
    else:
        arr = np.asarray(speed, dtype=float)
        if arr.ndim == 1:
            arr = np.broadcast_to(arr, (N, arr.size))
        if arr.shape != (N, n + 1):
            raise ValueError(f"speed path must have shape ({N}, {n + 1})")

        def alpha_at(j: int) -> np.ndarray:
            return np.array(arr[:, j])

        def dq(j: int, a_lo: np.ndarray, a_hi: np.ndarray) -> np.ndarray:
            return 0.5 * h * (a_lo + a_hi)

    m = rec.points.size
    # time-major buffers keep the per-step writes contiguous
    out = {name: np.empty((m, N)) for name in ("S", "Q", "X", "alpha", "W")}
    S = np.full(N, float(params.s0))
    Q = q0.copy()
    X = np.zeros(N)
    W = np.zeros(N)
    a = alpha_at(0)

    def store(col: int) -> None:
        out["S"][col] = S
        out["Q"][col] = Q
        out["X"][col] = X
        out["alpha"][col] = a
        out["W"][col] = W

    store(0)
    for j in range(n):
        a_next = alpha_at(j + 1)
        dW = brownian_increments(noise, j, N, h) if params.sigma > 0 else np.zeros(N)
        Q = Q + dq(j, a, a_next)
        S_next = S + params.lam * a.mean() * h + params.sigma * dW
        X = X - 0.5 * h * (a * (S + params.k * a) + a_next * (S_next + params.k * a_next))
        S = S_next
        W = W + dW
        a = a_next
        if (j + 1) % record_every == 0:
            store((j + 1) // record_every)
    out = {name: np.ascontiguousarray(buf.T) for name, buf in out.items()}
    return ParticleEnsemble(rec, out, seed, {"Eq0": Eq0, "dt": h})


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    samples: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": int(self.samples.size)}


def _estimate(samples: np.ndarray) -> CostEstimate:
    n = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return CostEstimate(float(samples.mean()), se, samples)


def execution_cost(ensemble: ParticleEnsemble, params: LiquidationParams) -> CostEstimate:
    """Monte Carlo estimate of the liquidation cost, with its standard error."""
    ensemble.require("S", "Q", "alpha")
    S, Q, a = ensemble["S"], ensemble["Q"], ensemble["alpha"]
    running = params.phi * Q**2 + a * S + params.k * a**2
    per_path = np.trapezoid(running, ensemble.grid.points, axis=1)
    per_path = per_path - Q[:, -1] * (S[:, -1] - params.A * Q[:, -1])
    return _estimate(per_path)


def _cumulative_integral(values: np.ndarray, deriv: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid with the Euler-Maclaurin end correction (uses the derivative)."""
    h = np.diff(t)
    inc = 0.5 * h * (values[:, 1:] + values[:, :-1]) - h**2 / 12 * (deriv[:, 1:] - deriv[:, :-1])
    out = np.zeros_like(values)
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


def _abs_stats(res: np.ndarray, scale: float) -> dict:
    per_t = np.abs(res).mean(axis=0) if res.ndim == 2 else np.abs(res)
    return {
        "max": float(np.max(np.abs(res))),
        "mean": float(np.mean(np.abs(res))),
        "scale": float(scale),
        "normalized_max": float(np.max(per_t) / scale) if scale > 0 else float(np.max(per_t)),
        "normalized_mean": float(np.mean(per_t) / scale) if scale > 0 else float(np.mean(per_t)),
    }


def adjoint_paths(ensemble: ParticleEnsemble, params: LiquidationParams) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint components along simulated paths.

    Y1 = -Q and Y2_t = Y2_0 - 2 phi int_0^t Q ds - sigma W_t with
    Y2_0 = lam E[Q0] - s0 - 2k alpha_0.
    """
    ensemble.require("S", "Q", "alpha", "W")
    Q, a, W = ensemble["Q"], ensemble["alpha"], ensemble["W"]
    t = ensemble.grid.points
    Eq0 = float(ensemble.meta.get("Eq0", params.q0.mean))
    y2_0 = params.lam * Eq0 - params.s0 - 2 * params.k * a[:, 0]
    y2 = y2_0[:, None] - 2 * params.phi * _cumulative_integral(Q, a, t) - params.sigma * W
    return -Q, y2


def adjoint_residuals(ensemble: ParticleEnsemble, params: LiquidationParams) -> dict:
    """Residuals of the first-order condition and of the adjoint terminal values.

    The adjoint comes from `adjoint_paths`.  The first-order residual is
    Y2 + S + 2k alpha + lam E[Y1]; "normalized_max" is the largest
    time-slice mean absolute residual divided by the mean absolute size of
    the four summands.
    """
    S, Q, a = ensemble["S"], ensemble["Q"], ensemble["alpha"]
    y1, y2 = adjoint_paths(ensemble, params)
    mean_y1 = y1.mean(axis=0)
    foc = y2 + S + 2 * params.k * a + params.lam * mean_y1[None, :]
    scale = float(np.mean(np.abs(y2) + np.abs(S) + 2 * params.k * np.abs(a) + params.lam * np.abs(mean_y1)[None, :]))
    y1_term = y1[:, -1] + Q[:, -1]
    y2_term = y2[:, -1] + S[:, -1] - 2 * params.A * Q[:, -1]
    term_scale = float(np.mean(np.abs(y2[:, -1]) + np.abs(S[:, -1]) + 2 * params.A * np.abs(Q[:, -1])))
    return {
        "foc": _abs_stats(foc, scale),
        "y1_terminal": _abs_stats(y1_term, 1.0),
        "y2_terminal": _abs_stats(y2_term, term_scale),
    }


def random_perturbation(base: Callable, amplitude: float, seed: int, T: float, n_modes: int = 3) -> Callable:
    """Speed alpha(t) * (1 + amplitude * xi(t)) with a random smooth xi, |xi| <= 1."""
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=n_modes)
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    freq = np.arange(1, n_modes + 1)
    norm = np.abs(coef).sum()

    def xi(t):
        t = np.asarray(t, dtype=float)
        return np.sum(coef[:, None] * np.sin(np.pi * freq[:, None] * np.atleast_1d(t)[None, :] / T + phase[:, None]),
                      axis=0).reshape(t.shape) / norm

    def speed(t, q0, Eq0):
        return base(t, q0, Eq0) * (1 + amplitude * xi(t))

    return speed
