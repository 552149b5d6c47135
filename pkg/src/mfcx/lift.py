"""Continuous-time realization of level-0 and level-1 causal couplings.

A coupling kernel becomes a map Psi(U, w) by inverting its conditional CDF at
a uniform U. Between quantization nodes the rate is interpolated linearly in
the Wiener increment (and extrapolated linearly outside the node range), so
Psi is defined for every real w. On each dyadic block [a, b] the state
follows the bridge

    dX_t = (Psi(U, W_t) - X_t) / (b - t) dt + dW_t,

which is adapted and ends at X_b = Psi(U, W_b). Euler steps are used up to
the last step of the block, which is replaced by the closed-form endpoint.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import STREAM_AUX, EmpiricalLaw, NoiseStream, ParticleEnsemble, TimeGrid, brownian_increments
from .transport import CostSpec, DiscreteCausalCoupling


def _inverse_cdf(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Action index with cumulative kernel mass first exceeding u; kernel (..., n_a), u broadcast to kernel[..., 0]."""
    cum = np.cumsum(kernel, axis=-1)
    idx = (cum <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, kernel.shape[-1] - 1)


def _interp(nodes: np.ndarray, values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation along the last axis of values, extrapolating the end segments."""
    j = np.clip(np.searchsorted(nodes, w, side="right") - 1, 0, nodes.size - 2)
    lo, hi = nodes[j], nodes[j + 1]
    frac = (w - lo) / (hi - lo)
    v_lo = np.take_along_axis(values, j[..., None], axis=-1)[..., 0]
    v_hi = np.take_along_axis(values, (j + 1)[..., None], axis=-1)[..., 0]
    return v_lo + frac * (v_hi - v_lo)


class _RateMaps:
    """Per-particle rates at the quantization nodes for one or two blocks."""

    def __init__(self, coupling: DiscreteCausalCoupling, u: np.ndarray) -> None:
        sp = coupling.space
        w = coupling.wiener
        acts = coupling.actions
        self.nodes = np.asarray(w.nodes)
        self.dt = w.dt
        order = np.argsort(self.nodes)
        if not np.all(order == np.arange(w.m)):
            raise ValueError("quantization nodes must be sorted")
        first = sp.trans[0][0]  # x key index after the first increment, per node
        K0 = coupling.kernel(0)[first, 0, :]  # (m, n_a)
        a0 = _inverse_cdf(K0[None, :, :], u[0][:, None])  # (N, m)
        self.z0 = acts.values[a0]
        self.z1 = None
        if w.steps == 2:
            K1 = coupling.kernel(1)
            x2 = sp.trans[1][first]  # (m, m)
            s1 = acts.offsets[a0]  # (N, m)
            rows = K1[x2[None, :, :], s1[:, :, None], :]  # (N, m, m, n_a)
            a1 = _inverse_cdf(rows, u[1][:, None, None])
            self.z1 = acts.values[a1]

    def rate0(self, w: np.ndarray) -> np.ndarray:
        return _interp(self.nodes, self.z0, w)

    def rate1(self, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
        inner = _interp(self.nodes, self.z1, np.broadcast_to(w1[:, None], self.z1.shape[:2]))
        return _interp(self.nodes, inner, w0)


def lift_to_sde(coupling: DiscreteCausalCoupling, N: int, seed: int = 42, dt: float = 1e-3, record_every: int = 1,
                costs: Optional[CostSpec] = None) -> ParticleEnsemble:
    """Simulate N paths of the bridge SDE whose grid marginals follow the coupling.

    Channels: W, X and alpha (the drift used on each Euler step). With costs
    given, meta carries the level-n cost of the lifted paths ("discrete_cost",
    rates taken over the dyadic blocks) and the continuous cost
    int f(law alpha_t) dt + g(law X_T) ("continuous_cost").
    """
    n = coupling.level
    if n not in (0, 1):
        raise ValueError("the lift is implemented for levels 0 and 1")
    if N < 1:
        raise ValueError("N must be positive")
    T = coupling.T
    steps = int(round(T / dt))
    if steps < 2 or abs(steps * dt - T) > 1e-9 * T:
        raise ValueError("dt must divide T into at least two steps")
    blocks = 2**n
    if steps % blocks:
        raise ValueError("the Euler grid must contain the dyadic block ends")
    if record_every < 1 or steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    noise = NoiseStream(seed)
    u = np.stack([noise.uniforms(STREAM_AUX + b, N) for b in range(blocks)])
    maps = _RateMaps(coupling, u)
    x0 = coupling.x0
    per_block = steps // blocks
    t = np.linspace(0.0, T, steps + 1)
    n_rec = steps // record_every + 1
    rec_W = np.empty((n_rec, N))
    rec_X = np.empty((n_rec, N))
    rec_a = np.empty((n_rec, N))
    W = np.zeros(N)
    X = np.full(N, x0)
    rec_W[0], rec_X[0] = W, X
    running = 0.0
    block_start_X, block_start_W = X.copy(), W.copy()
    W_first = None
    block_rates = []
    for j in range(steps):
        b, pos = divmod(j, per_block)
        t_end = (b + 1) * per_block * dt
        dW = brownian_increments(noise, j, N, dt)
        if pos == per_block - 1:
            W_next = W + dW
            target = _psi(maps, b, x0, block_start_X, block_start_W, W_first, W_next)
            alpha = (target - X - dW) / dt
            X_next = target
        else:
            target = _psi(maps, b, x0, block_start_X, block_start_W, W_first, W)
            alpha = (target - X) / (t_end - t[j])
            X_next = X + alpha * dt + dW
            W_next = W + dW
        if costs is not None:
            running += dt * costs.f(EmpiricalLaw.uniform(alpha))
        X, W = X_next, W_next
        if (j + 1) % record_every == 0:
            k = (j + 1) // record_every
            rec_W[k], rec_X[k] = W, X
            rec_a[k - 1] = alpha
        if pos == per_block - 1:
            block_rates.append((X - block_start_X - (W - block_start_W)) / maps.dt)
            if b == 0:
                W_first = W.copy()
            block_start_X, block_start_W = X.copy(), W.copy()
    rec_a[-1] = rec_a[-2]
    meta = {"level": n, "dt": dt}
    if costs is not None:
        final = costs.g(EmpiricalLaw.uniform(X))
        meta["continuous_cost"] = float(running + final)
        meta["discrete_cost"] = float(maps.dt * sum(costs.f(EmpiricalLaw.uniform(z)) for z in block_rates) + final)
    grid = TimeGrid(t[::record_every])
    return ParticleEnsemble(grid, {"W": rec_W.T, "X": rec_X.T, "alpha": rec_a.T}, seed=seed, meta=meta)


def _psi(maps: _RateMaps, block: int, x0: float, X_start: np.ndarray, W_start: np.ndarray,
         W_first: Optional[np.ndarray], W: np.ndarray) -> np.ndarray:
    """Block endpoint if the Wiener path ended the block at its current value."""
    if block == 0:
        return x0 + W + maps.dt * maps.rate0(W)
    w1 = W - W_start
    return X_start + w1 + maps.dt * maps.rate1(W_first, w1)
