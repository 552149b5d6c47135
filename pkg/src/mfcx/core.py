"""Shared numerical substrate: time grids, particle ensembles, empirical laws,
model specifications with derivative callbacks and seeded noise streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Time grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Ordered time points 0 = t_0 < ... < t_n = T."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).copy()
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise ValueError("time grids start at 0")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("time points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        if T <= 0 or n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")
        pts = np.linspace(0.0, T, n_steps + 1)
        pts[-1] = T
        return cls(pts)

    @classmethod
    def dyadic(cls, level: int, T: float = 1.0) -> "TimeGrid":
        """Grid with spacing 2^-level * T."""
        if level < 0:
            raise ValueError("dyadic level must be >= 0")
        return cls.uniform(T, 2**level)

    @classmethod
    def from_step(cls, T: float, dt: float) -> "TimeGrid":
        n = int(round(T / dt))
        if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"step {dt} does not divide the horizon {T}")
        return cls.uniform(T, n)

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    def is_uniform(self, rtol: float = 1e-10) -> bool:
        d = self.dt
        return bool(np.all(np.abs(d - d[0]) <= rtol * d[0]))

    def subsample(self, every: int) -> "TimeGrid":
        if every < 1 or self.n_steps % every:
            raise ValueError("subsampling factor must divide the number of steps")
        return TimeGrid(self.points[::every])


# ---------------------------------------------------------------------------
# Empirical laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalLaw:
    """Finitely supported probability measure on R^d."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise ValueError("an empirical law needs at least one atom")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != atoms.shape[0]:
            raise ValueError("one weight per atom is required")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total}, not 1")
        w = w / total
        atoms = atoms.copy()
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, values: np.ndarray) -> "EmpiricalLaw":
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        return cls(values, np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, value) -> "EmpiricalLaw":
        return cls(np.atleast_1d(np.asarray(value, dtype=float))[None, :], np.ones(1))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """Integral of fn against the law; fn receives the (n, d) atom array."""
        vals = np.asarray(fn(self.atoms), dtype=float).reshape(self.size, -1)
        return self.weights @ vals if vals.shape[1] > 1 else float(self.weights @ vals[:, 0])

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def marginal(self, coords: Sequence[int]) -> "EmpiricalLaw":
        return EmpiricalLaw(self.atoms[:, list(coords)], self.weights)

    def compress(self, decimals: int = 12) -> "EmpiricalLaw":
        """Merge atoms that agree after rounding and drop zero weights."""
        keep = self.weights > 0
        atoms, w = self.atoms[keep], self.weights[keep]
        keys = np.round(atoms, decimals)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        merged = np.bincount(inv.reshape(-1), weights=w, minlength=uniq.shape[0])
        return EmpiricalLaw(uniq, merged)


def law_stats(law: EmpiricalLaw) -> dict:
    """Weighted mean, second moment and covariance of an empirical law."""
    w = law.weights
    x = law.atoms
    mean = w @ x
    second = (x * w[:, None]).T @ x
    centered = x - mean
    var = (centered * w[:, None]).T @ centered
    var = 0.5 * (var + var.T)
    return {"mean": mean, "second_moment": second, "variance": var}


def _quantile_steps(law: EmpiricalLaw) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(law.atoms[:, 0], kind="stable")
    vals = law.atoms[order, 0]
    cum = np.cumsum(law.weights[order])
    cum[-1] = 1.0
    return vals, cum


def wasserstein2_1d(p: EmpiricalLaw, q: EmpiricalLaw) -> float:
    """W2 distance between one-dimensional laws via the quantile coupling."""
    if p.dim != 1 or q.dim != 1:
        raise ValueError("wasserstein2_1d needs one-dimensional laws")
    pv, pc = _quantile_steps(p)
    qv, qc = _quantile_steps(q)
    levels = np.union1d(pc, qc)
    lower = np.concatenate(([0.0], levels[:-1]))
    mass = levels - lower
    keep = mass > 0
    # quantile functions are left-continuous step functions; evaluate inside each piece
    mid = 0.5 * (lower + levels)[keep]
    ip = np.minimum(np.searchsorted(pc, mid, side="left"), pv.size - 1)
    iq = np.minimum(np.searchsorted(qc, mid, side="left"), qv.size - 1)
    return float(np.sqrt(np.sum(mass[keep] * (pv[ip] - qv[iq]) ** 2)))


# ---------------------------------------------------------------------------
# Particle ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleEnsemble:
    """N sample paths on a time grid, one array of shape (N, n_times[, dim]) per channel."""

    grid: TimeGrid
    channels: Mapping[str, np.ndarray]
    seed: Optional[int] = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("an ensemble needs at least one channel")
        frozen = {}
        n = None
        for name, arr in self.channels.items():
            a = np.array(arr, dtype=float)
            if a.ndim not in (2, 3) or a.shape[1] != self.grid.points.size:
                raise ValueError(f"channel {name!r} has shape {a.shape}, expected (N, {self.grid.points.size}[, dim])")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise ValueError("all channels must hold the same number of particles")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "channels", MappingProxyType(frozen))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def n_particles(self) -> int:
        return next(iter(self.channels.values())).shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise KeyError(f"unknown channel {name!r}; have {sorted(self.channels)}") from None

    def has(self, *names: str) -> bool:
        return all(n in self.channels for n in names)

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise KeyError(f"ensemble lacks channels {missing}")

    def with_channels(self, **extra: np.ndarray) -> "ParticleEnsemble":
        ch = dict(self.channels)
        ch.update(extra)
        return ParticleEnsemble(self.grid, ch, self.seed, self.meta)

    def permuted(self, perm: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(self.grid, {k: v[perm] for k, v in self.channels.items()}, self.seed, self.meta)


def empirical_law(ensemble: ParticleEnsemble, time_index: int, channels: Sequence[str]) -> EmpiricalLaw:
    """Uniform-weight law of the particle values of `channels` at one grid time."""
    n_times = ensemble.grid.points.size
    if not -n_times <= time_index < n_times:
        raise IndexError(f"time index {time_index} outside grid of {n_times} points")
    cols = []
    for name in channels:
        a = ensemble[name][:, time_index]
        cols.append(a[:, None] if a.ndim == 1 else a)
    return EmpiricalLaw.uniform(np.concatenate(cols, axis=1))


# ---------------------------------------------------------------------------
# Deterministic noise
# ---------------------------------------------------------------------------


class NoiseStream:
    """Counter-based Gaussian noise keyed by (root seed, stream index).

    Stream j yields the same prefix for any requested length, so the value for
    particle p at step j does not depend on the ensemble size or on how the
    work is chunked.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError("seeds are nonnegative integers")
        self.seed = int(seed)

    def generator(self, stream: int) -> np.random.Generator:
        key = np.array([self.seed, int(stream)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, stream: int, n: int) -> np.ndarray:
        return self.generator(stream).standard_normal(n)

    def uniforms(self, stream: int, n: int) -> np.ndarray:
        return self.generator(stream).random(n)


# stream ids reserved for initial conditions and auxiliary draws
STREAM_INITIAL = 2**62
STREAM_AUX = 2**62 + 1


def brownian_increments(noise: NoiseStream, step: int, n: int, dt: float) -> np.ndarray:
    return np.sqrt(dt) * noise.normals(step, n)


# ---------------------------------------------------------------------------
# Model specifications
# ---------------------------------------------------------------------------

Kernel = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of an extended mean-field control problem.

    Arrays: x is (N, d), a is (N, k), y is (N, d), z is (N, d, m).  `law` is
    the joint EmpiricalLaw of (X, alpha) in R^{d+k}; `law_x` its state part.

    b(x, a, law) -> (N, d); f(x, a, law) -> (N,); g(x, law_x) -> (N,).
    db_dx -> (N, d, d); db_da -> (N, d, k); df_dx -> (N, d); df_da -> (N, k);
    dg_dx -> (N, d).

    L-derivative kernels take the law argument point first and the
    evaluation point second, already shaped for broadcasting:
    x, a are (M, 1, .) and xp, ap are (1, P, .).  Results must broadcast to
    (M, P, d, d) for db_dmu, (M, P, d, k) for db_dnu, (M, P, d) for df_dmu,
    (M, P, k) for df_dnu, and dg_dmu(x, law_x, xp) to (M, P, d).
    A missing kernel means the coefficient does not depend on that marginal.
    """

    d: int
    k: int
    m: int
    b: Kernel
    f: Kernel
    g: Kernel
    sigma: np.ndarray
    db_dx: Optional[Kernel] = None
    db_da: Optional[Kernel] = None
    df_dx: Optional[Kernel] = None
    df_da: Optional[Kernel] = None
    dg_dx: Optional[Kernel] = None
    db_dmu: Optional[Kernel] = None
    db_dnu: Optional[Kernel] = None
    df_dmu: Optional[Kernel] = None
    df_dnu: Optional[Kernel] = None
    dg_dmu: Optional[Kernel] = None
    action_box: Optional[tuple] = None
    convex: bool = False

    def __post_init__(self) -> None:
        sig = np.asarray(self.sigma, dtype=float).reshape(self.d, self.m)
        object.__setattr__(self, "sigma", sig)
        if self.action_box is not None:
            lo, hi = (np.asarray(v, dtype=float).reshape(self.k) for v in self.action_box)
            if np.any(lo >= hi):
                raise ValueError("action box needs lower < upper")
            object.__setattr__(self, "action_box", (lo, hi))

    @property
    def interior(self) -> bool:
        return self.action_box is None


def _as2d(v: np.ndarray, dim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v.reshape(-1, dim)


def tilde_mean(kernel: Kernel, x: np.ndarray, a: Optional[np.ndarray], law, xp: np.ndarray,
               ap: Optional[np.ndarray], tail: tuple, max_elems: int = 4_000_000) -> np.ndarray:
    """Average a two-point kernel over its first (law) argument.

    Returns an array of shape (P, *tail): for each evaluation point the mean
    over the M law particles.  Kernels that do not depend on the evaluation
    point are evaluated once.
    """
    M, P = x.shape[0], xp.shape[0]

    def call(sl: slice) -> np.ndarray:
        if a is None:
            return np.asarray(kernel(x[:, None, :], law, xp[None, sl, :]), dtype=float)
        return np.asarray(kernel(x[:, None, :], a[:, None, :], law, xp[None, sl, :], ap[None, sl, :]), dtype=float)

    # probe with at least two evaluation points so constant kernels are recognisable
    width = min(P, max(2, max_elems // max(M, 1)))
    first = call(slice(0, width))
    first = first.reshape(first.shape[:2] + tail) if first.ndim >= 2 else first
    if first.ndim < 2:
        raise ValueError("kernels must return at least two leading axes")
    if first.shape[1] == 1:
        avg = first.mean(axis=0) if first.shape[0] > 1 else first[0]
        return np.broadcast_to(avg.reshape((1,) + tail), (P,) + tail).copy()
    out = np.empty((P,) + tail)
    out[:width] = np.broadcast_to(first, (M, width) + tail).mean(axis=0) if first.shape[0] > 1 else first[0]
    for start in range(width, P, width):
        sl = slice(start, min(P, start + width))
        r = call(sl)
        r = np.broadcast_to(r, (M, sl.stop - sl.start) + tail)
        out[sl] = r.mean(axis=0)
    return out


def _random_law(rng: np.random.Generator, n_atoms: int, dim: int) -> EmpiricalLaw:
    atoms = rng.normal(size=(n_atoms, dim))
    w = rng.random(n_atoms) + 0.1
    return EmpiricalLaw(atoms, w / w.sum())


def check_derivatives(model: ModelSpec, n_points: int = 100, seed: int = 0, rtol: float = 1e-4,
                      n_atoms: int = 6, h: float = 1e-5) -> dict:
    """Finite-difference audit of the derivative callbacks of `model`.

    Partial derivatives in (x, a) are compared with central differences.  The
    L-derivative kernels are checked through the atom-shift identity
    d/de u(law with atom j moved by e) = w_j * d_mu u(law)(atom_j).
    Returns the worst relative error per callback and an overall verdict.
    """
    rng = np.random.default_rng(seed)
    d, k = model.d, model.k
    worst: dict[str, float] = {}

    def rel(fd: np.ndarray, cb: np.ndarray) -> float:
        fd, cb = np.asarray(fd, dtype=float), np.asarray(cb, dtype=float)
        return float(np.max(np.abs(fd - cb) / (1.0 + np.abs(cb))))

    def record(name: str, err: float) -> None:
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(n_points):
        x = rng.normal(size=(1, d))
        a = rng.normal(size=(1, k))
        if model.action_box is not None:
            lo, hi = model.action_box
            a = lo + (hi - lo) * rng.random((1, k))
        law = _random_law(rng, n_atoms, d + k)
        law_x = law.marginal(range(d))

        def b_(xx, aa, ll=law):
            return _as2d(model.b(xx, aa, ll), d)[0]

        def f_(xx, aa, ll=law):
            return float(np.asarray(model.f(xx, aa, ll)).reshape(-1)[0])

        def g_(xx, ll=law_x):
            return float(np.asarray(model.g(xx, ll)).reshape(-1)[0])

        for name, fn, var, dim in (("db_dx", b_, "x", d), ("db_da", b_, "a", k)):
            cb = getattr(model, name)
            if cb is None:
                continue
            fd = np.empty((d, dim))
            for j in range(dim):
                e = np.zeros((1, dim))
                e[0, j] = h
                if var == "x":
                    fd[:, j] = (fn(x + e, a) - fn(x - e, a)) / (2 * h)
                else:
                    fd[:, j] = (fn(x, a + e) - fn(x, a - e)) / (2 * h)
            record(name, rel(fd, np.asarray(cb(x, a, law)).reshape(d, dim)))
        for name, var, dim in (("df_dx", "x", d), ("df_da", "a", k)):
            cb = getattr(model, name)
            if cb is None:
                continue
            fd = np.empty(dim)
            for j in range(dim):
                e = np.zeros((1, dim))
                e[0, j] = h
                if var == "x":
                    fd[j] = (f_(x + e, a) - f_(x - e, a)) / (2 * h)
                else:
                    fd[j] = (f_(x, a + e) - f_(x, a - e)) / (2 * h)
            record(name, rel(fd, np.asarray(cb(x, a, law)).reshape(dim)))
        if model.dg_dx is not None:
            fd = np.empty(d)
            for j in range(d):
                e = np.zeros((1, d))
                e[0, j] = h
                fd[j] = (g_(x + e) - g_(x - e)) / (2 * h)
            record("dg_dx", rel(fd, np.asarray(model.dg_dx(x, law_x)).reshape(d)))

        # L-derivatives through shifts of a single atom
        j = int(rng.integers(law.size))
        wj = law.weights[j]
        xp = law.atoms[j : j + 1, :d]
        apt = law.atoms[j : j + 1, d:]

        def shifted(coord: int, eps: float) -> EmpiricalLaw:
            atoms = law.atoms.copy()
            atoms[j, coord] += eps
            return EmpiricalLaw(atoms, law.weights)

        for name, fn, coords, tail in (
            ("db_dmu", b_, range(d), (d, d)),
            ("db_dnu", b_, range(d, d + k), (d, k)),
            ("df_dmu", f_, range(d), (d,)),
            ("df_dnu", f_, range(d, d + k), (k,)),
        ):
            cb = getattr(model, name)
            if cb is None:
                continue
            got = np.broadcast_to(np.asarray(cb(x[:, None, :], a[:, None, :], law, xp[None], apt[None]), dtype=float),
                                  (1, 1) + tail).reshape(tail)
            for c_i, coord in enumerate(coords):
                lp, lm = shifted(coord, h), shifted(coord, -h)
                fd = (np.asarray(fn(x, a, lp)) - np.asarray(fn(x, a, lm))) / (2 * h) / wj
                record(name, rel(fd, got[..., c_i]))
        if model.dg_dmu is not None:
            got = np.broadcast_to(np.asarray(model.dg_dmu(x[:, None, :], law_x, xp[None]), dtype=float), (1, 1, d)).reshape(d)
            for coord in range(d):
                atoms = law_x.atoms.copy()
                atoms[j, coord] += h
                lp = EmpiricalLaw(atoms, law_x.weights)
                atoms = law_x.atoms.copy()
                atoms[j, coord] -= h
                lm = EmpiricalLaw(atoms, law_x.weights)
                fd = (g_(x, lp) - g_(x, lm)) / (2 * h) / wj
                record("dg_dmu", rel(fd, got[coord]))
    return {"worst": worst, "ok": all(v <= rtol for v in worst.values())}
