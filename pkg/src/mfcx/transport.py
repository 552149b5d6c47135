"""Discrete causal transport problems on dyadic grids.

Level n splits [0, T] into 2^n steps of length dt. The Wiener path is
replaced by a finite tree of quantized increments; a causal coupling picks,
after each increment, a control rate z from a finite lattice so that

    y_{i+1} = y_i + (x_{i+1} - x_i) + dt z_i,      y_0 = x0,

and the cost is dt sum_i f(law z_i) + g(law y_final).

Costs only see the per-step law of the rate and the final law of y. Both are
functions of the joint law of (x_i, s_i, z_i), where s_i is the running sum of
the integer action indices, so couplings are stored as flows on the
recombining state space (x key, s). Every such flow is realized by a kernel
that reads only the current state, and any path-dependent causal coupling
projects onto a flow with the same cost.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import EmpiricalLaw

MAX_FLOW_ENTRIES = 50_000_000
MAX_BRUTE_FORCE_WORK = 10_000_000

# ---------------------------------------------------------------------------
# Quantized Wiener increments
# ---------------------------------------------------------------------------

QUANTIZATIONS = ("gauss-hermite", "binomial", "lattice")


def _standard_nodes(kind: str, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unit-variance nodes, probabilities, key basis and integer node keys."""
    if kind == "binomial":
        if m != 2:
            raise ValueError("the binomial quantization has m = 2")
        return np.array([-1.0, 1.0]), np.array([0.5, 0.5]), np.array([1.0]), np.array([[-1], [1]])
    if kind == "lattice":
        if m == 2:
            return _standard_nodes("binomial", 2)
        if m == 3:
            p = np.array([1.0, 4.0, 1.0]) / 6.0
            return np.sqrt(3.0) * np.array([-1.0, 0.0, 1.0]), p, np.array([np.sqrt(3.0)]), np.array([[-1], [0], [1]])
        if m == 5:
            p = np.array([1.0, 2.0, 6.0, 2.0, 1.0]) / 12.0
            k = np.arange(-2, 3)
            return k.astype(float), p, np.array([1.0]), k[:, None]
        raise ValueError("the lattice quantization supports m in {2, 3, 5}")
    if kind != "gauss-hermite":
        raise ValueError(f"unknown quantization {kind!r}; choose from {QUANTIZATIONS}")
    x, w = np.polynomial.hermite_e.hermegauss(m)
    x = 0.5 * (x - x[::-1])
    p = 0.5 * (w + w[::-1])
    p = p / p.sum()
    x = x / np.sqrt(p @ x**2)
    half = m // 2
    basis = x[m - half:]
    keys = np.zeros((m, half), dtype=int)
    for j in range(half):
        keys[m - half + j, j] = 1
        keys[half - 1 - j, j] = -1
    return x, p, basis, keys


@dataclass(frozen=True)
class QuantizedWiener:
    """Moment-matched quantization of the 2^n increments of a Wiener path on [0, T].

    Each increment takes `nodes[j]` with probability `probs[j]`. Node values are
    integer combinations `keys[j] @ basis`, which lets sums of increments be
    tracked exactly as integer key vectors.
    """

    n: int
    m: int
    T: float
    kind: str
    nodes: np.ndarray
    probs: np.ndarray
    basis: np.ndarray
    keys: np.ndarray

    @property
    def steps(self) -> int:
        return 2**self.n

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def moment(self, k: int) -> float:
        return float(self.probs @ self.nodes**k)

    def paths(self) -> tuple[np.ndarray, np.ndarray]:
        """All m^steps increment paths with their probabilities (small trees only)."""
        count = self.m**self.steps
        if count > 1_000_000:
            raise ValueError(f"{count} paths is too many to enumerate")
        idx = np.array(list(itertools.product(range(self.m), repeat=self.steps)), dtype=int).reshape(count, self.steps)
        return self.nodes[idx], np.prod(self.probs[idx], axis=1)


def quantize_wiener(n: int, m: int, T: float = 1.0, kind: Optional[str] = None) -> QuantizedWiener:
    """Quantize each N(0, T 2^-n) increment with m points.

    `kind` is "gauss-hermite" (default), "binomial" (m = 2, the default when
    m = 2) or "lattice", whose nodes are integer multiples of one spacing so
    that the x tree recombines onto a single axis.
    """
    if m < 2:
        raise ValueError("need at least two points per increment")
    if n < 0:
        raise ValueError("the dyadic level is nonnegative")
    if T <= 0:
        raise ValueError("T must be positive")
    if kind is None:
        kind = "binomial" if m == 2 else "gauss-hermite"
    x, p, basis, keys = _standard_nodes(kind, m)
    scale = np.sqrt(T / 2**n)
    for arr in (x, p, basis, keys):
        arr.setflags(write=False)
    nodes = x * scale
    nodes.setflags(write=False)
    b = basis * scale
    b.setflags(write=False)
    return QuantizedWiener(int(n), int(m), float(T), kind, nodes, p, b, keys)


# ---------------------------------------------------------------------------
# Action lattices
# ---------------------------------------------------------------------------


def _common_spacing(values: np.ndarray) -> float:
    """Largest h with every value an integer multiple of h (ratios must be rational)."""
    nonzero = values[values != 0]
    if nonzero.size == 0:
        return 1.0
    ref = float(np.min(np.abs(nonzero)))
    ratios = []
    for v in nonzero:
        fr = Fraction(float(v) / ref).limit_denominator(1000)
        if abs(float(fr) - v / ref) > 1e-9 * max(1.0, abs(v / ref)):
            raise ValueError(f"action {v} is not a rational multiple of {ref}")
        ratios.append(fr)
    den = 1
    for fr in ratios:
        den = den * fr.denominator // math.gcd(den, fr.denominator)
    num = 0
    for fr in ratios:
        num = math.gcd(num, abs(fr.numerator * (den // fr.denominator)))
    return ref * num / den


@dataclass(frozen=True)
class ActionLattice:
    """Finite set of admissible control rates, all integer multiples of a spacing h."""

    values: np.ndarray
    h: float = field(init=False)
    k: np.ndarray = field(init=False)
    tie_order: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise ValueError("the action lattice is empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("actions must be finite")
        v = np.where(np.abs(v) < 1e-12, 0.0, v)
        v = np.unique(v)
        if not np.any(v == 0.0):
            raise ValueError("the action lattice must contain 0")
        h = _common_spacing(v)
        k = np.rint(v / h).astype(np.int64)
        v = k * h
        order = np.lexsort((v, np.abs(v)))
        for arr in (v, k, order):
            arr.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "h", float(h))
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "tie_order", order)

    @classmethod
    def uniform(cls, bound: float, count: int) -> "ActionLattice":
        """`count` evenly spaced rates on [-bound, bound]; count must be odd so 0 is included."""
        if count < 1 or count % 2 == 0:
            raise ValueError("use an odd number of rates so that 0 is on the lattice")
        return cls(np.linspace(-bound, bound, count))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def kmin(self) -> int:
        return int(self.k[0])

    @property
    def kmax(self) -> int:
        return int(self.k[-1])

    @property
    def offsets(self) -> np.ndarray:
        return self.k - self.k[0]

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.values == 0.0)[0])


# ---------------------------------------------------------------------------
# Recombining state space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _StateSpace:
    """x keys reachable after i increments, transitions, and s ranges."""

    wiener: QuantizedWiener
    actions: ActionLattice
    x0: float
    keys: tuple  # keys[i]: (|K_i|, r) integer keys after i increments
    xvals: tuple  # xvals[i]: (|K_i|,)
    trans: tuple  # trans[i]: (|K_i|, m) index into K_{i+1}

    @classmethod
    def build(cls, wiener: QuantizedWiener, actions: ActionLattice, x0: float) -> "_StateSpace":
        r = wiener.keys.shape[1]
        keys = [np.zeros((1, r), dtype=np.int64)]
        trans = []
        for _ in range(wiener.steps):
            cur = keys[-1]
            cand = (cur[:, None, :] + wiener.keys[None, :, :]).reshape(-1, r)
            uniq, inv = np.unique(cand, axis=0, return_inverse=True)
            keys.append(uniq)
            trans.append(inv.reshape(cur.shape[0], wiener.m))
        xvals = [k @ wiener.basis for k in keys]
        space = cls(wiener, actions, float(x0), tuple(keys), tuple(xvals), tuple(trans))
        space._check_size()
        return space

    @property
    def steps(self) -> int:
        return self.wiener.steps

    @property
    def width(self) -> int:
        return self.actions.kmax - self.actions.kmin

    def n_s(self, i: int) -> int:
        return i * self.width + 1

    def s_values(self, i: int) -> np.ndarray:
        return np.arange(self.n_s(i)) + i * self.actions.kmin

    def y_grid(self, i: int) -> np.ndarray:
        """y on (x key after i increments, s after i actions)."""
        w = self.wiener
        return self.x0 + self.xvals[i][:, None] + self.actions.h * w.dt * self.s_values(i)[None, :]

    def flow_shape(self, i: int) -> tuple[int, int, int]:
        return (self.xvals[i + 1].size, self.n_s(i), self.actions.size)

    def _check_size(self) -> None:
        total = sum(int(np.prod(self.flow_shape(i))) for i in range(self.steps))
        if total > MAX_FLOW_ENTRIES:
            raise ValueError(f"state space needs {total} flow entries; reduce n, m or the action lattice")

    def spread(self, i: int, D: np.ndarray) -> np.ndarray:
        """Push a distribution over (K_i, s) through increment i."""
        out = np.zeros((self.xvals[i + 1].size,) + D.shape[1:])
        for j, p in enumerate(self.wiener.probs):
            np.add.at(out, self.trans[i][:, j], p * D)
        return out

    def expect_next(self, i: int, W: np.ndarray) -> np.ndarray:
        """E over increment i of a function on (K_{i+1}, s)."""
        out = np.zeros((self.xvals[i].size,) + W.shape[1:])
        for j, p in enumerate(self.wiener.probs):
            out += p * W[self.trans[i][:, j]]
        return out


def _check_x0(x0: float) -> float:
    x0 = float(x0)
    if not np.isfinite(x0):
        raise ValueError("x0 must be finite")
    return x0


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointTable:
    """Explicit joint law of (x path, y path); x[:, 0] = 0 and y[:, 0] = x0."""

    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        p = np.asarray(self.p, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape != y.shape or x.shape[0] != p.size:
            raise ValueError("x and y need shape (rows, steps + 1) with one probability per row")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class DiscreteCausalCoupling:
    """Causal coupling stored as per-step flows.

    flows[i][x, s, a] is the probability of being at x key index x after
    increment i, with running action sum s before decision i, and taking
    action a. The kernel of step i is the flow normalized over actions; it
    reads only the current x and the y history, never a later increment.
    """

    space: _StateSpace
    flows: tuple

    def __post_init__(self) -> None:
        if len(self.flows) != self.space.steps:
            raise ValueError("one flow per step is required")
        for i, F in enumerate(self.flows):
            if F.shape != self.space.flow_shape(i):
                raise ValueError(f"flow {i} has shape {F.shape}, expected {self.space.flow_shape(i)}")

    @property
    def wiener(self) -> QuantizedWiener:
        return self.space.wiener

    @property
    def actions(self) -> ActionLattice:
        return self.space.actions

    @property
    def x0(self) -> float:
        return self.space.x0

    @property
    def level(self) -> int:
        return self.wiener.n

    @property
    def T(self) -> float:
        return self.wiener.T

    @property
    def dt(self) -> float:
        return self.wiener.dt

    def state_mass(self, i: int) -> np.ndarray:
        return self.flows[i].sum(axis=2)

    def kernel(self, i: int) -> np.ndarray:
        """Law of the action given (x key, s) at step i; unreached states pick the tie-break action."""
        F = self.flows[i]
        mass = F.sum(axis=2, keepdims=True)
        default = np.zeros(self.actions.size)
        default[self.actions.tie_order[0]] = 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            K = np.where(mass > 0, F / np.where(mass > 0, mass, 1.0), default)
        return K

    def distribution_before(self, i: int) -> np.ndarray:
        """Law of (x key, s) before increment i (i = steps gives the terminal law)."""
        if i == 0:
            return np.ones((1, 1))
        F = self.flows[i - 1]
        off = self.actions.offsets
        D = np.zeros((F.shape[0], self.space.n_s(i)))
        n = F.shape[1]
        for a in range(F.shape[2]):
            D[:, off[a]:off[a] + n] += F[:, :, a]
        return D

    def rate_weights(self, i: int) -> np.ndarray:
        return self.flows[i].sum(axis=(0, 1))

    def rate_law(self, i: int) -> EmpiricalLaw:
        w = self.rate_weights(i)
        keep = w > 0
        return EmpiricalLaw(self.actions.values[keep], w[keep] / w.sum())

    def rate_laws(self) -> list[EmpiricalLaw]:
        return [self.rate_law(i) for i in range(self.space.steps)]

    def terminal_grid(self) -> np.ndarray:
        return self.space.y_grid(self.space.steps)

    def terminal_law(self) -> EmpiricalLaw:
        D = self.distribution_before(self.space.steps).reshape(-1)
        y = self.terminal_grid().reshape(-1)
        keep = D > 0
        return EmpiricalLaw(y[keep], D[keep] / D.sum())

    def mix(self, other: "DiscreteCausalCoupling", lam: float) -> "DiscreteCausalCoupling":
        """(1 - lam) self + lam other."""
        if other.space is not self.space:
            raise ValueError("couplings live on different state spaces")
        return DiscreteCausalCoupling(self.space, tuple((1 - lam) * F + lam * G for F, G in zip(self.flows, other.flows)))

    def conservation_error(self) -> float:
        """Largest mismatch between flows and the law pushed forward from the previous step."""
        err = 0.0
        for i in range(self.space.steps):
            P = self.space.spread(i, self.distribution_before(i))
            err = max(err, float(np.max(np.abs(P - self.state_mass(i)))))
            if np.any(self.flows[i] < -1e-15):
                err = max(err, float(-self.flows[i].min()))
        return err

    def to_joint_table(self, max_rows: int = 1_000_000) -> JointTable:
        """Expand into explicit (x path, y path) rows with positive probability."""
        sp = self.space
        w = self.wiener
        rows_x = np.zeros((1, 1))
        rows_y = np.full((1, 1), self.x0)
        key = np.zeros(1, dtype=int)
        s = np.zeros(1, dtype=int)
        p = np.ones(1)
        off = self.actions.offsets
        for i in range(sp.steps):
            K = self.kernel(i)
            new_key = sp.trans[i][key][:, :, None].repeat(self.actions.size, axis=2)
            pj = p[:, None, None] * w.probs[None, :, None] * K[new_key, s[:, None, None], np.arange(self.actions.size)[None, None, :]]
            keep = pj > 0
            r, j, a = np.nonzero(keep)
            if r.size > max_rows:
                raise ValueError("joint table too large")
            xi = rows_x[r, -1] + w.nodes[j]
            yi = rows_y[r, -1] + w.nodes[j] + w.dt * self.actions.values[a]
            rows_x = np.concatenate([rows_x[r], xi[:, None]], axis=1)
            rows_y = np.concatenate([rows_y[r], yi[:, None]], axis=1)
            key = new_key[r, j, a]
            s = s[r] + off[a]
            p = pj[r, j, a]
        return JointTable(rows_x, rows_y, p / p.sum())


def zero_control_coupling(wiener: QuantizedWiener, actions: ActionLattice, x0: float = 0.0) -> DiscreteCausalCoupling:
    """The coupling y = x0 + x, every rate equal to 0."""
    return _zero_coupling(_StateSpace.build(wiener, actions, _check_x0(x0)))


def _zero_coupling(space: _StateSpace) -> DiscreteCausalCoupling:
    zero = space.actions.zero_index
    return _policy_coupling(space, [np.full(space.flow_shape(i)[:2], zero) for i in range(space.steps)])


def _policy_coupling(space: _StateSpace, policy: Sequence[np.ndarray]) -> DiscreteCausalCoupling:
    """Flows of a deterministic Markov policy on (x key, s)."""
    off = space.actions.offsets
    n_a = space.actions.size
    flows = []
    D = np.ones((1, 1))
    for i in range(space.steps):
        P = space.spread(i, D)
        F = np.zeros(space.flow_shape(i))
        xi, si = np.indices(P.shape)
        F[xi, si, policy[i]] = P
        flows.append(F)
        D = np.zeros((P.shape[0], space.n_s(i + 1)))
        for a in range(n_a):
            D[:, off[a]:off[a] + P.shape[1]] += F[:, :, a]
    return DiscreteCausalCoupling(space, tuple(flows))


@dataclass(frozen=True)
class ProjectedCoupling:
    """Rate laws and terminal law of a coupling observed on a coarser dyadic grid."""

    level: int
    T: float
    laws: tuple
    final: EmpiricalLaw

    @property
    def dt(self) -> float:
        return self.T / 2**self.level

    def rate_laws(self) -> list[EmpiricalLaw]:
        return list(self.laws)

    def terminal_law(self) -> EmpiricalLaw:
        return self.final


def project(coupling: DiscreteCausalCoupling, k: int) -> ProjectedCoupling:
    """Observe a level-n coupling on the level-k grid, k <= n.

    The coarse rate over a block of 2^(n-k) fine steps is the average of the
    fine rates, so its law comes from the joint law of the running action sum
    at the two ends of the block.
    """
    n = coupling.level
    if not 0 <= k <= n:
        raise ValueError(f"projection level {k} must lie in [0, {n}]")
    if k == n:
        return ProjectedCoupling(n, coupling.T, tuple(coupling.rate_laws()), coupling.terminal_law())
    sp = coupling.space
    acts = coupling.actions
    L = 2 ** (n - k)
    off = acts.offsets
    laws = []
    for b in range(2**k):
        i0 = b * L
        D = coupling.distribution_before(i0)
        n0 = D.shape[1]
        G = np.zeros((D.shape[0], n0, n0))
        idx = np.arange(n0)
        G[:, idx, idx] = D
        for i in range(i0, i0 + L):
            G = sp.spread(i, G)
            K = coupling.kernel(i)
            nxt = np.zeros((G.shape[0], n0, sp.n_s(i + 1)))
            w = G.shape[2]
            for a in range(acts.size):
                nxt[:, :, off[a]:off[a] + w] += G * K[:, None, :, a]
            G = nxt
        M2 = G.sum(axis=0)
        s0 = sp.s_values(i0)
        s1 = sp.s_values(i0 + L)
        diff = s1[None, :] - s0[:, None]
        dmin = int(diff.min())
        mass = np.bincount((diff - dmin).reshape(-1), weights=M2.reshape(-1))
        keep = mass > 0
        rates = acts.h * (np.arange(mass.size)[keep] + dmin) / L
        laws.append(EmpiricalLaw(rates, mass[keep] / mass.sum()))
    return ProjectedCoupling(k, coupling.T, tuple(laws), coupling.terminal_law())


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

LawFunctional = Callable[[EmpiricalLaw], float]
FirstVariation = Callable[[EmpiricalLaw, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CostSpec:
    """f acts on the law of a control rate, g on the final law of y.

    df and dg are first variations, evaluated at a law and an array of points;
    they only matter up to an additive constant. `linear` marks costs of the
    form integral of a function against the law, for which deterministic
    policies are optimal.
    """

    f: LawFunctional
    g: LawFunctional
    df: Optional[FirstVariation] = None
    dg: Optional[FirstVariation] = None
    name: str = "custom"
    linear: bool = False

    def first_variation_f(self, law: EmpiricalLaw, points: np.ndarray) -> np.ndarray:
        if self.df is not None:
            return np.asarray(self.df(law, points), dtype=float)
        return _numerical_first_variation(self.f, law, points)

    def first_variation_g(self, law: EmpiricalLaw, points: np.ndarray) -> np.ndarray:
        if self.dg is not None:
            return np.asarray(self.dg(law, points), dtype=float)
        return _numerical_first_variation(self.g, law, points)


_warned_numerical = False


def _numerical_first_variation(fn: LawFunctional, law: EmpiricalLaw, points: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    global _warned_numerical
    if not _warned_numerical:
        warnings.warn("no analytic first variation supplied; using finite differences with step 1e-6", RuntimeWarning, stacklevel=3)
        _warned_numerical = True
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1)
    uniq, inv = np.unique(flat, return_inverse=True)
    base = fn(law)
    atoms = law.atoms[:, 0]
    out = np.empty(uniq.size)
    for j, p in enumerate(uniq):
        mixed = EmpiricalLaw(np.append(atoms, p), np.append((1 - eps) * law.weights, eps))
        out[j] = (fn(mixed) - base) / eps
    return out[inv].reshape(pts.shape)


def integral_costs(hf: Callable[[np.ndarray], np.ndarray], hg: Callable[[np.ndarray], np.ndarray], name: str = "integral") -> CostSpec:
    """f(rho) = int hf drho and g(mu) = int hg dmu; hf convex keeps f increasing in convex order."""

    def f(law: EmpiricalLaw) -> float:
        return float(law.weights @ hf(law.atoms[:, 0]))

    def g(law: EmpiricalLaw) -> float:
        return float(law.weights @ hg(law.atoms[:, 0]))

    return CostSpec(f, g, lambda law, z: hf(np.asarray(z, dtype=float)), lambda law, u: hg(np.asarray(u, dtype=float)), name, True)


def quadratic_costs(cf: float = 1.0, cg: float = 1.0) -> CostSpec:
    """f(rho) = cf int z^2 drho, g(mu) = cg int u^2 dmu."""
    if cf < 0 or cg < 0:
        raise ValueError("quadratic weights are nonnegative")
    return integral_costs(lambda z: cf * z**2, lambda u: cg * u**2, name="quadratic")


def moment_penalty_costs(kappa_f: float = 1.0, kappa_g: float = 0.0, center: float = 0.0) -> CostSpec:
    """f(rho) = int z^2 + kappa_f (int z)^2 and g(mu) = int (u - c)^2 + kappa_g (int u - c)^2.

    Squared means are convex in the law and constant along the convex order,
    so both terms keep the required structure for kappa >= 0.
    """
    if kappa_f < 0 or kappa_g < 0:
        raise ValueError("moment penalties need kappa >= 0")

    def f(law: EmpiricalLaw) -> float:
        z = law.atoms[:, 0]
        m = law.weights @ z
        return float(law.weights @ z**2 + kappa_f * m**2)

    def g(law: EmpiricalLaw) -> float:
        u = law.atoms[:, 0] - center
        m = law.weights @ u
        return float(law.weights @ u**2 + kappa_g * m**2)

    def df(law: EmpiricalLaw, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z**2 + 2 * kappa_f * float(law.weights @ law.atoms[:, 0]) * z

    def dg(law: EmpiricalLaw, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float) - center
        return u**2 + 2 * kappa_g * float(law.weights @ (law.atoms[:, 0] - center)) * u

    return CostSpec(f, g, df, dg, "moment-penalty", kappa_f == 0 and kappa_g == 0)


def _random_law(rng: np.random.Generator, support: np.ndarray) -> EmpiricalLaw:
    return EmpiricalLaw(support, rng.dirichlet(np.ones(support.size)))


def probe_costs(costs: CostSpec, n_probes: int = 100, seed: int = 0, tol: float = 1e-9, scale: float = 3.0) -> dict:
    """Random checks of convexity in the law, monotonicity in convex order and f(delta_0) < inf."""
    rng = np.random.default_rng(seed)
    worst_convex = 0.0
    worst_order = 0.0
    for _ in range(n_probes):
        support = rng.uniform(-scale, scale, rng.integers(2, 7))
        p1, p2 = _random_law(rng, support), _random_law(rng, support)
        lam = rng.uniform()
        mix = EmpiricalLaw(support, (1 - lam) * p1.weights + lam * p2.weights)
        for fn in (costs.f, costs.g):
            lhs = fn(mix)
            rhs = (1 - lam) * fn(p1) + lam * fn(p2)
            worst_convex = max(worst_convex, (lhs - rhs) / (1.0 + abs(rhs)))
        # mean-preserving spread of every atom
        delta = rng.uniform(0.01, 1.0)
        spread = EmpiricalLaw(np.concatenate([support - delta, support + delta]), np.concatenate([p1.weights, p1.weights]) / 2)
        for fn in (costs.f, costs.g):
            worst_order = max(worst_order, (fn(p1) - fn(spread)) / (1.0 + abs(fn(spread))))
    f0 = costs.f(EmpiricalLaw.point_mass(0.0))
    growth = _superlinear_growth(costs, f0)
    return {
        "convex": worst_convex <= tol,
        "increasing_convex_order": worst_order <= tol,
        "finite_at_zero": bool(np.isfinite(f0)),
        "superlinear_growth": growth,
        "worst_convexity_gap": float(worst_convex),
        "worst_order_gap": float(worst_order),
        "passed": worst_convex <= tol and worst_order <= tol and bool(np.isfinite(f0)),
    }


def _superlinear_growth(costs: CostSpec, f0: float, far: float = 10.0, factor: float = 2.5) -> bool:
    """f(delta_z) - f(delta_0) grows faster than |z| far out; an f constant on point masses also passes."""
    if not np.isfinite(f0):
        return False
    ok = True
    for z in (far, -far):
        near = costs.f(EmpiricalLaw.point_mass(z)) - f0
        out = costs.f(EmpiricalLaw.point_mass(2 * z)) - f0
        if near == 0.0 and out == 0.0:
            continue
        ok &= bool(near > 0 and out >= factor * near)
    return ok


def cost_cn(coupling: Union[DiscreteCausalCoupling, ProjectedCoupling], costs: CostSpec, n: int) -> float:
    """dt sum_i f(law of rate i) + g(law of y_final) for a coupling on level n."""
    if coupling.level != n:
        raise ValueError(f"coupling lives on level {coupling.level}, not {n}")
    running = sum(costs.f(law) for law in coupling.rate_laws())
    return float(coupling.dt * running + costs.g(coupling.terminal_law()))


def _cost_parts(coupling: DiscreteCausalCoupling, costs: CostSpec) -> tuple[float, list, EmpiricalLaw]:
    laws = coupling.rate_laws()
    final = coupling.terminal_law()
    value = coupling.dt * sum(costs.f(law) for law in laws) + costs.g(final)
    return float(value), laws, final


# ---------------------------------------------------------------------------
# Linear minimization by dynamic programming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearCost:
    """Expected cost sum_i [rate(i, z_i) + node(i, x_{i+1}, y_{i+1})] + terminal(y_final).

    All callables act elementwise on numpy arrays; x is the Wiener path value
    and y the controlled value after the action of step i.
    """

    rate: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    node: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class LinearOracleResult:
    value: float
    coupling: DiscreteCausalCoupling
    policy: tuple


def _evaluate_callback(fn, shape: tuple, *args) -> np.ndarray:
    out = np.asarray(fn(*args), dtype=float)
    try:
        out = np.broadcast_to(out, shape)
    except ValueError:
        raise ValueError(f"linear cost returned shape {out.shape}; it must act elementwise on the tree nodes") from None
    if not np.all(np.isfinite(out)):
        raise ValueError("linear cost is not finite on the tree")
    return out


def _dp(space: _StateSpace, rate: np.ndarray, terminal: np.ndarray, node: Optional[list] = None) -> tuple[float, list]:
    """Backward induction; rate is (steps, n_a), terminal lives on the final (x, s) grid."""
    acts = space.actions
    off = acts.offsets
    order = acts.tie_order
    U = terminal
    policy = [None] * space.steps
    for i in range(space.steps - 1, -1, -1):
        V = U if node is None else U + node[i]
        n_s = space.n_s(i)
        Q = V[:, np.arange(n_s)[:, None] + off[order][None, :]] + rate[i][order][None, None, :]
        best = np.argmin(Q, axis=2)
        policy[i] = order[best]
        W = np.take_along_axis(Q, best[:, :, None], axis=2)[:, :, 0]
        U = space.expect_next(i, W)
    return float(U[0, 0]), policy


def dp_linear_oracle(linear_cost: LinearCost, wiener: QuantizedWiener, actions: ActionLattice, x0: float = 0.0) -> LinearOracleResult:
    """Exact minimizer of a linear cost over causal couplings: a deterministic kernel.

    Ties go to the action of smallest magnitude (then the smaller value).
    """
    space = _StateSpace.build(wiener, actions, _check_x0(x0))
    M = space.steps
    rate = np.zeros((M, actions.size))
    if linear_cost.rate is not None:
        for i in range(M):
            rate[i] = _evaluate_callback(linear_cost.rate, (actions.size,), i, actions.values)
    yT = space.y_grid(M)
    terminal = np.zeros(yT.shape)
    if linear_cost.terminal is not None:
        terminal = np.array(_evaluate_callback(linear_cost.terminal, yT.shape, yT))
    node = None
    if linear_cost.node is not None:
        node = []
        for i in range(M):
            y = space.y_grid(i + 1)
            x = np.broadcast_to(space.xvals[i + 1][:, None], y.shape)
            node.append(np.array(_evaluate_callback(linear_cost.node, y.shape, i, x, y)))
    value, policy = _dp(space, rate, terminal, node)
    return LinearOracleResult(value, _policy_coupling(space, policy), tuple(policy))


# ---------------------------------------------------------------------------
# Frank-Wolfe solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolveResult:
    value: float
    coupling: DiscreteCausalCoupling
    gap: float
    iterations: int
    converged: bool
    values: tuple
    gaps: tuple


def _linearization(space: _StateSpace, costs: CostSpec, laws: list, final: EmpiricalLaw) -> tuple[np.ndarray, np.ndarray]:
    dt = space.wiener.dt
    rate = np.stack([dt * costs.first_variation_f(law, space.actions.values) for law in laws])
    yT = space.y_grid(space.steps)
    terminal = costs.first_variation_g(final, yT)
    return rate, np.asarray(terminal, dtype=float).reshape(yT.shape)


def _linear_value(coupling: DiscreteCausalCoupling, rate: np.ndarray, terminal: np.ndarray) -> float:
    running = sum(float(coupling.rate_weights(i) @ rate[i]) for i in range(rate.shape[0]))
    D = coupling.distribution_before(coupling.space.steps)
    return running + float(np.sum(D * terminal))


def solve_Pn(costs: CostSpec, n: int, wiener: QuantizedWiener, actions: ActionLattice, x0: float = 0.0,
             max_iters: int = 500, tol: float = 1e-6, check_costs: bool = True, line_search: bool = False) -> SolveResult:
    """Minimize c^n over causal couplings by Frank-Wolfe.

    Each iteration linearizes f and g at the current laws, solves the linear
    problem exactly by dynamic programming and moves toward that vertex with
    step 2/(k+2). A step that would raise the value is halved until it does
    not, so the recorded values never increase. Iteration stops once the
    duality gap drops below tol; if max_iters is reached first the best
    coupling is returned with converged=False.
    """
    if wiener.n != n:
        raise ValueError(f"quantization is on level {wiener.n}, not {n}")
    if check_costs and not costs.linear:
        probe = probe_costs(costs, n_probes=50)
        if not probe["passed"]:
            raise ValueError(f"cost functionals failed the structural probes: {probe}")
    space = _StateSpace.build(wiener, actions, _check_x0(x0))
    current = _zero_coupling(space)
    value, laws, final = _cost_parts(current, costs)
    values = [value]
    gaps = []
    converged = False
    k = 0
    for k in range(max_iters):
        rate, terminal = _linearization(space, costs, laws, final)
        vertex_value, policy = _dp(space, rate, terminal)
        gap = max(_linear_value(current, rate, terminal) - vertex_value, 0.0)
        gaps.append(gap)
        if gap <= tol:
            converged = True
            break
        vertex = _policy_coupling(space, policy)
        step = 2.0 / (k + 2)
        if line_search:
            step = _best_step(current, vertex, costs)
        candidate = None
        for _ in range(60):
            trial = current.mix(vertex, step)
            trial_value, trial_laws, trial_final = _cost_parts(trial, costs)
            if trial_value <= value:
                candidate = (trial, trial_value, trial_laws, trial_final)
                break
            step *= 0.5
        if candidate is None:
            break
        current, value, laws, final = candidate
        values.append(value)
    return SolveResult(value, current, gaps[-1] if gaps else float("inf"), k + 1, converged, tuple(values), tuple(gaps))


def _best_step(current: DiscreteCausalCoupling, vertex: DiscreteCausalCoupling, costs: CostSpec) -> float:
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda s: _cost_parts(current.mix(vertex, s), costs)[0], bounds=(0.0, 1.0), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x)


# ---------------------------------------------------------------------------
# Exhaustive search over deterministic path-dependent policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BruteForceResult:
    value: float
    coupling: DiscreteCausalCoupling
    n_policies: int
    mixtures_improve: bool
    best_mixture_value: float


def _tree_layout(wiener: QuantizedWiener) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Leaves (node index per step), leaf probabilities, leaf x paths and node offsets."""
    M, m = wiener.steps, wiener.m
    idx = np.array(list(itertools.product(range(m), repeat=M)), dtype=int).reshape(m**M, M)
    offsets = np.concatenate([[0], np.cumsum([m ** (i + 1) for i in range(M)])])
    node = np.zeros_like(idx)
    prefix = np.zeros(idx.shape[0], dtype=int)
    for i in range(M):
        prefix = prefix * m + idx[:, i]
        node[:, i] = offsets[i] + prefix
    return idx, node, np.prod(wiener.probs[idx], axis=1), offsets


def brute_force_Pn(costs: Union[CostSpec, LinearCost], n: int, wiener: QuantizedWiener, actions: ActionLattice,
                   x0: float = 0.0, cap: int = MAX_BRUTE_FORCE_WORK, probe_mixtures: bool = True) -> BruteForceResult:
    """Minimum over every deterministic causal policy on the full (non-recombining) tree.

    A policy picks one action per tree node, i.e. per observed increment
    prefix. For costs nonlinear in the law a mixture of two policies can beat
    both, so the best pairwise mixtures of the top policies are probed and
    `mixtures_improve` flags when the deterministic minimum is not the
    causal minimum.
    """
    if wiener.n != n:
        raise ValueError(f"quantization is on level {wiener.n}, not {n}")
    x0 = _check_x0(x0)
    M, m, n_a = wiener.steps, wiener.m, actions.size
    n_nodes = sum(m ** (i + 1) for i in range(M))
    n_policies = n_a**n_nodes
    if n_policies * m**M > cap:
        raise ValueError(f"{n_policies} policies on {m**M} leaves exceed the enumeration cap {cap}")
    idx, node, pl, _ = _tree_layout(wiener)
    dx = wiener.nodes[idx]
    xM = dx.sum(axis=1)
    dt = wiener.dt
    digits = np.zeros((n_policies, n_nodes), dtype=np.int64)
    rest = np.arange(n_policies)
    for j in range(n_nodes):
        digits[:, j] = rest % n_a
        rest //= n_a
    z = actions.values[digits[:, node]]  # (P, leaves, steps)
    yM = x0 + xM[None, :] + dt * z.sum(axis=2)
    if isinstance(costs, LinearCost):
        total = np.zeros(n_policies)
        if costs.rate is not None:
            for i in range(M):
                total += np.asarray(costs.rate(i, z[:, :, i])) @ pl
        if costs.node is not None:
            xpath = np.cumsum(dx, axis=1)
            ypath = x0 + xpath[None, :, :] + dt * np.cumsum(z, axis=2)
            for i in range(M):
                total += np.broadcast_to(np.asarray(costs.node(i, xpath[None, :, i], ypath[:, :, i])), (n_policies, pl.size)) @ pl
        if costs.terminal is not None:
            total += np.asarray(costs.terminal(yM)) @ pl
        best = int(np.argmin(total))
        mixtures_improve, best_mix = False, float(total[best])
    else:
        total = np.empty(n_policies)
        for p in range(n_policies):
            running = sum(costs.f(EmpiricalLaw(z[p, :, i], pl)) for i in range(M))
            total[p] = dt * running + costs.g(EmpiricalLaw(yM[p], pl))
        best = int(np.argmin(total))
        best_mix = float(total[best])
        mixtures_improve = False
        if probe_mixtures and not costs.linear:
            from scipy.optimize import minimize_scalar

            def mixed_value(p1: int, p2: int, lam: float) -> float:
                w = np.concatenate([(1 - lam) * pl, lam * pl])
                running = sum(costs.f(EmpiricalLaw(np.concatenate([z[p1, :, i], z[p2, :, i]]), w)) for i in range(M))
                return dt * running + costs.g(EmpiricalLaw(np.concatenate([yM[p1], yM[p2]]), w))

            top = np.argsort(total, kind="stable")[: min(40, n_policies)]
            for p2 in top[1:]:
                res = minimize_scalar(lambda lam: mixed_value(best, int(p2), lam), bounds=(0.0, 1.0), method="bounded")
                best_mix = min(best_mix, float(res.fun))
            mixtures_improve = best_mix < total[best] - 1e-12
    coupling = _path_policy_coupling(wiener, actions, x0, digits[best], node, idx, pl)
    return BruteForceResult(float(total[best]), coupling, n_policies, mixtures_improve, best_mix)


def _path_policy_coupling(wiener: QuantizedWiener, actions: ActionLattice, x0: float, digits: np.ndarray,
                          node: np.ndarray, idx: np.ndarray, pl: np.ndarray) -> DiscreteCausalCoupling:
    """Aggregate a path-dependent policy into flows on the recombining states."""
    space = _StateSpace.build(wiener, actions, x0)
    flows = [np.zeros(space.flow_shape(i)) for i in range(space.steps)]
    lookup = [{tuple(k): j for j, k in enumerate(keys)} for keys in space.keys]
    for leaf in range(idx.shape[0]):
        key = np.zeros(wiener.keys.shape[1], dtype=np.int64)
        s = 0
        for i in range(space.steps):
            key = key + wiener.keys[idx[leaf, i]]
            a = int(digits[node[leaf, i]])
            flows[i][lookup[i + 1][tuple(key)], s, a] += pl[leaf]
            s += int(actions.offsets[a])
    return DiscreteCausalCoupling(space, tuple(flows))


# ---------------------------------------------------------------------------
# Ladder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LadderResult:
    levels: tuple
    values: tuple
    couplings: tuple
    solver_gaps: tuple
    tol: float
    reference: Optional[float] = None
    budget: float = 0.0

    @property
    def margins(self) -> tuple:
        return tuple(b - a for a, b in zip(self.values, self.values[1:]))

    @property
    def monotone(self) -> bool:
        return all(mg >= -self.tol for mg in self.margins)

    @property
    def gaps_to_reference(self) -> Optional[tuple]:
        if self.reference is None:
            return None
        return tuple(self.reference - v for v in self.values)

    @property
    def below_reference(self) -> Optional[bool]:
        if self.reference is None:
            return None
        return all(v <= self.reference + self.budget for v in self.values)

    def rows(self) -> list[dict]:
        out = []
        ref = self.gaps_to_reference
        for j, (n, v) in enumerate(zip(self.levels, self.values)):
            out.append({
                "n": n,
                "value": v,
                "margin": self.margins[j - 1] if j > 0 else float("nan"),
                "gap_to_reference": ref[j] if ref is not None else float("nan"),
            })
        return out


def rate_rounding_budget(actions: ActionLattice, T: float) -> float:
    """T (h/2)^2: running cost of rounding every rate to the nearest lattice point."""
    return T * (actions.h / 2) ** 2


def ladder(costs: CostSpec, n_max: int, quantization: Optional[dict] = None, actions: Optional[ActionLattice] = None,
           x0: float = 0.0, T: float = 1.0, reference: Optional[float] = None, max_iters: int = 500,
           tol: float = 1e-6, budget: Optional[float] = None) -> LadderResult:
    """Solve P(0), ..., P(n_max) with the same quantization rule and action lattice on every rung."""
    if not 0 <= n_max <= 6:
        raise ValueError("n_max must lie in [0, 6]")
    if not _superlinear_growth(costs, costs.f(EmpiricalLaw.point_mass(0.0))):
        raise ValueError("the ladder needs a running cost with superlinear growth (p > 1)")
    q = dict(quantization or {})
    m = int(q.pop("m", 5))
    kind = q.pop("kind", None)
    if q:
        raise ValueError(f"unknown quantization options {sorted(q)}")
    if actions is None:
        actions = ActionLattice.uniform(2.5, 21)
    values, couplings, gaps = [], [], []
    for n in range(n_max + 1):
        w = quantize_wiener(n, m, T, kind)
        res = solve_Pn(costs, n, w, actions, x0=x0, max_iters=max_iters, tol=tol)
        values.append(res.value)
        couplings.append(res.coupling)
        gaps.append(res.gap)
    if budget is None:
        budget = rate_rounding_budget(actions, T)
    return LadderResult(tuple(range(n_max + 1)), tuple(values), tuple(couplings), tuple(gaps), tol, reference, budget)


def jensen_margins(coupling: DiscreteCausalCoupling, costs: CostSpec) -> list[float]:
    """c^n(coupling) - c^k(projection) for k = 0..n; each entry is nonnegative in exact arithmetic."""
    n = coupling.level
    cn = cost_cn(coupling, costs, n)
    return [cn - cost_cn(project(coupling, k), costs, k) for k in range(n + 1)]


def quadratic_reference_value(x0: float = 1.0, T: float = 1.0, cf: float = 1.0, cg: float = 1.0) -> float:
    """Continuous value of min E[cf int z^2 dt + cg X_T^2] with dX = z dt + dW.

    With c = cg / cf the value function is cf (eta_t x^2 + log(1 + c (T - t)))
    and eta_t = c / (1 + c (T - t)).
    """
    if cf <= 0 or cg < 0:
        raise ValueError("need cf > 0 and cg >= 0")
    c = cg / cf
    return cf * (c * x0**2 / (1 + c * T) + math.log1p(c * T))


# ---------------------------------------------------------------------------
# Causality check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CausalityReport:
    causal: bool
    max_violation: float
    worst_step: int

    def __bool__(self) -> bool:
        return self.causal


def _codes(cols: np.ndarray) -> np.ndarray:
    if cols.shape[1] == 0:
        return np.zeros(cols.shape[0], dtype=int)
    return np.unique(np.round(cols, 12), axis=0, return_inverse=True)[1].reshape(-1)


def check_causality(obj: Union[DiscreteCausalCoupling, JointTable, dict], tol: float = 1e-10) -> CausalityReport:
    """Test that y_0..y_i is independent of x_{i+1}..x_end given x_0..x_i.

    Couplings are causal by construction; for them the flows are only checked
    for consistency with the increment law. Joint tables are tested through
    the factorization P(a, b, c) = P(a, b) P(a, c) / P(a) with a = x_0..x_i,
    b = y_0..y_i and c = the later x values.
    """
    if isinstance(obj, DiscreteCausalCoupling):
        err = obj.conservation_error()
        return CausalityReport(err <= tol, err, -1)
    table = obj if isinstance(obj, JointTable) else JointTable(obj["x"], obj["y"], obj["p"])
    steps = table.x.shape[1] - 1
    worst, where = 0.0, -1
    for i in range(steps):
        a = _codes(table.x[:, : i + 1])
        b = _codes(table.y[:, : i + 1])
        c = _codes(table.x[:, i + 1:])
        joint = np.zeros((a.max() + 1, b.max() + 1, c.max() + 1))
        np.add.at(joint, (a, b, c), table.p)
        pa = joint.sum(axis=(1, 2))
        pab = joint.sum(axis=2)
        pac = joint.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            expected = np.where(pa[:, None, None] > 0, pab[:, :, None] * pac[:, None, :] / pa[:, None, None], 0.0)
        v = float(np.max(np.abs(joint - expected)))
        if v > worst:
            worst, where = v, i
    return CausalityReport(worst <= tol, worst, where)
