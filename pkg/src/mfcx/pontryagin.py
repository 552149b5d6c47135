"""Particle-level checks of the extended maximum principle.

The independent copy appearing in the L-derivative terms is the ensemble
itself: every tilde expectation is an average over particles at the same
time.  Adjoint channels are inputs; nothing here solves a backward equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.stats import chi2

from .core import EmpiricalLaw, ModelSpec, ParticleEnsemble, tilde_mean
from .liquidation import LiquidationParams, adjoint_paths
from .lq import LQParams, LQSolution


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def _rows(v, dim: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(-1, dim)


def hamiltonian_eval(model: ModelSpec, x, a, law: EmpiricalLaw, y, z):
    """H = b . y + sigma : z + f, per row of x.  Returns a float for a single point."""
    single = np.ndim(x) <= 1
    x, a, y = _rows(x, model.d), _rows(a, model.k), _rows(y, model.d)
    z = np.asarray(z, dtype=float).reshape(-1, model.d, model.m)
    if not (x.shape[0] == a.shape[0] == y.shape[0]) or z.shape[0] not in (1, x.shape[0]):
        raise ValueError("x, a, y, z must have the same number of rows")
    if law.dim != model.d + model.k:
        raise ValueError(f"law must live on R^{model.d + model.k}")
    b = _rows(model.b(x, a, law), model.d)
    f = np.asarray(model.f(x, a, law), dtype=float).reshape(-1)
    h = np.sum(b * y, axis=1) + np.einsum("ij,nij->n", model.sigma, z) + f
    return float(h[0]) if single else h


def _require(model: ModelSpec, *names: str) -> None:
    missing = [n for n in names if getattr(model, n) is None]
    if missing:
        raise ValueError(f"model lacks derivative callbacks: {', '.join(missing)}")


def _dH_da_parts(model: ModelSpec, x, a, law, y) -> list[np.ndarray]:
    """[d_a b^T y, d_a f], each (N, k); sigma is constant so z drops out."""
    db = np.asarray(model.db_da(x, a, law), dtype=float).reshape(-1, model.d, model.k)
    return [np.einsum("nij,ni->nj", db, y), _rows(model.df_da(x, a, law), model.k)]


def _dH_dx(model: ModelSpec, x, a, law, y) -> np.ndarray:
    out = np.zeros((x.shape[0], model.d))
    if model.db_dx is not None:
        db = np.asarray(model.db_dx(x, a, law), dtype=float).reshape(-1, model.d, model.d)
        out = out + np.einsum("nij,ni->nj", db, y)
    if model.df_dx is not None:
        out = out + _rows(model.df_dx(x, a, law), model.d)
    return out


def _tilde_parts(model: ModelSpec, kind: str, x, a, law, y, xp, ap) -> list[np.ndarray]:
    """Averages over the ensemble (as tilde copy) of d_nu H or d_mu H evaluated at (xp, ap).

    Returns the b-part and the f-part separately, each (P, dim).
    """
    d, k = model.d, model.k
    dim = k if kind == "nu" else d
    b_kernel = model.db_dnu if kind == "nu" else model.db_dmu
    f_kernel = model.df_dnu if kind == "nu" else model.df_dmu
    parts = []
    if b_kernel is not None:
        yt = y

        def kb(xt, at, lw, xq, aq):
            val = np.asarray(b_kernel(xt, at, lw, xq, aq), dtype=float)
            val = np.broadcast_to(val, val.shape[:2] + (d, dim))
            ysel = yt if val.shape[0] == yt.shape[0] else yt.mean(axis=0, keepdims=True)
            return np.einsum("mpij,mi->mpj", val, ysel)

        parts.append(tilde_mean(kb, x, a, law, xp, ap, (dim,)))
    else:
        parts.append(np.zeros((xp.shape[0], dim)))
    if f_kernel is not None:
        parts.append(tilde_mean(f_kernel, x, a, law, xp, ap, (dim,)))
    else:
        parts.append(np.zeros((xp.shape[0], dim)))
    return parts


# ---------------------------------------------------------------------------
# Context and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianContext:
    """Model plus an ensemble carrying X, alpha, Y and Z channels."""

    model: ModelSpec
    ensemble: ParticleEnsemble

    def __post_init__(self) -> None:
        self.ensemble.require("X", "alpha", "Y")
        md = self.model
        n, nt = self.ensemble.n_particles, self.ensemble.grid.points.size
        for name, dim in (("X", md.d), ("alpha", md.k), ("Y", md.d)):
            arr = self.ensemble[name]
            if arr.size != n * nt * dim:
                raise ValueError(f"channel {name} has shape {arr.shape}, expected ({n}, {nt}, {dim})")
        if self.ensemble.has("Z") and self.ensemble["Z"].size != n * nt * md.d * md.m:
            raise ValueError("channel Z does not match (d, m)")

    @property
    def grid(self):
        return self.ensemble.grid

    def slice(self, j: int):
        """(x, a, law, y, z) at time index j."""
        md, ens = self.model, self.ensemble
        n = ens.n_particles
        x = ens["X"][:, j].reshape(n, md.d)
        a = ens["alpha"][:, j].reshape(n, md.k)
        y = ens["Y"][:, j].reshape(n, md.d)
        z = ens["Z"][:, j].reshape(n, md.d, md.m) if ens.has("Z") else np.zeros((n, md.d, md.m))
        law = EmpiricalLaw.uniform(np.hstack([x, a]))
        return x, a, law, y, z


@dataclass(frozen=True)
class ResidualReport:
    form: str
    per_time_max: np.ndarray
    per_time_mean: np.ndarray
    worst_time: int
    worst_particle: int
    scale: float
    per_time_stderr: np.ndarray
    tol: float = 0.0

    @property
    def max(self) -> float:
        return float(self.per_time_max.max())

    @property
    def mean(self) -> float:
        return float(self.per_time_mean.mean())

    @property
    def normalized_max(self) -> float:
        return float(self.per_time_mean.max() / self.scale) if self.scale > 0 else float(self.per_time_mean.max())

    @property
    def normalized_mean(self) -> float:
        return self.mean / self.scale if self.scale > 0 else self.mean

    @property
    def violating_fraction(self) -> float:
        """Share of time points whose worst violation exceeds `tol`."""
        return float(np.mean(self.per_time_max > self.tol))

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "max": self.max,
            "mean": self.mean,
            "normalized_max": self.normalized_max,
            "normalized_mean": self.normalized_mean,
            "scale": self.scale,
            "worst_time_index": self.worst_time,
            "worst_particle": self.worst_particle,
            "violating_fraction": self.violating_fraction,
        }


def _report(form: str, values: list[np.ndarray], scales: list[float], tol: float = 0.0) -> ResidualReport:
    per_max = np.array([v.max() for v in values])
    per_mean = np.array([v.mean() for v in values])
    per_se = np.array([v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0 for v in values])
    jt = int(per_max.argmax())
    return ResidualReport(form, per_max, per_mean, jt, int(values[jt].argmax()), float(np.mean(scales)), per_se, tol)


def default_test_actions(model: ModelSpec, n_random: int = 32, seed: int = 0) -> np.ndarray:
    """Corners of the action box plus uniform interior points."""
    if model.action_box is None:
        raise ValueError("unbounded action set: pass test actions explicitly")
    lo, hi = model.action_box
    k = model.k
    corners = np.array(np.meshgrid(*[[lo[i], hi[i]] for i in range(k)], indexing="ij")).reshape(k, -1).T
    inner = lo + (hi - lo) * np.random.default_rng(seed).random((n_random, k))
    return np.vstack([corners, inner])


def necessary_residual(context: HamiltonianContext, test_actions: Optional[np.ndarray] = None,
                       form: str = "auto", time_indices: Optional[Sequence[int]] = None,
                       tol: float = 0.0, seed: int = 0) -> ResidualReport:
    """Residual of the first-order condition with the law-derivative correction.

    With G = d_a H + E~[d_nu H(tilde theta)(X, alpha)], the "equality" form
    reports |G| and the "inequality" form reports the positive part of
    max_a G . (alpha - a) over the test actions.  "auto" picks the equality
    form for unbounded actions without explicit test actions.
    """
    model = context.model
    _require(model, "db_da", "df_da")
    if form == "auto":
        form = "equality" if (model.interior and test_actions is None) else "inequality"
    if form not in ("equality", "inequality"):
        raise ValueError("form must be 'equality', 'inequality' or 'auto'")
    if form == "inequality":
        acts = default_test_actions(model, seed=seed) if test_actions is None else _rows(test_actions, model.k)
    idx = range(context.grid.points.size) if time_indices is None else time_indices
    values, scales = [], []
    for j in idx:
        x, a, law, y, _ = context.slice(j)
        parts = _dH_da_parts(model, x, a, law, y) + _tilde_parts(model, "nu", x, a, law, y, x, a)
        G = sum(parts)
        size = sum(np.linalg.norm(p, axis=1) for p in parts)
        if form == "equality":
            values.append(np.linalg.norm(G, axis=1))
            scales.append(float(size.mean()))
        else:
            gap = a[:, None, :] - acts[None, :, :]
            values.append(np.maximum(np.einsum("nk,nak->na", G, gap).max(axis=1), 0.0))
            scales.append(float((size * np.linalg.norm(gap, axis=2).max(axis=1)).mean()))
    return _report(form, values, scales, tol)


# ---------------------------------------------------------------------------
# Scalar interaction models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarInteractionModel:
    """b = b0(x, a, E[phi(X, alpha)]) and f = f0(x, a, E[psi(X, alpha)]).

    phi and psi return (N, p) and (N, q).  Partials: db0_da (N, d, k),
    df0_da (N, k), db0_dzeta (N, d, p), df0_dzeta (N, q), dphi_da (N, p, k),
    dpsi_da (N, q, k).  A missing phi (or psi) means no interaction through b
    (or f).
    """

    d: int
    k: int
    db0_da: Callable
    df0_da: Callable
    phi: Optional[Callable] = None
    psi: Optional[Callable] = None
    db0_dzeta: Optional[Callable] = None
    df0_dzeta: Optional[Callable] = None
    dphi_da: Optional[Callable] = None
    dpsi_da: Optional[Callable] = None

    def __post_init__(self) -> None:
        if self.phi is not None and (self.db0_dzeta is None or self.dphi_da is None):
            raise ValueError("interaction through phi needs db0_dzeta and dphi_da")
        if self.psi is not None and (self.df0_dzeta is None or self.dpsi_da is None):
            raise ValueError("interaction through psi needs df0_dzeta and dpsi_da")


def _law_mean(fn: Callable, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.asarray(fn(x, a), dtype=float).reshape(x.shape[0], -1).mean(axis=0)


def scalar_interaction_residual(model: ScalarInteractionModel, ensemble: ParticleEnsemble,
                                Y: Optional[np.ndarray] = None) -> ResidualReport:
    """First-order condition for scalar interactions, with tilde averages over the ensemble.

    d_a b0 . Y + d_a f0 + E~[Y~ . d_zeta b0(~)] d_a phi + E~[d_zeta f0(~)] d_a psi.
    """
    ensemble.require("X", "alpha")
    n, nt = ensemble.n_particles, ensemble.grid.points.size
    Y = ensemble["Y"] if Y is None else np.asarray(Y, dtype=float)
    d, k = model.d, model.k
    values, scales = [], []
    for j in range(nt):
        x = ensemble["X"][:, j].reshape(n, d)
        a = ensemble["alpha"][:, j].reshape(n, k)
        y = Y[:, j].reshape(n, d)
        zb = _law_mean(model.phi, x, a) if model.phi else None
        zf = _law_mean(model.psi, x, a) if model.psi else None
        db = np.asarray(model.db0_da(x, a, zb), dtype=float).reshape(n, d, k)
        parts = [np.einsum("nij,ni->nj", db, y), _rows(model.df0_da(x, a, zf), k)]
        if model.phi is not None:
            p = zb.size
            dz = np.asarray(model.db0_dzeta(x, a, zb), dtype=float).reshape(-1, d, p)
            avg = np.einsum("nip,ni->p", np.broadcast_to(dz, (n, d, p)), y) / n
            dphi = np.asarray(model.dphi_da(x, a), dtype=float).reshape(-1, p, k)
            parts.append(np.broadcast_to(np.einsum("p,npk->nk", avg, dphi), (n, k)))
        if model.psi is not None:
            q = zf.size
            avg = np.broadcast_to(_rows(model.df0_dzeta(x, a, zf), q), (n, q)).mean(axis=0)
            dpsi = np.asarray(model.dpsi_da(x, a), dtype=float).reshape(-1, q, k)
            parts.append(np.broadcast_to(np.einsum("q,nqk->nk", avg, dpsi), (n, k)))
        res = sum(parts)
        values.append(np.linalg.norm(res, axis=1))
        scales.append(float(sum(np.linalg.norm(p, axis=1) for p in parts).mean()))
    return _report("equality", values, scales)


# ---------------------------------------------------------------------------
# Convexity probe
# ---------------------------------------------------------------------------

def convexity_probe(model: ModelSpec, n_probes: int = 200, n_atoms: int = 8, seed: int = 0,
                    tol: float = 1e-10) -> dict:
    """Random two-point tests of the Hamiltonian convexity inequality.

    Each probe draws (x, a, xi), (x', a', xi') with the two laws coupled atom
    by atom, plus y and z, and evaluates
    H' - H - d_x H (x'-x) - d_a H (a'-a) - E~[d_mu H (X~'-X~) + d_nu H (a~'-a~)].
    Negative values violate convexity.  This is a probe, not a proof.
    """
    _require(model, "db_da", "df_da")
    rng = np.random.default_rng(seed)
    d, k = model.d, model.k
    worst = np.inf
    for _ in range(n_probes):
        x, xq = rng.normal(size=(1, d)), rng.normal(size=(1, d))
        a, aq = rng.normal(size=(1, k)), rng.normal(size=(1, k))
        if model.action_box is not None:
            lo, hi = model.action_box
            a, aq = lo + (hi - lo) * rng.random((1, k)), lo + (hi - lo) * rng.random((1, k))
        atoms = rng.normal(size=(n_atoms, d + k))
        atoms_q = rng.normal(size=(n_atoms, d + k))
        if model.action_box is not None:
            atoms[:, d:] = lo + (hi - lo) * rng.random((n_atoms, k))
            atoms_q[:, d:] = lo + (hi - lo) * rng.random((n_atoms, k))
        law, law_q = EmpiricalLaw.uniform(atoms), EmpiricalLaw.uniform(atoms_q)
        y = rng.normal(size=(1, d))
        z = rng.normal(size=(1, d, model.m))
        h0 = hamiltonian_eval(model, x, a, law, y, z)
        h1 = hamiltonian_eval(model, xq, aq, law_q, y, z)
        lin = (_dH_dx(model, x, a, law, y) @ (xq - x).T).item() + (sum(_dH_da_parts(model, x, a, law, y)) @ (aq - a).T).item()
        xt, at = atoms[:, :d], atoms[:, d:]
        xs, as_ = np.repeat(x, n_atoms, 0), np.repeat(a, n_atoms, 0)
        ys = np.repeat(y, n_atoms, 0)
        mu = sum(_tilde_parts(model, "mu", xs[:1], as_[:1], law, ys[:1], xt, at))
        nu = sum(_tilde_parts(model, "nu", xs[:1], as_[:1], law, ys[:1], xt, at))
        lin += float(np.mean(np.sum(mu * (atoms_q[:, :d] - xt), axis=1) + np.sum(nu * (atoms_q[:, d:] - at), axis=1)))
        worst = min(worst, float(np.asarray(h1 - h0 - lin).item()))
    return {"worst_gap": float(worst), "convex": bool(worst >= -tol), "n_probes": n_probes}


# ---------------------------------------------------------------------------
# Martingale optimality condition (drift control)
# ---------------------------------------------------------------------------

def _is_drift_control(model: ModelSpec, seed: int = 0) -> bool:
    if model.d != model.k:
        return False
    rng = np.random.default_rng(seed)
    x, a = rng.normal(size=(5, model.d)), rng.normal(size=(5, model.k))
    law = EmpiricalLaw.uniform(np.hstack([x, a]))
    return bool(np.allclose(_rows(model.b(x, a, law), model.d), a, rtol=0, atol=1e-12))


def polynomial_features(degree: int = 2) -> Callable:
    """Monomials in (X_s, N_s) up to total `degree`, including the constant."""
    def build(x: np.ndarray, n: np.ndarray) -> np.ndarray:
        cols = [np.ones(x.shape[0])]
        for total in range(1, degree + 1):
            for i in range(total + 1):
                cols.append(x ** (total - i) * n ** i)
        return np.column_stack(cols)
    return build


@dataclass(frozen=True)
class WindowRegression:
    start: float
    end: float
    beta: np.ndarray
    stderr: np.ndarray
    kept: list
    dropped: list
    wald: float

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "beta": self.beta.tolist(), "stderr": self.stderr.tolist(),
                "kept": self.kept, "dropped": self.dropped, "wald": self.wald}


@dataclass(frozen=True)
class MartingaleVerdict:
    is_martingale: bool
    drift_ok: bool
    terminal_ok: bool
    wald: float
    dof: int
    p_value: float
    level: float
    terminal_residual: float
    windows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "is_martingale": self.is_martingale,
            "drift_ok": self.drift_ok,
            "terminal_ok": self.terminal_ok,
            "wald": self.wald,
            "dof": self.dof,
            "p_value": self.p_value,
            "level": self.level,
            "terminal_residual": self.terminal_residual,
            "windows": [w.to_dict() for w in self.windows],
        }


def _hc0_wald(F: np.ndarray, dN: np.ndarray, rcond: float = 1e-10):
    """OLS of dN on F with a White (HC0) covariance; collinear columns are dropped by pivoted QR."""
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    const = sd == 0
    Fs = np.where(const, F, (F - mu) / np.where(const, 1, sd))
    Q, R, piv = qr(Fs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rcond * diag[0])) if diag.size else 0
    kept, dropped = sorted(piv[:rank].tolist()), sorted(piv[rank:].tolist())
    Fk = Fs[:, kept]
    Q, R = np.linalg.qr(Fk)
    qy = Q.T @ dN
    beta = solve_triangular(R, qy)
    e = dN - Fk @ beta
    M = (Q * e[:, None] ** 2).T @ Q
    # pinv: increments that vanish identically give a zero statistic instead of a singular solve
    wald = float(qy @ np.linalg.pinv(M, rcond=1e-12, hermitian=True) @ qy)
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    cov = Rinv @ M @ Rinv.T
    return beta, np.sqrt(np.diag(cov)), kept, dropped, wald


def _martingale_parts(ensemble: ParticleEnsemble, model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """(d_a f + E~[d_nu f], int_0^t (d_x f + E~[d_mu f]) ds) on the recorded grid."""
    _require(model, "df_da")
    n, nt, d, k = ensemble.n_particles, ensemble.grid.points.size, model.d, model.k
    head = np.empty((nt, n, k))
    run = np.zeros((nt, n, d))
    Xs = np.ascontiguousarray(np.swapaxes(ensemble["X"].reshape(n, nt, d), 0, 1))
    As = np.ascontiguousarray(np.swapaxes(ensemble["alpha"].reshape(n, nt, k), 0, 1))
    for j in range(nt):
        x, a = Xs[j], As[j]
        law = EmpiricalLaw.uniform(np.hstack([x, a]))
        h = _rows(model.df_da(x, a, law), k)
        if model.df_dnu is not None:
            h = h + tilde_mean(model.df_dnu, x, a, law, x, a, (k,))
        head[j] = h
        r = 0.0 if model.df_dx is None else _rows(model.df_dx(x, a, law), d)
        if model.df_dmu is not None:
            r = r + tilde_mean(model.df_dmu, x, a, law, x, a, (d,))
        run[j] = r
    t = ensemble.grid.points
    integral = np.zeros_like(run)
    integral[1:] = np.cumsum(0.5 * np.diff(t)[:, None, None] * (run[1:] + run[:-1]), axis=0)
    return np.swapaxes(head, 0, 1), np.swapaxes(integral, 0, 1)


def martingale_process(ensemble: ParticleEnsemble, model: ModelSpec) -> np.ndarray:
    """N_t = d_a f + E~[d_nu f(~)(X, alpha)] - int_0^t (d_x f + E~[d_mu f(~)(X, alpha)]) ds."""
    head, integral = _martingale_parts(ensemble, model)
    return head - integral


def martingale_condition_check(ensemble: ParticleEnsemble, model: ModelSpec, features: Optional[Callable] = None,
                               level: float = 0.01, n_windows: int = 8, start: float = 0.2,
                               terminal_tol: float = 1e-2) -> MartingaleVerdict:
    """Test the martingale property of N and its terminal value.

    The horizon after `start * T` is cut into `n_windows` windows on the
    recorded grid.  In each window the increment of N is regressed on
    features of (X_s, N_s) at the window start; under the martingale
    hypothesis all coefficients vanish.  The White-covariance Wald statistics
    are summed over windows and compared with a chi-square law at `level`.
    The terminal value must match -d_x g - E~[d_mu g] - int (d_x f + ...) in
    mean absolute value, relative to its size, within `terminal_tol`.
    """
    if not _is_drift_control(model):
        raise ValueError("the martingale condition applies to drift control b(x, a, law) = a only")
    _require(model, "df_da", "dg_dx")
    ensemble.require("X", "alpha")
    features = features or polynomial_features(2)
    n, d = ensemble.n_particles, model.d
    t = ensemble.grid.points
    head, integral = _martingale_parts(ensemble, model)
    Nproc = head - integral
    T = t[-1]
    first = int(np.searchsorted(t, start * T - 1e-12))
    marks = np.unique(np.linspace(first, t.size - 1, n_windows + 1).round().astype(int))
    if marks.size < 2:
        raise ValueError("not enough recorded times for the requested windows")
    X = ensemble["X"].reshape(n, t.size, d)
    windows, total, dof = [], 0.0, 0
    for i0, i1 in zip(marks[:-1], marks[1:]):
        for c in range(model.k):
            F = features(X[:, i0, c], Nproc[:, i0, c])
            dN = Nproc[:, i1, c] - Nproc[:, i0, c]
            beta, se, kept, dropped, wald = _hc0_wald(F, dN)
            windows.append(WindowRegression(float(t[i0]), float(t[i1]), beta, se, kept, dropped, wald))
            total += wald
            dof += len(kept)
    p_value = float(chi2.sf(total, dof))

    xT = X[:, -1]
    law_x = EmpiricalLaw.uniform(xT)
    target = -_rows(model.dg_dx(xT, law_x), d)
    if model.dg_dmu is not None:
        target = target - tilde_mean(model.dg_dmu, xT, None, law_x, xT, None, (d,))
    # the running integral enters both sides of the terminal identity and cancels
    resid = np.abs(head[:, -1] - target).mean()
    size = (np.abs(head[:, -1]) + np.abs(target)).mean()
    term_rel = float(resid / size) if size > 0 else float(resid)
    drift_ok = p_value >= level
    terminal_ok = term_rel <= terminal_tol
    return MartingaleVerdict(drift_ok and terminal_ok, drift_ok, terminal_ok, float(total), int(dof), p_value,
                             level, term_rel, windows)


# ---------------------------------------------------------------------------
# Model builders
# ---------------------------------------------------------------------------

def lq_model(p: LQParams) -> ModelSpec:
    """The scalar LQ model as a ModelSpec (unbounded actions)."""
    def xm(law):
        return law.mean()[0]

    def am(law):
        return law.mean()[1]

    return ModelSpec(
        d=1, k=1, m=1, sigma=np.eye(1),
        b=lambda x, a, law: p.b1 * x + p.b2 * a + p.b1bar * xm(law) + p.b2bar * am(law),
        f=lambda x, a, law: 0.5 * (p.q * x[:, 0] ** 2 + p.qbar * (x[:, 0] - p.s * xm(law)) ** 2 + p.r * a[:, 0] ** 2
                                   + p.rbar * (a[:, 0] - p.sbar * am(law)) ** 2),
        g=lambda x, law: 0.5 * p.gamma * x[:, 0] ** 2 + 0.5 * p.gammabar * (x[:, 0] - p.rho * law.mean()[0]) ** 2,
        db_dx=lambda x, a, law: np.full((x.shape[0], 1, 1), p.b1),
        db_da=lambda x, a, law: np.full((x.shape[0], 1, 1), p.b2),
        df_dx=lambda x, a, law: p.q * x + p.qbar * (x - p.s * xm(law)),
        df_da=lambda x, a, law: p.r * a + p.rbar * (a - p.sbar * am(law)),
        dg_dx=lambda x, law: p.gamma * x + p.gammabar * (x - p.rho * law.mean()[0]),
        db_dmu=lambda x, a, law, xp, ap: np.full((1, 1, 1, 1), p.b1bar),
        db_dnu=lambda x, a, law, xp, ap: np.full((1, 1, 1, 1), p.b2bar),
        df_dmu=lambda x, a, law, xp, ap: -p.qbar * p.s * (x - p.s * xm(law)),
        df_dnu=lambda x, a, law, xp, ap: -p.rbar * p.sbar * (a - p.sbar * am(law)),
        dg_dmu=lambda x, law, xp: -p.gammabar * p.rho * (x - p.rho * law.mean()[0]),
        convex=True,
    )


def lq_context(ensemble: ParticleEnsemble, solution: LQSolution, model: Optional[ModelSpec] = None) -> HamiltonianContext:
    """Attach Y = eta X + chi and Z = eta to an LQ ensemble."""
    t = ensemble.grid.points
    Y = solution.eta_at(t)[None, :] * ensemble["X"] + solution.chi_at(t)[None, :]
    Z = np.broadcast_to(solution.eta_at(t)[None, :], Y.shape).copy()
    return HamiltonianContext(model or lq_model(solution.params), ensemble.with_channels(Y=Y, Z=Z))


def liquidation_model(p: LiquidationParams) -> ModelSpec:
    """State (S, Q), control alpha; the permanent impact reads the mean control."""
    lam, k, phi, A = p.lam, p.k, p.phi, p.A
    return ModelSpec(
        d=2, k=1, m=1, sigma=np.array([[p.sigma], [0.0]]),
        b=lambda x, a, law: np.column_stack([np.full(x.shape[0], lam * law.mean()[2]), a[:, 0]]),
        f=lambda x, a, law: phi * x[:, 1] ** 2 + a[:, 0] * x[:, 0] + k * a[:, 0] ** 2,
        g=lambda x, law: -x[:, 1] * (x[:, 0] - A * x[:, 1]),
        db_dx=lambda x, a, law: np.zeros((x.shape[0], 2, 2)),
        db_da=lambda x, a, law: np.broadcast_to(np.array([[0.0], [1.0]]), (x.shape[0], 2, 1)),
        df_dx=lambda x, a, law: np.column_stack([a[:, 0], 2 * phi * x[:, 1]]),
        df_da=lambda x, a, law: x[:, :1] + 2 * k * a,
        dg_dx=lambda x, law: np.column_stack([-x[:, 1], -x[:, 0] + 2 * A * x[:, 1]]),
        db_dnu=lambda x, a, law, xp, ap: np.array([[lam], [0.0]]).reshape(1, 1, 2, 1),
        convex=False,
    )


def liquidation_scalar_model(p: LiquidationParams) -> ScalarInteractionModel:
    """The same model written as b0(x, a, E[alpha]) = (lam zeta, a)."""
    return ScalarInteractionModel(
        d=2, k=1,
        db0_da=lambda x, a, z: np.broadcast_to(np.array([[0.0], [1.0]]), (x.shape[0], 2, 1)),
        df0_da=lambda x, a, z: x[:, :1] + 2 * p.k * a,
        phi=lambda x, a: a,
        db0_dzeta=lambda x, a, z: np.array([[p.lam], [0.0]]).reshape(1, 2, 1),
        dphi_da=lambda x, a: np.ones((x.shape[0], 1, 1)),
    )


def liquidation_context(ensemble: ParticleEnsemble, params: LiquidationParams) -> HamiltonianContext:
    """Stack (S, Q) into X and attach the adjoint (Y1, Y2) with Z = (0, -sigma)."""
    y1, y2 = adjoint_paths(ensemble, params)
    X = np.stack([ensemble["S"], ensemble["Q"]], axis=-1)
    Y = np.stack([y1, y2], axis=-1)
    Z = np.zeros(X.shape)  # (d, m) = (2, 1) flattened
    Z[..., 1] = -params.sigma
    ens = ParticleEnsemble(ensemble.grid, {"X": X, "alpha": ensemble["alpha"], "Y": Y, "Z": Z},
                           ensemble.seed, dict(ensemble.meta))
    return HamiltonianContext(liquidation_model(params), ens)


# ---------------------------------------------------------------------------
# Drift control with quadratic running cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticDriftControl:
    """dX = alpha dt + dW, f = a^2 / 2, g = gamma x^2 / 2 + gammabar (x - rho xbar)^2 / 2.

    eta = K1 / (1 + K1 (T - t)) with K1 = gamma + gammabar,
    eta_bar = K / (1 + K (T - t)) with K = gamma + gammabar (rho - 1)^2,
    xbar = x0 (1 + K (T - t)) / (1 + K T), chi = (eta_bar - eta) xbar and
    alpha = -(eta X + chi).
    """

    gamma: float = 1.0
    gammabar: float = 0.5
    rho: float = 0.5
    T: float = 1.0
    x0: float = 1.0

    @property
    def K1(self) -> float:
        return self.gamma + self.gammabar

    @property
    def K(self) -> float:
        return self.gamma + self.gammabar * (self.rho - 1) ** 2

    def eta(self, t):
        return self.K1 / (1 + self.K1 * (self.T - np.asarray(t, dtype=float)))

    def eta_bar(self, t):
        return self.K / (1 + self.K * (self.T - np.asarray(t, dtype=float)))

    def xbar(self, t):
        return self.x0 * (1 + self.K * (self.T - np.asarray(t, dtype=float))) / (1 + self.K * self.T)

    def chi(self, t):
        return (self.eta_bar(t) - self.eta(t)) * self.xbar(t)

    def control(self, t, x, xbar=None):
        return -(self.eta(t) * x + self.chi(t))

    def lq_params(self) -> LQParams:
        return LQParams(b1=0.0, b2=1.0, q=0.0, r=1.0, gamma=self.gamma, gammabar=self.gammabar, rho=self.rho,
                        T=self.T, x0=self.x0, strict=False)

    def model(self) -> ModelSpec:
        return lq_model(self.lq_params())
