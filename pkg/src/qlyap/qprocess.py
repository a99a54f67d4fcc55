"""The conditioned (never absorbed) process.

On the Ulam cells the h-transform of the killed matrix by its dominant
right eigenvector is a genuine stochastic matrix,

    Q(c, c') = eta(c') P(c, c') / (rho eta(c)),

whose stationary law is the quasi-ergodic vector ``nu = eta * mu``.  In
continuous space the same transform acts through the Girsanov drift
correction (see :func:`qlyap.dynamics.doob_drift`), which is what the
path sampling here uses; residual absorption of drift-corrected paths is
a time-discretization artifact and is counted as leakage.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .dynamics import QDriftSystem, integrate_sde
from .ensemble import run_ensemble
from .errors import EtaFloorError, InsufficientSurvivors, QlyapError
from .seeding import substream

__all__ = [
    "QKernel",
    "SurvivorEnsemble",
    "StationarityReport",
    "TransferTable",
    "build_q_kernel",
    "sample_q_chain",
    "sample_q_sde",
    "q_sde_ensemble",
    "check_q_stationarity",
    "conditioned_ensemble",
    "q_expectation_reweighted",
    "transfer_check",
]


# ---------------------------------------------------------------------------
# discrete kernel


@dataclass
class QKernel:
    """h-transformed transition matrix on the retained cells.

    ``kept`` indexes the spectral cells that survived the eta floor;
    ``row_sum_deviation`` is ``max |rowsum - 1|`` as produced by the
    theoretical rescaling alone (never silently renormalized)."""

    matrix: scipy.sparse.csr_matrix
    source: object
    kept: np.ndarray
    dropped: np.ndarray
    row_sum_deviation: float

    @property
    def n(self):
        return self.matrix.shape[0]

    def nu_on_kept(self):
        """Source quasi-ergodic vector restricted to kept cells and
        renormalized (a no-op when nothing was dropped)."""
        nu = self.source.nu[self.kept]
        return nu / nu.sum()

    def row_cdfs(self):
        dense = self.matrix.toarray()
        sums = dense.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise QlyapError("Q kernel has an empty row")
        return np.cumsum(dense / sums, axis=1)


def build_q_kernel(sd, eta_floor_ratio=1e-12, require_all=False):
    """Doob h-transform of the discretized killed operator.

    Cells whose eigenfunction value falls below ``eta_floor_ratio * max
    eta`` are dropped (the transform is singular there) and reported;
    with ``require_all`` dropping raises instead.  Rows are scaled only
    by the theoretical factor, so the deviation of the row sums from 1
    measures the eigensolve residual.
    """
    eta = sd.eta
    floor = eta_floor_ratio * float(eta.max())
    kept = np.nonzero(eta > floor)[0].astype(np.int64)
    dropped = np.nonzero(eta <= floor)[0].astype(np.int64)
    if len(kept) < 2:
        raise EtaFloorError("fewer than two cells retain positive eta", dropped=dropped)
    if require_all and len(dropped):
        raise EtaFloorError(
            f"{len(dropped)} cells fell below the eta floor", dropped=dropped
        )
    sub = sd.pmat.matrix[kept][:, kept].tocsr()
    scale_left = scipy.sparse.diags(1.0 / (sd.rho * eta[kept]))
    scale_right = scipy.sparse.diags(eta[kept])
    q = (scale_left @ sub @ scale_right).tocsr()
    rows = np.asarray(q.sum(axis=1)).ravel()
    return QKernel(
        matrix=q,
        source=sd,
        kept=kept,
        dropped=dropped,
        row_sum_deviation=float(np.abs(rows - 1.0).max()),
    )


def sample_q_chain(qk, start_cell, n, seed, stream=("qchain", 0)):
    """Sample an n-step chain from the h-transformed kernel.

    Rows are normalized by their actual sums at sampling time (the
    deviation lives in ``row_sum_deviation``); the chain is never
    absorbed.  Returns kept-cell indices of length ``n + 1``.
    """
    start = int(start_cell)
    if not 0 <= start < qk.n:
        raise ValueError("start cell is not a retained kernel cell")
    cdfs = qk.row_cdfs()
    rng = substream(seed, *stream)
    u = rng.uniform(size=n)
    path = np.empty(n + 1, dtype=np.int64)
    path[0] = start
    c = start
    for j in range(n):
        c = int(np.searchsorted(cdfs[c], u[j], side="right"))
        if c >= qk.n:  # u landed on the rounding tail of the last cdf entry
            c = qk.n - 1
        path[j + 1] = c
    return path


@dataclass
class StationarityReport:
    residual: float  # || nu Q - nu ||_1
    steps: np.ndarray
    tv: np.ndarray  # TV(Q^n(x, .), nu) on the step grid
    non_mixing: bool


def check_q_stationarity(qk, nu=None, start_cell=None, step_grid=(1, 10, 50, 200)):
    """Verify that ``nu`` is stationary for the kernel and watch mixing.

    The residual is an algebraic identity given the eigen-identities and
    must vanish to solver precision.  The TV column tracks convergence of
    ``Q^n(x, .)`` to ``nu``; a sequence that fails to decay flags
    ``non_mixing`` (e.g. a reducible kernel).
    """
    nu = qk.nu_on_kept() if nu is None else np.asarray(nu, dtype=float)
    if nu.shape != (qk.n,):
        raise ValueError("nu has the wrong length for this kernel")
    residual = float(np.abs(nu @ qk.matrix - nu).sum())
    if start_cell is None:
        start_cell = int(np.argmax(nu))
    step_grid = np.asarray(sorted(set(int(s) for s in step_grid)), dtype=int)
    p = np.zeros(qk.n)
    p[int(start_cell)] = 1.0
    tvs = np.empty(len(step_grid))
    want = {int(s): i for i, s in enumerate(step_grid)}
    if 0 in want:
        tvs[want[0]] = 0.5 * np.abs(p - nu).sum()
    for step in range(1, int(step_grid.max()) + 1):
        p = p @ qk.matrix
        total = p.sum()
        if total > 0:
            p = p / total
        if step in want:
            tvs[want[step]] = 0.5 * np.abs(p - nu).sum()
    non_mixing = bool(
        len(tvs) >= 2 and tvs[-1] > 1e-6 and tvs[-1] > 0.9 * max(tvs[0], 1e-12)
    )
    return StationarityReport(residual=residual, steps=step_grid, tv=tvs,
                              non_mixing=non_mixing)


# ---------------------------------------------------------------------------
# continuous-space sampling


def sample_q_sde(qsys, x0, T, dt, seed, stream=("qsde", 0)):
    """Integrate one drift-corrected path.

    Identical contract to :func:`qlyap.dynamics.integrate_sde`; an
    absorbed outcome (``tau`` set) is discretization leakage, which the
    conditioned process assigns probability zero."""
    if not isinstance(qsys, QDriftSystem):
        raise TypeError("sample_q_sde expects a doob_drift system")
    return integrate_sde(qsys, x0, T, dt, seed, stream=stream)


def q_sde_ensemble(qsys, starts, n_steps, dt, seed, n_total=None,
                   purpose="qsde-ensemble", snapshot_steps=()):
    """Batched drift-corrected paths; returns (result, leak_fraction)."""
    if not isinstance(qsys, QDriftSystem):
        raise TypeError("q_sde_ensemble expects a doob_drift system")
    res = run_ensemble(qsys, starts, n_steps, dt, seed, n_total=n_total,
                       purpose=purpose, snapshot_steps=snapshot_steps)
    return res, 1.0 - res.survivor_fraction()


# ---------------------------------------------------------------------------
# conditioned (surviving) ensembles


@dataclass
class SurvivorEnsemble:
    """Histories of the trajectories still alive at the horizon."""

    horizon: float
    dt: float
    record_steps: np.ndarray
    states: np.ndarray  # (n_survivors, n_recorded, d)
    start_label: str
    launched: int

    @property
    def n_survivors(self):
        return self.states.shape[0]

    @property
    def survivor_fraction(self):
        return self.n_survivors / self.launched

    @property
    def times(self):
        return self.record_steps * self.dt

    def to_csv(self, path):
        d = self.states.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "time"] + [f"x{a}" for a in range(d)])
            for i in range(self.n_survivors):
                for j, t in enumerate(self.times):
                    w.writerow([i, f"{t:.10g}"] + [f"{v:.17g}" for v in self.states[i, j]])


def conditioned_ensemble(sys, start, t, n, seed, dt=None, record_every=None,
                         min_survivors=50, start_label="point"):
    """Launch ``n`` paths and keep the full histories of survivors.

    The survivor fraction estimates ``P(tau > t)``.  Raises
    ``InsufficientSurvivors`` below ``min_survivors``.
    """
    if n < 1:
        raise ValueError("need at least one path")
    from .dynamics import DiscreteSystem

    if isinstance(sys, DiscreteSystem):
        dt = 1.0
    elif dt is None or dt <= 0:
        raise ValueError("SDE ensembles need a positive dt")
    n_steps = int(round(t / dt))
    if record_every is None:
        record_every = max(1, n_steps // 200)
    res = run_ensemble(sys, start, n_steps, dt, seed, n_total=n,
                       purpose="conditioned", record_every=record_every)
    alive = res.survived
    n_surv = int(alive.sum())
    if n_surv < min_survivors:
        raise InsufficientSurvivors(
            f"{n_surv} survivors at t={t} (< {min_survivors})",
            survivors=n_surv,
            required=min_survivors,
        )
    states = np.swapaxes(res.recorded[:, alive, :], 0, 1).copy()
    return SurvivorEnsemble(
        horizon=float(t),
        dt=dt,
        record_steps=res.record_steps,
        states=states,
        start_label=start_label,
        launched=n,
    )


# ---------------------------------------------------------------------------
# reweighted expectations and the conditioned-convergence table


def q_expectation_reweighted(sys, sd, x0, s, functional, n, seed, dt=None,
                             record_every=None, eta_floor_ratio=1e-12):
    """Estimate a conditioned expectation by h-transform reweighting.

    Averages ``exp(beta s) * eta(x_s) / eta(x0) * functional`` over every
    launched path of the *unconditioned* dynamics; absorbed paths
    contribute zero.  ``functional`` receives the ensemble result and
    must return one value per path, using at most the first ``s`` time
    units.  Returns ``(estimate, standard_error)``.
    """
    from .dynamics import DiscreteSystem

    if isinstance(sys, DiscreteSystem):
        dt = 1.0
    elif dt is None or dt <= 0:
        raise ValueError("SDE reweighting needs a positive dt")
    n_steps = int(round(s / dt))
    field = sd.eta_field(floor_ratio=eta_floor_ratio)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    res = run_ensemble(sys, x0, n_steps, dt, seed, n_total=int(n),
                       purpose="q-reweight", record_every=record_every)
    values = np.asarray(functional(res), dtype=float)
    if values.shape != (int(n),):
        raise ValueError("functional must return one value per launched path")
    weights = np.where(
        res.survived,
        np.exp(sd.beta * n_steps * dt) * field.value(res.final_states) / field.value(x0),
        0.0,
    )
    prod = weights * np.where(res.survived, values, 0.0)
    est = float(prod.mean())
    se = float(prod.std(ddof=1) / np.sqrt(len(prod)))
    return est, se


@dataclass
class TransferTable:
    t_grid: np.ndarray
    exceedance: np.ndarray
    n_survivors: np.ndarray
    epsilon: float
    gamma_star: float

    def rows(self):
        return list(zip(self.t_grid, self.exceedance, self.n_survivors))


def transfer_check(gamma_fn, sys, start, t_grid, epsilon, gamma_star, n, seed,
                   dt=None, record_every=1, min_survivors=50):
    """Empirical conditioned-convergence table for an estimator family.

    For each horizon ``t`` the table reports the conditional exceedance
    ``P(|Gamma_t - gamma_star| > eps | tau > t)`` over the survivors at
    ``t``.  ``gamma_fn(result, step) -> (N,)`` must use only the history
    up to ``step``; ``gamma_star`` is supplied by the caller, never
    inferred.
    """
    from .dynamics import DiscreteSystem

    if isinstance(sys, DiscreteSystem):
        dt = 1.0
    elif dt is None or dt <= 0:
        raise ValueError("SDE transfer checks need a positive dt")
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    steps = np.round(t_grid / dt).astype(int)
    if record_every is not None and any(s % record_every for s in steps):
        raise ValueError("grid times must land on recorded steps")
    res = run_ensemble(sys, start, int(steps.max()), dt, seed, n_total=int(n),
                       purpose="transfer", record_every=record_every,
                       snapshot_steps=steps.tolist())
    exceed = np.empty(len(steps))
    n_surv = np.empty(len(steps), dtype=int)
    for i, s in enumerate(steps):
        _, alive = res.snapshots[int(s)]
        n_surv[i] = int(alive.sum())
        if n_surv[i] < min_survivors:
            raise InsufficientSurvivors(
                f"{n_surv[i]} survivors at t={t_grid[i]} (< {min_survivors})",
                survivors=n_surv[i],
                required=min_survivors,
            )
        gamma = np.asarray(gamma_fn(res, int(s)), dtype=float)
        exceed[i] = float(
            np.mean(np.abs(gamma[alive] - gamma_star) > epsilon)
        )
    return TransferTable(
        t_grid=t_grid,
        exceedance=exceed,
        n_survivors=n_surv,
        epsilon=float(epsilon),
        gamma_star=float(gamma_star),
    )
