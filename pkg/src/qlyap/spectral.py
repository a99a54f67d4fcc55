"""Ulam discretization of the killed transfer operator.

A grid over the domain turns the killed semigroup into a substochastic
matrix estimated by Monte Carlo: entry ``(c, c')`` is the fraction of
starts drawn uniformly in cell ``c`` that land in ``c'`` after one
operator horizon without being absorbed.  Mass lost to absorption shows
up as row-sum deficit.  The dominant eigenpair of that matrix gives the
survival rate ``beta = -log(rho) / delta_op``, the quasi-stationary
vector ``mu`` (left), the eigenfunction ``eta`` (right, normalized so
``sum(eta * mu) = 1``) and the quasi-ergodic vector ``nu = eta * mu``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .dynamics import DiscreteSystem
from .ensemble import run_ensemble
from .errors import (
    EmptyCellError,
    InsufficientSurvivors,
    IntegrityError,
    NonUniqueQSD,
    NoSurvival,
    QlyapError,
)
from .seeding import substream

__all__ = [
    "UlamGrid",
    "SubstochasticMatrix",
    "SpectralData",
    "EtaField",
    "SurvivalFit",
    "TVDecay",
    "build_ulam_operator",
    "solve_qsd",
    "quasi_ergodic",
    "estimate_survival_rate",
    "tv_decay_diagnostic",
]

DENSE_CUTOFF = 2000


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class UlamGrid:
    """Axis-aligned half-open boxes [a, b) covering the domain's bounding
    box; cells that do not intersect the domain are dropped from the
    index.  ``retained`` maps retained-cell position -> flat lattice
    index."""

    domain: object
    shape: tuple
    edges: tuple = None
    retained: np.ndarray = None
    lattice_to_retained: np.ndarray = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != self.domain.dim or any(s < 1 for s in shape):
            raise ValueError("grid shape must give >= 1 cells per axis")
        object.__setattr__(self, "shape", shape)
        edges = tuple(
            np.linspace(self.domain.lo[a], self.domain.hi[a], shape[a] + 1)
            for a in range(len(shape))
        )
        object.__setattr__(self, "edges", edges)
        retained = self._probe_retained()
        object.__setattr__(self, "retained", retained)
        lat2ret = np.full(int(np.prod(shape)), -1, dtype=np.int64)
        lat2ret[retained] = np.arange(len(retained))
        object.__setattr__(self, "lattice_to_retained", lat2ret)

    def _probe_retained(self):
        centers = self._lattice_centers()
        inside = self.domain.contains(centers)
        if not inside.all():
            # probe shrunk corners too before dropping a cell
            lo = self.cell_lo_all()
            w = self.widths
            d = len(self.shape)
            for corner in range(2**d):
                offs = np.array([(corner >> a) & 1 for a in range(d)], dtype=float)
                pts = lo + (0.02 + 0.96 * offs) * w
                inside |= self.domain.contains(pts)
        return np.nonzero(inside)[0].astype(np.int64)

    # -- geometry -----------------------------------------------------
    @property
    def dim(self):
        return len(self.shape)

    @property
    def n_cells(self):
        return len(self.retained)

    @property
    def widths(self):
        return np.array([e[1] - e[0] for e in self.edges])

    def _lattice_centers(self):
        axes = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_lo_all(self):
        axes = [e[:-1] for e in self.edges]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def centers(self):
        """Centers of retained cells, shape (n_cells, d)."""
        return self._lattice_centers()[self.retained]

    def cell_index(self, x):
        """Retained cell index per point; -1 for points outside the box,
        outside the domain, or in dropped cells."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        flat = np.zeros(len(pts), dtype=np.int64)
        ok = np.ones(len(pts), dtype=bool)
        stride = 1
        for a in reversed(range(self.dim)):
            e = self.edges[a]
            w = e[1] - e[0]
            idx = np.floor((pts[:, a] - e[0]) / w).astype(np.int64)
            ok &= (idx >= 0) & (idx < self.shape[a])
            idx = np.clip(idx, 0, self.shape[a] - 1)
            flat += idx * stride
            stride *= self.shape[a]
        ok &= self.domain.contains(pts)
        out = np.where(ok, self.lattice_to_retained[np.where(ok, flat, 0)], -1)
        return int(out[0]) if single else out

    def sample_in_cells(self, rng, cell_rep, max_tries=200):
        """Uniform points in the given retained cells (domain-rejected)."""
        lo_all = self.cell_lo_all()
        lo = lo_all[self.retained[cell_rep]]
        w = self.widths
        pts = lo + rng.uniform(size=(len(cell_rep), self.dim)) * w
        bad = ~self.domain.contains(pts)
        tries = 0
        while bad.any():
            tries += 1
            if tries > max_tries:
                bad_cells = np.unique(cell_rep[bad])
                raise EmptyCellError(
                    f"no domain points found in cells {bad_cells.tolist()[:20]}"
                )
            nb = int(bad.sum())
            pts[bad] = lo[bad] + rng.uniform(size=(nb, self.dim)) * w
            bad[bad.copy()] = ~self.domain.contains(pts[bad])
        return pts

    def spec(self):
        return {
            "lo": self.domain.lo.tolist(),
            "hi": self.domain.hi.tolist(),
            "shape": list(self.shape),
            "retained": self.retained.tolist(),
        }


# ---------------------------------------------------------------------------
# operator


@dataclass
class SubstochasticMatrix:
    """Nonnegative matrix on the retained cells with row sums <= 1; one
    application advances time by ``delta_op``."""

    matrix: scipy.sparse.csr_matrix
    delta_op: float
    grid: UlamGrid = None

    def __post_init__(self):
        m = scipy.sparse.csr_matrix(self.matrix)
        if m.shape[0] != m.shape[1]:
            raise ValueError("operator matrix must be square")
        if m.nnz and m.data.min() < 0:
            raise ValueError("operator matrix must be nonnegative")
        rows = np.asarray(m.sum(axis=1)).ravel()
        if rows.size and rows.max() > 1.0 + 1e-12:
            raise ValueError(f"row sums exceed 1: max {rows.max():.15f}")
        self.matrix = m

    @property
    def n(self):
        return self.matrix.shape[0]

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def dense(self):
        return self.matrix.toarray()


def build_ulam_operator(sys, grid, samples_per_cell, delta_op, seed, dt=None):
    """Monte-Carlo Ulam estimate of the killed operator over ``delta_op``.

    Each retained cell launches ``samples_per_cell`` uniform starts that
    are integrated for one operator horizon; transition counts are
    normalized per row, absorbed mass becomes the row-sum deficit.
    """
    if samples_per_cell < 1:
        raise ValueError("need samples_per_cell >= 1")
    discrete = isinstance(sys, DiscreteSystem)
    if discrete:
        n_steps = int(round(delta_op))
        if n_steps < 1:
            raise ValueError("delta_op must be a positive step count for maps")
        dt = 1.0
    else:
        if dt is None or dt <= 0:
            raise ValueError("SDE operators need a positive dt")
        n_steps = max(1, int(round(delta_op / dt)))
    n_cells = grid.n_cells
    s = int(samples_per_cell)
    cell_rep = np.repeat(np.arange(n_cells, dtype=np.int64), s)
    rng = substream(seed, "ulam-starts")
    starts = grid.sample_in_cells(rng, cell_rep)
    res = run_ensemble(sys, starts, n_steps, dt, seed, purpose="ulam-paths")
    landed = np.where(res.survived, grid.cell_index(res.final_states), -1)
    ok = landed >= 0
    counts = scipy.sparse.coo_matrix(
        (np.ones(int(ok.sum())), (cell_rep[ok], landed[ok])),
        shape=(n_cells, n_cells),
    ).tocsr()
    counts = counts.multiply(1.0 / s).tocsr()
    # store the horizon actually realized by the stepper
    realized = float(n_steps) if discrete else n_steps * dt
    return SubstochasticMatrix(matrix=counts, delta_op=realized, grid=grid)


# ---------------------------------------------------------------------------
# eigenproblem


@dataclass
class SpectralData:
    """Discretized Hypothesis quantities.

    ``mu`` is a probability vector, ``eta >= 0`` with ``sum(eta*mu) = 1``
    and ``nu = eta * mu``; ``rho`` is the dominant eigenvalue and
    ``beta = -log(rho) / delta_op``.
    """

    pmat: SubstochasticMatrix
    rho: float
    beta: float
    mu: np.ndarray
    eta: np.ndarray
    nu: np.ndarray
    residual_left: float
    residual_right: float
    second_modulus: float
    solver: str = "dense"

    @property
    def grid(self):
        return self.pmat.grid

    @property
    def delta_op(self):
        return self.pmat.delta_op

    def eta_field(self, floor_ratio=1e-12):
        if self.grid is None:
            raise QlyapError("spectral data has no grid; eta field unavailable")
        return EtaField(self.grid, self.eta, floor_ratio=floor_ratio)

    def nu_sampler(self):
        """Sampler (rng, n) -> points distributed as the piecewise-uniform
        density with cell weights nu."""
        if self.grid is None:
            raise QlyapError("spectral data has no grid; nu sampler unavailable")
        grid = self.grid
        cdf = np.cumsum(self.nu)
        cdf /= cdf[-1]

        def sample(rng, n):
            cells = np.searchsorted(cdf, rng.uniform(size=n), side="right")
            cells = np.minimum(cells, len(cdf) - 1)
            return grid.sample_in_cells(rng, cells.astype(np.int64))

        return sample

    # -- serialization -------------------------------------------------
    def to_json_dict(self):
        coo = self.pmat.matrix.tocoo()
        out = {
            "rho": self.rho,
            "beta": self.beta,
            "delta_op": self.pmat.delta_op,
            "mu": self.mu.tolist(),
            "eta": self.eta.tolist(),
            "nu": self.nu.tolist(),
            "residual_left": self.residual_left,
            "residual_right": self.residual_right,
            "second_modulus": self.second_modulus,
            "solver": self.solver,
            "matrix": {
                "n": self.pmat.n,
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
            },
        }
        if self.grid is not None:
            out["grid"] = self.grid.spec()
        return out

    def save(self, path, extra=None):
        doc = self.to_json_dict()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def from_json_dict(cls, doc, domain=None):
        try:
            mat = doc["matrix"]
            n = int(mat["n"])
            matrix = scipy.sparse.coo_matrix(
                (mat["vals"], (mat["rows"], mat["cols"])), shape=(n, n)
            ).tocsr()
            mu = np.asarray(doc["mu"], dtype=float)
            eta = np.asarray(doc["eta"], dtype=float)
            nu = np.asarray(doc["nu"], dtype=float)
            rho = float(doc["rho"])
            beta = float(doc["beta"])
            delta_op = float(doc["delta_op"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"malformed spectral document: {exc}") from exc
        if not (len(mu) == len(eta) == len(nu) == n):
            raise IntegrityError("vector lengths disagree with matrix size")
        if not np.isfinite(mu).all() or abs(mu.sum() - 1.0) > 1e-6:
            raise IntegrityError("mu is not a probability vector")
        if not np.isfinite(eta).all() or eta.min() < -1e-12:
            raise IntegrityError("eta has invalid entries")
        if abs(float(eta @ mu) - 1.0) > 1e-6:
            raise IntegrityError("eta/mu normalization broken")
        grid = None
        if "grid" in doc and domain is not None:
            grid = UlamGrid(domain=domain, shape=tuple(doc["grid"]["shape"]))
            if grid.spec()["retained"] != doc["grid"]["retained"]:
                raise IntegrityError("grid retained cells disagree with domain")
        try:
            pmat = SubstochasticMatrix(matrix=matrix, delta_op=delta_op, grid=grid)
        except ValueError as exc:
            raise IntegrityError(f"invalid operator matrix: {exc}") from exc
        return cls(
            pmat=pmat,
            rho=rho,
            beta=beta,
            mu=mu,
            eta=eta,
            nu=nu,
            residual_left=float(doc.get("residual_left", np.nan)),
            residual_right=float(doc.get("residual_right", np.nan)),
            second_modulus=float(doc.get("second_modulus", np.nan)),
            solver=doc.get("solver", "unknown"),
        )

    @classmethod
    def load(cls, path, domain=None):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"corrupted spectral JSON: {exc}") from exc
        return cls.from_json_dict(doc, domain=domain)


def _clean_nonnegative(v, what):
    v = np.real(v)
    if v.sum() < 0:
        v = -v
    neg = v < 0
    if neg.any():
        neg_mass = -v[neg].sum()
        if neg_mass > 1e-8 * np.abs(v).sum():
            raise NonUniqueQSD(
                f"dominant {what} eigenvector is not nonnegative "
                f"(negative mass {neg_mass:.2e}); spectrum numerically degenerate"
            )
        v = np.where(neg, 0.0, v)
    return v


def solve_qsd(pmat, tol=1e-10):
    """Dominant eigentriple of the killed operator.

    Dense two-sided solve for up to ``DENSE_CUTOFF`` cells, power
    iteration with deflation above that.  Raises ``NoSurvival`` when the
    dominant eigenvalue is ~0 and ``NonUniqueQSD`` when the two largest
    eigenvalue moduli coincide within ``tol`` (metastable grids are fine:
    their gap is small but resolvable; a literal tie is not).
    """
    n = pmat.n
    if n <= DENSE_CUTOFF:
        rho, mu, eta, second = _dense_eig(pmat.dense())
        solver = "dense"
    else:
        rho, mu, eta, second = _power_eig(pmat.matrix, tol)
        solver = "power"
    if rho <= tol:
        raise NoSurvival(f"dominant eigenvalue {rho:.3e} <= tol; no surviving mass")
    if rho - second <= tol:
        raise NonUniqueQSD(
            f"top eigenvalue moduli within tol: {rho:.12e} vs {second:.12e}",
            rho=rho,
            second=second,
        )
    mu = _clean_nonnegative(mu, "left")
    eta = _clean_nonnegative(eta, "right")
    mu = mu / mu.sum()
    scale = float(eta @ mu)
    if scale <= 0:
        raise NonUniqueQSD("eta and mu have disjoint support")
    eta = eta / scale
    res_l = float(np.abs(mu @ pmat.matrix - rho * mu).sum())
    res_r = float(np.abs(pmat.matrix @ eta - rho * eta).sum() / max(eta.max(), 1e-300))
    if max(res_l, res_r) > max(tol, 1e-9):
        raise QlyapError(
            f"eigensolve residuals too large: left {res_l:.2e}, right {res_r:.2e}"
        )
    nu = eta * mu
    nu = nu / nu.sum()
    return SpectralData(
        pmat=pmat,
        rho=float(rho),
        beta=float(-np.log(rho) / pmat.delta_op),
        mu=mu,
        eta=eta,
        nu=nu,
        residual_left=res_l,
        residual_right=res_r,
        second_modulus=float(second),
        solver=solver,
    )


def _dense_eig(a):
    w, vl, vr = scipy.linalg.eig(a, left=True, right=True)
    mods = np.abs(w)
    order = np.argsort(mods)[::-1]
    top = order[0]
    rho = float(np.real(w[top]))
    second = float(mods[order[1]]) if len(order) > 1 else 0.0
    mu = np.real(vl[:, top])
    eta = np.real(vr[:, top])
    return rho, mu, eta, second


def _power_eig(p, tol, max_iter=200_000):
    n = p.shape[0]
    pt = p.T.tocsr()
    mu = np.full(n, 1.0 / n)
    eta = np.ones(n)
    rho = 1.0
    for it in range(max_iter):
        mu_new = pt @ mu
        eta_new = p @ eta
        nmu = np.abs(mu_new).sum()
        neta = np.abs(eta_new).max()
        if nmu == 0 or neta == 0:
            raise NoSurvival("operator annihilates the iterates")
        mu_new /= nmu
        eta_new /= neta
        rho_new = float(mu_new @ (p @ eta_new)) / float(mu_new @ eta_new)
        done = (
            np.abs(mu_new - mu).sum() < 0.01 * tol
            and np.abs(eta_new - eta).max() < 0.01 * tol
        )
        mu, eta, rho = mu_new, eta_new, rho_new
        if done:
            break
    else:
        raise QlyapError(
            "power iteration did not converge; use a dense-solvable grid "
            "(metastable operators have near-degenerate spectra)"
        )
    # deflated power step to estimate the second modulus
    rng = np.random.default_rng(0)
    y = rng.standard_normal(n)
    wmu = mu / max(float(mu @ eta), 1e-300)
    for _ in range(2000):
        y = p @ y - rho * eta * float(wmu @ y)
        ny = np.abs(y).max()
        if ny == 0:
            return rho, mu, eta, 0.0
        y /= ny
    second = float(np.abs(y @ (p @ y)) / max(float(y @ y), 1e-300))
    return rho, mu, eta, min(second, rho)


def quasi_ergodic(sd):
    """Quasi-ergodic probability vector ``nu = eta * mu / sum(eta * mu)``."""
    nu = sd.eta * sd.mu
    total = nu.sum()
    if total <= 0:
        raise QlyapError("eta*mu has no mass")
    return nu / total


# ---------------------------------------------------------------------------
# eta interpolation


class _LatticeInterp:
    """Multilinear gather-blend interpolation on a regular node lattice.

    Hand-rolled because the drift of every conditioned step queries it;
    generic interpolator call overhead dominates long runs otherwise.
    Supports vector-valued nodes with one shared index/fraction pass.
    Queries are clamped into the lattice hull.
    """

    def __init__(self, axes, values):
        # values: (*node_shape, n_comp)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.n_comp = values.shape[-1]
        node_shape = values.shape[:-1]
        strides = []
        s = 1
        for n in reversed(node_shape):
            strides.append(s)
            s *= n
        self._strides = np.array(list(reversed(strides)), dtype=np.int64)
        self._nodes = np.array([len(a) for a in self.axes])
        self._values = values.reshape(-1, self.n_comp)

    def __call__(self, pts):
        n, d = pts.shape
        base = np.zeros(n, dtype=np.int64)
        fracs = np.empty((d, n))
        for a in range(d):
            ax = self.axes[a]
            idx = np.searchsorted(ax, pts[:, a], side="right") - 1
            idx = np.clip(idx, 0, self._nodes[a] - 2)
            base += idx * self._strides[a]
            f = (pts[:, a] - ax[idx]) / (ax[idx + 1] - ax[idx])
            fracs[a] = np.clip(f, 0.0, 1.0)
        out = np.zeros((n, self.n_comp))
        for corner in range(1 << d):
            offset = 0
            weight = None
            for a in range(d):
                if (corner >> a) & 1:
                    offset += self._strides[a]
                    wa = fracs[a]
                else:
                    wa = 1.0 - fracs[a]
                weight = wa if weight is None else weight * wa
            out += weight[:, None] * self._values[base + offset]
        return out


class EtaField:
    """Multilinear interpolant of the cell eigenfunction.

    Values are interpolated first, then log-transformed.  The lattice is
    extended with ghost nodes pinned to zero on the bounding-box faces:
    the true eigenfunction vanishes at the absorbing boundary, and
    without the pins the drift of the conditioned process plateaus in
    the last half cell and paths leak there.  Interpolated values are
    clamped at ``floor_ratio * max(eta)`` so the log and its gradient
    stay finite; clamp events are counted in ``clamp_count``.

    ``grad_log`` evaluates central differences of the log-interpolant
    with cell-width steps, tabulated once on the lattice nodes and then
    interpolated (one gather pass per query batch).
    """

    def __init__(self, grid, eta, floor_ratio=1e-12):
        self.grid = grid
        self.eta = np.asarray(eta, dtype=float)
        self.floor = float(floor_ratio) * float(self.eta.max())
        lattice = np.zeros(int(np.prod(grid.shape)))
        lattice[grid.retained] = self.eta
        values = lattice.reshape(grid.shape)
        axes = []
        for a in range(grid.dim):
            e = grid.edges[a]
            centers = 0.5 * (e[:-1] + e[1:])
            axes.append(np.concatenate(([e[0]], centers, [e[-1]])))
            pad = [(0, 0)] * grid.dim
            pad[a] = (1, 1)
            values = np.pad(values, pad, mode="constant", constant_values=0.0)
        self._value_interp = _LatticeInterp(axes, values[..., None])
        self._axes = axes
        self.clamp_count = 0
        self.dropped = np.nonzero(self.eta < self.floor)[0]
        self._grad_interp = None

    def value(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        v = self._value_interp(pts)[:, 0]
        low = v < self.floor
        if low.any():
            self.clamp_count += int(low.sum())
            v = np.where(low, self.floor, v)
        return float(v[0]) if single else v

    def log_value(self, x):
        return np.log(self.value(x))

    def _grad_log_direct(self, pts):
        n, d = pts.shape
        w = self.grid.widths
        probes = np.repeat(pts[None, :, :], 2 * d, axis=0)
        for a in range(d):
            probes[2 * a, :, a] += w[a]
            probes[2 * a + 1, :, a] -= w[a]
        logv = np.log(
            np.maximum(self._value_interp(probes.reshape(2 * d * n, d))[:, 0], self.floor)
        ).reshape(2 * d, n)
        out = np.empty_like(pts)
        for a in range(d):
            out[:, a] = (logv[2 * a] - logv[2 * a + 1]) / (2 * w[a])
        return out

    def grad_log(self, x):
        """Gradient of log(eta): cell-width central differences of the
        interpolant, tabulated on the lattice nodes."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        if self._grad_interp is None:
            mesh = np.meshgrid(*self._axes, indexing="ij")
            nodes = np.stack([m.ravel() for m in mesh], axis=1)
            table = self._grad_log_direct(nodes)
            shape = tuple(len(a) for a in self._axes) + (self.grid.dim,)
            self._grad_interp = _LatticeInterp(self._axes, table.reshape(shape))
        out = self._grad_interp(pts)
        return out[0] if single else out


# ---------------------------------------------------------------------------
# Monte-Carlo survival rate


@dataclass
class SurvivalFit:
    """Least-squares fit of ``log P(tau > t) ~ -beta t + log eta(x0)``."""

    beta: float
    beta_se: float
    log_eta0: float
    log_eta0_se: float
    t_grid: np.ndarray
    survival: np.ndarray
    n_paths: int
    n_survivors_last: int
    fit_mask: np.ndarray


def estimate_survival_rate(sys, start, t_grid, n_paths, seed, dt=None,
                           fit_from=None, n_boot=200, min_survivors=50):
    """Monte-Carlo estimate of the survival rate and log-intercept.

    ``start`` is a point or a sampler; the fit runs over the grid tail
    ``t >= fit_from`` (default: second half).  Bootstrap standard errors
    over trajectories.
    """
    n_paths = int(n_paths)
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    discrete = isinstance(sys, DiscreteSystem)
    if discrete:
        dt = 1.0
    elif dt is None or dt <= 0:
        raise ValueError("SDE survival estimation needs a positive dt")
    steps = np.round(t_grid / dt).astype(int)
    res = run_ensemble(sys, start, int(steps.max()), dt, seed, n_total=n_paths,
                       purpose="survival")
    tau = res.tau
    alive_counts = np.array(
        [int(np.sum((tau < 0) | (tau > s))) for s in steps], dtype=float
    )
    if alive_counts[-1] < min_survivors:
        raise InsufficientSurvivors(
            f"only {int(alive_counts[-1])} survivors at t={t_grid[-1]}",
            survivors=int(alive_counts[-1]),
            required=min_survivors,
        )
    survival = alive_counts / n_paths
    if fit_from is None:
        fit_mask = np.arange(len(t_grid)) >= len(t_grid) // 2
    else:
        fit_mask = t_grid >= fit_from
    if fit_mask.sum() < 2:
        raise ValueError("fit window must contain at least two grid times")

    def fit(curve):
        good = fit_mask & (curve > 0)
        if good.sum() < 2:
            return np.nan, np.nan
        a = np.stack([-t_grid[good], np.ones(int(good.sum()))], axis=1)
        coef, *_ = np.linalg.lstsq(a, np.log(curve[good]), rcond=None)
        return coef[0], coef[1]

    beta, log_eta0 = fit(survival)
    rng = substream(seed, "survival-boot")
    boots = np.empty((n_boot, 2))
    for b in range(n_boot):
        pick = rng.integers(0, n_paths, size=n_paths)
        tb = tau[pick]
        curve = np.array(
            [np.sum((tb < 0) | (tb > s)) for s in steps], dtype=float
        ) / n_paths
        boots[b] = fit(curve)
    boots = boots[np.isfinite(boots).all(axis=1)]
    beta_se = float(np.std(boots[:, 0], ddof=1)) if len(boots) > 1 else np.nan
    eta_se = float(np.std(boots[:, 1], ddof=1)) if len(boots) > 1 else np.nan
    return SurvivalFit(
        beta=float(beta),
        beta_se=beta_se,
        log_eta0=float(log_eta0),
        log_eta0_se=eta_se,
        t_grid=t_grid,
        survival=survival,
        n_paths=n_paths,
        n_survivors_last=int(alive_counts[-1]),
        fit_mask=fit_mask,
    )


# ---------------------------------------------------------------------------
# total-variation decay diagnostic


@dataclass
class TVDecay:
    steps: np.ndarray
    times: np.ndarray
    tv: np.ndarray
    alpha: float  # fitted decay rate per unit time (nan if not fittable)
    c0: float  # fitted prefactor


def tv_decay_diagnostic(pmat, sd, start, step_grid):
    """Total-variation distance of the conditioned evolution to ``mu``.

    ``start`` is a retained cell index or a probability vector; the
    conditioned distribution after ``n`` applications is
    ``p P^n / |p P^n|`` and the table reports its TV distance to ``mu``
    together with an exponential fit (the decay-rate diagnostic)."""
    step_grid = np.asarray(sorted(int(s) for s in step_grid), dtype=int)
    if step_grid.min() < 0:
        raise ValueError("step grid must be nonnegative")
    n = pmat.n
    if np.isscalar(start) or np.asarray(start).ndim == 0:
        p = np.zeros(n)
        p[int(start)] = 1.0
    else:
        p = np.asarray(start, dtype=float).copy()
        if p.shape != (n,) or p.min() < 0 or p.sum() <= 0:
            raise ValueError("start must be a cell index or a probability vector")
        p /= p.sum()
    tvs = np.empty(len(step_grid))
    want = {int(s): i for i, s in enumerate(step_grid)}
    if 0 in want:
        tvs[want[0]] = 0.5 * np.abs(p - sd.mu).sum()
    for step in range(1, step_grid.max() + 1):
        p = p @ pmat.matrix
        total = p.sum()
        if total <= 0:
            # conditioned law undefined once all mass is absorbed
            for s, i in want.items():
                if s >= step:
                    tvs[i] = np.nan
            break
        if step in want:
            cond = p / total
            tvs[want[step]] = 0.5 * np.abs(cond - sd.mu).sum()
    times = step_grid * pmat.delta_op
    good = np.isfinite(tvs) & (tvs > 0) & (step_grid > 0)
    if good.sum() >= 2:
        a = np.stack([-times[good], np.ones(int(good.sum()))], axis=1)
        coef, *_ = np.linalg.lstsq(a, np.log(tvs[good]), rcond=None)
        alpha, c0 = float(coef[0]), float(np.exp(coef[1]))
    else:
        alpha, c0 = np.nan, np.nan
    return TVDecay(steps=step_grid, times=times, tv=tvs, alpha=alpha, c0=c0)
