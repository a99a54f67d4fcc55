"""Conditioned Lyapunov spectra and their diagnostics.

Three mutually checking routes to the same numbers:

* QR: propagate a full frame with periodic reorthonormalization; the
  accumulated ``log |diag R|`` per column over time gives the exponents.
* Wedge norms: the thin-QR log-volume growth of a k-frame estimates the
  partial sum ``Lambda_1 + ... + Lambda_k``.
* Drift integrals: time averages of the volume-growth drift along
  drift-corrected (conditioned) paths, plus an h-transform correction
  for multiplicative noise.

Finite-time singular values are read off a running scaled factorization
``Phi = Q diag(exp(c)) Rtilde`` whose dynamic range lives in ``c``, with
an extended-precision SVD fallback when the range exceeds float.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import CocycleSample, doob_drift
from .ensemble import run_tangent_ensemble
from .errors import LeakageAbort, QlyapError, RankCollapseError
from .seeding import substream

__all__ = [
    "GrassmannPoint",
    "LyapunovReport",
    "OseledetsEstimate",
    "ScaledFactorization",
    "scaled_factorization",
    "haar_grassmann_sample",
    "qr_spectrum",
    "qr_spectrum_ensemble",
    "singular_value_ftle",
    "wedge_log_norm",
    "conditioned_ftle_distribution",
    "fk_psi",
    "fk_phi",
    "fk_lambda",
    "liouville_check",
    "oseledets_estimate",
    "singular_value_bracketing",
    "q_process_qr_run",
]


# ---------------------------------------------------------------------------
# Grassmannian sampling


@dataclass
class GrassmannPoint:
    """A k-plane in R^d represented by an orthonormal frame."""

    frame: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frame, dtype=float)
        if f.ndim != 2:
            raise ValueError("frame must be a (d, k) matrix")
        gram = f.T @ f
        if np.abs(gram - np.eye(f.shape[1])).max() > 1e-12:
            raise ValueError("frame columns are not orthonormal")
        self.frame = f

    @property
    def d(self):
        return self.frame.shape[0]

    @property
    def k(self):
        return self.frame.shape[1]

    def projection(self):
        return self.frame @ self.frame.T

    def same_plane(self, other, tol=1e-10):
        return np.abs(self.projection() - other.projection()).max() <= tol


def haar_grassmann_sample(d, k, seed, stream=("haar", 0)):
    """Rotation-invariant random k-plane: thin QR of a Gaussian matrix.

    The sign-fixed Q factor of a standard Gaussian ``(d, k)`` matrix is
    Haar on the Stiefel manifold; its span is the invariant measure on
    the Grassmannian.
    """
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    rng = substream(seed, *stream)
    g = rng.standard_normal((d, k))
    q, r = np.linalg.qr(g)
    s = np.sign(np.diag(r))
    s = np.where(s == 0.0, 1.0, s)
    return GrassmannPoint(frame=q * s)


# ---------------------------------------------------------------------------
# reports


@dataclass
class LyapunovReport:
    """Estimated exponents (sorted descending) with batch-means errors.

    ``column_rates`` keeps the raw per-frame-column rates in propagation
    order; they coincide with the sorted exponents once the frame has
    aligned, and their leading partial sums are exactly the wedge growth
    of the leading coordinate planes.
    """

    method: str
    exponents: np.ndarray
    stderr: np.ndarray
    horizon: float
    dt: float
    column_rates: np.ndarray = None
    n_paths: int = 1
    n_segments: int = 0
    meta: dict = None

    @property
    def partial_sums(self):
        return np.cumsum(self.exponents)

    def to_json_dict(self):
        return {
            "method": self.method,
            "exponents": self.exponents.tolist(),
            "stderr": self.stderr.tolist(),
            "partial_sums": self.partial_sums.tolist(),
            "horizon": self.horizon,
            "dt": self.dt,
            "column_rates": None
            if self.column_rates is None
            else self.column_rates.tolist(),
            "n_paths": self.n_paths,
            "n_segments": self.n_segments,
            "meta": self.meta or {},
        }


def qr_spectrum(cocycle, T=None, n_segments=10):
    """Exponents from one QR-propagated cocycle sample.

    ``Lambda_i = log_r_i / T`` per column, sorted descending; error bars
    are batch means over ``n_segments`` splits of ``[0, T]``.  Raises
    ``LeakageAbort`` if the underlying path was absorbed before ``T``
    (for conditioned paths absorption is a discretization artifact).
    """
    if cocycle.path is not None and cocycle.path.tau is not None:
        horizon_steps = cocycle.checkpoint_steps[-1] if T is None else int(round(T / cocycle.dt))
        if cocycle.path.tau <= horizon_steps:
            raise LeakageAbort(
                f"path absorbed at step {cocycle.path.tau}, before the horizon"
            )
    idx, t = cocycle._checkpoint_at(T)
    rates = cocycle.log_r[idx] / t
    order = np.argsort(rates)[::-1]
    n_segments = max(1, min(n_segments, idx))
    bounds = np.linspace(0, idx, n_segments + 1).astype(int)
    seg_rates = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        dt_seg = (cocycle.checkpoint_steps[b] - cocycle.checkpoint_steps[a]) * cocycle.dt
        seg_rates.append((cocycle.log_r[b] - cocycle.log_r[a]) / dt_seg)
    seg = np.asarray(seg_rates)[:, order]
    stderr = (
        seg.std(axis=0, ddof=1) / np.sqrt(n_segments)
        if n_segments > 1
        else np.full(cocycle.k, np.nan)
    )
    return LyapunovReport(
        method="qr",
        exponents=rates[order],
        stderr=stderr,
        horizon=t,
        dt=cocycle.dt,
        column_rates=rates,
        n_paths=1,
        n_segments=n_segments,
    )


def qr_spectrum_ensemble(result, burn_in_steps=0, method="qr"):
    """Exponents pooled over an ensemble of tangent runs.

    Uses per-path rates over ``(burn_in, T]`` (requires a snapshot at the
    burn-in step when nonzero), sorted per path; errors are the standard
    error across surviving paths.  Leaked paths are dropped; raises
    ``LeakageAbort`` when fewer than two paths survive.
    """
    alive = result.survived
    if burn_in_steps:
        if burn_in_steps not in result.snapshots:
            raise ValueError("no snapshot recorded at the burn-in step")
        base, base_alive = result.snapshots[burn_in_steps]
        alive = alive & base_alive
        log_r = result.log_r - base
    else:
        log_r = result.log_r
    n_alive = int(alive.sum())
    if n_alive < 2:
        raise LeakageAbort(f"only {n_alive} conditioned paths survived the horizon")
    span = (result.n_steps - burn_in_steps) * result.dt
    rates = np.sort(log_r[alive] / span, axis=1)[:, ::-1]
    mean = rates.mean(axis=0)
    stderr = rates.std(axis=0, ddof=1) / np.sqrt(n_alive)
    return LyapunovReport(
        method=method,
        exponents=mean,
        stderr=stderr,
        horizon=span,
        dt=result.dt,
        n_paths=n_alive,
        n_segments=n_alive,
        meta={"leak_fraction": result.leak_fraction},
    )


# ---------------------------------------------------------------------------
# scaled factorization: finite-time singular values


class ScaledFactorization:
    """Running factorization ``Phi = Q diag(exp(c)) Rtilde``.

    ``Rtilde`` is upper triangular with unit max-magnitude rows, so the
    full dynamic range of the product lives in ``c`` and the factors stay
    representable for arbitrarily long products.
    """

    def __init__(self, d, dt):
        self.d = int(d)
        self.dt = float(dt)
        self.q = np.eye(d)
        self.c = np.zeros(d)
        self.rtilde = np.eye(d)
        self.steps = 0

    @property
    def t(self):
        return self.steps * self.dt

    def consume(self, propagators, reorth_period=5):
        """Absorb a stream of per-step matrices into the factorization."""
        g = np.asarray(propagators, dtype=float)
        m = max(1, int(reorth_period))
        for start in range(0, len(g), m):
            stop = min(start + m, len(g))
            b = self.q
            for j in range(start, stop):
                b = g[j] @ b
            qn, re = np.linalg.qr(b)
            s = np.sign(np.diag(re))
            s = np.where(s == 0.0, 1.0, s)
            qn = qn * s
            re = re * s[:, None]
            self._absorb_triangular(re)
            self.q = qn
            self.steps += stop - start
        return self

    def _absorb_triangular(self, re):
        # T = re diag(exp(c)) rtilde, row-rescaled in log space
        with np.errstate(divide="ignore"):
            log_m = np.log(np.abs(re)) + self.c[None, :]
        a = np.max(np.where(np.isfinite(log_m), log_m, -np.inf), axis=1)
        if np.any(~np.isfinite(a)):
            raise RankCollapseError("factorization lost rank", step=self.steps)
        scaled = np.where(np.isfinite(log_m), np.sign(re) * np.exp(log_m - a[:, None]), 0.0)
        t = scaled @ self.rtilde
        row_max = np.abs(t).max(axis=1)
        if np.any(row_max == 0.0):
            raise RankCollapseError("factorization lost rank", step=self.steps)
        self.rtilde = t / row_max[:, None]
        self.c = a + np.log(row_max)

    # -- readouts ------------------------------------------------------
    def log_singular_values(self):
        """log of the singular values of the represented product, largest
        first; extended precision when the dynamic range exceeds float."""
        spread = float(self.c.max() - self.c.min())
        if spread < 25.0:
            center = self.c.mean()
            w = np.exp(self.c - center)[:, None] * self.rtilde
            sv = np.linalg.svd(w, compute_uv=False)
            return center + np.log(sv)
        return self._mp_svd(values_only=True)

    def right_singular_vectors(self):
        """Right singular vectors (columns, matching descending singular
        values); these estimate the eigenvectors of ``(Phi^T Phi)^(1/2t)``."""
        spread = float(self.c.max() - self.c.min())
        if spread < 25.0:
            center = self.c.mean()
            w = np.exp(self.c - center)[:, None] * self.rtilde
            _, _, vh = np.linalg.svd(w)
            return vh.T
        _, v = self._mp_svd(values_only=False)
        return v

    def _mp_svd(self, values_only):
        import mpmath as mp

        spread = float(self.c.max() - self.c.min())
        with mp.workdps(int(spread / math.log(10)) + 40):
            cmid = float(self.c.mean())
            a = mp.matrix(self.d, self.d)
            for i in range(self.d):
                scale = mp.e ** (mp.mpf(float(self.c[i])) - cmid)
                for j in range(self.d):
                    a[i, j] = scale * mp.mpf(float(self.rtilde[i, j]))
            if values_only:
                sv = mp.svd_r(a, compute_uv=False)
                logs = sorted((float(mp.log(sv[i])) for i in range(self.d)), reverse=True)
                return cmid + np.asarray(logs)
            u, sv, vt = mp.svd_r(a)
            order = sorted(range(self.d), key=lambda i: -sv[i])
            v = np.array(
                [[float(vt[order[j], i]) for j in range(self.d)] for i in range(self.d)]
            )
            logs = np.asarray([cmid + float(mp.log(sv[i])) for i in order])
            return logs, v

    def log_abs_det(self):
        with np.errstate(divide="ignore"):
            return float(self.c.sum() + np.log(np.abs(np.diag(self.rtilde))).sum())


def scaled_factorization(propagators, dt, reorth_period=5):
    g = np.asarray(propagators, dtype=float)
    fac = ScaledFactorization(g.shape[1], dt)
    fac.consume(g, reorth_period=reorth_period)
    return fac


def _propagator_stream(source):
    if isinstance(source, CocycleSample):
        if source.propagators is None:
            raise ValueError(
                "cocycle sample was built without keep_propagators=True"
            )
        return source.propagators, source.dt
    raise TypeError("expected a CocycleSample; pass raw matrices to scaled_factorization")


def singular_value_ftle(source, i, T=None, reorth_period=5):
    """Finite-time exponent of the i-th singular value (i is 1-based).

    ``source`` is a :class:`ScaledFactorization` or a propagator-carrying
    :class:`CocycleSample`; the singular values are computed from the
    scaled factorization, never from the raw product.
    """
    if isinstance(source, ScaledFactorization):
        fac = source
    else:
        g, dt = _propagator_stream(source)
        if T is not None:
            g = g[: int(round(T / dt))]
        fac = scaled_factorization(g, dt, reorth_period=reorth_period)
    if fac.t <= 0:
        raise ValueError("factorization spans no time")
    d = fac.d
    i = int(i)
    if not 1 <= i <= d:
        raise IndexError(f"singular value index {i} out of range 1..{d}")
    return float(fac.log_singular_values()[i - 1] / fac.t)


# ---------------------------------------------------------------------------
# wedge norms


def wedge_log_norm(source, frame, t=None, reorth_period=5):
    """``log || wedge^k Phi_t v ||`` for the k-plane spanned by ``frame``.

    Propagates ``B = Phi frame`` with periodic thin QR; the log norm is
    the accumulated ``sum log |diag R|`` (equal to half the log Gram
    determinant of the propagated frame).  Raises ``RankCollapseError``
    with the step index if the frame degenerates.
    """
    if isinstance(frame, GrassmannPoint):
        b = frame.frame.copy()
    else:
        b = np.asarray(frame, dtype=float).copy()
        if b.ndim == 1:
            b = b[:, None]
    if isinstance(source, CocycleSample):
        g, dt = _propagator_stream(source)
    else:
        g = np.asarray(source, dtype=float)
        dt = 1.0
    steps = len(g) if t is None else int(round(t / (source.dt if isinstance(source, CocycleSample) else 1.0)))
    if steps > len(g):
        raise ValueError("requested horizon exceeds the stored propagators")
    m = max(1, int(reorth_period))
    total = 0.0
    for start in range(0, steps, m):
        stop = min(start + m, steps)
        for j in range(start, stop):
            b = g[j] @ b
        q, r = np.linalg.qr(b)
        diag = np.abs(np.diag(r))
        if np.any(diag == 0.0):
            raise RankCollapseError("frame volume collapsed", step=stop)
        total += float(np.log(diag).sum())
        b = q
    return total


def singular_value_bracketing(propagators, k, reorth_period=5):
    """Both sides of the basis-frame bracketing of ``||wedge^k Phi||``.

    Returns a dict with the log wedge norms of all coordinate k-frames,
    the exact ``log ||wedge^k Phi||`` (sum of the top-k log singular
    values), and the binomial slack ``log C(d, k)``; the invariant is

        max_I  <=  log||wedge^k|| <= log C(d,k) + max_I.
    """
    g = np.asarray(propagators, dtype=float)
    d = g.shape[1]
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    eye = np.eye(d)
    basis_logs = {}
    for combo in itertools.combinations(range(d), k):
        basis_logs[combo] = wedge_log_norm(g, eye[:, list(combo)],
                                           reorth_period=reorth_period)
    fac = scaled_factorization(g, 1.0, reorth_period=reorth_period)
    top = float(fac.log_singular_values()[:k].sum())
    return {
        "basis": basis_logs,
        "max_basis": max(basis_logs.values()),
        "log_wedge_norm": top,
        "log_binom": math.log(math.comb(d, k)),
    }


def liouville_check(cocycle, T=None):
    """Compare the QR route with the accumulated log-determinant.

    Returns ``(sum of all column rates, logdet rate, discrepancy)``; the
    two accumulate the same per-step matrices through different
    reductions and must agree to rounding.  Requires a full-width frame.
    """
    if cocycle.k != cocycle.dim:
        raise ValueError("liouville check needs a full-width frame (k = d)")
    idx, t = cocycle._checkpoint_at(T)
    qr_sum = float(cocycle.log_r[idx].sum() / t)
    det_rate = float(cocycle.logdet[idx] / t)
    return qr_sum, det_rate, abs(qr_sum - det_rate)


# ---------------------------------------------------------------------------
# conditioned FTLE distributions


@dataclass
class FtleDistribution:
    t_grid: np.ndarray
    n_survivors: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    exceedance: np.ndarray  # nan when no reference was supplied
    epsilon: float
    lambda_ref: float
    samples: dict  # t -> per-survivor FTLE arrays

    def to_rows(self):
        return [
            (t, int(n), m, v, e)
            for t, n, m, v, e in zip(
                self.t_grid, self.n_survivors, self.mean, self.var, self.exceedance
            )
        ]


def conditioned_ftle_distribution(sys, start, t_grid, n, k, seed, dt,
                                  frame0="haar", lambda_ref=None, epsilon=None,
                                  min_survivors=50, keep_samples=True):
    """Per-horizon law of the k-volume finite-time exponents of survivors.

    Launches ``n`` unconditioned paths carrying k-frames, and at each
    grid time reports mean and variance of ``(1/t) log ||wedge^k Phi_t
    v||`` over the paths still alive, plus the exceedance frequency
    against ``(lambda_ref, epsilon)`` when supplied.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    steps = np.round(t_grid / dt).astype(int)
    if np.any(steps <= 0):
        raise ValueError("grid times must be positive")
    res = run_tangent_ensemble(
        sys, start, int(steps.max()), dt, seed, n_total=int(n),
        purpose="ftle", k=int(k), reorth_period=1, frame0=frame0,
        snapshot_steps=steps.tolist(),
    )
    n_surv = np.empty(len(steps), dtype=int)
    mean = np.empty(len(steps))
    var = np.empty(len(steps))
    exceed = np.full(len(steps), np.nan)
    samples = {}
    for i, s in enumerate(steps):
        log_r, alive = res.snapshots[int(s)]
        n_surv[i] = int(alive.sum())
        if n_surv[i] < min_survivors:
            from .errors import InsufficientSurvivors

            raise InsufficientSurvivors(
                f"{n_surv[i]} survivors at t={t_grid[i]} (< {min_survivors})",
                survivors=n_surv[i],
                required=min_survivors,
            )
        ftle = log_r[alive].sum(axis=1) / (s * dt)
        mean[i] = float(ftle.mean())
        var[i] = float(ftle.var(ddof=1)) if n_surv[i] > 1 else 0.0
        if lambda_ref is not None and epsilon is not None:
            exceed[i] = float(np.mean(np.abs(ftle - lambda_ref) > epsilon))
        if keep_samples:
            samples[float(t_grid[i])] = ftle
    return FtleDistribution(
        t_grid=t_grid,
        n_survivors=n_surv,
        mean=mean,
        var=var,
        exceedance=exceed,
        epsilon=np.nan if epsilon is None else float(epsilon),
        lambda_ref=np.nan if lambda_ref is None else float(lambda_ref),
        samples=samples,
    )


# ---------------------------------------------------------------------------
# volume-growth drift (Furstenberg--Khasminskii route)


def _as_batch(x, frame):
    x = np.asarray(x, dtype=float)
    f = np.asarray(frame, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        f = f[None, :, :] if f.ndim == 2 else f
    elif f.ndim == 2:
        f = np.broadcast_to(f, (len(x),) + f.shape)
    return x, f, single


def fk_phi(sys, x, frame, i):
    """Noise-direction volume sensitivity ``tr(DV_i(x) P_s)``.

    Identically zero for additive systems.  ``i`` is the 0-based noise
    channel; ``frame`` must have orthonormal columns.
    """
    x, f, single = _as_batch(x, frame)
    if not 0 <= int(i) < sys.noise_dim:
        raise IndexError("noise channel out of range")
    if sys.additive:
        out = np.zeros(len(x))
    else:
        k = sys.diffusion_jacobian_at(x)[:, int(i)]
        out = np.einsum("nij,njk,nik->n", k, f, f)
    return float(out[0]) if single else out


def fk_psi(sys, x, frame, formula="auto", fd_step=1e-5):
    """Drift of ``log || wedge^k Phi ||`` at ``(x, span(frame))``.

    Additive systems: exactly ``tr(DV0(x) P_s)``.  Multiplicative
    systems: the default ``"derived"`` formula is the Ito-corrected
    Stratonovich drift

        tr(DV0 P) + sum_i 1/2 [ tr(D[(DVi)Vi] P) - tr((DVi P)^2)
                                + tr(DVi^T (I - P) DVi P) ],

    where ``D[(DVi)Vi]`` is the Jacobian of the Ito-correction field
    (evaluated by directional finite differences).  ``"as-printed"``
    evaluates the same trace terms without the 1/2 factors, matching the
    source formula as literally as its dimensions allow; a one-step
    oracle (see tests) discriminates the two.
    """
    x, f, single = _as_batch(x, frame)
    j = sys.drift_jacobian(x)
    out = np.einsum("nij,njk,nik->n", j, f, f)
    if not sys.additive:
        if formula == "auto":
            formula = "derived"
        if formula not in ("derived", "as-printed"):
            raise ValueError("formula must be 'auto', 'derived' or 'as-printed'")
        half = 0.5 if formula == "derived" else 1.0
        p = np.einsum("nik,njk->nij", f, f)
        eye = np.broadcast_to(np.eye(x.shape[1]), p.shape)
        kall = sys.diffusion_jacobian_at(x)
        b = sys.diffusion_at(x)
        for i in range(sys.noise_dim):
            k = kall[:, i]
            vi = b[:, :, i]
            # directional derivative of the correction field (DVi)Vi
            h = fd_step / (1.0 + np.linalg.norm(vi, axis=1, keepdims=True))
            kp = sys.diffusion_jacobian_at(x + h * vi)[:, i]
            km = sys.diffusion_jacobian_at(x - h * vi)[:, i]
            # D[(DVi)Vi] = grad_{Vi}(DVi) + (DVi)^2, assembled as
            # (K(x+hVi) - K(x-hVi)) / (2h) + K^2
            grad_k = (kp - km) / (2.0 * h[:, :1, None])
            corr = grad_k + np.einsum("nij,njl->nil", k, k)
            t1 = np.einsum("nij,nji->n", corr, p)
            kp_mat = np.einsum("nij,njl->nil", k, p)
            t2 = np.einsum("nij,nji->n", kp_mat, kp_mat)
            t3 = np.einsum("nba,nbc,ncd,nda->n", k, eye - p, k, p)
            out = out + half * (t1 - t2 + t3)
    return float(out[0]) if single else out


@dataclass
class FkEstimate:
    value: float
    stderr: float
    n_paths: int
    leak_fraction: float
    excluded_fraction: float
    horizon: float
    k: int

    def report(self, dt):
        return LyapunovReport(
            method="fk",
            exponents=np.array([self.value]),
            stderr=np.array([self.stderr]),
            horizon=self.horizon,
            dt=dt,
            n_paths=self.n_paths,
            n_segments=self.n_paths,
            meta={
                "k": self.k,
                "leak_fraction": self.leak_fraction,
                "excluded_fraction": self.excluded_fraction,
            },
        )


def fk_lambda(sys, sd, k, T, dt, seed, burn_in=None, n_paths=16,
              formula="auto", eta_floor_ratio=1e-12, start=None):
    """Partial sum ``Lambda_1 + ... + Lambda_k`` as a drift time-average.

    Runs drift-corrected (conditioned) paths started from the estimated
    quasi-ergodic law, carries a k-frame with the *original* cocycle, and
    averages ``psi^k`` plus, for multiplicative noise, the h-transform
    correction ``sum_i phi_i^k (Vi . grad log eta)`` after burn-in.
    Samples falling in eta-floor regions are excluded and their fraction
    reported; leaked paths are dropped (``LeakageAbort`` if more than
    half leak).
    """
    field = sd.eta_field(floor_ratio=eta_floor_ratio)
    qsys = doob_drift(sys, field)
    if start is None:
        start = sd.nu_sampler()
    if burn_in is None:
        burn_in = min(0.1 * T, 50.0)
    n_steps = int(round(T / dt))
    burn_steps = int(round(burn_in / dt))

    floor = field.floor

    def integrand(x, frames):
        vals = fk_psi(sys, x, frames, formula=formula)
        if not sys.additive:
            shift = qsys.shift(x)  # (N, m) with entries Vi . grad log eta
            for i in range(sys.noise_dim):
                vals = vals + fk_phi(sys, x, frames, i) * shift[:, i]
        valid = field.value(x) > floor
        return vals, valid

    res = run_tangent_ensemble(
        qsys, start, n_steps, dt, seed, n_total=int(n_paths), purpose="fk",
        k=int(k), reorth_period=1, frame0="haar", jac_sys=sys,
        fk_fn=integrand, burn_in_steps=burn_steps,
    )
    alive = res.survived & np.isfinite(res.fk_mean)
    n_alive = int(alive.sum())
    if n_alive < max(2, int(n_paths) // 2):
        raise LeakageAbort(
            f"only {n_alive}/{n_paths} conditioned paths finished the horizon"
        )
    vals = res.fk_mean[alive]
    return FkEstimate(
        value=float(vals.mean()),
        stderr=float(vals.std(ddof=1) / np.sqrt(n_alive)),
        n_paths=n_alive,
        leak_fraction=res.leak_fraction,
        excluded_fraction=float(res.fk_excluded[alive].mean()),
        horizon=(n_steps - burn_steps) * dt,
        k=int(k),
    )


def q_process_qr_run(sys, sd, T, dt, seed, k=None, burn_in=None, n_paths=16,
                     reorth_period=1, eta_floor_ratio=1e-12, start=None,
                     track_logdet=False):
    """Tangent ensemble along conditioned paths (the QR route).

    Integrates the drift-corrected SDE, propagates the original cocycle
    along it, and returns the raw :class:`TangentEnsembleResult`; combine
    with :func:`qr_spectrum_ensemble` for a report.
    """
    field = sd.eta_field(floor_ratio=eta_floor_ratio)
    qsys = doob_drift(sys, field)
    if start is None:
        start = sd.nu_sampler()
    if burn_in is None:
        burn_in = min(0.1 * T, 50.0)
    n_steps = int(round(T / dt))
    m = max(1, int(reorth_period))
    burn_steps = (int(round(burn_in / dt)) // m) * m
    return run_tangent_ensemble(
        qsys, start, n_steps, dt, seed, n_total=int(n_paths), purpose="q-qr",
        k=k, reorth_period=m, frame0="haar", jac_sys=sys,
        snapshot_steps=(burn_steps,) if burn_steps else (),
        track_logdet=track_logdet,
    ), burn_steps


# ---------------------------------------------------------------------------
# Oseledets structure


@dataclass
class OseledetsEstimate:
    """Finite-time symmetric-limit eigenstructure.

    ``exponents``/``multiplicities`` describe the clustered spectrum at
    the largest horizon; ``subspaces[i]`` spans the estimated slow flag
    member ``U_{i+1}`` (all clusters from ``i+1`` on), with ``U_1`` the
    whole space.  ``psi_matrix`` is the symmetric positive estimate
    ``(Phi^T Phi)^(1/2t)`` at the final time.
    """

    t_grid: np.ndarray
    rates: list  # per grid time, descending log singular value rates
    vectors: list  # per grid time, right singular vector matrices
    exponents: np.ndarray
    multiplicities: np.ndarray
    subspaces: list
    psi_matrix: np.ndarray
    gap_threshold: float
    ambiguous: bool

    @property
    def spectrum(self):
        return list(zip(self.exponents.tolist(), self.multiplicities.tolist()))


def _cluster_rates(rates, gap):
    clusters = [[0]]
    for i in range(1, len(rates)):
        if rates[i - 1] - rates[i] < gap:
            clusters[-1].append(i)
        else:
            clusters.append([i])
    ambiguous = any(
        0.5 * gap <= rates[i - 1] - rates[i] < 2.0 * gap for i in range(1, len(rates))
    )
    return clusters, ambiguous


def oseledets_estimate(propagators, dt, t_grid, gap_threshold=0.05,
                       reorth_period=5):
    """Track ``(Phi_t^T Phi_t)^(1/2t)`` along a time grid.

    At each grid time the scaled factorization yields the log singular
    value rates and right singular vectors; rates at the final time are
    clustered into distinct exponents with the given per-unit-time gap,
    and the slow subspaces of the flag are reported.  ``ambiguous`` is
    set when some gap is within a factor two of the threshold.
    """
    g = np.asarray(propagators, dtype=float)
    d = g.shape[1]
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    steps = np.round(t_grid / dt).astype(int)
    if np.any(np.diff(steps) <= 0) or steps[0] <= 0:
        raise ValueError("t grid must be strictly increasing and positive")
    if steps[-1] > len(g):
        raise ValueError("t grid extends past the propagator stream")
    fac = ScaledFactorization(d, dt)
    rates_all = []
    vecs_all = []
    prev = 0
    for s in steps:
        fac.consume(g[prev:s], reorth_period=reorth_period)
        prev = s
        logs = fac.log_singular_values()
        rates_all.append(logs / fac.t)
        vecs_all.append(fac.right_singular_vectors())
    final_rates = rates_all[-1]
    v = vecs_all[-1]
    clusters, ambiguous = _cluster_rates(final_rates, gap_threshold)
    exponents = np.array([final_rates[c].mean() for c in clusters])
    mult = np.array([len(c) for c in clusters], dtype=int)
    subspaces = []
    for ci in range(len(clusters)):
        start_col = clusters[ci][0]
        subspaces.append(v[:, start_col:].copy())
    psi = (v * np.exp(final_rates)[None, :]) @ v.T
    psi = 0.5 * (psi + psi.T)
    return OseledetsEstimate(
        t_grid=t_grid,
        rates=rates_all,
        vectors=vecs_all,
        exponents=exponents,
        multiplicities=mult,
        subspaces=subspaces,
        psi_matrix=psi,
        gap_threshold=float(gap_threshold),
        ambiguous=ambiguous,
    )
