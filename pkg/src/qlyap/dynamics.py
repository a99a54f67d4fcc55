"""Absorbed random dynamical systems and their tangent cocycles.

Two system classes are supported: discrete-time iterated random maps and
Stratonovich SDEs ``dX = V0(X) dt + sum_i Vi(X) o dW_i``.  Both live on a
bounded domain; a trajectory is absorbed (killed) at the first grid time
its state leaves the domain.  The linearization is propagated as the
exact Jacobian of the numerical one-step map, so base path and tangent
cocycle are consistent to machine precision and the cocycle property
holds along every sampled path.

All field callables follow the batched convention: states are ``(N, d)``
arrays, drifts return ``(N, d)``, Jacobians ``(N, d, d)``, diffusions
``(N, d, m)`` and diffusion Jacobians ``(N, m, d, d)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import RankCollapseError
from .seeding import substream

__all__ = [
    "Domain",
    "box_domain",
    "unbounded_domain",
    "DiscreteSystem",
    "SdeSystem",
    "AbsorbedPath",
    "CocycleSample",
    "sample_discrete_path",
    "integrate_sde",
    "integrate_tangent",
    "tangent_propagators",
    "cocycle_from_propagators",
    "doob_drift",
    "check_jacobians",
]


# ---------------------------------------------------------------------------
# domains and systems


@dataclass(frozen=True)
class Domain:
    """Open subset of R^d with a membership test and a bounding box.

    ``membership`` receives ``(N, d)`` points and returns a boolean
    ``(N,)`` mask.  The bounding box must contain every member point; it
    is what grids and rejection samplers work from.
    """

    dim: int
    membership: callable
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        mask = np.asarray(self.membership(pts), dtype=bool)
        return bool(mask[0]) if single else mask

    def sample_uniform(self, rng, n, max_tries=200):
        """Rejection-sample ``n`` points uniformly from the domain."""
        out = np.empty((n, self.dim))
        need = n
        filled = 0
        for _ in range(max_tries):
            cand = rng.uniform(self.lo, self.hi, size=(need, self.dim))
            ok = self.contains(cand)
            take = cand[ok]
            k = min(len(take), need)
            out[filled : filled + k] = take[:k]
            filled += k
            need = n - filled
            if need == 0:
                return out
        raise RuntimeError("rejection sampling exhausted; domain too thin in its box")


def box_domain(lo, hi):
    """Axis-aligned half-open box [lo, hi).

    Half-open to match the grid-cell convention; the difference from the
    open box is a null set of the dynamics.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(lo >= hi):
        raise ValueError("need lo < hi componentwise")

    def member(x):
        return np.all((x >= lo) & (x < hi), axis=1)

    return Domain(dim=len(lo), membership=member, lo=lo, hi=hi)


def unbounded_domain(dim, halfwidth=1e6):
    """Domain whose membership is always true (no absorption).

    The nominal bounding box is only used by samplers and grids, which
    should not be pointed at this domain in earnest.
    """

    def member(x):
        return np.ones(len(x), dtype=bool)

    return Domain(
        dim=dim,
        membership=member,
        lo=np.full(dim, -halfwidth),
        hi=np.full(dim, halfwidth),
    )


@dataclass(frozen=True)
class DiscreteSystem:
    """Iterated random map ``x_{n+1} = f(w_n, x_n)`` with absorption.

    ``sample_noise(rng, n)`` draws ``n`` letters from the noise alphabet;
    ``step(w, x)`` applies the map, ``jacobian(w, x)`` its exact spatial
    derivative (checked against finite differences by
    :func:`check_jacobians`).
    """

    domain: Domain
    sample_noise: callable
    step: callable
    jacobian: callable

    @property
    def dim(self):
        return self.domain.dim


@dataclass(frozen=True)
class SdeSystem:
    """Stratonovich SDE ``dX = V0 dt + sum_i Vi o dW_i`` on a domain.

    For additive noise pass ``constant_diffusion`` (a ``(d, m)`` matrix)
    and leave the diffusion callables unset; the per-column Jacobians are
    then identically zero.
    """

    domain: Domain
    drift: callable
    drift_jacobian: callable
    noise_dim: int
    diffusion: callable = None
    diffusion_jacobian: callable = None
    constant_diffusion: np.ndarray = None

    def __post_init__(self):
        if self.constant_diffusion is not None:
            c = np.atleast_2d(np.asarray(self.constant_diffusion, dtype=float))
            if c.shape != (self.dim, self.noise_dim):
                raise ValueError(
                    f"constant diffusion must be ({self.dim}, {self.noise_dim})"
                )
            object.__setattr__(self, "constant_diffusion", c)
        elif self.diffusion is None:
            raise ValueError("need diffusion callable or constant_diffusion")

    @property
    def dim(self):
        return self.domain.dim

    @property
    def additive(self):
        return self.constant_diffusion is not None

    def diffusion_at(self, x):
        if self.additive:
            return np.broadcast_to(
                self.constant_diffusion, (len(x), self.dim, self.noise_dim)
            )
        return self.diffusion(x)

    def diffusion_jacobian_at(self, x):
        if self.additive:
            return np.zeros((len(x), self.noise_dim, self.dim, self.dim))
        return self.diffusion_jacobian(x)


@dataclass(frozen=True)
class QDriftSystem(SdeSystem):
    """SDE with the Girsanov drift correction of an h-transform.

    ``base`` is the original system; ``shift(x)`` returns the drift of
    the driving noise under the conditioned measure, i.e. the ``(N, m)``
    array with entries ``Vi(x) . grad log eta(x)``.  The diffusion fields
    are those of ``base``, unchanged.
    """

    base: SdeSystem = None
    shift: callable = None


# ---------------------------------------------------------------------------
# paths


@dataclass
class AbsorbedPath:
    """A sampled trajectory together with the noise that produced it.

    ``states`` holds ``x_0`` and every recorded step; if the path was
    absorbed, the last stored state is the first one outside the domain
    and ``tau`` is its step index.  ``increments`` are the Brownian
    increments (SDE) or noise letters (map) consumed, kept so the tangent
    cocycle can be propagated with exactly the same noise.
    """

    dt: float
    states: np.ndarray
    tau: int  # None if the path survived the requested horizon
    increments: np.ndarray
    seed_root: int = None
    stream: tuple = ()
    kind: str = "sde"

    @property
    def n_steps(self):
        return len(self.states) - 1

    @property
    def times(self):
        return np.arange(len(self.states)) * self.dt

    @property
    def survived(self):
        return self.tau is None

    @property
    def alive_steps(self):
        """Number of steps over which the tangent flow is defined."""
        return self.n_steps if self.tau is None else self.tau


def sample_discrete_path(sys, x0, n, seed, stream=("path", 0)):
    """Iterate a random map for ``n`` steps from ``x0``, stopping at
    absorption.  Reproducible from ``(seed, stream)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not sys.domain.contains(x0):
        raise ValueError("x0 is outside the domain")
    rng = substream(seed, *stream)
    draws = sys.sample_noise(rng, n)
    states = np.empty((n + 1, sys.dim))
    states[0] = x0
    tau = None
    used = 0
    x = x0[None, :]
    for j in range(n):
        w = draws[j : j + 1]
        x = np.asarray(sys.step(w, x), dtype=float)
        states[j + 1] = x[0]
        used = j + 1
        if not sys.domain.contains(x[0]):
            tau = j + 1
            break
    return AbsorbedPath(
        dt=1.0,
        states=states[: used + 1].copy(),
        tau=tau,
        increments=draws[:used].copy(),
        seed_root=seed,
        stream=tuple(stream),
        kind="map",
    )


def heun_step(sys, x, dw, dt):
    """One Stratonovich--Heun step for a batch of states.

    Returns ``(x_new, x_pred)``; the predictor is needed by the exact
    tangent propagator.
    """
    a0 = sys.drift(x)
    b0 = sys.diffusion_at(x)
    noise0 = np.einsum("ndm,nm->nd", b0, dw)
    xp = x + a0 * dt + noise0
    a1 = sys.drift(xp)
    if sys.additive:
        x_new = x + 0.5 * dt * (a0 + a1) + noise0
    else:
        b1 = sys.diffusion_at(xp)
        x_new = x + 0.5 * dt * (a0 + a1) + 0.5 * np.einsum("ndm,nm->nd", b0 + b1, dw)
    return x_new, xp


def integrate_sde(sys, x0, T, dt, seed, stream=("path", 0)):
    """Integrate the SDE from ``x0`` over horizon ``T`` with step ``dt``.

    Stratonovich--Heun predictor-corrector; absorption is declared at the
    first grid time whose state exits the domain (no boundary-crossing
    interpolation) and the path is truncated there.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not sys.domain.contains(x0):
        raise ValueError("x0 is outside the domain")
    n = int(round(T / dt))
    rng = substream(seed, *stream)
    dw = rng.standard_normal((n, sys.noise_dim)) * np.sqrt(dt)
    states = np.empty((n + 1, sys.dim))
    states[0] = x0
    x = x0[None, :]
    tau = None
    used = 0
    for j in range(n):
        x, _ = heun_step(sys, x, dw[j : j + 1], dt)
        states[j + 1] = x[0]
        used = j + 1
        if not sys.domain.contains(x[0]):
            tau = j + 1
            break
    return AbsorbedPath(
        dt=dt,
        states=states[: used + 1].copy(),
        tau=tau,
        increments=dw[:used].copy(),
        seed_root=seed,
        stream=tuple(stream),
        kind="sde",
    )


# ---------------------------------------------------------------------------
# tangent cocycle


def _eye_like(n, d):
    return np.broadcast_to(np.eye(d), (n, d, d))


def sde_step_propagators(sys, x, dw, dt):
    """Exact Jacobians of the Heun one-step map, batched over rows of x.

    With ``J = DV0``, ``K_i = DV_i`` evaluated at the current state and at
    the Euler predictor, the Jacobian of the step is

        P = I + dt J0 + sum_i dW_i K0_i
        G = I + dt/2 (J0 + J1 P) + 1/2 sum_i dW_i (K0_i + K1_i P).
    """
    n, d = x.shape
    j0 = sys.drift_jacobian(x)
    eye = _eye_like(n, d)
    if sys.additive:
        a0 = sys.drift(x)
        xp = x + a0 * dt + np.einsum("ndm,nm->nd", sys.diffusion_at(x), dw)
        j1 = sys.drift_jacobian(xp)
        p = eye + dt * j0
        return eye + 0.5 * dt * (j0 + np.einsum("nij,njk->nik", j1, p))
    k0 = sys.diffusion_jacobian_at(x)
    kw0 = np.einsum("nm,nmij->nij", dw, k0)
    a0 = sys.drift(x)
    b0 = sys.diffusion_at(x)
    xp = x + a0 * dt + np.einsum("ndm,nm->nd", b0, dw)
    j1 = sys.drift_jacobian(xp)
    k1 = sys.diffusion_jacobian_at(xp)
    kw1 = np.einsum("nm,nmij->nij", dw, k1)
    p = eye + dt * j0 + kw0
    return (
        eye
        + 0.5 * dt * (j0 + np.einsum("nij,njk->nik", j1, p))
        + 0.5 * (kw0 + np.einsum("nij,njk->nik", kw1, p))
    )


def tangent_propagators(sys, path, steps=None):
    """Per-step tangent propagator matrices ``G_j`` along a stored path.

    The propagators are the exact Jacobians of the numerical one-step
    map, evaluated with the same noise increments the path consumed, so
    ``Phi_n = G_{n-1} ... G_0`` is the cocycle of the sampled dynamics.
    Vectorized over time.
    """
    steps = path.alive_steps if steps is None else int(steps)
    if steps > path.alive_steps:
        raise ValueError(
            f"window of {steps} steps exceeds absorption time {path.alive_steps}"
        )
    x = path.states[:steps]
    if path.kind == "map":
        return np.asarray(sys.jacobian(path.increments[:steps], x), dtype=float)
    return sde_step_propagators(sys, x, path.increments[:steps], path.dt)


def cocycle_propagators_along(jac_sys, path, shift=None, steps=None, chunk=500_000):
    """Propagators of ``jac_sys``'s cocycle along a path of another system.

    Used to carry the original tangent flow along drift-corrected
    (conditioned) paths: the corrector stage is evaluated at the realized
    next state, and ``shift(x)``, when given, converts the recorded
    conditioned noise back to the driving noise of the original fields
    (only relevant for multiplicative noise).  Vectorized over time in
    chunks.
    """
    from .ensemble import variational_propagators

    steps = path.alive_steps if steps is None else int(steps)
    if steps > path.alive_steps:
        raise ValueError(
            f"window of {steps} steps exceeds absorption time {path.alive_steps}"
        )
    out = np.empty((steps, jac_sys.dim, jac_sys.dim))
    for start in range(0, steps, chunk):
        stop = min(start + chunk, steps)
        x_now = path.states[start:stop]
        x_next = path.states[start + 1 : stop + 1]
        dw = path.increments[start:stop]
        if shift is not None and not jac_sys.additive:
            dw = dw + shift(x_now) * path.dt
        out[start:stop] = variational_propagators(jac_sys, x_now, x_next, dw, path.dt)
    return out


@dataclass
class CocycleSample:
    """QR-factored tangent cocycle along one path.

    ``log_r`` holds the cumulative ``log |diag R|`` per frame column at
    each reorthonormalization checkpoint (row 0 is all zeros at time 0);
    ``logdet`` the cumulative ``log |det G|`` at the same checkpoints.
    ``frame`` is the current orthonormal frame.
    """

    path: AbsorbedPath
    k: int
    reorth_period: int
    checkpoint_steps: np.ndarray  # (n_checkpoints,) step indices
    log_r: np.ndarray  # (n_checkpoints, k)
    logdet: np.ndarray  # (n_checkpoints,)
    frame: np.ndarray  # (d, k)
    propagators: np.ndarray = None  # (steps, d, d) if retained

    @property
    def dt(self):
        return self.path.dt

    @property
    def dim(self):
        return self.frame.shape[0]

    @property
    def horizon(self):
        return self.checkpoint_steps[-1] * self.dt

    def column_rates(self, T=None):
        """Raw per-column exponents ``log_r / T`` (unsorted)."""
        idx, t = self._checkpoint_at(T)
        return self.log_r[idx] / t

    def logdet_rate(self, T=None):
        idx, t = self._checkpoint_at(T)
        return self.logdet[idx] / t

    def _checkpoint_at(self, T):
        if T is None:
            idx = len(self.checkpoint_steps) - 1
        else:
            target = int(round(T / self.dt))
            idx = int(np.searchsorted(self.checkpoint_steps, target))
            idx = min(idx, len(self.checkpoint_steps) - 1)
            if self.checkpoint_steps[idx] != target:
                raise ValueError("T does not land on a reorthonormalization checkpoint")
        t = self.checkpoint_steps[idx] * self.dt
        if t <= 0:
            raise ValueError("need a positive horizon")
        return idx, t


def _signed_qr(b):
    """Thin QR with positive diagonal, for deterministic frames."""
    q, r = np.linalg.qr(b)
    s = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    s = np.where(s == 0.0, 1.0, s)
    q = q * s[..., None, :]
    r = r * s[..., :, None]
    return q, r


def accumulate_cocycle(propagators, dt, k=None, reorth_period=1, frame0=None,
                       path=None, keep_propagators=False):
    """Run the QR accumulation over a stream of per-step propagators.

    ``frame0`` defaults to the first ``k`` standard basis vectors, which
    makes the partial sums of ``log_r`` equal to wedge-volume growth of
    the leading coordinate planes (and, for ``k = d``, to the full
    log-determinant up to rounding).
    """
    g = np.asarray(propagators, dtype=float)
    steps, d, _ = g.shape
    k = d if k is None else int(k)
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    m = max(1, int(reorth_period))
    frame = np.eye(d)[:, :k] if frame0 is None else np.asarray(frame0, dtype=float).copy()
    n_check = steps // m + (1 if steps % m else 0)
    log_r = np.zeros((n_check + 1, k))
    logdet = np.zeros(n_check + 1)
    check_steps = np.zeros(n_check + 1, dtype=int)
    # per-step |det G| accumulated independently of the QR route
    det_cum = np.cumsum(np.linalg.slogdet(g)[1])
    b = frame
    ci = 0
    for start in range(0, steps, m):
        stop = min(start + m, steps)
        for j in range(start, stop):
            b = g[j] @ b
        q, r = _signed_qr(b)
        diag = np.abs(np.diagonal(r))
        if np.any(diag == 0.0):
            raise RankCollapseError("frame lost rank during QR accumulation", step=stop)
        ci += 1
        log_r[ci] = log_r[ci - 1] + np.log(diag)
        logdet[ci] = det_cum[stop - 1]
        check_steps[ci] = stop
        b = q
    return CocycleSample(
        path=path,
        k=k,
        reorth_period=m,
        checkpoint_steps=check_steps,
        log_r=log_r,
        logdet=logdet,
        frame=b,
        propagators=g if keep_propagators else None,
    )


def cocycle_from_propagators(propagators, dt, k=None, reorth_period=1, frame0=None):
    """Build a :class:`CocycleSample` from raw per-step matrices.

    Useful for exactly representable cocycles (e.g. frozen linear flows
    with ``G = expm(A dt)``) where no integrator error is wanted.
    """
    g = np.asarray(propagators, dtype=float)
    sample = accumulate_cocycle(g, dt, k=k, reorth_period=reorth_period,
                                frame0=frame0, keep_propagators=True)
    n = len(g)
    sample.path = AbsorbedPath(
        dt=dt,
        states=np.zeros((n + 1, g.shape[1])),
        tau=None,
        increments=np.zeros((n, 0)),
        kind="synthetic",
    )
    return sample


def integrate_tangent(sys, path, k=None, reorth_period=None, steps=None,
                      keep_propagators=False, frame0=None, chunk=200_000):
    """Propagate the tangent cocycle along ``path`` with the same noise.

    The frame is reorthonormalized every ``reorth_period`` steps (default
    1 for SDEs, 5 for maps) and the running ``log |diag R|`` per column
    is accumulated.  Fails if the requested window extends past the
    absorption time.
    """
    steps = path.alive_steps if steps is None else int(steps)
    if steps > path.alive_steps:
        raise ValueError(
            f"window of {steps} steps exceeds absorption time {path.alive_steps}"
        )
    if steps == 0:
        raise ValueError("path has no steps to propagate over")
    if reorth_period is None:
        reorth_period = 5 if path.kind == "map" else 1
    if keep_propagators or steps <= chunk:
        g = tangent_propagators(sys, path, steps)
        return accumulate_cocycle(g, path.dt, k=k, reorth_period=reorth_period,
                                  frame0=frame0, path=path,
                                  keep_propagators=keep_propagators)
    # long windows: compute propagators chunkwise and stitch accumulations
    parts = []
    for start in range(0, steps, chunk):
        stop = min(start + chunk, steps)
        sub = replace(
            path,
            states=path.states[start : stop + 1],
            increments=path.increments[start:stop],
            tau=None,
        )
        parts.append(tangent_propagators(sys, sub, stop - start))
    g = np.concatenate(parts, axis=0)
    return accumulate_cocycle(g, path.dt, k=k, reorth_period=reorth_period,
                              frame0=frame0, path=path)


# ---------------------------------------------------------------------------
# Doob drift


def doob_drift(sys, eta):
    """Drift-correct an SDE by the Girsanov h-transform of ``eta``.

    ``eta`` must expose ``grad_log(x) -> (N, d)``, the gradient of
    ``log eta``; the returned system has drift

        V0(x) + sum_i Vi(x) (Vi(x) . grad log eta(x))

    and the original diffusion fields.  Its sample paths are the
    conditioned (never absorbed) process; the noise recorded on those
    paths is the conditioned Brownian motion.
    """
    if not isinstance(sys, SdeSystem):
        raise TypeError("doob_drift applies to SDE systems")

    def shift(x):
        # (N, m) with entries Vi(x) . grad log eta(x)
        b = sys.diffusion_at(x)
        return np.einsum("ndm,nd->nm", b, eta.grad_log(x))

    def drift(x):
        b = sys.diffusion_at(x)
        return sys.drift(x) + np.einsum("ndm,nm->nd", b, shift(x))

    def drift_jacobian(x):
        # numerical Jacobian of the correction term; the base Jacobian is
        # analytic.  The correction involves grad log eta, which for grid
        # interpolants is only piecewise smooth anyway.
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        base = sys.drift_jacobian(x)
        n, d = x.shape
        jac = np.array(base, dtype=float, copy=True)
        for j in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h[:, j]
            xm[:, j] -= h[:, j]
            corr = (_doob_correction(sys, eta, xp) - _doob_correction(sys, eta, xm)) / (
                2.0 * h[:, j : j + 1]
            )
            jac[:, :, j] += corr
        return jac

    kwargs = dict(
        domain=sys.domain,
        drift=drift,
        drift_jacobian=drift_jacobian,
        noise_dim=sys.noise_dim,
        base=sys,
        shift=shift,
    )
    if sys.additive:
        kwargs["constant_diffusion"] = sys.constant_diffusion
    else:
        kwargs["diffusion"] = sys.diffusion
        kwargs["diffusion_jacobian"] = sys.diffusion_jacobian
    return QDriftSystem(**kwargs)


def _doob_correction(sys, eta, x):
    b = sys.diffusion_at(x)
    s = np.einsum("ndm,nd->nm", b, eta.grad_log(x))
    return np.einsum("ndm,nm->nd", b, s)


@dataclass(frozen=True)
class AnalyticEta:
    """Closed-form positive function with gradient, for tests and toys."""

    value_fn: callable
    grad_log_fn: callable

    def value(self, x):
        return self.value_fn(np.asarray(x, dtype=float))

    def grad_log(self, x):
        return self.grad_log_fn(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# consistency checks


def check_jacobians(sys, n_points=100, seed=0, rel_tol=1e-5, h=1e-6):
    """Verify analytic Jacobians against central finite differences.

    Samples ``n_points`` uniformly from the domain and returns the worst
    relative error found; raises ``AssertionError`` beyond ``rel_tol``.
    For a discrete system the map Jacobian is checked at freshly drawn
    noise letters.
    """
    rng = substream(seed, "jacobian-check")
    x = sys.domain.sample_uniform(rng, n_points)
    d = sys.dim
    worst = 0.0

    def fd(fun, x):
        n = len(x)
        probe = np.asarray(fun(x))
        out = np.empty(probe.shape + (d,))
        for j in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            out[..., j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h)
        return out

    if isinstance(sys, DiscreteSystem):
        w = sys.sample_noise(rng, n_points)
        jac = np.asarray(sys.jacobian(w, x), dtype=float)
        num = fd(lambda y: sys.step(w, y), x)
        worst = _rel_err(jac, num)
    else:
        jac = np.asarray(sys.drift_jacobian(x), dtype=float)
        num = fd(sys.drift, x)
        worst = _rel_err(jac, num)
        if not sys.additive:
            kjac = np.asarray(sys.diffusion_jacobian_at(x), dtype=float)
            num = fd(sys.diffusion_at, x)  # (N, d, m, d)
            num = np.moveaxis(num, 2, 1)  # -> (N, m, d, d)
            worst = max(worst, _rel_err(kjac, num))
        else:
            # additive flag promises DV_i == 0
            if np.any(sys.diffusion_jacobian_at(x) != 0.0):
                raise AssertionError("additive system with nonzero diffusion Jacobian")
    if worst > rel_tol:
        raise AssertionError(
            f"Jacobian mismatch: relative error {worst:.3e} > {rel_tol:.1e}"
        )
    return worst


def _rel_err(a, b):
    scale = 1.0 + np.abs(a)
    return float(np.max(np.abs(a - b) / scale))
