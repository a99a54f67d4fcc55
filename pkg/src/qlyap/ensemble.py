"""Batched trajectory ensembles.

Everything here steps whole blocks of trajectories at once through the
same Heun / map updates as the single-path API.  Ensembles are sharded
into fixed-size blocks with independent substreams (see ``seeding``), so
results do not depend on how many trajectories are requested or on how
blocks are distributed over workers.

Absorbed trajectories are frozen in place: their state stops updating,
their absorption step is recorded, and downstream statistics mask them
out.  For conditioned (Q-drifted) runs the same mechanism counts
discretization leakage.
"""

from dataclasses import dataclass

import numpy as np

from .dynamics import DiscreteSystem, QDriftSystem, heun_step, _eye_like
from .seeding import ensemble_blocks, substream

__all__ = [
    "run_ensemble",
    "run_tangent_ensemble",
    "EnsembleResult",
    "TangentEnsembleResult",
    "variational_propagators",
]


def _normalize_starts(starts, n_total, dim):
    """Return (n, block_starts) where block_starts(rng, b0, bsize) -> (bsize, d)."""
    if callable(starts):
        if n_total is None:
            raise ValueError("n_total is required when starts is a sampler")

        def from_sampler(rng, b0, bsize):
            return np.asarray(starts(rng, bsize), dtype=float)

        return int(n_total), from_sampler
    arr = np.asarray(starts, dtype=float)
    if arr.ndim == 1:
        if n_total is None:
            raise ValueError("n_total is required when starts is a single point")
        point = arr

        def from_point(rng, b0, bsize):
            return np.broadcast_to(point, (bsize, dim)).copy()

        return int(n_total), from_point
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"starts must be a point, sampler, or (N, {dim}) array")
    if n_total is not None and int(n_total) != len(arr):
        raise ValueError("n_total disagrees with the starts array")

    def from_array(rng, b0, bsize):
        return arr[b0 : b0 + bsize].copy()

    return len(arr), from_array


@dataclass
class EnsembleResult:
    dt: float
    n_steps: int
    starts: np.ndarray  # (N, d)
    final_states: np.ndarray  # (N, d), frozen at absorption for dead paths
    tau: np.ndarray  # (N,) step index of absorption, -1 if survived
    snapshots: dict  # step -> (states, alive) copies
    recorded: np.ndarray = None  # (n_rec, N, d) if record_every was set
    record_steps: np.ndarray = None

    @property
    def survived(self):
        return self.tau < 0

    def alive_at(self, step):
        return (self.tau < 0) | (self.tau > step)

    def survivor_fraction(self, step=None):
        if step is None:
            return float(np.mean(self.survived))
        return float(np.mean(self.alive_at(step)))


def run_ensemble(sys, starts, n_steps, dt, seed, n_total=None, purpose="ensemble",
                 snapshot_steps=(), record_every=None):
    """Integrate N trajectories, freezing each at absorption.

    ``starts`` may be a single point, an ``(N, d)`` array, or a callable
    ``(rng, n) -> (n, d)`` drawing initial conditions (evaluated per
    block, so draws are block-deterministic).  ``snapshot_steps`` asks
    for ``(states, alive)`` copies at specific steps; ``record_every``
    stores the full ensemble state every that many steps.
    """
    discrete = isinstance(sys, DiscreteSystem)
    if discrete:
        dt = 1.0
    elif dt <= 0:
        raise ValueError("dt must be positive")
    d = sys.dim
    n_total, block_starts = _normalize_starts(starts, n_total, d)
    n_steps = int(n_steps)
    snapshot_steps = sorted(set(int(s) for s in snapshot_steps))
    if any(s < 0 or s > n_steps for s in snapshot_steps):
        raise ValueError("snapshot steps must lie in [0, n_steps]")
    rec_steps = None
    recorded = None
    if record_every is not None:
        rec_steps = np.arange(0, n_steps + 1, int(record_every))
        recorded = np.empty((len(rec_steps), n_total, d))

    starts_out = np.empty((n_total, d))
    finals = np.empty((n_total, d))
    tau = np.full(n_total, -1, dtype=np.int64)
    snaps = {s: (np.empty((n_total, d)), np.empty(n_total, dtype=bool))
             for s in snapshot_steps}

    for b0, bsize, bidx in ensemble_blocks(n_total):
        rng = substream(seed, purpose, bidx)
        x = block_starts(rng, b0, bsize)
        sl = slice(b0, b0 + bsize)
        starts_out[sl] = x
        alive = np.asarray(sys.domain.contains(x), dtype=bool).copy()
        btau = np.full(bsize, -1, dtype=np.int64)
        btau[~alive] = 0
        if 0 in snaps:
            snaps[0][0][sl] = x
            snaps[0][1][sl] = alive
        rec_i = 0
        if rec_steps is not None and rec_steps[0] == 0:
            recorded[0, sl] = x
            rec_i = 1
        sqdt = np.sqrt(dt)
        for j in range(n_steps):
            if discrete:
                w = sys.sample_noise(rng, bsize)
                x_new = np.asarray(sys.step(w, x), dtype=float)
            else:
                dw = rng.standard_normal((bsize, sys.noise_dim)) * sqdt
                x_new, _ = heun_step(sys, x, dw, dt)
            inside = np.asarray(sys.domain.contains(x_new), dtype=bool)
            newly_dead = alive & ~inside
            btau[newly_dead] = j + 1
            # dead paths keep their exit state; earlier deaths stay frozen
            x = np.where((alive | newly_dead)[:, None], x_new, x)
            alive &= inside
            step = j + 1
            if step in snaps:
                snaps[step][0][sl] = x
                snaps[step][1][sl] = alive
            if rec_steps is not None and rec_i < len(rec_steps) and rec_steps[rec_i] == step:
                recorded[rec_i, sl] = x
                rec_i += 1
        finals[sl] = x
        tau[sl] = btau

    return EnsembleResult(
        dt=dt,
        n_steps=n_steps,
        starts=starts_out,
        final_states=finals,
        tau=tau,
        snapshots=snaps,
        recorded=recorded,
        record_steps=rec_steps,
    )


# ---------------------------------------------------------------------------
# joint base + tangent ensembles


def variational_propagators(jac_sys, x_now, x_next, dw, dt):
    """Heun propagator of the variational equation between known states.

    With the corrector stage evaluated at the Euler predictor this is the
    exact Jacobian of the simulated one-step map; evaluated at the
    realized next state it is the consistent tangent update when the base
    path comes from a *different* (drift-corrected) system and the
    original cocycle is wanted along it.
    """
    n, dim = x_now.shape
    eye = _eye_like(n, dim)
    j0 = jac_sys.drift_jacobian(x_now)
    j1 = jac_sys.drift_jacobian(x_next)
    if jac_sys.additive:
        p = eye + dt * j0
        return eye + 0.5 * dt * (j0 + np.einsum("nij,njk->nik", j1, p))
    k0 = jac_sys.diffusion_jacobian_at(x_now)
    k1 = jac_sys.diffusion_jacobian_at(x_next)
    kw0 = np.einsum("nm,nmij->nij", dw, k0)
    kw1 = np.einsum("nm,nmij->nij", dw, k1)
    p = eye + dt * j0 + kw0
    return (
        eye
        + 0.5 * dt * (j0 + np.einsum("nij,njk->nik", j1, p))
        + 0.5 * (kw0 + np.einsum("nij,njk->nik", kw1, p))
    )


@dataclass
class TangentEnsembleResult:
    dt: float
    n_steps: int
    k: int
    tau: np.ndarray  # (N,)
    log_r: np.ndarray  # (N, k) cumulative log |diag R| at the final step
    logdet: np.ndarray  # (N,)
    frames: np.ndarray  # (N, d, k)
    final_states: np.ndarray
    snapshots: dict  # step -> (log_r copy, alive mask)
    fk_mean: np.ndarray = None  # (N,) time average of the supplied integrand
    fk_excluded: np.ndarray = None  # (N,) fraction of integrand samples excluded

    @property
    def survived(self):
        return self.tau < 0

    @property
    def leak_fraction(self):
        return float(np.mean(~self.survived))


def run_tangent_ensemble(sim_sys, starts, n_steps, dt, seed, n_total=None,
                         purpose="tangent", k=None, reorth_period=1,
                         frame0="standard", jac_sys=None, snapshot_steps=(),
                         fk_fn=None, burn_in_steps=0, shift_tangent_noise=True,
                         track_logdet=False):
    """Integrate trajectories together with a tangent frame per path.

    ``jac_sys`` supplies the vector-field Jacobians for the tangent flow
    (defaults to ``sim_sys``, in which case the propagator is the exact
    Jacobian of the numerical step).  When ``sim_sys`` is a Doob
    drift-corrected system with multiplicative base fields, the recorded
    noise is the conditioned Brownian motion; ``shift_tangent_noise``
    adds the Girsanov correction back so the original cocycle is
    propagated.

    ``fk_fn(x, frames) -> (values, valid)`` is accumulated as a per-path
    time average over steps after ``burn_in_steps``; invalid samples are
    excluded and their fraction reported.  ``frame0`` is ``"standard"``
    (leading basis columns), ``"haar"`` (independent rotation-invariant
    frame per path), or an explicit ``(d, k)`` frame.  Snapshot steps
    must be multiples of ``reorth_period`` so cumulative ``log_r`` is
    exact there.
    """
    if isinstance(sim_sys, DiscreteSystem):
        raise TypeError("tangent ensembles are for SDE systems")
    if dt <= 0:
        raise ValueError("dt must be positive")
    jac = sim_sys if jac_sys is None else jac_sys
    exact_jacobian = jac is sim_sys
    d = sim_sys.dim
    k = d if k is None else int(k)
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    m = max(1, int(reorth_period))
    n_steps = int(n_steps)
    snapshot_steps = sorted(set(int(s) for s in snapshot_steps))
    if any(s < 0 or s > n_steps for s in snapshot_steps):
        raise ValueError("snapshot steps must lie in [0, n_steps]")
    if any(s % m for s in snapshot_steps):
        raise ValueError("snapshot steps must be multiples of the reorth period")
    if fk_fn is not None and m != 1:
        raise ValueError("integrand evaluation needs orthonormal frames: reorth=1")
    shift = None
    if (
        shift_tangent_noise
        and isinstance(sim_sys, QDriftSystem)
        and jac is not sim_sys
        and not jac.additive
    ):
        shift = sim_sys.shift

    n_total, block_starts = _normalize_starts(starts, n_total, d)
    tau = np.full(n_total, -1, dtype=np.int64)
    log_r = np.empty((n_total, k))
    logdet = np.zeros(n_total)
    frames_out = np.empty((n_total, d, k))
    finals = np.empty((n_total, d))
    snaps = {s: (np.empty((n_total, k)), np.empty(n_total, dtype=bool))
             for s in snapshot_steps}
    fk_mean = np.zeros(n_total) if fk_fn is not None else None
    fk_excl = np.zeros(n_total) if fk_fn is not None else None

    eye_frame = np.eye(d)[:, :k]
    sqdt = np.sqrt(dt)

    for b0, bsize, bidx in ensemble_blocks(n_total):
        rng = substream(seed, purpose, bidx)
        x = block_starts(rng, b0, bsize)
        if isinstance(frame0, str) and frame0 == "standard":
            bframe = np.broadcast_to(eye_frame, (bsize, d, k)).copy()
        elif isinstance(frame0, str) and frame0 == "haar":
            q, r = np.linalg.qr(rng.standard_normal((bsize, d, k)))
            sgn = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
            bframe = q * np.where(sgn == 0.0, 1.0, sgn)[:, None, :]
        else:
            f = np.asarray(frame0, dtype=float)
            bframe = np.broadcast_to(f, (bsize, d, k)).copy()
        alive = np.asarray(sim_sys.domain.contains(x), dtype=bool).copy()
        btau = np.full(bsize, -1, dtype=np.int64)
        btau[~alive] = 0
        blog_r = np.zeros((bsize, k))
        blogdet = np.zeros(bsize)
        bfk = np.zeros(bsize)
        bfk_n = np.zeros(bsize)
        bfk_bad = np.zeros(bsize)
        sl = slice(b0, b0 + bsize)
        if 0 in snaps:
            snaps[0][0][sl] = 0.0
            snaps[0][1][sl] = alive

        for j in range(n_steps):
            dw = rng.standard_normal((bsize, sim_sys.noise_dim)) * sqdt
            if fk_fn is not None and j >= burn_in_steps:
                vals, valid = fk_fn(x, bframe)
                ok = valid & alive
                bfk[ok] += vals[ok]
                bfk_n[alive] += 1.0
                bfk_bad[alive & ~valid] += 1.0
            x_new, xp = heun_step(sim_sys, x, dw, dt)
            if exact_jacobian:
                g = variational_propagators(jac, x, xp, dw, dt)
            else:
                dw_eff = dw if shift is None else dw + shift(x) * dt
                g = variational_propagators(jac, x, x_new, dw_eff, dt)
            bframe = np.matmul(g, bframe)
            if track_logdet:
                blogdet += np.where(alive, np.linalg.slogdet(g)[1], 0.0)
            inside = np.asarray(sim_sys.domain.contains(x_new), dtype=bool)
            newly_dead = alive & ~inside
            btau[newly_dead] = j + 1
            x = np.where((alive | newly_dead)[:, None], x_new, x)
            alive &= inside
            step = j + 1
            if step % m == 0 or step == n_steps:
                q, r = np.linalg.qr(bframe)
                diag = np.diagonal(r, axis1=-2, axis2=-1)
                sgn = np.where(np.sign(diag) == 0.0, 1.0, np.sign(diag))
                bframe = q * sgn[:, None, :]
                with np.errstate(divide="ignore", invalid="ignore"):
                    inc = np.log(np.abs(diag))
                blog_r += np.where(alive[:, None], inc, 0.0)
            if step in snaps:
                snaps[step][0][sl] = blog_r
                snaps[step][1][sl] = alive

        tau[sl] = btau
        log_r[sl] = blog_r
        logdet[sl] = blogdet
        frames_out[sl] = bframe
        finals[sl] = x
        if fk_fn is not None:
            n_good = np.maximum(bfk_n - bfk_bad, 1.0)
            fk_mean[sl] = np.where(bfk_n > 0, bfk / n_good, np.nan)
            fk_excl[sl] = np.where(bfk_n > 0, bfk_bad / np.maximum(bfk_n, 1.0), 0.0)

    return TangentEnsembleResult(
        dt=dt,
        n_steps=n_steps,
        k=k,
        tau=tau,
        log_r=log_r,
        logdet=logdet,
        frames=frames_out,
        final_states=finals,
        snapshots=snaps,
        fk_mean=fk_mean,
        fk_excluded=fk_excl,
    )
