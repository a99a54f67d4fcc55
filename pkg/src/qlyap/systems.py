"""Built-in absorbed systems.

The double wells are the standard test bed: gradient drift ``x - x^3``
per coordinate with additive noise, absorbed at the boundary of the box
``[-1.5, 1.5]^d``.  The discrete companion is a noisy logistic-type
interval map with escape outside ``[0, 1]``.  Constructors for linear
and scalar multiplicative SDEs are provided for oracles and toys.
"""

import numpy as np

from .dynamics import DiscreteSystem, SdeSystem, box_domain

__all__ = [
    "double_well_1d",
    "double_well_2d",
    "coupled_well_2d",
    "interval_map",
    "linear_sde",
    "multiplicative_1d",
    "SYSTEM_BUILDERS",
]


def _cubic_drift(x):
    return x - x**3


def _cubic_jacobian(x):
    n, d = x.shape
    jac = np.zeros((n, d, d))
    idx = np.arange(d)
    jac[:, idx, idx] = 1.0 - 3.0 * x**2
    return jac


def double_well_1d(sigma=1.0, halfwidth=1.5):
    """1D double well ``dX = (X - X^3) dt + sigma dW`` on (-hw, hw)."""
    dom = box_domain([-halfwidth], [halfwidth])
    return SdeSystem(
        domain=dom,
        drift=_cubic_drift,
        drift_jacobian=_cubic_jacobian,
        noise_dim=1,
        constant_diffusion=np.array([[float(sigma)]]),
    )


def double_well_2d(sigma1=0.7, sigma2=0.3, halfwidth=1.5):
    """Uncoupled planar double well with independent noise per axis."""
    dom = box_domain([-halfwidth] * 2, [halfwidth] * 2)
    return SdeSystem(
        domain=dom,
        drift=_cubic_drift,
        drift_jacobian=_cubic_jacobian,
        noise_dim=2,
        constant_diffusion=np.diag([float(sigma1), float(sigma2)]),
    )


def coupled_well_2d(sigma1=0.7, sigma2=0.3, coupling=0.15, halfwidth=1.5):
    """Planar double well with linear exchange coupling between axes."""
    c = float(coupling)
    dom = box_domain([-halfwidth] * 2, [halfwidth] * 2)

    def drift(x):
        out = _cubic_drift(x)
        out[:, 0] += c * (x[:, 1] - x[:, 0])
        out[:, 1] += c * (x[:, 0] - x[:, 1])
        return out

    def drift_jac(x):
        jac = _cubic_jacobian(x)
        jac[:, 0, 0] -= c
        jac[:, 1, 1] -= c
        jac[:, 0, 1] += c
        jac[:, 1, 0] += c
        return jac

    return SdeSystem(
        domain=dom,
        drift=drift,
        drift_jacobian=drift_jac,
        noise_dim=2,
        constant_diffusion=np.diag([float(sigma1), float(sigma2)]),
    )


def interval_map(mu=4.2, noise=0.05):
    """Noisy logistic-type map ``x -> mu x (1 - x) + noise * w`` with
    ``w ~ U(-1, 1)``, absorbed outside (0, 1).

    For ``mu > 4`` the deterministic map already pushes the top of the
    unimodal hump out of the interval, so mass escapes every iterate and
    the surviving dynamics settle on a quasi-stationary profile.
    """
    mu = float(mu)
    eps = float(noise)
    dom = box_domain([0.0], [1.0])

    def sample_noise(rng, n):
        return rng.uniform(-1.0, 1.0, size=n)

    def step(w, x):
        return mu * x * (1.0 - x) + eps * w[:, None]

    def jacobian(w, x):
        return (mu * (1.0 - 2.0 * x))[..., None]

    return DiscreteSystem(domain=dom, sample_noise=sample_noise, step=step,
                          jacobian=jacobian)


def linear_sde(a_matrix, sigma=None, domain=None):
    """Linear drift ``dX = A X dt`` with optional additive noise.

    With ``sigma=None`` the system is deterministic (zero diffusion),
    which gives an exactly known tangent flow ``Phi_t = expm(A t)``.
    """
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    d = a.shape[0]
    if domain is None:
        domain = box_domain([-1e6] * d, [1e6] * d)
    if sigma is None:
        sig = np.zeros((d, 1))
        m = 1
    else:
        sig = np.atleast_2d(np.asarray(sigma, dtype=float))
        if sig.shape == (1, 1) and d > 1:
            sig = np.eye(d) * sig[0, 0]
        m = sig.shape[1]

    def drift(x):
        return x @ a.T

    def drift_jac(x):
        return np.broadcast_to(a, (len(x), d, d)).copy()

    return SdeSystem(
        domain=domain,
        drift=drift,
        drift_jacobian=drift_jac,
        noise_dim=m,
        constant_diffusion=sig,
    )


def multiplicative_1d(sigma=1.0, halfwidth=1.5):
    """Scalar SDE ``dX = (X - X^3) dt + sigma X o dW`` on (-hw, hw).

    The diffusion Jacobian is the constant ``sigma``, which makes the
    tangent noise term exactly computable; used to arbitrate the
    multiplicative volume-growth drift formula.
    """
    s = float(sigma)
    dom = box_domain([-halfwidth], [halfwidth])

    def diffusion(x):
        return (s * x)[:, :, None]

    def diffusion_jac(x):
        return np.full((len(x), 1, 1, 1), s)

    return SdeSystem(
        domain=dom,
        drift=_cubic_drift,
        drift_jacobian=_cubic_jacobian,
        noise_dim=1,
        diffusion=diffusion,
        diffusion_jacobian=diffusion_jac,
    )


#: Registry used by the experiment harness; parameters are validated by
#: the config layer before reaching these builders.
SYSTEM_BUILDERS = {
    "double_well_1d": double_well_1d,
    "double_well_2d": double_well_2d,
    "coupled_well_2d": coupled_well_2d,
    "interval_map": interval_map,
}
