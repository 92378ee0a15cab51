"""Plane-stress finite-deformation J2 plasticity with isotropic hardening.

The material state at an integration point is
``xi = (zeta11, zeta12, zeta22, Ie, alpha, F33)``: the in-plane components
of the deviatoric volume-preserving elastic left Cauchy-Green tensor, its
spherical part, the hardening variable, and the out-of-plane stretch. The
out-of-plane stretch is an unknown of the local solve, coupled through the
zero-normal-stress closure.

All kernels are written component-wise on scalars or numpy arrays and are
transparent to :class:`epcal.ad.Dual` inputs, so the same code evaluates
residuals, Jacobian blocks, and parameter sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ad

__all__ = [
    "ElasticConstants",
    "Voce",
    "LinearVoce",
    "PowerLaw",
    "HARDENING_LAWS",
    "hardening",
    "MaterialParams",
    "ParameterSpace",
    "LocalState",
    "StressState",
    "LocalSolveError",
    "f33_closure",
    "kirchhoff_stress",
    "trial_state",
    "local_residual",
    "solve_local",
    "virgin_states",
    "solve_local_batch",
    "local_residual_rows",
]

SQ23 = np.sqrt(2.0 / 3.0)
SQ32 = np.sqrt(3.0 / 2.0)

# state array column order
IZ11, IZ12, IZ22, IIE, IALPHA, IF33 = range(6)


class LocalSolveError(Exception):
    """Local Newton failed to converge; carries the offending element ids."""

    def __init__(self, message, elements=()):
        super().__init__(message)
        self.elements = np.asarray(elements, dtype=int)


@dataclass
class ElasticConstants:
    """Young's modulus [MPa] and Poisson ratio."""

    E: float
    nu: float

    def __post_init__(self):
        if isinstance(self.E, float) and self.E <= 0:
            raise ValueError("E must be positive")
        if isinstance(self.nu, float) and not -1.0 < self.nu < 0.5:
            raise ValueError("nu must lie in (-1, 0.5)")

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def kappa(self):
        return self.E / (3.0 * (1.0 - 2.0 * self.nu))


@dataclass
class Voce:
    """Saturating hardening H = Y + S (1 - exp(-D alpha))."""

    Y: float
    S: float
    D: float

    param_names = ("Y", "S", "D")

    def value(self, alpha):
        return self.Y + self.S * (1.0 - ad.exp(-self.D * alpha))


@dataclass
class LinearVoce:
    """Voce hardening with a linear term: H = Y + K alpha + S (1 - exp(-D alpha))."""

    Y: float
    K: float
    S: float
    D: float

    param_names = ("Y", "K", "S", "D")

    def value(self, alpha):
        return self.Y + self.K * alpha + self.S * (1.0 - ad.exp(-self.D * alpha))


@dataclass
class PowerLaw:
    """Power hardening H = Y + A alpha^n."""

    Y: float
    A: float
    n: float

    param_names = ("Y", "A", "n")

    def value(self, alpha):
        return self.Y + self.A * alpha ** self.n


HARDENING_LAWS = {"voce": Voce, "linear-voce": LinearVoce, "power": PowerLaw}


def hardening(law, alpha):
    """Evaluate H(alpha); rejects negative hardening variables."""
    a = ad.value_of(alpha)
    if np.any(np.asarray(a) < 0):
        raise ValueError("hardening variable must be nonnegative")
    return law.value(alpha)


@dataclass
class MaterialParams:
    """Elastic constants plus a hardening law; the calibration target."""

    elastic: ElasticConstants
    hardening: object

    def get(self, name):
        if name in ("E", "nu"):
            return getattr(self.elastic, name)
        return getattr(self.hardening, name)

    def replace(self, **values):
        el = {k: v for k, v in values.items() if k in ("E", "nu")}
        hw = {k: v for k, v in values.items() if k not in ("E", "nu")}
        elastic = replace(self.elastic, **el) if el else self.elastic
        law = replace(self.hardening, **hw) if hw else self.hardening
        return MaterialParams(elastic, law)


@dataclass
class ParameterSpace:
    """Names the free entries of the calibration vector p."""

    names: tuple
    base: MaterialParams

    @property
    def size(self):
        return len(self.names)

    def to_params(self, values):
        return self.base.replace(**dict(zip(self.names, values)))

    def to_vector(self, params=None):
        params = params or self.base
        return np.array([params.get(n) for n in self.names], dtype=float)

    def seeded_params(self, values):
        """Material parameters with each free entry carrying its own seed."""
        return self.to_params(ad.seed(np.asarray(values, dtype=float)))


@dataclass
class LocalState:
    """Per-integration-point internal variables."""

    zeta11: float = 0.0
    zeta12: float = 0.0
    zeta22: float = 0.0
    Ie: float = 1.0
    alpha: float = 0.0
    F33: float = 1.0

    @classmethod
    def virgin(cls):
        return cls()

    @classmethod
    def from_array(cls, a):
        return cls(*[float(v) for v in a])

    def to_array(self):
        return np.array(
            [self.zeta11, self.zeta12, self.zeta22, self.Ie, self.alpha, self.F33]
        )


@dataclass
class StressState:
    """Kirchhoff stress split into deviatoric part and pressure."""

    tau: np.ndarray  # (3, 3) [MPa]
    s: np.ndarray  # (3, 3) deviator [MPa]
    p: float  # pressure [MPa]
    J: float  # volume ratio


def virgin_states(n):
    """Batch of undeformed states, shape (n, 6)."""
    xi = np.zeros((n, 6))
    xi[:, IIE] = 1.0
    xi[:, IF33] = 1.0
    return xi


# -- pointwise stress ---------------------------------------------------------


def f33_closure(zeta11, zeta22, J2D, elastic):
    """Out-of-plane stretch enforcing zero normal Kirchhoff stress."""
    rad = (1.0 + 2.0 * elastic.mu * (zeta11 + zeta22) / elastic.kappa) / (J2D * J2D)
    if np.any(np.asarray(ad.value_of(rad)) <= 0):
        raise LocalSolveError("elastically inadmissible state: closure radicand <= 0")
    return ad.sqrt(rad)


def kirchhoff_stress(xi: LocalState, J2D, elastic) -> StressState:
    """Kirchhoff stress tau = s - J p I from a local state."""
    J = J2D * xi.F33
    if J <= 0:
        raise ValueError("nonpositive volume ratio")
    mu = elastic.mu
    z33 = -(xi.zeta11 + xi.zeta22)
    s = mu * np.array(
        [[xi.zeta11, xi.zeta12, 0.0], [xi.zeta12, xi.zeta22, 0.0], [0.0, 0.0, z33]]
    )
    p = -0.5 * elastic.kappa * (J * J - 1.0) / J
    tau = s - J * p * np.eye(3)
    return StressState(tau=tau, s=s, p=p, J=J)


# -- trial kinematics ---------------------------------------------------------


def _det2(F):
    return F[0] * F[3] - F[1] * F[2]


def trial_components(prev, Fn, Fp, F33n):
    """Volume-preserving trial elastic state after the relative motion.

    ``prev`` is the previous state as six scalar-likes, ``Fn``/``Fp`` are the
    in-plane deformation gradient components (F11, F12, F21, F22) at the
    current and previous steps, and ``F33n`` is the current out-of-plane
    stretch (an unknown of the local solve). Returns
    ``(ztr11, ztr12, ztr22, Ietr)``.
    """
    z11p, z12p, z22p, Iep, _, F33p = prev
    F11n, F12n, F21n, F22n = Fn
    F11p, F12p, F21p, F22p = Fp

    detp = F11p * F22p - F12p * F21p
    f11 = (F11n * F22p - F12n * F21p) / detp
    f12 = (F12n * F11p - F11n * F12p) / detp
    f21 = (F21n * F22p - F22n * F21p) / detp
    f22 = (F22n * F11p - F21n * F12p) / detp
    f33 = F33n / F33p

    detf = (f11 * f22 - f12 * f21) * f33
    fac = detf ** (-1.0 / 3.0)
    fb11, fb12, fb21, fb22, fb33 = fac * f11, fac * f12, fac * f21, fac * f22, fac * f33

    b11p = z11p + Iep
    b12p = z12p
    b22p = z22p + Iep
    b33p = Iep - (z11p + z22p)

    btr11 = fb11 * fb11 * b11p + 2.0 * fb11 * fb12 * b12p + fb12 * fb12 * b22p
    btr12 = fb11 * fb21 * b11p + (fb11 * fb22 + fb12 * fb21) * b12p + fb12 * fb22 * b22p
    btr22 = fb21 * fb21 * b11p + 2.0 * fb21 * fb22 * b12p + fb22 * fb22 * b22p
    btr33 = fb33 * fb33 * b33p

    Ietr = (btr11 + btr22 + btr33) / 3.0
    return btr11 - Ietr, btr12, btr22 - Ietr, Ietr


def deviator_norm(z11, z12, z22):
    """Frobenius norm of the full 3D deviator built from in-plane components."""
    z33 = -(z11 + z22)
    return ad.sqrt(z11 * z11 + z22 * z22 + z33 * z33 + 2.0 * z12 * z12)


def local_residual_rows(xi, prev, Fn, Fp, mu, kappa, law, plastic):
    """The six local residual rows for one frozen branch.

    ``xi`` and ``prev`` are six scalar-likes each; ``plastic`` selects the
    return-mapping branch. The consistency row is stored scaled by 1/mu so
    all rows are strain-sized.
    """
    z11, z12, z22, Ie, a, F33 = xi
    ztr11, ztr12, ztr22, Ietr = trial_components(prev, Fn, Fp, F33)
    a_prev = prev[4]

    if not plastic:
        r0 = z11 - ztr11
        r1 = z12 - ztr12
        r2 = z22 - ztr22
        r3 = Ie - Ietr
        r4 = a - a_prev
    else:
        nrm = deviator_norm(z11, z12, z22)
        dg = 2.0 * SQ32 * (a - a_prev) * Ie / nrm
        r0 = z11 - ztr11 + dg * z11
        r1 = z12 - ztr12 + dg * z12
        r2 = z22 - ztr22 + dg * z22
        z33 = -(z11 + z22)
        r3 = ((z11 + Ie) * (z22 + Ie) - z12 * z12) * (z33 + Ie) - 1.0
        r4 = nrm - SQ23 * law.value(a) / mu

    J2D = _det2(Fn)
    rad = (1.0 + 2.0 * mu * (z11 + z22) / kappa) / (J2D * J2D)
    r5 = F33 - rad ** 0.5
    return [r0, r1, r2, r3, r4, r5]


# -- batched local Newton ------------------------------------------------------


def _f_components(F2D):
    F2D = np.asarray(F2D)
    if F2D.ndim == 2:
        F2D = F2D[None]
    return F2D[:, 0, 0], F2D[:, 0, 1], F2D[:, 1, 0], F2D[:, 1, 1]


def _rows_float(xi, prev, Fn, Fp, mu, kappa, law, plastic):
    cols = [xi[:, i] for i in range(6)]
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = local_residual_rows(cols, prev, Fn, Fp, mu, kappa, law, plastic)
        return np.stack([np.asarray(r, dtype=float) for r in rows], axis=1)


def _rows_dual(xi, prev, Fn, Fp, mu, kappa, law, plastic):
    cols = [ad.seed_component(xi[:, i], i, 6) for i in range(6)]
    rows = local_residual_rows(cols, prev, Fn, Fp, mu, kappa, law, plastic)
    vals = np.stack([r.val for r in rows], axis=1)
    jac = np.stack([r.der for r in rows], axis=1)
    return vals, jac


def _newton_branch(xi0, prev, Fn, Fp, mu, kappa, law, plastic, tol, max_iter, ids):
    """Damped Newton on one frozen branch of the local residual."""
    xi = xi0.copy()
    n = xi.shape[0]
    active = np.arange(n)
    iters = 0
    for _ in range(max_iter + 1):
        sub = (xi[active], tuple(p[active] for p in prev),
               tuple(f[active] for f in Fn), tuple(f[active] for f in Fp))
        vals, jac = _rows_dual(sub[0], sub[1], sub[2], sub[3], mu, kappa, law, plastic)
        norm = np.nanmax(np.abs(vals), axis=1)
        norm = np.where(np.isfinite(norm), norm, np.inf)
        keep = norm > tol
        active = active[keep]
        if active.size == 0:
            return xi, iters
        if iters == max_iter:
            break
        vals, jac, norm = vals[keep], jac[keep], norm[keep]
        dx = np.linalg.solve(jac, -vals[..., None])[..., 0]

        # halving line search on residual-norm increase
        scale = np.ones(active.size)
        cur = tuple(p[active] for p in prev)
        cfn = tuple(f[active] for f in Fn)
        cfp = tuple(f[active] for f in Fp)
        trial = xi[active] + dx
        for _ in range(8):
            new = _rows_float(trial, cur, cfn, cfp, mu, kappa, law, plastic)
            with np.errstate(invalid="ignore"):
                nn = np.nanmax(np.abs(new), axis=1)
            nn = np.where(np.isfinite(nn), nn, np.inf)
            bad = nn > norm
            if not bad.any():
                break
            scale[bad] *= 0.5
            trial[bad] = xi[active[bad]] + scale[bad, None] * dx[bad]
        xi[active] = trial
        iters += 1
    raise LocalSolveError(
        f"local Newton did not converge in {max_iter} iterations", ids[active]
    )


def solve_local_batch(xi_prev, F2D_n, F2D_prev, params, tol=1e-12, max_iter=50):
    """Return-mapping solve for a batch of integration points.

    Stage one solves the coupled elastic trial system (out-of-plane stretch
    included); the yield check at the converged trial state freezes the
    branch; stage two runs the plastic Newton initialized at the trial state.
    Returns ``(xi, plastic_mask, iterations)``.
    """
    xi_prev = np.atleast_2d(np.asarray(xi_prev, dtype=float))
    Fn = _f_components(F2D_n)
    Fp = _f_components(F2D_prev)
    mu, kappa = params.elastic.mu, params.elastic.kappa
    law = params.hardening
    prev = tuple(xi_prev[:, i] for i in range(6))
    ids = np.arange(xi_prev.shape[0])

    xi, it_el = _newton_branch(
        xi_prev, prev, Fn, Fp, mu, kappa, law, False, tol, max_iter, ids
    )

    s_norm = mu * deviator_norm(xi[:, IZ11], xi[:, IZ12], xi[:, IZ22])
    f_trial = s_norm - SQ23 * law.value(xi_prev[:, IALPHA])
    plastic = f_trial > 0.0
    iters = it_el
    if plastic.any():
        p_ids = ids[plastic]
        sub_prev = tuple(p[plastic] for p in prev)
        sub_fn = tuple(f[plastic] for f in Fn)
        sub_fp = tuple(f[plastic] for f in Fp)
        xi_pl, it_pl = _newton_branch(
            xi[plastic], sub_prev, sub_fn, sub_fp, mu, kappa, law, True,
            tol, max_iter, p_ids,
        )
        xi[plastic] = xi_pl
        iters += it_pl
    return xi, plastic, iters


# -- single-point wrappers -----------------------------------------------------


def trial_state(xi_prev: LocalState, F2D_n, F2D_prev, elastic):
    """Elastic trial state with the out-of-plane stretch solved consistently.

    Returns the trial :class:`LocalState` and the trial deviatoric Kirchhoff
    stress as a 3x3 array.
    """
    params = MaterialParams(elastic, Voce(Y=np.inf, S=0.0, D=0.0))
    xi, _, _ = solve_local_batch(
        xi_prev.to_array()[None],
        np.asarray(F2D_n)[None],
        np.asarray(F2D_prev)[None],
        params,
    )
    st = LocalState.from_array(xi[0])
    z33 = -(st.zeta11 + st.zeta22)
    s = elastic.mu * np.array(
        [[st.zeta11, st.zeta12, 0.0], [st.zeta12, st.zeta22, 0.0], [0.0, 0.0, z33]]
    )
    return st, s


def local_residual(xi_n: LocalState, xi_prev: LocalState, F2D_n, F2D_prev, params):
    """The six-component local residual with the branch set by trial yield."""
    xi = xi_n.to_array()[None]
    prev_arr = xi_prev.to_array()[None]
    prev = tuple(prev_arr[:, i] for i in range(6))
    Fn = _f_components(np.asarray(F2D_n))
    Fp = _f_components(np.asarray(F2D_prev))
    mu, kappa = params.elastic.mu, params.elastic.kappa
    law = params.hardening

    ztr11, ztr12, ztr22, _ = trial_components(prev, Fn, Fp, xi[:, IF33])
    s_norm = mu * deviator_norm(ztr11, ztr12, ztr22)
    plastic = bool(s_norm[0] - SQ23 * law.value(xi_prev.alpha) > 0.0)
    return _rows_float(xi, prev, Fn, Fp, mu, kappa, law, plastic)[0], plastic


def solve_local(
    xi_prev: LocalState, F2D_n, F2D_prev, params, tol=1e-12, max_iter=50
) -> LocalState:
    """Single-point return mapping; raises :class:`LocalSolveError` on failure."""
    xi, _, _ = solve_local_batch(
        xi_prev.to_array()[None],
        np.asarray(F2D_n)[None],
        np.asarray(F2D_prev)[None],
        params,
        tol=tol,
        max_iter=max_iter,
    )
    return LocalState.from_array(xi[0])
