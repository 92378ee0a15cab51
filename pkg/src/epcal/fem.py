"""Plane-stress finite element forward solver.

Assembles the discrete equilibrium residual with one-point quadrature on
linear triangles, solves each load step by Newton iteration with the local
states condensed out element by element, and provides the exact Jacobian
blocks needed by the sensitivity analyses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import ad
from . import constitutive as co
from .mesh import Mesh, assemble_mass_matrix

__all__ = [
    "BCSchedule",
    "NewtonOptions",
    "NewtonError",
    "ElementInversionError",
    "Trajectory",
    "PlaneStressModel",
    "save_trajectory",
    "load_trajectory",
    "export_trajectory_csv",
]

STANDARD_TIMES = (0.1, 0.15, 0.2, 0.5, 1.0, 3.0, 5.0, 7.0)


class NewtonError(Exception):
    """Global Newton failed; carries the residual-norm history."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class ElementInversionError(Exception):
    """An element's in-plane deformation gradient lost positivity."""


@dataclass(frozen=True)
class BCSchedule:
    """Prescribed-displacement schedule: bottom fixed, top pulled upward."""

    times: tuple = STANDARD_TIMES
    rate: float = 0.01  # top-edge u_y = rate * t [mm]

    def __post_init__(self):
        t = np.asarray(self.times)
        if not np.all(np.diff(t) > 0) or t[0] <= 0:
            raise ValueError("step times must be positive and strictly increasing")

    @property
    def n_steps(self):
        return len(self.times)

    def top_uy(self, t):
        return self.rate * t

    def all_times(self):
        """Times including the trivial initial step t=0."""
        return np.concatenate([[0.0], np.asarray(self.times, dtype=float)])


@dataclass
class NewtonOptions:
    rtol: float = 1e-11
    atol: float = 1e-12
    max_iter: int = 30
    polish: int = 2  # extra iterations after the tolerance is met
    local_tol: float = 1e-12
    local_max_iter: int = 50


@dataclass
class Trajectory:
    """Forward solution history over all load steps (step 0 included)."""

    times: np.ndarray  # (n_L+1,)
    u: np.ndarray  # (n_L+1, n_dof)
    loads: np.ndarray  # (n_L+1,)
    states: np.ndarray  # (n_L+1, n_el, 6)
    plastic: np.ndarray  # (n_L+1, n_el) frozen branch flags
    newton_iters: list = field(default_factory=list)


# -- element kernels -----------------------------------------------------------


def _def_grad(u_cols, G):
    """In-plane deformation gradient components from element displacements.

    ``u_cols`` is the element DOF vector as six scalar-likes in the order
    (ux1, uy1, ux2, uy2, ux3, uy3); ``G`` holds the reference shape-function
    gradients (n_el, 3, 2).
    """
    ux = u_cols[0::2]
    uy = u_cols[1::2]
    F11 = 1.0 + ux[0] * G[:, 0, 0] + ux[1] * G[:, 1, 0] + ux[2] * G[:, 2, 0]
    F12 = ux[0] * G[:, 0, 1] + ux[1] * G[:, 1, 1] + ux[2] * G[:, 2, 1]
    F21 = uy[0] * G[:, 0, 0] + uy[1] * G[:, 1, 0] + uy[2] * G[:, 2, 0]
    F22 = 1.0 + uy[0] * G[:, 0, 1] + uy[1] * G[:, 1, 1] + uy[2] * G[:, 2, 1]
    return F11, F12, F21, F22


def internal_force_rows(z11, z12, z22, F33, Fn, G, area, T0, mu, kappa):
    """Element internal-force rows of the one-point-quadrature residual.

    Integrand is grad(N_a) . (tau F^{-T}) T0; row order matches the element
    DOF order (fx1, fy1, fx2, fy2, fx3, fy3).
    """
    F11, F12, F21, F22 = Fn
    J2D = F11 * F22 - F12 * F21
    J = J2D * F33
    press = 0.5 * kappa * (J * J - 1.0)
    t11 = mu * z11 + press
    t22 = mu * z22 + press
    t12 = mu * z12
    P11 = (t11 * F22 - t12 * F12) / J2D
    P12 = (-t11 * F21 + t12 * F11) / J2D
    P21 = (t12 * F22 - t22 * F12) / J2D
    P22 = (-t12 * F21 + t22 * F11) / J2D
    c = area * T0
    rows = []
    for a in range(3):
        rows.append(c * (P11 * G[:, a, 0] + P12 * G[:, a, 1]))
        rows.append(c * (P21 * G[:, a, 0] + P22 * G[:, a, 1]))
    return rows


def _stack_rows(rows, width):
    vals = np.stack([np.asarray(ad.value_of(r), dtype=float) for r in rows], axis=1)
    ders = np.stack([ad.derivs_of(r, width) for r in rows], axis=1)
    return vals, ders


def _c_rows_masked(xi_cols, prev_cols, Fn, Fp, mu, kappa, law, plastic, width):
    """Local residual values/derivatives with the branch split applied."""
    n = plastic.shape[0]
    vals = np.zeros((n, 6))
    ders = np.zeros((n, 6, width))
    for branch, mask in ((False, ~plastic), (True, plastic)):
        if not mask.any():
            continue
        xi_m = [c[mask] for c in xi_cols]
        prev_m = [c[mask] for c in prev_cols]
        fn_m = tuple(f[mask] for f in Fn)
        fp_m = tuple(f[mask] for f in Fp)
        rows = co.local_residual_rows(xi_m, prev_m, fn_m, fp_m, mu, kappa, law, branch)
        v, d = _stack_rows(rows, width)
        vals[mask] = v
        ders[mask] = d
    return vals, ders


class PlaneStressModel:
    """Mesh + schedule + thickness; everything the inverse methods consume."""

    def __init__(self, mesh: Mesh, thickness=0.02, schedule: BCSchedule = None):
        self.mesh = mesh
        self.thickness = float(thickness)
        self.schedule = schedule or BCSchedule()
        self.G = mesh.shape_gradients()
        self.areas = mesh.element_areas()
        self.area_total = float(self.areas.sum())
        e = mesh.elements
        self.elem_dofs = np.empty((mesh.n_elements, 6), dtype=int)
        self.elem_dofs[:, 0::2] = 2 * e
        self.elem_dofs[:, 1::2] = 2 * e + 1

        bottom = mesh.node_sets["bottom"]
        top = mesh.node_sets["top"]
        self.top_y_dofs = 2 * top + 1
        fixed = np.concatenate([2 * bottom, 2 * bottom + 1, 2 * top, 2 * top + 1])
        self.fixed_dofs = np.unique(fixed)
        free_mask = np.ones(mesh.n_dof, dtype=bool)
        free_mask[self.fixed_dofs] = False
        self.free_mask = free_mask
        self.free_dofs = np.flatnonzero(free_mask)
        fmap = -np.ones(mesh.n_dof, dtype=int)
        fmap[self.free_dofs] = np.arange(self.free_dofs.size)
        self._fmap = fmap

        rows = np.repeat(self.elem_dofs, 6, axis=1).ravel()
        cols = np.tile(self.elem_dofs, (1, 6)).ravel()
        keep = free_mask[rows] & free_mask[cols]
        self._asm_keep = keep
        self._asm_rows = fmap[rows[keep]]
        self._asm_cols = fmap[cols[keep]]

        cmap = -np.ones(mesh.n_dof, dtype=int)
        cmap[self.fixed_dofs] = np.arange(self.fixed_dofs.size)
        keep_fc = free_mask[rows] & ~free_mask[cols]
        self._asm_keep_fc = keep_fc
        self._asm_rows_fc = fmap[rows[keep_fc]]
        self._asm_cols_fc = cmap[cols[keep_fc]]

        self._mass = None

    # -- shared quantities -----------------------------------------------

    @property
    def mass_matrix(self):
        if self._mass is None:
            self._mass = assemble_mass_matrix(self.mesh)
        return self._mass

    @property
    def n_dof(self):
        return self.mesh.n_dof

    @property
    def n_el(self):
        return self.mesh.n_elements

    def prescribed_values(self, t):
        """Dirichlet values on the fixed DOFs at schedule time t."""
        vals = np.zeros(self.fixed_dofs.size)
        uy = self.schedule.top_uy(t)
        vals[np.isin(self.fixed_dofs, self.top_y_dofs)] = uy
        return vals

    def elem_u(self, u):
        return u[self.elem_dofs]

    def _fgrad_float(self, u):
        ue = self.elem_u(u)
        return _def_grad([ue[:, j] for j in range(6)], self.G)

    def f2d_arrays(self, u):
        """In-plane deformation gradients as (n_el, 2, 2); checks positivity."""
        F11, F12, F21, F22 = self._fgrad_float(u)
        det = F11 * F22 - F12 * F21
        if np.any(det <= 0):
            raise ElementInversionError(
                f"{int((det <= 0).sum())} element(s) inverted"
            )
        out = np.empty((self.n_el, 2, 2))
        out[:, 0, 0], out[:, 0, 1] = F11, F12
        out[:, 1, 0], out[:, 1, 1] = F21, F22
        return out

    # -- local states ------------------------------------------------------

    def local_states(self, u_n, u_prev, xi_prev, params, opts: NewtonOptions = None):
        opts = opts or NewtonOptions()
        return co.solve_local_batch(
            xi_prev,
            self.f2d_arrays(u_n),
            self.f2d_arrays(u_prev),
            params,
            tol=opts.local_tol,
            max_iter=opts.local_max_iter,
        )

    # -- residual and reaction ----------------------------------------------

    def residual(self, u, xi, params):
        """Assembled internal-force vector over all DOFs (tractions are zero)."""
        Fn = self._fgrad_float(u)
        mu, kappa = params.elastic.mu, params.elastic.kappa
        rows = internal_force_rows(
            xi[:, co.IZ11], xi[:, co.IZ12], xi[:, co.IZ22], xi[:, co.IF33],
            Fn, self.G, self.areas, self.thickness, mu, kappa,
        )
        R = np.zeros(self.n_dof)
        vals = np.stack(rows, axis=1)
        np.add.at(R, self.elem_dofs, vals)
        return R

    def reaction(self, R_full):
        """Axial load: sum of unconstrained residual rows on the top edge."""
        return float(R_full[self.top_y_dofs].sum())

    # -- Jacobian blocks ------------------------------------------------------

    def blocks_cur(self, u_n, u_prev, xi_n, xi_prev, params, plastic, forces=True):
        """Derivatives wrt the current step's (xi, u_e), each width 12."""
        ue = self.elem_u(u_n)
        xi_cols = [ad.seed_component(xi_n[:, i], i, 12) for i in range(6)]
        u_cols = [ad.seed_component(ue[:, j], 6 + j, 12) for j in range(6)]
        Fn = _def_grad(u_cols, self.G)
        Fp = self._fgrad_float(u_prev)
        prev_cols = [xi_prev[:, i] for i in range(6)]
        mu, kappa = params.elastic.mu, params.elastic.kappa
        _, cder = _c_rows_masked(
            xi_cols, prev_cols, Fn, Fp, mu, kappa, params.hardening, plastic, 12
        )
        out = {"A": cder[:, :, :6], "B": cder[:, :, 6:]}
        if forces:
            rows = internal_force_rows(
                xi_cols[0], xi_cols[1], xi_cols[2], xi_cols[5],
                Fn, self.G, self.areas, self.thickness, mu, kappa,
            )
            _, rder = _stack_rows(rows, 12)
            out["P"] = rder[:, :, :6]
            out["Ku"] = rder[:, :, 6:]
        return out

    def blocks_prev(self, u_n, u_prev, xi_n, xi_prev, params, plastic):
        """Derivatives of C wrt the previous step's (xi, u_e), width 12."""
        ue = self.elem_u(u_prev)
        prev_cols = [ad.seed_component(xi_prev[:, i], i, 12) for i in range(6)]
        u_cols = [ad.seed_component(ue[:, j], 6 + j, 12) for j in range(6)]
        Fp = _def_grad(u_cols, self.G)
        Fn = self._fgrad_float(u_n)
        xi_cols = [xi_n[:, i] for i in range(6)]
        mu, kappa = params.elastic.mu, params.elastic.kappa
        _, cder = _c_rows_masked(
            xi_cols, prev_cols, Fn, Fp, mu, kappa, params.hardening, plastic, 12
        )
        return {"D": cder[:, :, :6], "E": cder[:, :, 6:]}

    def blocks_params(self, u_n, u_prev, xi_n, xi_prev, space, p, plastic,
                      forces=True):
        """Derivatives wrt the free material parameters, width |p|."""
        params = space.seeded_params(p)
        mu, kappa = params.elastic.mu, params.elastic.kappa
        k = space.size
        Fn = self._fgrad_float(u_n)
        Fp = self._fgrad_float(u_prev)
        xi_cols = [xi_n[:, i] for i in range(6)]
        prev_cols = [xi_prev[:, i] for i in range(6)]
        _, cder = _c_rows_masked(
            xi_cols, prev_cols, Fn, Fp, mu, kappa, params.hardening, plastic, k
        )
        out = {"Cp": cder}
        if forces:
            rows = internal_force_rows(
                xi_cols[0], xi_cols[1], xi_cols[2], xi_cols[5],
                Fn, self.G, self.areas, self.thickness, mu, kappa,
            )
            _, rder = _stack_rows(rows, k)
            out["Rp"] = rder
        return out

    def blocks_xi(self, u_n, u_prev, xi_n, xi_prev, params, plastic, forces=True):
        """Derivatives wrt the current xi only (width 6, the VFM case)."""
        xi_cols = [ad.seed_component(xi_n[:, i], i, 6) for i in range(6)]
        Fn = self._fgrad_float(u_n)
        Fp = self._fgrad_float(u_prev)
        prev_cols = [xi_prev[:, i] for i in range(6)]
        mu, kappa = params.elastic.mu, params.elastic.kappa
        _, cder = _c_rows_masked(
            xi_cols, prev_cols, Fn, Fp, mu, kappa, params.hardening, plastic, 6
        )
        out = {"A": cder}
        if forces:
            rows = internal_force_rows(
                xi_cols[0], xi_cols[1], xi_cols[2], xi_cols[5],
                Fn, self.G, self.areas, self.thickness, mu, kappa,
            )
            _, rder = _stack_rows(rows, 6)
            out["P"] = rder
        return out

    def blocks_xi_prev(self, u_n, u_prev, xi_n, xi_prev, params, plastic):
        """Derivative of C wrt the previous xi only (width 6)."""
        prev_cols = [ad.seed_component(xi_prev[:, i], i, 6) for i in range(6)]
        Fn = self._fgrad_float(u_n)
        Fp = self._fgrad_float(u_prev)
        xi_cols = [xi_n[:, i] for i in range(6)]
        mu, kappa = params.elastic.mu, params.elastic.kappa
        _, cder = _c_rows_masked(
            xi_cols, prev_cols, Fn, Fp, mu, kappa, params.hardening, plastic, 6
        )
        return cder

    def condensed_tangent(self, blocks, fixed_cols=False):
        """Sparse consistent tangent on the free DOFs from element blocks.

        With ``fixed_cols`` the (free rows x fixed cols) coupling block is
        returned as well, for the linear step predictor.
        """
        Ke = blocks["Ku"] - np.einsum(
            "eij,ejk->eik",
            blocks["P"],
            np.linalg.solve(blocks["A"], blocks["B"]),
        )
        flat = Ke.reshape(self.n_el, 36).ravel()
        n = self.free_dofs.size
        K = sp.coo_matrix(
            (flat[self._asm_keep], (self._asm_rows, self._asm_cols)), shape=(n, n)
        ).tocsc()
        if not fixed_cols:
            return K
        Kfc = sp.coo_matrix(
            (flat[self._asm_keep_fc], (self._asm_rows_fc, self._asm_cols_fc)),
            shape=(n, self.fixed_dofs.size),
        ).tocsr()
        return K, Kfc

    def residual_jacobians(self, u_n, u_prev, xi_n, xi_prev, space, p, plastic):
        """Exact residual derivative blocks at a converged state.

        Returns the condensed tangent dR/du (free DOFs), the per-element
        dR_e/dxi, and the assembled dR/dp with the local condensation
        contribution included.
        """
        params = space.to_params(p)
        cur = self.blocks_cur(u_n, u_prev, xi_n, xi_prev, params, plastic)
        par = self.blocks_params(u_n, u_prev, xi_n, xi_prev, space, p, plastic)
        K = self.condensed_tangent(cur)
        dxidp = -np.linalg.solve(cur["A"], par["Cp"])
        dRe_dp = par["Rp"] + np.einsum("eij,ejk->eik", cur["P"], dxidp)
        dR_dp = np.zeros((self.n_dof, space.size))
        np.add.at(dR_dp, self.elem_dofs, dRe_dp)
        return {"dR_du": K, "dRe_dxi": cur["P"], "dR_dp": dR_dp}

    # -- nonlinear solves -------------------------------------------------------

    def _try_state(self, u, u_prev, xi_prev, params, opts):
        """Residual at a trial displacement; inf norms on evaluation failure."""
        try:
            xi, plastic, _ = self.local_states(u, u_prev, xi_prev, params, opts)
            R = self.residual(u, xi, params)
        except (co.LocalSolveError, ElementInversionError):
            return None, None, None, np.inf, np.inf
        rf = R[self.free_dofs]
        norm = float(np.abs(rf).max(initial=0.0))
        merit = float(np.linalg.norm(rf))
        if not np.isfinite(norm):
            norm = merit = np.inf
        return xi, plastic, R, norm, merit

    def _predict_step(self, u_prev, xi_prev, params, values, opts):
        """Linear-elastic extrapolation of the increment as the Newton seed."""
        u = u_prev.copy()
        du_c = values - u_prev[self.fixed_dofs]
        try:
            xi, plastic, _ = self.local_states(u_prev, u_prev, xi_prev, params, opts)
            blocks = self.blocks_cur(u_prev, u_prev, xi, xi_prev, params, plastic)
            K, Kfc = self.condensed_tangent(blocks, fixed_cols=True)
            w = splu(K).solve(-(Kfc @ du_c))
        except (co.LocalSolveError, ElementInversionError, RuntimeError):
            w = 0.0
        u[self.fixed_dofs] = values
        u[self.free_dofs] += w
        return u

    def solve_step(self, u_prev, xi_prev, params, t, u_init=None,
                   opts: NewtonOptions = None):
        """One load step of the condensed Newton iteration.

        The initial iterate comes from a linear predictor of the boundary
        increment (or a caller-provided warm start); the update is full
        Newton on the condensed system with a backtracking line search on
        the residual 2-norm. Returns ``(u, xi, plastic, R_full, history)``.
        """
        opts = opts or NewtonOptions()
        values = self.prescribed_values(t)
        if u_init is not None:
            u = np.array(u_init, dtype=float)
            u[self.fixed_dofs] = values
        else:
            u = self._predict_step(u_prev, xi_prev, params, values, opts)

        xi, plastic, R, norm, merit = self._try_state(
            u, u_prev, xi_prev, params, opts
        )
        if not np.isfinite(norm):
            raise NewtonError("initial state not evaluable (inverted elements)")
        history = [norm]
        tol_target = max(opts.atol, opts.rtol * max(1.0, norm))
        met_at = None
        for it in range(opts.max_iter):
            if norm <= tol_target:
                if met_at is None:
                    met_at = it
                # polish: keep iterating while the residual still drops fast
                done = (
                    it - met_at >= opts.polish
                    or norm == 0.0
                    or (len(history) > 1 and norm > 0.25 * history[-2])
                )
                if done:
                    return u, xi, plastic, R, history
            blocks = self.blocks_cur(u, u_prev, xi, xi_prev, params, plastic)
            K = self.condensed_tangent(blocks)
            du = splu(K).solve(-R[self.free_dofs])

            scale = 1.0
            accepted = None
            for _ in range(20):
                u_try = u.copy()
                u_try[self.free_dofs] += scale * du
                cand = self._try_state(u_try, u_prev, xi_prev, params, opts)
                if cand[4] < merit or cand[3] <= tol_target:
                    accepted = (u_try, cand)
                    break
                scale *= 0.5
            if accepted is None:
                # accept the smallest evaluable step to keep moving
                if not np.isfinite(cand[4]):
                    raise NewtonError(
                        "line search found no evaluable step", history
                    )
                accepted = (u_try, cand)
            u, (xi, plastic, R, norm, merit) = accepted
            history.append(norm)
        if norm <= tol_target:
            return u, xi, plastic, R, history
        raise NewtonError(
            f"global Newton stalled at |R|={norm:.3e} (target {tol_target:.3e})",
            history,
        )

    def solve_forward(self, params, warm: Trajectory = None,
                      opts: NewtonOptions = None) -> Trajectory:
        """March the full load schedule from the virgin state."""
        opts = opts or NewtonOptions()
        times = self.schedule.all_times()
        n_steps = len(times)
        u = np.zeros((n_steps, self.n_dof))
        loads = np.zeros(n_steps)
        states = np.zeros((n_steps, self.n_el, 6))
        states[0] = co.virgin_states(self.n_el)
        plastic = np.zeros((n_steps, self.n_el), dtype=bool)
        iters = []
        for n in range(1, n_steps):
            init = warm.u[n] if warm is not None else None
            un, xin, pl, R, hist = self.solve_step(
                u[n - 1], states[n - 1], params, times[n], u_init=init, opts=opts
            )
            u[n] = un
            states[n] = xin
            plastic[n] = pl
            loads[n] = self.reaction(R)
            iters.append(len(hist) - 1)
        return Trajectory(times, u, loads, states, plastic, iters)


# -- trajectory I/O -------------------------------------------------------------


def save_trajectory(traj: Trajectory, path):
    """Binary trajectory record (numpy .npz; layout documented in README)."""
    np.savez_compressed(
        path,
        times=traj.times,
        u=traj.u,
        loads=traj.loads,
        states=traj.states,
        plastic=traj.plastic,
    )


def load_trajectory(path) -> Trajectory:
    z = np.load(path)
    return Trajectory(
        times=z["times"], u=z["u"], loads=z["loads"],
        states=z["states"], plastic=z["plastic"].astype(bool),
    )


def export_trajectory_csv(traj: Trajectory, loads_path, disp_path):
    """CSV companions: (step, time, F) and long-format nodal displacements."""
    with open(loads_path, "w") as f:
        f.write("step,time,F\n")
        for n, t in enumerate(traj.times):
            f.write(f"{n},{t!r},{traj.loads[n]!r}\n")
    n_nodes = traj.u.shape[1] // 2
    with open(disp_path, "w") as f:
        f.write("step,node,ux,uy\n")
        for n in range(traj.u.shape[0]):
            ux = traj.u[n, 0::2]
            uy = traj.u[n, 1::2]
            for a in range(n_nodes):
                f.write(f"{n},{a},{ux[a]!r},{uy[a]!r}\n")
