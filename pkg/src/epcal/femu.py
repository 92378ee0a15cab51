"""FEMU objective: mass-weighted displacement mismatch plus load mismatch.

The gradient comes from a transient adjoint: one transposed solve of the
condensed tangent per load step, swept backward, with per-element
multipliers enforcing the constitutive constraints. Cost is independent of
the number of material parameters.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import splu

from .fem import NewtonOptions, PlaneStressModel
from .optimize import EvaluationError

__all__ = ["FemuObjective", "tune_balance_factor"]


def tune_balance_factor(alpha, J_disp, J_load):
    """Rescale the balance factor so both objective pieces are comparable.

    ``J_load`` is the weighted load component (alpha included). A zero load
    component leaves alpha unchanged.
    """
    if J_load <= 0.0 or J_disp <= 0.0:
        return alpha
    return alpha * J_disp / J_load


class FemuObjective:
    """Callable objective/gradient pair for a fixed measurement set."""

    def __init__(self, model: PlaneStressModel, measurements, space,
                 balance=1.0, newton: NewtonOptions = None, warm_start=True):
        self.model = model
        self.meas = measurements
        self.space = space
        self.balance = float(balance)
        self.newton = newton or NewtonOptions()
        self.warm_start = warm_start
        self._cache_key = None
        self._cache_traj = None
        self._warm = None

        times = model.schedule.all_times()
        if len(times) != len(measurements.times) or not np.allclose(
            times, measurements.times
        ):
            raise ValueError("measurement steps do not match the BC schedule")
        self.dts = np.diff(times)
        self.T = float(times[-1])
        self.A = model.area_total
        self.M = model.mass_matrix
        self.n_evals = 0
        self.last_components = (np.nan, np.nan)

    # -- forward bookkeeping -------------------------------------------------

    def _forward(self, p):
        key = tuple(np.asarray(p, dtype=float))
        if self._cache_key == key:
            return self._cache_traj
        params = self.space.to_params(np.asarray(p, dtype=float))
        try:
            traj = self.model.solve_forward(
                params, warm=self._warm if self.warm_start else None,
                opts=self.newton,
            )
        except Exception as exc:  # solver failure -> rejected point
            raise EvaluationError(f"forward solve failed: {exc}") from exc
        self.n_evals += 1
        self._cache_key = key
        self._cache_traj = traj
        self._warm = traj
        return traj

    def _mass_quad(self, d):
        dx, dy = d[0::2], d[1::2]
        return float(dx @ (self.M @ dx) + dy @ (self.M @ dy))

    def _mass_grad(self, d):
        out = np.empty_like(d)
        out[0::2] = self.M @ d[0::2]
        out[1::2] = self.M @ d[1::2]
        return out

    def components(self, p):
        """(J_disp, weighted J_load) at the forward solution for p."""
        traj = self._forward(p)
        jd = 0.0
        jl = 0.0
        for n in range(1, len(traj.times)):
            d = traj.u[n] - self.meas.u[n]
            jd += self._mass_quad(d) * self.dts[n - 1]
            jl += (traj.loads[n] - self.meas.loads[n]) ** 2 * self.dts[n - 1]
        jd /= 2.0 * self.T * self.A
        jl *= self.balance / (2.0 * self.T)
        self.last_components = (jd, jl)
        return jd, jl

    def value(self, p):
        jd, jl = self.components(p)
        return jd + jl

    # -- gradients --------------------------------------------------------------

    def value_and_grad(self, p):
        """Objective and its adjoint gradient (one forward, one backward sweep)."""
        p = np.asarray(p, dtype=float)
        traj = self._forward(p)
        J = self.value(p)
        g = self._gradient_adjoint(p, traj)
        return J, g

    def gradient_adjoint(self, p):
        p = np.asarray(p, dtype=float)
        return self._gradient_adjoint(p, self._forward(p))

    def _gradient_adjoint(self, p, traj):
        model = self.model
        space = self.space
        params = space.to_params(p)
        k = space.size
        n_L = len(traj.times) - 1
        free = model.free_dofs
        elem_dofs = model.elem_dofs

        w_e = np.zeros((model.n_el, 6))  # reaction picker at element level
        is_top = np.isin(elem_dofs, model.top_y_dofs)
        w_e[is_top] = 1.0

        g = np.zeros(k)
        psi_next = None
        D_next = None
        E_next = None
        for n in range(n_L, 0, -1):
            u_n, u_prev = traj.u[n], traj.u[n - 1]
            xi_n, xi_prev = traj.states[n], traj.states[n - 1]
            plastic = traj.plastic[n]
            dt = self.dts[n - 1]
            load_w = self.balance * dt / self.T * (
                traj.loads[n] - self.meas.loads[n]
            )

            cur = model.blocks_cur(u_n, u_prev, xi_n, xi_prev, params, plastic)
            par = model.blocks_params(u_n, u_prev, xi_n, xi_prev, space, p, plastic)
            K = model.condensed_tangent(cur)
            lu = splu(K)

            # dF/d(.) through the unconstrained top-edge residual rows
            dF_dxi = np.einsum("ei,eij->ej", w_e, cur["P"])
            dF_du = np.zeros(model.n_dof)
            np.add.at(dF_du, elem_dofs, np.einsum("ei,eij->ej", w_e, cur["Ku"]))
            dF_dp = np.einsum("ei,eik->k", w_e, par["Rp"])

            dJ_du = (dt / (self.T * self.A)) * self._mass_grad(
                u_n - self.meas.u[n]
            )
            dJ_du += load_w * dF_du

            g_e = load_w * dF_dxi
            if psi_next is not None:
                g_e = g_e + np.einsum("ei,eij->ej", psi_next, D_next)

            rhs = -dJ_du[free]
            x_e = np.linalg.solve(
                np.swapaxes(cur["A"], 1, 2), g_e[..., None]
            )[..., 0]
            contrib = np.zeros(model.n_dof)
            np.add.at(contrib, elem_dofs, np.einsum("ei,eij->ej", x_e, cur["B"]))
            rhs += contrib[free]
            if psi_next is not None:
                cross = np.zeros(model.n_dof)
                np.add.at(
                    cross, elem_dofs, np.einsum("ei,eij->ej", psi_next, E_next)
                )
                rhs -= cross[free]

            lam = lu.solve(rhs, trans="T")
            lam_full = np.zeros(model.n_dof)
            lam_full[free] = lam
            lam_e = lam_full[elem_dofs]

            rhs_psi = g_e + np.einsum("ei,eij->ej", lam_e, cur["P"])
            psi = -np.linalg.solve(
                np.swapaxes(cur["A"], 1, 2), rhs_psi[..., None]
            )[..., 0]

            g += load_w * dF_dp
            g += np.einsum("ei,eik->k", lam_e, par["Rp"])
            g += np.einsum("ei,eik->k", psi, par["Cp"])

            if n > 1:
                prevb = model.blocks_prev(
                    u_n, u_prev, xi_n, xi_prev, params, plastic
                )
                D_next, E_next = prevb["D"], prevb["E"]
                psi_next = psi
        return g

    def gradient_fd(self, p, step=1e-4):
        """Central finite differences of the objective, 2|p| forward solves."""
        p = np.asarray(p, dtype=float)
        g = np.zeros_like(p)
        for i in range(p.size):
            h = step * (abs(p[i]) if p[i] != 0 else 1.0)
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            # bypass the single-entry cache for perturbed evaluations
            self._cache_key = None
            fp = self.value(pp)
            self._cache_key = None
            fm = self.value(pm)
            g[i] = (fp - fm) / (2.0 * h)
        self._cache_key = None
        return g

    def value_and_grad_fd(self, p, step=1e-4):
        f = self.value(np.asarray(p, dtype=float))
        g = self.gradient_fd(p, step)
        return f, g
