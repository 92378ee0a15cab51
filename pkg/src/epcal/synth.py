"""Synthetic measurement generation, noise injection, and MLS transfer.

Measurements are nodal displacement fields plus the axial load per load
step, written as a CSV pair with a provenance sidecar so every study is
self-describing and bit-reproducible.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .fem import PlaneStressModel, Trajectory

__all__ = [
    "MeasurementSet",
    "NoiseSpec",
    "generate",
    "add_noise",
    "mls_filter",
    "remap",
    "filter_measurements",
    "remap_measurements",
    "save_measurements",
    "load_measurements",
]

# camera model behind the base displacement noise: 0.01 px image noise,
# specimen filling 80% of a 2048 px field of view
DIC_PIXELS = 2048.0
DIC_FILL = 0.8
DIC_IMAGE_NOISE = 0.01


def base_disp_noise(specimen_height):
    return DIC_IMAGE_NOISE * specimen_height / (DIC_FILL * DIC_PIXELS)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian white-noise levels for displacements and load."""

    disp_scale: float = 1.0  # DNSF
    load_scale: float = 1.0
    base_disp: float = base_disp_noise(1.0)  # [mm]
    base_load: float = 0.25  # [N]
    seed: int = 0

    @classmethod
    def for_plate(cls, height, disp_scale=1.0, load_scale=1.0, seed=0):
        return cls(
            disp_scale=disp_scale,
            load_scale=load_scale,
            base_disp=base_disp_noise(height),
            seed=seed,
        )


@dataclass
class MeasurementSet:
    """Per-step nodal displacements and axial loads on a stated mesh."""

    times: np.ndarray  # (n_L+1,)
    u: np.ndarray  # (n_L+1, n_dof)
    loads: np.ndarray  # (n_L+1,)
    provenance: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.times) - 1


def generate(model: PlaneStressModel, params, extra_provenance=None) -> MeasurementSet:
    """Noiseless synthetic data: the forward FE solution itself."""
    traj = model.solve_forward(params)
    prov = {
        "E": params.elastic.E,
        "nu": params.elastic.nu,
        "law": type(params.hardening).__name__,
        "law_params": " ".join(
            repr(getattr(params.hardening, n)) for n in params.hardening.param_names
        ),
        "mesh_nodes": model.mesh.n_nodes,
        "mesh_elements": model.mesh.n_elements,
        "thickness": model.thickness,
    }
    prov.update(extra_provenance or {})
    return MeasurementSet(
        times=traj.times.copy(),
        u=traj.u.copy(),
        loads=traj.loads.copy(),
        provenance=prov,
    )


def from_trajectory(traj: Trajectory, provenance=None) -> MeasurementSet:
    return MeasurementSet(
        times=traj.times.copy(), u=traj.u.copy(), loads=traj.loads.copy(),
        provenance=dict(provenance or {}),
    )


def add_noise(ms: MeasurementSet, spec: NoiseSpec) -> MeasurementSet:
    """Perturb every displacement component and load with iid Gaussians.

    Step 0 is the known initial condition and stays exact.
    """
    rng = np.random.default_rng(spec.seed)
    eps_u = spec.disp_scale * spec.base_disp
    eps_f = spec.load_scale * spec.base_load
    u = ms.u.copy()
    loads = ms.loads.copy()
    u[1:] += eps_u * rng.standard_normal(u[1:].shape)
    loads[1:] += eps_f * rng.standard_normal(loads[1:].shape)
    prov = dict(ms.provenance)
    prov.update(
        noise_disp_scale=spec.disp_scale,
        noise_load_scale=spec.load_scale,
        noise_base_disp=eps_u / spec.disp_scale if spec.disp_scale else spec.base_disp,
        noise_base_load=spec.base_load,
        noise_seed=spec.seed,
    )
    return MeasurementSet(ms.times.copy(), u, loads, prov)


# -- moving least squares ------------------------------------------------------


def _poly_basis(dx, dy, order):
    cols = [np.ones_like(dx)]
    if order >= 1:
        cols += [dx, dy]
    if order >= 2:
        cols += [dx * dx, dx * dy, dy * dy]
    return np.column_stack(cols)


def _n_terms(order):
    return (order + 1) * (order + 2) // 2


def _wendland(r):
    # C2 Wendland kernel on [0, 1]
    t = np.clip(1.0 - r, 0.0, None)
    return t ** 4 * (4.0 * r + 1.0)


def _mls_eval(src_pts, values, eval_pts, order, radius):
    """Weighted local polynomial fit evaluated at each target point."""
    values = np.asarray(values, dtype=float)
    flat = values.ndim == 1
    if flat:
        values = values[:, None]
    tree = cKDTree(src_pts)
    nmin = _n_terms(order)
    out = np.empty((len(eval_pts), values.shape[1]))
    for i, x in enumerate(eval_pts):
        rho = radius
        for attempt in range(2):
            idx = tree.query_ball_point(x, rho)
            if len(idx) >= nmin:
                d = src_pts[idx] - x
                w = _wendland(np.hypot(d[:, 0], d[:, 1]) / rho)
                P = _poly_basis(d[:, 0], d[:, 1], order)
                A = P.T @ (w[:, None] * P)
                b = P.T @ (w[:, None] * values[idx])
                try:
                    sol = np.linalg.solve(A, b)
                    out[i] = sol[0]
                    break
                except np.linalg.LinAlgError:
                    pass
            if attempt == 1:
                raise ValueError(
                    f"MLS solve failed at point {x} even after widening support"
                )
            rho *= 1.5  # widen once
    return out[:, 0] if flat else out


def mls_filter(points, values, order=2, support_radius=None, spacing=None):
    """Smooth a scattered field in place of its own points.

    Reproduces polynomials up to ``order`` exactly. The default support
    radius is three nominal spacings.
    """
    points = np.asarray(points, dtype=float)
    if support_radius is None:
        if spacing is None:
            raise ValueError("need support_radius or spacing")
        support_radius = 3.0 * spacing
    return _mls_eval(points, values, points, order, support_radius)


def remap(src_points, src_values, tgt_points, order=1, support_radius=None,
          spacing=None):
    """Transfer a field from a source point cloud onto target points."""
    src_points = np.asarray(src_points, dtype=float)
    tgt_points = np.asarray(tgt_points, dtype=float)
    if support_radius is None:
        if spacing is None:
            raise ValueError("need support_radius or spacing")
        support_radius = 3.0 * spacing
    return _mls_eval(src_points, src_values, tgt_points, order, support_radius)


def filter_measurements(ms: MeasurementSet, mesh, order=2, support_radius=None):
    """MLS-smooth the displacement channels; the load channel is untouched."""
    radius = support_radius or 3.0 * mesh.nominal_edge_length
    u = ms.u.copy()
    for n in range(1, len(ms.times)):
        comps = np.column_stack([ms.u[n, 0::2], ms.u[n, 1::2]])
        sm = mls_filter(mesh.nodes, comps, order=order, support_radius=radius)
        u[n, 0::2] = sm[:, 0]
        u[n, 1::2] = sm[:, 1]
    prov = dict(ms.provenance)
    prov.update(filter="mls", filter_order=order, filter_radius=radius)
    return MeasurementSet(ms.times.copy(), u, ms.loads.copy(), prov)


def remap_measurements(ms: MeasurementSet, src_mesh, tgt_mesh, order=1,
                       support_radius=None):
    """Map measured displacements from a finer mesh onto a coarser one."""
    radius = support_radius or 3.0 * src_mesh.nominal_edge_length
    n_steps = len(ms.times)
    u = np.zeros((n_steps, tgt_mesh.n_dof))
    for n in range(1, n_steps):
        comps = np.column_stack([ms.u[n, 0::2], ms.u[n, 1::2]])
        mapped = remap(
            src_mesh.nodes, comps, tgt_mesh.nodes, order=order,
            support_radius=radius,
        )
        u[n, 0::2] = mapped[:, 0]
        u[n, 1::2] = mapped[:, 1]
    prov = dict(ms.provenance)
    prov.update(remap="mls", remap_order=order, remap_radius=radius,
                remap_target_nodes=tgt_mesh.n_nodes)
    return MeasurementSet(ms.times.copy(), u, ms.loads.copy(), prov)


# -- file formats ----------------------------------------------------------------


def save_measurements(ms: MeasurementSet, basepath):
    """Write <base>_u.csv, <base>_loads.csv, and <base>.prov sidecar."""
    base = str(basepath)
    n_nodes = ms.u.shape[1] // 2
    with open(base + "_u.csv", "w") as f:
        f.write("step,node,ux,uy\n")
        for n in range(len(ms.times)):
            ux, uy = ms.u[n, 0::2], ms.u[n, 1::2]
            for a in range(n_nodes):
                f.write(f"{n},{a},{ux[a]!r},{uy[a]!r}\n")
    with open(base + "_loads.csv", "w") as f:
        f.write("step,time,F\n")
        for n, t in enumerate(ms.times):
            f.write(f"{n},{t!r},{ms.loads[n]!r}\n")
    cp = configparser.ConfigParser()
    cp["provenance"] = {k: str(v) for k, v in sorted(ms.provenance.items())}
    buf = io.StringIO()
    cp.write(buf)
    with open(base + ".prov", "w") as f:
        f.write(buf.getvalue())


def load_measurements(basepath) -> MeasurementSet:
    base = str(basepath)
    rows = np.loadtxt(base + "_u.csv", delimiter=",", skiprows=1)
    lrows = np.loadtxt(base + "_loads.csv", delimiter=",", skiprows=1, ndmin=2)
    n_steps = int(rows[:, 0].max()) + 1
    n_nodes = int(rows[:, 1].max()) + 1
    u = np.zeros((n_steps, 2 * n_nodes))
    step = rows[:, 0].astype(int)
    node = rows[:, 1].astype(int)
    u[step, 2 * node] = rows[:, 2]
    u[step, 2 * node + 1] = rows[:, 3]
    times = np.zeros(n_steps)
    loads = np.zeros(n_steps)
    times[lrows[:, 0].astype(int)] = lrows[:, 1]
    loads[lrows[:, 0].astype(int)] = lrows[:, 2]
    cp = configparser.ConfigParser()
    cp.read(base + ".prov")
    prov = dict(cp["provenance"]) if "provenance" in cp else {}
    return MeasurementSet(times, u, loads, prov)
