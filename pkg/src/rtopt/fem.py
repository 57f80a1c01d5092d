"""P1 finite elements for the scalar potential of 2-D magnetostatics.

The state u is the z component of the vector potential; its in-plane flux
density is curl u = (du/dy, -du/dx), constant per triangle. The weak residual
used everywhere is

    F(u) . v  =  sum_T |T| h_T(curl u) . curl v  -  sum_T |T| j_T * mean(v)

with element-wise constant material response h_T and source j_T. Antiperiodic
pairs and Dirichlet nodes are eliminated through a sparse reduction matrix C
(u_full = C u_reduced), so reduced systems are C^T K C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError

NEWTON_MIN_STEP = 2.0**-20


class P1Space:
    """Per-mesh cache of P1 geometry factors and assembly kernels."""

    def __init__(self, mesh):
        self.mesh = mesh
        tri = mesh.triangles
        p = mesh.vertices[tri]
        self.areas = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        if np.any(self.areas <= 0):
            raise SolverError("mesh has non-positive triangle areas")
        # gradients of the three barycentric basis functions on each element
        e0 = p[:, 2] - p[:, 1]
        e1 = p[:, 0] - p[:, 2]
        e2 = p[:, 1] - p[:, 0]
        edges = np.stack([e0, e1, e2], axis=1)            # (m, 3, 2)
        rot = np.empty_like(edges)                        # outward-normal rotation
        rot[..., 0] = -edges[..., 1]
        rot[..., 1] = edges[..., 0]
        self.grads = rot / (2.0 * self.areas)[:, None, None]
        # curl phi = (d phi/dy, -d phi/dx)
        self.curls = np.empty_like(self.grads)
        self.curls[..., 0] = self.grads[..., 1]
        self.curls[..., 1] = -self.grads[..., 0]
        self._rows = np.repeat(tri, 3, axis=1).ravel()
        self._cols = np.tile(tri, (1, 3)).ravel()

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    def element_curl(self, u):
        """Flux density per element, shape (m, 2)."""
        return np.einsum("eid,ei->ed", self.curls, u[self.mesh.triangles])

    def flux_divergence(self, hvals):
        """Assemble sum_T |T| h_T . curl phi_i into a nodal vector."""
        contrib = self.areas[:, None] * np.einsum("eid,ed->ei", self.curls, hvals)
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.mesh.triangles.ravel(), contrib.ravel())
        return out

    def load_vector(self, j_elem):
        """Assemble sum_T |T| j_T / 3 onto the nodes of T."""
        contrib = (self.areas * j_elem / 3.0)[:, None].repeat(3, axis=1)
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.mesh.triangles.ravel(), contrib.ravel())
        return out

    def tangent_matrix(self, dh):
        """Assemble sum_T |T| curl phi_i . dh_T curl phi_j, dh shape (m, 2, 2)."""
        local = np.einsum("e,eid,edc,ejc->eij", self.areas, self.curls, dh, self.curls)
        mat = sp.coo_matrix((local.ravel(), (self._rows, self._cols)),
                            shape=(self.n_nodes, self.n_nodes))
        return mat.tocsr()

    def mass_matrix(self, elements=None):
        """Consistent P1 mass matrix, optionally restricted to an element subset."""
        tri = self.mesh.triangles if elements is None else self.mesh.triangles[elements]
        areas = self.areas if elements is None else self.areas[elements]
        local = (areas[:, None, None] / 12.0) * (np.ones((3, 3)) + np.eye(3))
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        return sp.coo_matrix((local.ravel(), (rows, cols)),
                             shape=(self.n_nodes, self.n_nodes)).tocsr()

    def stiffness_matrix(self, elements=None):
        tri = self.mesh.triangles if elements is None else self.mesh.triangles[elements]
        areas = self.areas if elements is None else self.areas[elements]
        grads = self.grads if elements is None else self.grads[elements]
        local = np.einsum("e,eid,ejd->eij", areas, grads, grads)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        return sp.coo_matrix((local.ravel(), (rows, cols)),
                             shape=(self.n_nodes, self.n_nodes)).tocsr()

    def integrate_elementwise(self, values):
        """Integral of an element-wise constant scalar field."""
        return float(np.dot(self.areas, values))


class DofMap:
    """Reduction u_full = C u_reduced eliminating Dirichlet and slave nodes."""

    def __init__(self, mesh):
        n = mesh.n_nodes
        kind = np.zeros(n, dtype=np.int8)      # 0 free, 1 dirichlet, 2 slave
        kind[mesh.dirichlet_nodes] = 1
        kind[mesh.pair_slave] = 2
        master_of = np.full(n, -1, dtype=np.int64)
        master_of[mesh.pair_slave] = mesh.pair_master
        free = np.flatnonzero(kind == 0)
        index = np.full(n, -1, dtype=np.int64)
        index[free] = np.arange(len(free))

        rows, cols, vals = [free], [index[free]], [np.ones(len(free))]
        slaves = np.flatnonzero(kind == 2)
        if len(slaves):
            m = master_of[slaves]
            if np.any(kind[m] != 0):
                raise SolverError("antiperiodic master is not a free node")
            rows.append(slaves)
            cols.append(index[m])
            vals.append(-np.ones(len(slaves)))
        self.C = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, len(free))).tocsr()
        self.free = free
        self.n_full = n
        self.n_reduced = len(free)

    def reduce_vector(self, v):
        """Adjoint reduction C^T v (for residuals and loads, not coordinates)."""
        return self.C.T @ v

    def restrict(self, u_full):
        """Reduced coordinates of a conforming full vector: u_full = C restrict."""
        return np.asarray(u_full)[self.free]

    def reduce_matrix(self, k):
        return (self.C.T @ k @ self.C).tocsc()

    def expand(self, v):
        return self.C @ v


@dataclass
class NewtonInfo:
    converged: bool
    iterations: int
    residuals: list
    tolerance: float


def newton_solve(space, dofmap, respond, load_full, u0=None, tol=1e-8,
                 max_iter=50):
    """Damped Newton for the reduced residual C^T (flux(u) - load).

    respond(B) must return (h, dh) arrays of shapes (m, 2) and (m, 2, 2).
    Convergence is relative: ||F|| <= tol * ||F(u_start)||. Each step is
    halved until the residual norm drops; stagnation raises SolverError.
    """
    u = np.zeros(space.n_nodes) if u0 is None else dofmap.expand(
        dofmap.restrict(np.asarray(u0, dtype=float)))
    load_red = dofmap.reduce_vector(load_full)

    def residual(u_full):
        h, dh = respond(space.element_curl(u_full))
        return dofmap.reduce_vector(space.flux_divergence(h)) - load_red, dh

    f, dh = residual(u)
    norm0 = float(np.linalg.norm(f))
    tol_abs = tol * max(norm0, 1e-300)
    history = [norm0]
    if norm0 <= tol_abs:
        return u, NewtonInfo(True, 0, history, tol_abs)

    for it in range(1, max_iter + 1):
        k_red = dofmap.reduce_matrix(space.tangent_matrix(dh))
        try:
            lu = spla.splu(k_red)
        except RuntimeError as exc:
            raise SolverError(f"singular tangent system at Newton step {it}",
                              residual=history[-1], iterations=it) from exc
        step = -lu.solve(f)
        alpha = 1.0
        u_red = dofmap.restrict(u)
        while True:
            trial = dofmap.expand(u_red + alpha * step)
            f_trial, dh_trial = residual(trial)
            if np.linalg.norm(f_trial) < np.linalg.norm(f):
                break
            alpha *= 0.5
            if alpha < NEWTON_MIN_STEP:
                raise SolverError(
                    "Newton damping stagnated (no residual decrease)",
                    residual=float(np.linalg.norm(f)), iterations=it)
        u, f, dh = trial, f_trial, dh_trial
        history.append(float(np.linalg.norm(f)))
        if history[-1] <= tol_abs:
            return u, NewtonInfo(True, it, history, tol_abs)

    raise SolverError(
        f"Newton did not reach tolerance in {max_iter} iterations",
        residual=history[-1], iterations=max_iter)


def tangent_at(space, dofmap, respond, u):
    """Reduced tangent matrix assembled at a converged state."""
    _, dh = respond(space.element_curl(u))
    return dofmap.reduce_matrix(space.tangent_matrix(dh))


def adjoint_solve(space, dofmap, respond, u, objective_gradient_full):
    """Solve K(u)^T p = dJ/du for the adjoint state p (full-length vector).

    The tangent is assembled at the converged state u; symmetry of dh makes
    the transpose explicit rather than material.
    """
    k_red = tangent_at(space, dofmap, respond, u)
    rhs = dofmap.reduce_vector(objective_gradient_full)
    try:
        lu = spla.splu(k_red.T.tocsc())
    except RuntimeError as exc:
        raise SolverError("singular adjoint system") from exc
    return dofmap.expand(lu.solve(rhs))


class ScreenedSmoother:
    """Screened projection (eps*K + M) g_nodal = M_rhs g_elem on a submesh.

    Solves -eps * lap(g) + g = g_raw with natural boundary conditions on the
    given element subset, which preserves the integral of the input field.
    The factorization is cached; one instance serves many right-hand sides.
    """

    def __init__(self, space, elements, eps):
        self.space = space
        self.elements = np.asarray(elements)
        self.eps = float(eps)
        self.nodes = np.unique(space.mesh.triangles[self.elements].ravel())
        self._local = np.full(space.n_nodes, -1, dtype=np.int64)
        self._local[self.nodes] = np.arange(len(self.nodes))
        mass = space.mass_matrix(self.elements)[np.ix_(self.nodes, self.nodes)]
        stiff = space.stiffness_matrix(self.elements)[np.ix_(self.nodes, self.nodes)]
        self.mass = mass.tocsr()
        self._lu = spla.splu((self.eps * stiff + mass).tocsc())

    def smooth(self, g_elem):
        """Map element-wise values on the subset to nodal values on its nodes."""
        tri = self.space.mesh.triangles[self.elements]
        contrib = (self.space.areas[self.elements] * g_elem / 3.0)
        rhs_full = np.zeros(self.space.n_nodes)
        np.add.at(rhs_full, tri.ravel(), np.repeat(contrib, 3))
        return self._lu.solve(rhs_full[self.nodes])

    def inner(self, a, b):
        return float(a @ (self.mass @ b))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def integral_nodal(self, a):
        return float(np.asarray(self.mass.sum(axis=1)).ravel() @ a)

    def integral_elementwise(self, g_elem):
        return float(self.space.areas[self.elements] @ g_elem)
