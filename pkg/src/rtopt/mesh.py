"""Triangle meshes: the machine sector benchmark, graded disks, unit squares.

All meshes are conforming P1 triangulations described by one `Mesh` value.
Region membership is a per-triangle integer into `region_names`. Boundary
edges carry one of three tags; antiperiodic node pairing is stored explicitly
as (master, slave) index arrays with the convention u[slave] = -u[master].
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, SolverError, UsageError

MESH_FORMAT = "RTOMESH1"

BOUNDARY_TAGS = ("outer_dirichlet", "antiperiodic_master", "antiperiodic_slave")
TAG_DIRICHLET, TAG_MASTER, TAG_SLAVE = 0, 1, 2

# Region labels of the benchmark machine sector.
MACHINE_REGIONS = (
    "design", "stator_iron", "magnet1", "magnet2",
    "coil_A", "coil_B", "coil_C", "air_gap", "shaft",
)


@dataclass
class Mesh:
    vertices: np.ndarray          # (n, 2) float64, meters
    triangles: np.ndarray         # (m, 3) int32, CCW
    region_id: np.ndarray         # (m,) int16
    region_names: tuple
    boundary_edges: np.ndarray    # (b, 2) int32
    boundary_tags: np.ndarray     # (b,) int16
    pair_master: np.ndarray       # (p,) int32
    pair_slave: np.ndarray        # (p,) int32
    dirichlet_nodes: np.ndarray   # (d,) int32
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    def region_index(self, name):
        try:
            return self.region_names.index(name)
        except ValueError:
            raise KeyError(f"mesh has no region named {name!r}") from None

    def elements_in(self, name):
        return np.flatnonzero(self.region_id == self.region_index(name))

    def areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def fingerprint(self):
        """Stable digest of the geometry, used to pair persisted fields with meshes."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update(np.ascontiguousarray(self.region_id).tobytes())
        return h.hexdigest()[:16]


def _orient_ccw(vertices, triangles):
    p = vertices[triangles]
    det = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
           - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    flip = det < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


# ---------------------------------------------------------------------------
# unit square (auxiliary mesh for manufactured-solution tests)

def unit_square_mesh(n):
    """Structured n-by-n triangulation of [0,1]^2, all-Dirichlet boundary."""
    if n < 1:
        raise ConfigurationError("unit_square_mesh needs n >= 1")
    xs = np.linspace(0.0, 1.0, n + 1)
    xv, yv = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([xv.ravel(), yv.ravel()])

    def nid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.asarray(tris, dtype=np.int32)

    edges = []
    for i in range(n):
        edges.append((nid(i, 0), nid(i + 1, 0)))
        edges.append((nid(i, n), nid(i + 1, n)))
        edges.append((nid(0, i), nid(0, i + 1)))
        edges.append((nid(n, i), nid(n, i + 1)))
    edges = np.asarray(edges, dtype=np.int32)

    on_bnd = ((verts[:, 0] == 0.0) | (verts[:, 0] == 1.0)
              | (verts[:, 1] == 0.0) | (verts[:, 1] == 1.0))
    return Mesh(
        vertices=verts,
        triangles=_orient_ccw(verts, tris),
        region_id=np.zeros(len(tris), dtype=np.int16),
        region_names=("domain",),
        boundary_edges=edges,
        boundary_tags=np.full(len(edges), TAG_DIRICHLET, dtype=np.int16),
        pair_master=np.zeros(0, dtype=np.int32),
        pair_slave=np.zeros(0, dtype=np.int32),
        dirichlet_nodes=np.flatnonzero(on_bnd).astype(np.int32),
        meta={"kind": "unit_square", "n": n},
    )


# ---------------------------------------------------------------------------
# polar helpers

def _ring_nodes(radii, thetas):
    """Node array for a full polar grid: origin excluded, ring-major order."""
    r = np.repeat(radii, len(thetas))
    t = np.tile(thetas, len(radii))
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def _band_radii(r0, r1, dr, minimum=1):
    k = max(minimum, int(round((r1 - r0) / dr)))
    return np.linspace(r0, r1, k + 1)


# ---------------------------------------------------------------------------
# graded disk (exterior corrector domain)

def graded_disk_mesh(radius, target_nodes, inclusion_radius=1.0):
    """Disk of given radius with a resolved unit inclusion at the origin.

    Rings are uniform inside the inclusion and geometric outside so element
    aspect ratios stay near one. The triangulation is mirror symmetric about
    the x axis, which keeps spurious transverse response components at the
    discretization floor. Node count lands within a factor two of target.
    """
    if radius <= inclusion_radius:
        raise ConfigurationError("disk radius must exceed the inclusion radius")
    if target_nodes < 60:
        raise ConfigurationError("graded_disk_mesh needs target_nodes >= 60")

    # nodes ~= n_t * (n_inner + ln(R)/dtheta), dtheta = 2 pi / n_t
    lnR = np.log(radius / inclusion_radius)
    best = None
    for n_t in range(8, 4096, 2):
        dth = 2 * np.pi / n_t
        n_inner = max(3, int(round(1.0 / dth)))
        n_outer = max(2, int(np.ceil(lnR / np.log1p(dth))))
        count = 1 + n_t * (n_inner + n_outer)
        if best is None or abs(count - target_nodes) < abs(best[0] - target_nodes):
            best = (count, n_t, n_inner, n_outer)
        if count > 2.5 * target_nodes:
            break
    _, n_t, n_inner, n_outer = best

    inner = np.linspace(0.0, inclusion_radius, n_inner + 1)[1:]
    ratio = (radius / inclusion_radius) ** (1.0 / n_outer)
    outer = inclusion_radius * ratio ** np.arange(1, n_outer + 1)
    outer[-1] = radius
    radii = np.concatenate([inner, outer])
    thetas = np.arange(n_t) * (2 * np.pi / n_t)

    verts = np.vstack([[[0.0, 0.0]], _ring_nodes(radii, thetas)])

    def nid(ring, j):
        return 1 + ring * n_t + (j % n_t)

    tris = []
    # central fan
    for j in range(n_t):
        tris.append((0, nid(0, j), nid(0, j + 1)))
    # ring strips; diagonal flips across the x axis for mirror symmetry
    for ring in range(len(radii) - 1):
        for j in range(n_t):
            a, b = nid(ring, j), nid(ring, j + 1)
            c, d = nid(ring + 1, j), nid(ring + 1, j + 1)
            if j < n_t // 2:
                tris.append((a, b, d))
                tris.append((a, d, c))
            else:
                tris.append((a, b, c))
                tris.append((b, d, c))
    tris = np.asarray(tris, dtype=np.int32)

    cent = verts[tris].mean(axis=1)
    rc = np.hypot(cent[:, 0], cent[:, 1])
    region = np.where(rc < inclusion_radius, 0, 1).astype(np.int16)

    last = len(radii) - 1
    edges = np.asarray([(nid(last, j), nid(last, j + 1)) for j in range(n_t)],
                       dtype=np.int32)
    dirich = np.unique(edges.ravel()).astype(np.int32)
    return Mesh(
        vertices=verts,
        triangles=_orient_ccw(verts, tris),
        region_id=region,
        region_names=("inclusion", "exterior"),
        boundary_edges=edges,
        boundary_tags=np.full(len(edges), TAG_DIRICHLET, dtype=np.int16),
        pair_master=np.zeros(0, dtype=np.int32),
        pair_slave=np.zeros(0, dtype=np.int32),
        dirichlet_nodes=dirich,
        meta={"kind": "graded_disk", "radius": float(radius),
              "inclusion_radius": float(inclusion_radius), "n_theta": n_t},
    )


# ---------------------------------------------------------------------------
# machine sector benchmark

@dataclass(frozen=True)
class MachineGeometry:
    """Geometry of one 45-degree pole of the benchmark machine (meters/radians).

    The layout is a stand-in with the qualitative features of an interior
    permanent magnet machine: shaft, design annulus with two magnet pockets,
    air gap, stator with three coil slots. Angular windows are (lo, hi) pairs
    within the sector.
    """

    r_shaft: float = 0.020
    r_design: float = 0.050
    r_gap_outer: float = 0.051
    r_outer: float = 0.080
    sector: float = np.pi / 4
    magnet_r: tuple = (0.040, 0.047)
    magnet1_window: tuple = (np.deg2rad(4.0), np.deg2rad(18.0))
    magnet2_window: tuple = (np.deg2rad(27.0), np.deg2rad(41.0))
    coil_r: tuple = (0.052, 0.064)
    coil_A_window: tuple = (np.deg2rad(1.0), np.deg2rad(13.0))
    coil_B_window: tuple = (np.deg2rad(16.0), np.deg2rad(28.0))
    coil_C_window: tuple = (np.deg2rad(31.0), np.deg2rad(43.0))
    target_nodes: int = 4000

    def validate(self):
        radii = (0.0, self.r_shaft, self.r_design, self.r_gap_outer, self.r_outer)
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigurationError("machine radii must be strictly increasing")
        if not (self.r_shaft <= self.magnet_r[0] < self.magnet_r[1] <= self.r_design):
            raise ConfigurationError("magnet band must sit inside the design annulus")
        if not (self.r_gap_outer <= self.coil_r[0] < self.coil_r[1] <= self.r_outer):
            raise ConfigurationError("coil band must sit inside the stator")
        if self.sector <= 0 or self.sector > np.pi:
            raise ConfigurationError("sector angle out of range")
        if self.target_nodes < 200:
            raise ConfigurationError("target_nodes too small for the machine sector")
        for lo, hi in (self.magnet1_window, self.magnet2_window,
                       self.coil_A_window, self.coil_B_window, self.coil_C_window):
            if not (0.0 <= lo < hi <= self.sector):
                raise ConfigurationError("angular window outside the sector")


def _machine_ring_radii(geo, m_ang):
    """Ring radii: band boundaries are exact rings, spacing tracks r*dtheta."""
    dth = geo.sector / m_ang
    bands = [
        (geo.r_shaft, geo.magnet_r[0], 1),
        (geo.magnet_r[0], geo.magnet_r[1], 1),
        (geo.magnet_r[1], geo.r_design, 1),
        (geo.r_design, geo.r_gap_outer, 3),
        (geo.r_gap_outer, geo.coil_r[0], 1),
        (geo.coil_r[0], geo.coil_r[1], 1),
        (geo.coil_r[1], geo.r_outer, 1),
    ]
    # the shaft is magnetically passive; a handful of rings is plenty
    r_fan = geo.r_shaft / 4
    radii = [np.geomspace(r_fan, geo.r_shaft, max(4, m_ang // 6))]
    for r0, r1, kmin in bands:
        if r1 <= r0:
            # coincident band boundaries (e.g. magnets flush with the gap)
            continue
        dr = dth * 0.5 * (r0 + r1)
        radii.append(_band_radii(r0, r1, dr, minimum=kmin)[1:])
    return np.concatenate(radii)


def build_machine_mesh(geo=None):
    """Mesh one 45-degree pole; returns a Mesh with the nine machine regions."""
    geo = geo or MachineGeometry()
    geo.validate()

    # calibrate the angular count so node totals land near the target
    best = None
    for m_ang in range(6, 600):
        n_r = len(_machine_ring_radii(geo, m_ang))
        count = 1 + n_r * (m_ang + 1)
        if best is None or abs(count - geo.target_nodes) < abs(best[0] - geo.target_nodes):
            best = (count, m_ang)
        if count > 2.5 * geo.target_nodes:
            break
    m_ang = best[1]

    radii = _machine_ring_radii(geo, m_ang)
    thetas = np.linspace(0.0, geo.sector, m_ang + 1)
    verts = np.vstack([[[0.0, 0.0]], _ring_nodes(radii, thetas)])
    n_t = m_ang + 1

    def nid(ring, j):
        return 1 + ring * n_t + j

    tris = []
    for j in range(m_ang):
        tris.append((0, nid(0, j), nid(0, j + 1)))
    for ring in range(len(radii) - 1):
        for j in range(m_ang):
            a, b = nid(ring, j), nid(ring, j + 1)
            c, d = nid(ring + 1, j), nid(ring + 1, j + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    tris = np.asarray(tris, dtype=np.int32)

    cent = verts[tris].mean(axis=1)
    rc = np.hypot(cent[:, 0], cent[:, 1])
    tc = np.arctan2(cent[:, 1], cent[:, 0])

    def in_window(win):
        return (tc >= win[0]) & (tc < win[1])

    region = np.full(len(tris), MACHINE_REGIONS.index("shaft"), dtype=np.int16)
    design_band = (rc >= geo.r_shaft) & (rc < geo.r_design)
    region[design_band] = MACHINE_REGIONS.index("design")
    magnet_band = design_band & (rc >= geo.magnet_r[0]) & (rc < geo.magnet_r[1])
    region[magnet_band & in_window(geo.magnet1_window)] = MACHINE_REGIONS.index("magnet1")
    region[magnet_band & in_window(geo.magnet2_window)] = MACHINE_REGIONS.index("magnet2")
    gap_band = (rc >= geo.r_design) & (rc < geo.r_gap_outer)
    region[gap_band] = MACHINE_REGIONS.index("air_gap")
    stator_band = rc >= geo.r_gap_outer
    region[stator_band] = MACHINE_REGIONS.index("stator_iron")
    coil_band = stator_band & (rc >= geo.coil_r[0]) & (rc < geo.coil_r[1])
    region[coil_band & in_window(geo.coil_A_window)] = MACHINE_REGIONS.index("coil_A")
    region[coil_band & in_window(geo.coil_B_window)] = MACHINE_REGIONS.index("coil_B")
    region[coil_band & in_window(geo.coil_C_window)] = MACHINE_REGIONS.index("coil_C")

    last = len(radii) - 1
    edges, tags = [], []
    for j in range(m_ang):
        edges.append((nid(last, j), nid(last, j + 1)))
        tags.append(TAG_DIRICHLET)
    # straight sector edges: theta=0 is the master side, theta=sector the slave
    edges.append((0, nid(0, 0)))
    tags.append(TAG_MASTER)
    edges.append((0, nid(0, m_ang)))
    tags.append(TAG_SLAVE)
    for ring in range(len(radii) - 1):
        edges.append((nid(ring, 0), nid(ring + 1, 0)))
        tags.append(TAG_MASTER)
        edges.append((nid(ring, m_ang), nid(ring + 1, m_ang)))
        tags.append(TAG_SLAVE)
    edges = np.asarray(edges, dtype=np.int32)
    tags = np.asarray(tags, dtype=np.int16)

    masters = np.array([nid(r, 0) for r in range(len(radii))], dtype=np.int32)
    slaves = np.array([nid(r, m_ang) for r in range(len(radii))], dtype=np.int32)

    outer_nodes = np.array([nid(last, j) for j in range(m_ang + 1)], dtype=np.int32)
    # the apex sits on both straight edges, so antiperiodicity pins it to zero
    dirich = np.unique(np.concatenate([outer_nodes, [0]])).astype(np.int32)
    keep = ~np.isin(masters, dirich) & ~np.isin(slaves, dirich)

    mesh = Mesh(
        vertices=verts,
        triangles=_orient_ccw(verts, tris),
        region_id=region,
        region_names=MACHINE_REGIONS,
        boundary_edges=edges,
        boundary_tags=tags,
        pair_master=masters[keep],
        pair_slave=slaves[keep],
        dirichlet_nodes=dirich,
        meta={"kind": "machine_sector", "m_ang": m_ang, "sector": float(geo.sector),
              "r_design": float(geo.r_design), "r_shaft": float(geo.r_shaft),
              "r_gap_outer": float(geo.r_gap_outer)},
    )
    for name in MACHINE_REGIONS:
        if len(mesh.elements_in(name)) == 0:
            raise ConfigurationError(
                f"meshed machine has an empty region {name!r}; "
                "increase target_nodes or widen the window")
    return mesh


# ---------------------------------------------------------------------------
# conforming disc patches (perturbation meshes for sensitivity audits)

def _zip_rings(ids_out, ang_out, ids_in, ang_in):
    """Triangulate the annulus between two node rings ordered by angle."""
    n_o, n_i = len(ids_out), len(ids_in)
    base = ang_out[0]
    a = np.mod(ang_out - base, 2 * np.pi)
    b_raw = np.mod(ang_in - base, 2 * np.pi)
    shift = int(np.argmin(b_raw))
    ids_in = np.roll(ids_in, -shift)
    b = np.roll(b_raw, -shift)
    tris = []
    i = j = 0
    while i < n_o or j < n_i:
        a_next = a[i + 1] if i + 1 < n_o else a[0] + 2 * np.pi
        b_next = b[j + 1] if j + 1 < n_i else b[0] + 2 * np.pi
        if i < n_o and (j >= n_i or a_next <= b_next):
            tris.append((ids_out[i], ids_in[j % n_i],
                         ids_out[(i + 1) % n_o]))
            i += 1
        else:
            tris.append((ids_out[i % n_o], ids_in[j % n_i],
                         ids_in[(j + 1) % n_i]))
            j += 1
    return tris


def refine_disc_patch(mesh, center, radius, region="design", cavity=None):
    """Remesh a neighborhood of one point so a disc of the given radius is an
    exact union of elements.

    Elements with a vertex inside the cavity radius (default 1.4x the disc)
    are carved out and refilled with a polar fan: uniform rings through the
    circle itself, then geometrically growing rings out to the cavity rim so
    the local field perturbation stays resolved even when the disc is much
    smaller than the ambient elements. All touched elements must belong to
    one region and stay clear of boundaries and interface rings. Returns the
    new mesh and the ids of the elements tiling the disc.
    """
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise UsageError("disc radius must be positive")
    if cavity is None:
        cavity = 1.4 * radius
    if cavity < 1.2 * radius:
        raise UsageError("cavity radius must exceed the disc radius")
    target = mesh.region_index(region)
    dist = np.hypot(mesh.vertices[:, 0] - center[0],
                    mesh.vertices[:, 1] - center[1])
    cut = dist < cavity
    remove = cut[mesh.triangles].any(axis=1)
    if not remove.any():
        raise UsageError("disc patch does not overlap any element")
    if np.any(mesh.region_id[remove] != target):
        raise UsageError("disc patch overlaps a region boundary; "
                         "move the sample point or shrink the radius")

    kept_tris = mesh.triangles[~remove]
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[kept_tris.ravel()] = True
    removed_nodes = np.unique(mesh.triangles[remove].ravel())
    stranded = removed_nodes[~used[removed_nodes]]
    special = np.concatenate([mesh.dirichlet_nodes, mesh.pair_master,
                              mesh.pair_slave])
    if np.isin(stranded, special).any():
        raise UsageError("disc patch would remove a constrained node")

    ring = removed_nodes[used[removed_nodes]]
    if len(ring) < 4:
        raise UsageError("disc patch cavity is too small to remesh")
    rel = mesh.vertices[ring] - center
    ring_r = np.hypot(rel[:, 0], rel[:, 1])
    if ring_r.min() <= radius * (1 + 1e-9):
        raise UsageError("cavity rim touches the disc; increase margin")
    order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))
    ring = ring[order]
    ring_ang = np.arctan2(rel[order, 1], rel[order, 0])

    # polar fill: uniform rings through the circle, geometric rings out to
    # the rim so the perturbation field stays resolved past the disc
    n_seg = 48
    n_inner = 6
    radii = [radius * k / n_inner for k in range(1, n_inner + 1)]
    r_k = radius
    while 1.32 * r_k < 0.8 * ring_r.min():
        r_k *= 1.32
        radii.append(r_k)

    old_index = np.full(mesh.n_nodes, -1, dtype=np.int64)
    old_index[used] = np.arange(used.sum())
    new_verts = [mesh.vertices[used]]
    next_id = used.sum()

    ring_ids, ring_angles = [], []
    for k, r_k in enumerate(radii):
        n_k = n_seg if k >= n_inner else max(6, round(n_seg * (k + 1) / n_inner))
        ang = 2 * np.pi * (np.arange(n_k) + 0.5 * (k % 2)) / n_k
        pts = center + r_k * np.column_stack([np.cos(ang), np.sin(ang)])
        ids = np.arange(next_id, next_id + n_k)
        next_id += n_k
        new_verts.append(pts)
        ring_ids.append(ids)
        ring_angles.append(ang)
    center_id = next_id
    next_id += 1
    new_verts.append(center[None, :])

    patch = [(center_id, ring_ids[0][j], ring_ids[0][(j + 1) % len(ring_ids[0])])
             for j in range(len(ring_ids[0]))]
    for k in range(len(ring_ids) - 1):
        strip = _zip_rings(ring_ids[k + 1], ring_angles[k + 1],
                           ring_ids[k], ring_angles[k])
        patch.extend(strip)
        if k == n_inner - 2:
            n_disc = len(patch)
    patch.extend(_zip_rings(old_index[ring], ring_ang,
                            ring_ids[-1], ring_angles[-1]))

    verts = np.vstack(new_verts)
    tris = np.vstack([old_index[kept_tris],
                      np.asarray(patch, dtype=np.int64)]).astype(np.int32)
    region_id = np.concatenate([
        mesh.region_id[~remove],
        np.full(len(patch), target, dtype=np.int16)])
    tris = _orient_ccw(verts, tris)

    out = Mesh(
        vertices=verts,
        triangles=tris,
        region_id=region_id,
        region_names=mesh.region_names,
        boundary_edges=old_index[mesh.boundary_edges].astype(np.int32),
        boundary_tags=mesh.boundary_tags.copy(),
        pair_master=old_index[mesh.pair_master].astype(np.int32),
        pair_slave=old_index[mesh.pair_slave].astype(np.int32),
        dirichlet_nodes=old_index[mesh.dirichlet_nodes].astype(np.int32),
        meta=dict(mesh.meta, patch_center=tuple(center),
                  patch_radius=float(radius), patch_cavity=float(cavity)),
    )
    n_kept = int((~remove).sum())
    disc = np.arange(n_kept, n_kept + n_disc, dtype=np.int64)
    cen = out.centroids()[disc]
    inside = np.hypot(cen[:, 0] - center[0], cen[:, 1] - center[1]) < radius
    if not inside.all():
        raise SolverError("disc patch triangulation leaked outside the circle")
    return out, disc


# ---------------------------------------------------------------------------
# persistence

def save_mesh(mesh, path):
    buf = io.StringIO()
    buf.write(f"{MESH_FORMAT}\n")
    buf.write(f"regions {' '.join(mesh.region_names)}\n")
    buf.write(f"vertices {mesh.n_nodes}\n")
    for x, y in mesh.vertices:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    buf.write(f"triangles {mesh.n_elements}\n")
    for (a, b, c), r in zip(mesh.triangles, mesh.region_id):
        buf.write(f"{a} {b} {c} {r}\n")
    buf.write(f"boundary_edges {len(mesh.boundary_edges)}\n")
    for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        buf.write(f"{a} {b} {t}\n")
    buf.write(f"pairs {len(mesh.pair_master)}\n")
    for a, b in zip(mesh.pair_master, mesh.pair_slave):
        buf.write(f"{a} {b}\n")
    buf.write(f"dirichlet {len(mesh.dirichlet_nodes)}\n")
    for a in mesh.dirichlet_nodes:
        buf.write(f"{a}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def load_mesh(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != MESH_FORMAT:
        raise FormatError(f"{path}: expected a {MESH_FORMAT} file")
    pos = 1

    def take_header(keyword):
        nonlocal pos
        parts = lines[pos].split()
        if parts[0] != keyword:
            raise FormatError(f"{path}: expected '{keyword}' section at line {pos + 1}")
        pos += 1
        return parts[1:]

    names = tuple(take_header("regions"))
    n = int(take_header("vertices")[0])
    verts = np.array([[float(v) for v in lines[pos + i].split()] for i in range(n)])
    pos += n
    m = int(take_header("triangles")[0])
    rows = np.array([[int(v) for v in lines[pos + i].split()] for i in range(m)],
                    dtype=np.int64)
    pos += m
    tris, region = rows[:, :3].astype(np.int32), rows[:, 3].astype(np.int16)
    b = int(take_header("boundary_edges")[0])
    rows = (np.array([[int(v) for v in lines[pos + i].split()] for i in range(b)],
                     dtype=np.int64) if b else np.zeros((0, 3), dtype=np.int64))
    pos += b
    edges, tags = rows[:, :2].astype(np.int32), rows[:, 2].astype(np.int16)
    p = int(take_header("pairs")[0])
    rows = (np.array([[int(v) for v in lines[pos + i].split()] for i in range(p)],
                     dtype=np.int64) if p else np.zeros((0, 2), dtype=np.int64))
    pos += p
    d = int(take_header("dirichlet")[0])
    dirich = np.array([int(lines[pos + i]) for i in range(d)], dtype=np.int32)
    return Mesh(
        vertices=verts, triangles=tris, region_id=region, region_names=names,
        boundary_edges=edges, boundary_tags=tags,
        pair_master=rows[:, 0].astype(np.int32), pair_slave=rows[:, 1].astype(np.int32),
        dirichlet_nodes=dirich, meta={"kind": "loaded"},
    )
