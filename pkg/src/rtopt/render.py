"""Standalone SVG renders of machine designs.

Design elements are colored by material (iron/air), fixed regions get a
muted tint, and the zero contour of the nodal level-set field is drawn by
marching the design triangles. Coordinates are emitted in millimeters.
"""
from __future__ import annotations

import io

import numpy as np

from .errors import UsageError

REGION_FILL = {
    "shaft": "#f4f4f4",
    "design": None,
    "magnet1": "#e08a4f",
    "magnet2": "#cf6f33",
    "air_gap": "#edf3fa",
    "stator_iron": "#a3a9b2",
    "coil_A": "#9dc4e6",
    "coil_B": "#b5d8a6",
    "coil_C": "#e6cb9d",
}
DESIGN_IRON_FILL = "#474c54"
DESIGN_AIR_FILL = "#ffffff"
CONTOUR_STROKE = "#c8102e"
MM = 1000.0


def _path_for(points, triangles):
    chunks = []
    for tri in triangles:
        p = points[tri]
        chunks.append("M{:.3f} {:.3f}L{:.3f} {:.3f}L{:.3f} {:.3f}Z".format(
            p[0, 0], p[0, 1], p[1, 0], p[1, 1], p[2, 0], p[2, 1]))
    return "".join(chunks)


def _contour_segments(points, triangles, values):
    """Zero-crossing segments of a nodal field, one per mixed-sign triangle."""
    segs = []
    v = np.asarray(values, dtype=float)
    sign = np.where(v >= 0.0, 1, -1)
    for tri in triangles:
        s = sign[tri]
        if abs(int(s.sum())) == 3:
            continue
        crossings = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ia, ib = tri[a], tri[b]
            if sign[ia] == sign[ib]:
                continue
            t = v[ia] / (v[ia] - v[ib])
            crossings.append(points[ia] + t * (points[ib] - points[ia]))
        if len(crossings) == 2:
            segs.append((crossings[0], crossings[1]))
    return segs


def render_design_svg(mesh, design=None, psi=None, design_nodes=None,
                      title="design"):
    """Return the SVG document for one design as a string.

    design is the per-design-element iron mask; psi (with design_nodes) adds
    the zero contour. Either may be omitted.
    """
    pts = mesh.vertices * MM
    names = mesh.region_names
    rid = mesh.region_id

    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    pad = 0.03 * max(xmax - xmin, ymax - ymin)
    width = (xmax - xmin) + 2 * pad
    height = (ymax - ymin) + 2 * pad

    # SVG y runs downward; flip about the box's vertical center
    flipped = pts.copy()
    flipped[:, 1] = (ymax + ymin) - pts[:, 1]

    buf = io.StringIO()
    buf.write('<svg xmlns="http://www.w3.org/2000/svg" '
              f'viewBox="{xmin - pad:.3f} {ymin - pad:.3f} '
              f'{width:.3f} {height:.3f}" '
              f'width="640" height="{640 * height / width:.0f}">\n')
    buf.write(f"<title>{title}</title>\n")
    buf.write(f'<rect x="{xmin - pad:.3f}" y="{ymin - pad:.3f}" '
              f'width="{width:.3f}" height="{height:.3f}" fill="#fbfbfc"/>\n')

    hair = 0.0015 * max(width, height)
    design_idx = None
    if "design" in names:
        design_idx = names.index("design")

    for name in names:
        if name == "design":
            continue
        fill = REGION_FILL.get(name, "#dddddd")
        tris = mesh.triangles[rid == names.index(name)]
        if len(tris) == 0:
            continue
        buf.write(f'<path fill="{fill}" stroke="{fill}" '
                  f'stroke-width="{hair:.4f}" '
                  f'd="{_path_for(flipped, tris)}"/>\n')

    if design_idx is not None:
        elems = np.flatnonzero(rid == design_idx)
        tris = mesh.triangles[elems]
        if design is None:
            mask = np.ones(len(elems), dtype=bool)
        else:
            mask = np.asarray(design, dtype=bool)
            if mask.shape != (len(elems),):
                raise UsageError("design mask length does not match the mesh")
        for fill, sel in ((DESIGN_IRON_FILL, mask), (DESIGN_AIR_FILL, ~mask)):
            if not sel.any():
                continue
            buf.write(f'<path fill="{fill}" stroke="{fill}" '
                      f'stroke-width="{hair:.4f}" '
                      f'd="{_path_for(flipped, tris[sel])}"/>\n')

        if psi is not None:
            if design_nodes is None:
                raise UsageError("psi needs design_nodes to locate its values")
            full = np.zeros(mesh.n_nodes)
            full[np.asarray(design_nodes)] = np.asarray(psi, dtype=float)
            segs = _contour_segments(flipped, tris, full)
            if segs:
                d = "".join("M{:.3f} {:.3f}L{:.3f} {:.3f}".format(
                    a[0], a[1], b[0], b[1]) for a, b in segs)
                buf.write(f'<path fill="none" stroke="{CONTOUR_STROKE}" '
                          f'stroke-width="{3 * hair:.4f}" '
                          f'stroke-linecap="round" d="{d}"/>\n')

    buf.write("</svg>\n")
    return buf.getvalue()


def save_design_svg(path, mesh, design=None, psi=None, design_nodes=None,
                    title="design"):
    doc = render_design_svg(mesh, design, psi, design_nodes, title)
    with open(path, "w") as f:
        f.write(doc)
    return path
