"""Matplotlib figures written next to the delimited report output.

Mesh snapshots become colored cell diagrams (2D space-time cylinders
only); the convergence figure tracks error norms and estimators against
the number of unknowns on log-log axes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

__all__ = ["mesh_figure", "convergence_figure"]


def _cell_polygon(geo, box, pts_per_edge=5):
    """Closed polygon tracing a (possibly curved) 2D cell boundary."""
    lo, hi = box[:, 0], box[:, 1]
    s = np.linspace(0.0, 1.0, pts_per_edge)
    edges = [
        np.column_stack([lo[0] + s * (hi[0] - lo[0]), np.full_like(s, lo[1])]),
        np.column_stack([np.full_like(s, hi[0]), lo[1] + s * (hi[1] - lo[1])]),
        np.column_stack([hi[0] - s * (hi[0] - lo[0]), np.full_like(s, hi[1])]),
        np.column_stack([np.full_like(s, lo[0]), hi[1] - s * (hi[1] - lo[1])]),
    ]
    ring = np.vstack(edges)
    return geo.eval(ring, nderiv=0).x


def mesh_figure(snapshot, eta2, geo, path, color_by="level"):
    """Render a 2D mesh snapshot to ``path``; returns False for 3D meshes."""
    if geo.dim != 2:
        return False
    polys = []
    values = []
    for lv, cell, box in snapshot:
        polys.append(_cell_polygon(geo, np.asarray(box)))
        if color_by == "eta2" and eta2 is not None:
            values.append(eta2.get((lv, cell), 0.0))
        else:
            values.append(lv)
    fig, ax = plt.subplots(figsize=(5, 5))
    coll = PolyCollection(polys, array=np.array(values, dtype=float),
                          cmap="viridis", edgecolors="black", linewidths=0.4)
    ax.add_collection(coll)
    allpts = np.vstack(polys)
    ax.set_xlim(allpts[:, 0].min(), allpts[:, 0].max())
    ax.set_ylim(allpts[:, 1].min(), allpts[:, 1].max())
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    fig.colorbar(coll, ax=ax, label=color_by)
    ax.set_title(f"{len(snapshot)} active cells")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def convergence_figure(records, path):
    """Log-log convergence plot of norms and estimators against d.o.f."""
    dofs = np.array([r.report.dof_u for r in records], dtype=float)

    def series(getter):
        vals = []
        for r in records:
            v = getter(r.report)
            vals.append(np.nan if v is None else float(v))
        return np.array(vals)

    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    curves = [
        (series(lambda rep: rep.grad_err), "o-", "spatial-gradient error"),
        (series(lambda rep: rep.triple_loc), "s-", "scheme norm"),
        (series(lambda rep: rep.triple_L), "d-", "operator norm"),
        (series(lambda rep: np.sqrt(rep.MI) if rep.MI is not None else None),
         "^--", "majorant"),
        (series(lambda rep: np.sqrt(max(rep.MII, 0.0))
                if rep.MII is not None else None), "v--", "advanced majorant"),
        (series(lambda rep: rep.EId), "x--", "error identity"),
    ]
    for vals, style, label in curves:
        if np.all(np.isnan(vals)) or np.nanmax(vals) <= 0:
            continue
        ax.loglog(dofs, vals, style, label=label, markersize=4)
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("error / bound")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True
