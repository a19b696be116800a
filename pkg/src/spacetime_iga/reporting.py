"""Report rows, CSV export, and VTK mesh snapshots.

The CSV mirrors the benchmark table layout column for column: error norms
and effectivity indices first, then degrees of freedom, assembly/solve
times per unknown field, and the approximation-to-estimation time ratio.
Values are written in full-precision scientific notation so rate
post-processing loses nothing.
"""

import itertools
import json

import numpy as np

__all__ = ["CSV_COLUMNS", "report_rows", "export_report", "export_mesh",
           "write_metadata"]

CSV_COLUMNS = [
    "step",
    "grad_err",
    "ieff_MI",
    "ieff_MII",
    "err_loc_h",
    "err_L",
    "ieff_EId",
    "eoc_loc_h",
    "eoc_L",
    "dof_u",
    "dof_y",
    "dof_w",
    "t_as_u",
    "t_as_y",
    "t_as_w",
    "t_sol_u",
    "t_sol_y",
    "t_sol_w",
    "ratio_appr_est",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if np.isnan(v):
        return ""
    return f"{v:.17e}"


def _rates(records, key, scales):
    vals = [getattr(r.report, key) for r in records]
    out = [None] * len(records)
    for i in range(1, len(records)):
        a, b = vals[i - 1], vals[i]
        if a and b and a > 0 and b > 0 and scales[i - 1] > 0 and scales[i] > 0:
            out[i] = float(np.log(a / b) / np.log(scales[i - 1] / scales[i]))
    return out


def report_rows(records, spatial_dim, uniform, strict=False):
    """Rows (list of dicts keyed by CSV_COLUMNS) from loop step records.

    Rate columns use the mesh size for uniform runs and dof^(-1/(d+1))
    for adaptive ones.  ``strict`` zeroes the timing columns so reruns are
    byte-identical.
    """
    if uniform:
        scales = [r.h_max for r in records]
    else:
        scales = [r.report.dof_u ** (-1.0 / (spatial_dim + 1)) for r in records]
    eoc_loc = _rates(records, "triple_loc", scales)
    eoc_L = _rates(records, "triple_L", scales)
    rows = []
    for i, rec in enumerate(records):
        rep = rec.report
        t = dict(rep.timings or {})
        if strict:
            t = {}
        appr = t.get("t_as_u", 0.0) + t.get("t_sol_u", 0.0)
        est = (
            t.get("t_as_y", 0.0) + t.get("t_sol_y", 0.0)
            + t.get("t_as_w", 0.0) + t.get("t_sol_w", 0.0)
        )
        rows.append({
            "step": rec.step,
            "grad_err": rep.grad_err,
            "ieff_MI": rep.ieff_MI,
            "ieff_MII": rep.ieff_MII,
            "err_loc_h": rep.triple_loc,
            "err_L": rep.triple_L,
            "ieff_EId": rep.ieff_EId,
            "eoc_loc_h": eoc_loc[i],
            "eoc_L": eoc_L[i],
            "dof_u": rep.dof_u,
            "dof_y": rep.dof_y,
            "dof_w": rep.dof_w,
            "t_as_u": t.get("t_as_u", 0.0),
            "t_as_y": t.get("t_as_y", 0.0),
            "t_as_w": t.get("t_as_w", 0.0),
            "t_sol_u": t.get("t_sol_u", 0.0),
            "t_sol_y": t.get("t_sol_y", 0.0),
            "t_sol_w": t.get("t_sol_w", 0.0),
            "ratio_appr_est": (appr / est) if est > 0 else None,
        })
    return rows


def export_report(rows, path):
    """Write report rows as CSV with the fixed header."""
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in CSV_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cell_corners(box):
    return np.array(list(itertools.product(*[(lo, hi) for lo, hi in box])))


# C-ordered corner indices rearranged to the VTK cell conventions
_VTK_QUAD = [0, 2, 3, 1]
_VTK_HEX = [0, 4, 6, 2, 1, 5, 7, 3]


def export_mesh(snapshot, eta2, geo, path):
    """VTK legacy ASCII file of the active physical cells.

    Cells carry their hierarchy level and squared indicator value as cell
    data; corners are mapped through the geometry, so curved cells appear
    as their corner quadrilaterals/hexahedra.
    """
    D = geo.dim
    if D not in (2, 3):
        raise ValueError("VTK export supports 2- and 3-dimensional cylinders")
    order = _VTK_QUAD if D == 2 else _VTK_HEX
    ctype = 9 if D == 2 else 12
    points = []
    cells = []
    for lv, cell, box in snapshot:
        corners = geo.eval(_cell_corners(np.asarray(box)), nderiv=0).x
        base = len(points)
        points.extend(corners.tolist())
        cells.append([base + k for k in order])
    npts = len(points)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("space-time hierarchical mesh\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {npts} double\n")
        for pt in points:
            coords = list(pt) + [0.0] * (3 - D)
            fh.write(" ".join(f"{c:.17e}" for c in coords) + "\n")
        ncell = len(cells)
        fh.write(f"CELLS {ncell} {ncell * (len(order) + 1)}\n")
        for conn in cells:
            fh.write(str(len(conn)) + " " + " ".join(map(str, conn)) + "\n")
        fh.write(f"CELL_TYPES {ncell}\n")
        for _ in cells:
            fh.write(f"{ctype}\n")
        fh.write(f"CELL_DATA {ncell}\n")
        fh.write("SCALARS level int 1\nLOOKUP_TABLE default\n")
        for lv, cell, box in snapshot:
            fh.write(f"{lv}\n")
        fh.write("SCALARS eta2 double 1\nLOOKUP_TABLE default\n")
        for lv, cell, box in snapshot:
            val = 0.0 if eta2 is None else eta2.get((lv, cell), 0.0)
            fh.write(f"{val:.17e}\n")


def write_metadata(path, config, records, extra=None):
    """JSON run-metadata file: configuration echo plus per-step summary."""
    payload = {
        "config": config,
        "steps": [
            {
                "step": r.step,
                "dof_u": r.report.dof_u,
                "cells": len(r.snapshot),
                "timings": r.report.timings,
            }
            for r in records
        ],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
