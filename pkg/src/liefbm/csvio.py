"""Deterministic CSV and JSON emission for batch runs.

All floats go out in scientific notation with 17 significant digits so
a rerun with the same manifest reproduces files byte for byte; the
manifest itself carries no timestamp (wall-clock info lives in a
separate run_info file).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "format_value",
    "write_csv",
    "write_json",
    "sample_rows",
    "flow_rows",
    "signature_rows",
    "comparison_rows",
    "fit_rows",
    "eigenvalue_rows",
    "ibp_rows",
]


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.16e" % float(v)


def write_csv(path, header, rows):
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n", newline="\n")


def write_json(path, payload):
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", newline="\n"
    )


def sample_rows(sample):
    """Rows ``t, channel values``; a path batch stacks blocks of rows."""
    values = sample.values
    if values.ndim == 2:
        values = values[None]
    pts = sample.grid.points
    for p in range(values.shape[0]):
        for k in range(len(pts)):
            yield (pts[k], *values[p, :, k])


def flow_rows(path):
    """Rows ``t, row-major matrix entries``, stacked per path."""
    elements = path.elements
    if elements.ndim == 3:
        elements = elements[None]
    pts = path.grid.points
    for p in range(elements.shape[0]):
        for k in range(len(pts)):
            yield (pts[k], *elements[p, k].ravel())


def signature_rows(table):
    for word in sorted(table.values, key=lambda w: (len(w), w)):
        yield ("".join(str(a) for a in word), float(table.values[word]))


def comparison_rows(result):
    for row in result.rows:
        yield (row.label, row.value_a, row.value_b, row.z)


def fit_rows(fit):
    for c, stat in zip(fit.scales, fit.statistics):
        yield (c, stat)


def eigenvalue_rows(min_eigenvalues):
    vals = np.atleast_1d(np.asarray(min_eigenvalues, dtype=float))
    for p, v in enumerate(vals):
        yield (p, v)


def ibp_rows(lhs, rhs):
    for a, b in zip(np.atleast_1d(lhs), np.atleast_1d(rhs)):
        yield (a, b)
