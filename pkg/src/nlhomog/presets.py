"""Closed-form data fields selectable by name from the command line and configs.

A preset string reads ``name[:args]`` with an optional ``preset:`` prefix:

* ``zero``
* ``const`` or ``const:a,b`` (default ``1,0``)
* ``trig`` or ``trig:amp`` giving
  ``amp * (sin(pi x1) cos(pi x2), cos(pi x1) sin(pi x2))``
* ``linear`` or ``linear:a`` giving ``a * (x1, x2)``
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def parse_field(spec):
    """Turn a preset string (or a callable) into a vectorized function of points."""
    if callable(spec):
        return spec
    text = str(spec).strip()
    if text.startswith("preset:"):
        text = text[len("preset:"):]
    name, _, args = text.partition(":")
    vals = [float(t) for t in args.split(",") if t.strip()] if args else []
    if name == "zero":
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    if name == "const":
        c = np.array((vals + [1.0, 0.0][len(vals):])[:2] if vals else [1.0, 0.0])
        return lambda x: np.broadcast_to(c, np.shape(x)).copy()
    if name == "trig":
        amp = vals[0] if vals else 1.0

        def trig(x):
            x = np.asarray(x, dtype=float)
            s, c = np.sin(np.pi * x), np.cos(np.pi * x)
            return amp * np.column_stack([s[:, 0] * c[:, 1], c[:, 0] * s[:, 1]])

        return trig
    if name == "linear":
        a = vals[0] if vals else 1.0
        return lambda x: a * np.asarray(x, dtype=float)
    raise ValidationError(f"unknown field preset {spec!r}")


def interpolate(fn, nodes):
    """Nodal interpolant of a vector field as a DOF-interleaved vector."""
    vals = np.asarray(fn(np.asarray(nodes, dtype=float)), dtype=float)
    if vals.shape != (len(nodes), 2):
        raise ValidationError(f"field returned shape {vals.shape}, expected ({len(nodes)}, 2)")
    return vals.ravel()
