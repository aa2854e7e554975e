"""Small numerical helpers: 1-d search, extrapolation, deterministic output."""
from __future__ import annotations

import csv
import json
import math

import numpy as np

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(fun, lo, hi, xtol=1e-10, max_iter=200):
    """Minimize a unimodal function on [lo, hi]; returns (x, f(x))."""
    a, b = float(lo), float(hi)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if abs(b - a) <= xtol * (1.0 + abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def bracket_minimum(fun, x0, step, grow=2.0, max_iter=200):
    """Walk downhill from x0 until a bracket (lo, hi) around a minimum is found.

    The function is assumed convex (or at least unimodal).
    """
    f0 = fun(x0)
    f1 = fun(x0 + step)
    if f1 > f0:
        step = -step
        f1 = fun(x0 + step)
        if f1 >= f0:
            return min(x0 - abs(step), x0 + abs(step)), max(x0 - abs(step), x0 + abs(step))
    a = x0
    b, fb = x0 + step, f1
    for _ in range(max_iter):
        step *= grow
        c = b + step
        fc = fun(c)
        if fc >= fb:
            return (min(a, c), max(a, c))
        a, b, fb = b, c, fc
    raise RuntimeError("could not bracket a minimum (objective unbounded below?)")


def neville_at_zero(xs, ys):
    """Value at 0 of the interpolating polynomial through (xs, ys)."""
    xs = np.asarray(xs, dtype=float)
    p = np.array(ys, dtype=float)
    n = len(xs)
    for m in range(1, n):
        for i in range(n - m):
            p[i] = (xs[i + m] * p[i] - xs[i] * p[i + 1]) / (xs[i + m] - xs[i])
    return p[0]


def fmt(x):
    """17 significant digits, so that text output round-trips exactly."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(o, indent, level):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    if isinstance(o, dict):
        if not o:
            yield "{}"
            return
        parts = []
        for k, v in o.items():
            parts.append(json.dumps(k) + ": " + "".join(_encode(v, indent, level + 1)))
        yield "{" + pad + ("," + pad).join(parts) + end + "}"
    elif isinstance(o, list):
        if not o:
            yield "[]"
            return
        if all(not isinstance(v, (dict, list)) for v in o):
            yield "[" + ", ".join("".join(_encode(v, indent, level + 1)) for v in o) + "]"
            return
        parts = ["".join(_encode(v, indent, level + 1)) for v in o]
        yield "[" + pad + ("," + pad).join(parts) + end + "]"
    elif isinstance(o, bool) or o is None:
        yield json.dumps(o)
    elif isinstance(o, float):
        s = fmt(o)
        yield json.dumps(s) if s in ("nan", "inf", "-inf") else s
    elif isinstance(o, int):
        yield str(o)
    else:
        yield json.dumps(o)


def dumps_json(obj, indent=2):
    """Deterministic JSON with 17-significant-digit floats."""
    return "".join(_encode(_plain(obj), indent, 0)) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(obj))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) else v for v in row])
