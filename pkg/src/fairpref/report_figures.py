"""Render sweep curve CSVs to PNG figures next to the delimited output."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _read_curve(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, body


def _col(header, body, name, cast=float):
    idx = header.index(name)
    return [cast(row[idx]) if row[idx] != "" else None for row in body]


def render_all(out_dir: str):
    """Render every available curve; returns a list of written file names."""
    written = []
    curves = os.path.join(out_dir, "curves")
    with plt.rc_context(STYLE):
        written += _render_minority(curves)
        written += _render_error(curves)
        written += _render_kl(curves)
        written += _render_nmaxmin(curves)
    return [os.path.join("curves", name) for name in written]


def _save(fig, curves, name):
    fig.savefig(os.path.join(curves, name))
    plt.close(fig)
    return [name]


def _render_minority(curves):
    path = os.path.join(curves, "minority_vs_proportion.csv")
    if not os.path.exists(path):
        return []
    header, body = _read_curve(path)
    props = _col(header, body, "proportion")
    methods = _col(header, body, "method", cast=str)
    subopt = _col(header, body, "median_minority_subopt")
    fig, ax = plt.subplots()
    for method in sorted(set(methods)):
        xs = [p for p, m in zip(props, methods) if m == method]
        ys = [s for s, m in zip(subopt, methods) if m == method]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("minority proportion")
    ax.set_ylabel("median minority suboptimality")
    ax.legend()
    return _save(fig, curves, "minority_vs_proportion.png")


def _render_error(curves):
    path = os.path.join(curves, "error_vs_n.csv")
    if not os.path.exists(path):
        return []
    header, body = _read_curve(path)
    ns = _col(header, body, "n")
    methods = _col(header, body, "method", cast=str)
    groups = _col(header, body, "group", cast=int)
    errs = _col(header, body, "median_param_error")
    fig, ax = plt.subplots()
    for method in sorted(set(methods)):
        for group in sorted(set(groups)):
            sel = [(n, e) for n, m, g, e in zip(ns, methods, groups, errs)
                   if m == method and g == group and e is not None]
            if sel:
                ax.loglog(*zip(*sel), marker="o", label=f"{method} u={group}")
    ax.set_xlabel("N")
    ax.set_ylabel("median parameter error")
    ax.legend(fontsize=8)
    return _save(fig, curves, "error_vs_n.png")


def _render_kl(curves):
    path = os.path.join(curves, "kl_vs_n.csv")
    if not os.path.exists(path):
        return []
    header, body = _read_curve(path)
    if not body:
        return []
    ns = _col(header, body, "n")
    groups = _col(header, body, "group", cast=int)
    kls = _col(header, body, "median_measured_kl")
    bounds = _col(header, body, "median_bound_leading_term")
    fig, ax = plt.subplots()
    for group in sorted(set(groups)):
        sel = [(n, k, b) for n, g, k, b in zip(ns, groups, kls, bounds)
               if g == group and k is not None]
        if sel:
            xs, ys, bs = zip(*sel)
            ax.loglog(xs, ys, marker="o", label=f"measured u={group}")
            ax.loglog(xs, bs, marker="x", linestyle="--", label=f"bound u={group}")
    ax.set_xlabel("N")
    ax.set_ylabel("Gibbs KL (nats)")
    ax.legend(fontsize=8)
    return _save(fig, curves, "kl_vs_n.png")


def _render_nmaxmin(curves):
    path = os.path.join(curves, "nmaxmin_vs_delta.csv")
    if not os.path.exists(path):
        return []
    header, body = _read_curve(path)
    deltas = _col(header, body, "delta_min")
    ns = _col(header, body, "n_maxmin_unit_psi")
    regimes = _col(header, body, "regime", cast=str)
    fig, ax = plt.subplots()
    for regime in sorted(set(regimes)):
        sel = [(d, n) for d, n, r in zip(deltas, ns, regimes) if r == regime]
        if sel:
            ax.loglog(*zip(*sel), marker=".", label=regime)
    ax.set_xlabel("minimum entropy gap")
    ax.set_ylabel("identification sample cost (unit psi)")
    ax.legend()
    return _save(fig, curves, "nmaxmin_vs_delta.png")
