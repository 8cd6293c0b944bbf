"""File formats: versioned JSON artifacts, JSONL traces, CSV populations, SVG.

Float fields are written with repr (shortest round-trip), so identical runs
produce byte-identical files on any platform with IEEE doubles.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .flows import (FactorizedDenoiser, PathSchedule, coupling_from_json_dict)

FORMAT_DENOISER = "areuredi/denoiser"
FORMAT_MANIFEST = "areuredi/manifest"


def save_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {p}: {e}") from e


def save_coupling(coupling, path) -> None:
    save_json(coupling.to_json_dict(), path)


def load_coupling(path):
    return coupling_from_json_dict(load_json(path))


def save_denoiser(d: FactorizedDenoiser, path) -> None:
    """Persist the denoiser as its defining data (coupling + parameters).

    Conditionals are exact deterministic functions of these, so they are
    recomputed lazily on load instead of being materialized into the file.
    """
    d._check_fitted()
    doc = {
        "format": FORMAT_DENOISER, "version": 1,
        "schedule": d.schedule_.to_json_dict(),
        "n_steps": d.n_steps, "context": d.context,
        "window": d.window, "smoothing": d.smoothing,
        "coupling": d.coupling_.to_json_dict(),
    }
    save_json(doc, path)


def load_denoiser(path) -> FactorizedDenoiser:
    doc = load_json(path)
    if doc.get("format") != FORMAT_DENOISER:
        raise ConfigError(f"{path} is not a denoiser document")
    coupling = coupling_from_json_dict(doc["coupling"])
    return FactorizedDenoiser(
        schedule=PathSchedule.from_json_dict(doc["schedule"]),
        n_steps=int(doc["n_steps"]), context=doc["context"],
        window=int(doc["window"]), smoothing=float(doc["smoothing"]),
    ).fit(coupling)


# ---------------------------------------------------------------------------
# Traces / populations
# ---------------------------------------------------------------------------


def trajectory_records(traj, chain: int):
    for it in range(traj.T):
        yield {
            "chain": chain, "t": int(traj.t_index[it]),
            "eta": repr(float(traj.eta[it])),
            "i": int(traj.coordinate[it]), "proposed": int(traj.proposed[it]),
            "alpha": repr(float(traj.alpha[it])),
            "accepted": bool(traj.accepted[it]),
            "blocked": bool(traj.blocked[it]),
            "S": repr(float(traj.S[it])),
            "scores": [repr(float(v)) for v in traj.scores[it]],
        }


def write_trajectories_jsonl(trajs, path) -> None:
    with open(path, "w") as fh:
        for c, traj in enumerate(trajs):
            for rec in trajectory_records(traj, c):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_population_csv(tokens: np.ndarray, scores: np.ndarray,
                         S: np.ndarray, names, path, labels=None) -> None:
    cols = ["sequence"] + [f"score_{n}" for n in names] + ["S"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in range(tokens.shape[0]):
            if labels is not None:
                seq = "".join(labels[t] for t in tokens[r])
            else:
                seq = "-".join(str(int(t)) for t in tokens[r])
            vals = [seq] + [repr(float(v)) for v in scores[r]] + [repr(float(S[r]))]
            fh.write(",".join(vals) + "\n")


def write_results_csv(results, names, path) -> None:
    rows = [r.csv_row(list(names)) for r in results]
    if not rows:
        raise ConfigError("no results to write")
    cols = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")


def write_manifest(path, *, seed: int, argv, config: dict) -> None:
    from importlib.metadata import version
    try:
        ver = version("areuredi")
    except Exception:
        ver = "unknown"
    save_json({"format": FORMAT_MANIFEST, "version": 1, "package": ver,
               "seed": int(seed), "argv": list(argv), "config": config}, path)


# ---------------------------------------------------------------------------
# SVG line charts (hand-rolled: deterministic output, no font dependencies)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#b7950b", "#34495e")


def write_line_chart_svg(series: dict, path, *, title: str = "",
                         width: int = 640, height: int = 360) -> None:
    """Plot named float series (equal length) against their index."""
    if not series:
        raise ConfigError("no series to plot")
    pad = 48
    n = max(len(v) for v in series.values())
    lo = min(min(v) for v in series.values())
    hi = max(max(v) for v in series.values())
    if hi <= lo:
        hi = lo + 1.0
    sx = (width - 2 * pad) / max(n - 1, 1)
    sy = (height - 2 * pad) / (hi - lo)

    def pt(k, v):
        return f"{pad + k * sx:.2f},{height - pad - (v - lo) * sy:.2f}"

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" '
        'stroke="black" stroke-width="1"/>',
        f'<text x="{pad}" y="{height-pad+16}" font-family="monospace" font-size="10">0</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{n-1}</text>',
        f'<text x="{pad-4}" y="{height-pad}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{lo:.3g}</text>',
        f'<text x="{pad-4}" y="{pad+4}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{hi:.3g}</text>',
    ]
    for k, (name, vals) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        path_d = " ".join(pt(j, float(v)) for j, v in enumerate(vals))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{path_d}"/>')
        lines.append(f'<text x="{width-pad}" y="{pad + 14*k}" text-anchor="end" '
                     f'font-family="monospace" font-size="11" fill="{color}">{name}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
