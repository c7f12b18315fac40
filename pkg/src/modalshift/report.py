"""Experiment artifacts: deactivation tables, layer-profile charts, heatmaps
and results tables.

Every report carries provenance (config hash and seed). CSV files start with a
``# config_hash=...,seed=...`` comment line; SVG files embed the same text in a
``<desc>`` element. All writers are deterministic: the same inputs give the
same bytes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError
from .importance import ImportanceMap, LayerImportanceProfile, apply_mask, build_mask, distribution_shift, perplexity

REPORT_KINDS = ("deactivation-table", "layer-profile", "rank-cluster-heatmap", "change-heatmap", "results-table")
RESULT_COLUMNS = (
    "arm",
    "strategy",
    "lora_rank",
    "seed",
    "t2t",
    "s2t",
    "text_ppl",
    "speech_ppl",
    "shift_l1",
    "peak_moved",
    "mass_ratio",
    "cluster_summary",
)
METRIC_COLUMNS = ("epoch", "split", "metric", "value")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Report:
    kind: str
    payload: dict
    provenance: dict
    files: dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ContractError(f"unknown report kind {self.kind!r}")
        missing = {"config_hash", "seed"} - set(self.provenance)
        if missing:
            raise ContractError(f"report provenance lacks {sorted(missing)}")

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for name, blob in sorted(self.files.items()):
            path = directory / name
            path.write_bytes(blob)
            out.append(path)
        return out


def fmt_value(v) -> str:
    """Shortest exact text for a number; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _provenance_line(prov: dict) -> str:
    return f"# config_hash={prov['config_hash']},seed={prov['seed']}"


def csv_bytes(columns, rows, provenance: dict) -> bytes:
    buf = io.StringIO()
    buf.write(_provenance_line(provenance) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt_value(v) for v in (row.get(c) for c in columns)])
    return buf.getvalue().encode()


def read_csv(source) -> list[dict[str, str]]:
    """Parse a report CSV (path or bytes), skipping the provenance comment."""
    text = source.decode() if isinstance(source, bytes) else Path(source).read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- deactivation table --------------------------------------------------------
def deactivation_report(
    model,
    maps: ImportanceMap | dict[str, ImportanceMap],
    eval_examples,
    provenance: dict,
    fraction: float = 0.03,
    seed: int = 0,
    modalities=("text", "speech"),
    modes=("top", "bottom", "random"),
) -> Report:
    """PPL after deactivating ``fraction`` of parameters, one row per modality.

    ``maps`` is either one importance map used for every row or a map per
    modality. Each row carries three flags: top raises PPL at least tenfold,
    bottom stays within 20% of base, random lies strictly between the two.
    """
    rows = []
    for mod in modalities:
        imap = maps[mod] if isinstance(maps, dict) else maps
        row = {"modality": mod, "base": perplexity(model, eval_examples, mod)}
        for mode in modes:
            row[mode] = perplexity(apply_mask(model, build_mask(imap, fraction, mode, seed)), eval_examples, mod)
        if {"top", "bottom", "random"} <= set(modes):
            row["top_ok"] = row["top"] >= 10.0 * row["base"]
            row["bottom_ok"] = row["bottom"] <= 1.2 * row["base"]
            row["random_ok"] = row["bottom"] < row["random"] < row["top"]
        rows.append(row)
    columns = ["modality", "base", *modes]
    if {"top", "bottom", "random"} <= set(modes):
        columns += ["top_ok", "bottom_ok", "random_ok"]
    payload = {"fraction": fraction, "seed": seed, "columns": columns, "rows": rows}
    files = {"deactivation.csv": csv_bytes(columns, rows, provenance)}
    return Report("deactivation-table", payload, dict(provenance), files)


# -- layer profiles ----------------------------------------------------------------
def _profile_rows(profiles: dict[str, np.ndarray], normalize: bool) -> dict[str, list[float]]:
    lengths = {v.size for v in profiles.values()}
    if len(lengths) != 1:
        raise ContractError(f"profiles have different layer counts: {sorted(lengths)}")
    out = {}
    for name, v in profiles.items():
        v = np.asarray(v, dtype=np.float64)
        if normalize:
            s = v.sum()
            if s <= 0:
                raise ContractError(f"profile {name!r} has no mass to normalize")
            v = v / s
        out[name] = [float(x) for x in v]
    return out


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def line_chart_svg(series: dict[str, list[float]], title: str, provenance: dict, legend: dict[str, str] | None = None) -> bytes:
    """Minimal SVG line chart; each polyline keeps its exact values in ``data-values``."""
    width, height, pad = 640, 360, 50
    n = len(next(iter(series.values())))
    ymax = max(max(v) for v in series.values()) or 1.0
    plot_w, plot_h = width - 2 * pad - 160, height - 2 * pad

    def xy(i, y):
        x = pad + (plot_w * i / (n - 1) if n > 1 else plot_w / 2)
        return x, pad + plot_h * (1.0 - y / ymax)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<desc>{escape(_provenance_line(provenance)[2:])}</desc>",
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{pad + plot_h}" x2="{pad + plot_w}" y2="{pad + plot_h}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{pad + plot_h}" stroke="black"/>',
        f'<text x="{pad - 5}" y="{pad + 4}" text-anchor="end" font-size="10">{ymax:.3g}</text>',
        f'<text x="{pad - 5}" y="{pad + plot_h + 4}" text-anchor="end" font-size="10">0</text>',
    ]
    for i in range(n):
        x, _ = xy(i, 0)
        parts.append(f'<text x="{_fmt(x)}" y="{pad + plot_h + 16}" text-anchor="middle" font-size="10">{i}</text>')
    for k, (name, values) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (xy(i, y) for i, y in enumerate(values)))
        data = " ".join(fmt_value(v) for v in values)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}" '
            f'data-series="{escape(name)}" data-values="{data}"/>'
        )
        label = name if not legend or name not in legend else f"{name} ({legend[name]})"
        ly = pad + 16 * k
        parts.append(f'<rect x="{pad + plot_w + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{pad + plot_w + 24}" y="{ly + 1}" font-size="10">{escape(label)}</text>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def layer_profile_plot(
    profiles: dict[str, LayerImportanceProfile | np.ndarray],
    provenance: dict,
    normalize: bool = True,
    title: str = "Layer-wise textual importance",
    stem: str = "layer_profile",
) -> Report:
    """One series per named profile. The first series is the reference for
    the shift statistics shown in the legend."""
    if not profiles:
        raise ContractError("no profiles to plot")
    raw = {k: np.asarray(getattr(v, "layers", v), dtype=np.float64) for k, v in profiles.items()}
    series = _profile_rows(raw, normalize)
    names = list(series)
    legend = {}
    ref = LayerImportanceProfile(raw[names[0]])
    for name in names[1:]:
        s = distribution_shift(ref, LayerImportanceProfile(raw[name]))
        legend[name] = f"L1 {s['l1']:.3f}, peak {s['peak_moved']:+d}"
    shares = series if normalize else _profile_rows(raw, True)
    rows = [
        {"series": name, "layer_index": i, "total": float(tot), "normalized": shares[name][i]}
        for name in names
        for i, tot in enumerate(raw[name])
    ]
    columns = ("series", "layer_index", "total", "normalized")
    files = {
        f"{stem}.csv": csv_bytes(columns, rows, provenance),
        f"{stem}.svg": line_chart_svg(series, title, provenance, legend),
    }
    payload = {"series": series, "normalized": normalize, "legend": legend}
    return Report("layer-profile", payload, dict(provenance), files)


# -- heatmaps ------------------------------------------------------------------
def _check_unit(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ContractError(f"heatmap needs a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ContractError("heatmap values must lie in [0, 1]; normalize before export")
    return m


def pgm_bytes(matrix) -> bytes:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian); row i is raster row i."""
    m = _check_unit(matrix)
    h, w = m.shape
    pix = np.rint(m * 65535.0).astype(">u2")
    return f"P5\n{w} {h}\n65535\n".encode() + pix.tobytes()


def parse_pgm(blob: bytes) -> np.ndarray:
    """Inverse of :func:`pgm_bytes`; returns values in [0, 1]."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContractError("truncated PGM header")
        fields.append(blob[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ContractError(f"not a binary PGM: {magic!r}")
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def heatmap_svg(matrix, provenance: dict, cell: int = 4, title: str = "") -> bytes:
    m = _check_unit(matrix)
    h, w = m.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
        f'viewBox="0 0 {w * cell} {h * cell}" shape-rendering="crispEdges">',
        f"<desc>{escape(_provenance_line(provenance)[2:])}{' ' + escape(title) if title else ''}</desc>",
    ]
    shade = np.rint(m * 255).astype(int)
    for i in range(h):
        for j in range(w):
            g = shade[i, j]
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def heatmap_export(matrix, provenance: dict, stem: str, kind: str = "change-heatmap", path=None, extra: dict | None = None) -> Report:
    """PGM + SVG rendering of a matrix in [0, 1]; written to ``path`` if given."""
    m = _check_unit(matrix)
    files = {f"{stem}.pgm": pgm_bytes(m), f"{stem}.svg": heatmap_svg(m, provenance, title=stem)}
    rep = Report(kind, dict(extra or {}, shape=list(m.shape)), dict(provenance), files)
    if path is not None:
        rep.write(path)
    return rep


def unit_scale(matrix) -> np.ndarray:
    """Divide by the maximum so a non-negative matrix lands in [0, 1]."""
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


# -- tables --------------------------------------------------------------------
def results_table(rows: list[dict], provenance: dict, stem: str = "results") -> Report:
    """Results rows in the fixed :data:`RESULT_COLUMNS` order."""
    unknown = {k for r in rows for k in r} - set(RESULT_COLUMNS)
    if unknown:
        raise ContractError(f"unknown result columns {sorted(unknown)}")
    files = {f"{stem}.csv": csv_bytes(RESULT_COLUMNS, rows, provenance)}
    return Report("results-table", {"columns": list(RESULT_COLUMNS), "rows": rows}, dict(provenance), files)


def metrics_csv(log: list[dict], provenance: dict) -> bytes:
    return csv_bytes(METRIC_COLUMNS, log, provenance)
