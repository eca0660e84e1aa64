"""Turn a sweep registry into a flat CSV, trend figures, and a monotonicity
summary. Reports refuse to mix runs scored under different harness or
extractor weights: those numbers are not comparable."""

import csv
import json
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from scipy import stats  # noqa: E402

from .sweep import load_registry

CSV_COLUMNS = [
    "point_id", "axis_value", "objectives", "flops", "params", "psnr",
    "frechet_rec", "linprobe", "zeroshot", "frechet_gen", "seed",
]

PLOT_METRICS = [
    ("frechet_gen", "generation distance (lower is better)"),
    ("frechet_rec", "reconstruction distance (lower is better)"),
    ("linprobe", "linear probe accuracy"),
    ("psnr", "reconstruction PSNR (dB)"),
]


class ReportError(RuntimeError):
    pass


def _rows(records: list, axis: str) -> list:
    rows = []
    for r in records:
        if r.get("status") != "ok" or r.get("axis") != axis:
            continue
        m = r["metrics"]
        rows.append({
            "point_id": r["point_id"],
            "axis_value": r["axis_value"],
            "objectives": r["objectives"],
            "flops": r["flops"],
            "params": r["params"],
            "psnr": m["psnr_mean"],
            "frechet_rec": m["frechet_rec"],
            "linprobe": m["linprobe_acc"],
            "zeroshot": m["zeroshot_acc"],
            "frechet_gen": m["frechet_gen"],
            "seed": r["seed"],
            "dit_sha": r["dit_sha"],
            "extractor_sha": r["extractor_sha"],
        })
    return rows


def _check_comparable(rows: list):
    dit = sorted({r["dit_sha"] for r in rows})
    ext = sorted({r["extractor_sha"] for r in rows})
    problems = []
    if len(dit) > 1:
        problems.append(f"harness weights differ: {dit}")
    if len(ext) > 1:
        problems.append(f"extractor weights differ: {ext}")
    if problems:
        raise ReportError(
            "refusing to aggregate incomparable runs; " + "; ".join(problems))
    return dit[0], ext[0]


def _axis_positions(values: list):
    """Numeric axes plot at their values; categorical axes at grid indices."""
    try:
        nums = [float(v) for v in values]
        return nums, True
    except (TypeError, ValueError):
        order = sorted(set(map(str, values)))
        return [order.index(str(v)) for v in values], False


def _median(xs: list) -> float:
    xs = sorted(xs)
    n = len(xs)
    return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])


def _spearman(xs: list, ys: list, numeric: bool):
    # rank correlation needs an ordered axis, 3+ distinct points, and a
    # non-constant line (spearmanr is undefined on constant input)
    if not numeric or len(set(xs)) < 3 or len(set(ys)) < 2:
        return "n/a"
    rho = stats.spearmanr(xs, ys).statistic
    return round(float(rho), 6)


def _plot(rows: list, axis: str, metric: str, label: str, out_base: str) -> dict:
    groups = defaultdict(list)
    for r in rows:
        if r[metric] is None:
            continue
        groups[r["objectives"]].append(r)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    spearman = {}
    for name in sorted(groups):
        grp = groups[name]
        pos, numeric = _axis_positions([r["axis_value"] for r in grp])
        by_value = defaultdict(list)
        for p, r in zip(pos, grp):
            by_value[p].append(r[metric])
        xs = sorted(by_value)
        med = [_median(by_value[x]) for x in xs]
        ax.plot(xs, med, marker="o", label=name)
        ax.scatter(pos, [r[metric] for r in grp], s=12, alpha=0.35)
        spearman[name] = _spearman(xs, med, numeric)
        if numeric and min(xs) > 0 and max(xs) / min(xs) > 50:
            ax.set_xscale("log")
        if not numeric:
            order = sorted({str(r["axis_value"]) for r in grp})
            ax.set_xticks(range(len(order)))
            ax.set_xticklabels(order, rotation=20, ha="right")
    ax.set_xlabel(axis)
    ax.set_ylabel(label)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    paths = [out_base + ".png", out_base + ".svg"]
    for p in paths:
        fig.savefig(p)
    plt.close(fig)
    return {"paths": paths, "spearman": spearman}


def report(registry_dir: str, axis: str, out_dir: str) -> dict:
    """Write results.csv, one figure pair per metric, and summary.json.
    Returns the summary dict."""
    records = load_registry(registry_dir)
    rows = _rows(records, axis)
    if len(rows) < 2:
        raise ReportError(
            f"need at least 2 completed records on axis {axis!r}, found {len(rows)}")
    dit_sha, ext_sha = _check_comparable(rows)

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in sorted(rows, key=lambda r: (str(r["axis_value"]), r["objectives"], r["seed"])):
            writer.writerow(row)

    figures = {}
    trends = {}
    for metric, label in PLOT_METRICS:
        if all(r[metric] is None for r in rows):
            continue
        out = _plot(rows, axis, metric, label, os.path.join(out_dir, f"{axis}_{metric}"))
        figures[metric] = out["paths"]
        trends[metric] = out["spearman"]

    summary = {
        "axis": axis,
        "rows": len(rows),
        "csv": csv_path,
        "figures": figures,
        "spearman": trends,
        "dit_sha": dit_sha,
        "extractor_sha": ext_sha,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
