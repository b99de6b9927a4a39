"""Report tables (tab-separated and plain text), figure data and the run manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .config import ExperimentConfig
from .io import ResultStore

RANK_COLUMNS = ["axis", "group", "saes", "n", "pairs", "tau_b", "p", "ci", "ci_method", "run_ids"]
GAIN_COLUMNS = ["run_id", "architecture", "model", "sparsity", "mu", "base_g", "selected_g",
                "gain_pct", "tier", "features", "random_g", "random_gain_pct"]
AXIS_NAMES = {"A": "architecture", "B": "matched sparsity", "C": "model"}


def _f(v, nd: int = 4) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{nd}f}"
    return str(v)


def _ci(ci) -> str:
    return "-" if not ci else f"[{ci[0]:.4f}, {ci[1]:.4f}]"


def rank_rows(analysis: dict) -> list[list[str]]:
    """Rows of a rank table: one per group, a psi row per axis, the pooled row and Psi."""
    rows = []
    for axis, summ in analysis["axes"].items():
        name = f"{axis} ({AXIS_NAMES[axis]})"
        if summ is None:
            rows.append([name, "-", "-", "-", "-", "undefined", "-", "-", "-", "-"])
            continue
        for label, t in summ["groups"]:
            rows.append([name, label, str(len(t["ids"])), str(t["n"]), str(t["pairs"]), _f(t["tau_b"]),
                         _f(t["p_value"]), _ci(t["ci"]), t["ci_method"] or "-", ",".join(t["ids"])])
        for label in summ["skipped"]:
            rows.append([name, label, "-", "-", "-", "undefined", "-", "-", "-", "-"])
        se = _f(summ["se"])
        rows.append([name, "psi", "-", "-", "-", _f(summ["psi"]), "-", _ci(summ["boot_ci"]),
                     f"group bootstrap; se={se}", "-"])
    o = analysis["overall"]
    if o is not None:
        rows.append(["overall", "all SAEs", str(len(o["ids"])), str(o["n"]), str(o["pairs"]), _f(o["tau_b"]),
                     _f(o["p_value"]), _ci(o["ci"]), o["ci_method"] or "-", ",".join(o["ids"])])
    rows.append(["Psi", "mean of psi", "-", "-", "-", _f(analysis["Psi"]), "-", "-", "-", "-"])
    return rows


def gain_rows(store: ResultStore, config: ExperimentConfig) -> list[list[str]]:
    rows = []
    for run in config.runs:
        if not store.has("selection", run.run_id):
            continue
        s = store.get("selection", run.run_id)
        mu = store.get("interp", run.run_id)["mu"]
        rows.append([run.run_id, run.sae.architecture, run.model, _f(run.sae.sparsity, 3), _f(mu),
                     _f(s["base"]), _f(s["selected"]), _f(s["gain"], 1), s["tier"],
                     " ".join(map(str, s["features"])), _f(s["random_selected"]), _f(s["random_gain"], 1)])
    return rows


def _write_table(base: Path, title: str, header: list[str], rows: list[list[str]]) -> list[Path]:
    tsv = base.with_suffix(".tsv")
    tsv.write_text("\t".join(header) + "\n" + "".join("\t".join(r) + "\n" for r in rows))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    txt = base.with_suffix(".txt")
    body = [title, "", line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]
    txt.write_text("\n".join(body) + "\n")
    return [tsv, txt]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_report(out: Path, config: ExperimentConfig, store: ResultStore, rank: dict) -> list[Path]:
    """Write rank tables, the selection comparison, figure data and a manifest."""
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    files += _write_table(out / "rank_interp_vs_steering",
                          "Rank agreement: interpretability score vs steering score",
                          RANK_COLUMNS, rank_rows(rank["steering"]))
    files += _write_table(out / "rank_interp_vs_gain",
                          "Rank agreement: interpretability score vs steering gain after selection",
                          RANK_COLUMNS, rank_rows(rank["gain"]))
    files += _write_table(out / "selection_gain",
                          "Steering score after feature selection (gain in percent of base)",
                          GAIN_COLUMNS, gain_rows(store, config))
    fig = out / "delta_confidence.jsonl"
    root = out.parent
    lines = []
    for run in config.runs:
        p = root / "select" / f"{run.run_id}.json"
        if not p.exists():
            continue
        for f, d in json.loads(p.read_text())["delta"]:
            lines.append(json.dumps({"run_id": run.run_id, "model": run.model, "feature": f, "delta": d},
                                    sort_keys=True))
    fig.write_text("".join(line + "\n" for line in lines))
    files.append(fig)
    manifest = {
        "config_digest": config.digest(),
        "seeds": config.seeds,
        "runs": [r.run_id for r in config.runs],
        "stage_hashes": {f"{r['kind']}/{r['run_id']}": r["hash"] for r in store.records()},
        "files": {p.name: _sha(p) for p in files},
    }
    man = out / "manifest.json"
    man.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return files + [man]
