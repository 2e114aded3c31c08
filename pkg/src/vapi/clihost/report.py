"""Comparison table over evaluated runs: one row per (run, method)."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .metrics import total_wall_seconds

METHOD_ORDER = ("base", "vapi", "ste", "tok-pt")
COLUMNS = ("run", "method", "toy_fid", "tf_reward", "tf_reward_clean", "fr_reward", "exposure_bias",
           "train_psnr", "wall_clock_s")


def _method_of(tag: str) -> str:
    if tag == "ar-pretrain":
        return "base"
    if tag.startswith("posttrain-"):
        return tag[len("posttrain-"):]
    return tag


def collect_rows(run_dirs: list[str | Path]) -> list[dict]:
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        for path in sorted((rd / "eval").glob("*.json")):
            rep = json.loads(path.read_text())
            tag = path.stem
            method = _method_of(tag)
            row = {"run": rd.name, "method": method}
            for col in COLUMNS[2:-1]:
                row[col] = rep.get(col)
            row["wall_clock_s"] = total_wall_seconds(rd, tag) if method != "base" else 0.0
            rows.append(row)
    rank = {m: i for i, m in enumerate(METHOD_ORDER)}
    rows.sort(key=lambda r: (r["run"], rank.get(r["method"], len(rank)), r["method"]))
    if not rows:
        raise FileNotFoundError("no evaluated runs found; run `vapi eval` first")
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cells = [list(COLUMNS)] + [[_fmt(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: ("" if r[c] is None else r[c]) for c in COLUMNS})
    return buf.getvalue()


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> tuple[str, Path, Path]:
    rows = collect_rows(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(rows)
    txt, csv_path = out_dir / "report.txt", out_dir / "report.csv"
    txt.write_text(text)
    csv_path.write_text(format_csv(rows))
    return text, txt, csv_path
