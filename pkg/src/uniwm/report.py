"""Comparison tables across metric reports (memory modes, ablation sweeps)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

COLUMNS = ["label", "SR", "ATE", "RPE", "SSIM", "PSNR"]


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[list[str]]

    def text(self) -> str:
        widths = [max(len(c), *(len(r[i]) for r in self.rows)) if self.rows else len(c) for i, c in enumerate(self.columns)]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        lines = [fmt(self.columns), fmt(["-" * w for w in widths])]
        lines.extend(fmt(r) for r in self.rows)
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            w.writerows(self.rows)


def _load_report(path: Path) -> dict:
    p = path / "metrics.json" if path.is_dir() else path
    if not p.exists():
        raise FileNotFoundError(f"no metrics report at {path}")
    return json.loads(p.read_text())


def _label(header: dict) -> str:
    parts = [f"mem={header.get('memory_mode', '?')}"]
    if header.get("step_strategy") and header["step_strategy"] != "interleave":
        parts.append(header["step_strategy"])
    if header.get("l_save") is not None:
        parts.append(f"L{len(header['l_save'])}")
    if header.get("label"):
        parts.insert(0, header["label"])
    return " ".join(parts)


def build_comparison(paths: list[Path]) -> tuple[ComparisonTable, list[str]]:
    """One row per report. Warns when inputs span different datasets."""
    reports = [_load_report(p) for p in paths]
    at_n = sorted({n for r in reports for n in r["header"].get("at_n", [])})
    columns = COLUMNS + [f"SSIM@{n}" for n in at_n] + [f"PSNR@{n}" for n in at_n] + ["dataset"]
    rows = []
    for r in reports:
        agg, header = r["aggregate"], r["header"]
        cells = [
            _label(header),
            f"{agg['SR']:.3f}",
            f"{agg['ATE']:.3f}",
            f"{agg['RPE']:.3f}",
            f"{agg.get('SSIM', float('nan')):.3f}",
            f"{agg.get('PSNR', float('nan')):.2f}",
        ]
        for n in at_n:
            cells.append(f"{agg[f'SSIM@{n}']:.3f}" if f"SSIM@{n}" in agg else "-")
        for n in at_n:
            cells.append(f"{agg[f'PSNR@{n}']:.2f}" if f"PSNR@{n}" in agg else "-")
        cells.append(header.get("dataset_hash", "")[:12])
        rows.append(cells)
    warnings = []
    hashes = {r["header"].get("dataset_hash", "") for r in reports}
    if len(hashes) > 1:
        warnings.append("reports span different datasets; comparison may be meaningless")
    return ComparisonTable(columns=columns, rows=rows), warnings
