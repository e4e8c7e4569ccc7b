"""Dice scoring and grouped reports.

Reports mirror the layout of per-group result tables: one row per unit
(patch or slide), a mean per group, and an "Avg." that is by default the
unweighted mean of the group means. Human-facing numbers are x100 with two
decimals.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeMismatch, UnitSetMismatch

EMPTY_NOTE = "Dice of an empty prediction against an empty truth is scored 1.0."
CSV_FIELDS = ("unit_id", "group", "dice", "intersection", "pred_area", "truth_area")


@dataclass(frozen=True)
class DiceScore:
    value: float
    intersection: int
    pred_area: int
    truth_area: int

    @classmethod
    def from_counts(cls, intersection: int, pred_area: int, truth_area: int) -> "DiceScore":
        denom = pred_area + truth_area
        value = 1.0 if denom == 0 else float(np.float64(2 * intersection) / np.float64(denom))
        return cls(value, int(intersection), int(pred_area), int(truth_area))


def foreground(mask: np.ndarray, foreground_class: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    return mask > 0 if foreground_class is None else mask == foreground_class


def dice(pred: np.ndarray, truth: np.ndarray, foreground_class: int | None = None) -> DiceScore:
    """Dice of the foreground sets; any nonzero label is foreground unless a class is given."""
    if np.shape(pred) != np.shape(truth):
        raise ShapeMismatch(f"prediction {np.shape(pred)} and truth {np.shape(truth)} differ in shape")
    p = foreground(pred, foreground_class)
    t = foreground(truth, foreground_class)
    return DiceScore.from_counts(int(np.count_nonzero(p & t)), int(np.count_nonzero(p)),
                                 int(np.count_nonzero(t)))


class DiceCounter:
    """Row sink that accumulates Dice counts against a truth reader while a mask streams by."""

    def __init__(self, truth_reader, foreground_class: int | None = None):
        self.truth = truth_reader
        self.foreground_class = foreground_class
        self.intersection = self.pred_area = self.truth_area = 0

    def accept_rows(self, row_start: int, rows: np.ndarray) -> None:
        h, w = rows.shape
        t = foreground(self.truth.read_window(0, row_start, w, h)[..., 0], self.foreground_class)
        p = foreground(rows, self.foreground_class)
        self.intersection += int(np.count_nonzero(p & t))
        self.pred_area += int(np.count_nonzero(p))
        self.truth_area += int(np.count_nonzero(t))

    def finish(self) -> None:
        pass

    @property
    def score(self) -> DiceScore:
        return DiceScore.from_counts(self.intersection, self.pred_area, self.truth_area)


@dataclass
class ReportRow:
    unit_id: str
    group: str
    dice: DiceScore | None
    error: str | None = None


@dataclass
class DiceReport:
    rows: list[ReportRow]
    group_means: dict[str, float] = field(default_factory=dict)
    overall_mean: float = float("nan")
    averaging: str = "groups"

    @classmethod
    def build(cls, rows: Sequence[ReportRow], averaging: str = "groups") -> "DiceReport":
        if averaging not in ("groups", "units"):
            raise ValueError(f"averaging must be 'groups' or 'units', got {averaging!r}")
        values: dict[str, list[float]] = {}
        for row in rows:
            values.setdefault(row.group, [])
            if row.dice is not None:
                values[row.group].append(row.dice.value)
        group_means = {g: float(np.mean(v)) * 100.0 for g, v in values.items() if v}
        if averaging == "groups":
            overall = float(np.mean(list(group_means.values()))) if group_means else float("nan")
        else:
            scored = [v for vs in values.values() for v in vs]
            overall = float(np.mean(scored)) * 100.0 if scored else float("nan")
        return cls(list(rows), group_means, overall, averaging)

    @property
    def failed(self) -> list[ReportRow]:
        return [r for r in self.rows if r.error is not None]

    def unit(self, unit_id: str) -> ReportRow:
        for r in self.rows:
            if r.unit_id == unit_id:
                return r
        raise KeyError(unit_id)

    # -- serialization -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            if r.dice is None:
                writer.writerow([r.unit_id, r.group, "", "", "", ""])
            else:
                d = r.dice
                writer.writerow([r.unit_id, r.group, f"{d.value:.6f}", d.intersection, d.pred_area, d.truth_area])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"unit_id": r.unit_id, "group": r.group,
                 "dice": None if r.dice is None else r.dice.value,
                 "intersection": None if r.dice is None else r.dice.intersection,
                 "pred_area": None if r.dice is None else r.dice.pred_area,
                 "truth_area": None if r.dice is None else r.dice.truth_area,
                 "error": r.error}
                for r in self.rows
            ],
            "group_means": {g: round(v, 6) for g, v in self.group_means.items()},
            "overall_mean": round(self.overall_mean, 6),
            "averaging": self.averaging,
            "notes": [EMPTY_NOTE],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "DiceReport":
        rows = []
        for r in data["rows"]:
            score = None
            if r.get("dice") is not None:
                score = DiceScore(float(r["dice"]), int(r["intersection"]), int(r["pred_area"]),
                                  int(r["truth_area"]))
            rows.append(ReportRow(r["unit_id"], r["group"], score, r.get("error")))
        return cls.build(rows, data.get("averaging", "groups"))

    @classmethod
    def from_json(cls, text: str) -> "DiceReport":
        return cls.from_dict(json.loads(text))

    def format_table(self) -> str:
        lines = [f"{'unit':<32} {'group':<16} {'dice':>7}"]
        for r in self.rows:
            val = "ERROR" if r.dice is None else f"{r.dice.value * 100:.2f}"
            lines.append(f"{r.unit_id:<32} {r.group:<16} {val:>7}")
        lines.append("")
        lines.append("  ".join(f"{g}: {v:.2f}" for g, v in self.group_means.items())
                     + f"  Avg.: {self.overall_mean:.2f}")
        label = "unweighted mean of group means" if self.averaging == "groups" else "mean over units"
        lines.append(f"Avg. is the {label}. {EMPTY_NOTE}")
        for r in self.failed:
            lines.append(f"failed: {r.unit_id}: {r.error}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{stem}.csv", out_dir / f"{stem}.json", out_dir / f"{stem}.txt"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(self.to_json(), encoding="utf-8")
        paths[2].write_text(self.format_table(), encoding="utf-8")
        return paths


def _evaluate_one(pair, foreground_class):
    from .io import read_mask

    unit_id, group, pred_path, truth_path = pair
    try:
        return ReportRow(unit_id, group, dice(read_mask(pred_path), read_mask(truth_path), foreground_class))
    except Exception as exc:  # collected per unit, never fatal to the report
        return ReportRow(unit_id, group, None, f"{type(exc).__name__}: {exc}")


def evaluate_units(pairs: Iterable[tuple[str, str, str, str]], workers: int = 1, averaging: str = "groups",
                   foreground_class: int | None = None) -> DiceReport:
    """Score ``(unit_id, group, pred_path, truth_path)`` pairs; rows keep input order."""
    pairs = list(pairs)
    if workers <= 1:
        rows = [_evaluate_one(p, foreground_class) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda p: _evaluate_one(p, foreground_class), pairs))
    return DiceReport.build(rows, averaging)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class DeltaTable:
    unit_deltas: dict[str, float | None]
    group_deltas: dict[str, float]
    overall_delta: float
    groups: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"unit_deltas": self.unit_deltas, "group_deltas": self.group_deltas,
                "overall_delta": self.overall_delta}

    def format_table(self) -> str:
        lines = [f"{'unit':<32} {'group':<16} {'delta':>8}"]
        for unit, delta in self.unit_deltas.items():
            val = "n/a" if delta is None else f"{delta:+.2f}"
            lines.append(f"{unit:<32} {self.groups.get(unit, ''):<16} {val:>8}")
        lines.append("")
        lines.append("  ".join(f"{g}: {d:+.2f}" for g, d in self.group_deltas.items())
                     + f"  Avg.: {self.overall_delta:+.2f}")
        return "\n".join(lines) + "\n"


def compare_reports(a: DiceReport, b: DiceReport) -> DeltaTable:
    """Deltas ``b - a`` in percentage points, per unit and per group."""
    ids_a = [r.unit_id for r in a.rows]
    ids_b = {r.unit_id for r in b.rows}
    if set(ids_a) != ids_b:
        missing = sorted(set(ids_a) ^ ids_b)
        raise UnitSetMismatch(f"reports cover different units: {missing[:5]}")
    rows_b = {r.unit_id: r for r in b.rows}
    unit_deltas: dict[str, float | None] = {}
    groups = {}
    for ra in a.rows:
        rb = rows_b[ra.unit_id]
        groups[ra.unit_id] = ra.group
        if ra.dice is None or rb.dice is None:
            unit_deltas[ra.unit_id] = None
        else:
            unit_deltas[ra.unit_id] = (rb.dice.value - ra.dice.value) * 100.0
    group_deltas = {g: b.group_means[g] - a.group_means[g] for g in a.group_means if g in b.group_means}
    return DeltaTable(unit_deltas, group_deltas, b.overall_mean - a.overall_mean, groups)
