"""Frame records, error metrics, and report files.

Errors follow the evaluation conventions of the tracking harness: the area
error compares products of encasing-rectangle length and width, the position
error is the L1 form |dx| + |dy| (height excluded), and yaw residuals are
wrapped.  Column names mirror the harness CSVs (gv/gx/gy/gyaw for estimates,
ginss*/ginsv/ginsyaw for ground truth, l/w vs insl/insw for rectangle dims).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

from .errors import EmptyReportError, FrameParseError
from .motion import wrap_angle

CSV_COLUMNS = (
    "frame", "gx", "gy", "gz", "gyaw", "gv", "gc", "l", "w",
    "ginssx", "ginssy", "ginssz", "ginsyaw", "ginsv", "ginsc",
    "insl", "insw", "time_ms",
)


@dataclass
class FrameRecord:
    """One tracked frame: estimates, ground-truth mirrors, and wall time."""

    frame: int
    gx: float
    gy: float
    gz: float
    gyaw: float
    gv: float
    gc: float
    l: float
    w: float
    ginssx: float
    ginssy: float
    ginssz: float
    ginsyaw: float
    ginsv: float
    ginsc: float
    insl: float
    insw: float
    time_ms: float


def frame_errors(record: FrameRecord) -> tuple[float, float, float, float]:
    """(e_v, e_A, e_pos, e_yaw) for one frame."""
    e_v = abs(record.gv - record.ginsv)
    e_area = abs(record.l * record.w - record.insl * record.insw)
    e_pos = abs(record.gx - record.ginssx) + abs(record.gy - record.ginssy)
    e_yaw = abs(wrap_angle(record.gyaw - record.ginsyaw))
    return e_v, e_area, e_pos, e_yaw


@dataclass
class MetricsReport:
    """RMSE summary plus the per-frame error series it was computed from."""

    rmse_v: float
    rmse_area: float
    rmse_pos: float
    rmse_yaw: float
    mean_time_ms: float
    series_v: list[float]
    series_area: list[float]
    series_pos: list[float]
    series_yaw: list[float]

    def table_row(self) -> dict[str, float]:
        return {
            "E_v": self.rmse_v,
            "E_A": self.rmse_area,
            "E_pos": self.rmse_pos,
            "E_yaw": self.rmse_yaw,
            "t_mean_ms": self.mean_time_ms,
        }


def _rmse(series) -> float:
    if not series:
        return 0.0
    return math.sqrt(sum(e * e for e in series) / len(series))


def aggregate(records) -> MetricsReport:
    """RMSE of every error over the record sequence, plus mean wall time."""
    records = list(records)
    if not records:
        raise EmptyReportError("cannot aggregate zero frame records")
    errs = [frame_errors(r) for r in records]
    sv = [e[0] for e in errs]
    sa = [e[1] for e in errs]
    sp = [e[2] for e in errs]
    sy = [e[3] for e in errs]
    mean_t = sum(r.time_ms for r in records) / len(records)
    return MetricsReport(_rmse(sv), _rmse(sa), _rmse(sp), _rmse(sy), mean_t, sv, sa, sp, sy)


def _format_float(x: float) -> str:
    return f"{x:.9g}"


def write_frames(path, records) -> None:
    """Comma-separated frame records, one line per frame, 9 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            row = []
            for name in CSV_COLUMNS:
                val = getattr(rec, name)
                row.append(str(val) if name == "frame" else _format_float(val))
            writer.writerow(row)


def read_frames(path) -> list[FrameRecord]:
    """Parse a frame CSV; malformed rows raise with their line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FrameParseError("empty frame file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise FrameParseError(f"missing column {missing[0]!r}", line=1)
        index = {c: header.index(c) for c in CSV_COLUMNS}
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                kwargs = {}
                for f in fields(FrameRecord):
                    raw = row[index[f.name]]
                    kwargs[f.name] = int(raw) if f.name == "frame" else float(raw)
            except (ValueError, IndexError) as exc:
                raise FrameParseError(f"malformed frame row: {exc}", line=lineno) from exc
            records.append(FrameRecord(**kwargs))
    return records


def format_report_table(rows: dict[str, MetricsReport]) -> str:
    """Fixed-width text table, one row per labelled report."""
    header = f"{'run':<24} {'E_v':>8} {'E_A':>8} {'E_pos':>8} {'E_yaw':>8} {'t[ms]':>8}"
    lines = [header, "-" * len(header)]
    for label, rep in rows.items():
        lines.append(
            f"{label:<24} {rep.rmse_v:>8.3f} {rep.rmse_area:>8.3f} "
            f"{rep.rmse_pos:>8.3f} {rep.rmse_yaw:>8.3f} {rep.mean_time_ms:>8.2f}"
        )
    return "\n".join(lines)


def report_csv(rows: dict[str, MetricsReport]) -> str:
    """The same table as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["run", "E_v", "E_A", "E_pos", "E_yaw", "t_mean_ms"])
    for label, rep in rows.items():
        writer.writerow(
            [label] + [_format_float(v) for v in (
                rep.rmse_v, rep.rmse_area, rep.rmse_pos, rep.rmse_yaw, rep.mean_time_ms
            )]
        )
    return buf.getvalue()
