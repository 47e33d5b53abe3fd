"""Run traces and their CSV serialization.

One row per recorded iteration with the fixed column order below.  Floats are
written with 17 significant digits so that parsing a written trace recovers
the records exactly; quantities that need the analytic layer are left empty
when the problem has none.  A single ``#``-prefixed JSON metadata line
(ignored by gnuplot and by the reader's numeric path) precedes the header.

Wall-clock times are measured and kept in memory, but serialized as zero by
default so that identical (config, seed) runs produce bitwise-identical
files; pass ``timing="real"`` to emit measured milliseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

CSV_COLUMNS = (
    "k",
    "grad_phi_exact",
    "grad_est_norm",
    "m_norm",
    "f_est",
    "y_err",
    "z_err",
    "oracle_f",
    "oracle_g",
    "degenerate_step",
    "wall_ms",
)


@dataclass(frozen=True)
class TraceRecord:
    """State snapshot after ``k`` solver iterations (k = 0 is the state right
    after initialization refinement, before the first update)."""

    k: int
    grad_phi_exact: Optional[float]
    grad_est_norm: Optional[float]
    m_norm: float
    f_est: Optional[float]
    y_err: Optional[float]
    z_err: Optional[float]
    oracle_f: int
    oracle_g: int
    degenerate_step: bool
    wall_ms: float


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    @property
    def final(self) -> TraceRecord:
        if not self.records:
            raise ValueError("empty trace")
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def validate(self) -> None:
        prev_f = prev_g = -1
        prev_k = None
        for r in self.records:
            if prev_k is not None and r.k <= prev_k:
                raise ValueError("iteration indices must increase")
            if r.oracle_f < prev_f or r.oracle_g < prev_g:
                raise ValueError("oracle counts must be nondecreasing")
            prev_k, prev_f, prev_g = r.k, r.oracle_f, r.oracle_g


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return ""
    return f"{v:.17g}"


def write_csv(trace: RunTrace, path, timing: str = "zero") -> None:
    """Serialize a trace; ``timing`` is ``"zero"`` (reproducible files) or
    ``"real"`` (measured wall milliseconds)."""
    if timing not in ("zero", "real"):
        raise ValueError("timing must be 'zero' or 'real'")
    with open(path, "w", newline="") as fh:
        if trace.meta:
            fh.write("# " + json.dumps(trace.meta, sort_keys=True) + "\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in trace.records:
            wall = r.wall_ms if timing == "real" else 0.0
            row = (
                str(r.k),
                _fmt(r.grad_phi_exact),
                _fmt(r.grad_est_norm),
                _fmt(r.m_norm),
                _fmt(r.f_est),
                _fmt(r.y_err),
                _fmt(r.z_err),
                str(r.oracle_f),
                str(r.oracle_g),
                "1" if r.degenerate_step else "0",
                _fmt(wall),
            )
            fh.write(",".join(row) + "\n")


def read_csv(path) -> RunTrace:
    trace = RunTrace()
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                try:
                    trace.meta = json.loads(line[1:].strip())
                except json.JSONDecodeError:
                    pass
                continue
            if header is None:
                header = line.split(",")
                if tuple(header) != CSV_COLUMNS:
                    raise ValueError(f"unexpected columns {header}")
                continue
            parts = line.split(",")
            opt = lambda s: None if s == "" else float(s)
            trace.append(
                TraceRecord(
                    k=int(parts[0]),
                    grad_phi_exact=opt(parts[1]),
                    grad_est_norm=opt(parts[2]),
                    m_norm=float(parts[3]),
                    f_est=opt(parts[4]),
                    y_err=opt(parts[5]),
                    z_err=opt(parts[6]),
                    oracle_f=int(parts[7]),
                    oracle_g=int(parts[8]),
                    degenerate_step=parts[9] == "1",
                    wall_ms=float(parts[10]),
                )
            )
    if header is None:
        raise ValueError(f"{path} has no header row")
    return trace
