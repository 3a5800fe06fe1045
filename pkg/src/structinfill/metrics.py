"""Objective metrics: pitch-class cross entropy H, grooving similarity GS, melody distance D."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import AlignmentError, EmptySegmentError, InfillError
from .ingest import InfillingExample
from .tokenizer import POSITIONS_PER_BAR, NoteEvent, TokenSeq, decode_bars

SMOOTHING = 1e-6
D_SCALE = 16.0

Segment = Union[TokenSeq, Sequence[Sequence[NoteEvent]]]


def as_bars(segment: Segment) -> list[list[NoteEvent]]:
    """Per-bar note lists from a token segment or an already grouped list."""
    if isinstance(segment, TokenSeq):
        return [bar.notes for bar in decode_bars(segment)]
    return [list(bar) for bar in segment]


def _notes(segment: Segment) -> list[NoteEvent]:
    return [n for bar in as_bars(segment) for n in bar]


# ----------------------------------------------------------------------- H


def pitch_class_histogram(notes: Sequence[NoteEvent]) -> np.ndarray:
    if not notes:
        raise EmptySegmentError("pitch-class histogram of an empty note list")
    h = np.zeros(12)
    for n in notes:
        h[n.pitch % 12] += 1
    return h / h.sum()


def histogram_cross_entropy(p: np.ndarray, q: np.ndarray, eps: float = SMOOTHING) -> float:
    """``-sum p log q'`` with ``q' = (q + eps) / (1 + 12 eps)``, natural log."""
    q = (np.asarray(q, dtype=np.float64) + eps) / (1.0 + 12 * eps)
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(q)).sum())


def cross_entropy_H(target: Segment, past: Segment, future: Segment) -> float:
    t = _notes(target)
    ctx_past, ctx_future = _notes(past), _notes(future)
    if not t or not ctx_past or not ctx_future:
        raise EmptySegmentError("H needs notes in the target, past and future segments")
    return histogram_cross_entropy(
        pitch_class_histogram(t), pitch_class_histogram(ctx_past + ctx_future)
    )


# ---------------------------------------------------------------------- GS


def grooving_vector(bar: Sequence[NoteEvent]) -> int:
    """16-bit onset mask; bit ``i`` (counted from the bar start) is set when a note starts at ``i``."""
    v = 0
    for n in bar:
        v |= 1 << n.position
    return v


def grooving_bits(v: int) -> str:
    return "".join("1" if v >> i & 1 else "0" for i in range(POSITIONS_PER_BAR))


def grooving_similarity_GS(target_bars: Segment, context_bars: Segment) -> float:
    """Mean over all (target, context) bar pairs of ``1 - popcount(xor) / 16``."""
    a = [grooving_vector(b) for b in as_bars(target_bars)]
    b = [grooving_vector(c) for c in as_bars(context_bars)]
    if not a or not b:
        raise EmptySegmentError("GS needs at least one bar on each side")
    total = sum(POSITIONS_PER_BAR - bin(x ^ y).count("1") for x in a for y in b)
    return total / (POSITIONS_PER_BAR * len(a) * len(b))


# ----------------------------------------------------------------------- D


def melody_curve(segment: Segment) -> np.ndarray:
    """Pitch sampled at every 16th step of the segment.

    The sounding pitch is the latest onset among the notes still held
    (highest pitch on equal onsets).  Rests repeat the previous pitch; a
    leading rest takes the first note's pitch.
    """
    bars = as_bars(segment)
    notes = sorted(
        (b * POSITIONS_PER_BAR + n.position, n.pitch, n.duration)
        for b, bar in enumerate(bars)
        for n in bar
    )
    if not notes:
        raise EmptySegmentError("melody curve of a segment without notes")
    length = max(len(bars) * POSITIONS_PER_BAR, notes[-1][0] + 1)
    curve = np.empty(length)
    prev = notes[0][1]
    for t in range(length):
        # sorted by (onset, pitch), so the last held note is the one that sounds
        held = [pitch for onset, pitch, dur in notes if onset <= t < onset + dur]
        if held:
            prev = held[-1]
        curve[t] = prev
    return curve


def centered(curve: np.ndarray) -> np.ndarray:
    """Subtract the mean as ``(n x - sum) / n`` so equal shapes centre to identical floats."""
    curve = np.asarray(curve, dtype=np.float64)
    n = curve.size
    return (n * curve - curve.sum()) / n


def _dtw_shifted(cost: np.ndarray, lam: float) -> tuple[float, float, int]:
    """Minimum of ``sum(c - lam)`` over monotone warping paths.

    Returns the shifted minimum plus the raw cost and length of the path
    achieving it.
    """
    n, m = cost.shape
    rows = cost.tolist()
    inf = math.inf
    # per cell: (shifted total, raw total, path length)
    prev_row = [(inf, 0.0, 0)] * m
    for i in range(n):
        row = []
        c_row = rows[i]
        for j in range(m):
            if i == 0 and j == 0:
                best = (0.0, 0.0, 0)
            else:
                best = (inf, 0.0, 0)
                if j > 0:
                    best = min(best, row[j - 1], key=_first)
                    best = min(best, prev_row[j - 1], key=_first) if i > 0 else best
                if i > 0:
                    best = min(best, prev_row[j], key=_first)
            c = c_row[j]
            row.append((best[0] + c - lam, best[1] + c, best[2] + 1))
        prev_row = row
    return prev_row[-1]


def _first(cell):
    return cell[0]


def min_mean_dtw(a: np.ndarray, b: np.ndarray, max_iter: int = 100) -> float:
    """Smallest mean step cost ``|a - b|`` over all DTW warping paths.

    Solved by Dinkelbach iteration: each round runs an ordinary DTW with
    costs shifted by the current ratio and moves the ratio to the mean cost
    of the path it found, until no path has a negative shifted cost.
    """
    cost = np.abs(np.subtract.outer(np.asarray(a, float), np.asarray(b, float)))
    _, raw, steps = _dtw_shifted(cost, 0.0)
    lam = raw / steps
    for _ in range(max_iter):
        value, raw, steps = _dtw_shifted(cost, lam)
        if value >= -1e-12 * max(1.0, lam):
            break
        lam = raw / steps
    return lam


def melody_distance_D(generated: Segment, reference: Segment) -> float:
    """16 times the min-mean DTW cost between mean-centred melody curves."""
    a = centered(melody_curve(generated))
    b = centered(melody_curve(reference))
    return D_SCALE * min_mean_dtw(a, b)


# ------------------------------------------------------------------ report


@dataclass
class CaseMetrics:
    case_id: str
    H: float = math.nan
    GS: float = math.nan
    D: float = math.nan
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    name: str = "model"

    @property
    def succeeded(self) -> list[CaseMetrics]:
        return [c for c in self.cases if c.ok]

    @property
    def n_failed(self) -> int:
        return len(self.cases) - len(self.succeeded)

    def aggregate(self, metric: str) -> tuple[float, float]:
        """Mean and population standard deviation over successful cases."""
        values = np.array([getattr(c, metric) for c in self.succeeded], dtype=np.float64)
        if values.size == 0:
            return math.nan, math.nan
        return float(values.mean()), float(values.std())

    def to_table(self) -> str:
        header = f"{'Model':<16}{'H':>14}{'GS':>14}{'D':>16}"
        cells = []
        for metric in ("H", "GS", "D"):
            mean, std = self.aggregate(metric)
            cells.append(f"{mean:.2f}±{std:.2f}")
        row = f"{self.name:<16}{cells[0]:>14}{cells[1]:>14}{cells[2]:>16}"
        footer = f"cases: {len(self.succeeded)} scored, {self.n_failed} failed"
        return "\n".join([header, row, footer]) + "\n"

    def to_records(self) -> str:
        lines = ["case_id,H,GS,D"]
        for c in self.cases:
            lines.append(f"{c.case_id},{c.H:.6f},{c.GS:.6f},{c.D:.6f}")
        return "\n".join(lines) + "\n"


def case_id(example: InfillingExample, i: int) -> str:
    if example.song_id is not None:
        return f"{example.song_id}:{example.phrase_index}"
    return str(i)


def evaluate(
    cases: Sequence[InfillingExample], outputs: Sequence[Segment], name: str = "model"
) -> MetricsReport:
    """Score each output against its case: H and GS versus the surrounding
    contexts, D versus the ground-truth target."""
    if len(cases) != len(outputs):
        raise AlignmentError(f"{len(cases)} cases but {len(outputs)} outputs")
    report = MetricsReport(name=name)
    for i, (case, out) in enumerate(zip(cases, outputs)):
        m = CaseMetrics(case_id(case, i))
        try:
            m.H = cross_entropy_H(out, case.past, case.future)
            m.GS = grooving_similarity_GS(out, as_bars(case.past) + as_bars(case.future))
            m.D = melody_distance_D(out, case.target)
        except InfillError as exc:
            m.H = m.GS = m.D = math.nan
            m.error = f"{type(exc).__name__}: {exc}"
        report.cases.append(m)
    return report
