"""Per-step gradient-cosine recording and distribution statistics."""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

HIST_BINS = 64
CSV_HEADER = ("step", "epoch", "pair", "cosine")

Pair = tuple[str, str]


def pair_label(pair: Pair) -> str:
    return f"{pair[0]}|{pair[1]}"


def parse_pair(label: str) -> Pair:
    a, sep, b = label.partition("|")
    if not sep or not a or not b:
        raise ValueError(f"bad pair label {label!r}")
    return a, b


def fmt_real(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class CosineRecord:
    step: int
    epoch: int
    pair: Pair
    cosine: float


@dataclass(frozen=True)
class PhiSummary:
    pair: Pair
    count: int
    mean: float
    std: float
    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...]


def sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1))


class CosineRecorder:
    """Append-only store of pairwise task-gradient cosines.

    One producer (the training loop) appends; :meth:`snapshot` hands readers
    an immutable copy.
    """

    def __init__(self, records: Iterable[CosineRecord] = ()):
        self._records: list[CosineRecord] = list(records)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple[CosineRecord, ...]:
        return self.snapshot()

    def snapshot(self) -> tuple[CosineRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def record(self, step: int, epoch: int, pairwise_cosines: Mapping[Pair, float]) -> None:
        new = []
        for pair, cos in pairwise_cosines.items():
            cos = float(cos)
            if not np.isfinite(cos) or not -1.0 <= cos <= 1.0:
                raise ValueError(f"cosine for {pair_label(pair)} at step {step} out of range: {cos}")
            new.append(CosineRecord(int(step), int(epoch), tuple(pair), cos))
        with self._lock:
            self._records.extend(new)

    def pairs(self) -> list[Pair]:
        seen: dict[Pair, None] = {}
        for r in self._records:
            seen.setdefault(r.pair, None)
        return list(seen)

    def series(self, pair: Pair, start: int | None = None, stop: int | None = None, epoch: int | None = None):
        """(steps, cosines) for ``pair`` with ``start <= step < stop``."""
        pair = tuple(pair)
        rows = [
            r
            for r in self._records
            if r.pair == pair
            and (start is None or r.step >= start)
            and (stop is None or r.step < stop)
            and (epoch is None or r.epoch == epoch)
        ]
        return np.array([r.step for r in rows], dtype=np.int64), np.array([r.cosine for r in rows])

    def summarize(
        self, pair: Pair, start: int | None = None, stop: int | None = None, epoch: int | None = None
    ) -> PhiSummary:
        _, values = self.series(pair, start, stop, epoch)
        if len(values) < 2:
            raise ValueError(f"need at least 2 records for {pair_label(tuple(pair))}, have {len(values)}")
        hist, edges = np.histogram(values, bins=HIST_BINS, range=(-1.0, 1.0))
        return PhiSummary(
            pair=tuple(pair),
            count=len(values),
            mean=float(values.mean()),
            std=sample_std(values),
            histogram=tuple(int(h) for h in hist),
            bin_edges=tuple(float(e) for e in edges),
        )

    def rolling_std(self, pair: Pair, window: int = 50) -> list[tuple[int, float]]:
        """Sample std over each trailing window, keyed by the window's last step."""
        if window < 2:
            raise ValueError(f"window must be >= 2, got {window}")
        steps, values = self.series(pair)
        if len(values) < window:
            raise ValueError(f"series of {len(values)} records is shorter than window {window}")
        wins = np.lib.stride_tricks.sliding_window_view(values, window)
        stds = wins.std(axis=1, ddof=1)
        return [(int(s), float(v)) for s, v in zip(steps[window - 1 :], stds)]

    def first_epoch_sigma(self, pair: Pair) -> float:
        _, values = self.series(pair, epoch=0)
        if len(values) == 0:
            raise ValueError(f"no epoch-0 records for {pair_label(tuple(pair))}")
        return self.summarize(pair, epoch=0).std

    # -- serialisation ---------------------------------------------------
    def summaries(self) -> list[PhiSummary]:
        out = []
        for pair in self.pairs():
            if len(self.series(pair)[1]) >= 2:
                out.append(self.summarize(pair))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.snapshot():
            w.writerow((r.step, r.epoch, pair_label(r.pair), fmt_real(r.cosine)))
        return buf.getvalue()

    def to_json(self) -> str:
        # numbers are written by hand to keep 17 significant digits
        recs = ",\n    ".join(
            f'{{"step": {r.step}, "epoch": {r.epoch}, "pair": {json.dumps(pair_label(r.pair))}, '
            f'"cosine": {fmt_real(r.cosine)}}}'
            for r in self.snapshot()
        )
        sums = ",\n    ".join(
            f'{{"pair": {json.dumps(pair_label(s.pair))}, "count": {s.count}, '
            f'"mean": {fmt_real(s.mean)}, "std": {fmt_real(s.std)}}}'
            for s in self.summaries()
        )
        return f'{{\n  "records": [\n    {recs}\n  ],\n  "summaries": [\n    {sums}\n  ]\n}}\n'

    def export(self, path, format: str = "csv") -> None:
        path = Path(path)
        if format == "csv":
            text = self.to_csv()
        elif format == "json":
            text = self.to_json()
        else:
            raise ValueError(f"unknown export format {format!r} (expected csv or json)")
        try:
            path.write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            raise OSError(f"cannot write cosine export to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "CosineRecorder":
        """Read a CSV or JSON export back into a recorder."""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read cosine export {path}: {exc}") from exc
        if text.lstrip().startswith("{"):
            rows = json.loads(text)["records"]
            recs = [CosineRecord(int(r["step"]), int(r["epoch"]), parse_pair(r["pair"]), float(r["cosine"])) for r in rows]
        else:
            reader = csv.reader(io.StringIO(text))
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            recs = [CosineRecord(int(s), int(e), parse_pair(p), float(c)) for s, e, p, c in reader]
        return cls(recs)
