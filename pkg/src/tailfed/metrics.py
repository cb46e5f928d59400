"""Per-device metric tables and their summaries and exports.

Percentiles follow the lower-value convention with no interpolation: the
tau-th percentile of a profile is its weighted (1 - tau/100)-quantile, i.e.
the smallest value whose cumulative weight reaches tau/100. Training losses
are summarized under the device sampling weights; test errors are summarized
uniformly across devices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .superquantile import WeightedValues, weighted_quantile

METRIC_KINDS = ("train_loss", "test_error")
DEFAULT_PERCENTILES = (20, 50, 60, 80, 90, 95)


@dataclass
class DeviceMetricTable:
    kind: str
    device_ids: list[str]
    sizes: list[int]
    weights: list[float]
    values: list[float]

    def __post_init__(self) -> None:
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"kind must be one of {METRIC_KINDS}, got {self.kind!r}")
        n = len(self.device_ids)
        if not (len(self.sizes) == len(self.weights) == len(self.values) == n) or n == 0:
            raise ValueError("table columns must be non-empty and equally long")
        # builtin scalars only, so csv exports repr cleanly whatever produced the column
        self.sizes = [int(s) for s in self.sizes]
        self.weights = [float(w) for w in self.weights]
        self.values = [float(v) for v in self.values]
        if self.kind == "test_error":
            bad = [v for v in self.values if not (0.0 <= v <= 1.0)]
            if bad:
                raise ValueError(f"test_error values must lie in [0, 1], got {bad[:3]}")

    def __len__(self) -> int:
        return len(self.device_ids)

    def _profile(self) -> WeightedValues:
        if self.kind == "train_loss":
            return WeightedValues(np.asarray(self.values), np.asarray(self.weights))
        uniform = np.full(len(self), 1.0 / len(self))
        return WeightedValues(np.asarray(self.values), uniform)


def table_from_population(pop, kind: str, value_fn) -> DeviceMetricTable:
    """Build a table by applying value_fn to every shard of a population."""
    return DeviceMetricTable(
        kind=kind,
        device_ids=[s.device_id for s in pop.shards],
        sizes=[len(s) for s in pop.shards],
        weights=[s.weight for s in pop.shards],
        values=[float(value_fn(s)) for s in pop.shards],
    )


def percentile(table: DeviceMetricTable, tau: float) -> float:
    """tau-th percentile of the table's values under its summary weighting."""
    if not (0.0 <= tau < 100.0):
        raise ValueError(f"percentile level must lie in [0, 100), got {tau!r}")
    return weighted_quantile(table._profile(), 1.0 - tau / 100.0)


def summarize(table: DeviceMetricTable, percentiles=DEFAULT_PERCENTILES) -> dict[str, float]:
    """Mean and requested percentiles as a flat dict: {"mean", "p20", ...}."""
    profile = table._profile()
    out = {"mean": profile.mean()}
    for tau in percentiles:
        out[f"p{int(tau)}"] = percentile(table, float(tau))
    return out


def histogram(table: DeviceMetricTable, bins: int) -> list[tuple[float, int]]:
    """Equal-width bins over [min, max], right-open except the last.

    Returns (left edge, count) pairs; counts sum to the number of devices.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.asarray(table.values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    return [(float(edges[i]), int(counts[i])) for i in range(bins)]


def scatter_export(table: DeviceMetricTable, path) -> None:
    """Write one row per device (id, n_k, alpha_k, value), sorted by id."""
    order = sorted(range(len(table)), key=lambda i: table.device_ids[i])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "n_k", "alpha_k", "value"])
        for i in order:
            writer.writerow(
                [table.device_ids[i], table.sizes[i], repr(table.weights[i]), repr(table.values[i])]
            )


def summary_export(records: list[dict], path) -> None:
    """Write summary records (one dict per row) to CSV with a stable header."""
    if not records:
        raise ValueError("no records to export")
    header = list(records[0].keys())
    for rec in records:
        if list(rec.keys()) != header:
            raise ValueError("summary records must share one key order")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in rec.values()])
