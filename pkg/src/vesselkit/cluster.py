"""Cohort homogenization: intensity histograms, histogram distance, distance
matrices, and Ward agglomerative clustering.

The histogram distance is max|a_i - b_i| normalized by the larger histogram
peak. The absolute value makes it symmetric, which the clustering requires.
Zero-intensity voxels are excluded from the histograms: background dominates
head scans and carries no information for grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .volume import Volume


@dataclass
class HistogramDescriptor:
    """Normalized intensity histogram over the strictly positive range."""

    bin_count: int
    bin_edges: np.ndarray = field(repr=False)
    frequencies: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        if self.frequencies.size != self.bin_count or self.bin_edges.size != self.bin_count + 1:
            raise ShapeError("histogram arrays inconsistent with bin_count")
        if np.any(self.frequencies < 0) or abs(self.frequencies.sum() - 1.0) > 1e-9:
            raise ShapeError("frequencies must be nonnegative and sum to 1")


def intensity_histogram(volume: Volume, bin_count: int = 256) -> HistogramDescriptor:
    """Histogram of strictly positive intensities, normalized to sum 1."""
    if bin_count < 2:
        raise ParameterError(f"bin_count must be >= 2, got {bin_count}")
    vals = volume.data[volume.data > 0]
    if vals.size == 0:
        raise DegenerateInputError("volume has no positive intensities")
    counts, edges = np.histogram(vals, bins=bin_count, range=(0.0, float(vals.max())))
    return HistogramDescriptor(
        bin_count=bin_count,
        bin_edges=edges,
        frequencies=counts.astype(np.float64) / counts.sum(),
    )


def histogram_distance(a: HistogramDescriptor, b: HistogramDescriptor) -> float:
    """max_i |a_i - b_i| / max(max(a), max(b))."""
    if a.bin_count != b.bin_count:
        raise ShapeError(f"bin counts differ: {a.bin_count} != {b.bin_count}")
    if not np.allclose(a.bin_edges, b.bin_edges, rtol=1e-9, atol=0.0):
        raise ShapeError("histogram bin edges are not compatible")
    num = float(np.max(np.abs(a.frequencies - b.frequencies)))
    den = float(max(a.frequencies.max(), b.frequencies.max()))
    return num / den


@dataclass
class DistanceMatrix:
    """Symmetric nonnegative pairwise distances with zero diagonal."""

    n: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n, self.n):
            raise ShapeError(f"expected ({self.n}, {self.n}) matrix, got {self.values.shape}")
        if np.any(self.values < 0) or np.any(np.diag(self.values) != 0):
            raise ShapeError("distances must be nonnegative with a zero diagonal")
        if not np.array_equal(self.values, self.values.T):
            raise ShapeError("distance matrix must be symmetric")


def distance_matrix(histograms) -> DistanceMatrix:
    """Pairwise histogram distances (upper triangle computed, mirrored)."""
    hs = list(histograms)
    n = len(hs)
    if n < 2:
        raise ParameterError("need at least 2 histograms")
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = histogram_distance(hs[i], hs[j])
    return DistanceMatrix(n=n, values=out)


@dataclass
class ClusterAssignment:
    """Flat labels (0..k-1) plus the dendrogram of performed merges.

    Merge entries are (left_id, right_id, height): original items are ids
    0..n-1, the cluster created by merge step t gets id n+t. Heights are
    nondecreasing for Ward linkage.
    """

    labels: list[int]
    merges: list[tuple[int, int, float]]
    k: int


def ward_cluster(dm: DistanceMatrix, k: int) -> ClusterAssignment:
    """Agglomerative Ward clustering on a precomputed distance matrix.

    Uses the Lance-Williams recurrence on squared distances, the standard
    adaptation of Ward's method to non-Euclidean precomputed distances.
    Merging stops once k clusters remain; ties break toward the lowest
    (i, j) index pair so the result is deterministic.
    """
    n = dm.n
    if k < 1 or k > n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")

    d2 = dm.values.astype(np.float64) ** 2
    active = list(range(n))                 # positions into d2 rows
    ids = list(range(n))                    # cluster id at each active position
    sizes = [1.0] * n
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    merges: list[tuple[int, int, float]] = []
    next_id = n

    while len(active) > k:
        best = None
        for a in range(len(active)):
            for b in range(a + 1, len(active)):
                val = d2[active[a], active[b]]
                if best is None or val < best[0]:
                    best = (val, a, b)
        d2min, a, b = best
        pa, pb = active[a], active[b]
        na, nb = sizes[a], sizes[b]
        merges.append((ids[a], ids[b], float(np.sqrt(max(d2min, 0.0)))))

        # Lance-Williams update with Ward coefficients, on squared distances.
        for c_pos in range(len(active)):
            if c_pos in (a, b):
                continue
            pc = active[c_pos]
            nc = sizes[c_pos]
            new = ((na + nc) * d2[pa, pc] + (nb + nc) * d2[pb, pc] - nc * d2min) / (na + nb + nc)
            d2[pa, pc] = d2[pc, pa] = new

        members[next_id] = members.pop(ids[a]) + members.pop(ids[b])
        ids[a] = next_id
        sizes[a] = na + nb
        next_id += 1
        del active[b], ids[b], sizes[b]

    # Canonical labels: clusters numbered by their smallest original member.
    groups = sorted(members.values(), key=min)
    labels = [0] * n
    for label, group in enumerate(groups):
        for item in group:
            labels[item] = label
    return ClusterAssignment(labels=labels, merges=merges, k=k)
