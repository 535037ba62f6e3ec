"""Synthetic quantizer codebooks and their two-way sub-codebook partitions.

The partition places every codeword's nearest neighbor (by codebook
vector distance) in the opposite sub-codebook, which bounds the
distortion of forcing a quantization into either half.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSize


@dataclass(frozen=True)
class Codebook:
    """``vectors`` holds |L| points of dimension d; ``slot`` is which of the
    three per-frame codewords (1..3) this codebook quantizes."""

    vectors: np.ndarray = field(repr=False)
    slot: int = 1

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)
        if len(v) < 2 or len(v) % 2 != 0:
            raise BadSize(f"codebook needs an even count >= 2 vectors, got {len(v)}")

    @property
    def size(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def distance_matrix(self) -> np.ndarray:
        diff = self.vectors[:, None, :] - self.vectors[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))

    def nearest_neighbors(self) -> np.ndarray:
        """Index of each codeword's nearest other codeword (ties: lowest index)."""
        d = self.distance_matrix()
        np.fill_diagonal(d, np.inf)
        return d.argmin(axis=1)


def gen_codebook(size: int, dim: int = 3, seed: int = 0, slot: int = 1) -> Codebook:
    """Draw ``size`` distinct random vectors with all pairwise distances distinct.

    Deterministic for a fixed seed. Uniform draws make distance collisions
    a measure-zero event; the explicit check re-jitters in the (practically
    unreachable) case one occurs.
    """
    if size < 2 or size % 2 != 0:
        raise BadSize(f"codebook size must be even and >= 2, got {size}")
    if dim < 1:
        raise BadSize(f"codebook dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(0.0, 1.0, size=(size, dim))
    for _ in range(16):
        d = Codebook(vectors, slot).distance_matrix()
        upper = d[np.triu_indices(size, k=1)]
        if len(np.unique(upper)) == len(upper):
            return Codebook(vectors, slot)
        vectors = vectors + rng.normal(scale=1e-9, size=vectors.shape)
    raise RuntimeError("could not draw a codebook with distinct pairwise distances")


@dataclass(frozen=True)
class CnvPartition:
    """A 2-coloring of a codebook such that nearest neighbors get opposite bits.

    ``labels[i]`` is the bit (0 or 1) assigned to codeword i. The two
    sub-codebooks are disjoint and jointly cover the codebook.
    """

    codebook: Codebook
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.shape != (self.codebook.size,):
            raise ValueError("one label per codeword required")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be bits")
        if labels.min() == labels.max():
            raise ValueError("both sub-codebooks must be non-empty")
        labels = np.ascontiguousarray(labels)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def sub_codebook(self, bit: int) -> np.ndarray:
        return np.flatnonzero(self.labels == bit)

    def nearest_in_class(self) -> np.ndarray:
        """Table t[b, i] = index of the codeword nearest to i within class b.

        When codeword i already carries bit b, that nearest member is i
        itself (distance zero). Computed once per partition and cached;
        the partition is immutable so the cache can never go stale.
        """
        cached = getattr(self, "_nic_cache", None)
        if cached is not None:
            return cached
        d = self.codebook.distance_matrix()
        table = np.empty((2, self.codebook.size), dtype=np.int64)
        for bit in (0, 1):
            members = self.sub_codebook(bit)
            table[bit] = members[d[:, members].argmin(axis=1)]
        table.flags.writeable = False
        object.__setattr__(self, "_nic_cache", table)
        return table


def cnv_partition(codebook: Codebook) -> CnvPartition:
    """Two-color the nearest-neighbor constraint graph of a codebook.

    Each codeword is constrained to differ from its nearest neighbor.
    With a unique nearest neighbor per codeword, every component of the
    undirected constraint graph contains exactly one mutual-NN pair and
    is otherwise a tree, so BFS 2-coloring always succeeds. Success is
    asserted, never approximated.
    """
    nn = codebook.nearest_neighbors()
    n = codebook.size
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for i, j in enumerate(nn):
        j = int(j)
        adjacency[i].append(j)
        adjacency[j].append(i)

    labels = np.full(n, -1, dtype=np.int8)
    for start in range(n):
        if labels[start] != -1:
            continue
        labels[start] = 0
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in adjacency[i]:
                if labels[j] == -1:
                    labels[j] = 1 - labels[i]
                    queue.append(j)
                elif labels[j] == labels[i]:
                    raise AssertionError(
                        "nearest-neighbor constraint graph is not 2-colorable; "
                        "codebook distances violate the uniqueness assumption"
                    )

    part = CnvPartition(codebook, labels.astype(np.uint8))
    if not (part.labels[nn] == 1 - part.labels).all():
        raise AssertionError("coloring failed the complementary-neighbor check")
    return part
