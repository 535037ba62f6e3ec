"""Synthetic cover-stream generator with controllable codeword correlations.

Real codeword streams show two kinds of structure: each slot depends on
its own previous value (inter-frame), and the second and third slots
depend on the slots before them within the frame (intra-frame). The
generator realizes both: slot 1 is a first-order Markov chain, and slots
2 and 3 draw from the renormalized product of their own transition row
with a conditional table indexed by the coarse bucket of the preceding
slot's fresh value. Dirichlet-sampled rows with small concentration
produce strongly peaked, highly correlated streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .streams import CodewordClip, DEFAULT_FRAME_MS

N_BUCKETS = 4  # quartile buckets used for intra-frame conditioning
_ROW_SUM_TOL = 1e-9


def _check_stochastic(name: str, table: np.ndarray):
    if (table < 0).any():
        raise ValueError(f"{name} has negative entries")
    err = np.abs(table.sum(axis=1) - 1.0).max()
    if err > _ROW_SUM_TOL:
        raise ValueError(f"{name} rows sum to 1 +/- {err:.2e}, beyond tolerance")


@dataclass(frozen=True)
class CoverModel:
    """Sampling tables for the cover generator.

    ``transitions[j]`` is the row-stochastic next-index table of slot
    j+1; ``intra2``/``intra3`` condition slot 2 on slot 1's bucket and
    slot 3 on slot 2's bucket. ``seed`` records how the tables were drawn.
    """

    transitions: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)
    intra2: np.ndarray = field(repr=False)
    intra3: np.ndarray = field(repr=False)
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("concentration alpha must be > 0")
        frozen = []
        for j, t in enumerate(self.transitions):
            t = np.ascontiguousarray(np.asarray(t, dtype=np.float64))
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise ValueError(f"slot {j + 1} transition table must be square")
            _check_stochastic(f"slot {j + 1} transitions", t)
            t.flags.writeable = False
            frozen.append(t)
        object.__setattr__(self, "transitions", tuple(frozen))
        for name in ("intra2", "intra3"):
            t = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if t.shape[0] != N_BUCKETS:
                raise ValueError(f"{name} must have {N_BUCKETS} bucket rows")
            _check_stochastic(name, t)
            t.flags.writeable = False
            object.__setattr__(self, name, t)
        sizes = self.codebook_sizes
        if self.intra2.shape[1] != sizes[1] or self.intra3.shape[1] != sizes[2]:
            raise ValueError("intra-frame tables disagree with transition sizes")

    @property
    def codebook_sizes(self) -> tuple[int, int, int]:
        return tuple(t.shape[0] for t in self.transitions)

    @classmethod
    def random(cls, codebook_sizes=(128, 32, 32), alpha: float = 0.1, seed: int = 0):
        """Draw all tables with Dirichlet(alpha) rows; deterministic per seed."""
        rng = np.random.default_rng(seed)
        transitions = tuple(
            rng.dirichlet(np.full(s, alpha), size=s) for s in codebook_sizes
        )
        intra2 = rng.dirichlet(np.full(codebook_sizes[1], alpha), size=N_BUCKETS)
        intra3 = rng.dirichlet(np.full(codebook_sizes[2], alpha), size=N_BUCKETS)
        return cls(transitions, intra2, intra3, alpha, seed)


def _bucket(indices: np.ndarray, size: int) -> np.ndarray:
    return np.minimum((indices * N_BUCKETS) // size, N_BUCKETS - 1)


def _sample_rows(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One categorical draw per row, given inclusive cumulative rows."""
    idx = (cum_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def gen_cover_batch(
    model: CoverModel,
    n_frames: int,
    count: int,
    seed: int = 0,
    initial: tuple[int, int, int] | None = None,
) -> np.ndarray:
    """Sample ``count`` independent cover clips at once.

    Returns an array of shape (count, 3, n_frames), uint16. The time loop
    is sequential by nature; all clips advance together so each step is a
    handful of vectorized draws.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    s1, s2, s3 = model.codebook_sizes
    t1, t2, t3 = model.transitions
    cum1 = t1.cumsum(axis=1)

    out = np.empty((count, 3, n_frames), dtype=np.uint16)

    if initial is not None:
        a1 = np.full(count, initial[0], dtype=np.int64)
        a2 = np.full(count, initial[1], dtype=np.int64)
        a3 = np.full(count, initial[2], dtype=np.int64)
    else:
        a1 = rng.integers(0, s1, size=count)
        a2 = _sample_rows(
            model.intra2[_bucket(a1, s1)].cumsum(axis=1), rng.random(count)
        )
        a3 = _sample_rows(
            model.intra3[_bucket(a2, s2)].cumsum(axis=1), rng.random(count)
        )
    out[:, 0, 0], out[:, 1, 0], out[:, 2, 0] = a1, a2, a3

    for t in range(1, n_frames):
        a1 = _sample_rows(cum1[a1], rng.random(count))
        a2 = _sample_rows(
            _coupled_rows(t2, a2, model.intra2, _bucket(a1, s1)), rng.random(count)
        )
        a3 = _sample_rows(
            _coupled_rows(t3, a3, model.intra3, _bucket(a2, s2)), rng.random(count)
        )
        out[:, 0, t], out[:, 1, t], out[:, 2, t] = a1, a2, a3

    return out


def _coupled_rows(trans, prev, intra, buckets) -> np.ndarray:
    """Cumulative rows of normalize(trans[prev] * intra[bucket]).

    A product row can underflow to all zeros when both factors are
    extremely peaked; those rows fall back to the bare transition row.
    """
    rows = trans[prev] * intra[buckets]
    sums = rows.sum(axis=1, keepdims=True)
    dead = sums[:, 0] == 0.0
    if dead.any():
        rows[dead] = trans[prev[dead]]
        sums[dead] = 1.0
    rows /= sums
    return rows.cumsum(axis=1)


def gen_cover(
    model: CoverModel,
    n_frames: int,
    seed: int = 0,
    initial: tuple[int, int, int] | None = None,
    frame_duration_ms: int = DEFAULT_FRAME_MS,
) -> CodewordClip:
    """Sample one cover clip; deterministic for a fixed seed."""
    codes = gen_cover_batch(model, n_frames, 1, seed, initial)[0]
    return CodewordClip(codes, model.codebook_sizes, frame_duration_ms)
