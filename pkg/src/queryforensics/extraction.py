"""Recovering an attack trace from a history query log.

The trace is the single-link correlation cluster seeded at the reported
adversarial example: DBSCAN with min-points 1 under the Pearson metric,
restricted to log entries at or before the adversarial example's position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .signal import Image, quantize


@dataclass
class QueryLog:
    """Ordered history of (timestamp, image) pairs.

    Timestamps are strictly increasing integers; all images share dims.
    Appending and extraction must not interleave on the same instance.
    """

    timestamps: list[int] = field(default_factory=list)
    images: list[Image] = field(default_factory=list)

    def __post_init__(self):
        if len(self.timestamps) != len(self.images):
            raise InvalidInputError("timestamps and images must have equal length")
        self._check_order()

    def _check_order(self):
        ts = self.timestamps
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidInputError("timestamps must be strictly increasing")
        if self.images:
            dims = self.images[0].dims
            if any(img.dims != dims for img in self.images):
                raise InvalidInputError("all log images must share dims")

    def append(self, timestamp: int, image: Image):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise InvalidInputError("timestamp must exceed the last logged one")
        if self.images and image.dims != self.images[0].dims:
            raise InvalidInputError("image dims differ from the log's")
        self.timestamps.append(int(timestamp))
        self.images.append(image)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dims(self):
        return self.images[0].dims if self.images else None


@dataclass
class Trace:
    """An extracted attack trace; the last query is the adversarial example."""

    queries: list[Image]
    adv_index: int
    source_indices: list[int] | None = None  # positions in the originating log

    def __post_init__(self):
        if not self.queries:
            raise InvalidInputError("trace must be nonempty")
        if self.adv_index != len(self.queries) - 1:
            raise InvalidInputError("adversarial example must be the last trace query")

    def __len__(self) -> int:
        return len(self.queries)

    @property
    def adv(self) -> Image:
        return self.queries[self.adv_index]


def _normalized_rows(stack: np.ndarray) -> np.ndarray:
    """Center and L2-normalize each row; constant rows become zero rows,
    which makes their correlation with anything 0 (the pearson convention)."""
    centered = stack - stack.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return centered / norms


def extract_trace(log: QueryLog, adv: Image, r: float = 0.5) -> Trace:
    """Extract the trace of the attack that produced ``adv`` from ``log``.

    Fixed point of X := {adv}; X <- X + {x in Q | exists z in X, R(z, x) >= r},
    i.e. single-link transitive closure over the correlation graph. Only log
    entries at or before the adversarial example's last byte-identical
    occurrence are eligible (the trace ends at the reported adversarial
    example). If the log does not contain ``adv``, the result is the matching
    cluster with ``adv`` appended (a trace of length 1 for an unrelated log).
    """
    if not (0.0 < r < 1.0):
        raise InvalidInputError(f"r must lie in (0, 1), got {r}")
    if log.images and log.images[0].dims != adv.dims:
        raise InvalidInputError(f"adv dims {adv.dims} do not match log dims {log.images[0].dims}")
    if not log.images:
        return Trace(queries=[adv], adv_index=0, source_indices=[])

    adv_pos = None
    for i in range(len(log) - 1, -1, -1):  # last byte-identical occurrence
        if log.images[i] == adv:
            adv_pos = i
            break

    n_eligible = len(log) if adv_pos is None else adv_pos + 1
    stack = np.stack([img.data.ravel() for img in log.images[:n_eligible]])
    rows = _normalized_rows(stack)
    adv_row = _normalized_rows(adv.data.ravel()[np.newaxis, :])[0]

    # BFS over the thresholded correlation graph == the fixed-point closure.
    corr = rows @ rows.T
    seed = rows @ adv_row
    member = seed >= r
    if adv_pos is not None:
        member[adv_pos] = True
    frontier = np.flatnonzero(member)
    while frontier.size:
        reached = (corr[frontier] >= r).any(axis=0)
        fresh = reached & ~member
        member |= fresh
        frontier = np.flatnonzero(fresh)

    indices = [int(i) for i in np.flatnonzero(member)]
    queries = [log.images[i] for i in indices]
    if adv_pos is None:
        queries.append(adv)
        indices_out = indices
    else:
        indices_out = indices
    return Trace(queries=queries, adv_index=len(queries) - 1, source_indices=indices_out)


def downscale(image: Image, side: int) -> Image:
    """Bilinear resize to side x side per channel, then requantize."""
    if side < 1:
        raise InvalidInputError("side must be a positive integer")
    h, w, _ = image.dims
    if side > min(h, w):
        raise InvalidInputError(f"side {side} exceeds min spatial dim {min(h, w)}")
    if side == h and side == w:
        return image
    zoomed = ndimage.zoom(image.data, (side / h, side / w, 1.0), order=1, grid_mode=True,
                          mode="nearest")
    return Image(quantize(zoomed))


def downscale_log(log: QueryLog, side: int) -> QueryLog:
    return QueryLog(timestamps=list(log.timestamps),
                    images=[downscale(img, side) for img in log.images])
