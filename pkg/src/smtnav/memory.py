"""Scene memory and representative-center selection for the factorized encoder."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .embedding import Embedder, Observation, image_features
from .errors import ContractError


@dataclass
class _Element:
    step: int
    pose: np.ndarray
    image: np.ndarray    # phi_I output, 1 x image_width
    action: np.ndarray   # phi_a output, 1 x action_width
    raw_image: np.ndarray
    prev_action: int


class SceneMemory:
    """Append-only (FIFO-bounded) set of embedded observations.

    Each element keeps its frame-independent encoder outputs; ``materialize``
    recomputes only the pose part for the requested frame and time.
    """

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ContractError("memory capacity must be at least 1")
        self.capacity = capacity
        self._items: deque[_Element] = deque()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def steps(self) -> list[int]:
        return [e.step for e in self._items]

    @property
    def poses(self) -> np.ndarray:
        return np.array([e.pose for e in self._items])

    def update(self, o: Observation, emb: Embedder) -> "SceneMemory":
        """Add ``psi(o)``'s static parts; evicts the oldest element when full."""
        if self._items and o.t <= self._items[-1].step:
            raise ContractError(
                f"memory update out of order: step {o.t} after {self._items[-1].step}")
        feats = image_features(o, emb.cfg.depth_range)[None, :]
        with ad.no_grad():
            img = emb.encode_image(feats).value
            act = emb.encode_action([o.prev_action]).value
        if len(self._items) == self.capacity:
            self._items.popleft()
        self._items.append(_Element(o.t, np.array(o.pose, dtype=np.float64), img, act,
                                    feats[0], int(o.prev_action)))
        return self

    def materialize(self, frame, emb: Embedder, now: int) -> Tensor:
        """``|M| x d_x`` matrix of psi rows seen from ``frame`` at step ``now``."""
        if not self._items:
            raise ContractError("materialize: memory is empty")
        items = self._items
        img = Tensor(np.concatenate([e.image for e in items], axis=0))
        act = Tensor(np.concatenate([e.action for e in items], axis=0))
        pf = emb.pose_features(np.array([e.pose for e in items]), frame,
                               [e.step for e in items], now)
        return emb.combine(img, emb.encode_pose(pf), act)

    def raw(self):
        """Stacked raw inputs (ray features, poses, prev actions, steps)."""
        items = self._items
        return (np.array([e.raw_image for e in items]), np.array([e.pose for e in items]),
                np.array([e.prev_action for e in items]), np.array([e.step for e in items]))


def materialize(m: SceneMemory, frame, emb: Embedder, now: int) -> Tensor:
    return m.materialize(frame, emb, now)


@dataclass
class CenterSet:
    rows: Tensor
    indices: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rows.rows


def _values(m) -> np.ndarray:
    return m.value if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)


def fps_indices(x: np.ndarray, k: int, seed_index: int) -> np.ndarray:
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"fps: need 1 <= k <= {n}, got k={k}")
    if not 0 <= seed_index < n:
        raise ContractError(f"fps: seed index {seed_index} outside 0..{n - 1}")
    return _kernels.fps(np.ascontiguousarray(x, dtype=np.float64), int(k), int(seed_index))


def fps_centers(m, k: int, seed_index: int | None = None) -> CenterSet:
    """Greedy farthest-point selection of ``k`` rows (default seed: newest row)."""
    x = _values(m)
    seed = x.shape[0] - 1 if seed_index is None else seed_index
    idx = fps_indices(x, k, seed)
    rows = ad.take_rows(m, idx) if isinstance(m, Tensor) else Tensor(x[idx])
    return CenterSet(rows, idx)


def window_centers(m, k: int) -> CenterSet:
    """The ``min(k, |M|)`` most recent rows."""
    if k < 1:
        raise ContractError("window: k must be at least 1")
    x = _values(m)
    idx = np.arange(max(0, x.shape[0] - k), x.shape[0])
    rows = ad.take_rows(m, idx) if isinstance(m, Tensor) else Tensor(x[idx])
    return CenterSet(rows, idx)


def static_centers(store, name: str = "centers.static") -> CenterSet:
    """Learned center rows, independent of the memory contents."""
    return CenterSet(store[name], None)


def covering_radius(x: np.ndarray, idx) -> float:
    """Largest distance from any row to its nearest selected row."""
    d = np.sqrt(((x[:, None, :] - x[None, idx, :]) ** 2).sum(axis=2))
    return float(d.min(axis=1).max())
