"""Procedural multi-room floorplans on a 0.25 m occupancy grid.

Cell labels: 0 free, 1 wall, ``1 + c`` for target object class ``c`` (1..6).
Grid index ``[i, j]`` covers ``x in [i*cell, (i+1)*cell)`` and likewise for y.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, GenerationError

FREE = 0
WALL = 1
NUM_TARGET_CLASSES = 6
TARGET_NAMES = ("television", "refrigerator", "bookshelf", "table", "sofa", "bed")
FLOORPLAN_VERSION = 1


@dataclass
class FloorplanConfig:
    width_cells: int = 40
    height_cells: int = 32
    cell_size: float = 0.25
    rooms: tuple[int, int] = (2, 6)
    min_room_cells: int = 8
    target_classes: tuple[int, int] = (1, 6)
    door_cells: int = 3
    max_retries: int = 50

    def validate(self) -> None:
        lo, hi = self.rooms
        clo, chi = self.target_classes
        if not (1 <= lo <= hi) or not (0 <= clo <= chi <= NUM_TARGET_CLASSES):
            raise ConfigurationError(f"floorplan: empty or invalid range in {self}")
        if min(self.width_cells, self.height_cells) < self.min_room_cells + 2:
            raise ConfigurationError("floorplan: grid too small for a single room")


@dataclass
class Floorplan:
    grid: np.ndarray
    cell_size: float
    rooms: list[tuple[int, int, int, int]]
    doors: list[list[tuple[int, int]]]
    objects: list[dict] = field(default_factory=list)
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def extent(self) -> tuple[float, float]:
        return self.grid.shape[0] * self.cell_size, self.grid.shape[1] * self.cell_size

    @property
    def classes(self) -> list[int]:
        return sorted({o["class_id"] for o in self.objects})

    def free_mask(self) -> np.ndarray:
        return self.grid == FREE

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(np.floor(x / self.cell_size)), int(np.floor(y / self.cell_size))

    def is_free_point(self, x: float, y: float) -> bool:
        i, j = self.cell_of(x, y)
        nx, ny = self.grid.shape
        return 0 <= i < nx and 0 <= j < ny and self.grid[i, j] == FREE

    def wall_segments(self) -> list[tuple[float, float, float, float, int]]:
        """Boundary edges between free and occupied cells, for plotting."""
        g = self.grid
        c = self.cell_size
        nx, ny = g.shape
        segs = []
        for i in range(nx):
            for j in range(ny):
                if g[i, j] == FREE:
                    continue
                for di, dj, seg in ((1, 0, ((i + 1) * c, j * c, (i + 1) * c, (j + 1) * c)),
                                    (-1, 0, (i * c, j * c, i * c, (j + 1) * c)),
                                    (0, 1, (i * c, (j + 1) * c, (i + 1) * c, (j + 1) * c)),
                                    (0, -1, (i * c, j * c, (i + 1) * c, j * c))):
                    a, b = i + di, j + dj
                    if 0 <= a < nx and 0 <= b < ny and g[a, b] == FREE:
                        segs.append((*seg, int(g[i, j])))
        return segs

    def to_dict(self) -> dict:
        return {
            "version": FLOORPLAN_VERSION,
            "seed": self.seed,
            "cell_size": self.cell_size,
            "shape": list(self.grid.shape),
            "grid": ["".join(str(int(v)) for v in row) for row in self.grid],
            "rooms": [list(r) for r in self.rooms],
            "doors": [[list(c) for c in d] for d in self.doors],
            "objects": [{"class_id": o["class_id"], "name": o["name"],
                         "cells": [list(c) for c in o["cells"]]} for o in self.objects],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Floorplan":
        if d.get("version") != FLOORPLAN_VERSION:
            raise GenerationError(f"unsupported floorplan version {d.get('version')!r}")
        grid = np.array([[int(ch) for ch in row] for row in d["grid"]], dtype=np.int64)
        if list(grid.shape) != list(d["shape"]):
            raise GenerationError("floorplan grid does not match its declared shape")
        return cls(grid=grid, cell_size=float(d["cell_size"]),
                   rooms=[tuple(r) for r in d["rooms"]],
                   doors=[[tuple(c) for c in door] for door in d["doors"]],
                   objects=[{"class_id": o["class_id"], "name": o["name"],
                             "cells": [tuple(c) for c in o["cells"]]} for o in d["objects"]],
                   seed=d.get("seed"))

    @classmethod
    def from_json(cls, text: str) -> "Floorplan":
        return cls.from_dict(json.loads(text))


def free_components(grid: np.ndarray) -> int:
    """Number of 4-connected components of free cells (flood fill)."""
    free = grid == FREE
    seen = np.zeros_like(free)
    nx, ny = grid.shape
    count = 0
    for si, sj in zip(*np.nonzero(free)):
        if seen[si, sj]:
            continue
        count += 1
        seen[si, sj] = True
        q = deque([(si, sj)])
        while q:
            i, j = q.popleft()
            for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
                if 0 <= a < nx and 0 <= b < ny and free[a, b] and not seen[a, b]:
                    seen[a, b] = True
                    q.append((a, b))
    return count


def spawn_cells(plan: Floorplan) -> np.ndarray:
    """Free cells whose four neighbours are also free."""
    g = plan.grid
    f = g == FREE
    ok = f.copy()
    ok[1:, :] &= f[:-1, :]
    ok[:-1, :] &= f[1:, :]
    ok[:, 1:] &= f[:, :-1]
    ok[:, :-1] &= f[:, 1:]
    ok[0, :] = ok[-1, :] = False
    ok[:, 0] = ok[:, -1] = False
    return np.argwhere(ok)


def validate_floorplan(plan: Floorplan) -> None:
    g = plan.grid
    if (g[0, :] == FREE).any() or (g[-1, :] == FREE).any() or \
            (g[:, 0] == FREE).any() or (g[:, -1] == FREE).any():
        raise GenerationError("floorplan border is not closed")
    if free_components(g) != 1:
        raise GenerationError("free space is not a single 4-connected component")
    if len(spawn_cells(plan)) == 0:
        raise GenerationError("no valid spawn cell")
    free = g == FREE
    nx, ny = g.shape
    for o in plan.objects:
        touching = False
        for i, j in o["cells"]:
            if g[i, j] != 1 + o["class_id"]:
                raise GenerationError("object footprint does not match grid labels")
            for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
                if 0 <= a < nx and 0 <= b < ny and free[a, b]:
                    touching = True
        if not touching:
            raise GenerationError(f"object class {o['class_id']} is not reachable")


def _split_rooms(rng, cfg, n_rooms):
    nx, ny = cfg.width_cells, cfg.height_cells
    grid = np.zeros((nx, ny), dtype=np.int64)
    grid[0, :] = grid[-1, :] = WALL
    grid[:, 0] = grid[:, -1] = WALL
    rects = [(1, 1, nx - 1, ny - 1)]
    m = cfg.min_room_cells
    while len(rects) < n_rooms:
        options = []
        for r, (i0, j0, i1, j1) in enumerate(rects):
            if i1 - i0 >= 2 * m + 1:
                options.append(((i1 - i0) * (j1 - j0), r, 0))
            if j1 - j0 >= 2 * m + 1:
                options.append(((i1 - i0) * (j1 - j0), r, 1))
        if not options:
            break
        area = max(o[0] for o in options)
        best = [o for o in options if o[0] == area]
        _, r, axis = best[int(rng.integers(len(best)))]
        i0, j0, i1, j1 = rects.pop(r)
        if axis == 0:
            s = int(rng.integers(i0 + m, i1 - m))
            grid[s, j0:j1] = WALL
            rects += [(i0, j0, s, j1), (s + 1, j0, i1, j1)]
        else:
            s = int(rng.integers(j0 + m, j1 - m))
            grid[i0:i1, s] = WALL
            rects += [(i0, j0, i1, s), (i0, s + 1, i1, j1)]
    return grid, sorted(rects)


def _place_doors(rng, grid, rects, door_cells):
    nx, ny = grid.shape
    room = -np.ones_like(grid)
    for k, (i0, j0, i1, j1) in enumerate(rects):
        room[i0:i1, j0:j1] = k
    pairs: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            if grid[i, j] != WALL:
                continue
            for orient, (a, b) in enumerate((((i - 1, j), (i + 1, j)), ((i, j - 1), (i, j + 1)))):
                ra, rb = room[a], room[b]
                if ra >= 0 and rb >= 0 and ra != rb:
                    key = (min(ra, rb), max(ra, rb), orient)
                    pairs.setdefault(key, []).append((i, j))
    keys = sorted(pairs)
    order = rng.permutation(len(keys))
    parent = list(range(len(rects)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    doors = []
    for k in order:
        a, b, orient = keys[k]
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        cells = sorted(pairs[keys[k]])
        # contiguous runs along the wall line
        runs, cur = [], [cells[0]]
        for c in cells[1:]:
            prev = cur[-1]
            step = (c[1] - prev[1]) if orient == 0 else (c[0] - prev[0])
            same_line = (c[0] == prev[0]) if orient == 0 else (c[1] == prev[1])
            if same_line and step == 1:
                cur.append(c)
            else:
                runs.append(cur)
                cur = [c]
        runs.append(cur)
        run = max(runs, key=len)
        width = min(door_cells, len(run))
        start = int(rng.integers(0, len(run) - width + 1))
        door = run[start:start + width]
        for i, j in door:
            grid[i, j] = FREE
        doors.append(door)
        parent[ra] = rb
    if len({find(k) for k in range(len(rects))}) != 1:
        return None
    return doors


def _place_objects(rng, grid, rects, doors, classes):
    nx, ny = grid.shape
    door_cells = {c for d in doors for c in d}
    objects = []
    for cls_id in classes:
        placed = False
        for _ in range(60):
            i0, j0, i1, j1 = rects[int(rng.integers(len(rects)))]
            w, h = ((2, 2), (1, 2), (2, 1))[int(rng.integers(3))]
            side = int(rng.integers(4))
            if i1 - i0 < w + 2 or j1 - j0 < h + 2:
                continue
            if side == 0:
                i, j = i0, int(rng.integers(j0, j1 - h + 1))
            elif side == 1:
                i, j = i1 - w, int(rng.integers(j0, j1 - h + 1))
            elif side == 2:
                i, j = int(rng.integers(i0, i1 - w + 1)), j0
            else:
                i, j = int(rng.integers(i0, i1 - w + 1)), j1 - h
            cells = [(a, b) for a in range(i, i + w) for b in range(j, j + h)]
            if any(grid[a, b] != FREE for a, b in cells):
                continue
            near = {(a + da, b + db) for a, b in cells for da in (-2, -1, 0, 1, 2)
                    for db in (-2, -1, 0, 1, 2)}
            if near & door_cells:
                continue
            if any(0 <= a < nx and 0 <= b < ny and grid[a, b] > WALL for a, b in near):
                continue
            for a, b in cells:
                grid[a, b] = 1 + cls_id
            if free_components(grid) != 1:
                for a, b in cells:
                    grid[a, b] = FREE
                continue
            objects.append({"class_id": int(cls_id), "name": TARGET_NAMES[cls_id - 1],
                            "cells": cells})
            placed = True
            break
        if not placed:
            return None
    return objects


def generate_floorplan(seed: int, cfg: FloorplanConfig | None = None) -> Floorplan:
    """Deterministic multi-room plan with 1..6 target object classes."""
    cfg = cfg or FloorplanConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        n_rooms = int(rng.integers(cfg.rooms[0], cfg.rooms[1] + 1))
        grid, rects = _split_rooms(rng, cfg, n_rooms)
        if len(rects) < cfg.rooms[0]:
            continue
        doors = _place_doors(rng, grid, rects, cfg.door_cells) if len(rects) > 1 else []
        if doors is None:
            continue
        n_cls = int(rng.integers(cfg.target_classes[0], cfg.target_classes[1] + 1))
        classes = sorted(int(c) + 1 for c in rng.choice(NUM_TARGET_CLASSES, n_cls, replace=False))
        objects = _place_objects(rng, grid, rects, doors, classes)
        if objects is None:
            continue
        plan = Floorplan(grid=grid, cell_size=cfg.cell_size, rooms=rects, doors=doors,
                         objects=objects, seed=seed)
        try:
            validate_floorplan(plan)
        except GenerationError:
            continue
        return plan
    raise GenerationError(f"could not generate a floorplan for seed {seed} "
                          f"after {cfg.max_retries} attempts")


def open_hall(width_m: float, height_m: float, cell_size: float = 0.25) -> Floorplan:
    """A single empty rectangular room (used for calibration checks)."""
    nx = int(round(width_m / cell_size)) + 2
    ny = int(round(height_m / cell_size)) + 2
    grid = np.zeros((nx, ny), dtype=np.int64)
    grid[0, :] = grid[-1, :] = WALL
    grid[:, 0] = grid[:, -1] = WALL
    return Floorplan(grid=grid, cell_size=cell_size, rooms=[(1, 1, nx - 1, ny - 1)], doors=[])
