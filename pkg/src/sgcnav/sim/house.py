"""Procedural grid houses: rooms, objects, occupancy, and geodesic distances.

All geometry lives on a 0.25 m cell grid. World coordinates are (x, z)
meters with x along grid columns and z along rows; y is height above the
floor. A house is fully determined by (seed, generation config).
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

CELL = 0.25

# 16 navigation target categories.
TARGET_CATEGORIES = [
    "AlarmClock", "Apple", "BaseballBat", "Basketball", "Bed", "Bowl",
    "Chair", "GarbageCan", "HousePlant", "Laptop", "Mug", "Sofa",
    "SprayBottle", "Television", "Toilet", "Vase",
]

# Extra categories that appear in houses but are never training targets;
# used for the novel-category fine-tuning protocol.
NOVEL_CATEGORIES = [
    "Pot", "Egg", "CellPhone", "Lettuce", "Toaster", "Microwave",
    "Fridge", "Statue", "Stool", "Desk", "DeskLamp", "Newspaper",
]

CATEGORIES = TARGET_CATEGORIES + NOVEL_CATEGORIES
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}

ROOM_TYPES = ["Kitchen", "Bedroom", "Bathroom", "LivingRoom"]

# Furniture blocks its cell and can support small items on top.
SUPPORT_CATEGORIES = {
    "Bed", "Chair", "Sofa", "GarbageCan", "Toilet", "Fridge", "Stool",
    "Desk",
}
BLOCKING_CATEGORIES = SUPPORT_CATEGORIES | {"Television", "HousePlant",
                                            "Microwave", "Statue"}

# Height bands (meters above floor) keep Above/Below relations nondegenerate.
_TALL = {"Fridge", "Television", "HousePlant", "BaseballBat", "Statue",
         "DeskLamp"}
_MID = {"Bed", "Chair", "Sofa", "Toilet", "GarbageCan", "Stool", "Desk",
        "Basketball", "Microwave", "Toaster", "Pot", "Lettuce"}


def height_band(category: str) -> tuple[float, float]:
    if category in _TALL:
        return (0.9, 1.4)
    if category in _MID:
        return (0.4, 0.8)
    return (0.05, 0.35)

# Objects with mean band height above this are hidden at full look-down pitch.
HIGH_BAND_Y = 0.85


@dataclass(frozen=True)
class Room:
    room_id: int
    room_type: str
    # Half-open cell rectangle [r0, r1) x [c0, c1).
    r0: int
    c0: int
    r1: int
    c1: int

    def contains_cell(self, r: int, c: int) -> bool:
        return self.r0 <= r < self.r1 and self.c0 <= c < self.c1

    def contains_xz(self, x: float, z: float) -> bool:
        return (self.c0 * CELL <= x < self.c1 * CELL
                and self.r0 * CELL <= z < self.r1 * CELL)


@dataclass
class ObjectInstance:
    id: int
    category: str
    position: tuple[float, float, float]  # (x, y, z); y is height
    room_id: int
    support_id: int | None = None

    @property
    def cell(self) -> tuple[int, int]:
        return (int(self.position[2] / CELL), int(self.position[0] / CELL))


@dataclass(frozen=True)
class GenerationConfig:
    grid_min: int = 8
    grid_max: int = 12
    rooms_min: int = 1
    rooms_max: int = 4
    objects_per_room_min: int = 2
    objects_per_room_max: int = 6
    guaranteed_categories: tuple[str, ...] = ()

    def validate(self) -> None:
        if not (1 <= self.rooms_min <= self.rooms_max <= 6):
            raise ValueError("room count must lie in [1, 6]")
        if not (2 <= self.objects_per_room_min
                <= self.objects_per_room_max <= 12):
            raise ValueError("objects per room must lie in [2, 12]")
        for c in self.guaranteed_categories:
            if c not in CATEGORY_INDEX:
                raise ValueError(f"unknown category {c!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guaranteed_categories"] = list(self.guaranteed_categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        d["guaranteed_categories"] = tuple(d.get("guaranteed_categories", ()))
        return cls(**d)


class GenerationError(RuntimeError):
    pass


@dataclass
class House:
    seed: int
    config: GenerationConfig
    rows: int
    cols: int
    rooms: list[Room]
    objects: list[ObjectInstance]
    occupancy: np.ndarray  # bool (rows, cols); True = blocked
    _reach: np.ndarray | None = field(default=None, repr=False)
    _dist_fields: dict = field(default_factory=dict, repr=False)
    _los_cache: dict = field(default_factory=dict, repr=False)

    def room_of_cell(self, r: int, c: int) -> Room:
        for room in self.rooms:
            if room.contains_cell(r, c):
                return room
        raise ValueError(f"cell ({r}, {c}) outside all rooms")

    def objects_of_category(self, category: str) -> list[ObjectInstance]:
        return [o for o in self.objects if o.category == category]

    def reachable(self) -> np.ndarray:
        if self._reach is None:
            self._reach = reachable_positions(self)
        return self._reach

    def distance_field(self, category: str) -> np.ndarray:
        """Geodesic cell distance to the nearest instance of ``category``."""
        if category not in self._dist_fields:
            self._dist_fields[category] = _category_distance_field(
                self, category)
        return self._dist_fields[category]

    def fingerprint(self) -> str:
        payload = {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "rows": self.rows,
            "cols": self.cols,
            "rooms": [asdict(r) for r in self.rooms],
            "objects": [asdict(o) for o in self.objects],
            "occupancy": self.occupancy.astype(int).tolist(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _split_rooms(rng: np.random.Generator, rows: int, cols: int,
                 n_rooms: int) -> list[tuple[int, int, int, int]]:
    """Recursively bisect the footprint into n_rooms cell rectangles."""
    rects = [(0, 0, rows, cols)]
    while len(rects) < n_rooms:
        # Split the largest rect that is still splittable (min room side 3).
        order = sorted(range(len(rects)),
                       key=lambda i: -(rects[i][2] - rects[i][0])
                       * (rects[i][3] - rects[i][1]))
        done = True
        for i in order:
            r0, c0, r1, c1 = rects[i]
            h, w = r1 - r0, c1 - c0
            axes = []
            if h >= 7:
                axes.append(0)
            if w >= 7:
                axes.append(1)
            if not axes:
                continue
            axis = axes[int(rng.integers(len(axes)))]
            if axis == 0:
                cut = int(rng.integers(r0 + 3, r1 - 3 + 1))
                rects[i] = (r0, c0, cut, c1)
                rects.append((cut, c0, r1, c1))
            else:
                cut = int(rng.integers(c0 + 3, c1 - 3 + 1))
                rects[i] = (r0, c0, r1, cut)
                rects.append((r0, cut, r1, c1))
            done = False
            break
        if done:
            break
    return rects


def _carve_walls(rng: np.random.Generator, occ: np.ndarray,
                 rects: list[tuple[int, int, int, int]]) -> None:
    """Blocked cells along shared room boundaries, one door cell per wall."""
    for i, (r0, c0, r1, c1) in enumerate(rects):
        for j, (s0, d0, s1, d1) in enumerate(rects):
            if j <= i:
                continue
            # Horizontal wall: rect j directly below rect i.
            if s0 == r1 and max(c0, d0) < min(c1, d1):
                lo, hi = max(c0, d0), min(c1, d1)
                occ[s0, lo:hi] = True
                door = int(rng.integers(lo, hi))
                occ[s0, door] = False
            if r0 == s1 and max(c0, d0) < min(c1, d1):
                lo, hi = max(c0, d0), min(c1, d1)
                occ[r0, lo:hi] = True
                door = int(rng.integers(lo, hi))
                occ[r0, door] = False
            # Vertical wall.
            if d0 == c1 and max(r0, s0) < min(r1, s1):
                lo, hi = max(r0, s0), min(r1, s1)
                occ[lo:hi, d0] = True
                door = int(rng.integers(lo, hi))
                occ[door, d0] = False
            if c0 == d1 and max(r0, s0) < min(r1, s1):
                lo, hi = max(r0, s0), min(r1, s1)
                occ[lo:hi, c0] = True
                door = int(rng.integers(lo, hi))
                occ[door, c0] = False


def _cell_center(r: int, c: int) -> tuple[float, float]:
    return ((c + 0.5) * CELL, (r + 0.5) * CELL)


def _config_seed(seed: int, cfg: GenerationConfig, attempt: int) -> int:
    blob = json.dumps({"seed": seed, "cfg": cfg.to_dict(),
                       "attempt": attempt}, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _try_generate(seed: int, cfg: GenerationConfig,
                  attempt: int) -> House | None:
    rng = np.random.Generator(np.random.PCG64(_config_seed(seed, cfg, attempt)))
    rows = int(rng.integers(cfg.grid_min, cfg.grid_max + 1))
    cols = int(rng.integers(cfg.grid_min, cfg.grid_max + 1))
    n_rooms = int(rng.integers(cfg.rooms_min, cfg.rooms_max + 1))
    rects = _split_rooms(rng, rows, cols, n_rooms)
    occ = np.zeros((rows, cols), dtype=bool)
    _carve_walls(rng, occ, rects)

    rooms = [Room(i, ROOM_TYPES[int(rng.integers(len(ROOM_TYPES)))], *rect)
             for i, rect in enumerate(rects)]

    objects: list[ObjectInstance] = []
    next_id = 0

    def free_cells_in(room: Room) -> list[tuple[int, int]]:
        return [(r, c) for r in range(room.r0, room.r1)
                for c in range(room.c0, room.c1) if not occ[r, c]]

    def place(category: str, room: Room) -> ObjectInstance | None:
        nonlocal next_id
        blocking = category in BLOCKING_CATEGORIES
        if not blocking and category not in SUPPORT_CATEGORIES:
            # Small item: sometimes rests on a support object in this room.
            supports = [o for o in objects
                        if o.room_id == room.room_id
                        and o.category in SUPPORT_CATEGORIES]
            if supports and rng.random() < 0.4:
                sup = supports[int(rng.integers(len(supports)))]
                y = sup.position[1] + 0.05 + 0.1 * rng.random()
                obj = ObjectInstance(next_id, category,
                                     (sup.position[0], y, sup.position[2]),
                                     room.room_id, support_id=sup.id)
                next_id += 1
                objects.append(obj)
                return obj
        cells = free_cells_in(room)
        if not cells:
            return None
        r, c = cells[int(rng.integers(len(cells)))]
        x, z = _cell_center(r, c)
        ylo, yhi = height_band(category)
        y = float(ylo + (yhi - ylo) * rng.random())
        obj = ObjectInstance(next_id, category, (x, y, z), room.room_id)
        next_id += 1
        objects.append(obj)
        if blocking:
            occ[r, c] = True
        return obj

    for room in rooms:
        n_obj = int(rng.integers(cfg.objects_per_room_min,
                                 cfg.objects_per_room_max + 1))
        for _ in range(n_obj):
            category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            place(category, room)

    for category in cfg.guaranteed_categories:
        if not any(o.category == category for o in objects):
            room = rooms[int(rng.integers(len(rooms)))]
            if place(category, room) is None:
                return None

    house = House(seed=seed, config=cfg, rows=rows, cols=cols, rooms=rooms,
                  objects=objects, occupancy=occ)
    # Validity: most free space connected to room centroids, and every
    # guaranteed category reachable from it.
    reach = house.reachable()
    free = ~occ
    if not free.any() or reach.sum() < 0.6 * free.sum():
        return None
    for category in cfg.guaranteed_categories:
        if not np.isfinite(house.distance_field(category)[reach]).any():
            return None
    return house


def generate_house(seed: int, cfg: GenerationConfig | None = None,
                   max_attempts: int = 20) -> House:
    """Deterministic house generation; bounded retries on constraint failure."""
    cfg = cfg or GenerationConfig()
    cfg.validate()
    for attempt in range(max_attempts):
        house = _try_generate(seed, cfg, attempt)
        if house is not None:
            return house
    raise GenerationError(
        f"could not generate a valid house for seed={seed} "
        f"after {max_attempts} attempts")


def reachable_positions(house: House) -> np.ndarray:
    """Free cells 4-connected to any room centroid (flood fill)."""
    occ = house.occupancy
    reach = np.zeros_like(occ)
    queue: deque[tuple[int, int]] = deque()
    for room in house.rooms:
        cr = (room.r0 + room.r1) // 2
        cc = (room.c0 + room.c1) // 2
        # Centroid may be blocked; seed from the nearest free cell in room.
        best = None
        for r in range(room.r0, room.r1):
            for c in range(room.c0, room.c1):
                if not occ[r, c]:
                    d = abs(r - cr) + abs(c - cc)
                    if best is None or d < best[0]:
                        best = (d, r, c)
        if best is not None:
            _, r, c = best
            if not reach[r, c]:
                reach[r, c] = True
                queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if (0 <= nr < house.rows and 0 <= nc < house.cols
                    and not occ[nr, nc] and not reach[nr, nc]):
                reach[nr, nc] = True
                queue.append((nr, nc))
    return reach


def _category_distance_field(house: House, category: str) -> np.ndarray:
    """BFS cell distance over free cells to the nearest category instance.

    Instance cells are sources at distance 0; expansion runs through free
    cells only, so a fully walled-off instance stays at infinity elsewhere.
    """
    dist = np.full((house.rows, house.cols), np.inf)
    queue: deque[tuple[int, int]] = deque()
    for obj in house.objects_of_category(category):
        r, c = obj.cell
        if dist[r, c] > 0:
            dist[r, c] = 0.0
            queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if (0 <= nr < house.rows and 0 <= nc < house.cols
                    and not house.occupancy[nr, nc]
                    and dist[nr, nc] == np.inf):
                dist[nr, nc] = dist[r, c] + 1.0
                queue.append((nr, nc))
    return dist


def shortest_path_length(house: House, position_xz: tuple[float, float],
                         category: str) -> float:
    """Geodesic meters from a pose to the nearest reachable category instance."""
    r = int(position_xz[1] / CELL)
    c = int(position_xz[0] / CELL)
    d = house.distance_field(category)[r, c]
    return float(d * CELL)


def bresenham_cells(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Cells on the rasterized segment, endpoints included."""
    cells = []
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return cells


def line_of_sight(house: House, cell_a: tuple[int, int],
                  cell_b: tuple[int, int]) -> bool:
    """True when no interior cell of the segment between a and b is blocked.

    Occupancy is immutable per house, so results are memoized.
    """
    key = (cell_a, cell_b)
    cached = house._los_cache.get(key)
    if cached is not None:
        return cached
    clear = True
    for r, c in bresenham_cells(*cell_a, *cell_b)[1:-1]:
        if house.occupancy[r, c]:
            clear = False
            break
    house._los_cache[key] = clear
    return clear
