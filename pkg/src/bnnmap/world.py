"""2-D synthetic world: grid floorplans, scripted paths, LiDAR ray casting and labeled point sets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Stream


@dataclass(frozen=True)
class Floorplan:
    """Boolean occupancy grid, ``grid[row, col]`` with row = y index, col = x index.

    Cell ``(i, j)`` covers ``x in [ox + j*res, ox + (j+1)*res)`` and
    ``y in [oy + i*res, oy + (i+1)*res)``.
    """

    grid: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2 or min(g.shape) < 3:
            raise ValueError("floorplan grid must be 2-D and at least 3x3")
        if not (g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()):
            raise ValueError("floorplan border cells must be walls")
        if g.all():
            raise ValueError("floorplan has no free cell")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def width_m(self) -> float:
        return self.grid.shape[1] * self.resolution

    @property
    def height_m(self) -> float:
        return self.grid.shape[0] * self.resolution

    def cell_of(self, x, y):
        j = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(int)
        i = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(int)
        return i, j

    def is_wall(self, x, y):
        """True for wall cells and anything outside the grid."""
        i, j = self.cell_of(x, y)
        h, w = self.grid.shape
        inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        return np.where(inside, self.grid[np.clip(i, 0, h - 1), np.clip(j, 0, w - 1)], True)

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        """World metres to [-1, 1]^2 over the floorplan extent."""
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[..., 0] = 2.0 * (xy[..., 0] - self.origin[0]) / self.width_m - 1.0
        out[..., 1] = 2.0 * (xy[..., 1] - self.origin[1]) / self.height_m - 1.0
        return out

    def denormalize(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        out = np.empty_like(uv)
        out[..., 0] = (uv[..., 0] + 1.0) * 0.5 * self.width_m + self.origin[0]
        out[..., 1] = (uv[..., 1] + 1.0) * 0.5 * self.height_m + self.origin[1]
        return out

    def wall_mask_on(self, uv: np.ndarray) -> np.ndarray:
        xy = self.denormalize(uv)
        return self.is_wall(xy[..., 0], xy[..., 1])


@dataclass
class Room:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass
class Layout:
    """Generated floorplan plus the room/door structure used to script paths."""

    floorplan: Floorplan
    rooms: dict[tuple[int, int], Room]
    doors: dict[frozenset, tuple[float, float]] = field(default_factory=dict)


def generate_floorplan(
    seed: int = 0,
    size_m: float = 20.0,
    resolution: float = 0.05,
    rooms: tuple[int, int] = (3, 3),
    wall_m: float = 0.2,
    door_m: float = 1.2,
) -> Layout:
    """Rectilinear multi-room plan: a jittered grid of rooms joined by doorways.

    Every pair of neighbouring rooms shares one door, so the plan is connected.
    """
    rng = Stream(seed, ("floorplan",)).generator
    n = int(round(size_m / resolution))
    grid = np.zeros((n, n), dtype=bool)
    wt = max(1, int(round(wall_m / resolution)))
    grid[:wt, :] = grid[-wt:, :] = True
    grid[:, :wt] = grid[:, -wt:] = True

    nx, ny = rooms

    def cuts(k):
        base = np.linspace(0, n, k + 1)
        jitter = rng.uniform(-0.12, 0.12, k - 1) * (n / k)
        inner = np.round(base[1:-1] + jitter).astype(int)
        return [0, *inner.tolist(), n]

    xc, yc = cuts(nx), cuts(ny)
    for c in xc[1:-1]:
        grid[:, c - wt // 2 : c - wt // 2 + wt] = True
    for c in yc[1:-1]:
        grid[c - wt // 2 : c - wt // 2 + wt, :] = True

    def free_span(a, b, first, last):
        lo = a + (wt if first else wt - wt // 2)
        hi = b - (wt if last else wt // 2)
        return lo, hi

    room_map: dict[tuple[int, int], Room] = {}
    spans_x = [free_span(xc[k], xc[k + 1], k == 0, k == nx - 1) for k in range(nx)]
    spans_y = [free_span(yc[k], yc[k + 1], k == 0, k == ny - 1) for k in range(ny)]
    for a in range(nx):
        for b in range(ny):
            (j0, j1), (i0, i1) = spans_x[a], spans_y[b]
            room_map[(a, b)] = Room(j0 * resolution, i0 * resolution, j1 * resolution, i1 * resolution)

    dw = max(2, int(round(door_m / resolution)))
    doors: dict[frozenset, tuple[float, float]] = {}
    for a in range(nx - 1):
        c = xc[a + 1]
        for b in range(ny):
            i0, i1 = spans_y[b]
            start = int(rng.integers(i0 + 1, max(i0 + 2, i1 - dw - 1)))
            grid[start : start + dw, c - wt // 2 - 1 : c - wt // 2 + wt + 1] = False
            doors[frozenset({(a, b), (a + 1, b)})] = ((c - wt // 2 + wt / 2) * resolution, (start + dw / 2) * resolution)
    for b in range(ny - 1):
        c = yc[b + 1]
        for a in range(nx):
            j0, j1 = spans_x[a]
            start = int(rng.integers(j0 + 1, max(j0 + 2, j1 - dw - 1)))
            grid[c - wt // 2 - 1 : c - wt // 2 + wt + 1, start : start + dw] = False
            doors[frozenset({(a, b), (a, b + 1)})] = ((start + dw / 2) * resolution, (c - wt // 2 + wt / 2) * resolution)
    # keep the outer shell closed after door carving
    grid[:wt, :] = grid[-wt:, :] = True
    grid[:, :wt] = grid[:, -wt:] = True
    return Layout(Floorplan(grid, resolution), room_map, doors)


def load_floorplan(path: str | Path, resolution: float, origin=(0.0, 0.0)) -> Floorplan:
    """Read a grayscale image; pixels darker than 128 are walls.

    Image row 0 is the top edge, i.e. the largest y.
    """
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return Floorplan(np.flipud(arr < 128), resolution, tuple(origin))


def save_floorplan(fp: Floorplan, path: str | Path) -> None:
    from PIL import Image

    img = np.where(np.flipud(fp.grid), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


# ----------------------------------------------------------------------------
# paths


@dataclass
class AgentPath:
    waypoints: np.ndarray
    scan_stride: float = 0.5

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(self.waypoints) < 1:
            raise ValueError("path needs at least one waypoint")
        if self.scan_stride <= 0:
            raise ValueError("scan_stride must be positive")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def validate(self, fp: Floorplan) -> None:
        if fp.is_wall(self.waypoints[:, 0], self.waypoints[:, 1]).any():
            raise ValueError("path waypoint inside a wall")

    def poses(self) -> np.ndarray:
        """Scan poses every ``scan_stride`` metres of arc length, endpoints included."""
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        total = cum[-1]
        if total == 0:
            return self.waypoints[:1].copy()
        s = np.arange(0.0, total, self.scan_stride)
        if total - s[-1] > 1e-9:
            s = np.append(s, total)
        x = np.interp(s, cum, self.waypoints[:, 0])
        y = np.interp(s, cum, self.waypoints[:, 1])
        return np.stack([x, y], axis=1)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            w.writerows(self.waypoints.tolist())

    @classmethod
    def from_csv(cls, path: str | Path, scan_stride: float = 0.5) -> "AgentPath":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([[float(r["x"]), float(r["y"])] for r in rows]), scan_stride)


def _room_route(layout: Layout, rooms: Sequence[tuple[int, int]], rng: np.random.Generator) -> np.ndarray:
    """Waypoints visiting ``rooms`` in order: a small loop inside each, doors between."""
    pts = []
    for k, key in enumerate(rooms):
        r = layout.rooms[key]
        cx, cy = r.center
        mx = 0.3 * (r.x1 - r.x0)
        my = 0.3 * (r.y1 - r.y0)
        loop = [(cx - mx, cy - my), (cx + mx, cy - my), (cx + mx, cy + my), (cx - mx, cy + my)]
        rot = int(rng.integers(0, 4))
        loop = loop[rot:] + loop[:rot]
        pts.append((cx, cy))
        pts.extend(loop)
        pts.append((cx, cy))
        if k + 1 < len(rooms):
            door = layout.doors[frozenset({key, rooms[k + 1]})]
            a, b = key, rooms[k + 1]
            if a[0] != b[0]:
                pts.append((cx, door[1]))
                pts.append(door)
                ncx, _ = layout.rooms[b].center
                pts.append((ncx, door[1]))
            else:
                pts.append((door[0], cy))
                pts.append(door)
                _, ncy = layout.rooms[b].center
                pts.append((door[0], ncy))
    return np.array(pts)


def default_paths(layout: Layout, n_agents: int = 7, rooms_per_agent: int = 2, seed: int = 0, scan_stride: float = 0.5) -> list[AgentPath]:
    """One path per agent, each starting in a distinct room and walking into a neighbour."""
    rng = Stream(seed, ("paths",)).generator
    keys = sorted(layout.rooms)
    if n_agents > len(keys):
        raise ValueError("more agents than rooms")
    order = [keys[i] for i in rng.permutation(len(keys))[:n_agents]]
    paths = []
    for start in order:
        route = [start]
        while len(route) < rooms_per_agent:
            a, b = route[-1]
            nbrs = [(a + da, b + db) for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)) if (a + da, b + db) in layout.rooms and (a + da, b + db) not in route]
            if not nbrs:
                break
            route.append(nbrs[int(rng.integers(0, len(nbrs)))])
        p = AgentPath(_room_route(layout, route, rng), scan_stride)
        p.validate(layout.floorplan)
        paths.append(p)
    return paths


# ----------------------------------------------------------------------------
# ray casting


@dataclass
class LidarScan:
    pose: tuple[float, float]
    angles: np.ndarray
    ranges: np.ndarray
    hits: np.ndarray
    max_range: float

    def __len__(self) -> int:
        return len(self.angles)

    @property
    def beams(self) -> list[tuple[float, float, bool]]:
        return list(zip(self.angles.tolist(), self.ranges.tolist(), self.hits.tolist()))


def cast_distances(fp: Floorplan, pose, angles: np.ndarray, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact distance to the first wall cell along each ray (grid DDA, all beams in lockstep).

    Returns ``(dist, hit)``; rays that travel ``max_range`` without entering a
    wall report ``max_range`` and ``hit=False``.
    """
    px, py = float(pose[0]), float(pose[1])
    res = fp.resolution
    gx = (px - fp.origin[0]) / res
    gy = (py - fp.origin[1]) / res
    dx, dy = np.cos(angles), np.sin(angles)
    n = len(angles)
    cx = np.full(n, int(math.floor(gx)))
    cy = np.full(n, int(math.floor(gy)))
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore"):
        inv_dx = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        inv_dy = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
    frac_x = np.where(dx > 0, np.floor(gx) + 1 - gx, gx - np.floor(gx))
    frac_y = np.where(dy > 0, np.floor(gy) + 1 - gy, gy - np.floor(gy))
    t_max_x = np.where(dx != 0, frac_x * np.where(dx != 0, inv_dx, 0.0) * res, np.inf)
    t_max_y = np.where(dy != 0, frac_y * np.where(dy != 0, inv_dy, 0.0) * res, np.inf)
    t_dx = inv_dx * res
    t_dy = inv_dy * res
    dist = np.full(n, max_range)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    h, w = fp.grid.shape
    while active.any():
        go_x = t_max_x <= t_max_y
        t = np.where(go_x, t_max_x, t_max_y)
        cx = np.where(active & go_x, cx + step_x, cx)
        cy = np.where(active & ~go_x, cy + step_y, cy)
        t_max_x = np.where(active & go_x, t_max_x + t_dx, t_max_x)
        t_max_y = np.where(active & ~go_x, t_max_y + t_dy, t_max_y)
        beyond = active & (t >= max_range)
        active &= ~beyond
        outside = (cx < 0) | (cx >= w) | (cy < 0) | (cy >= h)
        wall = np.zeros(n, dtype=bool)
        ok = active & ~outside
        wall[ok] = fp.grid[cy[ok], cx[ok]]
        wall |= active & outside
        dist = np.where(wall, t, dist)
        hit |= wall
        active &= ~wall
    return dist, hit


def raycast(
    fp: Floorplan,
    pose,
    n_beams: int = 360,
    max_range: float = 4.0,
    noise_sigma: float = 0.01,
    seed: int | Stream = 0,
) -> LidarScan:
    """Simulated 360-degree scan from ``pose`` with Gaussian range noise on hits."""
    if fp.is_wall(pose[0], pose[1]):
        raise ValueError(f"pose {tuple(pose)} is inside a wall")
    if n_beams < 1 or max_range <= 0 or noise_sigma < 0:
        raise ValueError("invalid sensor parameters")
    angles = 2.0 * math.pi * np.arange(n_beams) / n_beams
    dist, hit = cast_distances(fp, pose, angles, max_range)
    if noise_sigma > 0:
        stream = seed if isinstance(seed, Stream) else Stream(seed, ("lidar",))
        noisy = dist + stream.normal((n_beams,)) * noise_sigma
        below = np.nextafter(max_range, 0.0)
        dist = np.where(hit, np.clip(noisy, 1e-6, below), dist)
    return LidarScan((float(pose[0]), float(pose[1])), angles, dist, hit, float(max_range))


# ----------------------------------------------------------------------------
# point sets


@dataclass
class PointSet:
    """Labeled training points, coordinates in [-1, 1]^2, labels 0 (free) / 1 (wall)."""

    xy: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.label = np.asarray(self.label, dtype=np.float64).reshape(-1)
        if len(self.xy) != len(self.label):
            raise ValueError("xy and label lengths differ")

    def __len__(self) -> int:
        return len(self.label)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def concat(cls, sets: Sequence["PointSet"]) -> "PointSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.xy for s in sets]), np.concatenate([s.label for s in sets]))

    def subset(self, idx) -> "PointSet":
        return PointSet(self.xy[idx], self.label[idx])

    def split(self, holdout: float, stream: Stream) -> tuple["PointSet", "PointSet"]:
        """Seeded (train, holdout) split."""
        perm = stream.generator.permutation(len(self))
        k = int(round(holdout * len(self)))
        return self.subset(np.sort(perm[k:])), self.subset(np.sort(perm[:k]))

    @property
    def positive_fraction(self) -> float:
        return float(self.label.mean()) if len(self) else 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "label"])
            for (x, y), lab in zip(self.xy.tolist(), self.label.tolist()):
                w.writerow([repr(x), repr(y), int(lab)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "PointSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2), np.array([float(r["label"]) for r in rows]))


def scan_to_points(scan: LidarScan, fp: Floorplan, free_samples_per_beam: int = 4) -> PointSet:
    """Wall endpoints become label-1 points; evenly spaced samples before each endpoint become label-0."""
    px, py = scan.pose
    ux, uy = np.cos(scan.angles), np.sin(scan.angles)
    k = free_samples_per_beam
    frac = np.arange(1, k + 1) / (k + 1)
    fr = scan.ranges[:, None] * frac[None, :]
    free_xy = np.stack([px + fr * ux[:, None], py + fr * uy[:, None]], axis=-1).reshape(-1, 2)
    hr = scan.ranges[scan.hits]
    hit_xy = np.stack([px + hr * ux[scan.hits], py + hr * uy[scan.hits]], axis=1)
    xy = np.concatenate([hit_xy, free_xy])
    label = np.concatenate([np.ones(len(hit_xy)), np.zeros(len(free_xy))])
    return PointSet(fp.normalize(xy), label)


@dataclass(frozen=True)
class SensorConfig:
    n_beams: int = 360
    max_range: float = 4.0
    noise_sigma: float = 0.01
    free_samples_per_beam: int = 4


def path_scans(path: AgentPath, fp: Floorplan, sensor: SensorConfig, stream: Stream) -> list[PointSet]:
    """Point set of every scan pose along ``path``, in travel order."""
    out = []
    for k, pose in enumerate(path.poses()):
        scan = raycast(fp, pose, sensor.n_beams, sensor.max_range, sensor.noise_sigma, stream.child("scan", k))
        out.append(scan_to_points(scan, fp, sensor.free_samples_per_beam))
    return out


def path_dataset(path: AgentPath, fp: Floorplan, sensor: SensorConfig, stream: Stream) -> PointSet:
    return PointSet.concat(path_scans(path, fp, sensor, stream))


def stream_segments(
    path: AgentPath,
    fp: Floorplan,
    n_rounds: int,
    sensor: SensorConfig = SensorConfig(),
    stream: Stream | None = None,
) -> list[PointSet]:
    """Split the path into ``n_rounds`` contiguous arc-length segments; batch k holds segment k's scans."""
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    stream = stream if stream is not None else Stream(0, ("lidar",))
    scans = path_scans(path, fp, sensor, stream)
    if n_rounds > len(scans):
        raise ValueError(f"{n_rounds} rounds exceed the {len(scans)} scan poses of the path")
    poses = path.poses()
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poses, axis=0), axis=1))])
    total = arc[-1]
    if total > 0:
        seg = np.minimum((arc / total * n_rounds).astype(int), n_rounds - 1)
    else:
        seg = np.zeros(len(poses), dtype=int)
    # every segment must own at least one pose; rebalance by rank if arc length left one empty
    if len(np.unique(seg)) < n_rounds:
        seg = np.minimum(np.arange(len(poses)) * n_rounds // len(poses), n_rounds - 1)
    return [PointSet.concat([s for s, g in zip(scans, seg) if g == k]) for k in range(n_rounds)]


def retained(batches: Sequence[PointSet], k: int, policy: str) -> PointSet:
    """Training data after round k: all batches so far (``cdr``) or only batch k (``dr``)."""
    if policy == "cdr":
        return PointSet.concat(batches[: k + 1])
    if policy == "dr":
        return batches[k]
    raise ValueError(f"unknown retention policy {policy!r}")


# ----------------------------------------------------------------------------
# density baseline


@dataclass
class DensityField:
    raw: np.ndarray
    normalized: np.ndarray
    centers: np.ndarray
    cell_area: float
    bandwidth: tuple[float, float]

    @property
    def integral(self) -> float:
        return float(self.raw.sum() * self.cell_area)


def grid_centers(resolution: int) -> np.ndarray:
    return -1.0 + (np.arange(resolution) + 0.5) * 2.0 / resolution


def kde_density(points, resolution: int = 128, bandwidth: float | tuple[float, float] | None = None) -> DensityField:
    """Gaussian-kernel density of the point coordinates on a ``resolution^2`` grid over [-1, 1]^2.

    ``raw[i, j]`` is the density at ``(x=centers[j], y=centers[i])``. Without a
    bandwidth, Scott's rule per axis is used.
    """
    xy = np.asarray(points.xy if isinstance(points, PointSet) else points, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        raise ValueError("kde_density needs at least one point")
    n = len(xy)
    if bandwidth is None:
        if n < 2:
            raise ValueError("bandwidth selection needs >= 2 points")
        sd = xy.std(axis=0, ddof=1)
        hx, hy = (max(float(s), 1e-3) * n ** (-1.0 / 6.0) for s in sd)
    elif np.ndim(bandwidth):
        hx, hy = (float(b) for b in bandwidth)
    else:
        hx = hy = float(bandwidth)
    c = grid_centers(resolution)
    # separable Gaussian kernel: density = Kx^T Ky / n
    kx = np.exp(-0.5 * ((c[None, :] - xy[:, :1]) / hx) ** 2) / (math.sqrt(2 * math.pi) * hx)
    ky = np.exp(-0.5 * ((c[None, :] - xy[:, 1:]) / hy) ** 2) / (math.sqrt(2 * math.pi) * hy)
    raw = (ky.T @ kx) / n
    peak = raw.max()
    normalized = raw / peak if peak > 0 else raw
    return DensityField(raw, normalized, c, (2.0 / resolution) ** 2, (hx, hy))
