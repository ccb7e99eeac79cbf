"""Planar visibility-graph shortest paths around inflated obstacle footprints.

Cylinders become circumscribed regular polygons and boxes are grown by the
vehicle radius, so every planned path keeps the vehicle centre out of contact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .world import CRUISE_ALTITUDE, UAV_RADIUS, AxisBox, Cylinder, Scene

POLYGON_SIDES = 16
_EPS = 1e-7


class UnreachableError(ValueError):
    pass


def inflated_polygons(obstacles, uav_radius: float = UAV_RADIUS, altitude: float = CRUISE_ALTITUDE,
                      sides: int = POLYGON_SIDES) -> list[np.ndarray]:
    """CCW vertex arrays (k, 2) for every obstacle that blocks flight at ``altitude``."""
    polys = []
    for o in obstacles:
        if isinstance(o, Cylinder):
            if not (o.center.z - uav_radius <= altitude <= o.center.z + o.height + uav_radius):
                continue
            R = (o.radius + uav_radius) / math.cos(math.pi / sides)
            ang = (np.arange(sides) + 0.5) * (2 * math.pi / sides)
            polys.append(np.stack([o.center.x + R * np.cos(ang), o.center.y + R * np.sin(ang)], axis=1))
        elif isinstance(o, AxisBox):
            if not (o.min.z - uav_radius <= altitude <= o.max.z + uav_radius):
                continue
            x0, y0 = o.min.x - uav_radius, o.min.y - uav_radius
            x1, y1 = o.max.x + uav_radius, o.max.y + uav_radius
            polys.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
    return polys


@dataclass
class _EdgeSet:
    normal: np.ndarray  # (E, 2) outward unit normals
    offset: np.ndarray  # (E,)  n . v for the edge's first vertex
    starts: np.ndarray  # polygon start index into the edge arrays

    @classmethod
    def build(cls, polys) -> "_EdgeSet":
        normals, offsets, starts = [], [], []
        k = 0
        for P in polys:
            starts.append(k)
            e = np.roll(P, -1, axis=0) - P
            n = np.stack([e[:, 1], -e[:, 0]], axis=1)
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            normals.append(n)
            offsets.append(np.einsum("ij,ij->i", n, P))
            k += len(P)
        if not polys:
            return cls(np.empty((0, 2)), np.empty(0), np.empty(0, dtype=int))
        return cls(np.concatenate(normals), np.concatenate(offsets), np.array(starts))


def _segments_blocked(es: _EdgeSet, P: np.ndarray, Q: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """True where segment P->Q passes through the interior of some polygon."""
    S = P.shape[0]
    out = np.zeros(S, dtype=bool)
    if es.offset.size == 0 or S == 0:
        return out
    for lo in range(0, S, chunk):
        p, q = P[lo:lo + chunk], Q[lo:lo + chunk]
        a = p @ es.normal.T - es.offset  # (s, E)
        b = (q - p) @ es.normal.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-_EPS - a) / b
        lower = np.where(b < 0, t, -np.inf)
        upper = np.where(b > 0, t, np.inf)
        never = (b == 0) & (a >= -_EPS)
        upper = np.where(never, -np.inf, upper)
        lo_poly = np.maximum.reduceat(lower, es.starts, axis=1)
        hi_poly = np.minimum.reduceat(upper, es.starts, axis=1)
        t0 = np.maximum(lo_poly, 0.0)
        t1 = np.minimum(hi_poly, 1.0)
        out[lo:lo + chunk] = np.any(t1 - t0 > 1e-12, axis=1)
    return out


def _points_inside(es: _EdgeSet, pts: np.ndarray) -> np.ndarray:
    if es.offset.size == 0:
        return np.zeros(len(pts), dtype=bool)
    a = pts @ es.normal.T - es.offset
    worst = np.maximum.reduceat(a, es.starts, axis=1)
    return np.any(worst < -_EPS, axis=1)


class Roadmap:
    """Visibility graph over the inflated obstacle vertices of one scene."""

    def __init__(self, polys: list[np.ndarray]):
        self.edges = _EdgeSet.build(polys)
        verts = np.concatenate(polys) if polys else np.empty((0, 2))
        keep = ~_points_inside(self.edges, verts)
        self.nodes = verts[keep]
        n = len(self.nodes)
        ii, jj = np.triu_indices(n, k=1)
        blocked = _segments_blocked(self.edges, self.nodes[ii], self.nodes[jj])
        ii, jj = ii[~blocked], jj[~blocked]
        w = np.linalg.norm(self.nodes[ii] - self.nodes[jj], axis=1)
        nz = w > 0
        self._i, self._j, self._w = ii[nz], jj[nz], w[nz]

    def shortest(self, start, goal) -> float:
        s = np.asarray(start, dtype=float)[:2]
        g = np.asarray(goal, dtype=float)[:2]
        if _points_inside(self.edges, np.stack([s, g])).any():
            raise UnreachableError("start or goal lies inside an inflated obstacle")
        if not _segments_blocked(self.edges, s[None], g[None])[0]:
            return float(np.linalg.norm(g - s))
        n = len(self.nodes)
        S, G = n, n + 1
        ends = []
        for idx, pt in ((S, s), (G, g)):
            vis = ~_segments_blocked(self.edges, np.repeat(pt[None], n, axis=0), self.nodes)
            k = np.nonzero(vis)[0]
            ends.append((np.full(k.size, idx), k, np.linalg.norm(self.nodes[k] - pt, axis=1)))
        i = np.concatenate([self._i] + [e[0] for e in ends])
        j = np.concatenate([self._j] + [e[1] for e in ends])
        w = np.concatenate([self._w] + [e[2] for e in ends])
        graph = coo_matrix((w, (i, j)), shape=(n + 2, n + 2)).tocsr()
        dist = dijkstra(graph, directed=False, indices=S)
        d = float(dist[G])
        if not math.isfinite(d):
            raise UnreachableError("no collision-free planar path to the goal")
        return d


@lru_cache(maxsize=64)
def roadmap_for(scene: Scene, uav_radius: float = UAV_RADIUS, altitude: float = CRUISE_ALTITUDE) -> Roadmap:
    return Roadmap(inflated_polygons(scene.obstacles, uav_radius, altitude))


def optimal_path_length(scene: Scene, start, goal, uav_radius: float = UAV_RADIUS,
                        altitude: float = CRUISE_ALTITUDE) -> float:
    """Shortest planar path length (m) from ``start`` to ``goal`` at cruise altitude.

    ``start``/``goal`` accept Vec3 or any (x, y[, z]) sequence. Raises
    UnreachableError when no collision-free route exists.
    """
    def xy(p):
        return (p.x, p.y) if hasattr(p, "x") else (float(p[0]), float(p[1]))

    return roadmap_for(scene, uav_radius, altitude).shortest(xy(start), xy(goal))


def is_reachable(scene: Scene) -> bool:
    z = scene.spawn_zone
    g = scene.goal.position
    probes = [
        (0.5 * (z.xmin + z.xmax), 0.5 * (z.ymin + z.ymax)),
        (z.xmin + 0.5, z.ymin + 0.5), (z.xmax - 0.5, z.ymin + 0.5),
        (z.xmin + 0.5, z.ymax - 0.5), (z.xmax - 0.5, z.ymax - 0.5),
    ]
    try:
        for p in probes:
            optimal_path_length(scene, p, g)
    except UnreachableError:
        return False
    return True
