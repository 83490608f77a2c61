"""Room geometry, acoustic materials and listener trajectories.

Coordinates are meters with +z up. Surfaces are planar convex polygons and
form a polygon soup: nothing needs to be closed or manifold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

DEFAULT_BAND_CENTERS = (62.5, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
DEFAULT_SPEED_OF_SOUND = 343.0
DEFAULT_SCATTERING = 0.3

PLANARITY_TOL = 1e-6
_HIT_EPS = 1e-9


class SceneError(ValueError):
    """Scene or trajectory file that fails validation."""


class OccludedError(SceneError):
    pass


@dataclass(frozen=True, eq=False)
class Material:
    name: str
    reflectance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reflectance", np.asarray(self.reflectance, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Surface:
    vertices: np.ndarray
    material: int

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))

    @property
    def normal(self):
        """Unit normal by Newell's method (right-hand rule over the vertex order)."""
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        n = np.array([
            np.sum((v[:, 1] - w[:, 1]) * (v[:, 2] + w[:, 2])),
            np.sum((v[:, 2] - w[:, 2]) * (v[:, 0] + w[:, 0])),
            np.sum((v[:, 0] - w[:, 0]) * (v[:, 1] + w[:, 1])),
        ])
        return n / np.linalg.norm(n)

    @property
    def area(self):
        v = self.vertices
        cross = np.cross(v[1:-1] - v[0], v[2:] - v[0])
        return 0.5 * float(np.abs(cross @ self.normal).sum())


@dataclass(frozen=True, eq=False)
class Scene:
    surfaces: tuple
    materials: tuple
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND
    band_centers: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BAND_CENTERS))
    scattering: float = DEFAULT_SCATTERING

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "band_centers", np.asarray(self.band_centers, dtype=np.float64))
        validate_scene(self)

    @property
    def n_bands(self):
        return self.band_centers.size

    @property
    def n_materials(self):
        return len(self.materials)

    def reflectance_table(self):
        """(materials, bands) array of energy reflectances."""
        if not self.materials:
            return np.zeros((0, self.n_bands))
        return np.stack([m.reflectance for m in self.materials])

    def with_reflectances(self, table):
        table = np.asarray(table, dtype=np.float64)
        materials = [replace(m, reflectance=table[i]) for i, m in enumerate(self.materials)]
        return replace(self, materials=materials)

    def scaled(self, s):
        surfaces = [replace(f, vertices=f.vertices * s) for f in self.surfaces]
        return replace(self, surfaces=surfaces)

    def bounding_box(self):
        if not self.surfaces:
            return None
        pts = np.concatenate([f.vertices for f in self.surfaces])
        return pts.min(axis=0), pts.max(axis=0)

    @cached_property
    def _packed(self):
        return _pack_surfaces(self.surfaces)

    def intersect(self, origins, directions, exclude=None):
        """Nearest surface hit for a batch of rays.

        Parameters
        ----------
        origins, directions : (N, 3) array
            Directions need not be normalized; the returned distance is in
            units of the direction length.
        exclude : (N,) int array, optional
            Surface index per ray to ignore (the surface a ray just left).

        Returns
        -------
        dist : (N,) array
            Ray parameter of the nearest hit, ``inf`` where nothing is hit.
        surface : (N,) int array
            Index of the surface hit, -1 where nothing is hit.
        """
        origins = np.atleast_2d(origins)
        directions = np.atleast_2d(directions)
        n_rays = origins.shape[0]
        if not self.surfaces:
            return np.full(n_rays, np.inf), np.full(n_rays, -1)
        normals, offsets, edge_o, edge_n = self._packed
        denom = directions @ normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (offsets[None, :] - origins @ normals.T) / denom
        ok = np.isfinite(t) & (t > _HIT_EPS) & (np.abs(denom) > 1e-15)
        t = np.where(ok, t, np.inf)
        pts = origins[:, None, :] + np.where(ok, t, 0.0)[:, :, None] * directions[:, None, :]
        side = np.einsum("nsk,svk->nsv", pts, edge_n) - np.einsum("svk,svk->sv", edge_o, edge_n)[None]
        inside = np.all(side >= -1e-9, axis=2)
        t = np.where(inside, t, np.inf)
        if exclude is not None:
            rows = np.nonzero(exclude >= 0)[0]
            t[rows, exclude[rows]] = np.inf
        idx = np.argmin(t, axis=1)
        dist = t[np.arange(n_rays), idx]
        idx = np.where(np.isfinite(dist), idx, -1)
        return dist, idx

    def segment_clear(self, a, b):
        """True when no surface crosses the open segment from ``a`` to ``b``."""
        a = np.asarray(a, dtype=np.float64)
        d = np.asarray(b, dtype=np.float64) - a
        dist, _ = self.intersect(a[None], d[None])
        return not dist[0] < 1.0 - 1e-12


def _pack_surfaces(surfaces):
    n_vert = max(len(f.vertices) for f in surfaces)
    normals = np.stack([f.normal for f in surfaces])
    offsets = np.array([f.vertices[0] @ n for f, n in zip(surfaces, normals)])
    edge_o = np.zeros((len(surfaces), n_vert, 3))
    edge_n = np.zeros((len(surfaces), n_vert, 3))
    for s, f in enumerate(surfaces):
        v = f.vertices
        e = np.roll(v, -1, axis=0) - v
        inward = np.cross(normals[s], e)
        lengths = np.linalg.norm(inward, axis=1, keepdims=True)
        edge_o[s, :len(v)] = v
        edge_n[s, :len(v)] = inward / lengths
    return normals, offsets, edge_o, edge_n


def validate_scene(scene):
    if not scene.speed_of_sound > 0:
        raise SceneError(f"speed_of_sound must be positive, got {scene.speed_of_sound}")
    centers = scene.band_centers
    if centers.ndim != 1 or centers.size == 0 or np.any(np.diff(centers) <= 0):
        raise SceneError("band_centers must be strictly increasing")
    if not 0.0 <= scene.scattering <= 1.0:
        raise SceneError(f"scattering must lie in [0, 1], got {scene.scattering}")
    for i, m in enumerate(scene.materials):
        r = m.reflectance
        if r.shape != centers.shape:
            raise SceneError(f"material {i} ({m.name!r}): expected {centers.size} reflectances, got {r.size}")
        for band, value in enumerate(r):
            if not 0.0 <= value <= 1.0:
                raise SceneError(
                    f"material {i} ({m.name!r}) band {band} ({centers[band]:g} Hz): "
                    f"reflectance {value} outside [0, 1]")
    for i, f in enumerate(scene.surfaces):
        _validate_surface(i, f, scene.n_materials)


def _validate_surface(i, f, n_materials):
    v = f.vertices
    if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
        raise SceneError(f"surface {i}: need at least 3 vertices of 3 coordinates")
    if not 0 <= f.material < n_materials:
        raise SceneError(f"surface {i}: material index {f.material} out of range")
    if not np.all(np.isfinite(v)):
        raise SceneError(f"surface {i}: non-finite vertex")
    w = np.roll(v, -1, axis=0)
    newell = np.array([
        np.sum((v[:, 1] - w[:, 1]) * (v[:, 2] + w[:, 2])),
        np.sum((v[:, 2] - w[:, 2]) * (v[:, 0] + w[:, 0])),
        np.sum((v[:, 0] - w[:, 0]) * (v[:, 1] + w[:, 1])),
    ])
    if np.linalg.norm(newell) < 1e-12:
        raise SceneError(f"surface {i}: degenerate polygon, normal undefined")
    n = newell / np.linalg.norm(newell)
    if np.max(np.abs((v - v[0]) @ n)) > PLANARITY_TOL:
        raise SceneError(f"surface {i}: vertices not coplanar within {PLANARITY_TOL} m")
    e = w - v
    turn = np.cross(e, np.roll(e, -1, axis=0)) @ n
    if np.any(turn < -1e-12):
        raise SceneError(f"surface {i}: polygon is not convex")


def load_scene(path):
    """Load and validate a JSON scene file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_dict(doc)


def scene_from_dict(doc):
    try:
        centers = doc.get("band_centers", DEFAULT_BAND_CENTERS)
        materials = [Material(m["name"], m["reflectance"]) for m in doc["materials"]]
        surfaces = [Surface(s["vertices"], int(s["material"])) for s in doc["surfaces"]]
        return Scene(
            surfaces=surfaces,
            materials=materials,
            speed_of_sound=float(doc.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)),
            band_centers=centers,
            scattering=float(doc.get("scattering", DEFAULT_SCATTERING)),
        )
    except (KeyError, TypeError) as exc:
        raise SceneError(f"malformed scene document: {exc!r}") from exc


def scene_to_dict(scene):
    return {
        "speed_of_sound": scene.speed_of_sound,
        "band_centers": scene.band_centers.tolist(),
        "scattering": scene.scattering,
        "materials": [{"name": m.name, "reflectance": m.reflectance.tolist()} for m in scene.materials],
        "surfaces": [{"vertices": f.vertices.tolist(), "material": f.material} for f in scene.surfaces],
    }


def write_scene(path, scene):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1)


def shoebox(size, materials, wall_material=0, floor_material=1, ceiling_material=None, **kwargs):
    """Axis-aligned rectangular room with a corner at the origin.

    ``materials`` is a list of :class:`Material`. Walls get ``wall_material``,
    the floor ``floor_material`` and the ceiling ``ceiling_material``
    (defaults to the floor's).
    """
    lx, ly, lz = size
    if ceiling_material is None:
        ceiling_material = floor_material
    quads = [
        ([[0, 0, 0], [0, ly, 0], [lx, ly, 0], [lx, 0, 0]], floor_material),
        ([[0, 0, lz], [lx, 0, lz], [lx, ly, lz], [0, ly, lz]], ceiling_material),
        ([[0, 0, 0], [lx, 0, 0], [lx, 0, lz], [0, 0, lz]], wall_material),
        ([[0, ly, 0], [0, ly, lz], [lx, ly, lz], [lx, ly, 0]], wall_material),
        ([[0, 0, 0], [0, 0, lz], [0, ly, lz], [0, ly, 0]], wall_material),
        ([[lx, 0, 0], [lx, ly, 0], [lx, ly, lz], [lx, 0, lz]], wall_material),
    ]
    surfaces = [Surface(np.array(v, dtype=float), m) for v, m in quads]
    return Scene(surfaces=surfaces, materials=materials, **kwargs)


def calibrate_scale(scene, source, listener, t_first):
    """Scale the room so the direct arrival matches a measured first arrival.

    Geometry is scaled about the origin by ``s = c * t_first / |source - listener|``;
    the caller maps its endpoints with the same factor (``s * point``).

    Returns
    -------
    scene : Scene
        Scaled copy.
    scale : float
    """
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    if not t_first > 0:
        raise ValueError(f"t_first must be positive, got {t_first}")
    dist = np.linalg.norm(source - listener)
    if dist == 0:
        raise ValueError("source and listener coincide")
    if not scene.segment_clear(source, listener):
        raise OccludedError("direct path between source and listener is occluded; "
                            "supply an unobstructed measurement pair")
    scale = scene.speed_of_sound * t_first / dist
    return scene.scaled(scale), scale


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timed listener poses; quaternions are (w, x, y, z)."""

    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        quat = np.asarray(self.orientations, dtype=np.float64).reshape(-1, 4)
        if times.size == 0:
            raise SceneError("trajectory is empty")
        if not (times.size == pos.shape[0] == quat.shape[0]):
            raise SceneError("trajectory arrays have inconsistent lengths")
        if np.any(np.diff(times) <= 0):
            raise SceneError("trajectory times must be strictly increasing")
        norms = np.linalg.norm(quat, axis=1)
        if np.any(norms == 0):
            raise SceneError("zero quaternion in trajectory")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", quat / norms[:, None])

    def __len__(self):
        return self.times.size

    def arc_length(self):
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def sample_by_distance(self, spacing=0.5):
        """Poses every ``spacing`` meters of travelled distance.

        Returns ``(times, positions)`` including both endpoints. A stationary
        trajectory yields its first pose only.
        """
        s = self.arc_length()
        total = s[-1]
        if total <= 0:
            return self.times[:1].copy(), self.positions[:1].copy()
        n = int(np.floor(total / spacing + 1e-9))
        targets = np.arange(n + 1) * spacing
        if total - targets[-1] > 1e-9:
            targets = np.append(targets, total)
        # arc length is nondecreasing; pauses produce flat stretches
        keep = np.concatenate([[True], np.diff(s) > 0])
        times = np.interp(targets, s[keep], self.times[keep])
        pos = np.stack([np.interp(targets, s[keep], self.positions[keep, k]) for k in range(3)], axis=1)
        return times, pos


def load_trajectory(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return Trajectory(
            times=[s["t"] for s in doc],
            positions=[s["pos"] for s in doc],
            orientations=[s.get("quat", [1.0, 0.0, 0.0, 0.0]) for s in doc],
        )
    except (KeyError, TypeError) as exc:
        raise SceneError(f"malformed trajectory: {exc!r}") from exc


def write_trajectory(path, traj):
    doc = [{"t": float(t), "pos": p.tolist(), "quat": q.tolist()}
           for t, p, q in zip(traj.times, traj.positions, traj.orientations)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
