"""Stochastic geometric-acoustic path tracing.

Rays leave the source uniformly over the sphere, reflect specularly or (with
the scene's scattering probability) into a cosine-weighted lobe, and are
recorded whenever a reflected segment crosses a receiver sphere around the
listener. A recorded path is closed by a straight leg to the listener
center, so its arrival time is exactly its polyline length over c.

Energies are normalized so that every path's band energy is comparable to
the direct path's ``1 / (4 pi d^2)``: each ray carries ``1 / (N pi R^2)``,
``N`` rays and receiver radius ``R``.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_RECEIVER_RADIUS = 0.25
ROULETTE_THRESHOLD = 1e-6
ROULETTE_SURVIVAL = 0.1
CHUNK = 4096
_MAX_BOUNCES = 100_000

# Energy absorption of air, 1/m, at 20 C / 50 % RH / 101.325 kPa, for the
# default octave centers 62.5 Hz .. 8 kHz (ISO 9613-1 formula, dB/m * ln10/10).
AIR_ALPHA_DEFAULT = np.array([
    2.7764042588e-05, 1.0126538453e-04, 3.0158102866e-04, 6.2817609908e-04,
    1.0740942075e-03, 2.2765694709e-03, 6.8307403530e-03, 2.4244131600e-02,
])


class TraceError(ValueError):
    pass


def air_absorption_iso9613(freq, temperature=20.0, humidity=50.0, pressure=101.325):
    """Energy attenuation coefficient of air in 1/m (ISO 9613-1)."""
    f = np.asarray(freq, dtype=np.float64)
    T = temperature + 273.15
    T0, T01, pr = 293.15, 273.16, 101.325
    pa = pressure
    c = -6.8346 * (T01 / T) ** 1.261 + 4.6151
    h = humidity * 10.0 ** c * (pr / pa)
    fro = (pa / pr) * (24.0 + 4.04e4 * h * (0.02 + h) / (0.391 + h))
    frn = (pa / pr) * (T / T0) ** -0.5 * (9.0 + 280.0 * h * np.exp(-4.170 * ((T / T0) ** (-1.0 / 3.0) - 1.0)))
    db_per_m = 8.686 * f ** 2 * (
        1.84e-11 * (pr / pa) * (T / T0) ** 0.5
        + (T / T0) ** -2.5 * (
            0.01275 * np.exp(-2239.1 / T) / (fro + f ** 2 / fro)
            + 0.1068 * np.exp(-3352.0 / T) / (frn + f ** 2 / frn)))
    return db_per_m * np.log(10.0) / 10.0


def air_alpha(band_centers):
    centers = np.asarray(band_centers, dtype=np.float64)
    from .scene import DEFAULT_BAND_CENTERS
    if centers.shape == (len(DEFAULT_BAND_CENTERS),) and np.allclose(centers, DEFAULT_BAND_CENTERS):
        return AIR_ALPHA_DEFAULT.copy()
    return air_absorption_iso9613(centers)


def air_attenuation(distance, band, alpha=AIR_ALPHA_DEFAULT):
    """Energy factor ``exp(-alpha[band] * distance)``."""
    if np.any(np.asarray(distance) < 0):
        raise ValueError("distance must be non-negative")
    return np.exp(-alpha[band] * np.asarray(distance, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class PathRecord:
    """One traced path, with ``air_factor`` holding every material-independent
    gain (air absorption and the launch normalization)."""

    arrival_time: float
    direction: np.ndarray
    band_energy: np.ndarray
    material_seq: tuple
    air_factor: np.ndarray

    @property
    def bounce_count(self):
        return len(self.material_seq)


class PathSet:
    """Columnar, time-sorted collection of traced paths.

    Attributes
    ----------
    times : (M,) array
    directions : (M, 3) array
        Unit vectors from the listener toward where each path arrives from.
    energy : (M, B) array
    beta : (M, B) array
    bounces : (M,) int array
    offsets : (M + 1,) int array
        ``materials[offsets[j]:offsets[j+1]]`` is path j's material sequence.
    materials : int array
    """

    def __init__(self, times, directions, energy, beta, bounces, materials,
                 source, listener, seed=0, ray_budget=0, offsets=None, vertices=None):
        self.times = np.asarray(times, dtype=np.float64)
        self.directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        self.energy = np.asarray(energy, dtype=np.float64).reshape(self.times.size, -1)
        self.beta = np.asarray(beta, dtype=np.float64).reshape(self.times.size, -1)
        self.bounces = np.asarray(bounces, dtype=np.int64)
        self.materials = np.asarray(materials, dtype=np.int64)
        if offsets is None:
            offsets = np.concatenate([[0], np.cumsum(self.bounces)])
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.source = np.asarray(source, dtype=np.float64)
        self.listener = np.asarray(listener, dtype=np.float64)
        self.seed = int(seed)
        self.ray_budget = int(ray_budget)
        # reflection points per path, kept in memory only
        self.vertices = vertices

    def __len__(self):
        return self.times.size

    def __getitem__(self, j):
        lo, hi = self.offsets[j], self.offsets[j + 1]
        return PathRecord(
            arrival_time=float(self.times[j]),
            direction=self.directions[j].copy(),
            band_energy=self.energy[j].copy(),
            material_seq=tuple(int(m) for m in self.materials[lo:hi]),
            air_factor=self.beta[j].copy(),
        )

    def __iter__(self):
        for j in range(len(self)):
            yield self[j]

    @property
    def n_bands(self):
        return self.energy.shape[1]

    def material_counts(self, n_materials):
        """(M, n_materials) matrix of how often each material occurs per path."""
        rows = np.repeat(np.arange(len(self)), self.bounces)
        counts = np.zeros((len(self), n_materials))
        np.add.at(counts, (rows, self.materials), 1.0)
        return counts

    def direct_index(self):
        idx = np.nonzero(self.bounces == 0)[0]
        return int(idx[0]) if idx.size else None

    def with_reflectances(self, table):
        """Copy with band energies recomputed for a new reflectance table."""
        energy = path_energies(self, table)
        return PathSet(self.times, self.directions, energy, self.beta, self.bounces, self.materials,
                       self.source, self.listener, self.seed, self.ray_budget, self.offsets, self.vertices)

    def select(self, mask):
        idx = np.nonzero(mask)[0]
        lo, hi = self.offsets[idx], self.offsets[idx + 1]
        mats = np.concatenate([self.materials[a:b] for a, b in zip(lo, hi)]) if idx.size else np.zeros(0, int)
        verts = [self.vertices[i] for i in idx] if self.vertices is not None else None
        return PathSet(self.times[idx], self.directions[idx], self.energy[idx], self.beta[idx],
                       self.bounces[idx], mats, self.source, self.listener, self.seed,
                       self.ray_budget, vertices=verts)

    def scaled_times(self, s):
        out = self.select(np.ones(len(self), bool))
        out.times = self.times * s
        return out


def path_energy(path, table):
    """Band energies of one path: ``air_factor * prod(reflectance[m] for m in path)``."""
    table = np.asarray(table, dtype=np.float64)
    seq = np.asarray(path.material_seq, dtype=np.int64)
    if seq.size and (seq.min() < 0 or seq.max() >= table.shape[0]):
        raise IndexError(f"material index out of range for a table of {table.shape[0]} materials")
    return path.air_factor * np.prod(table[seq], axis=0)


def path_energies(paths, table):
    """Vectorized :func:`path_energy` over a :class:`PathSet`, computed in log space."""
    table = np.asarray(table, dtype=np.float64)
    if paths.materials.size and paths.materials.max() >= table.shape[0]:
        raise IndexError(f"material index out of range for a table of {table.shape[0]} materials")
    with np.errstate(divide="ignore"):
        logp = np.log(table)
    rows = np.repeat(np.arange(len(paths)), paths.bounces)
    log_prod = np.zeros((len(paths), table.shape[1]))
    np.add.at(log_prod, rows, logp[paths.materials])
    return paths.beta * np.exp(log_prod)


def direct_path(scene, source, listener):
    """The unobstructed source-to-listener path, or ``None`` when occluded."""
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    d = float(np.linalg.norm(source - listener))
    if d == 0:
        raise TraceError("source and listener coincide")
    if not scene.segment_clear(source, listener):
        return None
    beta = np.exp(-air_alpha(scene.band_centers) * d) / (4.0 * np.pi * d * d)
    return PathRecord(
        arrival_time=d / scene.speed_of_sound,
        direction=(source - listener) / d,
        band_energy=beta.copy(),
        material_seq=(),
        air_factor=beta,
    )


def _chunk_rng(seed, chunk):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))


def _uniform_sphere(u1, u2):
    z = 1.0 - 2.0 * u1
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _cosine_lobe(normal, u1, u2):
    """Cosine-weighted directions about each row of ``normal``."""
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    x, y, z = r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(0.0, 1.0 - u1))
    helper = np.where(np.abs(normal[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(normal, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normal, t1)
    return x[:, None] * t1 + y[:, None] * t2 + z[:, None] * normal


def _trace_chunk(scene, source, listener, chunk, n_chunk, ray_budget, max_len, seed, radius,
                 alpha, table, mat_of_surface, normals, keep_vertices):
    rng = _chunk_rng(seed, chunk)
    n_bands = table.shape[1]
    first_ray = chunk * CHUNK
    launch = 1.0 / (ray_budget * np.pi * radius * radius)

    u = rng.random((n_chunk, 2))
    dirs = _uniform_sphere(u[:, 0], u[:, 1])
    orig = np.repeat(source[None], n_chunk, axis=0)
    travelled = np.zeros(n_chunk)
    refl = np.ones((n_chunk, n_bands))
    boost = np.ones(n_chunk)
    last_surface = np.full(n_chunk, -1)
    alive = np.ones(n_chunk, bool)
    history = np.zeros((n_chunk, 0), dtype=np.int64)
    points = [orig.copy()] if keep_vertices else None

    out = {"time": [], "dir": [], "energy": [], "beta": [], "bounce": [], "mats": [],
           "ray": [], "verts": []}

    for bounce in range(_MAX_BOUNCES):
        # fixed draw shape per bounce keeps each ray's stream independent of the others
        draws = rng.random((n_chunk, 4))
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        o, d = orig[idx], dirs[idx]
        hit_t, hit_s = scene.intersect(o, d, exclude=last_surface[idx])
        seg = np.minimum(hit_t, max_len - travelled[idx])

        if bounce > 0:
            rel = listener[None] - o
            s_star = np.einsum("ij,ij->i", rel, d)
            miss2 = np.einsum("ij,ij->i", rel, rel) - s_star ** 2
            half = np.sqrt(np.maximum(0.0, radius * radius - miss2))
            crosses = (miss2 <= radius * radius) & (s_star + half >= 0.0) & (s_star - half <= seg)
            leg = np.linalg.norm(rel, axis=1)
            total = travelled[idx] + leg
            rec = crosses & (total <= max_len) & (leg > 0)
            if rec.any():
                r = idx[rec]
                beta = (launch * boost[r])[:, None] * np.exp(-np.outer(total[rec], alpha))
                out["time"].append(total[rec] / scene.speed_of_sound)
                out["dir"].append(-rel[rec] / leg[rec, None])
                out["beta"].append(beta)
                out["energy"].append(beta * refl[r])
                out["bounce"].append(np.full(r.size, bounce))
                out["mats"].append(history[r])
                out["ray"].append(first_ray + r)
                if keep_vertices:
                    for k in r:
                        out["verts"].append(np.array([p[k] for p in points[1:bounce + 1]]))

        # advance to the next reflection; rays leaving the scene or the time budget die
        go = np.isfinite(hit_t) & (hit_t < max_len - travelled[idx])
        dead = idx[~go]
        alive[dead] = False
        idx, o, d, hit_t, hit_s = idx[go], o[go], d[go], hit_t[go], hit_s[go]
        if idx.size == 0:
            break
        pos = o + hit_t[:, None] * d
        travelled[idx] += hit_t
        mats = mat_of_surface[hit_s]
        refl[idx] *= table[mats]
        if history.shape[1] <= bounce:
            history = np.concatenate([history, np.full((n_chunk, 1), -1)], axis=1)
        history[idx, bounce] = mats
        orig[idx] = pos
        last_surface[idx] = hit_s
        if keep_vertices:
            pts = points[-1].copy()
            pts[idx] = pos
            points.append(pts)

        n = normals[hit_s]
        cos_in = np.einsum("ij,ij->i", d, n)
        facing = -np.sign(cos_in)[:, None] * n
        specular = d - 2.0 * cos_in[:, None] * n
        dr = draws[idx]
        diffuse = _cosine_lobe(facing, dr[:, 1], dr[:, 2])
        scatter = dr[:, 0] < scene.scattering
        dirs[idx] = np.where(scatter[:, None], diffuse, specular)

        weight = refl[idx].max(axis=1) * boost[idx]
        low = weight < ROULETTE_THRESHOLD
        if low.any():
            survive = dr[:, 3] < ROULETTE_SURVIVAL
            alive[idx[low & ~survive]] = False
            boost[idx[low & survive]] /= ROULETTE_SURVIVAL

    return out


def trace_paths(scene, source, listener, ray_budget, max_time, seed=0,
                receiver_radius=DEFAULT_RECEIVER_RADIUS, workers=1, keep_vertices=False):
    """Trace reflected paths from ``source`` to ``listener``.

    Parameters
    ----------
    scene : Scene
    source, listener : array_like, shape (3,)
    ray_budget : int
        Number of rays launched from the source.
    max_time : float
        Paths longer than ``max_time`` seconds are culled.
    seed : int
        Ray ``i`` draws from a stream keyed by ``(seed, i // CHUNK)`` so
        results do not depend on ``workers``.
    receiver_radius : float
        Radius of the receiver sphere in meters.
    keep_vertices : bool
        Keep reflection points (in memory only) for geometric checks.

    Returns
    -------
    PathSet
        Sorted by arrival time; the deterministic direct path, if
        unobstructed, is the only path without reflections.
    """
    if ray_budget <= 0:
        raise TraceError("ray_budget must be positive")
    if not max_time > 0:
        raise TraceError("max_time must be positive")
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    box = scene.bounding_box()
    if box is not None:
        lo, hi = box[0] - 10.0, box[1] + 10.0
        for name, p in (("source", source), ("listener", listener)):
            if np.any(p < lo) or np.any(p > hi):
                raise TraceError(f"{name} {p.tolist()} lies far outside the scene bounds")

    alpha = air_alpha(scene.band_centers)
    table = scene.reflectance_table()
    mat_of_surface = np.array([f.material for f in scene.surfaces], dtype=np.int64)
    normals = np.stack([f.normal for f in scene.surfaces]) if scene.surfaces else np.zeros((0, 3))
    max_len = max_time * scene.speed_of_sound

    chunks = [(k, min(CHUNK, ray_budget - k * CHUNK)) for k in range((ray_budget + CHUNK - 1) // CHUNK)]

    def run(ck):
        return _trace_chunk(scene, source, listener, ck[0], ck[1], ray_budget, max_len, seed,
                            receiver_radius, alpha, table, mat_of_surface, normals, keep_vertices)

    if scene.surfaces:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run, chunks))
        else:
            results = [run(ck) for ck in chunks]
    else:
        results = []

    times, dirs, energy, beta, bounces, mats, rays, verts = [], [], [], [], [], [], [], []
    for res in results:
        for k in range(len(res["time"])):
            times.append(res["time"][k])
            dirs.append(res["dir"][k])
            energy.append(res["energy"][k])
            beta.append(res["beta"][k])
            bounces.append(res["bounce"][k])
            h = res["mats"][k]
            nb = res["bounce"][k][0]
            mats.extend(list(h[:, :nb]))
            rays.append(res["ray"][k])
        verts.extend(res["verts"])

    n_bands = scene.n_bands
    if times:
        times = np.concatenate(times)
        dirs = np.concatenate(dirs)
        energy = np.concatenate(energy)
        beta = np.concatenate(beta)
        bounces = np.concatenate(bounces)
        rays = np.concatenate(rays)
    else:
        times, dirs = np.zeros(0), np.zeros((0, 3))
        energy, beta = np.zeros((0, n_bands)), np.zeros((0, n_bands))
        bounces, rays = np.zeros(0, np.int64), np.zeros(0, np.int64)

    direct = direct_path(scene, source, listener)
    if direct is not None and direct.arrival_time <= max_time:
        times = np.concatenate([[direct.arrival_time], times])
        dirs = np.concatenate([direct.direction[None], dirs])
        energy = np.concatenate([direct.band_energy[None], energy])
        beta = np.concatenate([direct.air_factor[None], beta])
        bounces = np.concatenate([[0], bounces])
        rays = np.concatenate([[-1], rays])
        mats = [np.zeros(0, np.int64)] + mats
        verts = [np.zeros((0, 3))] + verts

    order = np.lexsort((bounces, rays, times))
    flat = np.concatenate([mats[j] for j in order]) if len(order) else np.zeros(0, np.int64)
    return PathSet(
        times[order], dirs[order], energy[order], beta[order], bounces[order], flat,
        source, listener, seed, ray_budget,
        vertices=[verts[j] for j in order] if keep_vertices else None,
    )


_PSET_MAGIC = b"PSET"
_PSET_VERSION = 1


def write_pathset(path, paths):
    """Little-endian binary: magic, version, counts, endpoints, packed records."""
    m, b = len(paths), paths.n_bands
    with open(path, "wb") as fh:
        fh.write(_PSET_MAGIC)
        fh.write(struct.pack("<IIIqq", _PSET_VERSION, m, b, paths.seed, paths.ray_budget))
        fh.write(np.concatenate([paths.source, paths.listener]).astype("<f8").tobytes())
        for j in range(m):
            lo, hi = paths.offsets[j], paths.offsets[j + 1]
            fh.write(struct.pack("<d", paths.times[j]))
            fh.write(paths.directions[j].astype("<f8").tobytes())
            fh.write(paths.energy[j].astype("<f8").tobytes())
            fh.write(struct.pack("<I", hi - lo))
            fh.write(paths.materials[lo:hi].astype("<u4").tobytes())
            fh.write(paths.beta[j].astype("<f8").tobytes())


def read_pathset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse_pathset(data, path)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, TraceError):
            raise
        raise TraceError(f"{path}: truncated or corrupt path set ({exc})") from exc


def _parse_pathset(data, path):
    if data[:4] != _PSET_MAGIC:
        raise TraceError(f"{path}: not a path set file")
    version, m, b, seed, budget = struct.unpack_from("<IIIqq", data, 4)
    if version != _PSET_VERSION:
        raise TraceError(f"{path}: unsupported version {version}")
    pos = 4 + struct.calcsize("<IIIqq")
    ends = np.frombuffer(data, "<f8", 6, pos)
    pos += 48
    times = np.empty(m)
    dirs = np.empty((m, 3))
    energy = np.empty((m, b))
    beta = np.empty((m, b))
    bounces = np.empty(m, np.int64)
    mats = []
    for j in range(m):
        times[j] = struct.unpack_from("<d", data, pos)[0]
        pos += 8
        dirs[j] = np.frombuffer(data, "<f8", 3, pos)
        pos += 24
        energy[j] = np.frombuffer(data, "<f8", b, pos)
        pos += 8 * b
        n = struct.unpack_from("<I", data, pos)[0]
        pos += 4
        bounces[j] = n
        mats.append(np.frombuffer(data, "<u4", n, pos).astype(np.int64))
        pos += 4 * n
        beta[j] = np.frombuffer(data, "<f8", b, pos)
        pos += 8 * b
    flat = np.concatenate(mats) if mats else np.zeros(0, np.int64)
    return PathSet(times, dirs, energy, beta, bounces, flat, ends[:3], ends[3:], seed, budget)
