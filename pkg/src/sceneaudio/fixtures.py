"""Bundled synthetic shoebox fixture for the end-to-end pipeline.

The "measured" IR is simulated from known materials, coloured by a single
room-mode resonance and given a faint noise floor, so every stage has a
known ground truth.
"""

from __future__ import annotations

import json
import os

import numpy as np
import scipy.signal

from .dsp_io import DEFAULT_RATE, Signal, write_signal
from .scene import Material, Trajectory, shoebox, write_scene, write_trajectory
from .tracer import trace_paths

ROOM_SIZE = (4.0, 6.0, 3.0)
SOURCE = (1.0, 1.5, 1.2)
LISTENER = (3.0, 4.5, 1.6)
WALLS = (0.80, 0.82, 0.85, 0.86, 0.86, 0.84, 0.80, 0.74)
FLOOR_CEILING = (0.70, 0.72, 0.75, 0.78, 0.80, 0.78, 0.74, 0.68)
RESONANCE_HZ = 110.0
RESONANCE_GAIN_DB = 6.0
RESONANCE_Q = 4.0
NOISE_FLOOR_DB = -80.0
MEASURED_RAYS = 20000
MEASURED_MAX_TIME = 0.6
DRY_SECONDS = 1.5


def fixture_scene():
    materials = [Material("walls", np.array(WALLS)), Material("floor_ceiling", np.array(FLOOR_CEILING))]
    return shoebox(ROOM_SIZE, materials, wall_material=0, floor_material=1)


def peaking_sos(freq, gain_db, q, rate):
    """Second-order peaking equalizer (audio-cookbook form)."""
    a = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * freq / rate
    alpha = np.sin(w0) / (2 * q)
    b = np.array([1 + alpha * a, -2 * np.cos(w0), 1 - alpha * a])
    den = np.array([1 + alpha / a, -2 * np.cos(w0), 1 - alpha / a])
    return np.concatenate([b / den[0], den / den[0]])[None, :]


def measured_ir(scene=None, rate=DEFAULT_RATE, seed=1234, rays=MEASURED_RAYS):
    """Peak-normalized synthetic room IR at the fixture measurement pair."""
    from .matopt import simulate_ir_from_paths

    scene = scene or fixture_scene()
    paths = trace_paths(scene, SOURCE, LISTENER, rays, MEASURED_MAX_TIME, seed=seed)
    h = simulate_ir_from_paths(paths, rate).samples
    h = scipy.signal.sosfilt(peaking_sos(RESONANCE_HZ, RESONANCE_GAIN_DB, RESONANCE_Q, rate), h)
    h = h / np.max(np.abs(h))
    noise = np.random.default_rng(seed).standard_normal(h.size)
    h = h + 10 ** (NOISE_FLOOR_DB / 20) * noise
    return Signal(h / np.max(np.abs(h)), rate)


def dry_signal(rate=DEFAULT_RATE, seconds=DRY_SECONDS, seed=7):
    """Tone bursts over a quiet noise bed."""
    n = int(seconds * rate)
    t = np.arange(n) / rate
    rng = np.random.default_rng(seed)
    x = 0.05 * rng.standard_normal(n)
    for k, f in enumerate((220.0, 440.0, 880.0, 1760.0)):
        start = 0.3 * k
        env = np.exp(-((t - start - 0.1) / 0.05) ** 2)
        x += 0.5 * env * np.sin(2 * np.pi * f * t)
    return Signal(x / np.max(np.abs(x)) * 0.5, rate)


def fixture_trajectory(seconds=DRY_SECONDS):
    start = np.array(LISTENER)
    end = np.array([2.0, 3.0, 1.6])
    times = np.linspace(0.0, seconds, 4)
    pos = start + np.linspace(0.0, 1.0, 4)[:, None] * (end - start)
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (4, 1))
    return Trajectory(times, pos, quat)


def write_fixture(directory, rate=DEFAULT_RATE):
    """Write scene, measured IR, dry signal, trajectory and a config file.

    Returns a dict of the written paths.
    """
    os.makedirs(directory, exist_ok=True)
    files = {name: os.path.join(directory, fn) for name, fn in (
        ("scene", "scene.json"), ("ir", "ir.wav"), ("dry", "dry.wav"),
        ("trajectory", "trajectory.json"), ("config", "fixture.json"))}
    scene = fixture_scene()
    write_scene(files["scene"], scene)
    write_signal(files["ir"], measured_ir(scene, rate))
    write_signal(files["dry"], dry_signal(rate))
    write_trajectory(files["trajectory"], fixture_trajectory())
    with open(files["config"], "w", encoding="utf-8") as fh:
        json.dump({"source": list(SOURCE), "listener": list(LISTENER),
                   "true_reflectance": {"walls": list(WALLS), "floor_ceiling": list(FLOOR_CEILING)}},
                  fh, indent=2)
    return files
