"""Render a moving listener in first-order ambisonics, end to end.

Writes the bundled fixture (scene, reference IR, dry signal, trajectory)
to a scratch directory and runs the full pipeline on it, then reads back
the report and the rendered file.

Run: python3 demos/render_scene.py [outdir]
"""

import json
import os
import sys
import tempfile

import numpy as np

from sceneaudio import cli, fixtures
from sceneaudio.dsp_io import read_wav

root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="sceneaudio-")
files = fixtures.write_fixture(os.path.join(root, "fixture"))
config = cli.PipelineConfig(scene=files["scene"], ir=files["ir"], dry=files["dry"],
                            trajectory=files["trajectory"], source=np.array(fixtures.SOURCE),
                            listener=np.array(fixtures.LISTENER), outdir=os.path.join(root, "out"))
result = cli.run_pipeline(config)
print(f"exit code {result.exit_code}, outputs in {config.outdir}")

report = json.load(open(os.path.join(config.outdir, "report.json")))
for name in cli.STAGES:
    stage = report["stages"][name]
    print(f"  {name:14s} {stage['status']:7s} {stage['seconds']:6.2f} s")
print(f"scale {report['scale']:.3f}, T_ER {report['t_er'] * 1e3:.1f} ms, "
      f"{report['positions']} synthesis positions")

data, spec = read_wav(os.path.join(config.outdir, "out.wav"))
rms = np.sqrt(np.mean(data ** 2, axis=1))
print(f"out.wav: {spec.channels} channels (ACN), {data.shape[1] / spec.rate:.2f} s, "
      f"channel RMS {np.round(rms, 4).tolist()}")
