"""Drive the gbnf command line end to end on a generated CSV.

Makes a small 2-D tabular dataset, writes a config, then runs
train -> grid -> sample -> eval through the console entry point in-process.
All artifacts land under demos/out/cli/.

Run:  python3 demos/06_cli_end_to_end.py   (under a minute)
"""

import json
import os
import shutil

import numpy as np

from gbnf.cli import main
from gbnf.targets import export_csv

HERE = os.path.dirname(__file__)
ROOT = os.path.join(HERE, "out", "cli")

CONFIG = """\
[run]
id = csv-demo
mode = density_estimation

[data]
csv = {csv_path}
seed = 0

[model]
components = 2
flow_steps = 2
hidden = 32

[train]
max_steps = 2500
eval_every = 100
batch = 256
lr = 3e-3
lam = 0.01
seed = 4
"""

if os.path.isdir(ROOT):
    shutil.rmtree(ROOT)
os.makedirs(ROOT)

# Two anisotropic blobs, 4000 rows.
rng = np.random.default_rng(2)
labels = rng.integers(0, 2, size=4000)
centers = np.array([[-2.0, -1.0], [2.0, 1.0]])[labels]
pts = centers + rng.standard_normal((4000, 2)) * np.array([[0.5, 1.0], [1.0, 0.4]])[labels]
csv_path = os.path.join(ROOT, "blobs.csv")
export_csv(pts, csv_path)

config_path = os.path.join(ROOT, "demo.ini")
with open(config_path, "w", encoding="utf-8") as f:
    f.write(CONFIG.format(csv_path=csv_path))

out_dir = os.path.join(ROOT, "runs")
checkpoint = os.path.join(out_dir, "csv-demo", "model.gbnf")

steps = [
    ["train", "--config", config_path, "--out", out_dir],
    ["grid", "--checkpoint", checkpoint, "--res", "160", "--bbox=-5,5,-5,5",
     "--out", os.path.join(ROOT, "density")],
    ["sample", "--checkpoint", checkpoint, "--n", "2000", "--seed", "9",
     "--out", os.path.join(ROOT, "samples.csv")],
    ["eval", "--checkpoint", checkpoint, "--data", csv_path,
     "--out", os.path.join(ROOT, "metrics.json")],
]
for argv in steps:
    code = main(argv)
    print(f"gbnf {argv[0]}: exit {code}")
    assert code == 0

with open(os.path.join(ROOT, "metrics.json"), "r", encoding="utf-8") as f:
    metrics = json.load(f)
print(f"mean log-likelihood of the training CSV: {metrics['mean_log_likelihood']:.4f}")

manifest_path = os.path.join(out_dir, "csv-demo", "manifest.json")
with open(manifest_path, "r", encoding="utf-8") as f:
    manifest = json.load(f)
print(f"run manifest lists {len(manifest['stage_checkpoints'])} stage checkpoints, "
      f"total {manifest['timings']['total_seconds']:.1f}s")
print(f"artifacts under {ROOT} (density.csv / density.pgm from the grid command)")
