"""
Training targets from a labeled patch
=====================================

A synthetic patch is turned into the five maps the network learns from:
binary mask, per-nucleus distance map, the two merged-grade maps and the
5-class map. The downsampled auxiliary view is built too.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from nucgrade import build_targets, synthdata

out = Path("demo_output")
out.mkdir(exist_ok=True)

sample = synthdata.generate(synthdata.SynthParams(seed=12, n_instances=12, touching_fraction=0.5))
print(sample.id, sample.image.shape, "instances:", sample.instances.max())

tb = build_targets(sample)

# every nucleus peaks at exactly 1 in its own distance map
for k in range(1, sample.instances.max() + 1):
    assert tb.distance[sample.instances == k].max() == 1.0

# grade 1 and 2 share a code in task1, grade 2 and 3 share one in task2
for code in range(5):
    m = tb.final == code
    if m.any():
        print(f"final={code}  task1={tb.task1[m][0]}  task2={tb.task2[m][0]}  pixels={m.sum()}")

print("aux view:", tb.aux100.shape)

Image.fromarray(sample.image).save(out / "targets_image.png")
Image.fromarray((tb.distance * 255).astype(np.uint8)).save(out / "targets_distance.png")
Image.fromarray((tb.final * 60).astype(np.uint8)).save(out / "targets_classes.png")
