"""
Splitting touching nuclei and scoring the result
================================================

Exact targets stand in for network output here, so everything shown is the
post-processing and the metrics. Two touching disks get split by the
marker-controlled watershed; then a degraded prediction is scored.
"""

import numpy as np
from scipy import ndimage

from nucgrade import NetworkOutputs, TypedInstanceMap, post_process
from nucgrade.metrics import evaluate_pairs
from nucgrade.postprocess import find_markers, watershed_split
from nucgrade.targets import distance_map_from_instances, one_hot

yy, xx = np.mgrid[0:48, 0:48]
ids = np.zeros((48, 48), np.int32)
ids[(yy - 24) ** 2 + (xx - 14) ** 2 <= 100] = 1
ids[((yy - 24) ** 2 + (xx - 33) ** 2 <= 100) & (ids == 0)] = 2

mask = ids > 0
dist = distance_map_from_instances(ids)
markers = find_markers(dist, mask)
split = watershed_split(mask, dist, markers)
print("connected components:", ndimage.label(mask)[1], "markers:", markers.max(),
      "instances:", split.max())

# the same through the full post-processing, with grade 1 and grade 3 labels
classes = np.where(ids == 1, 1, np.where(ids == 2, 3, 0))
outputs = NetworkOutputs(mask[..., None].astype(float), dist[..., None], None, None,
                         one_hot(classes, 5).astype(float))
typed = post_process(outputs)
print("typed instances:", typed.labels)

# a prediction that erodes one nucleus and mislabels the other
pred = typed.instances.copy()
pred[ndimage.binary_dilation(pred == 0, iterations=2) & (pred == 1)] = 0
wrong = TypedInstanceMap(pred, {1: 1, 2: 2})
report = evaluate_pairs([(typed, ids, classes), (wrong, ids, classes)])
print(report.to_text())
