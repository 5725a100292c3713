"""The non-learned geometric toolbox: FPS, ball query, kNN, IoU, NMS."""

import numpy as np

from sia3d.geometry import (Box3D, ball_query, farthest_point_sample, giou_3d,
                            iou_3d, knn, nms)

rng = np.random.default_rng(0)
cloud = rng.uniform(0, 5, size=(500, 3))

# farthest point sampling spreads picks across the cloud
picks = farthest_point_sample(cloud, 8, seed_index=0)
dists = np.linalg.norm(cloud[picks][:, None] - cloud[picks][None], axis=-1)
print("FPS picks:", picks.tolist())
print("min pairwise distance among picks: %.2f m" % dists[dists > 0].min())

# ball query groups neighbors, padding sparse balls
centers = cloud[picks[:3]]
idx, empty = ball_query(centers, cloud, radius=0.6, nsample=8)
print("ball query neighbors per center:", idx.shape, "empty balls:", empty.sum())

# exact kNN
nn = knn(centers, cloud, k=4)
print("4-NN of first center:", nn[0].tolist())

# axis-aligned overlap measures
a = Box3D((0, 0, 0), (1, 1, 1))
b = Box3D((0.5, 0, 0), (1, 1, 1))
c = Box3D((4, 4, 4), (1, 1, 1))
print("IoU half-offset cubes: %.4f (exactly 1/3)" % iou_3d(a, b))
print("GIoU of distant cubes: %.4f (negative)" % giou_3d(a, c))

# greedy NMS keeps the strongest of overlapping detections
boxes = [(a, 0.9), (Box3D((0.1, 0, 0), (1, 1, 1)), 0.7), (c, 0.5)]
print("NMS keeps indices:", nms(boxes, iou_threshold=0.25))
