"""Small constructors shared by several test modules."""

import numpy as np

from rvcdet.cloudio import GtBox, PointCloud


def box(cx=0.0, cy=0.0, l=1.0, w=1.0, yaw=0.0, cls=0, cz=0.5, h=1.0):
    return GtBox(cx, cy, cz, l, w, h, yaw, cls)


def cloud(points, batch=None):
    return PointCloud(np.asarray(points, dtype=np.float64).reshape(-1, 3), batch=batch)
