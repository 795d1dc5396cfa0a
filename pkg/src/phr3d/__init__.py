"""phr3d: part-heatmap-regression cascade for 3D facial landmark estimation.

A from-scratch two-stage system: 2D landmark heatmap regression (detection +
hourglass refinement) followed by depth regression, together with the
challenge evaluation protocol (ground-truth error and cross-view consistency
error), an augmentation pipeline, and a synthetic-data harness for
desk-scale training.
"""

__version__ = "0.1.0"
