"""Synthetic stand-in rotor profiles.

Real screw-rotor point clouds are proprietary; these gear-like profiles have
the same scale (tip radius ~51 mm), point counts and corner structure, so the
whole pipeline can run end to end on bundled data. The male profile has four
sharp corners at its lobe roots; the female profile is smooth with six lobes
and a slightly smaller tip radius.
"""
from __future__ import annotations

import math

import numpy as np

from .geomgen import PointCloud2D

MALE_TIP_RADIUS = 50.97
MALE_ROOT_RADIUS = 40.97
FEMALE_TIP_RADIUS = 50.2
FEMALE_MEAN_RADIUS = 45.2


def male_profile(num_points: int = 2572) -> PointCloud2D:
    """Four-lobe closed profile with sharp corners at the lobe roots.

    r(theta) = root + (tip - root) * |sin(2 theta)|; the |.| kinks at
    theta = k*pi/2 are genuine C0 corners. ``num_points`` must be divisible
    by 4 so the corners coincide with sample points.
    """
    if num_points % 4:
        raise ValueError("num_points must be divisible by 4")
    theta = 2 * math.pi * np.arange(num_points) / num_points
    r = MALE_ROOT_RADIUS + (MALE_TIP_RADIUS - MALE_ROOT_RADIUS) * np.abs(np.sin(2 * theta))
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    corners = tuple(num_points // 4 * k for k in range(4))
    return PointCloud2D(pts, closed=True, corner_indices=corners)


def female_profile(num_points: int = 2292) -> PointCloud2D:
    """Smooth six-lobe closed profile."""
    theta = 2 * math.pi * np.arange(num_points) / num_points
    amp = FEMALE_TIP_RADIUS - FEMALE_MEAN_RADIUS
    r = FEMALE_MEAN_RADIUS + amp * np.cos(6 * theta)
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return PointCloud2D(pts, closed=True)
