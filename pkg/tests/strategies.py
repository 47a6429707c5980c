"""Hypothesis strategies for boxes."""

import math

import hypothesis.strategies as st

from det3d.geom import Box3D

coords = st.floats(-20, 20, allow_nan=False)
dims = st.floats(0.2, 5.0, allow_nan=False)
angles = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def boxes(draw, near=None):
    if near is None:
        cx, cy = draw(coords), draw(coords)
    else:
        cx = near.cx + draw(st.floats(-2, 2))
        cy = near.cy + draw(st.floats(-2, 2))
    return Box3D(cx, cy, draw(st.floats(-2, 2)), draw(dims), draw(dims), draw(dims), draw(angles))


@st.composite
def box_pairs(draw):
    a = draw(boxes())
    return a, draw(boxes(near=a))
