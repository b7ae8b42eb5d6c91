"""Frozen expected values used across the test suite.

Closed-form values were evaluated once with 30-digit arithmetic and are
stored here so tests never recompute them with the code under test.
"""

import math

import numpy as np

# --- numerics --------------------------------------------------------------
CONV_FULL_EXTENT = 54  # 64 input, 11 filter, no padding, stride 1
POOL_FULL_EXTENT = 9  # 54 map, window 6
UNROLLED_FULL = 8100  # 9 * 9 * 100
ALL_ONES_CONV = np.full((2, 2), 4.0)  # 3x3 ones, 2x2 ones filter
POOL_BLOCK = np.array([[1.0, 2.0], [3.0, 4.0]])
POOL_BLOCK_AVERAGE = 2.5
POOL_BLOCK_MAX = 4.0
SIGMOID_LN3 = 0.75
KL_RHO_0_1_RHAT_0_5 = 0.368064207168497069910682093234
SGD_ONE_STEP = 0.8  # p=1, g=2, lr=0.1
FD_STEP = 1e-4
FD_RTOL = 1e-5

# --- locate ----------------------------------------------------------------
CNN_CHAIN = [(64, 64, 1), (54, 54, 100), (54, 54, 100), (9, 9, 100), (8100,), (1024,),
             (1024,), (32, 32)]
TWO_CONV_CHAIN = [(64, 64, 1), (54, 54, 100), (54, 54, 100), (9, 9, 100), (5, 5, 100),
                  (5, 5, 100), (2500,), (1024,), (1024,), (32, 32)]
CROP_ROWS_AT_128 = (78, 177)  # inclusive
UNIFORM_MASK_CENTER = (128, 128)
CORNER_BOX_START = (0, 0)

# --- infershape ------------------------------------------------------------
SAE_CHAIN = [(4096,), (100,), (100,), (100,), (100,), (4096,), (4096,)]

# --- metrics ---------------------------------------------------------------
DICE_TWO_OF_TWO_SHARED_ONE = 0.5
CC_AT_0_89 = 0.752808988764044943820224719101
CC_REPORTED_PAIR = (0.89, 0.76)  # reported with DM rounded to two digits
APD_CONCENTRIC = 3.0  # radii 10 and 13
RASTER_SQUARE_PIXELS = {(1, 1), (1, 2), (2, 1), (2, 2)}  # (row, col)
CIRCLE_AREA_R20 = math.pi * 400.0

# --- deform ----------------------------------------------------------------
def curvature_flow_radius(r0, t):
    return math.sqrt(r0 * r0 - 2.0 * t)


CURVATURE_FLOW_R_AT_T10 = 19.49358868961792781  # r0 = 20 after 100 steps of dt = 0.1
DISK_CENTER_DEPTH = 10.0  # signed distance at the centre of a radius-10 disk

# --- align3d ---------------------------------------------------------------
PLANTED_X = (0.5, 2.0, 1.0)  # x(i) = 1 + 2i + 0.5 i^2 as (a, b, c)
PLANTED_Y = (0.0, -1.0, 3.0)  # y(i) = 3 - i
UNIT_SQUARE_CENTROID = (0.5, 0.5)
