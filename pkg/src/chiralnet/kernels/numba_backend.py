"""Numba-compiled implementations of the geometry inner loops.

Same contracts as `numpy_backend`; scalar loops under @njit. fastmath is
left off so results stay within a few ulp of the numpy path.
"""

import math

import numpy as np
from numba import njit

DEGENERACY_EPS = 1e-12


@njit(cache=True)
def bond_distances(positions, pairs):
    n = pairs.shape[0]
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        i = pairs[r, 0]
        j = pairs[r, 1]
        dx = positions[i, 0] - positions[j, 0]
        dy = positions[i, 1] - positions[j, 1]
        dz = positions[i, 2] - positions[j, 2]
        out[r] = math.sqrt(dx * dx + dy * dy + dz * dz)
    return out


@njit(cache=True)
def bend_angles(positions, triples):
    n = triples.shape[0]
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        i = triples[r, 0]
        j = triples[r, 1]
        k = triples[r, 2]
        ux = positions[i, 0] - positions[j, 0]
        uy = positions[i, 1] - positions[j, 1]
        uz = positions[i, 2] - positions[j, 2]
        vx = positions[k, 0] - positions[j, 0]
        vy = positions[k, 1] - positions[j, 1]
        vz = positions[k, 2] - positions[j, 2]
        nu = math.sqrt(ux * ux + uy * uy + uz * uz)
        nv = math.sqrt(vx * vx + vy * vy + vz * vz)
        denom = nu * nv
        if denom < DEGENERACY_EPS:
            out[r] = np.nan
            continue
        c = (ux * vx + uy * vy + uz * vz) / denom
        if c > 1.0:
            c = 1.0
        elif c < -1.0:
            c = -1.0
        out[r] = math.acos(c)
    return out


@njit(cache=True)
def dihedral_angles(positions, quads):
    n = quads.shape[0]
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        i = quads[r, 0]
        x = quads[r, 1]
        y = quads[r, 2]
        j = quads[r, 3]
        b1x = positions[x, 0] - positions[i, 0]
        b1y = positions[x, 1] - positions[i, 1]
        b1z = positions[x, 2] - positions[i, 2]
        b2x = positions[y, 0] - positions[x, 0]
        b2y = positions[y, 1] - positions[x, 1]
        b2z = positions[y, 2] - positions[x, 2]
        b3x = positions[j, 0] - positions[y, 0]
        b3y = positions[j, 1] - positions[y, 1]
        b3z = positions[j, 2] - positions[y, 2]
        n1x = b1y * b2z - b1z * b2y
        n1y = b1z * b2x - b1x * b2z
        n1z = b1x * b2y - b1y * b2x
        n2x = b2y * b3z - b2z * b3y
        n2y = b2z * b3x - b2x * b3z
        n2z = b2x * b3y - b2y * b3x
        nb2 = math.sqrt(b2x * b2x + b2y * b2y + b2z * b2z)
        n1sq = n1x * n1x + n1y * n1y + n1z * n1z
        n2sq = n2x * n2x + n2y * n2y + n2z * n2z
        if nb2 < DEGENERACY_EPS or n1sq < DEGENERACY_EPS**2 or n2sq < DEGENERACY_EPS**2:
            out[r] = np.nan
            continue
        ux = b2x / nb2
        uy = b2y / nb2
        uz = b2z / nb2
        mx = n1y * uz - n1z * uy
        my = n1z * ux - n1x * uz
        mz = n1x * uy - n1y * ux
        xc = n1x * n2x + n1y * n2y + n1z * n2z
        yc = mx * n2x + my * n2y + mz * n2z
        out[r] = math.atan2(yc, xc)
    return out


@njit(cache=True)
def rotate_about_axis(positions, indices, origin, axis_unit, angle):
    out = positions.copy()
    c = math.cos(angle)
    s = math.sin(angle)
    kx = axis_unit[0]
    ky = axis_unit[1]
    kz = axis_unit[2]
    for r in range(indices.shape[0]):
        i = indices[r]
        vx = positions[i, 0] - origin[0]
        vy = positions[i, 1] - origin[1]
        vz = positions[i, 2] - origin[2]
        cx = ky * vz - kz * vy
        cy = kz * vx - kx * vz
        cz = kx * vy - ky * vx
        kdv = kx * vx + ky * vy + kz * vz
        out[i, 0] = origin[0] + vx * c + cx * s + kx * kdv * (1.0 - c)
        out[i, 1] = origin[1] + vy * c + cy * s + ky * kdv * (1.0 - c)
        out[i, 2] = origin[2] + vz * c + cz * s + kz * kdv * (1.0 - c)
    return out


@njit(cache=True)
def reflect_through_plane(positions, normal_unit):
    out = np.empty_like(positions)
    nx = normal_unit[0]
    ny = normal_unit[1]
    nz = normal_unit[2]
    for i in range(positions.shape[0]):
        p = positions[i, 0] * nx + positions[i, 1] * ny + positions[i, 2] * nz
        out[i, 0] = positions[i, 0] - 2.0 * p * nx
        out[i, 1] = positions[i, 1] - 2.0 * p * ny
        out[i, 2] = positions[i, 2] - 2.0 * p * nz
    return out


@njit(cache=True)
def rigid_transform(positions, rotation, translation):
    n = positions.shape[0]
    out = np.empty_like(positions)
    for i in range(n):
        for r in range(3):
            out[i, r] = (
                rotation[r, 0] * positions[i, 0]
                + rotation[r, 1] * positions[i, 1]
                + rotation[r, 2] * positions[i, 2]
                + translation[r]
            )
    return out
