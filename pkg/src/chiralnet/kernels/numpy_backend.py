"""Pure-numpy implementations of the geometry inner loops.

All functions take an (n, 3) float64 coordinate array plus integer index
arrays and return new arrays; nothing is mutated in place. Degenerate
inputs (zero-length separation vectors, collinear torsion paths) yield
NaN entries, which callers turn into errors with index context.
"""

import numpy as np

DEGENERACY_EPS = 1e-12


def bond_distances(positions, pairs):
    """Euclidean distances for each (i, j) row of `pairs`."""
    d = positions[pairs[:, 0]] - positions[pairs[:, 1]]
    return np.sqrt((d * d).sum(axis=1))


def bend_angles(positions, triples):
    """Angles in [0, pi] at apex j for each (i, j, k) row of `triples`."""
    u = positions[triples[:, 0]] - positions[triples[:, 1]]
    v = positions[triples[:, 2]] - positions[triples[:, 1]]
    nu = np.sqrt((u * u).sum(axis=1))
    nv = np.sqrt((v * v).sum(axis=1))
    denom = nu * nv
    bad = denom < DEGENERACY_EPS
    safe = np.where(bad, 1.0, denom)
    cos = (u * v).sum(axis=1) / safe
    out = np.arccos(np.clip(cos, -1.0, 1.0))
    out[bad] = np.nan
    return out


def dihedral_angles(positions, quads):
    """Signed torsions in (-pi, pi] for each (i, x, y, j) row of `quads`.

    Convention: with b1 = p_x - p_i, b2 = p_y - p_x, b3 = p_j - p_y,
    n1 = b1 x b2, n2 = b2 x b3 and m = n1 x (b2/|b2|), the torsion is
    atan2(m . n2, n1 . n2). Reflection negates the result; reversing the
    path preserves it.
    """
    b1 = positions[quads[:, 1]] - positions[quads[:, 0]]
    b2 = positions[quads[:, 2]] - positions[quads[:, 1]]
    b3 = positions[quads[:, 3]] - positions[quads[:, 2]]
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.sqrt((b2 * b2).sum(axis=1))
    bad = nb2 < DEGENERACY_EPS
    b2u = b2 / np.where(bad, 1.0, nb2)[:, None]
    m = np.cross(n1, b2u)
    x = (n1 * n2).sum(axis=1)
    y = (m * n2).sum(axis=1)
    out = np.arctan2(y, x)
    bad |= (n1 * n1).sum(axis=1) < DEGENERACY_EPS**2
    bad |= (n2 * n2).sum(axis=1) < DEGENERACY_EPS**2
    out[bad] = np.nan
    return out


def rotate_about_axis(positions, indices, origin, axis_unit, angle):
    """Rodrigues rotation of the rows in `indices` about the line through
    `origin` with unit direction `axis_unit`. Returns a full copy."""
    out = positions.copy()
    v = positions[indices] - origin
    c = np.cos(angle)
    s = np.sin(angle)
    k = axis_unit
    kxv = np.cross(np.broadcast_to(k, v.shape), v)
    kdv = v @ k
    out[indices] = origin + v * c + kxv * s + np.outer(kdv, k) * (1.0 - c)
    return out


def reflect_through_plane(positions, normal_unit):
    """Mirror all rows through the plane with unit normal through the origin."""
    proj = positions @ normal_unit
    return positions - 2.0 * np.outer(proj, normal_unit)


def rigid_transform(positions, rotation, translation):
    """Apply p -> Q p + t to every row."""
    return positions @ rotation.T + translation
