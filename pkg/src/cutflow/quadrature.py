"""Reference quadrature rules on triangles and segments.

Triangle rules are given in barycentric coordinates with weights summing to 1
(scaled by the physical area at use sites).  Segment rules are on [0, 1] with
weights summing to 1.
"""

from __future__ import annotations

import numpy as np

_S = np.sqrt(0.6)

_TRI_RULES = {
    # degree of exactness -> (bary (n,3), weights (n,))
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6],
                  [1 / 6, 2 / 3, 1 / 6],
                  [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)),
    4: (None, None),  # filled below
    5: (None, None),
}

_a1, _w1 = 0.445948490915965, 0.223381589678011
_a2, _w2 = 0.091576213509771, 0.109951743655322
_pts4 = []
_wts4 = []
for _a, _w in ((_a1, _w1), (_a2, _w2)):
    _pts4 += [[1 - 2 * _a, _a, _a], [_a, 1 - 2 * _a, _a], [_a, _a, 1 - 2 * _a]]
    _wts4 += [_w] * 3
_TRI_RULES[4] = (np.array(_pts4), np.array(_wts4))

_b1, _v1 = 0.470142064105115, 0.132394152788506
_b2, _v2 = 0.101286507323456, 0.125939180544827
_pts5 = [[1 / 3, 1 / 3, 1 / 3]]
_wts5 = [0.225]
for _b, _v in ((_b1, _v1), (_b2, _v2)):
    _pts5 += [[1 - 2 * _b, _b, _b], [_b, 1 - 2 * _b, _b], [_b, _b, 1 - 2 * _b]]
    _wts5 += [_v] * 3
_TRI_RULES[5] = (np.array(_pts5), np.array(_wts5))

_SEG_RULES = {
    1: (np.array([0.5]), np.array([1.0])),
    2: (np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)]), np.full(2, 0.5)),
    3: (np.array([0.5 - 0.5 * _S, 0.5, 0.5 + 0.5 * _S]),
        np.array([5 / 18, 8 / 18, 5 / 18])),
}


def triangle_rule(degree):
    """Smallest stored rule exact for polynomials of the given total degree."""
    for d in sorted(_TRI_RULES):
        if d >= degree:
            bary, w = _TRI_RULES[d]
            return bary.copy(), w.copy()
    raise ValueError(f"no triangle rule of degree {degree}")


def segment_rule(npts):
    x, w = _SEG_RULES[npts]
    return x.copy(), w.copy()


def map_to_triangles(corners, bary):
    """Map barycentric points onto triangles `corners` (n, 3, 2) -> (n, q, 2)."""
    return np.einsum("qk,nkd->nqd", bary, corners)
