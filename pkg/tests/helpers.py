"""Constructed keypoint sets with known directed match counts."""

import numpy as np

from hdix.sift import DESCRIPTOR_LENGTH, Keypoint, KeypointSet, format_keypoints


def block_vectors(n, width=4, offset=0):
    """``n`` unit descriptors on disjoint supports: pairwise distance sqrt(2)."""
    out = np.zeros((n, DESCRIPTOR_LENGTH))
    for i in range(n):
        lo = offset + i * width
        out[i, lo:lo + width] = 1 / np.sqrt(width)
    return out


def as_set(desc, image_id=0):
    kps = tuple(Keypoint(float(i), float(i % 7), 1.6, 0.0) for i in range(len(desc)))
    return KeypointSet(image_id, kps, np.asarray(desc, dtype=np.float64))


def paired_sets(shared, extra_b=0, image_ids=("a", "b")):
    """``a`` and ``b`` sharing ``shared`` exact descriptors.

    With ``extra_b`` > 0, ``a`` gets one more descriptor ``e`` and ``b`` gets
    ``extra_b`` perturbed copies of ``e`` at growing distances. Under the 0.8
    ratio rule ``e`` matches its nearest copy, and every copy matches back into
    ``e``: ``m(a, b) = shared + 1`` and ``m(b, a) = shared + extra_b``.
    """
    base = block_vectors(shared)
    a, b = [base], [base.copy()]
    if extra_b:
        e = np.zeros(DESCRIPTOR_LENGTH)
        e[120:124] = 0.5
        a.append(e[None])
        for k in range(extra_b):
            copy = e.copy()
            copy[124 + k % 4] += 0.1 * (1 + 4 * k)
            b.append(copy[None])
    return as_set(np.vstack(a), image_ids[0]), as_set(np.vstack(b), image_ids[1])


def write_key(kps, path):
    path.write_text(format_keypoints(kps))
    return path
