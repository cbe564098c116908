import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from hdix.raster import GrayImage, make_fixture
from hdix.sift import (DESCRIPTOR_LENGTH, DetectThresholds, Keypoint, KeypointSet, MatchRule,
                       ScaleSpaceConfig, build_scale_space, descriptor, detect, format_keypoints,
                       image_gradients, match, normalize_descriptor, parse_keypoints)


def rot90_geometry(kps, width):
    """Map keypoints of ``np.rot90(img)`` back to the original frame."""
    g = kps.geometry()
    return np.column_stack([width - 1 - g[:, 1], g[:, 0]])


def block_halve(img):
    d = img.data.astype(float)
    return GrayImage(np.rint((d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2]) / 4)
                     .astype(np.uint8))


def brute_match(da, db, rho):
    out = []
    for i, a in enumerate(da):
        dists = sorted((math.dist(a, b), j) for j, b in enumerate(db))
        if len(dists) >= 2 and dists[0][0] < rho * dists[1][0]:
            out.append((i, dists[0][1]))
    return out


def unit_rows(rng, n):
    v = np.abs(rng.normal(size=(n, DESCRIPTOR_LENGTH)))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def kpset(desc, image_id=0):
    return KeypointSet(image_id, tuple(Keypoint(float(i), 0.0, 1.0, 0.0) for i in range(len(desc))), desc)


class TestConfig:
    def test_auto_octaves(self):
        assert ScaleSpaceConfig().octave_count(512, 512) == 6
        assert ScaleSpaceConfig().octave_count(16, 40) == 1
        assert ScaleSpaceConfig(upsample_first_octave=True).octave_count(512, 512) == 7

    @pytest.mark.parametrize("kw", [{"intervals_per_octave": 0}, {"base_sigma": 0.4},
                                    {"octaves": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScaleSpaceConfig(**kw)

    def test_pyramid_shapes(self):
        octs = build_scale_space(make_fixture("random_text_like", 64, seed=1))
        assert len(octs) == 3
        assert [o.gaussians.shape for o in octs] == [(6, 64, 64), (6, 32, 32), (6, 16, 16)]
        assert all(o.dogs.shape[0] == 5 for o in octs)

    def test_dog_is_gaussian_difference(self):
        o = build_scale_space(make_fixture("gaussian_blob", 64, sigma=4))[0]
        np.testing.assert_array_equal(o.dogs[2], o.gaussians[3] - o.gaussians[2])


class TestGradients:
    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        patch = rng.random((32, 32))
        gx, gy = image_gradients(patch)
        h, w = patch.shape
        for r in range(h):
            for c in range(w):
                ex = 0.5 * (patch[r, min(c + 1, w - 1)] - patch[r, max(c - 1, 0)])
                ey = 0.5 * (patch[min(r + 1, h - 1), c] - patch[max(r - 1, 0), c])
                assert abs(gx[r, c] - ex) < 1e-9
                assert abs(gy[r, c] - ey) < 1e-9


class TestDetect:
    def test_constant_image(self):
        assert len(detect(GrayImage(np.full((512, 512), 200, np.uint8)))) == 0

    def test_too_small(self):
        with pytest.raises(ValueError):
            detect(GrayImage(np.zeros((15, 40), np.uint8)))

    def test_blob_against_brute_force_dog(self, blob_256):
        # dense DoG stack straight from the image, no pyramid
        img = blob_256.data / 255.0
        k = 2 ** (1 / 3)
        sigmas = 1.6 * k ** np.arange(12)
        stack = np.stack([ndimage.gaussian_filter(img, math.sqrt(s * s - 0.25)) for s in sigmas])
        dog = stack[1:] - stack[:-1]
        lvl, row, col = np.unravel_index(np.argmax(np.abs(dog)), dog.shape)
        kps = detect(blob_256)
        assert len(kps) >= 1
        d = np.hypot([kp.x - col for kp in kps.keypoints], [kp.y - row for kp in kps.keypoints])
        best = kps.keypoints[int(np.argmin(d))]
        assert d.min() <= 3.0
        assert 4.0 <= best.sigma <= 16.0
        assert abs(col - 128) <= 1 and abs(row - 128) <= 1

    def test_text_keypoint_count(self, text_512_kps):
        assert 100 <= len(text_512_kps) <= 3000

    def test_descriptor_invariants(self, text_512_kps):
        d = text_512_kps.descriptors
        assert d.shape[1] == DESCRIPTOR_LENGTH
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)
        assert d.min() >= 0.0 and d.max() <= 1.0

    def test_keypoints_inside_image(self, text_512_kps):
        g = text_512_kps.geometry()
        assert (g[:, 0] >= 0).all() and (g[:, 0] <= 511).all()
        assert (g[:, 1] >= 0).all() and (g[:, 1] <= 511).all()
        assert (g[:, 2] > 0).all()
        assert ((g[:, 3] >= 0) & (g[:, 3] < 2 * np.pi)).all()

    def test_deterministic(self, text_512, text_512_kps):
        again = detect(text_512)
        assert again.keypoints == text_512_kps.keypoints
        np.testing.assert_array_equal(again.descriptors, text_512_kps.descriptors)

    def test_stable_order(self, text_512_kps):
        octaves = [kp.octave for kp in text_512_kps.keypoints]
        assert octaves == sorted(octaves)
        for o in set(octaves):
            pts = [(kp.y, kp.x, kp.orientation) for kp in text_512_kps.keypoints if kp.octave == o]
            f = 2.0 ** o
            keys = [(round((y + 0.5) / f - 0.5), round((x + 0.5) / f - 0.5), t) for y, x, t in pts]
            assert keys == sorted(keys)

    def test_higher_contrast_threshold_gives_subset(self, text_512, text_512_kps):
        strict = detect(text_512, thresholds=DetectThresholds(contrast=0.06))
        assert len(strict) < len(text_512_kps)
        assert set(strict.keypoints) <= set(text_512_kps.keypoints)

    def test_upsampled_first_octave(self):
        img = make_fixture("random_text_like", 128, seed=3)
        plain = detect(img)
        up = detect(img, ScaleSpaceConfig(upsample_first_octave=True))
        assert len(up) > len(plain)
        assert min(kp.sigma for kp in up.keypoints) < min(kp.sigma for kp in plain.keypoints)

    @pytest.mark.parametrize("fixture", ["text", "blob"])
    def test_rotation_repeatability(self, fixture, text_512, text_512_kps, blob_256):
        img, kps = (text_512, text_512_kps) if fixture == "text" else (blob_256, detect(blob_256))
        rot = detect(GrayImage(np.rot90(img.data)))
        back = rot90_geometry(rot, img.width)
        g = kps.geometry()
        dist = np.hypot(g[:, None, 0] - back[None, :, 0], g[:, None, 1] - back[None, :, 1])
        matched = {(i, j) for i, j, _ in match(kps, rot)} if len(rot) > 1 else set()
        repeat = [any(dist[i, j] <= 2 for j in range(len(rot)) if (i, j) in matched or len(rot) == 1)
                  for i in range(len(kps))]
        assert np.mean(repeat) >= 0.5

    def test_scale_repeatability(self, text_512, text_512_kps):
        small = detect(block_halve(text_512))
        g = text_512_kps.geometry()
        s = small.geometry()
        sx, sy = (s[:, 0] + 0.5) * 2 - 0.5, (s[:, 1] + 0.5) * 2 - 0.5
        near = np.hypot(g[:, None, 0] - sx[None], g[:, None, 1] - sy[None]) <= 4.0
        sigma_ok = np.abs(2 * s[None, :, 2] / g[:, None, 2] - 1) <= 0.2
        recovered = (near & sigma_ok).any(axis=0)
        assert recovered.mean() >= 0.4


class TestDescriptor:
    def test_uniform_gradient_patch(self):
        angle = math.radians(100)
        yy, xx = np.mgrid[0:64, 0:64].astype(float)
        ramp = (xx * math.cos(angle) + yy * math.sin(angle)) * 0.01
        gx, gy = image_gradients(ramp)
        vec = descriptor(gx, gy, Keypoint(32.0, 32.0, 2.0, 0.0))
        cells = vec.reshape(4, 4, 8)
        expected_bin = int(angle / (2 * math.pi / 8))
        assert (cells.argmax(axis=2) == expected_bin).all()
        assert np.count_nonzero(cells.sum(axis=(0, 1)) > 1e-12) <= 2

    def test_relative_to_orientation(self):
        yy, xx = np.mgrid[0:64, 0:64].astype(float)
        gx, gy = image_gradients(xx * 0.01)
        a = descriptor(gx, gy, Keypoint(32.0, 32.0, 2.0, 0.0))
        b = descriptor(gx, gy, Keypoint(32.0, 32.0, 2.0, math.pi / 2))
        assert a.reshape(16, 8).argmax(axis=1).tolist() == [0] * 16
        assert b.reshape(16, 8).argmax(axis=1).tolist() == [6] * 16

    def test_clamp_before_final_normalization(self):
        raw = np.zeros(DESCRIPTOR_LENGTH)
        raw[:3] = [10.0, 1.0, 0.5]
        clamped, final = normalize_descriptor(raw)
        assert clamped.max() <= 0.2 + 1e-12
        assert np.linalg.norm(final) == pytest.approx(1.0, abs=1e-12)
        assert normalize_descriptor(np.zeros(DESCRIPTOR_LENGTH)) is None

    def test_clipped_window_at_corner(self):
        gx, gy = image_gradients(make_fixture("random_text_like", 64, seed=2).data / 255.0)
        vec = descriptor(gx, gy, Keypoint(0.0, 0.0, 3.0, 1.0))
        assert vec is not None and np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)
        assert descriptor(gx, gy, Keypoint(-500.0, -500.0, 1.0, 0.0)) is None

    def test_rotated_descriptor_close(self, text_512, text_512_kps):
        rot = detect(GrayImage(np.rot90(text_512.data)))
        back = rot90_geometry(rot, 512)
        g = text_512_kps.geometry()
        for i in range(0, len(text_512_kps), 37):
            d = np.hypot(back[:, 0] - g[i, 0], back[:, 1] - g[i, 1])
            cands = np.flatnonzero(d < 0.5)
            dd = [np.linalg.norm(rot.descriptors[j] - text_512_kps.descriptors[i]) for j in cands]
            assert min(dd) <= 0.25


class TestMatch:
    def test_self_match(self):
        d = unit_rows(np.random.default_rng(1), 20)
        m = match(d, d)
        assert [(i, j) for i, j, _ in m] == [(i, i) for i in range(20)]
        assert all(dist == 0.0 for *_, dist in m)

    def test_empty(self):
        d = unit_rows(np.random.default_rng(1), 5)
        assert match(d, np.zeros((0, 128))) == []
        assert match(np.zeros((0, 128)), d) == []

    def test_constructed_identity_sets(self):
        rng = np.random.default_rng(2)
        a = np.zeros((6, DESCRIPTOR_LENGTH))
        for i in range(6):  # disjoint supports: cross distances are sqrt(2)
            a[i, i * 20:(i + 1) * 20] = 1 / math.sqrt(20)
        b = a.copy()
        cross = np.linalg.norm(a[:, None] - b[None], axis=2)
        assert (cross[~np.eye(6, dtype=bool)] >= 1).all()
        assert len(match(kpset(a), kpset(b))) == 6

    def test_single_candidate(self):
        a = unit_rows(np.random.default_rng(3), 4)
        assert match(a, a[:1]) == []
        res = match(a, a[:1], MatchRule.absolute(0.1))
        assert [(i, j) for i, j, _ in res] == [(0, 0)]

    def test_absolute_rule(self):
        rng = np.random.default_rng(4)
        a = unit_rows(rng, 10)
        b = a + 0.01 * rng.normal(size=a.shape)
        assert len(match(a, b, MatchRule.absolute(0.5))) == 10
        assert len(match(a, b, MatchRule.absolute(1e-4))) == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 25), st.integers(1, 25),
           st.floats(0.3, 1.0))
    def test_matches_brute_force(self, seed, na, nb, rho):
        rng = np.random.default_rng(seed)
        a = unit_rows(rng, na)
        b = np.vstack([a[: nb // 2] + 0.05 * rng.normal(size=(min(nb // 2, na), 128)), unit_rows(rng, nb)])[:nb]
        got = match(a, b, MatchRule.ratio(rho))
        assert [(i, j) for i, j, _ in got] == brute_match(a, b, rho)
        assert len(got) <= na
        assert len({i for i, _, _ in got}) == len(got)
        for i, j, dist in got:
            assert dist == pytest.approx(np.linalg.norm(a[i] - b[j]), abs=1e-12)

    def test_self_match_on_detected(self, text_512_kps):
        m = match(text_512_kps, text_512_kps)
        exact = sum(1 for i, j, d in m if i == j and d == 0.0)
        assert exact >= 0.95 * len(text_512_kps)

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            MatchRule("cosine", 0.5)
        with pytest.raises(ValueError):
            MatchRule.ratio(0)


class TestKeypointDump:
    def test_roundtrip(self):
        kps = detect(make_fixture("random_text_like", 64, seed=5))
        text = format_keypoints(kps)
        lines = text.splitlines()
        assert len(lines) == len(kps)
        assert all(len(line.split()) == 132 for line in lines)
        back = parse_keypoints(text)
        np.testing.assert_allclose(back.descriptors, kps.descriptors, atol=1e-6)
        np.testing.assert_allclose(back.geometry(), kps.geometry(), atol=1e-6)

    def test_bad_line(self):
        with pytest.raises(ValueError):
            parse_keypoints("1 2 3\n")

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            KeypointSet(0, (Keypoint(0, 0, 1, 0),), np.zeros((2, 128)))
