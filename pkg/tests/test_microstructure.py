from collections import deque

import numpy as np
import pytest

from permtensor.microstructure import (chord_statistics, check_binary, fill_isolated_pores,
                                       generate_microstructure, gradient_anisotropy, percolates,
                                       porosity)


def bfs_clusters(img):
    """Brute-force periodic 4-connected pore clusters.

    Returns a list of (pixels, wraps_x, wraps_y): each pixel is reached
    with a lifted coordinate, and reaching it again with a different lift
    means the cluster winds around the cell.
    """
    h, w = img.shape
    seen = {}
    clusters = []
    for r0 in range(h):
        for c0 in range(w):
            if img[r0, c0] or (r0, c0) in seen:
                continue
            pix, wx, wy = [], False, False
            q = deque([(r0, c0)])
            seen[(r0, c0)] = (r0, c0)
            while q:
                lr, lc = q.popleft()
                pix.append((lr % h, lc % w))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = lr + dr, lc + dc
                    key = (nr % h, nc % w)
                    if img[key]:
                        continue
                    if key in seen:
                        pr, pc = seen[key]
                        wy |= pr != nr
                        wx |= pc != nc
                        continue
                    seen[key] = (nr, nc)
                    q.append((nr, nc))
            clusters.append((sorted(pix), wx, wy))
    return clusters


def test_check_binary():
    assert check_binary(np.array([[0, 1], [1, 0]])).dtype == np.uint8
    with pytest.raises(ValueError):
        check_binary(np.array([[0, 2], [1, 0]]))
    with pytest.raises(ValueError):
        check_binary(np.zeros(4))


def test_porosity_counts_zeros():
    assert porosity(np.array([[0, 1], [1, 1]])) == 0.25


def test_generator_deterministic_and_on_target():
    a = generate_microstructure(3, 32, 2.0, 0.7)
    b = generate_microstructure(3, 32, 2.0, 0.7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_microstructure(4, 32, 2.0, 0.7))
    assert abs(porosity(a) - 0.7) <= 0.01
    assert set(np.unique(a)) <= {0, 1}


@pytest.mark.parametrize("kwargs", [dict(size=8), dict(target_porosity=0.99),
                                    dict(target_porosity=0.01), dict(correlation_length=0)])
def test_generator_validation(kwargs):
    args = dict(seed=0, size=32, correlation_length=2.0, target_porosity=0.5) | kwargs
    with pytest.raises(ValueError):
        generate_microstructure(**args)


@pytest.mark.parametrize("seed", range(6))
def test_fill_matches_bfs_oracle(seed):
    img = generate_microstructure(seed, 16, 1.0, 0.5)
    clusters = bfs_clusters(img)
    sizes = [len(p) for p, _, _ in clusters]
    # ties: the cluster containing the smallest row-major index (BFS order already sorts that way)
    keep = clusters[int(np.argmax(sizes))][0]
    ref = np.ones_like(img)
    for r, c in keep:
        ref[r, c] = 0
    assert np.array_equal(fill_isolated_pores(img), ref)


def test_fill_periodic_merge_and_ties():
    img = np.ones((6, 6), dtype=np.uint8)
    img[0, 2] = img[5, 2] = 0          # joined through the top/bottom edge: size 2
    img[2, 0] = img[2, 5] = 0          # joined through the left/right edge: size 2
    out = fill_isolated_pores(img)
    assert out[0, 2] == 0 and out[5, 2] == 0
    assert out[2, 0] == 1 and out[2, 5] == 1


def test_fill_all_solid_unchanged():
    img = np.ones((5, 5), dtype=np.uint8)
    assert np.array_equal(fill_isolated_pores(img), img)


def test_fill_never_adds_pore():
    img = generate_microstructure(9, 32, 1.5, 0.55)
    out = fill_isolated_pores(img)
    assert np.all(out >= img)


@pytest.mark.parametrize("seed", range(8))
def test_percolation_matches_bfs_oracle(seed):
    img = generate_microstructure(seed, 16, 1.2, 0.55)
    clusters = bfs_clusters(img)
    ref = (any(c[1] for c in clusters), any(c[2] for c in clusters))
    assert percolates(img) == ref


def test_percolation_stripes():
    img = np.ones((8, 8), dtype=np.uint8)
    img[3, :] = 0
    assert percolates(img) == (True, False)
    assert percolates(img.T) == (False, True)
    img[:, 5] = 0
    assert percolates(img) == (True, True)


def test_chord_statistics_hand_case():
    img = np.ones((4, 6), dtype=np.uint8)
    img[0, 0:3] = 0      # horizontal run 3; three vertical runs of 1
    img[2, 5] = 0        # run 1 both ways
    s = chord_statistics(img)
    assert s["l_h"] == pytest.approx(2.0)
    assert s["l_v"] == pytest.approx(1.0)
    assert s["eta"] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        chord_statistics(np.ones((4, 4), dtype=np.uint8))


def test_gradient_anisotropy():
    assert gradient_anisotropy(np.zeros((5, 5))) == 1.0
    stripes = np.zeros((6, 6))
    stripes[:, ::2] = 1        # columns alternate: only x differences
    assert gradient_anisotropy(stripes) > 1e6
    assert gradient_anisotropy(stripes.T) == 0.0
    img = generate_microstructure(0, 32, 2.0, 0.6).astype(float)
    assert gradient_anisotropy(img.T) == pytest.approx(1 / gradient_anisotropy(img), rel=1e-9)
