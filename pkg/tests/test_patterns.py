import itertools
import json

import numpy as np
import pytest

from patconv.patterns import (ALL_PATTERNS, CENTER, ConnectivityMask, Pattern,
                              PatternError, PatternSet, build_pattern_set,
                              natural_pattern, project_connectivity,
                              project_pattern, project_pattern_layer)
from patconv.tensors import LayerShape, WeightTensor


def brute_force_universe():
    """Independent enumeration of all center-keeping 4-position masks."""
    cells = [(r, c) for r in range(3) for c in range(3)]
    found = set()
    for combo in itertools.combinations(cells, 4):
        if CENTER in combo:
            found.add(tuple(sorted(combo)))
    return found


def retained_l2(kernel, positions):
    return sum(float(kernel[p]) ** 2 for p in positions)


def test_universe_has_56_patterns():
    assert len(ALL_PATTERNS) == 56
    assert {p.kept_positions for p in ALL_PATTERNS} == brute_force_universe()
    assert [p.id for p in ALL_PATTERNS] == list(range(1, 57))


def test_pattern_requires_center():
    with pytest.raises(PatternError):
        Pattern(((0, 0), (0, 1), (0, 2), (2, 2)))


def test_pattern_rejects_duplicates_and_out_of_bounds():
    with pytest.raises(PatternError):
        Pattern(((1, 1), (1, 1), (0, 0), (0, 1)))
    with pytest.raises(PatternError):
        Pattern(((1, 1), (0, 0), (0, 1), (3, 0)))


def test_natural_pattern_forced_by_magnitudes():
    kernel = np.array([[8.0, -7.0, 6.0],
                       [1.0, 0.5, -0.25],
                       [0.0, 0.75, 0.125]])
    assert natural_pattern(kernel).kept_positions == \
        ((0, 0), (0, 1), (0, 2), (1, 1))


def test_natural_pattern_all_equal_breaks_ties_lexicographically():
    kernel = np.ones((3, 3))
    assert natural_pattern(kernel).kept_positions == \
        ((0, 0), (0, 1), (0, 2), (1, 1))


def test_natural_pattern_always_contains_center(rng):
    for _ in range(200):
        kernel = rng.normal(size=(3, 3))
        assert CENTER in natural_pattern(kernel).kept_positions


def test_natural_pattern_matches_brute_force(rng):
    # best-by-retained-L2 over all 56 candidates must agree, 1000 kernels
    for _ in range(1000):
        kernel = rng.normal(size=(3, 3))
        got = natural_pattern(kernel)
        want = max(ALL_PATTERNS,
                   key=lambda p: retained_l2(kernel, p.kept_positions))
        assert retained_l2(kernel, got.kept_positions) == pytest.approx(
            retained_l2(kernel, want.kept_positions))


def test_natural_pattern_rejects_wrong_size():
    with pytest.raises(PatternError):
        natural_pattern(np.ones((2, 2)))


def _model_from_kernels(kernels):
    """One-layer model whose (single-filter-column) kernels are given."""
    data = np.stack(kernels)[:, None, :, :]
    shape = LayerShape(3, 3, 1, len(kernels), 1, 8, 8)
    return [WeightTensor.zero_bias(shape, data.astype(np.float32))]


def kernel_realizing(pattern):
    """Kernel whose 4 largest magnitudes sit exactly on the pattern."""
    kernel = np.full((3, 3), 0.01)
    for i, pos in enumerate(pattern.kept_positions):
        kernel[pos] = 5.0 + i
    return kernel


def test_build_pattern_set_single_shared_pattern():
    kernels = [kernel_realizing(ALL_PATTERNS[13])] * 6
    ps = build_pattern_set(_model_from_kernels(kernels), k=1)
    assert ps.k == 1
    assert ps.patterns[0].kept_positions == ALL_PATTERNS[13].kept_positions


def test_build_pattern_set_k56_returns_everything():
    kernels = [kernel_realizing(ALL_PATTERNS[3])] * 4
    ps = build_pattern_set(_model_from_kernels(kernels), k=56)
    assert ps.k == 56
    assert {p.kept_positions for p in ps} == {p.kept_positions for p in ALL_PATTERNS}
    # the observed pattern leads, everything else follows canonical order
    assert ps.patterns[0].kept_positions == ALL_PATTERNS[3].kept_positions


def test_build_pattern_set_planted_frequencies():
    a, b, c = ALL_PATTERNS[10], ALL_PATTERNS[20], ALL_PATTERNS[30]
    kernels = [kernel_realizing(a)] * 50 + [kernel_realizing(b)] * 30 \
        + [kernel_realizing(c)] * 20
    ps = build_pattern_set(_model_from_kernels(kernels), k=2)
    assert [p.kept_positions for p in ps] == [a.kept_positions, b.kept_positions]


def test_build_pattern_set_requires_3x3_kernels():
    shape = LayerShape(1, 1, 2, 2, 1, 4, 4)
    model = [WeightTensor.zero_bias(shape, np.ones((2, 2, 1, 1)))]
    with pytest.raises(PatternError):
        build_pattern_set(model, k=4)


def test_project_pattern_zero_kernel_takes_lowest_id():
    ps = PatternSet(ALL_PATTERNS[:8])
    pid, projected = project_pattern(np.zeros((3, 3)), ps)
    assert pid == 1
    assert np.all(projected == 0.0)


def test_project_pattern_fixed_point():
    ps = PatternSet(ALL_PATTERNS[:8])
    target = ps[3]
    kernel = np.zeros((3, 3))
    for i, pos in enumerate(target.kept_positions):
        kernel[pos] = 1.0 + i
    pid, projected = project_pattern(kernel, ps)
    assert pid == 3
    np.testing.assert_array_equal(projected, kernel)


def test_project_pattern_matches_brute_force(rng):
    ps = PatternSet(tuple(ALL_PATTERNS[i] for i in (0, 5, 11, 19, 28, 37, 45, 55)))
    for _ in range(500):
        kernel = rng.normal(size=(3, 3))
        pid, projected = project_pattern(kernel, ps)
        scores = [retained_l2(kernel, p.kept_positions) for p in ps]
        assert scores[pid - 1] == pytest.approx(max(scores))
        # projection error is minimal over the whole candidate set
        err = np.sum((kernel - projected) ** 2)
        for p in ps:
            masked = np.where(p.mask(), kernel, 0.0)
            assert err <= np.sum((kernel - masked) ** 2) + 1e-12


def test_project_pattern_idempotent(rng):
    ps = PatternSet(ALL_PATTERNS[:8])
    for _ in range(100):
        kernel = rng.normal(size=(3, 3))
        pid1, once = project_pattern(kernel, ps)
        pid2, twice = project_pattern(once, ps)
        assert pid1 == pid2
        np.testing.assert_array_equal(once, twice)


def test_project_pattern_layer_agrees_with_scalar(rng):
    ps = PatternSet(ALL_PATTERNS[:8])
    data = rng.normal(size=(4, 3, 3, 3))
    ids, projected = project_pattern_layer(data, ps)
    for oc in range(4):
        for ic in range(3):
            pid, proj = project_pattern(data[oc, ic], ps)
            assert ids[oc, ic] == pid
            np.testing.assert_allclose(projected[oc, ic], proj)


def _random_weights(rng, oc=3, ic=4):
    shape = LayerShape(3, 3, ic, oc, 1, 8, 8)
    data = rng.normal(size=(oc, ic, 3, 3)).astype(np.float32)
    return WeightTensor.zero_bias(shape, data)


def test_project_connectivity_keep_all(rng):
    w = _random_weights(rng)
    mask = project_connectivity(w, alpha=12)
    assert mask.kept.all()


def test_project_connectivity_single_nonzero():
    shape = LayerShape(3, 3, 2, 2, 1, 8, 8)
    data = np.zeros((2, 2, 3, 3), dtype=np.float32)
    data[1, 0, 1, 1] = 2.0
    mask = project_connectivity(WeightTensor.zero_bias(shape, data), alpha=1)
    assert mask.kept[1, 0]
    assert mask.kept.sum() == 1


def test_project_connectivity_matches_sort_oracle(rng):
    for _ in range(50):
        w = _random_weights(rng)
        mask = project_connectivity(w, alpha=7)
        norms = np.sqrt((w.data.astype(np.float64) ** 2).sum(axis=(2, 3)))
        ranked = sorted(((oc, ic) for oc in range(3) for ic in range(4)),
                        key=lambda p: (-norms[p], p))
        want = set(ranked[:7])
        got = {tuple(p) for p in np.argwhere(mask.kept)}
        assert got == want
        assert mask.kept.sum() == 7


def test_project_connectivity_alpha_out_of_range(rng):
    w = _random_weights(rng)
    with pytest.raises(ValueError):
        project_connectivity(w, alpha=0)
    with pytest.raises(ValueError):
        project_connectivity(w, alpha=13)


def test_connectivity_mask_enforces_budget():
    with pytest.raises(ValueError):
        ConnectivityMask(np.ones((2, 2), dtype=bool), alpha=3)


def test_pattern_set_json_roundtrip_and_canonical():
    ps = PatternSet(tuple(ALL_PATTERNS[i] for i in (4, 1, 44)))
    text = ps.to_json()
    assert " " not in text
    back = PatternSet.from_json(text)
    assert [p.kept_positions for p in back] == [p.kept_positions for p in ps]
    assert back.to_json() == text
    payload = json.loads(text)
    assert all(len(entry) == 4 for entry in payload)
    assert all(entry == sorted(entry) for entry in payload)


def test_pattern_set_rejects_duplicates():
    with pytest.raises(PatternError):
        PatternSet((ALL_PATTERNS[0], ALL_PATTERNS[0]))


def test_pattern_set_ids_are_positional():
    ps = PatternSet((ALL_PATTERNS[30], ALL_PATTERNS[2]))
    assert [p.id for p in ps] == [1, 2]
