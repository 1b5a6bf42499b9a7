import numpy as np
import pytest

from trajeglish.errors import DataError
from trajeglish.geometry import AgentMeta, AgentState, corner_distance
from trajeglish.templates import (
    FitMethod,
    TemplateSet,
    pairwise_unit_distances,
    template_corners_for_dims,
    verify_separation,
)


def small_set():
    return TemplateSet(
        templates=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.2, 0.1]]),
        method=FitMethod.KDISKS,
        epsilon=0.05,
        seed=7,
        fit_stats={"overall": 0.01},
    )


def test_heading_wrapped_on_construction():
    ts = TemplateSet(np.array([[0, 0, 3 * np.pi]]), FitMethod.GRID_XYH)
    assert ts.templates[0, 2] == pytest.approx(np.pi)


def test_json_round_trip_is_byte_stable():
    ts = small_set()
    text = ts.to_json()
    back = TemplateSet.from_json(text)
    assert back.to_json() == text
    np.testing.assert_array_equal(back.templates, ts.templates)
    assert back.method == ts.method and back.epsilon == ts.epsilon and back.seed == ts.seed


def test_save_load(tmp_path):
    ts = small_set()
    path = tmp_path / "vocab.json"
    ts.save(path)
    again = TemplateSet.load(path)
    assert again.to_json() == ts.to_json()


def test_from_json_rejects_garbage():
    with pytest.raises(DataError):
        TemplateSet.from_json("{not json")
    with pytest.raises(DataError):
        TemplateSet.from_json('{"format": "something-else", "templates": []}')


def test_pairwise_distances_match_scalar_oracle():
    ts = small_set()
    d = pairwise_unit_distances(ts.templates)
    m = AgentMeta(1.0, 1.0)
    for i in range(len(ts)):
        for j in range(len(ts)):
            expect = corner_distance(
                AgentState(*ts.templates[i]), AgentState(*ts.templates[j]), m
            )
            assert d[i, j] == pytest.approx(expect, abs=1e-12)


def test_verify_separation():
    ts = small_set()
    assert verify_separation(ts, epsilon=0.05)
    assert not verify_separation(ts, epsilon=10.0)
    with pytest.raises(ValueError):
        verify_separation(TemplateSet(np.zeros((1, 3)), FitMethod.KMEANS))


def test_template_corners_per_row_dims():
    t = np.array([[1.0, 0.5, 0.3], [0.0, 0.0, 0.0]])
    lengths = np.array([2.0, 4.0])
    widths = np.array([1.0, 1.5])
    got = template_corners_for_dims(t, lengths, widths)  # (2, K, 4, 2)
    from trajeglish.geometry import corners_arr

    for b in range(2):
        expect = corners_arr(t, lengths[b], widths[b])
        np.testing.assert_allclose(got[b], expect, atol=1e-12)


def test_corner_cache_immutable():
    ts = small_set()
    c1 = ts.corners(2.0, 1.0)
    c2 = ts.corners(2.0, 1.0)
    assert c1 is c2
    with pytest.raises(ValueError):
        c1[0, 0, 0] = 99.0
