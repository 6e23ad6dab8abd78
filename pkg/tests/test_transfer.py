"""
Neighbour voting, keypoint transfer and the transfer metrics.
"""

import logging

import numpy as np
import pytest

from semtemplate.core.errors import ConfigurationError, DomainError
from semtemplate.geometry.sample import KeypointSet
from semtemplate.transfer.correspondence import (
    CorrespondenceModel,
    correspondence_uncertainty,
    label_errors,
    split_uncertainty,
    transfer_attributes,
    transfer_keypoints,
    vote_attributes,
)
from semtemplate.transfer.metrics import TransferReport, miou, part_iou, pck


def test_two_neighbour_vote_prefers_closer_label():
    source = np.array([[1.0, 0.0, 0.0], [np.sqrt(3.0), 0.0, 0.0]])
    labels = np.array([0, 1])
    assert vote_attributes(source, labels, np.zeros((1, 3)), n=2).tolist() == [0]


def test_many_far_votes_outweigh_one_near_vote():
    source = np.array([[1.0, 0.0, 0.0], [0.0, 1.1, 0.0], [0.0, -1.1, 0.0], [0.0, 0.0, 1.1]])
    labels = np.array([7, 3, 3, 3])
    assert vote_attributes(source, labels, np.zeros((1, 3)), n=4).tolist() == [3]


def test_single_neighbour_copies_nearest(rng):
    source = rng.normal(size=(40, 3))
    labels = rng.integers(0, 4, size=40)
    target = rng.normal(size=(15, 3))

    voted = vote_attributes(source, labels, target, n=1)

    nearest = np.argmin(((target[:, None] - source[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(voted, labels[nearest])


def test_vote_ties_go_to_smallest_label():
    source = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    assert vote_attributes(source, np.array([5, 2]), np.zeros((1, 3)), n=2).tolist() == [2]


def test_vote_neighbours_tied_at_the_last_slot_are_lowest_indices():
    ring = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]])
    for labels, expected in (([0, 0, 1, 1], 0), ([1, 1, 0, 0], 1), ([1, 0, 1, 0], 0)):
        voted = vote_attributes(ring, np.array(labels), np.zeros((1, 3)), n=2)
        assert voted.tolist() == [expected]
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    np.testing.assert_allclose(
        vote_attributes(ring, colors, np.zeros((1, 3)), n=2, categorical=False), [[0.5, 0.5, 0.0]]
    )


def test_vote_is_permutation_invariant(rng):
    source = rng.normal(size=(30, 3))
    labels = rng.integers(0, 3, size=30)
    target = rng.normal(size=(10, 3))
    perm = rng.permutation(30)

    np.testing.assert_array_equal(
        vote_attributes(source, labels, target, n=5),
        vote_attributes(source[perm], labels[perm], target, n=5),
    )


def test_continuous_vote_is_weighted_mean():
    source = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    voted = vote_attributes(source, colors, np.zeros((1, 3)), n=2, categorical=False)

    np.testing.assert_allclose(voted, [[0.8, 0.0, 0.2]])


def test_vote_clamps_neighbour_count(caplog):
    source = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        voted = vote_attributes(source, np.array([4, 4]), np.ones((3, 3)), n=10)
    assert voted.tolist() == [4, 4, 4]
    assert "clamping" in caplog.text


def test_vote_errors():
    with pytest.raises(DomainError):
        vote_attributes(np.zeros((0, 3)), np.zeros(0), np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        vote_attributes(np.zeros((2, 3)), np.zeros(3), np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        vote_attributes(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 3)), n=0)
    assert vote_attributes(np.zeros((2, 3)), np.zeros(2), np.zeros((0, 3))).shape == (0,)


# Transfer through the template ----------------------------------------------

@pytest.fixture
def still_corr(tiny_model, still_params):
    return CorrespondenceModel(tiny_model, still_params(tiny_model, tiny_model.init_params(0)))


def test_still_model_does_not_move_points(still_corr, spheres):
    deformed = still_corr.deform_shape(spheres[0], still_corr.code(0))
    np.testing.assert_array_equal(deformed.deformed, spheres[0].surface)


def test_self_transfer_reproduces_labels(still_corr, spheres):
    shape = still_corr.deform_shape(spheres[0], still_corr.code(0))

    result = transfer_attributes(shape, spheres[0].labels, shape, n=10)

    np.testing.assert_array_equal(result.values, spheres[0].labels)
    np.testing.assert_allclose(result.uncertainty, 0.0)
    assert result.neighbors == 10


def test_pooled_sources(still_corr, spheres):
    shapes = [still_corr.deform_shape(s, still_corr.code(i)) for i, s in enumerate(spheres[:2])]
    target = still_corr.deform_shape(spheres[2], still_corr.code(2))

    result = transfer_attributes(shapes, [s.labels for s in spheres[:2]], target, n=3)

    assert result.values.shape == (spheres[2].n_surface,)
    assert set(result.values.tolist()) <= {0, 1}
    assert np.all((result.uncertainty >= 0.0) & (result.uncertainty <= 1.0))
    with pytest.raises(ConfigurationError):
        transfer_attributes(shapes, [spheres[0].labels], target)
    with pytest.raises(DomainError):
        transfer_attributes([], [], target)


def test_keypoints_land_on_target_surface(still_corr, spheres):
    source = still_corr.deform_shape(spheres[0], still_corr.code(0))
    target = still_corr.deform_shape(spheres[1], still_corr.code(1))
    keypoints = spheres[0].keypoints

    moved = transfer_keypoints(keypoints, source, target, still_corr)

    assert moved.names == keypoints.names
    nearest = np.argmin(((keypoints.points[:, None] - spheres[1].surface[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(moved.points, spheres[1].surface[nearest])
    assert len(transfer_keypoints(KeypointSet(), source, target, still_corr)) == 0


def test_uncertainty_against_itself_is_zero(still_corr, spheres):
    shape = still_corr.deform_shape(spheres[3], still_corr.code(3))
    np.testing.assert_allclose(correspondence_uncertainty([shape], shape, gamma=10.0), 0.0)


def test_uncertainty_split():
    u = np.array([0.1, 0.3, 0.9])
    right, wrong = split_uncertainty(u, label_errors(np.array([1, 1, 0]), np.array([1, 1, 1])))
    assert right == pytest.approx(0.2)
    assert wrong == pytest.approx(0.9)
    right, wrong = split_uncertainty(u, np.zeros(3, dtype=bool))
    assert np.isnan(wrong)
    assert label_errors(np.array([1]), None) is None


# Metrics -------------------------------------------------------------------

def keypoints(points) -> KeypointSet:
    points = np.asarray(points, dtype=float)
    return KeypointSet([f"k{i}" for i in range(len(points))], points)


def test_pck_examples():
    truth = keypoints(np.eye(4, 3))
    assert pck(truth, truth) == {0.05: 100.0, 0.1: 100.0}

    moved = truth.points.copy()
    moved[3] += [0.5, 0.0, 0.0]
    assert pck(keypoints(moved), truth, thresholds=[0.1]) == {0.1: 75.0}
    assert pck(keypoints(moved), truth, thresholds=[np.inf]) == {np.inf: 100.0}


def test_pck_is_monotone_in_threshold(rng):
    truth = keypoints(rng.normal(size=(20, 3)))
    noisy = keypoints(truth.points + 0.1 * rng.normal(size=(20, 3)))
    scores = pck(noisy, truth, thresholds=[0.01, 0.05, 0.1, 0.2, 0.5])
    values = [scores[t] for t in sorted(scores)]
    assert values == sorted(values)


def test_pck_uses_shared_names(caplog):
    truth = KeypointSet(["a", "b"], np.zeros((2, 3)))
    predicted = KeypointSet(["b"], np.zeros((1, 3)))
    with caplog.at_level(logging.WARNING):
        assert pck(predicted, truth, thresholds=[0.1]) == {0.1: 100.0}
    assert "no prediction" in caplog.text
    with pytest.raises(DomainError):
        pck(KeypointSet(["c"], np.zeros((1, 3))), truth)


def test_iou_examples():
    labels = np.array([0, 0, 1, 1, 2])
    assert miou(labels, labels, 3) == 1.0
    assert miou(np.array([0, 0]), np.array([1, 1]), 2) == 0.0
    assert part_iou(np.array([0, 0, 1]), np.array([1, 0, 0]), 2)[0] == pytest.approx(1 / 3)


def test_iou_skips_absent_parts_and_ignores_relabelling(rng):
    truth = rng.integers(0, 3, size=50)
    pred = truth.copy()
    pred[:10] = rng.integers(0, 3, size=10)

    ious = part_iou(pred, truth, 5)
    assert set(ious) <= {0, 1, 2}

    swap = np.array([1, 0, 2])
    assert miou(swap[pred], swap[truth], 3) == pytest.approx(miou(pred, truth, 3))
    with pytest.raises(DomainError):
        miou(np.array([3]), np.array([3]), 2)


def test_report_validates_ranges():
    report = TransferReport(pck={0.05: 50.0}, iou={0: 0.5, 1: 1.0}, uncertainty=np.array([0.2, 0.4]))
    assert report.miou == pytest.approx(0.75)
    assert report.mean_uncertainty == pytest.approx(0.3)
    assert [name for name, _ in report.rows()] == [
        "pck_0.05", "iou_part0", "iou_part1", "miou", "uncertainty_mean",
    ]
    with pytest.raises(DomainError):
        TransferReport(pck={0.05: 101.0})
    with pytest.raises(DomainError):
        TransferReport(iou={0: -0.1})
