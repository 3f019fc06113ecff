import itertools
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfield.delta import (
    DeltaScores,
    Mask,
    clustering_cost,
    consolidate_masks,
    delta_scores,
    kmedoids_query_points,
    mask_iou,
    read_pgm,
    threshold_mask,
    write_pgm,
)
from latentfield.diffusion import IdentityDenoiser, OracleEditDenoiser, make_schedule
from latentfield.errors import ValidationError
from latentfield.render import RenderConfig
from latentfield.scene import LatentImage, SceneSpec, synth_volume

SCHED = make_schedule()


def oracle_mask(region, direction=(0.0, 0.6, 0.0, 0.8), seed=0):
    z = LatentImage(np.random.default_rng(seed).normal(size=region.shape + (4,)))
    den = OracleEditDenoiser(region, direction, 1.0, SCHED)
    return threshold_mask(delta_scores(den, z, z, "edit", SCHED, seed), 0.45)


def regions(h=12, w=10):
    yy, xx = np.mgrid[:h, :w]
    one = np.zeros((h, w), bool)
    one[5, 7] = True
    rect = (yy >= 2) & (yy < 6) & (xx >= 3) & (xx < 9)
    disc = (yy - 6) ** 2 + (xx - 4) ** 2 <= 9
    ring = ((yy - 6) ** 2 + (xx - 5) ** 2 <= 16) & ((yy - 6) ** 2 + (xx - 5) ** 2 >= 5)
    split = (xx < 2) | (yy > 9)
    full = np.ones((h, w), bool)
    return {"pixel": one, "rect": rect, "disc": disc, "ring": ring, "split": split, "full": full}


def test_types_validate():
    with pytest.raises(ValidationError):
        DeltaScores(-np.ones((2, 2, 4)))
    with pytest.raises(ValidationError):
        DeltaScores(np.ones((2, 2, 3)))
    with pytest.raises(ValidationError):
        Mask(np.full((2, 2), 0.5))
    m = Mask(np.eye(3))
    assert m.data.dtype == np.uint8 and m.area_frac == pytest.approx(1 / 3)


def test_identical_predictions_give_zero_scores_and_empty_mask(rng):
    z = LatentImage(rng.normal(size=(8, 8, 4)))
    s = delta_scores(IdentityDenoiser(SCHED), z, z, "make it blue", SCHED, 3)
    assert np.all(s.data == 0) and s.delta_t_used == 0.75
    assert threshold_mask(s).data.sum() == 0


def test_oracle_scores_are_the_direction_inside_only(rng):
    region = regions()["ring"]
    d = np.array([0.5, -0.5, 0.5, -0.5])
    z = LatentImage(rng.normal(size=region.shape + (4,)), view_id=4)
    s = delta_scores(OracleEditDenoiser(region, d, 1.0, SCHED), z, z, "p", SCHED, 0)
    np.testing.assert_allclose(s.data[region], np.broadcast_to(np.abs(d), s.data[region].shape), atol=1e-12)
    assert np.all(s.data[~region] == 0) and s.view_id == 4


def test_both_calls_see_the_same_noised_latent(rng):
    seen = []

    def den(z_t, t, image, text):
        seen.append((z_t.copy(), t))
        return np.zeros_like(z_t)

    z = rng.normal(size=(4, 4, 4))
    delta_scores(den, z, LatentImage(z), "p", SCHED, 7)
    assert len(seen) == 2 and np.array_equal(seen[0][0], seen[1][0]) and seen[0][1] == seen[1][1] == 750


@pytest.mark.parametrize("name", list(regions()))
def test_oracle_regions_recovered_exactly(name):
    region = regions()[name]
    m = oracle_mask(region)
    assert mask_iou(m, region) == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 7, 4), elements=st.floats(0, 10)))
def test_threshold_monotone(data):
    s = DeltaScores(data)
    masks = [threshold_mask(s, mu).as_bool() for mu in np.round(np.arange(0.1, 0.95, 0.1), 2)]
    for lo, hi in zip(masks, masks[1:]):
        assert np.all(hi <= lo)


def test_top_threshold_keeps_the_maximum_level_set(rng):
    data = rng.random((5, 5, 4))
    data[1, 2] = 2.0
    data[3, 4] = 2.0
    m = threshold_mask(DeltaScores(data), 1.0).as_bool()
    assert set(zip(*np.nonzero(m))) == {(1, 2), (3, 4)}


def test_constant_maps():
    assert threshold_mask(DeltaScores(np.zeros((3, 3, 4)))).data.sum() == 0
    # a uniformly positive map means the whole frame changed
    assert threshold_mask(DeltaScores(np.full((3, 3, 4), 0.2))).data.all()


def test_threshold_range_checked():
    with pytest.raises(ValidationError):
        threshold_mask(DeltaScores(np.zeros((2, 2, 4))), 1.5)


def test_masking_path_is_deterministic(rng):
    region = regions()["disc"]
    a, b = oracle_mask(region, seed=5), oracle_mask(region, seed=5)
    assert np.array_equal(a.data, b.data)


# k-medoids ------------------------------------------------------------------


def brute_medoid(points):
    dist = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1)).sum(1)
    return points[np.argmin(dist)]


def test_single_medoid_of_disc_is_its_centre():
    yy, xx = np.mgrid[:21, :21]
    disc = (yy - 9) ** 2 + (xx - 11) ** 2 <= 36
    (med,) = kmedoids_query_points(Mask(disc.astype(np.uint8)), 1)
    assert np.abs(med - [9, 11]).max() <= 1
    assert np.array_equal(med, brute_medoid(np.argwhere(disc)))


def test_k_equal_to_count_returns_all_positives(rng):
    m = (rng.random((6, 6)) < 0.3).astype(np.uint8)
    pts = kmedoids_query_points(Mask(m), int(m.sum()))
    assert sorted(map(tuple, pts)) == sorted(map(tuple, np.argwhere(m)))


@pytest.mark.parametrize("seed", range(4))
def test_two_medoids_on_a_line_are_optimal(seed):
    rng = np.random.default_rng(seed)
    cols = np.sort(rng.choice(200, size=int(rng.integers(20, 60)), replace=False))
    m = np.zeros((1, 200), np.uint8)
    m[0, cols] = 1
    pts = np.argwhere(m)
    best = min(clustering_cost(pts, pts[[i, j]]) for i, j in itertools.combinations(range(len(pts)), 2))
    got = kmedoids_query_points(Mask(m), 2, seed)
    assert clustering_cost(pts, got) == pytest.approx(best, abs=1e-9)


def test_too_few_positives():
    with pytest.raises(ValidationError):
        kmedoids_query_points(Mask(np.eye(3, dtype=np.uint8)), 4)


def test_subsampled_clustering_is_seeded():
    m = Mask(np.ones((60, 60), np.uint8))
    a = kmedoids_query_points(m, 3, seed=2, max_points=300)
    b = kmedoids_query_points(m, 3, seed=2, max_points=300)
    assert np.array_equal(a, b) and len(a) == 3


# consolidation --------------------------------------------------------------


class VolumeField:
    """The analytic box volume sampled pointwise, standing in for a perfectly fitted field."""

    def __init__(self, volume):
        self.blocks = volume.blocks

    def __call__(self, pos, dirs):
        p = pos.numpy()
        sigma = np.zeros(len(p))
        z = np.zeros((len(p), 4))
        for b in self.blocks:
            inside = np.all((p >= b.lo) & (p <= b.hi), axis=1)
            sigma[inside] = b.sigma
            z[inside] = b.latent
        return torch.as_tensor(z), torch.as_tensor(sigma)


@pytest.fixture(scope="module")
def box_field():
    return VolumeField(synth_volume(SceneSpec()))


CFG = RenderConfig(samples_per_ray=128)


def roof_masks(ds):
    return [Mask((r == 1).astype(np.uint8)) for r in ds.region_labels]


def test_missing_view_is_filled_by_reprojection(box8, box_field):
    masks = roof_masks(box8)
    for empty in (1, 6):
        given = list(masks)
        given[empty] = Mask(np.zeros_like(masks[empty].data))
        out = consolidate_masks(given, box8, box_field, render_cfg=CFG)
        assert mask_iou(out[empty], box8.region_labels[empty] == 1) >= 0.8


def test_consistent_masks_are_a_fixed_point(box8, box_field):
    masks = roof_masks(box8)
    out = consolidate_masks(masks, box8, box_field, render_cfg=CFG)
    for a, b in zip(out, masks):
        assert np.array_equal(a.data, b.data)


def test_consolidation_never_shrinks(box8, box_field, rng):
    masks = [Mask((rng.random((48, 48)) < 0.05).astype(np.uint8)) for _ in range(box8.n_views)]
    out = consolidate_masks(masks, box8, box_field, render_cfg=CFG)
    for a, b in zip(out, masks):
        assert np.all(a.data >= b.data) and set(np.unique(a.data)) <= {0, 1}


def test_consolidation_needs_one_mask_per_view(box8, box_field):
    with pytest.raises(ValidationError):
        consolidate_masks(roof_masks(box8)[:3], box8, box_field)


def test_single_view_is_returned_unchanged():
    m = Mask(np.eye(4, dtype=np.uint8))
    out = consolidate_masks([m], SimpleNamespace(n_views=1), None)
    assert np.array_equal(out[0].data, m.data)


def test_pgm_round_trip(tmp_path, rng):
    m = Mask((rng.random((7, 9)) < 0.5).astype(np.uint8))
    p = write_pgm(m, tmp_path / "m.pgm")
    assert p.read_bytes().startswith(b"P5\n9 7\n255\n")
    assert set(np.unique(np.frombuffer(p.read_bytes()[-63:], np.uint8))) <= {0, 255}
    assert np.array_equal(read_pgm(p).data, m.data)
