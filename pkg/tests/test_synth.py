"""Scene generator tests: shapes, trajectories, emission statistics, datasets."""

import dataclasses

import numpy as np
import pytest

from dvspipe.events import SensorGeometry, read_event_file, validate_events
from dvspipe.filter import FilterConfig, filter_pipeline
from dvspipe.synth import (
    STEP_US,
    LabeledClip,
    SceneSpec,
    boundary_pixels,
    build_dataset,
    gen_clip,
    gen_events,
    load_labels,
    save_dataset,
    shape_mask,
    trajectory_offsets,
)

GEO = SensorGeometry()


def spec(**kw):
    return dataclasses.replace(SceneSpec(), **kw)


class TestSceneSpec:
    def test_defaults(self):
        s = SceneSpec()
        assert s.kind == "pedestrian"
        assert s.duration == 1_000_000
        assert (s.edge_rate, s.noise_rate) == (400.0, 16.0)

    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "car"},
            {"duration": 0},
            {"edge_rate": -1.0},
            {"noise_rate": -0.5},
            {"height": 2.0},
        ],
    )
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            spec(**kw)


class TestShapeMask:
    def test_none_is_empty(self):
        assert shape_mask("none", 100).size == 0

    def test_box_dimensions(self):
        mask = shape_mask("box", 160)
        assert mask.shape == (80, 80)
        assert mask.all()

    def test_pedestrian_proportions(self):
        mask = shape_mask("pedestrian", 160)
        assert mask.shape == (160, 53)
        assert mask.any()
        widths = mask.sum(axis=1)
        # head rows are narrower than the torso's widest row
        assert widths[:20].max() < widths.max()
        assert widths.max() == 53

    def test_rows_are_solid_intervals(self):
        mask = shape_mask("pedestrian", 80)
        for row in mask:
            xs = np.nonzero(row)[0]
            if xs.size:
                assert xs[-1] - xs[0] + 1 == xs.size


class TestBoundaryPixels:
    def test_empty_mask(self):
        ys, xs, normals = boundary_pixels(np.zeros((0, 0), dtype=bool))
        assert ys.size == xs.size == 0 and normals.shape == (0, 2)

    def test_solid_square_ring(self):
        ys, xs, normals = boundary_pixels(np.ones((4, 4), dtype=bool))
        assert ys.size == 12  # perimeter minus nothing: 4*4 - 2*2 interior
        ring = set(zip(ys.tolist(), xs.tolist()))
        assert (1, 1) not in ring and (0, 0) in ring

    def test_corner_normals_point_outward(self):
        ys, xs, normals = boundary_pixels(np.ones((3, 3), dtype=bool))
        table = {(y, x): tuple(n) for y, x, n in zip(ys, xs, normals.tolist())}
        assert table[(0, 0)] == (-1, -1)
        assert table[(2, 2)] == (1, 1)
        assert table[(0, 1)] == (0, -1)  # top edge, outward is up
        assert table[(1, 0)] == (-1, 0)  # left edge, outward is left

    def test_single_pixel_has_zero_normal(self):
        ys, xs, normals = boundary_pixels(np.ones((1, 1), dtype=bool))
        assert ys.tolist() == [0] and xs.tolist() == [0]
        assert normals.tolist() == [[0, 0]]

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(30)
        for _ in range(20):
            mask = rng.random((10, 12)) < 0.5
            ys, xs, normals = boundary_pixels(mask)
            got = {(y, x): tuple(n) for y, x, n in zip(ys, xs, normals.tolist())}
            expected = {}
            for y in range(10):
                for x in range(12):
                    if not mask[y, x]:
                        continue
                    nbrs = {}
                    for key, (dy, dx) in {
                        "up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)
                    }.items():
                        yy, xx = y + dy, x + dx
                        nbrs[key] = not (0 <= yy < 10 and 0 <= xx < 12 and mask[yy, xx])
                    if any(nbrs.values()):
                        expected[(y, x)] = (
                            int(nbrs["right"]) - int(nbrs["left"]),
                            int(nbrs["down"]) - int(nbrs["up"]),
                        )
            assert got == expected


class TestTrajectory:
    def test_offsets_keep_shape_inside(self):
        s = spec(kind="box", height=80, velocity=(900.0, 700.0), duration=500_000)
        offsets = trajectory_offsets(s)
        mask = shape_mask("box", 80)
        assert offsets.shape == ((500_000 + STEP_US - 1) // STEP_US, 2)
        assert offsets[:, 0].min() >= 0 and offsets[:, 1].min() >= 0
        assert offsets[:, 0].max() <= GEO.width - mask.shape[1]
        assert offsets[:, 1].max() <= GEO.height - mask.shape[0]

    def test_bouncing_object_actually_moves(self):
        s = spec(kind="box", height=80, velocity=(900.0, 700.0), duration=500_000)
        offsets = trajectory_offsets(s)
        assert len(np.unique(offsets, axis=0)) > 10

    def test_static_object_stays_put(self):
        s = spec(kind="box", height=40, velocity=(0.0, 0.0), duration=60_000)
        offsets = trajectory_offsets(s)
        assert np.all(offsets == offsets[0])

    def test_oversized_shape_rejected(self):
        with pytest.raises(ValueError):
            trajectory_offsets(spec(kind="box", height=900.0))


class TestGenEvents:
    def test_deterministic(self):
        s = spec(kind="box", height=20, duration=50_000, noise_rate=5.0, seed=3)
        assert np.array_equal(gen_events(s), gen_events(s))

    def test_seed_changes_stream(self):
        a = gen_events(spec(kind="box", height=20, duration=50_000, seed=0))
        b = gen_events(spec(kind="box", height=20, duration=50_000, seed=1))
        assert not np.array_equal(a, b)

    def test_sorted_and_in_bounds(self):
        s = spec(kind="box", height=80, velocity=(900.0, 700.0), duration=200_000, seed=2)
        events = gen_events(s)
        validate_events(events, GEO)  # raises on disorder or range violations
        assert events["t"].max() < s.duration

    def test_static_shape_emits_nothing(self):
        s = spec(kind="box", height=40, velocity=(0.0, 0.0), noise_rate=0.0)
        assert gen_events(s).size == 0

    def test_empty_scene(self):
        assert gen_events(spec(kind="none", noise_rate=0.0)).size == 0

    def test_noise_only_count_near_expectation(self):
        s = spec(kind="none", noise_rate=8.0, duration=100_000, seed=4)
        events = gen_events(s)
        mu = 8.0 * GEO.npixels * 0.1
        assert abs(events.size - mu) <= 4 * np.sqrt(mu)
        # both polarities, roughly balanced
        p1 = (events["p"] == 1).mean()
        assert 0.45 < p1 < 0.55

    def test_object_count_near_expectation(self):
        # constant velocity, no bounce: every step moves, so the expected
        # count is n_steps * n_boundary_pixels * edge_rate * step_seconds
        s = spec(
            kind="box", height=40, start=(100.0, 100.0), velocity=(100.0, 0.0),
            duration=120_000, edge_rate=400.0, noise_rate=0.0, seed=5,
        )
        events = gen_events(s)
        n_steps = 120_000 // STEP_US
        n_boundary = boundary_pixels(shape_mask("box", 40))[0].size
        mu = n_steps * n_boundary * 400.0 * (STEP_US / 1e6)
        assert abs(events.size - mu) <= 4 * np.sqrt(mu)

    def test_polarity_split_leading_vs_trailing(self):
        # box gliding right: left column trails (NEG), the rest of the
        # boundary leads or ties (POS)
        s = spec(
            kind="box", height=40, start=(100.0, 100.0), velocity=(100.0, 0.0),
            duration=30_000, edge_rate=2000.0, noise_rate=0.0, seed=6,
        )
        events = gen_events(s)
        first = events[events["t"] < STEP_US]
        assert first.size > 10
        assert np.all(first["x"] >= 90) and np.all(first["x"] <= 109)
        left = first[first["x"] == 90]
        rest = first[first["x"] > 90]
        assert left.size and rest.size
        assert np.all(left["p"] == 0)
        assert np.all(rest["p"] == 1)

    def test_zero_edge_rate_leaves_only_noise(self):
        s = spec(kind="box", height=20, edge_rate=0.0, noise_rate=2.0, duration=50_000)
        events = gen_events(s)
        assert events.size > 0
        # noise is uniform: no concentration at the object's footprint
        footprint = (events["x"] >= 90) & (events["x"] <= 110)
        assert footprint.mean() < 0.1


class TestNoiseIsolation:
    @pytest.mark.parametrize("rate,seed", [(2.0, 0), (5.0, 1)])
    def test_pure_noise_never_triggers_default_filter(self, rate, seed):
        s = spec(kind="none", noise_rate=rate, seed=seed)
        frames = filter_pipeline(gen_events(s), FilterConfig(), GEO)
        assert frames == []

    def test_default_pedestrian_clip_does_trigger(self):
        frames = filter_pipeline(gen_events(SceneSpec()), FilterConfig(), GEO)
        assert len(frames) > 10


class TestDataset:
    def test_gen_clip_labels(self):
        assert gen_clip(spec(kind="pedestrian")).label is True
        assert gen_clip(spec(kind="box", height=40)).label is False
        assert gen_clip(spec(kind="none")).label is False

    def test_clip_events_regenerate_deterministically(self):
        clip = gen_clip(spec(kind="box", height=20, duration=40_000))
        assert np.array_equal(clip.events, clip.events)
        assert clip.duration == 40_000

    def test_split_sizes(self):
        train, test = build_dataset(10, 10, seed=0)
        assert (len(train), len(test)) == (16, 4)

    def test_split_rounding_large(self):
        train, test = build_dataset(411, 410, seed=0)
        assert (len(train), len(test)) == (657, 164)

    def test_deterministic_per_seed(self):
        a_train, a_test = build_dataset(5, 5, seed=3)
        b_train, b_test = build_dataset(5, 5, seed=3)
        assert [c.spec for c in a_train] == [c.spec for c in b_train]
        assert [c.spec for c in a_test] == [c.spec for c in b_test]
        c_train, _ = build_dataset(5, 5, seed=4)
        assert [c.spec for c in a_train] != [c.spec for c in c_train]

    def test_both_classes_in_train_split(self):
        train, _ = build_dataset(20, 20, seed=0)
        labels = {c.label for c in train}
        assert labels == {True, False}

    def test_parameter_ranges(self):
        train, test = build_dataset(15, 15, seed=1)
        for clip in train + test:
            s = clip.spec
            assert 0.40 * GEO.height <= s.height <= 0.60 * GEO.height
            speed = float(np.hypot(*s.velocity))
            assert 80.0 - 1e-9 <= speed <= 200.0 + 1e-9
            assert s.kind in ("pedestrian", "box")

    def test_rejects_empty_classes(self):
        with pytest.raises(ValueError):
            build_dataset(0, 5)

    def test_save_and_reload(self, tmp_path):
        base = spec(duration=20_000, noise_rate=10.0, height=20.0)
        clips = [
            gen_clip(dataclasses.replace(base, kind="pedestrian", seed=1)),
            gen_clip(dataclasses.replace(base, kind="box", seed=2)),
            gen_clip(dataclasses.replace(base, kind="none", seed=3)),
        ]
        manifest = save_dataset(tmp_path / "ds", clips)
        rows = load_labels(manifest)
        assert [label for _, label in rows] == [True, False, False]
        for (path, _), clip in zip(rows, clips):
            geometry, events = read_event_file(path)
            assert geometry == clip.spec.geometry
            assert np.array_equal(events, clip.events)
