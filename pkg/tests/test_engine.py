import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from hypotrack.engine import (BatchResult, Candidates, Chooser, EngineConfig, HypothesisPool, PoolTooLargeError,
                              batch_windows, generate, grow_step, init_pool, link_batches,
                              max_weight_independent_set, overlap_matrix, preference_order, prune_step,
                              randomized_merge_choice, select_exact, select_greedy, stitch, track_sequence)
from hypotrack.features import BatchContext, FeatureConfig
from hypotrack.geometry import BoundingBox, Detection, Tracklet
from hypotrack.metrics import report, tracks_to_mapping
from hypotrack.oracles import _brute_force_masks, brute_force_selection
from hypotrack.scoring import OracleScorer
from hypotrack.synth import SceneSpec, synth_scene


def random_ctx(rng, n_frames=5, per_frame=(1, 3)):
    dets, k = [], 0
    for f in range(n_frames):
        for _ in range(int(rng.integers(per_frame[0], per_frame[1] + 1))):
            dets.append(Detection(f, BoundingBox(*rng.uniform([0, 0, 5, 5], [50, 50, 15, 15])), 1.0, k))
            k += 1
    return BatchContext(dets, 0, n_frames, FeatureConfig(image_width=100, image_height=100))


def hash_score(rows):
    # deterministic pseudo-random score per row
    rows = np.asarray(rows)
    return np.array([(hash(r.tobytes()) % 1000) / 1000.0 for r in rows])


def brute_force_mergers(rows, n):
    """Unions of two compatible pool rows that have exactly ``n`` detections and extend an ``n - 1`` row."""
    out = set()
    for a, b in itertools.combinations_with_replacement(rows, 2):
        ka, kb = np.sum(a >= 0), np.sum(b >= 0)
        if max(ka, kb) != n - 1:
            continue
        both = (a >= 0) & (b >= 0)
        if np.any(both & (a != b)):
            continue
        u = np.where(a >= 0, a, b)
        if np.sum(u >= 0) == n:
            out.add(tuple(u))
    return out


@given(st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_grow_step_equals_pairwise_enumeration(seed):
    rng = np.random.default_rng(seed)
    ctx = random_ctx(rng)
    pool = init_pool(ctx)
    pool.scores[:] = hash_score(pool.rows)
    cfg = EngineConfig(pruning="paper")
    for n in range(2, ctx.n_frames + 1):
        cands = grow_step(pool, n, hash_score)
        assert {tuple(r) for r in cands.rows} == brute_force_mergers(pool.rows, n)
        np.testing.assert_allclose(cands.scores, hash_score(cands.rows))
        prune_step(pool, cands, cfg)


def test_paper_pruning_keeps_best_per_source():
    ctx = random_ctx(np.random.default_rng(0), n_frames=3, per_frame=(2, 2))
    pool = init_pool(ctx)
    pool.scores[:] = 0.0
    cands = grow_step(pool, 2, hash_score)
    before = len(pool)
    kept = prune_step(pool, cands, EngineConfig())
    assert len(kept) <= len(np.unique(cands.source))
    for s in np.unique(cands.source):
        mine = cands.scores[cands.source == s]
        assert np.isclose(pool.scores[kept], mine.max()).any()
    assert len(pool) - before == len(np.unique(pool.rows[kept], axis=0))


def test_score_count_and_cutoff_pruning():
    sources = np.array([0, 0, 1, 1])
    rows = np.array([[0, 1, -1], [0, 2, -1], [3, 1, -1], [3, 2, -1]])
    scores = np.array([0.9, 0.4, 0.6, 0.55])
    ctx = random_ctx(np.random.default_rng(1), n_frames=3, per_frame=(4, 4))
    for mode, cfg, want in [
        ("score", EngineConfig(pruning="score", prune_score=0.5), {0, 2, 3}),
        ("count", EngineConfig(pruning="count", prune_count=2), {0, 2}),
        ("paper", EngineConfig(), {0, 2}),
        ("cutoff", EngineConfig(fast_cutoff=0.7), {0}),
    ]:
        pool = HypothesisPool(ctx)
        kept = prune_step(pool, Candidates(sources, rows, scores), cfg)
        assert {tuple(r) for r in pool.rows[kept]} == {tuple(rows[i]) for i in want}, mode


def test_carried_continuation_survives():
    sources = np.array([0, 0])
    rows = np.array([[0, 1, -1], [0, 2, -1]])
    ctx = random_ctx(np.random.default_rng(1), n_frames=3, per_frame=(3, 3))
    pool = HypothesisPool(ctx)
    prune_step(pool, Candidates(sources, rows, np.array([0.9, 0.1])), EngineConfig(),
               carried=[np.array([0, 2, 5])])
    assert pool.contains(rows[1]) and pool.contains(rows[0])


def test_preference_order_tie_breaks():
    rows = np.array([[3, -1], [1, -1], [1, 2], [0, -1]])
    order = preference_order(np.array([0.5, 0.5, 0.5, 0.7]), rows)
    assert list(order) == [3, 2, 1, 0]


def test_randomized_choice_distribution():
    rng = np.random.default_rng(0)
    scores = np.array([0.2, 0.5, 0.9])
    t = 3.0
    draws = np.bincount([randomized_merge_choice(scores, t, rng) for _ in range(6000)], minlength=3)
    p = np.exp(t * scores) / np.exp(t * scores).sum()
    assert chisquare(draws, 6000 * p).pvalue > 0.001
    with pytest.raises(ValueError):
        randomized_merge_choice(scores, 0.0, rng)
    # a very sharp chooser behaves like argmax
    sharp = Chooser(1e4, rng)
    assert all(sharp.pick(scores) == 2 for _ in range(50))


def test_pool_growth_is_linear_per_round():
    scene = synth_scene(SceneSpec(n_people=5, n_frames=9, seed=4))
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    ctx = BatchContext(scene.detections, 0, 9, fc)
    pool = generate(init_pool(ctx), OracleScorer(ctx, scene.gts), EngineConfig())
    for (n, _, size), (_, _, prev) in zip(pool.round_sizes[1:], pool.round_sizes):
        # at most one new hypothesis per source of the previous size
        assert size - prev <= np.count_nonzero(pool.sizes == n - 1)
    assert len(pool) <= len(ctx) * ctx.n_frames


def test_greedy_selection_is_conflict_free():
    scene = synth_scene(SceneSpec(n_people=6, n_frames=9, seed=5))
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    ctx = BatchContext(scene.detections, 0, 9, fc)
    pool = generate(init_pool(ctx), OracleScorer(ctx, scene.gts), EngineConfig())
    for rule in ("relaxed", "literal", "none"):
        cfg = EngineConfig(length_rule=rule, c_score=0.3)
        chosen = select_greedy(pool, cfg)
        ov = overlap_matrix(ctx.rows_to_boxes(pool.rows[chosen]))
        np.fill_diagonal(ov, 0)
        assert np.all(ov <= cfg.c_iou)
        assert np.all(pool.scores[chosen] >= cfg.c_score)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_mwis_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 11))
    w = rng.uniform(0.1, 1.0, p)
    c = rng.random((p, p)) < 0.3
    c = np.triu(c, 1)
    c = c | c.T
    sub = max_weight_independent_set(w, c)
    assert not any(c[a, b] for a, b in itertools.combinations(sub, 2))
    assert w[sub].sum() == pytest.approx(_brute_force_masks(w, c))
    assert w[sub].sum() == pytest.approx(brute_force_selection(w, c)[0])


def test_exact_limit():
    rng = np.random.default_rng(3)
    dets = [Detection(0, BoundingBox(0, 0, 10, 10), 1.0, k) for k in range(4)]
    ctx = BatchContext(dets, 0, 1, FeatureConfig(image_width=100, image_height=100))
    pool = init_pool(ctx)
    pool.scores[:] = rng.uniform(0.7, 1.0, 4)
    assert len(select_exact(pool, EngineConfig())) == 1
    with pytest.raises(PoolTooLargeError):
        select_exact(pool, EngineConfig(exact_limit=3))


def test_batch_windows_cover_sequence():
    cfg = EngineConfig(batch_frames=9)
    assert batch_windows(5, cfg) == [(0, 5)]
    assert batch_windows(0, cfg) == []
    w = batch_windows(20, cfg)
    assert w[0] == (0, 9) and w[-1][0] + w[-1][1] == 20
    assert all(b[0] - a[0] == 3 for a, b in zip(w, w[1:]))


def tl(ids, n, start=0, x=0.0):
    boxes = np.zeros((n, 4))
    out = [None] * n
    for f, d in ids.items():
        boxes[f] = [x, 0, 10, 10]
        out[f] = d
    return Tracklet(boxes, tuple(out))


def test_link_requires_majority():
    prev = BatchResult(0, 6, [tl({f: 10 + f for f in range(6)}, 6)])
    same = BatchResult(3, 6, [tl({0: 13, 1: 14, 2: 15}, 6)])
    assert link_batches(prev, same) == {0: 0}
    half = BatchResult(3, 6, [tl({0: 13, 1: 99, 2: 98, 3: 97}, 6)])
    assert link_batches(prev, half) == {}


def test_stitch_ownership_midpoint():
    a = BatchResult(0, 6, [tl({f: 10 + f for f in range(6)}, 6, x=0.0)])
    b = BatchResult(3, 6, [tl({0: 13, 1: 14, 2: 15, 3: 40, 4: 41, 5: 42}, 6, x=1.0)])
    tracks = stitch([a, b])
    assert len(tracks) == 1
    frames = tracks[0].frames
    assert sorted(frames) == list(range(9))
    # the overlap 3..5 is split at frame 4: earlier frames come from the first batch
    assert frames[3][0][0] == 0.0 and frames[4][0][0] == 1.0
    with pytest.raises(ValueError):
        stitch([b, a])


def test_stitch_unlinked_starts_new_track():
    a = BatchResult(0, 6, [tl({f: 10 + f for f in range(6)}, 6)])
    b = BatchResult(3, 6, [tl({3: 40, 4: 41, 5: 42}, 6)])
    assert [t.track_id for t in stitch([a, b])] == [1, 2]


def test_oracle_tracks_clean_scene_perfectly():
    scene = synth_scene(SceneSpec(n_people=4, n_frames=24, noise=0.0, miss_rate=0.0, fp_rate=0.0, seed=8))
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    tracks, results = track_sequence(scene.detections, scene.n_frames, lambda ctx: OracleScorer(ctx, scene.gts),
                                     EngineConfig(batch_frames=9, length_rule="none"), fc)
    rep = report(tracks_to_mapping(tracks, scene.n_frames), scene.gt_mapping(), scene.n_frames)
    assert rep.IDF1 == 1.0 and rep.IDs == 0 and rep.FP == 0 and rep.FN == 0
    assert len(results) == len(batch_windows(24, EngineConfig(batch_frames=9)))


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(c_iou=1.0)
    with pytest.raises(ValueError):
        EngineConfig(selection="magic")
    assert EngineConfig(batch_frames=18).batch_shift == 6


def test_duplicate_detections_stay_distinct():
    dets = [Detection(0, BoundingBox(0, 0, 10, 10), 1.0, 0), Detection(0, BoundingBox(0, 0, 10, 10), 1.0, 1)]
    ctx = BatchContext(dets, 0, 1, FeatureConfig(image_width=100, image_height=100))
    assert len(init_pool(ctx)) == 2


def test_three_frame_toy_candidate_count():
    dets = [Detection(f, BoundingBox(10 * k, 0, 5, 5), 1.0, 2 * f + k) for f in range(3) for k in range(2)]
    ctx = BatchContext(dets, 0, 3, FeatureConfig(image_width=100, image_height=100))
    pool = init_pool(ctx)
    pool.scores[:] = 0.5
    cands = grow_step(pool, 2, hash_score)
    # each of the 6 singletons extends by any of the 4 detections in the other two frames
    assert len(cands) == 24
    assert len({tuple(r) for r in cands.rows}) == len(brute_force_mergers(pool.rows, 2)) == 12


def parallel_walk(n_frames=9):
    spec = SceneSpec(n_people=2, pattern="linear", n_frames=n_frames, noise=0.0, miss_rate=0.0, fp_rate=0.0, seed=1)
    return synth_scene(spec)


def test_parallel_walk_trajectories_reach_pool():
    scene = parallel_walk()
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    ctx = BatchContext(scene.detections, 0, scene.n_frames, fc)
    scorer = OracleScorer(ctx, scene.gts)
    pool = generate(init_pool(ctx), scorer, EngineConfig())
    from hypotrack.scoring import idf_rows
    assert np.all(idf_rows(ctx, pool.rows, scorer.gt_boxes).max(axis=0) == 1.0)


def test_one_person_through_three_batches_keeps_one_identity():
    spec = SceneSpec(n_people=1, pattern="linear", n_frames=15, noise=0.0, miss_rate=0.0, fp_rate=0.0, seed=2)
    scene = synth_scene(spec)
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    cfg = EngineConfig(batch_frames=9, c_score=0.3)
    tracks, results = track_sequence(scene.detections, scene.n_frames, lambda ctx: OracleScorer(ctx, scene.gts),
                                     cfg, fc)
    assert len(results) == 3
    assert len(tracks) == 1
    g = scene.gts[0]
    assert sorted(tracks[0].frames) == list(np.flatnonzero(np.any(g.boxes != 0, axis=1)))


def test_person_leaving_has_no_phantom_continuation():
    dets = [Detection(f, BoundingBox(10 + 3 * f, 10, 10, 20), 1.0, f) for f in range(7)]
    dets += [Detection(f, BoundingBox(200, 100 + f, 10, 20), 1.0, 7 + f) for f in range(15)]
    g1 = np.zeros((15, 4))
    g1[:7] = [d.box.as_array() for d in dets[:7]]
    g2 = np.array([d.box.as_array() for d in dets[7:]])
    from hypotrack.geometry import GroundTruthTrajectory
    gts = [GroundTruthTrajectory(1, g1), GroundTruthTrajectory(2, g2)]
    tracks, _ = track_sequence(dets, 15, lambda ctx: OracleScorer(ctx, gts), EngineConfig(batch_frames=9, c_score=0.3),
                               FeatureConfig(image_width=400, image_height=300))
    ends = sorted(max(t.frames) for t in tracks)
    assert ends == [6, 14]


def test_chooser_uniform_on_equal_scores():
    rng = np.random.default_rng(1)
    draws = np.bincount([randomized_merge_choice(np.full(4, 0.3), 10.0, rng) for _ in range(10000)], minlength=4)
    assert chisquare(draws).pvalue > 0.01


def test_chooser_sharp_at_high_temperature():
    rng = np.random.default_rng(2)
    picks = [randomized_merge_choice(np.array([0.0, 1.0]), 10.0, rng) for _ in range(5000)]
    assert np.mean(picks) > 0.99


def test_exact_dominates_greedy_on_random_pools():
    rng = np.random.default_rng(12)
    from hypotrack.oracles import random_small_pool
    cfg = EngineConfig(length_rule="none")
    for _ in range(20):
        pool = random_small_pool(rng, 12, cfg)
        from hypotrack.engine import objective
        assert objective(pool, select_exact(pool, cfg)) >= objective(pool, select_greedy(pool, cfg)) - 1e-12
