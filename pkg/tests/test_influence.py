import dataclasses
import math

import numpy as np
import pytest

from tracemil.influence import (InfluenceError, SelfInfluenceMatrix, bag_self_influence_score, checkpoint_contribution,
                                influence_table, rank_bags_by_self_influence, read_table_tsv, self_influence_matrix,
                                self_influence_scores, singletons, tracin_pair)
from tracemil.model import Bag, ModelConfig, ModelParams, as_singleton_bag, bag_loss, bag_loss_and_grad, init_params
from tracemil.synth import SynthConfig, adjacent_class, make_dataset
from tracemil.train import AdamState, Archive, CheckpointRecord, TrainConfig, adam_step, train

VARIANTS = ("literal", "update_dot", "preconditioned_ip")


def scalar_case():
    # quadratic losses L(w) = (w - y)^2 / 2 at w = 0.7: gradients w - y
    w = 0.7
    g_target, g_cand = w - 1.9, w - (-0.4)
    lr, m, v, eps = 0.05, 0.3, 0.09, 1e-8
    return lr, m, v, eps, g_target, g_cand


def test_scalar_hand_computation_all_variants():
    lr, m, v, eps, gt, gc = scalar_case()
    adam = AdamState(1, np.array([m]), np.array([v]), lr)
    denom = math.sqrt(v) + eps
    hand = {
        "literal": lr * (m / denom) * gt * gc,
        "update_dot": lr * gt * (m / denom),
        "preconditioned_ip": lr * gt * gc / denom,
    }
    for variant in VARIANTS:
        got = checkpoint_contribution(adam, eps, variant, np.array([[gt]]), np.array([[gc]]))
        assert got.shape == (1, 1)
        assert abs(got[0, 0] - hand[variant]) <= 1e-15, variant


def test_bilinear_in_target_gradient():
    rng = np.random.default_rng(0)
    adam = AdamState(3, rng.normal(size=20), rng.random(20), 1e-3)
    gt, gc = rng.normal(size=(2, 20)), rng.normal(size=(5, 20))
    for variant in VARIANTS:
        base = checkpoint_contribution(adam, 1e-8, variant, gt, gc)
        np.testing.assert_array_equal(checkpoint_contribution(adam, 1e-8, variant, 2.0 * gt, gc), 2.0 * base)
        np.testing.assert_allclose(checkpoint_contribution(adam, 1e-8, variant, -0.37 * gt, gc), -0.37 * base,
                                   rtol=1e-12, atol=0)


SMOOTH = ModelConfig(in_dim=6, encoder_hidden=(8,), embed_dim=5, attn_dim=4, head_hidden=7, activation="tanh")


def one_step_archive(params, z, lr):
    """Archive whose single checkpoint holds the Adam moments of one step on ``z`` taken at ``params``."""
    cfg = TrainConfig(lr=lr, weight_decay=0.0, batch_size=1)
    _, g = bag_loss_and_grad(params, z)
    stepped, state = adam_step(AdamState.zeros(params.flat.size, lr), params.flat, g.values, cfg)
    start = CheckpointRecord(0, 0, 0, params, AdamState.zeros(params.flat.size, lr))
    rec = CheckpointRecord(1, 1, 1, params, state, [(1, [z.id])])
    return Archive(cfg, params.config, start, [rec]), ModelParams(params.config, stepped)


def test_update_dot_predicts_single_step_loss_change():
    errors = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        params = init_params(SMOOTH, rng)
        z = Bag(1, rng.normal(size=(1, 6)), int(rng.integers(3)))
        # a nearby target keeps the first-order term away from zero
        target = Bag(2, z.instances + 0.5 * rng.normal(size=(1, 6)), z.reader1)
        archive, stepped = one_step_archive(params, z, 1e-4)
        score = tracin_pair(archive, target, z, "update_dot").score
        delta = bag_loss(params, target) - bag_loss(stepped, target)
        errors.append(abs(score - delta) / abs(delta))
    assert max(errors) <= 0.05, max(errors)


def test_empty_archive_scores_zero(small_run, small_dataset):
    _, archive = small_run
    empty = dataclasses.replace(archive, checkpoints=[])
    s = singletons(small_dataset.train[:1])[0]
    for variant in VARIANTS:
        out = tracin_pair(empty, s, s, variant)
        assert out.score == 0.0 and out.checkpoints_used == 0


def test_zero_candidate_gradient_scores_zero():
    blocks = init_params(SMOOTH, np.random.default_rng(1)).blocks()
    for k in ("head.W1", "head.b1", "head.W2"):
        blocks[k] = np.zeros_like(blocks[k])
    blocks["head.b2"] = np.array([0.0, 1000.0, 0.0])
    params = ModelParams.from_blocks(SMOOTH, blocks)
    rng = np.random.default_rng(2)
    n = params.flat.size
    rec = CheckpointRecord(1, 1, 1, params, AdamState(1, rng.normal(size=n), rng.random(n) + 0.1, 1e-3), [(1, [1])])
    archive = Archive(TrainConfig(), SMOOTH, rec, [rec])
    confident = Bag(1, rng.normal(size=(1, 6)), 1)
    target = Bag(2, rng.normal(size=(1, 6)), 0)
    for variant in ("literal", "preconditioned_ip"):
        assert tracin_pair(archive, target, confident, variant).score == 0.0


def test_multi_instance_bags_are_rejected(small_run, small_dataset):
    _, archive = small_run
    with pytest.raises(InfluenceError, match="singleton"):
        tracin_pair(archive, small_dataset.train[0], small_dataset.train[0])
    s = singletons(small_dataset.train[:1])[0]
    with pytest.raises(InfluenceError, match="unknown variant"):
        tracin_pair(archive, s, s, "hessian")


def test_table_matches_independent_pair_calls(small_run, small_dataset):
    _, archive = small_run
    targets = singletons(small_dataset.val)[:3]
    cands = singletons(small_dataset.train)[:50]
    for variant in VARIANTS:
        table = influence_table(archive, targets, cands, variant)
        for i, t in enumerate(targets):
            for j, c in enumerate(cands):
                pair = tracin_pair(archive, t, c, variant)
                assert table.scores[i, j] == pair.score
                assert table.checkpoints_used[j] == pair.checkpoints_used


def test_scores_are_bit_reproducible(small_run, small_dataset):
    _, archive = small_run
    targets, cands = singletons(small_dataset.val)[:2], singletons(small_dataset.train)[:20]
    a = influence_table(archive, targets, cands, "literal").scores
    b = influence_table(archive, targets, cands, "literal").scores
    assert a.tobytes() == b.tobytes()


def test_strict_mode_counts_only_checkpoints_that_drew_the_bag(small_run, small_dataset):
    _, archive = small_run
    cands = singletons(small_dataset.train)
    table = influence_table(archive, cands[:1], cands, "literal", "strict")
    for j, c in enumerate(cands):
        assert table.checkpoints_used[j] == sum(c.id in rec.bag_ids() for rec in archive.checkpoints)
    loose = influence_table(archive, cands[:1], cands, "literal", "tracincp")
    assert (loose.checkpoints_used == len(archive.checkpoints)).all()


def test_update_dot_ignores_the_candidate_in_tracincp_mode(small_run, small_dataset):
    _, archive = small_run
    cands = singletons(small_dataset.train)[:30]
    table = influence_table(archive, singletons(small_dataset.val)[:2], cands, "update_dot", "tracincp")
    assert (table.scores == table.scores[:, :1]).all()
    strict = influence_table(archive, singletons(small_dataset.val)[:2], cands, "update_dot", "strict")
    # in strict mode candidates differ only through which checkpoints include them
    by_usage = {}
    for j, c in enumerate(cands):
        key = tuple(c.id in rec.bag_ids() for rec in archive.checkpoints)
        by_usage.setdefault(key, set()).add(tuple(strict.scores[:, j]))
    assert all(len(v) == 1 for v in by_usage.values())


def test_duplicate_candidates_score_identically(small_run, small_dataset):
    _, archive = small_run
    c = singletons(small_dataset.train)[5]
    table = influence_table(archive, singletons(small_dataset.val)[:3], [c, c], "preconditioned_ip")
    np.testing.assert_array_equal(table.scores[:, 0], table.scores[:, 1])


def test_self_matrix_matches_pair_calls_and_has_nonnegative_diagonal(small_run, small_dataset):
    _, archive = small_run
    bag = small_dataset.train[0]
    assert bag.n == 4
    mat = self_influence_matrix(archive, bag, "preconditioned_ip")
    assert mat.matrix.shape == (4, 4)
    for i in range(4):
        for j in range(4):
            pair = tracin_pair(archive, as_singleton_bag(bag, i), as_singleton_bag(bag, j), "preconditioned_ip")
            assert mat.matrix[i, j] == pair.score
    assert (mat.diagonal >= 0).all()


def test_self_influence_diagonal_nonnegative_across_bags(small_run, small_dataset):
    _, archive = small_run
    for bag in small_dataset.train[:10]:
        assert (self_influence_matrix(archive, bag, "preconditioned_ip").diagonal >= 0).all()


def test_one_instance_bag_and_duplicate_instances(small_run, small_dataset):
    _, archive = small_run
    bag = small_dataset.train[1]
    single = as_singleton_bag(bag, 2)
    mat = self_influence_matrix(archive, single, "literal")
    assert mat.matrix.shape == (1, 1)
    assert mat.matrix[0, 0] == tracin_pair(archive, single, single, "literal").score
    twin = Bag(bag.id, np.vstack([bag.instances[0], bag.instances[0], bag.instances[1]]), bag.reader1)
    rows = self_influence_matrix(archive, twin, "literal").matrix
    np.testing.assert_array_equal(rows[0], rows[1])


def test_bag_score_is_the_max_diagonal():
    m = SelfInfluenceMatrix(0, [0, 1, 2], np.diag([0.1, 0.9, 0.3]), "literal")
    assert bag_self_influence_score(m) == 0.9
    assert bag_self_influence_score(SelfInfluenceMatrix(0, [0, 1], np.zeros((2, 2)), "literal")) == 0.0


def test_ranking_order_and_ties():
    assert rank_bags_by_self_influence({"a": 1.0, "b": 3.0, "c": 2.0}) == ["b", "c", "a"]
    assert rank_bags_by_self_influence({7: 0.5, 2: 0.5, 4: 0.5}) == [2, 4, 7]
    with pytest.raises(InfluenceError):
        rank_bags_by_self_influence({1: float("nan")})


def test_tsv_round_trip(small_run, small_dataset, tmp_path):
    _, archive = small_run
    table = influence_table(archive, singletons(small_dataset.val)[:2], singletons(small_dataset.train)[:7],
                            "update_dot")
    table.write_tsv(tmp_path / "t.tsv")
    header = (tmp_path / "t.tsv").read_text().splitlines()[0]
    assert header == "target_id\tcandidate_id\tvariant\tcheckpoints_used\tscore"
    back = read_table_tsv(tmp_path / "t.tsv")
    assert back.target_ids == table.target_ids and back.candidate_ids == table.candidate_ids
    assert back.scores.tobytes() == table.scores.tobytes()
    np.testing.assert_array_equal(back.checkpoints_used, table.checkpoints_used)


PLANT = dict(n_bags=200, instances_per_bag=8, feature_dim=16, signal_instances=8, signal_strength=6.0,
             disagreement_rate=0.0)


@pytest.mark.slow
def test_planted_mislabel_beats_median_clean_bag():
    wins = 0
    for seed in range(5):
        ds = make_dataset(SynthConfig(seed=seed, **PLANT))
        bags = list(ds.train)
        victim = bags[0]
        bags[0] = dataclasses.replace(victim, reader1=adjacent_class(victim.reader1, 0.5), reader2=victim.reader1,
                                      disagreement=True)
        _, archive = train(TrainConfig(epochs=6, checkpoint_every=2, seed=seed), bags, ds.val, ModelConfig(in_dim=16))
        scores = self_influence_scores(archive, bags, "preconditioned_ip")
        clean = np.median([s for k, s in scores.items() if k != victim.id])
        wins += scores[victim.id] > clean
    assert wins >= 4, wins
