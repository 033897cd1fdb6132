import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from collab_retarget.body import ArticulatedBody, Pose
from collab_retarget.contacts import contact_masks, sequence_candidate
from collab_retarget.diffopt import OptimConfig
from collab_retarget.discriminator import (LAYERS, TRAIN_EPOCHS, TRAIN_LR, NoiseSpec, RankingModel,
                                           delta_rotation, displace_pose, load_model, make_negatives, margin,
                                           pair_loss, pose_features, ranking_accuracy, ranking_loss, save_model,
                                           score, score_sequence, split, synthetic_pairs, train)
from collab_retarget.errors import ParseError
from collab_retarget.fixtures import load_ranker, pose_bank
from collab_retarget.morph import ContactConstraint
from collab_retarget.rotations import aa_to_matrix
from collab_retarget.shapes import box_mesh

BODY = ArticulatedBody.default()


def pose_bank_small():
    return pose_bank(box_mesh((0.4, 0.6, 0.3), spacing=0.05), frames=12)


def test_constants():
    assert LAYERS == (63, 256, 256, 1) and TRAIN_LR == 2e-4 and TRAIN_EPOCHS == 1000
    assert NoiseSpec() == NoiseSpec((20.0, 60.0), (0.2, 0.5))


def test_margin_formula():
    assert margin([10, -20, 30, 0.1, -0.2, 0.3]) == pytest.approx(6.0 + 6.0)
    assert margin(np.zeros(6)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_noise_in_range(seed):
    d = NoiseSpec().sample(np.random.default_rng(seed), 50)
    assert ((np.abs(d[:, :3]) >= 20) & (np.abs(d[:, :3]) <= 60)).all()
    assert ((np.abs(d[:, 3:]) >= 0.2) & (np.abs(d[:, 3:]) <= 0.5)).all()


def test_noise_validation():
    with pytest.raises(ValueError):
        NoiseSpec((30.0, 20.0), (0.2, 0.5))
    NoiseSpec((0.0, 0.0), (0.0, 0.0))


def test_delta_rotation_order():
    r = delta_rotation([90, 0, 90, 0, 0, 0])
    expect = aa_to_matrix([0, 0, np.pi / 2]) @ aa_to_matrix([np.pi / 2, 0, 0])
    assert np.allclose(r, expect, atol=1e-12)


def test_tied_scores_zero_margin_is_log2():
    r = torch.tensor([0.7, -3.0], dtype=torch.float64)
    loss = ranking_loss(r, r, torch.zeros(2, dtype=torch.float64))
    assert torch.all((loss - math.log(2)).abs() <= 1e-9)


def test_pair_loss_tie_is_log2():
    model = RankingModel()
    f = np.random.default_rng(0).normal(size=(10, 63))
    assert abs(pair_loss(model, f, f, np.zeros((10, 6))) - math.log(2)) <= 1e-9


def test_ranking_loss_decreases_with_gap():
    m = torch.tensor(1.0)
    assert ranking_loss(torch.tensor(5.0), torch.tensor(0.0), m) < ranking_loss(torch.tensor(0.0),
                                                                                torch.tensor(0.0), m)


def test_pose_features_ignore_root(rng):
    th = rng.normal(0, 0.3, (3, 21, 3))
    a = pose_features(BODY, Pose(th, np.zeros((3, 3)), np.zeros((3, 3))))
    b = pose_features(BODY, Pose(th, rng.normal(size=(3, 3)), rng.normal(size=(3, 3))))
    assert a.shape == (3, 63) and np.array_equal(a, b)


def test_displace_pose_zero_delta_identity(rng):
    th = rng.normal(0, 0.3, (21, 3))
    assert np.allclose(displace_pose(th, np.zeros(6)), th, atol=1e-12)


def test_synthetic_pairs_and_split():
    bank, body = pose_bank_small()
    pos, neg, deltas = synthetic_pairs(body, bank, 200, seed=1)
    assert pos.shape == neg.shape == (200, 63) and deltas.shape == (200, 6)
    tr, te = split(200)
    assert len(tr) == 160 and len(te) == 40 and not set(tr) & set(te)


def test_train_small_separates():
    bank, body = pose_bank_small()
    pos, neg, deltas = synthetic_pairs(body, bank, 400, seed=2)
    res = train(pos, neg, deltas, epochs=40, lr=1e-3, batch_size=128, layers=(63, 32, 1))
    assert res.trace[-1] < res.trace[0]
    assert ranking_accuracy(res.model, pos, neg) > 0.9
    # flush-to-zero is process-wide; training must leave subnormals representable
    assert np.float64(np.finfo(float).tiny) / 2 > 0


def test_train_needs_pairs():
    with pytest.raises(ValueError):
        train(np.zeros((50, 63)), np.zeros((50, 63)), np.zeros((50, 6)), epochs=1)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = RankingModel((63, 8, 1), "tanh")
    save_model(model, tmp_path / "m.rnk")
    back = load_model(tmp_path / "m.rnk")
    x = np.random.default_rng(0).normal(size=(5, 63))
    assert np.array_equal(model.score_features(x), back.score_features(x))
    raw = (tmp_path / "m.rnk").read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        (tmp_path / "b.rnk").write_bytes(bad)
        with pytest.raises(ParseError):
            load_model(tmp_path / "b.rnk")


def test_unknown_activation():
    with pytest.raises(ValueError):
        RankingModel(activation="relu")


def test_bundled_ranker_prefers_source(carry):
    model = load_ranker()
    bank, body = pose_bank_small()
    pos, neg, deltas = synthetic_pairs(body, bank, 500, seed=99)
    assert ranking_accuracy(model, pos, neg) >= 0.9
    s = score(model, carry.bodies[0], carry.agents[0])
    assert s.shape == (30,)
    assert np.isfinite(score_sequence(model, carry))


def test_make_negatives_shapes(carry, source_box):
    masks = contact_masks(carry, source_box)
    cand = sequence_candidate(carry, source_box)
    con = ContactConstraint(tuple(source_box.vertices[h] for h in cand.hands))
    negs, deltas = make_negatives(carry, con, masks, seeds=(0, 1), cfg=OptimConfig(0.01, 5))
    assert len(negs) == 2 and len(negs[0][0]) == len(carry)
    assert margin(deltas[0]) >= 0.2 * 3 * 10 + 20 * 3 / 10
