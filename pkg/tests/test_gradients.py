import numpy as np
import pytest
import torch

from collab_retarget.body import ArticulatedBody, fingertips_torch, fk_tips_torch, fk_torch
from collab_retarget.diffopt import grad_check
from collab_retarget.retarget import chamfer, chamfer_frames

import gradcases as G


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("term", G.TERM_NAMES)
def test_term_gradient(term, seed):
    name, f, x = next(c for c in G.cases(seed) if c[0] == term)
    rep = grad_check(f, x, rel_tol=1e-3, coords=G.pick_coords(f, x, seed, count=16))
    assert rep.passed, str(rep) + f" {rep.failures[:3]}"


def test_grad_check_detects_wrong_gradient():
    name, f, x = G.cases(0)[4]          # human.sr

    def wrong(y):
        yt = torch.tensor(y, requires_grad=True)
        (g,) = torch.autograd.grad(f(yt).sum(), yt)
        return g.numpy() * 1.01

    rep = grad_check(f, x, rel_tol=1e-3, grad=wrong, coords=G.pick_coords(f, x, 0))
    assert not rep.passed


def test_grad_check_reports_kink():
    rep = grad_check(lambda y: y.abs().sum(), np.array([0.0, 1.0]))
    assert rep.passed and rep.nonsmooth == [0]


def test_fused_fk_matches_reference(rng):
    body = ArticulatedBody.default()
    x = torch.tensor(rng.normal(0, 0.5, (3, 69)))
    th, ro, tr = x[:, :63].reshape(3, 21, 3), x[:, 63:66], x[:, 66:]
    p1, t1 = fk_tips_torch(th, ro, tr, body.offsets, body.fingertip_offsets)
    p2, glob = fk_torch(th, ro, tr, body.offsets)
    t2 = fingertips_torch(torch.tensor(body.fingertip_offsets), p2, glob)
    assert torch.allclose(p1, p2, atol=1e-13) and torch.allclose(t1, t2, atol=1e-13)


def test_fused_fk_gradient(rng):
    body = ArticulatedBody.default()
    w = torch.tensor(rng.normal(size=(2, 22, 3)))
    v = torch.tensor(rng.normal(size=(2, 10, 3)))

    def f(y):
        p, t = fk_tips_torch(y[:, :63].reshape(2, 21, 3), y[:, 63:66], y[:, 66:], body.offsets,
                             body.fingertip_offsets)
        return (p * w).sum() + (t * v).sum()

    assert grad_check(f, rng.normal(0, 0.5, (2, 69))).passed


def test_chamfer_kernel_matches_reference(rng):
    tips = rng.normal(size=(3, 4, 4, 5, 3))
    pts = rng.normal(size=(3, 4, 7, 3))
    mask = rng.random((3, 4, 7)) < 0.6
    mask[0, 1] = False
    w = torch.tensor(rng.normal(size=(3, 4, 4)))
    ta = torch.tensor(tips, requires_grad=True)
    a = chamfer_frames(ta, pts, mask)
    (a * w).sum().backward()
    tb = torch.tensor(tips, requires_grad=True)
    b = chamfer(tb, torch.tensor(pts)[:, None], torch.tensor(mask)[:, None])
    (b * w).sum().backward()
    assert torch.allclose(a, b, atol=1e-12)
    assert torch.allclose(ta.grad, tb.grad, atol=1e-12)
    assert (a[0, :, 1] == 0).all()


def test_chamfer_known_value():
    tips = torch.zeros((1, 3, 3), dtype=torch.float64)
    tips[0, 1, 2] = 1.0
    pts = torch.tensor([[[0.0, 0.0, 0.0], [0.0, 0.0, 3.0]]], dtype=torch.float64)
    mask = torch.tensor([[True, True]])
    # forward: min over points for each tip -> {0, 1, 0}; mean = 1/3
    # backward: min over tips for each point -> {0, 4}; mean = 2
    val = chamfer(tips, pts, mask)
    assert abs(float(val[0]) - (1 / 3 + 2)) < 1e-12
