import math

import numpy as np
import pytest
import torch

from metakp.data import sample_stream
from metakp.losses import descriptor_loss, detector_loss, sample_loss, total_loss
from metakp.net import N_CLASSES, KeypointNet


def _onehot_logits(labels, scale=50.0):
    hc, wc = labels.shape
    logits = torch.zeros(N_CLASSES, hc, wc)
    for i in range(hc):
        for j in range(wc):
            logits[labels[i, j], i, j] = scale
    return logits


def test_detector_loss_onehot_near_zero():
    labels = torch.tensor([[3, 64], [12, 40]])
    loss = detector_loss(_onehot_logits(labels), labels)
    assert loss.item() < 1e-6


def test_detector_loss_uniform_is_log_nclasses():
    labels = torch.tensor([[0, 7], [64, 33]])
    logits = torch.zeros(N_CLASSES, 2, 2)
    loss = detector_loss(logits, labels)
    assert abs(loss.item() - math.log(N_CLASSES)) < 1e-6


def test_detector_loss_wrong_labels_worse_than_uniform():
    labels = torch.tensor([[3, 64], [12, 40]])
    wrong = torch.tensor([[4, 0], [13, 41]])
    loss = detector_loss(_onehot_logits(labels), wrong)
    assert loss.item() > math.log(N_CLASSES)


def test_detector_loss_batched_matches_mean():
    torch.manual_seed(0)
    logits = torch.randn(2, N_CLASSES, 3, 3)
    labels = torch.randint(0, N_CLASSES, (2, 3, 3))
    batched = detector_loss(logits, labels)
    per = torch.stack([detector_loss(logits[i], labels[i]) for i in range(2)])
    assert torch.allclose(batched, per.mean(), atol=1e-6)


def test_descriptor_loss_perfect_match_orthogonal_negatives():
    # matched pair identical (distance 0) and unit-orthogonal negatives
    # (squared distance 2): hinge is max(0, 1 + 0 - 2) = 0
    d_i = torch.eye(3)
    d_neg = torch.stack([torch.roll(d_i, 1, dims=0),
                         torch.roll(d_i, 2, dims=0)], dim=1)
    assert descriptor_loss(d_i, d_i.clone(), d_neg, z=1.0).item() == 0.0


def test_descriptor_loss_inverted_roles():
    # matched pair orthogonal (squared distance 2), negatives identical to
    # the anchor (distance 0): hinge is 1 + 2 - 0 = 3
    d_i = torch.eye(3)
    d_m = torch.roll(d_i, 1, dims=0)
    d_neg = d_i[:, None, :].repeat(1, 2, 1)
    assert abs(descriptor_loss(d_i, d_m, d_neg, z=1.0).item() - 3.0) < 1e-6


def test_descriptor_loss_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    d_i = rng.normal(size=(3, 5))
    d_m = rng.normal(size=(3, 5))
    d_neg = rng.normal(size=(3, 2, 5))
    want = 0.0
    for i in range(3):
        pos = float(np.sum((d_i[i] - d_m[i]) ** 2))
        neg = float(np.mean([np.sum((d_i[i] - d_neg[i, j]) ** 2)
                             for j in range(2)]))
        want += max(0.0, 1.0 + pos - neg)
    want /= 3
    got = descriptor_loss(torch.from_numpy(d_i), torch.from_numpy(d_m),
                          torch.from_numpy(d_neg), z=1.0)
    assert abs(got.item() - want) < 1e-6


def test_total_loss_arithmetic():
    one = torch.tensor(1.0)
    assert total_loss(one, 2 * one, 3 * one, lam=0.5).item() == 4.5
    assert total_loss(one, 2 * one, 3 * one, lam=0.0).item() == 3.0
    with pytest.raises(ValueError):
        total_loss(one, one, one, lam=-0.1)


def _rel_err(analytic, numeric):
    # the floor absorbs finite-difference noise (~1e-9 at eps=1e-6 in double
    # precision) on coordinates whose true gradient is zero
    denom = max(abs(analytic), abs(numeric), 1e-5)
    return abs(analytic - numeric) / denom


def test_descriptor_loss_gradient_matches_finite_differences():
    torch.manual_seed(1)
    d_i = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    d_m = torch.randn(4, 6, dtype=torch.float64)
    d_neg = torch.randn(4, 3, 6, dtype=torch.float64)
    descriptor_loss(d_i, d_m, d_neg).backward()
    grad = d_i.grad.clone()
    eps = 1e-6
    rng = np.random.default_rng(2)
    for _ in range(10):
        r, c = int(rng.integers(4)), int(rng.integers(6))
        with torch.no_grad():
            plus = d_i.clone(); plus[r, c] += eps
            minus = d_i.clone(); minus[r, c] -= eps
            fd = (descriptor_loss(plus, d_m, d_neg)
                  - descriptor_loss(minus, d_m, d_neg)).item() / (2 * eps)
        assert _rel_err(grad[r, c].item(), fd) < 1e-3


def test_sample_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    net = KeypointNet(dim=8, channels=(4, 4, 4, 4)).double()
    sample = next(sample_stream(seed=9))

    loss, _ = sample_loss(net, sample)
    loss.backward()

    eps = 1e-6
    rng = np.random.default_rng(3)
    checked = 0
    for name, p in net.named_parameters():
        if p.grad is None:
            continue
        flat = p.detach().view(-1)
        gflat = p.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(3, flat.numel()),
                              replace=False):
            idx = int(idx)
            with torch.no_grad():
                orig = flat[idx].item()
                flat[idx] = orig + eps
                lp, _ = sample_loss(net, sample)
                flat[idx] = orig - eps
                lm, _ = sample_loss(net, sample)
                flat[idx] = orig
            fd = (lp.item() - lm.item()) / (2 * eps)
            assert _rel_err(gflat[idx].item(), fd) < 1e-3, \
                f"{name}[{idx}]: analytic {gflat[idx].item()} vs fd {fd}"
            checked += 1
    assert checked >= 30


def test_sample_loss_parts_compose():
    torch.manual_seed(3)
    net = KeypointNet(dim=8, channels=(4, 4, 4, 4))
    sample = next(sample_stream(seed=10))
    with torch.no_grad():
        l_all, parts = sample_loss(net, sample, z=1.0, lam=0.7)
    want = parts["loss_p"] + parts["loss_wp"] + 0.7 * parts["loss_d"]
    assert torch.allclose(l_all, want, atol=1e-6)
