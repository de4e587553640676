import numpy as np
import pytest
import torch

from metakp.data import sample_stream
from metakp.maml import MamlConfig, NonFiniteLossError, evaluate, maml_train
from metakp.net import KeypointNet, sample_descriptors


def _small_net(seed=0):
    torch.manual_seed(seed)
    return KeypointNet(dim=16, channels=(4, 4, 8, 8))


def _snapshot(net):
    return {k: p.detach().clone() for k, p in net.named_parameters()}


def test_config_validation():
    with pytest.raises(ValueError):
        MamlConfig(m=0)
    with pytest.raises(ValueError):
        MamlConfig(batch=7)
    with pytest.raises(ValueError):
        MamlConfig(batch=0)
    assert MamlConfig(batch=8).n_tasks == 4


def test_update_counters():
    net = _small_net()
    cfg = MamlConfig(iterations=3, m=4, batch=8)
    stats = maml_train(net, sample_stream(seed=1), cfg)
    # 3 steps x 4 tasks: m inner updates each, one outer update each
    assert stats.inner_updates == 3 * 4 * 4
    assert stats.outer_updates == 3 * 4
    assert len(stats.curve) == 3
    assert [row[0] for row in stats.curve] == [0, 1, 2]


def test_inner_loop_never_touches_meta_parameters():
    # with the outer rate zeroed, any parameter change could only come from
    # the inner loop leaking into the meta parameters — so none is allowed,
    # bit for bit
    net = _small_net()
    before = _snapshot(net)
    cfg = MamlConfig(alpha2=0.0, iterations=2, m=3, batch=4)
    stats = maml_train(net, sample_stream(seed=2), cfg)
    assert stats.inner_updates == 2 * 2 * 3   # the inner loop did run
    for k, p in net.named_parameters():
        assert torch.equal(p, before[k]), k


def test_outer_updates_change_meta_parameters():
    net = _small_net()
    before = _snapshot(net)
    cfg = MamlConfig(alpha2=1e-3, iterations=1, m=1, batch=4)
    maml_train(net, sample_stream(seed=3), cfg)
    changed = sum(not torch.equal(p, before[k])
                  for k, p in net.named_parameters())
    assert changed > 0


def test_training_is_deterministic():
    cfgs = MamlConfig(iterations=2, m=2, batch=4)
    nets = []
    for _ in range(2):
        net = _small_net(seed=5)
        maml_train(net, sample_stream(seed=4), cfgs)
        nets.append(net)
    for (k, a), (_, b) in zip(nets[0].named_parameters(),
                              nets[1].named_parameters()):
        assert torch.equal(a, b), k


def test_non_finite_loss_raises():
    net = _small_net()
    with torch.no_grad():
        net.detector.weight.fill_(float("nan"))
    cfg = MamlConfig(iterations=1, m=1, batch=2)
    with pytest.raises(NonFiniteLossError):
        maml_train(net, sample_stream(seed=6), cfg)


def test_training_log_written(tmp_path):
    net = _small_net()
    cfg = MamlConfig(iterations=2, m=1, batch=2)
    log = tmp_path / "train.log"
    stats = maml_train(net, sample_stream(seed=7), cfg, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == "step loss_p loss_wp loss_d loss_all"
    assert len(lines) == 3
    first = lines[1].split()
    assert int(first[0]) == 0
    assert abs(float(first[4]) - stats.curve[0][4]) < 1e-5


def test_meta_training_learns():
    # full-scale contract: 500 outer steps at the stock configuration must
    # reduce the held-out query loss and pull matched descriptors closer
    # together than vicinity negatives
    torch.manual_seed(3)
    net = KeypointNet(dim=64, channels=(8, 8, 16, 16))
    stream = sample_stream(seed=7)
    held = [next(stream) for _ in range(8)]
    cfg = MamlConfig()          # alpha 1e-4, m=4, batch 8, 500 iterations
    assert cfg.iterations == 500

    pre = evaluate(net, held, cfg)
    maml_train(net, stream, cfg)
    post = evaluate(net, held, cfg)
    assert post < pre, f"held-out loss {pre:.3f} -> {post:.3f}"

    matched, negative = [], []
    with torch.no_grad():
        for s in held:
            imgs = torch.stack([torch.from_numpy(s.image),
                                torch.from_numpy(s.warped)]).unsqueeze(1)
            _, desc = net(imgs)
            d_i = sample_descriptors(desc[0], s.kps)
            d_w = sample_descriptors(desc[1], s.warped_kps)
            matched.append(torch.mean(
                torch.sum((d_i - d_w) ** 2, dim=1)).item())
            d_neg = d_w[torch.from_numpy(s.negatives)]
            negative.append(torch.mean(
                torch.sum((d_i[:, None, :] - d_neg) ** 2, dim=2)).item())
    assert np.mean(matched) < np.mean(negative), \
        f"matched {np.mean(matched):.3f} !< negative {np.mean(negative):.3f}"
