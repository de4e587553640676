"""First-order MAML training loop.

Each outer step draws a batch split evenly into support and query halves,
pairs them into tasks, runs m inner SGD steps on a working parameter copy
per task, and applies the query-set gradient evaluated at the adapted
parameters directly to the meta parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .losses import sample_loss


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class MamlConfig:
    alpha1: float = 1e-4       # inner-loop learning rate
    alpha2: float = 1e-4       # outer-loop learning rate
    m: int = 4                 # inner steps per task
    batch: int = 8             # samples per outer step (support + query)
    iterations: int = 500      # outer steps
    z: float = 1.0             # triplet margin
    lam: float = 1.0           # descriptor-loss weight

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("at least one inner step is required")
        if self.batch < 2 or self.batch % 2:
            raise ValueError("batch must split evenly into support and query")

    @property
    def n_tasks(self) -> int:
        return self.batch // 2


@dataclass
class TrainStats:
    inner_updates: int = 0
    outer_updates: int = 0
    curve: list = field(default_factory=list)  # (step, l_p, l_wp, l_d, l_all)


def _named_params(net) -> dict:
    return dict(net.named_parameters())


def _grad_step(params: dict, grads: tuple, lr: float) -> dict:
    return {k: p - lr * g for (k, p), g in zip(params.items(), grads)}


def maml_train(net, data, cfg: MamlConfig, log_path=None) -> TrainStats:
    """Meta-train `net` in place; `data` is an iterator of TrainSample.

    Returns counters and the training curve. Raises NonFiniteLossError with
    the offending step if any loss goes non-finite.
    """
    stats = TrainStats()
    log = open(log_path, "w") if log_path else None
    if log:
        log.write("step loss_p loss_wp loss_d loss_all\n")
    try:
        for step in range(cfg.iterations):
            batch = [next(data) for _ in range(cfg.batch)]
            support, query = batch[:cfg.n_tasks], batch[cfg.n_tasks:]
            acc = {"loss_p": 0.0, "loss_wp": 0.0, "loss_d": 0.0, "all": 0.0}

            for task in range(cfg.n_tasks):
                # inner loop: adapt a detached working copy of the meta
                # parameters on the task's support sample
                theta_a = {k: p.detach().clone().requires_grad_(True)
                           for k, p in _named_params(net).items()}
                for _ in range(cfg.m):
                    loss, _ = sample_loss(net, support[task], z=cfg.z,
                                          lam=cfg.lam, params=theta_a)
                    if not torch.isfinite(loss):
                        raise NonFiniteLossError(
                            f"inner loss non-finite at step {step}, task {task}")
                    grads = torch.autograd.grad(loss, list(theta_a.values()))
                    theta_a = {k: (p - cfg.alpha1 * g).requires_grad_(True)
                               for (k, p), g in zip(theta_a.items(), grads)}
                    stats.inner_updates += 1

                # outer loop: query gradient at the adapted parameters,
                # applied directly to the meta parameters (first-order)
                q_loss, parts = sample_loss(net, query[task], z=cfg.z,
                                            lam=cfg.lam, params=theta_a)
                if not torch.isfinite(q_loss):
                    raise NonFiniteLossError(
                        f"query loss non-finite at step {step}, task {task}")
                grads = torch.autograd.grad(q_loss, list(theta_a.values()))
                with torch.no_grad():
                    for p, g in zip(net.parameters(), grads):
                        p -= cfg.alpha2 * g
                stats.outer_updates += 1

                acc["all"] += float(q_loss.detach())
                for k in ("loss_p", "loss_wp", "loss_d"):
                    acc[k] += float(parts[k].detach())

            n = cfg.n_tasks
            row = (step, acc["loss_p"] / n, acc["loss_wp"] / n,
                   acc["loss_d"] / n, acc["all"] / n)
            stats.curve.append(row)
            if log:
                log.write(f"{row[0]} {row[1]:.6f} {row[2]:.6f} "
                          f"{row[3]:.6f} {row[4]:.6f}\n")
    finally:
        if log:
            log.close()
    return stats


def evaluate(net, samples, cfg: MamlConfig) -> float:
    """Mean total loss over held-out samples, no gradient."""
    with torch.no_grad():
        losses = [float(sample_loss(net, s, z=cfg.z, lam=cfg.lam)[0])
                  for s in samples]
    return float(sum(losses) / len(losses))
