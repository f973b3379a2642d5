"""Analytic gradients of every conditioning block against central differences.

The numerical oracle perturbs each parameter coordinate of a float64
miniature and differentiates a denoising-style squared-error loss; autograd
must agree within 1e-3 relative.
"""

import numpy as np
import pytest
import torch

from cfdiff.net import AdaGroupNorm, CondUNet, ConditionEmbedder, ConditionedAttention, NetConfig


def central_difference_grads(loss_fn, params, h=1e-6):
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def assert_grads_match(loss_fn, params, rtol=1e-3, atol=1e-8):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    numeric = central_difference_grads(loss_fn, params)
    for p, num in zip(params, numeric):
        auto = torch.zeros_like(p) if p.grad is None else p.grad.detach()
        denom = np.maximum(np.abs(num.numpy()), np.abs(auto.numpy()))
        err = np.abs(auto.numpy() - num.numpy())
        rel = err / np.maximum(denom, 1e-6)
        assert rel.max() < rtol or err.max() < atol, f"max rel err {rel.max():.2e}"


def randomize(module, scale=0.5):
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def test_condition_attention_gradients():
    torch.manual_seed(0)
    attn = ConditionedAttention(4, 2, 3, groups=2).double()
    randomize(attn)
    tokens = torch.randn(2, 3, 4, dtype=torch.float64)
    ctx = torch.randn(2, 2, 3, dtype=torch.float64)
    target = torch.randn(2, 3, 4, dtype=torch.float64)

    def loss_fn():
        return ((attn.attend(tokens, ctx) - target) ** 2).mean()

    assert_grads_match(loss_fn, list(attn.parameters()))


def test_adagroup_gradients():
    torch.manual_seed(1)
    norm = AdaGroupNorm(2, 4, 3).double()
    randomize(norm)
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    emb = torch.randn(2, 3, dtype=torch.float64)
    target = torch.randn(2, 4, 3, 3, dtype=torch.float64)

    def loss_fn():
        return ((norm(x, emb) - target) ** 2).mean()

    assert_grads_match(loss_fn, list(norm.parameters()))


def test_condition_embedder_gradients():
    emb = ConditionEmbedder(2).double()
    randomize(emb)
    ids = torch.tensor([0, 2])
    target = torch.randn(2, 2, 2, dtype=torch.float64)

    def loss_fn():
        return ((emb(ids) - target) ** 2).sum()

    assert_grads_match(loss_fn, list(emb.parameters()))


def test_time_embedding_mlp_gradients():
    cfg = NetConfig(in_channels=1, base=4, channel_mults=(1,), heads=2, d_tau=2, groups=2, time_dim=6, attn_levels=(), condition_mode="none")
    net = CondUNet(cfg).double()
    t = torch.tensor([3, 40], dtype=torch.int64)
    target = torch.randn(2, 6, dtype=torch.float64)

    from cfdiff.net import timestep_embedding

    def loss_fn():
        return ((net.time_mlp(timestep_embedding(t, 4)) - target) ** 2).mean()

    assert_grads_match(loss_fn, list(net.time_mlp.parameters()))


@pytest.mark.parametrize("mode", ["attention", "adagroup"])
def test_full_miniature_denoising_loss_gradients(mode):
    """Spot-check the full net's Eq-style loss on a random subset of coordinates."""
    torch.manual_seed(2)
    cfg = NetConfig(
        in_channels=1, base=4, channel_mults=(1, 2), heads=2, d_tau=2, groups=2,
        time_dim=8, attn_levels=(1,), condition_mode=mode,
    )
    net = CondUNet(cfg).double()
    randomize(net, scale=0.3)
    x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    cond = torch.tensor([0, 2])
    t = torch.tensor([7, 93])

    def loss_fn():
        return ((net(x_t, cond, t) - eps) ** 2).mean()

    for p in net.parameters():
        p.grad = None
    loss_fn().backward()

    gen = np.random.default_rng(5)
    h = 1e-6
    checked = 0
    for p in net.parameters():
        if p.grad is None:
            continue
        gflat = p.grad.reshape(-1)
        with torch.no_grad():
            flat = p.reshape(-1)
            for i in gen.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * h)
                auto = float(gflat[i])
                err = abs(auto - num)
                assert err < 1e-3 * max(abs(num), abs(auto), 1e-3), f"{err} at coordinate {i}"
                checked += 1
    assert checked > 30
