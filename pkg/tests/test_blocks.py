import itertools
import math

import numpy as np
import pytest
import torch

from conftest import check_gradients
from hwa_unetr.blocks import BRANCH_WINDOWS, HwaBlock, Norm3d, SgcBlock, TfmBlock
from hwa_unetr.errors import ConfigError, ShapeError
from hwa_unetr.model import count_parameters


def zero_biases(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith('bias'):
                p.zero_()


def test_hwa_parameter_layout():
    block = HwaBlock(3, 8)
    assert count_parameters(block) == 590 * 3 + 5 * 8
    for r in BRANCH_WINDOWS:
        assert getattr(block, f'dw{r}_weight').shape == (3, 1, r, r, r)
    assert block.modality_weights.shape == (3,)
    torch.testing.assert_close(block.modality_weights.detach(), torch.full((3,), 1 / 3))


def test_hwa_shapes():
    block = HwaBlock(2, 8)
    x = torch.randn(1, 2, 16, 16, 8)
    views = block.aggregate_windows(x)
    assert len(views) == 2
    assert all(v.shape == (1, 4, 16, 16, 8) for v in views)
    assert block(x).shape == (1, 8, 16, 16, 8)


def test_hwa_small_input_is_right_padded_per_branch():
    assert HwaBlock(1, 2)(torch.randn(1, 1, 4, 4, 4)).shape == (1, 2, 4, 4, 4)


def test_hwa_single_modality_has_no_mixing():
    block = HwaBlock(1, 5)
    with torch.no_grad():
        block.modality_weights.fill_(1.0)
    x = torch.randn(2, 1, 8, 8, 8)
    (view,) = block.aggregate_windows(x)
    expected = torch.nn.functional.conv3d(view, block.proj_weight, block.proj_bias)
    torch.testing.assert_close(block(x), expected)


def test_hwa_identical_modalities_average_to_single_view():
    block = HwaBlock(2, 4)
    with torch.no_grad():
        for r in BRANCH_WINDOWS:
            w = getattr(block, f'dw{r}_weight')
            w[1].copy_(w[0])
            b = getattr(block, f'dw{r}_bias')
            b[1].copy_(b[0])
        block.modality_weights.fill_(0.5)
    m = torch.randn(1, 1, 8, 8, 8)
    views = block.aggregate_windows(torch.cat([m, m], dim=1))
    assert torch.equal(block.fuse(views), views[0])


def test_hwa_modality_permutation_is_bitwise_invariant():
    block = HwaBlock(2, 6)
    with torch.no_grad():
        block.modality_weights.copy_(torch.tensor([0.3, -1.7]))
    x = torch.randn(1, 2, 8, 8, 8)
    swapped = HwaBlock(2, 6)
    with torch.no_grad():
        for name, p in block.named_parameters():
            q = dict(swapped.named_parameters())[name]
            if name.startswith('dw') or name == 'modality_weights':
                q.copy_(p.flip(0))
            else:
                q.copy_(p)
    assert torch.equal(block(x), swapped(x.flip(1)))


def permuted_copy(block, perm):
    twin = HwaBlock(block.in_modalities, block.out_channels)
    index = torch.tensor(perm)
    with torch.no_grad():
        for name, q in twin.named_parameters():
            p = dict(block.named_parameters())[name]
            q.copy_(p[index] if name.startswith('dw') or name == 'modality_weights' else p)
    return twin


@pytest.mark.parametrize('modalities', [3, 4])
@pytest.mark.parametrize('seed', range(5))
def test_hwa_cyclic_modality_permutation_is_bitwise_invariant(modalities, seed):
    torch.manual_seed(seed)
    block = HwaBlock(modalities, 6)
    with torch.no_grad():
        block.modality_weights.copy_(torch.randn(modalities))
    x = torch.randn(1, modalities, 8, 8, 8)
    for shift in range(1, modalities):
        perm = [(i + shift) % modalities for i in range(modalities)]
        assert torch.equal(block(x), permuted_copy(block, perm)(x[:, perm]))


def test_hwa_is_linear_in_each_modality():
    block = HwaBlock(2, 3).double()
    zero_biases(block)
    x0 = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    x1 = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
    zeros = torch.zeros_like(x0)
    alpha = -2.5
    lhs = block(torch.cat([alpha * x0, x1], 1))
    rhs = alpha * block(torch.cat([x0, zeros], 1)) + block(torch.cat([zeros, x1], 1))
    torch.testing.assert_close(lhs, rhs)


def test_hwa_rejects_wrong_modality_count():
    with pytest.raises(ShapeError):
        HwaBlock(2, 4)(torch.randn(1, 3, 8, 8, 8))
    with pytest.raises(ConfigError):
        HwaBlock(0, 4)


def test_hwa_gradient():
    block = HwaBlock(2, 3).double()
    x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    tensors = {'x': x}
    tensors.update(dict(block.named_parameters()))
    check_gradients(lambda: block(x).pow(2).sum(), tensors, samples=40)


def test_norm3d_single_voxel_is_affine_only():
    norm = Norm3d(2)
    with torch.no_grad():
        norm.gain.copy_(torch.tensor([2.0, 3.0]))
        norm.bias.copy_(torch.tensor([1.0, -1.0]))
    x = torch.tensor([0.5, 4.0]).view(1, 2, 1, 1, 1)
    torch.testing.assert_close(norm(x).view(-1), torch.tensor([2.0, 11.0]))


def test_sgc_parameter_count():
    assert count_parameters(SgcBlock(6)) == 5 * 36 + 38 * 6


def test_sgc_zero_branches_are_pure_residual():
    block = SgcBlock(4)
    with torch.no_grad():
        for name, p in block.named_parameters():
            if not name.startswith('norm'):
                p.zero_()
    x = torch.randn(2, 4, 5, 4, 3)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize('channels,spatial', [(2, (3, 4, 5)), (8, (2, 2, 2)), (5, (8, 4, 4))])
def test_sgc_preserves_shape(channels, spatial):
    x = torch.randn(1, channels, *spatial)
    assert SgcBlock(channels)(x).shape == x.shape


def test_sgc_gradient():
    block = SgcBlock(4).double()
    x = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    tensors = {'x': x}
    tensors.update(dict(block.named_parameters()))
    check_gradients(lambda: block(x).pow(2).sum(), tensors, samples=40)


def test_tfm_parameter_count():
    c, n = 6, 4
    assert count_parameters(TfmBlock(c, state_size=n)) == 3 * c * c + 9 * c * n + 9 * c


def test_tfm_mamba_sum_and_row_stochastic_attention():
    block = TfmBlock(4, state_size=2)
    x = torch.randn(1, 4, 2, 3, 2)
    mq, mk, mv = block.mamba_views(x)
    weights = block.attention_weights(mq, mk)
    assert weights.shape == (1, 12, 12)
    torch.testing.assert_close(weights.sum(-1), torch.ones(1, 12), rtol=0, atol=1e-6)
    assert block(x).shape == x.shape


def _orders(d, h, w):
    forward = list(itertools.product(range(d), range(h), range(w)))
    inter = [(z, y, q) for y in range(h) for q in range(w) for z in range(d)]
    return {'forward': forward, 'reverse': forward[::-1], 'inter_slice': inter}


def _scan(seq, ssm):
    a = -np.exp(ssm.a_log.detach().numpy())
    wd, bd = ssm.w_delta.detach().numpy(), ssm.b_delta.detach().numpy()
    wb, wc, dg = ssm.w_b.detach().numpy(), ssm.w_c.detach().numpy(), ssm.d.detach().numpy()
    h = np.zeros(a.shape)
    out = []
    for x in seq:
        delta = np.log1p(np.exp(wd @ x + bd))
        h = np.exp(delta[:, None] * a) * h + delta[:, None] * (wb @ x)[None, :] * x[:, None]
        out.append(h @ (wc @ x) + dg * x)
    return out


def tfm_oracle(block, x):
    """Straight-line evaluation of the block from its parameters, one voxel at a time."""
    vol = x.detach().numpy()[0]
    c, d, h, w = vol.shape
    orders = _orders(d, h, w)
    views = []
    for name, ssm in (('forward', block.ssm_forward), ('reverse', block.ssm_reverse),
                      ('inter_slice', block.ssm_inter_slice)):
        order = orders[name]
        ys = _scan([vol[:, z, y, q] for z, y, q in order], ssm)
        out = np.zeros_like(vol)
        for (z, y, q), value in zip(order, ys):
            out[:, z, y, q] = value
        views.append(out)
    mq, mk, mv = views
    mba = mq + mk + mv
    raster = orders['forward']
    q_rows = np.array([mq[:, z, y, k] for z, y, k in raster])
    k_rows = np.array([mk[:, z, y, k] for z, y, k in raster])
    v_rows = np.array([mv[:, z, y, k] for z, y, k in raster])
    logits = q_rows @ k_rows.T / math.sqrt(c)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    att_rows = probs @ v_rows
    att = np.zeros_like(vol)
    for (z, y, k), value in zip(raster, att_rows):
        att[:, z, y, k] = value
    fw = block.fuse_weight.detach().numpy().reshape(c, 2)
    fb = block.fuse_bias.detach().numpy()
    return fw[:, 0, None, None, None] * mba + fw[:, 1, None, None, None] * att + fb[:, None, None, None]


@pytest.mark.parametrize('seed', range(100))
def test_tfm_matches_straight_line_oracle(seed):
    r = np.random.default_rng(seed)
    torch.manual_seed(seed)
    channels, state = int(r.integers(1, 7)), int(r.integers(1, 5))
    mode = 'blocked' if seed % 2 else 'reference'
    block = TfmBlock(channels, state_size=state, scan_mode=mode, scan_chunk=int(r.integers(1, 9))).double()
    with torch.no_grad():
        for p in block.parameters():
            p.add_(0.3 * torch.randn_like(p))
    extents = tuple(int(e) for e in r.integers(1, 5, size=3))
    x = torch.randn(1, channels, *extents, dtype=torch.float64)
    np.testing.assert_allclose(block(x).detach().numpy()[0], tfm_oracle(block, x), atol=1e-6)


def test_tfm_blocked_scan_agrees_with_reference():
    block = TfmBlock(3, state_size=2, scan_mode='blocked', scan_chunk=5).double()
    x = torch.randn(1, 3, 4, 2, 3, dtype=torch.float64)
    blocked = block(x)
    for ssm in (block.ssm_forward, block.ssm_reverse, block.ssm_inter_slice):
        ssm.mode = 'reference'
    torch.testing.assert_close(blocked, block(x), rtol=0, atol=1e-6)


def test_tfm_budget_without_pooling_raises():
    block = TfmBlock(2, state_size=2, attention_budget=4, pooled_attention=False)
    with pytest.raises(ConfigError, match='pooled attention'):
        block(torch.randn(1, 2, 2, 2, 2))


def test_tfm_pooled_attention_over_budget():
    block = TfmBlock(2, state_size=2, attention_budget=4, pooled_attention=True)
    x = torch.randn(1, 2, 2, 2, 2)
    mq, mk, mv = block.mamba_views(x)
    att = block.attention(mq, mk, mv)
    # keys and values collapse to one pooled token, so every query reads its mean
    expected = mv.mean(dim=(2, 3, 4), keepdim=True).expand_as(mv)
    torch.testing.assert_close(att, expected)
    assert block(x).shape == x.shape


def test_tfm_gradient():
    block = TfmBlock(4, state_size=2).double()
    x = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    tensors = {'x': x}
    tensors.update(dict(block.named_parameters()))
    check_gradients(lambda: block(x).pow(2).sum(), tensors, samples=40)
