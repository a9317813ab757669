import itertools
import math

import numpy as np
import pytest
import torch

from hwa_unetr.dataset import PhantomSpec
from hwa_unetr.model import ModelConfig

FD_STEP = 1e-5
FD_TOL = 1e-4


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(in_modalities=2, out_channels=2, base_width=4)


@pytest.fixture
def small_phantom():
    return PhantomSpec(extents=(16, 16, 16), lesion_count=(1, 1), lesion_radius=(2.0, 3.0))


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def check_gradients(fn, tensors, samples=20, seed=0, h=FD_STEP, tol=FD_TOL):
    """Compare autograd against central differences on sampled coordinates.

    ``fn`` returns a scalar tensor; ``tensors`` maps names to float64 leaves
    with ``requires_grad``. Returns the worst relative error seen.
    """
    names = list(tensors)
    leaves = [tensors[n] for n in names]
    analytic = torch.autograd.grad(fn(), leaves, allow_unused=True)
    pool = [(k, i) for k, t in enumerate(leaves) for i in range(t.numel())]
    picks = np.random.default_rng(seed).choice(len(pool), size=min(samples, len(pool)), replace=False)

    worst = 0.0
    with torch.no_grad():
        for p in picks:
            k, i = pool[int(p)]
            flat = leaves[k].detach().view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            grad = analytic[k]
            a = 0.0 if grad is None else grad.reshape(-1)[i].item()
            err = relative_error(a, numeric)
            assert err < tol, f'{names[k]}[{i}]: analytic {a} vs numeric {numeric} (rel. err {err:.2e})'
            worst = max(worst, err)
    return worst


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0), groups=1):
    """Direct nested-loop 3D convolution on numpy arrays."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, d, h, wd = x.shape
    co, cg, kd, kh, kw = w.shape
    pd, ph, pw = padding
    xp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd] = x
    od = (d + 2 * pd - kd) // stride[0] + 1
    oh = (h + 2 * ph - kh) // stride[1] + 1
    ow = (wd + 2 * pw - kw) // stride[2] + 1
    out = np.zeros((n, co, od, oh, ow))
    per_group = co // groups
    for s, o, z, y, q in itertools.product(range(n), range(co), range(od), range(oh), range(ow)):
        g = o // per_group
        acc = 0.0
        for ci in range(cg):
            for i, j, k in itertools.product(range(kd), range(kh), range(kw)):
                acc += w[o, ci, i, j, k] * xp[s, g * cg + ci, z * stride[0] + i, y * stride[1] + j, q * stride[2] + k]
        out[s, o, z, y, q] = acc + (0.0 if b is None else b[o])
    return out


def naive_transposed_conv3d(x, w, b, r):
    """Non-overlapping transposed convolution (stride == kernel == r)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, d, h, wd = x.shape
    co = w.shape[1]
    out = np.zeros((n, co, d * r, h * r, wd * r))
    for s, ci, o, z, y, q in itertools.product(range(n), range(c), range(co), range(d), range(h), range(wd)):
        out[s, o, z * r:(z + 1) * r, y * r:(y + 1) * r, q * r:(q + 1) * r] += x[s, ci, z, y, q] * w[ci, o]
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None, None]
    return out


def naive_instance_norm3d(x, eps, gain, bias):
    """Per-sample, per-channel standardisation with explicit sums over voxels."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for s, c in itertools.product(range(x.shape[0]), range(x.shape[1])):
        voxels = list(np.ndindex(*x.shape[2:]))
        mean = sum(x[s, c][v] for v in voxels) / len(voxels)
        var = sum((x[s, c][v] - mean) ** 2 for v in voxels) / len(voxels)
        for v in voxels:
            out[s, c][v] = (x[s, c][v] - mean) / math.sqrt(var + eps) * gain[c] + bias[c]
    return out


def naive_softmax(x, axis):
    """Row-by-row softmax along ``axis`` with the running max subtracted."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        top = max(row)
        e = [math.exp(v - top) for v in row]
        total = sum(e)
        out[idx] = [v / total for v in e]
    return np.moveaxis(out, -1, axis)
