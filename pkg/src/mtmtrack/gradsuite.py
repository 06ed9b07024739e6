"""The full finite-difference suite: every differentiable op and composite block on three shapes.

Elementary ops use inputs drawn away from the kinks of ReLU, |x|, max
pooling and bilinear interpolation. Composite blocks are probed with a
larger step (float32 round-off would otherwise dominate); probes that
straddle a kink are shortened or skipped by the checker.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .bev import RegionSpec, encode_bev, init_bev_weights
from .bmp import BmpConfig, attention_layer, init_bmp_weights
from .gradcheck import GradCheckReport, grad_check
from .irm import IrmConfig, build_corr, init_head_weights, init_irm_weights, refine_step, regress_heads
from .rim import RimConfig, deformable_aggregate, iam_cross, init_rim_weights

SHAPES = ((2, 3), (3, 4), (4, 2))


def _projector(out: T.Tensor, seed: int) -> T.Tensor:
    """Flat ``out * R`` with a fixed random ``R`` so every output entry is exercised.

    The checker sums the result in float64, which keeps float32 reduction
    error out of the finite differences.
    """
    r = np.random.default_rng(seed + 7).normal(size=out.shape).astype(np.float32)
    return (out * r).reshape(-1)


def _joined(*parts: T.Tensor) -> T.Tensor:
    return T.concat(list(parts), 0)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x.astype(np.float32)


def _params(*arrays):
    return [T.parameter(a) for a in arrays]


def op_cases(seed: int) -> list[tuple[str, Callable, list[T.Tensor]]]:
    rng = np.random.default_rng(seed)
    m, n = SHAPES[seed % len(SHAPES)]
    k = m + n
    nrm = lambda *s: rng.normal(size=s).astype(np.float32)  # noqa: E731
    cases = []

    a, b = _params(nrm(m, n), nrm(m, n))
    cases.append(("add", lambda a, b: _projector(a + b, seed), [a, b]))
    a, b = _params(nrm(m, n), nrm(1, n))
    cases.append(("sub_broadcast", lambda a, b: _projector(a - b, seed), [a, b]))
    a, b = _params(nrm(m, n), nrm(m, n))
    cases.append(("mul", lambda a, b: _projector(a * b, seed), [a, b]))
    (a,) = _params(_away_from_zero(rng, (m, n)))
    cases.append(("relu", lambda a: _projector(T.relu(a), seed), [a]))
    (a,) = _params(nrm(m, n))
    cases.append(("sigmoid", lambda a: _projector(T.sigmoid(a), seed), [a]))
    (a,) = _params(_away_from_zero(rng, (m, n)))
    cases.append(("abs", lambda a: _projector(T.tabs(a), seed), [a]))
    y, x = _params(nrm(m, n), _away_from_zero(rng, (m, n), 0.3))
    cases.append(("atan2", lambda y, x: _projector(T.atan2(y, x), seed), [y, x]))
    (a,) = _params(nrm(m, n, 2))
    cases.append(("sum_axis", lambda a: _projector(a.sum(axis=1), seed), [a]))
    (a,) = _params(nrm(m, n, 2))
    cases.append(("mean_axis", lambda a: _projector(a.mean(axis=(0, 2)), seed), [a]))
    (a,) = _params(nrm(m, n))
    cases.append(("reshape", lambda a: _projector(a.reshape(n, m), seed), [a]))
    (a,) = _params(nrm(m, n, 2))
    cases.append(("transpose", lambda a: _projector(a.transpose(2, 0, 1), seed), [a]))
    (a,) = _params(nrm(m + 1, n))
    idx = rng.integers(0, m + 1, size=5)
    cases.append(("getitem", lambda a: _joined(_projector(a[idx], seed), _projector(a[1:, :1], seed + 1)), [a]))
    a, b = _params(nrm(m, n), nrm(m, 2))
    cases.append(("concat", lambda a, b: _projector(T.concat([a, b], -1), seed), [a, b]))
    (a,) = _params(nrm(m, n + 2))
    cases.append(("split", lambda a: _joined(_projector(T.split(a, [n, 2], -1)[0] * 2.0, seed),
                                           _projector(T.split(a, [n, 2], -1)[1], seed + 1)), [a]))
    a, b = _params(nrm(m, k), nrm(k, n))
    cases.append(("matmul", lambda a, b: _projector(a @ b, seed), [a, b]))
    a, b = _params(nrm(2, m, k), nrm(k, n))
    cases.append(("matmul_batched", lambda a, b: _projector(a @ b, seed), [a, b]))
    (a,) = _params(nrm(m, k))
    cases.append(("softmax", lambda a: _projector(T.softmax(a, -1), seed), [a]))
    x, g, bb = _params(nrm(m, k), 1 + 0.1 * nrm(k), 0.1 * nrm(k))
    cases.append(("layer_norm", lambda x, g, bb: _projector(T.layer_norm(x, g, bb), seed), [x, g, bb]))
    x, w, bb = _params(nrm(m, k), nrm(k, n), nrm(n))
    cases.append(("linear", lambda x, w, bb: _projector(T.linear(x, w, bb), seed), [x, w, bb]))
    stride = 1 + seed % 2
    x, w, bb = _params(nrm(m + 3, n + 3, 2), 0.5 * nrm(3, 3, 2, 3), nrm(3))
    cases.append((f"conv2d_s{stride}", lambda x, w, bb: _projector(T.conv2d(x, w, bb, stride=stride, pad=1), seed),
                  [x, w, bb]))
    (x,) = _params(nrm(4, 4, m))
    cases.append(("pool_avg", lambda x: _joined(_projector(T.pool2d(x, "avg", global_=False, size=2), seed),
                                              _projector(T.pool2d(x, "avg"), seed + 1)), [x]))
    # distinct, well-separated values so the argmax is stable under +-h
    (x,) = _params(rng.permutation(16 * m).reshape(4, 4, m).astype(np.float32) * 0.05)
    cases.append(("pool_max", lambda x: _joined(_projector(T.pool2d(x, "max", global_=False, size=2), seed),
                                              _projector(T.pool2d(x, "max"), seed + 1)), [x]))
    H, L = m + 3, n + 3
    cell = rng.integers(0, [H - 1, L - 1], size=(6, 2))
    frac = rng.uniform(0.1, 0.9, size=(6, 2))
    f, c = _params(nrm(H, L, 2), (cell + frac).astype(np.float32))
    cases.append(("bilinear_sample", lambda f, c: _projector(T.bilinear_sample(f, c), seed), [f, c]))
    f, c = _params(nrm(2, H, L, 1), (np.stack([cell, cell[::-1]]) + frac).astype(np.float32))
    cases.append(("bilinear_sample_batched", lambda f, c: _projector(T.bilinear_sample(f, c), seed), [f, c]))
    return cases


def block_cases(seed: int) -> list[tuple[str, Callable, list[T.Tensor]]]:
    rng = np.random.default_rng(100 + seed)
    m, n = SHAPES[seed % len(SHAPES)]
    cases = []

    bcfg = BmpConfig(history_len=m + 1, token_dim=8, heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=12)
    w = init_bmp_weights(bcfg, rng)
    tok = T.parameter(rng.normal(size=(2, m, 8)))
    wq = w["bmp.enc0.wq"]
    w1 = w["bmp.enc0.ffn.w1"]
    cases.append(("bmp_encoder_layer", lambda tok, wq, w1: _projector(attention_layer(tok, tok, w, "bmp.enc0", bcfg), seed),
                  [tok, wq, w1]))

    D = 4
    rcfg = RimConfig(channels=D, heads=2, points=2, levels=2)
    rw = init_rim_weights(rcfg, rng)
    H, L = 4 + 2 * (seed % 2), 4 + 2 * ((seed + 1) % 2)
    fx, fs = T.parameter(rng.normal(size=(H, L, D))), T.parameter(rng.normal(size=(H, L, D)))
    iw = rw["rim.iam0.w"]
    cases.append(("iam", lambda fx, fs, iw: _projector(T.concat(list(iam_cross(fx, fs, rw, 0)), -1), seed),
                  [fx, fs, iw]))

    # deformable aggregation on a fixed pyramid; offsets trained away from zero so samples are fractional
    pyr_in = [(T.parameter(rng.normal(size=(H // 2 ** i, L // 2 ** i, D))),
               T.parameter(rng.normal(size=(H // 2 ** i, L // 2 ** i, D)))) for i in range(2)]
    rw["rim.deform.off.w"].data[:] = rng.normal(0, 0.05, rw["rim.deform.off.w"].shape)
    rw["rim.deform.off.b"].data[:] += rng.uniform(0.13, 0.37, rw["rim.deform.off.b"].shape).astype(np.float32)
    rw["rim.deform.att.w"].data[:] = rng.normal(0, 0.3, rw["rim.deform.att.w"].shape)
    flat_in = [t for pair in pyr_in for t in pair]
    ow, aw, outw = rw["rim.deform.off.w"], rw["rim.deform.att.w"], rw["rim.deform.out.w"]

    def deform(*args):
        ts = args[:4]
        pyr = [(ts[0], ts[1]), (ts[2], ts[3])]
        fx_hat, fs_hat = deformable_aggregate(pyr, rw, rcfg)
        return _projector(T.concat([fx_hat, fs_hat], -1), seed)
    cases.append(("deformable_aggregate", deform, [*flat_in, ow, aw, outw]))

    icfg = IrmConfig(iterations=1, radius=1, hidden=8, head_hidden=4)
    iw_ = init_irm_weights(icfg, rng)
    iw_["irm.out.w"].data[:] *= 50.0
    hw = init_head_weights(D, 4, rng)
    Hs, Ls = 4 + seed % 2, 4
    fxs, fss = T.parameter(rng.normal(size=(Hs, Ls, D))), T.parameter(rng.normal(size=(Hs, Ls, D)))
    cells = rng.uniform(-1, 1, size=(Hs, Ls, 2))
    mot = T.parameter(((np.round(cells) + rng.uniform(0.2, 0.8, size=(Hs, Ls, 2)) * np.sign(cells + 1e-9)) * 0.1)
                      .astype(np.float32))
    cw, ow_ = iw_["irm.corr.w"], iw_["irm.out.w"]

    def step(fxs, fss, mot, cw, ow_):
        corr = build_corr(fxs, fss)
        return _projector(refine_step(mot, corr, iw_, icfg, (0.1, 0.1)), seed)
    cases.append(("refine_step", step, [fxs, fss, mot, cw, ow_]))

    fh = T.parameter(rng.normal(size=(Hs, Ls, D)))
    zw, yw = hw["heads.z.w1"], hw["heads.yaw.w2"]

    def heads(fh, zw, yw):
        maps = regress_heads(fh, hw)
        return _projector(T.concat([maps.z, maps.theta], -1), seed)
    cases.append(("heads", heads, [fh, zw, yw]))

    spec = RegionSpec(x_range=(-0.4, 0.4), y_range=(-0.4, 0.4), z_range=(0.0, 0.4), voxel_size=(0.1, 0.1, 0.2))
    bw = init_bev_weights(spec, 3, rng)
    vox = T.parameter(rng.normal(size=(*spec.bev_shape, 10)))
    c1 = bw["bev.conv1.w"]
    cases.append(("bev_encoder", lambda vox, c1: _projector(encode_bev(vox, bw, spec), seed), [vox, c1]))
    return cases


def run_suite(seeds=(0, 1, 2), rel_tol: float = 1e-3, max_checks: int = 24,
              log: Callable[[GradCheckReport], None] | None = None) -> list[GradCheckReport]:
    """Check every case for each seed (one shape per seed); at most ``max_checks`` probes per input."""
    reports = []
    for s in seeds:
        for cases, h in ((op_cases(s), 1e-3), (block_cases(s), 1e-2)):
            for name, fn, inputs in cases:
                r = grad_check(fn, inputs, rel_tol=rel_tol, h=h, op_name=f"{name}[{s}]",
                               max_checks=max_checks, seed=s)
                reports.append(r)
                if log is not None:
                    log(r)
    return reports
