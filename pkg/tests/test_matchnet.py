"""Matching network: shape contracts, sharing, superposition, training step."""

import numpy as np
import pytest

from pamstereo import Tensor, precision
from pamstereo.fileio import RunConfig
from pamstereo.losses import LossWeights
from pamstereo.matchnet import PasmConfig, PasmNet, stack_pairs, train_step_pasm
from pamstereo.ops import resize_volume
from pamstereo.training import derive_seed, synth_match_batch
from pamstereo.synth import gen_stereo_pair, random_scene


SMALL = PasmConfig(channels=8, blocks_per_stage=2, refine_channels=4)


def small_net(seed=0, **kw):
    cfg = PasmConfig(channels=8, blocks_per_stage=2, refine_channels=4, **kw)
    return PasmNet(cfg, seed=seed)


def batch(rng, b=1, h=32, w=64, c=1):
    return (Tensor(rng.uniform(0, 1, size=(b, c, h, w))),
            Tensor(rng.uniform(0, 1, size=(b, c, h, w))))


# -- extraction -----------------------------------------------------------------

def test_pyramid_extent_halving_chain(rng):
    net = small_net()
    img = Tensor(rng.uniform(0, 1, size=(1, 1, 64, 128)))
    fp = net.extract(img)
    assert fp.f1.data.shape[2:] == (4, 8)
    assert fp.f2.data.shape[2:] == (8, 16)
    assert fp.f3.data.shape[2:] == (16, 32)
    assert fp.f4.data.shape[2:] == (32, 64)


def test_identical_views_identical_pyramids(rng):
    net = small_net()
    img = Tensor(rng.uniform(0, 1, size=(1, 1, 32, 64)))
    a = net.extract(img)
    b = net.extract(Tensor(img.data.copy()))
    for lvl in range(1, 5):
        assert np.array_equal(a.level(lvl).data, b.level(lvl).data)


def test_extract_rejects_tiny_inputs(rng):
    net = small_net()
    with pytest.raises(ValueError):
        net.extract(Tensor(rng.uniform(size=(1, 1, 8, 8))))


def test_forward_deterministic(rng):
    net = small_net()
    l, r = batch(rng)
    a = net.forward(l, r)
    b = net.forward(l, r)
    assert np.array_equal(a.refined.data.data, b.refined.data.data)
    for sa, sb in zip(a.stages, b.stages):
        assert np.array_equal(sa.attn_r2l.data.data, sb.attn_r2l.data.data)


# -- cascade -------------------------------------------------------------------

def test_stage_extents_quarter_resolution(rng):
    net = small_net()
    l, r = batch(rng, h=64, w=128)
    fwd = net.forward(l, r)
    last = fwd.stages[-1]
    assert last.cost_r2l.shape == (1, 16, 32, 32)
    assert fwd.refined.data.data.shape == (1, 1, 64, 128)


def test_single_stage_variant_runs(rng):
    net = small_net(stages=1)
    l, r = batch(rng)
    fwd = net.forward(l, r)
    assert len(fwd.stages) == 1
    assert fwd.refined.data.data.shape == l.data.shape


def test_zero_qk_gives_uniform_attention(rng):
    net = small_net()
    for name, p in net.params.items():
        if "query" in name or "key" in name:
            p.value.data[:] = 0.0
    l, r = batch(rng)
    fwd = net.forward(l, r)
    for st in fwd.stages:
        w = st.attn_r2l.shape[3]
        assert np.allclose(st.attn_r2l.data.data, 1.0 / w, atol=1e-6)


def test_attention_rows_stochastic_everywhere(rng):
    net = small_net()
    l, r = batch(rng)
    fwd = net.forward(l, r)
    for st in fwd.stages:
        st.attn_r2l.validate(tol=1e-5)
        st.attn_l2r.validate(tol=1e-5)


def test_block_mirror_symmetry(rng):
    """Swapping the views swaps the two directional costs."""
    net = small_net()
    l, r = batch(rng)
    fwd_ab = net.forward(l, r)
    fwd_ba = net.forward(r, l)
    for sa, sb in zip(fwd_ab.stages, fwd_ba.stages):
        assert np.allclose(sa.cost_r2l.data.data, sb.cost_l2r.data.data, atol=1e-5)
        assert np.allclose(sa.cost_l2r.data.data, sb.cost_r2l.data.data, atol=1e-5)


def test_cost_superposition_through_stages(rng):
    """With every other block's query/key zeroed, the final cost equals the
    surviving block's logits carried through the remaining upsamplings."""
    with precision("f64"):
        net = small_net(seed=3)
        keep = (1, 2)  # stage 1, block 2
        for name, p in net.params.items():
            if ("query" in name or "key" in name) and f"s{keep[0]}b{keep[1]}" not in name:
                p.value.data[:] = 0.0
        l, r = batch(rng)
        fp_l = net.extract(l)
        fp_r = net.extract(r)
        stages, records = net.cascade(fp_l, fp_r, collect_blocks=True)
        contrib = Tensor(records[keep][0])
        for s in range(keep[0] + 1, net.cfg.stages + 1):
            hs, ws = stages[s - 1].cost_r2l.shape[1:3]
            contrib = resize_volume(contrib, (hs, ws, ws))
        assert np.allclose(stages[-1].cost_r2l.data.data, contrib.data, atol=1e-8)


def test_two_block_cost_is_sum_of_per_block_terms(rng):
    """On a single row, the cascaded cost equals the sum of each block's
    query/key similarity terms, recomputed with plain scalar loops."""
    with precision("f64"):
        net = PasmNet(PasmConfig(channels=8, blocks_per_stage=2,
                                 refine_channels=4, stages=1), seed=9)
        C = net.cfg.channels
        W = 9
        f_l = rng.normal(size=(1, C, 1, W))
        f_r = rng.normal(size=(1, C, 1, W))

        def conv_row(x, wname, bname):
            w = net.params[wname].value.data
            b = net.params[bname].value.data
            out = np.zeros((1, C, 1, W))
            for co in range(C):
                for j in range(W):
                    acc = b[co]
                    for ci in range(C):
                        for t in (-1, 0, 1):
                            jj = j + t
                            if 0 <= jj < W:
                                acc += x[0, ci, 0, jj] * w[co, ci, 1, t + 1]
                    out[0, co, 0, j] = acc
            return np.where(out >= 0, out, 0.1 * out)

        def psi(name, a, b):
            wq = net.params[f"{name}.query.w"].value.data.reshape(C, C)
            wk = net.params[f"{name}.key.w"].value.data.reshape(C, C)
            q = np.einsum("oc,bchw->bohw", wq, a)
            k = np.einsum("oc,bchw->bohw", wk, b)
            out = np.zeros((1, 1, W, W))
            for j in range(W):
                for m in range(W):
                    out[0, 0, j, m] = sum(q[0, c, 0, j] * k[0, c, 0, m] for c in range(C))
            return out

        cur_l, cur_r = f_l, f_r
        expected = np.zeros((1, 1, W, W))
        for b in (1, 2):
            name = f"cascade.s1b{b}"
            g_l = conv_row(conv_row(cur_l, f"{name}.feat_a.w", f"{name}.feat_a.b"),
                           f"{name}.feat_b.w", f"{name}.feat_b.b")
            g_r = conv_row(conv_row(cur_r, f"{name}.feat_a.w", f"{name}.feat_a.b"),
                           f"{name}.feat_b.w", f"{name}.feat_b.b")
            expected += psi(name, g_l, g_r)
            cur_l, cur_r = cur_l + g_l, cur_r + g_r

        zeros = Tensor(np.zeros((1, 1, W, W)))
        fl, fr, c_r2l, _ = net._block(1, 1, Tensor(f_l), Tensor(f_r), zeros,
                                      Tensor(np.zeros((1, 1, W, W))))
        _, _, c_r2l, _ = net._block(1, 2, fl, fr, c_r2l,
                                    Tensor(np.zeros((1, 1, W, W))))
        assert np.allclose(c_r2l.data, expected, atol=1e-9)


def test_range_mask_bounds_all_stages(rng):
    net = small_net(d_max=16)
    l, r = batch(rng, h=64, w=128)
    fwd = net.forward(l, r)
    for st in fwd.stages:
        d_full = st.d_hat.data.data * st.to_full
        assert d_full.min() >= -1e-3
        assert d_full.max() <= 16.0 + 1e-3


def test_pad_and_crop_for_odd_extents(rng):
    net = small_net()
    l, r = batch(rng, h=40, w=72)  # not divisible by 16
    fwd = net.forward(l, r)
    assert fwd.refined.data.data.shape == (1, 1, 40, 72)


# -- refinement -----------------------------------------------------------------

def test_confidence_zero_returns_upsampled_initial(rng):
    net = small_net()
    net.params["refine.head.b"].value.data[1] = -1e4  # sigmoid -> 0
    l, r = batch(rng)
    fwd = net.forward(l, r)
    from pamstereo.ops import bilinear_resize
    up = bilinear_resize(fwd.d_initial.data, *l.data.shape[2:]).data * 4.0
    assert np.allclose(fwd.refined.data.data, up, atol=1e-5)
    assert np.allclose(fwd.confidence.data, 0.0, atol=1e-4)


def test_confidence_one_returns_residual_branch(rng):
    net = small_net()
    net.params["refine.head.b"].value.data[1] = 1e4  # sigmoid -> 1
    l, r = batch(rng)
    fwd = net.forward(l, r)
    assert np.allclose(fwd.confidence.data, 1.0, atol=1e-4)
    # convex blend collapses onto the residual head: re-run fuse equation
    from pamstereo.ops import bilinear_resize
    up = bilinear_resize(fwd.d_initial.data, *l.data.shape[2:]).data * 4.0
    blend = (1 - fwd.confidence.data) * up + fwd.confidence.data * fwd.refined.data.data
    assert np.allclose(fwd.refined.data.data, blend, atol=1e-5)


def test_refined_matches_fuse_equation(rng):
    net = small_net()
    l, r = batch(rng)
    fwd = net.forward(l, r)
    from pamstereo.ops import bilinear_resize
    up = bilinear_resize(fwd.d_initial.data, *l.data.shape[2:]).data * 4.0
    con = fwd.confidence.data
    # reconstruct the residual head from the blend, then re-blend
    res = (fwd.refined.data.data - (1 - con) * up) / np.maximum(con, 1e-9)
    blend = (1 - con) * up + con * res
    assert np.allclose(blend, fwd.refined.data.data, atol=1e-4)


# -- training -------------------------------------------------------------------

def train_cfg(**kw):
    base = dict(height=32, width=64, batch=2, max_disp=8, net_channels=8)
    base.update(kw)
    return RunConfig(**base)


def test_zero_learning_rate_keeps_parameters(rng):
    net = small_net()
    cfg = train_cfg()
    l, r = synth_match_batch(cfg, 0)
    before = {k: p.value.data.copy() for k, p in net.params.items()}
    bd = train_step_pasm(net, l, r, LossWeights(), lr=0.0)
    assert np.isfinite(bd.total)
    for k, p in net.params.items():
        assert np.array_equal(before[k], p.value.data), k


def test_every_parameter_receives_gradient(rng):
    from pamstereo import Tape
    from pamstereo.losses import photometric_loss, smoothness_loss, total_unsup_loss, \
        pam_photometric, pam_smoothness, pam_cycle, warp_with_disparity, LossWeights
    from pamstereo.matchnet import _nearest_upsample_mask
    from pamstereo.ops import bilinear_resize

    net = small_net()
    cfg = train_cfg()
    l, r = synth_match_batch(cfg, 3)
    w = LossWeights()
    from pamstereo.matchnet import train_step_pasm as step
    # run the loss graph without the optimizer to inspect gradients
    from pamstereo import Tape
    net.zero_grads()
    with Tape() as tape:
        fwd = net.forward(l, r)
        warped = warp_with_disparity(r, fwd.refined)
        v_full = _nearest_upsample_mask(fwd.stages[-1].v_left, l.data.shape[2:])
        lp = photometric_loss(l, warped, v_full)
        ls = smoothness_loss(fwd.refined, l)
        lpam = []
        for st in fwd.stages:
            hs, ws = st.attn_r2l.shape[1], st.attn_r2l.shape[2]
            il, ir = bilinear_resize(l, hs, ws), bilinear_resize(r, hs, ws)
            lpam.append(pam_photometric(il, ir, st.attn_r2l, st.attn_l2r, st.v_left, st.v_right)
                        + pam_smoothness([st.attn_r2l, st.attn_l2r])
                        + pam_cycle(st.attn_r2l, st.attn_l2r, st.v_left, st.v_right))
        bd = total_unsup_loss(lp, ls, lpam, w)
        tape.backward(bd.total_tensor)
    for name, p in net.params.items():
        assert p.value.grad is not None, f"{name} got no gradient"
        assert np.any(p.value.grad != 0.0), f"{name} gradient all zero"


def test_breakdown_total_is_weighted_sum(rng):
    net = small_net()
    cfg = train_cfg()
    l, r = synth_match_batch(cfg, 1)
    w = LossWeights()
    bd = train_step_pasm(net, l, r, w, lr=1e-3)
    weights = {"lp": 1.0, "ls": w.lambda_s}
    for i, sw in enumerate(w.scale_weights, start=1):
        weights[f"lpam{i}"] = w.lambda_pam * sw
    bd.verify(weights)


def test_overfit_single_batch_loss_drops(rng):
    """Repeated steps on one fixed batch cut the loss by at least 30%."""
    net = small_net(seed=1)
    cfg = train_cfg()
    l, r = synth_match_batch(cfg, 0)
    w = LossWeights()
    first = train_step_pasm(net, l, r, w, lr=2e-3).total
    last = first
    for _ in range(199):
        last = train_step_pasm(net, l, r, w, lr=2e-3).total
    assert last <= 0.7 * first, (first, last)


def test_training_is_deterministic(rng):
    cfg = train_cfg(seed=11)
    outs = []
    for _ in range(2):
        net = small_net(seed=11)
        w = LossWeights()
        for step in range(3):
            l, r = synth_match_batch(cfg, step)
            bd = train_step_pasm(net, l, r, w, lr=1e-3)
        outs.append({k: p.value.data.copy() for k, p in net.params.items()})
    for k in outs[0]:
        assert np.array_equal(outs[0][k], outs[1][k]), k


def test_ground_truth_never_consulted(rng):
    """Corrupting ground-truth disparity must not change the update."""
    cfg = train_cfg(seed=5)
    samples = [gen_stereo_pair(random_scene(32, 64, seed=derive_seed(5, 0, i), max_disp=8))
               for i in range(2)]
    results = []
    for corrupt in (False, True):
        net = small_net(seed=5)
        mod = samples
        if corrupt:
            for s in mod:
                s.d_gt.data.data[:] = 1e6
        l, r = stack_pairs(mod)
        bd = train_step_pasm(net, l, r, LossWeights(), lr=1e-3)
        results.append(bd.total)
    assert results[0] == results[1]
