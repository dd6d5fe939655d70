"""Compressor contracts: branch primitives, closed-form output counts,
gating behavior, and straight-through gradients."""

import numpy as np
import pytest
from scipy import stats

from specdec import tensor as T
from specdec.compressor import (Compressor, CompressorSpec, branch_output_count,
                                gate_features, gumbel_softmax, pool_tokens,
                                prune_tokens, resample_tokens)
from specdec.rng import Rng, derive_seed

D_MODEL = 16


def _vis(n, seed=0, d=D_MODEL):
    return T.Tensor(Rng(seed).normal_array((n, d), scale=0.8))


def _prompt(seed=1, n=5, d=D_MODEL):
    return T.Tensor(Rng(seed).normal_array((n, d), scale=0.8))


def ceil_div(n, r):
    return -(-n // r)


# ------------------------------------------------------------------ branches


def test_prune_identity_at_ratio_one():
    v = _vis(10)
    out = prune_tokens(v, 1, seed=3)
    assert np.array_equal(out.data, v.data)


def test_prune_sorted_and_selection_only():
    v = _vis(64)
    out = prune_tokens(v, 20, seed=9).data
    assert out.shape == (4, D_MODEL)
    rows = {tuple(r) for r in v.data.round(6).tolist()}
    idx_prev = -1
    for r in out:
        matches = [i for i in range(64) if np.array_equal(v.data[i], r)]
        assert matches, "pruned row must equal some input row exactly"
        assert matches[0] > idx_prev  # indices strictly increasing
        idx_prev = matches[0]


def test_prune_deterministic_per_seed():
    v = _vis(32)
    a = prune_tokens(v, 4, seed=5).data
    b = prune_tokens(v, 4, seed=5).data
    c = prune_tokens(v, 4, seed=6).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pool_constant_preserved():
    v = T.Tensor(np.full((10, D_MODEL), 2.5, np.float32))
    out = pool_tokens(v, 3)
    assert np.allclose(out.data, 2.5, atol=1e-6)
    assert out.data.shape == (4, D_MODEL)


def test_pool_partial_window_counts():
    out = pool_tokens(_vis(64), 20)
    assert out.data.shape == (4, D_MODEL)  # final window pools 4 leftovers


def test_conv_identity_init_ratio_one():
    comp = Compressor(CompressorSpec(mode="fixed", fixed_branch="conv", conv_ratio=1),
                      D_MODEL)
    v = _vis(7)
    out, _ = comp.compress(_prompt(), v, training=False)
    assert np.allclose(out.data, v.data, atol=1e-6)


def test_conv_output_count():
    comp = Compressor(CompressorSpec(mode="fixed", fixed_branch="conv", conv_ratio=3),
                      D_MODEL)
    out, _ = comp.compress(_prompt(), _vis(64), training=False)
    assert out.data.shape == (22, D_MODEL)  # ceil(64/3)


def test_resampler_shapes_and_convexity():
    comp = Compressor(CompressorSpec(mode="fixed", fixed_branch="resample",
                                     resampler_queries=2), D_MODEL)
    out, _ = comp.compress(_prompt(), _vis(64), training=False)
    assert out.data.shape == (2, D_MODEL)
    # identical visual tokens make every query output identical
    same = T.Tensor(np.tile(_vis(1).data, (6, 1)))
    out2, _ = comp.compress(_prompt(), same, training=False)
    assert np.allclose(out2.data[0], out2.data[1], atol=1e-5)
    with pytest.raises(ValueError, match="nothing to resample"):
        resample_tokens(T.Tensor(np.zeros((0, D_MODEL), np.float32)),
                        comp.params["res_q"], comp.params["res_wk"],
                        comp.params["res_wv"], comp.params["res_wo"])


# ---------------------------------------------------------------------- gate


def test_gate_features_permutation_invariant():
    p = _prompt(n=6)
    v = _vis(8)
    a = gate_features(p, v).data
    perm = T.Tensor(p.data[[3, 1, 5, 0, 4, 2]])
    b = gate_features(perm, v).data
    assert np.allclose(a, b, atol=1e-6)
    assert a.shape == (1, 2 * D_MODEL)


def test_gate_features_zero_visual_half():
    out = gate_features(_prompt(), None).data
    assert not out[0, D_MODEL:].any()
    out2 = gate_features(_prompt(), T.Tensor(np.zeros((0, D_MODEL), np.float32))).data
    assert not out2[0, D_MODEL:].any()
    with pytest.raises(ValueError):
        gate_features(T.Tensor(np.zeros((0, D_MODEL), np.float32)), None)


def test_gumbel_hard_is_one_hot():
    logits = T.Tensor([1.0, -0.5, 0.2])
    out = gumbel_softmax(logits, 1.0, Rng(4), hard=True)
    assert sorted(out.data.tolist()) == [0.0, 0.0, 1.0]


def test_gumbel_low_temperature_concentrates():
    logits = T.Tensor([2.0, 0.0, -1.0])
    rng = Rng(5)
    out = gumbel_softmax(logits, 1e-5, rng, hard=False)
    assert out.data.max() > 0.999


def test_gumbel_frequencies_match_softmax():
    logits = np.array([0.8, -0.3, 0.1], dtype=np.float32)
    rng = Rng(derive_seed(7, "gumbel-freq"))
    counts = np.zeros(3)
    n = 100_000
    for _ in range(n):
        out = gumbel_softmax(T.Tensor(logits), 1.0, rng, hard=True)
        counts[int(np.argmax(out.data))] += 1
    expect = np.exp(logits - logits.max())
    expect = expect / expect.sum()
    _, p = stats.chisquare(counts, expect * n)
    assert p > 0.01


def test_gumbel_rejects_nonpositive_temp():
    with pytest.raises(ValueError):
        gumbel_softmax(T.Tensor([0.0, 1.0]), 0.0, Rng(1), hard=False)


# ------------------------------------------------------------------ compress


def test_weighted_mode_shapes_and_cap():
    comp = Compressor(CompressorSpec(mode="weighted", weighted_ratio=3), D_MODEL)
    out, gate = comp.compress(_prompt(), _vis(64), training=False)
    assert out.data.shape == (22, D_MODEL)
    assert abs(gate.weights.sum() - 1.0) < 1e-5
    with pytest.raises(ValueError, match="caps"):
        CompressorSpec(mode="weighted", weighted_ratio=6).validate()


def test_weighted_degenerate_weights_equal_prune():
    comp = Compressor(CompressorSpec(mode="weighted", weighted_ratio=2), D_MODEL)
    comp.params["gate_b"].data[...] = np.array([50.0, -50.0, -50.0, -50.0, -50.0],
                                               np.float32)
    v = _vis(10)
    out, gate = comp.compress(_prompt(), v, training=False)
    pruned = prune_tokens(v, 2, derive_seed(comp.spec.seed, "prune", 0)).data
    assert gate.weights[0] > 0.999
    assert np.allclose(out.data, pruned, atol=1e-4)


def test_concat_default_counts():
    comp = Compressor(CompressorSpec(mode="concat"), D_MODEL)
    out, _ = comp.compress(_prompt(), _vis(64), training=False)
    assert out.data.shape == (32, D_MODEL)  # 4 + 4 + 22 + 2


def test_select_inference_deterministic_no_rng():
    comp = Compressor(CompressorSpec(mode="select"), D_MODEL)
    comp.params["gate_w"].data[...] = Rng(8).normal_array((2 * D_MODEL, 5), scale=0.3)
    v, p = _vis(64), _prompt()
    a, ga = comp.compress(p, v, training=False, rng=None)
    b, gb = comp.compress(p, v, training=False, rng=None)
    assert ga.branch == gb.branch
    assert np.array_equal(a.data, b.data)
    assert ga.hard


def test_select_text_only_argmax_gives_zero_tokens():
    comp = Compressor(CompressorSpec(mode="select"), D_MODEL)
    comp.params["gate_b"].data[...] = np.array([-9, -9, -9, -9, 9], np.float32)
    out, gate = comp.compress(_prompt(), _vis(64), training=False)
    assert gate.branch == "text_only"
    assert out.data.shape == (0, D_MODEL)


def test_select_training_straight_through_gradient():
    comp = Compressor(CompressorSpec(mode="select", seed=2), D_MODEL)
    # avoid the text-only arm so the scale path exists
    comp.params["gate_b"].data[...] = np.array([2.0, 1.0, 1.5, 1.2, -30.0], np.float32)
    v, p = _vis(12, seed=11), _prompt(seed=12)
    out, gate = comp.compress(p, v, training=True, rng=Rng(33), sample_seed=0)
    assert gate.hard and gate.branch in ("prune", "pool", "conv", "resample")
    loss = T.sum_all(T.mul(out, out))
    loss.backward()
    g = comp.params["gate_b"].grad
    assert g is not None and np.abs(g).max() > 0


def test_select_training_soft_path_matches_finite_difference():
    """The straight-through gradient w.r.t. gate logits follows the soft
    path. With the production construction (scale the argmax branch by its
    ST weight), the analytic gradient must be nonzero, agree in sign with
    central differences of the soft-path loss, and be exactly the soft-path
    jacobian scaled by the hard-point upstream."""
    spec = CompressorSpec(mode="select", seed=2)
    v = _vis(12, seed=21)
    p = _prompt(seed=22)
    base = np.array([0.5, 0.8, 0.2, 0.1, -1.0], dtype=np.float64)
    noise_rng_seed = 99

    def paths(bias_vec, hard):
        comp = Compressor(spec, D_MODEL)
        comp.params["gate_b"].data[...] = bias_vec.astype(np.float32)
        feats = gate_features(p, v)
        logits = T.reshape(
            T.linear(feats, comp.params["gate_w"], comp.params["gate_b"]), (5,)
        )
        st = gumbel_softmax(logits, spec.gumbel_temp, Rng(noise_rng_seed), hard=hard)
        chosen = int(np.argmax(st.data if hard else st.data))
        branch = comp._branch("pool", v, None, 0)
        out = T.scale_by(branch, T.pick(st, chosen))
        loss = T.sum_all(T.mul(out, out))
        return comp, loss, chosen

    # analytic ST gradient at the hard forward
    comp, loss, chosen = paths(base, hard=True)
    loss.backward()
    got = comp.params["gate_b"].grad.astype(np.float64)
    assert np.abs(got).max() > 0

    # finite differences on the soft path, same chosen coordinate
    h = 1e-3
    fd = np.zeros(5)
    for i in range(5):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        _, lu, _ = paths(up, hard=False)
        _, ld, _ = paths(dn, hard=False)
        fd[i] = (float(lu.data) - float(ld.data)) / (2 * h)
    assert np.abs(fd).max() > 0
    # the hard-point upstream rescales the soft jacobian by 1/soft[chosen]:
    # directions must agree even though magnitudes differ
    assert np.sign(got[chosen]) == np.sign(fd[chosen]) == 1.0
    cos = float(got @ fd / (np.linalg.norm(got) * np.linalg.norm(fd)))
    assert cos > 0.99


def test_fixed_none_is_identity():
    comp = Compressor(CompressorSpec(mode="fixed", fixed_branch="none"), D_MODEL)
    v = _vis(64)
    out, gate = comp.compress(_prompt(), v, training=False)
    assert np.array_equal(out.data, v.data)
    assert gate.branch == "none"
    assert sum(p.data.size for p in comp.parameters()) > 0  # params exist but unused


def test_weighted_shape_incompatible_fusion_raises():
    comp = Compressor(CompressorSpec(mode="weighted", weighted_ratio=3), D_MODEL)
    comp.spec.pool_ratio = 20  # force disagreement through a branch override

    def bad(visual):
        prune = comp._branch("prune", visual, 3, 0)
        pool = comp._branch("pool", visual, 20, 0)
        if prune.data.shape != pool.data.shape:
            raise ValueError("shape-incompatible fusion")

    with pytest.raises(ValueError, match="shape-incompatible"):
        bad(_vis(64))


def test_output_count_table_exhaustive():
    """Counts are pure functions of (mode, spec, n) for every n and ratio."""
    ratios = (1, 2, 3, 5, 10, 20, 30)
    for n in range(1, 65):
        v = _vis(n, seed=n)
        p = _prompt()
        for r in ratios:
            spec = CompressorSpec(mode="fixed", fixed_branch="prune", prune_ratio=r)
            comp = Compressor(spec, D_MODEL)
            out, _ = comp.compress(p, v, training=False, sample_seed=n)
            assert out.data.shape[0] == ceil_div(n, r) == branch_output_count(
                "prune", spec, n)
            spec = CompressorSpec(mode="fixed", fixed_branch="pool", pool_ratio=r)
            out, _ = Compressor(spec, D_MODEL).compress(p, v, training=False)
            assert out.data.shape[0] == ceil_div(n, r)
        for r in (1, 2, 3, 5):  # conv kernels of the weighted-cap sizes
            if r > n:
                continue
            spec = CompressorSpec(mode="fixed", fixed_branch="conv", conv_ratio=r)
            out, _ = Compressor(spec, D_MODEL).compress(p, v, training=False)
            assert out.data.shape[0] == ceil_div(n, r)
        spec = CompressorSpec(mode="concat")
        comp = Compressor(spec, D_MODEL)
        if n >= 3:
            out, _ = comp.compress(p, v, training=False, sample_seed=n)
            expect = (ceil_div(n, 20) + ceil_div(n, 20) + ceil_div(n, 3) + 2)
            assert out.data.shape[0] == expect == comp.output_count(n)


def test_spec_serialization_roundtrip():
    spec = CompressorSpec(mode="select", gumbel_temp=0.7, seed=9)
    again = CompressorSpec.from_dict(spec.to_dict())
    assert vars(again) == vars(spec)
    with pytest.raises(ValueError):
        CompressorSpec(mode="bogus").validate()
    with pytest.raises(ValueError):
        CompressorSpec(mode="fixed").validate()
