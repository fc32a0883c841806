"""Indexsort, partition plans, the omni block, and pooling statistics."""

import numpy as np
import pytest

from omninet import autograd as ag
from omninet.attention import init_ffn, init_mha, bind_ffn, bind_mha
from omninet.autograd import ParamSet, Tape, backward, compare_grads, finite_diff_grad
from omninet.efficient import (
    BlockSparseBackend,
    ExactBackend,
    KernelBackend,
    LowRankBackend,
)
from omninet.omni import (
    ConfigError,
    LayerStack,
    OmniParams,
    build_plan,
    combine_final,
    index_sort,
    omni_block,
    pool_fractions,
)
from omninet.tensor import Rng


def make_stack(tape, arrays, ids=None):
    ids = ids if ids is not None else list(range(1, len(arrays) + 1))
    return LayerStack([tape.constant(a) for a in arrays], ids)


def make_omni_params(tape, params, n_heads, prefix="omni"):
    return OmniParams(
        attn=bind_mha(tape, params, f"{prefix}.attn", n_heads),
        ffn=bind_ffn(tape, params, f"{prefix}.ffn"),
    )


def omni_paramset(seed, d, n_heads, d_ff, prefix="omni"):
    ps = ParamSet()
    for k, v in init_mha(Rng(seed), d, n_heads).items():
        ps[f"{prefix}.attn.{k}"] = v
    for k, v in init_ffn(Rng(seed + 1), d, d_ff).items():
        ps[f"{prefix}.ffn.{k}"] = v
    return ps


class TestIndexSort:
    def test_hand_permutation(self):
        # two layers of three tokens: [a1 b1 c1 | a2 b2 c2] -> [a1 a2 b1 b2 c1 c2]
        l1 = np.array([[1.0], [2.0], [3.0]])
        l2 = np.array([[10.0], [20.0], [30.0]])
        tape = Tape()
        sorted_rows, inverse = index_sort(make_stack(tape, [l1, l2]))
        want = np.array([[1.0], [10.0], [2.0], [20.0], [3.0], [30.0]])
        assert np.array_equal(sorted_rows.value, want)
        assert np.array_equal(sorted_rows.value[inverse], np.vstack([l1, l2]))

    def test_single_layer_identity(self):
        x = Rng(0).normal(5, 3)
        tape = Tape()
        sorted_rows, inverse = index_sort(make_stack(tape, [x]))
        assert np.array_equal(sorted_rows.value, x)
        assert np.array_equal(inverse, np.arange(5))

    def test_final_layer_grid_length(self):
        # 12-layer net, single block at the top consuming layers 1..11, N=1024
        plan = build_plan(12, 12)
        consumed = plan.schedule[-1].consumes
        assert consumed == tuple(range(1, 12))
        n, d = 1024, 4
        tape = Tape()
        stack = make_stack(tape, [np.zeros((n, d))] * len(consumed), list(consumed))
        sorted_rows, _ = index_sort(stack)
        assert sorted_rows.shape == (11 * 1024, d)
        assert sorted_rows.shape[0] == 11264

    def test_round_trip_gradients(self):
        params = ParamSet({"a": Rng(1).normal(3, 2), "b": Rng(2).normal(3, 2)})

        def loss(ps):
            tape = Tape()
            vs = tape.bind(ps)
            rows, _ = index_sort(LayerStack([vs["a"], vs["b"]], [1, 2]))
            return float(ag.sum_all(ag.mul(rows, rows)).value)

        tape = Tape()
        vs = tape.bind(params)
        rows, _ = index_sort(LayerStack([vs["a"], vs["b"]], [1, 2]))
        got = backward(ag.sum_all(ag.mul(rows, rows)))
        want = finite_diff_grad(loss, params)
        assert max(compare_grads(got, want).values()) <= 1e-6


class TestBuildPlan:
    def test_single_final_block(self):
        plan = build_plan(12, 12)
        assert plan.omni_layers() == [12]
        assert plan.schedule[11].consumes == tuple(range(1, 12))

    def test_three_blocks(self):
        plan = build_plan(12, 4)
        assert plan.omni_layers() == [4, 8, 12]
        assert plan.schedule[3].consumes == (1, 2, 3)
        assert plan.schedule[7].consumes == (4, 5, 6, 7)
        assert plan.schedule[11].consumes == (8, 9, 10, 11)

    def test_partition_one_every_layer(self):
        plan = build_plan(6, 1)
        assert plan.omni_layers() == [1, 2, 3, 4, 5, 6]
        assert plan.schedule[0].consumes == (0,)  # embedding is the only input
        for i in range(1, 6):
            assert plan.schedule[i].consumes == (i,)

    def test_include_embeddings(self):
        plan = build_plan(4, 4, include_embeddings=True)
        assert plan.schedule[3].consumes == (0, 1, 2, 3)

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError, match="L mod P != 0"):
            build_plan(5, 2)
        with pytest.raises(ConfigError):
            build_plan(4, 5)


class TestOmniBlock:
    def test_single_layer_stack_is_plain_block(self):
        # g=1: indexsort and pooling are identities, so the block is just
        # attention + FFN over the single layer
        d, h, n = 4, 2, 5
        ps = omni_paramset(0, d, h, 8)
        x = Rng(1).normal(n, d)
        tape = Tape()
        out, stats, _ = omni_block(
            make_stack(tape, [x]), ExactBackend(), make_omni_params(tape, ps, h)
        )
        from omninet.attention import exact_mha_block, ffn_block

        t2 = Tape()
        att = exact_mha_block(t2.constant(x), bind_mha(t2, ps, "omni.attn", h))
        want = ffn_block(att, bind_ffn(t2, ps, "omni.ffn"))
        assert np.array_equal(out.value, want.value)
        assert (stats.fractions == 1.0).all()

    def test_dominant_layer_wins_pool(self):
        d, h, n = 4, 2, 3
        ps = omni_paramset(2, d, h, 8)
        base = Rng(3).normal(n, d)
        tape = Tape()
        # make the refined rows of layer 2 dominate elementwise by keeping the
        # block weights near zero and feeding a strictly larger second layer
        for name in ps:
            if "wo" in name or "w_outer" in name:
                ps[name] = ps[name] * 0.0
        stack = make_stack(tape, [base, base + 100.0])
        _, stats, _ = omni_block(stack, ExactBackend(), make_omni_params(tape, ps, h))
        assert np.array_equal(stats.fractions, np.tile([0.0, 1.0], (n, 1)))

    def test_exact_matches_bruteforce_loops(self):
        d, h, n, g = 8, 2, 4, 3
        ps = omni_paramset(4, d, h, 12)
        arrays = [Rng(10 + i).normal(n, d) for i in range(g)]
        tape = Tape()
        out, stats, _ = omni_block(
            make_stack(tape, arrays), ExactBackend(), make_omni_params(tape, ps, h)
        )

        # brute force: loop tokens and layers explicitly
        rows = np.zeros((n * g, d))
        for i in range(n):
            for j in range(g):
                rows[i * g + j] = arrays[j][i]
        t2 = Tape()
        from omninet.attention import exact_mha_block, ffn_block

        att = exact_mha_block(t2.constant(rows), bind_mha(t2, ps, "omni.attn", h))
        refined = ffn_block(att, bind_ffn(t2, ps, "omni.ffn")).value
        want = np.zeros((n, d))
        for i in range(n):
            for c in range(d):
                want[i, c] = max(refined[i * g + j, c] for j in range(g))
        assert np.abs(out.value - want).max() <= 1e-12

    def test_pool_fractions_properties(self):
        d, h, n, g = 6, 3, 5, 4
        ps = omni_paramset(5, d, h, 8)
        arrays = [Rng(20 + i).normal(n, d) for i in range(g)]
        tape = Tape()
        _, stats, _ = omni_block(
            make_stack(tape, arrays), ExactBackend(), make_omni_params(tape, ps, h)
        )
        assert np.abs(stats.fractions.sum(axis=1) - 1.0).max() <= 1e-12
        scaled = stats.fractions * d
        assert np.abs(scaled - np.round(scaled)).max() == 0.0  # multiples of 1/d

    def test_permutation_invariance_of_unmasked_attention(self):
        # permuting sorted rows then un-permuting the output is a no-op
        d, h, m = 6, 2, 8
        ps = omni_paramset(6, d, h, 10)
        rows = Rng(7).normal(m, d)
        perm = Rng(8).permutation(m)
        from omninet.attention import exact_mha_block, ffn_block

        def block(x):
            tape = Tape()
            att = exact_mha_block(tape.constant(x), bind_mha(tape, ps, "omni.attn", h))
            return ffn_block(att, bind_ffn(tape, ps, "omni.ffn")).value

        base = block(rows)
        permuted = block(rows[perm])
        assert np.abs(permuted[np.argsort(perm)] - base).max() <= 1e-12

    def test_causal_lowrank_rejected(self):
        d, h = 4, 2
        ps = omni_paramset(9, d, h, 8)
        tape = Tape()
        stack = make_stack(tape, [Rng(0).normal(4, d), Rng(1).normal(4, d)])
        params = make_omni_params(tape, ps, h)
        params.lowrank_w = tape.param("omni.lowrank_w", Rng(2).normal(8, 2))
        with pytest.raises(ValueError, match="does not support causality"):
            omni_block(stack, LowRankBackend(k=2), params, causal=True)

    def test_map_requires_dense_backend(self):
        d, h = 4, 2
        ps = omni_paramset(11, d, h, 8)
        tape = Tape()
        stack = make_stack(tape, [Rng(3).normal(4, d), Rng(4).normal(4, d)])
        with pytest.raises(ValueError, match="attention map requires dense backend"):
            omni_block(
                stack,
                KernelBackend(),
                make_omni_params(tape, ps, h),
                map_mode="native",
            )

    def test_native_and_oracle_maps(self):
        d, h, n, g = 4, 2, 4, 2
        ps = omni_paramset(12, d, h, 8)
        arrays = [Rng(30 + i).normal(n, d) for i in range(g)]
        tape = Tape()
        _, _, maps = omni_block(
            make_stack(tape, arrays),
            ExactBackend(),
            make_omni_params(tape, ps, h),
            map_mode="native",
        )
        assert len(maps) == h
        for m in maps:
            assert m.shape == (n * g, n * g)
            assert np.abs(m.sum(axis=1) - 1.0).max() <= 1e-12

        for i in range(h):  # keep ReLU kernel features awake at d_k=2
            ps[f"omni.attn.bq.{i}"] = np.full(d // h, 2.0)
            ps[f"omni.attn.bk.{i}"] = np.full(d // h, 2.0)
        t2 = Tape()
        _, _, kmaps = omni_block(
            make_stack(t2, arrays),
            KernelBackend(),
            make_omni_params(t2, ps, h),
            map_mode="dense-oracle",
        )
        for m in kmaps:
            assert (m >= 0).all()
            assert np.abs(m.sum(axis=1) - 1.0).max() <= 1e-9

    def test_causal_grid_perturbation(self):
        d, h, n, g = 4, 2, 4, 2
        ps = omni_paramset(13, d, h, 8)
        arrays = [Rng(40 + i).normal(n, d) for i in range(g)]

        def run(stacks):
            tape = Tape()
            out, _, _ = omni_block(
                make_stack(tape, stacks),
                ExactBackend(),
                make_omni_params(tape, ps, h),
                causal=True,
            )
            return out.value

        base = run(arrays)
        j = 2  # perturb token j in every layer
        bumped = [a.copy() for a in arrays]
        for a in bumped:
            a[j] += 1.0
        out = run(bumped)
        assert np.abs(out[:j] - base[:j]).max() <= 1e-12

    def test_gradients_flow_to_all_layers(self):
        d, h, n, g = 4, 2, 3, 2
        ps = omni_paramset(14, d, h, 6)
        layer_arrays = {f"x{j}": Rng(50 + j).normal(n, d) for j in range(g)}
        all_params = ParamSet({**ps, **layer_arrays})

        def loss(p):
            tape = Tape()
            vs = tape.bind(p)
            stack = LayerStack([vs[f"x{j}"] for j in range(g)], list(range(1, g + 1)))
            out, _, _ = omni_block(stack, ExactBackend(), make_omni_params(tape, p, h))
            return float(ag.sum_all(ag.mul(out, out)).value)

        tape = Tape()
        vs = tape.bind(all_params)
        stack = LayerStack([vs[f"x{j}"] for j in range(g)], list(range(1, g + 1)))
        out, _, _ = omni_block(stack, ExactBackend(), make_omni_params(tape, all_params, h))
        got = backward(ag.sum_all(ag.mul(out, out)))
        want = finite_diff_grad(loss, all_params)
        report = compare_grads(got, want)
        assert max(report.values()) <= 1e-4, report
        for j in range(g):
            assert np.abs(got[f"x{j}"]).max() > 0  # both networks receive gradient

    def test_backend_gradients_match_fd(self):
        d, h, n, g = 4, 2, 4, 2
        backends = [
            ExactBackend(),
            KernelBackend(),
            LowRankBackend(k=3),
            BlockSparseBackend(block_size=2, num_random_blocks=1, rng_seed=7),
        ]
        for backend in backends:
            ps = omni_paramset(15, d, h, 6)
            if isinstance(backend, KernelBackend):
                for i in range(h):  # keep ReLU kernel features awake at d_k=2
                    ps[f"omni.attn.bq.{i}"] = np.full(d // h, 2.0)
                    ps[f"omni.attn.bk.{i}"] = np.full(d // h, 2.0)
            if isinstance(backend, LowRankBackend):
                ps["omni.lowrank_w"] = Rng(16).normal(n * g, backend.k)
            arrays = [Rng(60 + j).normal(n, d) for j in range(g)]

            def build(tape, p):
                op = make_omni_params(tape, p, h)
                if isinstance(backend, LowRankBackend):
                    op.lowrank_w = tape.param("omni.lowrank_w", p["omni.lowrank_w"])
                stack = make_stack(tape, arrays)
                out, _, _ = omni_block(stack, backend, op)
                return ag.sum_all(ag.mul(out, out))

            def loss(p):
                tape = Tape()
                return float(build(tape, p).value)

            tape = Tape()
            got = backward(build(tape, ps))
            want = finite_diff_grad(loss, ps)
            report = compare_grads(got, want)
            assert max(report.values()) <= 1e-4, (backend.kind, report)


class TestCombineFinal:
    def test_zero_cases(self):
        x = Rng(0).normal(3, 4)
        tape = Tape()
        a = tape.constant(x)
        z = tape.constant(np.zeros((3, 4)))
        assert np.array_equal(combine_final(a, z).value, x)
        assert np.array_equal(combine_final(z, a).value, x)

    def test_random_sum(self):
        x = Rng(1).normal(3, 4)
        y = Rng(2).normal(3, 4)
        tape = Tape()
        got = combine_final(tape.constant(x), tape.constant(y)).value
        for i in range(3):
            for j in range(4):
                assert got[i, j] == x[i, j] + y[i, j]


def test_pool_fractions_helper():
    arg = np.array([[0, 1, 1, 2], [2, 2, 2, 2]])
    got = pool_fractions(arg, 3)
    assert np.array_equal(got, [[0.25, 0.5, 0.25], [0.0, 0.0, 1.0]])
