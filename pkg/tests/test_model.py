"""Model assembly: schedules, heads, parity, determinism, checkpoints."""

import numpy as np
import pytest

from omninet import autograd as ag
from omninet.attention import bind_ffn, bind_mha, build_causal_mask, exact_mha_block, ffn_block
from omninet.autograd import ParamSet, Tape, backward, compare_grads, finite_diff_grad
from omninet.efficient import (
    BlockSparseBackend,
    ExactBackend,
    KernelBackend,
    LowRankBackend,
)
from omninet.model import (
    ModelConfig,
    OmniLayerDiag,
    forward_classifier,
    forward_lm,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
    sinusoidal_encoding,
)
from omninet.omni import ConfigError
from omninet.tensor import Rng


def lm_config(**overrides):
    base = dict(
        vocab_size=11,
        d_model=8,
        n_heads=2,
        d_ff=16,
        n_layers=4,
        partition=2,
        max_len=16,
        task="lm",
    )
    base.update(overrides)
    return ModelConfig(**base)


def clf_config(**overrides):
    base = dict(
        vocab_size=11,
        d_model=8,
        n_heads=2,
        d_ff=16,
        n_layers=4,
        partition=2,
        max_len=16,
        task="classifier",
        n_classes=5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def run_lm(cfg, params, tokens, **kw):
    tape = Tape()
    return forward_lm(tape, params, cfg, tokens, **kw).value


def run_clf(cfg, params, tokens, **kw):
    tape = Tape()
    return forward_classifier(tape, params, cfg, tokens, **kw).value


def vanilla_stack_logits(cfg, params, tokens):
    """Independently assembled plain transformer using the same weights."""
    tape = Tape()
    tokens = np.asarray(tokens, dtype=np.int64)
    table = tape.param("emb.table", params["emb.table"])
    rows = ag.scale(ag.take_rows(table, tokens), np.sqrt(cfg.d_model))
    rows = ag.add(rows, tape.constant(sinusoidal_encoding(cfg.max_len, cfg.d_model)[: tokens.size]))
    mask = build_causal_mask(tokens.size)
    x = rows
    for i in range(cfg.n_layers):
        attn = bind_mha(tape, params, f"layers.{i}.attn", cfg.n_heads)
        ffn = bind_ffn(tape, params, f"layers.{i}.ffn")
        x = ffn_block(exact_mha_block(x, attn, mask), ffn)
    w = tape.param("head.w", params["head.w"])
    b = tape.param("head.b", params["head.b"])
    return ag.add_rowvec(x @ w, b).value


class TestConfigValidation:
    def test_lowrank_lm_rejected(self):
        with pytest.raises(ConfigError, match="low-rank"):
            lm_config(backend=LowRankBackend(k=4))

    def test_indivisible_partition_rejected(self):
        with pytest.raises(ConfigError, match="L mod P != 0"):
            lm_config(n_layers=5, partition=2)

    def test_zero_layers_rejected(self):
        with pytest.raises(ConfigError):
            lm_config(n_layers=0, partition=1)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            lm_config(d_model=9, n_heads=2)

    def test_classifier_needs_classes(self):
        with pytest.raises(ConfigError, match="n_classes"):
            clf_config(n_classes=0)


class TestForwardLm:
    def test_single_token(self):
        cfg = lm_config()
        params = init_params(cfg, Rng(0))
        logits = run_lm(cfg, params, np.array([3]))
        assert logits.shape == (1, cfg.vocab_size)

    def test_last_token_perturbation(self):
        cfg = lm_config()
        params = init_params(cfg, Rng(1))
        tokens = Rng(2).integers(0, cfg.vocab_size, 6)
        other = tokens.copy()
        other[-1] = (other[-1] + 1) % cfg.vocab_size
        a = run_lm(cfg, params, tokens)
        b = run_lm(cfg, params, other)
        assert np.abs(a[:-1] - b[:-1]).max() <= 1e-12
        assert np.abs(a[-1] - b[-1]).max() > 0

    def test_partition_one_equals_vanilla(self):
        cfg = lm_config(partition=1)
        params = init_params(cfg, Rng(3))
        tokens = Rng(4).integers(0, cfg.vocab_size, 7)
        got = run_lm(cfg, params, tokens)
        want = vanilla_stack_logits(cfg, params, tokens)
        denom = max(np.abs(want).max(), 1e-12)
        assert np.abs(got - want).max() / denom <= 1e-10

    def test_causality_all_positions(self):
        for partition in (1, 2, 4):
            cfg = lm_config(partition=partition)
            params = init_params(cfg, Rng(5))
            tokens = Rng(6).integers(0, cfg.vocab_size, 8)
            base = run_lm(cfg, params, tokens)
            for j in range(1, 8):
                bumped = tokens.copy()
                bumped[j] = (bumped[j] + 3) % cfg.vocab_size
                out = run_lm(cfg, params, bumped)
                assert np.abs(out[:j] - base[:j]).max() <= 1e-12, (partition, j)

    def test_deterministic_across_runs(self):
        cfg = lm_config(backend=KernelBackend())
        params = init_params(cfg, Rng(7))
        tokens = Rng(8).integers(0, cfg.vocab_size, 6)
        assert np.array_equal(run_lm(cfg, params, tokens), run_lm(cfg, params, tokens))

    def test_blocksparse_divisibility_enforced(self):
        cfg = lm_config(backend=BlockSparseBackend(block_size=4, rng_seed=1))
        params = init_params(cfg, Rng(9))
        with pytest.raises(ConfigError, match="not divisible"):
            run_lm(cfg, params, Rng(10).integers(0, cfg.vocab_size, 6))
        # N=8 gives grids 8 and 16, both divisible by 4
        out = run_lm(cfg, params, Rng(11).integers(0, cfg.vocab_size, 8))
        assert out.shape == (8, cfg.vocab_size)

    def test_token_validation(self):
        cfg = lm_config()
        params = init_params(cfg, Rng(12))
        with pytest.raises(ValueError, match="vocabulary"):
            run_lm(cfg, params, np.array([cfg.vocab_size]))
        with pytest.raises(ValueError, match="max_len"):
            run_lm(cfg, params, np.zeros(cfg.max_len + 1, dtype=np.int64))


class TestForwardClassifier:
    def test_duplicate_inputs_identical(self):
        cfg = clf_config()
        params = init_params(cfg, Rng(13))
        tokens = Rng(14).integers(0, cfg.vocab_size, 6)
        assert np.array_equal(run_clf(cfg, params, tokens), run_clf(cfg, params, tokens))

    def test_pool_stats_rows_sum_to_one(self):
        cfg = clf_config()
        params = init_params(cfg, Rng(15))
        diag: list[OmniLayerDiag] = []
        tape = Tape()
        forward_classifier(tape, params, cfg, Rng(16).integers(0, cfg.vocab_size, 6), diag=diag)
        assert len(diag) == 2  # omni blocks at layers 2 and 4
        for d in diag:
            assert np.abs(d.pool.fractions.sum(axis=1) - 1.0).max() <= 1e-12

    def test_map_with_non_exact_backend_rejected(self):
        cfg = clf_config(backend=KernelBackend())
        params = init_params(cfg, Rng(17))
        with pytest.raises(ValueError, match="attention map requires dense backend"):
            run_clf(cfg, params, Rng(18).integers(0, cfg.vocab_size, 6), map_mode="native")

    def test_cls_map_shapes(self):
        cfg = clf_config()
        params = init_params(cfg, Rng(19))
        diag: list[OmniLayerDiag] = []
        tokens = Rng(20).integers(0, cfg.vocab_size, 5)
        tape = Tape()
        forward_classifier(tape, params, cfg, tokens, diag=diag, map_mode="native")
        n_rows = tokens.size + 1
        for d in diag:
            g = len(d.consumed)
            for m in d.maps:
                assert m.shape == (g * n_rows, g * n_rows)

    def test_layer_embedding_flag(self):
        base_cfg = clf_config()
        flag_cfg = clf_config(layer_embedding=True)
        base_params = init_params(base_cfg, Rng(21))
        flag_params = init_params(flag_cfg, Rng(21))
        assert "layers.1.layer_emb" in flag_params.names()
        tokens = Rng(22).integers(0, base_cfg.vocab_size, 4)
        a = run_clf(base_cfg, base_params, tokens)
        b = run_clf(flag_cfg, flag_params, tokens)
        assert not np.array_equal(a, b)


class TestParamCount:
    def test_exact_partition_invariant(self):
        totals = set()
        for p in (1, 2, 3, 6):
            cfg = lm_config(n_layers=6, partition=p, max_len=16)
            totals.add(param_count(init_params(cfg, Rng(0)))[1])
        assert len(totals) == 1

    def test_lowrank_adds_shared_projection(self):
        base = clf_config(n_layers=2, partition=1, max_len=64, d_model=8)
        low = clf_config(
            n_layers=2, partition=1, max_len=64, d_model=8, backend=LowRankBackend(k=8)
        )
        base_total = param_count(init_params(base, Rng(1)))[1]
        low_groups, low_total = param_count(init_params(low, Rng(1)))
        # one 64 x 8 shared K/V projection per single-layer omni block
        assert low_total - base_total == 2 * 64 * 8
        for i in range(2):
            assert low_groups[f"layers.{i}"] - param_count(init_params(base, Rng(1)))[0][f"layers.{i}"] == 512

    def test_census_prefixes(self):
        cfg = lm_config()
        groups, total = param_count(init_params(cfg, Rng(2)))
        assert set(groups) == {"emb", "head", "layers.0", "layers.1", "layers.2", "layers.3"}
        assert total == sum(groups.values())


class TestGradients:
    def test_tiny_lm_end_to_end_fd(self):
        cfg = lm_config(n_layers=2, partition=2, d_model=4, n_heads=2, d_ff=6, vocab_size=5)
        params = init_params(cfg, Rng(23))
        tokens = np.array([1, 4, 2, 0])
        targets = np.array([4, 2, 0, 3])

        def loss_of(ps):
            tape = Tape()
            logits = forward_lm(tape, ps, cfg, tokens)
            picked = ag.pick_per_row(ag.log_softmax_rows(logits), targets)
            return ag.scale(ag.sum_all(picked), -1.0 / targets.size)

        tape = Tape()
        logits = forward_lm(tape, params, cfg, tokens)
        picked = ag.pick_per_row(ag.log_softmax_rows(logits), targets)
        loss = ag.scale(ag.sum_all(picked), -1.0 / targets.size)
        got = backward(loss)
        want = finite_diff_grad(lambda ps: float(loss_of(ps).value), params)
        report = compare_grads(got, want)
        assert max(report.values()) <= 1e-4, report


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = lm_config()
        params = init_params(cfg, Rng(24))
        config_doc = {"seed": 7, "note": "round trip"}
        path = save_checkpoint(tmp_path / "model.ckpt", config_doc, params)
        loaded_cfg, loaded = load_checkpoint(path)
        assert loaded_cfg == config_doc
        assert loaded.names() == params.names()
        for name in params:
            assert np.array_equal(loaded[name], params[name])

    def test_manifest_offsets(self, tmp_path):
        import json

        cfg = lm_config(n_layers=2, partition=1)
        params = init_params(cfg, Rng(25))
        path = save_checkpoint(tmp_path / "m.ckpt", {}, params)
        manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
        raw = path.read_bytes()
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(
                raw, dtype="<f8", count=count, offset=entry["offset"]
            ).reshape(entry["shape"])
            assert np.array_equal(data, params[entry["name"]])

    def test_truncated_rejected(self, tmp_path):
        cfg = lm_config(n_layers=2, partition=1)
        params = init_params(cfg, Rng(26))
        path = save_checkpoint(tmp_path / "m.ckpt", {}, params)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(clipped)
