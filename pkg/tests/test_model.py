"""Model-level oracles.

The CTC loss is pinned against brute-force enumeration of every frame-level
path; decoding is pinned against exhaustive scoring of every candidate token
sequence; the losses are pinned against hand calculations and 64-bit
re-computations; checkpoints are pinned against byte-level format checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from aformer import numerics as nm
from aformer.numerics import ShapeError, Tensor, backward, no_grad
from aformer.model import (
    AformerModel,
    CHECKPOINT_MAGIC,
    CheckpointError,
    ConfigError,
    CtcInfeasibleError,
    CtcPrefixScorer,
    GENERAL_PREFIX,
    ModelConfig,
    PASS_IDS,
    apply_parameters,
    attention_loss,
    ctc_feasible,
    ctc_loss,
    decode_utterance,
    desk_config,
    hybrid_loss,
    load_checkpoint,
    model_from_checkpoint,
    full_scale_config,
    save_checkpoint,
    utterance_loss,
    _log_softmax64,
)


def _rng(seed):
    return np.random.default_rng(seed)


def _micro_config(**overrides) -> ModelConfig:
    """Smallest config that exercises every component."""
    base = dict(vocab_size=7, feat_dim=8, d_model=8, n_heads=2, d_ff=16,
                n_general_blocks=1, conv_kernel=3, subsample_channels=2,
                accent_depth=1, lstm_hidden=6, d_att=5, n_decoder_layers=1,
                dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


# -- configuration ---------------------------------------------------------------


def test_config_validation_errors():
    bad = [
        dict(vocab_size=2),
        dict(feat_dim=6),
        dict(d_model=30, n_heads=4),
        dict(ctc_weight=1.5),
        dict(ctc_weight=-0.1),
        dict(label_smoothing=1.0),
        dict(dropout=1.0),
        dict(fusion="gate"),
        dict(accent_kind="gru"),
        dict(conv_kernel=4),
        dict(n_decoder_layers=0),
        dict(accent_depth=0),
        dict(d_att=0),
    ]
    for kwargs in bad:
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)


def test_config_dict_roundtrip_and_unknown_key():
    cfg = desk_config(fusion="concat", ctc_weight=0.4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"vocab_size": 29, "window": 3})


def test_full_scale_config_much_larger_than_desk():
    desk = AformerModel(desk_config(), seed=0)
    full = AformerModel(full_scale_config(), seed=0)
    assert full.parameter_count() > 50 * desk.parameter_count()


def test_model_seed_determinism():
    a = AformerModel(desk_config(), seed=5)
    b = AformerModel(desk_config(), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)


# -- forward shapes ----------------------------------------------------------------


def test_forward_shapes_follow_subsampling():
    cfg = desk_config()
    model = AformerModel(cfg, seed=0)
    feats = _rng(0).standard_normal((32, cfg.feat_dim)).astype(np.float32)
    out = model.forward_utterance(feats, targets=[2, 3, 4, 5, 6])
    assert out.fused.shape == (7, cfg.d_model)          # 32 frames -> 7
    assert out.ctc_logits.shape == (7, cfg.vocab_size)
    assert out.dec_logits.shape == (6, cfg.vocab_size)  # len(targets) + 1
    assert model.output_length(32) == 7


def test_forward_without_targets_skips_decoder():
    model = AformerModel(desk_config(), seed=0)
    out = model.forward_utterance(_rng(1).standard_normal((16, 16)).astype(np.float32))
    assert out.dec_logits is None


def test_encode_rejects_wrong_feature_dim():
    model = AformerModel(desk_config(), seed=0)
    with pytest.raises(ShapeError):
        model.encode(np.ones((16, 10), dtype=np.float32))


def test_validate_targets_range():
    model = AformerModel(desk_config(), seed=0)
    assert model.validate_targets([2, 28]) == [2, 28]
    for bad in ([0], [1], [29]):
        with pytest.raises(ConfigError):
            model.validate_targets(bad)


def test_encode_eval_deterministic():
    model = AformerModel(desk_config(), seed=0)
    feats = _rng(2).standard_normal((20, 16)).astype(np.float32)
    assert np.array_equal(model.encode(feats).data, model.encode(feats).data)


def test_accent_disabled_baseline_has_single_encoder():
    cfg = desk_config(accent_enabled=False)
    model = AformerModel(cfg, seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert not any(n.startswith("accent") or n.startswith("fusion") for n in names)
    feats = _rng(3).standard_normal((16, 16)).astype(np.float32)
    # the memory is exactly the general encoder output
    x = model.frontend.forward(Tensor(feats))
    from aformer.layers import positional_encoding

    x = x + positional_encoding(x.shape[0], cfg.d_model)
    ref = model.general.forward(x).data
    assert np.array_equal(model.encode(feats).data, ref)


def test_dual_encoder_memory_is_fusion_of_streams():
    cfg = desk_config()
    model = AformerModel(cfg, seed=0)
    feats = _rng(4).standard_normal((16, 16)).astype(np.float32)
    from aformer.layers import positional_encoding

    x = model.frontend.forward(Tensor(feats))
    x = x + positional_encoding(x.shape[0], cfg.d_model)
    xg = model.general.forward(x)
    xa = model.accent.forward(x)
    ref = model.fusion.forward(xg, xa).data
    assert np.array_equal(model.encode(feats).data, ref)


# -- ctc loss ----------------------------------------------------------------------


def _collapse(path, blank=0):
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def _brute_ctc_logprob(lp: np.ndarray, target) -> float:
    """Sum the probability of every frame path that collapses to target."""
    T, V = lp.shape
    total = -np.inf
    target = tuple(target)
    for path in itertools.product(range(V), repeat=T):
        if _collapse(path) == target:
            total = np.logaddexp(total, sum(lp[t, s] for t, s in enumerate(path)))
    return total


def test_ctc_loss_matches_path_enumeration_everywhere():
    """Every (T <= 6, |target| <= 3, V = 4) combination against brute force."""
    V = 4
    targets = [seq for L in range(0, 4) for seq in itertools.product((2, 3), repeat=L)]
    rng = _rng(10)
    checked = 0
    for T in (1, 2, 3, 4, 6):
        logits_np = rng.standard_normal((T, V)).astype(np.float32)
        lp = _log_softmax64(logits_np.astype(np.float64))
        for target in targets:
            if not ctc_feasible(list(target), T):
                with pytest.raises(CtcInfeasibleError):
                    ctc_loss(Tensor(logits_np), list(target))
                continue
            got = ctc_loss(Tensor(logits_np), list(target)).item()
            want = -_brute_ctc_logprob(lp, target)
            assert got == pytest.approx(want, abs=1e-4), f"T={T} target={target}"
            checked += 1
    assert checked > 30


def test_ctc_loss_two_frame_hand_case():
    """T=2, one label: paths are (a,a), (a,-), (-,a)."""
    logits_np = np.array([[0.2, -0.4, 1.0], [-0.3, 0.5, 0.1]], dtype=np.float32)
    lp = _log_softmax64(logits_np.astype(np.float64))
    a = 2
    want = -np.log(
        np.exp(lp[0, a] + lp[1, a])
        + np.exp(lp[0, a] + lp[1, 0])
        + np.exp(lp[0, 0] + lp[1, a])
    )
    assert ctc_loss(Tensor(logits_np), [a]).item() == pytest.approx(want, abs=1e-6)


def test_ctc_repeated_label_needs_separator_frame():
    logits = Tensor(_rng(11).standard_normal((2, 4)).astype(np.float32))
    with pytest.raises(CtcInfeasibleError):
        ctc_loss(logits, [2, 2])
    # and three frames make it feasible
    logits3 = Tensor(_rng(12).standard_normal((3, 4)).astype(np.float32))
    assert np.isfinite(ctc_loss(logits3, [2, 2]).item())


def test_ctc_rejects_blank_and_out_of_range_targets():
    logits = Tensor(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ConfigError):
        ctc_loss(logits, [0])
    with pytest.raises(ConfigError):
        ctc_loss(logits, [4])


def test_ctc_empty_target_scores_all_blank_path():
    logits_np = _rng(13).standard_normal((3, 4)).astype(np.float32)
    lp = _log_softmax64(logits_np.astype(np.float64))
    want = -(lp[0, 0] + lp[1, 0] + lp[2, 0])
    assert ctc_loss(Tensor(logits_np), []).item() == pytest.approx(want, abs=1e-6)


def test_ctc_feasibility_rule():
    assert ctc_feasible([2, 3, 4], 3)
    assert not ctc_feasible([2, 3, 4], 2)
    assert ctc_feasible([2, 2], 3)
    assert not ctc_feasible([2, 2], 2)
    assert ctc_feasible([], 0)


@pytest.mark.parametrize("seed", range(20))
def test_ctc_gradients_match_directional_derivatives(seed):
    rng = _rng(seed + 700)
    T = int(rng.integers(3, 7))
    logits = Tensor(rng.standard_normal((T, 4)).astype(np.float32), requires_grad=True)
    length = int(rng.integers(1, 3))
    target = list(rng.choice([2, 3], size=length))
    if not ctc_feasible(target, T):
        target = target[:1]
    loss = ctc_loss(logits, target)
    backward(loss)
    v = _rng(seed + 800).standard_normal(logits.shape).astype(np.float32)
    analytic = float(np.sum(logits.grad.astype(np.float64) * v))
    eps = 1e-3
    with no_grad():
        plus = ctc_loss(Tensor(logits.data + eps * v), target).item()
        minus = ctc_loss(Tensor(logits.data - eps * v), target).item()
    fd = (plus - minus) / (2 * eps)
    assert abs(fd - analytic) <= 1e-2 * max(1.0, abs(fd), abs(analytic))


# -- attention loss -----------------------------------------------------------------


def test_attention_loss_zero_when_confident_and_unsmoothed():
    v, eos = 5, 1
    targets = [2, 4]
    ref = targets + [eos]
    logits = np.full((3, v), -30.0, dtype=np.float32)
    logits[np.arange(3), ref] = 30.0
    loss = attention_loss(Tensor(logits), targets, eos, smoothing=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-5)


def test_attention_loss_uniform_logits_equals_log_vocab():
    """With logits all equal, log p = -log V everywhere, so the smoothed
    cross entropy is exactly log V for any smoothing."""
    v, eos = 7, 1
    logits = Tensor(np.zeros((4, v), dtype=np.float32))
    for smoothing in (0.0, 0.1, 0.5):
        loss = attention_loss(logits, [2, 3, 4], eos, smoothing=smoothing)
        assert loss.item() == pytest.approx(math.log(v), abs=1e-5)


def test_attention_loss_two_class_hand_case():
    logits_np = np.array([[2.0, 0.0], [0.0, 3.0]], dtype=np.float32)
    got = attention_loss(Tensor(logits_np), [0], eos=1, smoothing=0.1).item()
    lp = _log_softmax64(logits_np.astype(np.float64))
    q = np.array([[0.95, 0.05], [0.05, 0.95]])
    want = -(q * lp).sum() / 2.0
    assert got == pytest.approx(want, abs=1e-6)


def test_attention_loss_smoothing_distribution_sums_to_one():
    """Implied by construction: smoothing/V everywhere plus 1-smoothing on the
    reference. Perfectly confident logits then lose exactly the smoothed tail."""
    v, eos, s = 6, 1, 0.3
    ref = [3, eos]
    logits = np.full((2, v), -40.0, dtype=np.float32)
    logits[np.arange(2), ref] = 40.0
    got = attention_loss(Tensor(logits), [3], eos, smoothing=s).item()
    # -sum q log p with log p ~ 0 on ref and -80 on the rest
    want = (s / v) * (v - 1) * 80.0
    assert got == pytest.approx(want, rel=1e-3)


def test_attention_loss_length_mismatch_raises():
    with pytest.raises(ShapeError):
        attention_loss(Tensor(np.zeros((3, 5))), [2], eos=1)


@pytest.mark.parametrize("seed", range(10))
def test_attention_loss_gradients(seed):
    rng = _rng(seed + 900)
    n, v = int(rng.integers(2, 6)), 6
    logits = Tensor(rng.standard_normal((n, v)).astype(np.float32), requires_grad=True)
    targets = list(rng.integers(2, v, size=n - 1))
    loss = attention_loss(logits, targets, eos=1, smoothing=0.1)
    backward(loss)
    dvec = _rng(seed + 950).standard_normal(logits.shape).astype(np.float32)
    analytic = float(np.sum(logits.grad.astype(np.float64) * dvec))
    eps = 1e-3
    with no_grad():
        plus = attention_loss(Tensor(logits.data + eps * dvec), targets, 1, 0.1).item()
        minus = attention_loss(Tensor(logits.data - eps * dvec), targets, 1, 0.1).item()
    fd = (plus - minus) / (2 * eps)
    assert abs(fd - analytic) <= 1e-2 * max(1.0, abs(fd), abs(analytic))


# -- hybrid loss --------------------------------------------------------------------


def test_hybrid_loss_endpoints_and_midpoint():
    att = Tensor(np.float32(2.0))
    ctc = Tensor(np.float32(5.0))
    assert hybrid_loss(att, ctc, 0.0).total.item() == pytest.approx(2.0)
    assert hybrid_loss(att, ctc, 1.0).total.item() == pytest.approx(5.0)
    assert hybrid_loss(att, ctc, 0.3).total.item() == pytest.approx(2.9, abs=1e-6)


def test_hybrid_loss_affine_in_weight():
    att = Tensor(np.float32(1.25))
    ctc = Tensor(np.float32(4.0))
    t = [hybrid_loss(att, ctc, w).total.item() for w in (0.2, 0.5, 0.8)]
    assert t[1] - t[0] == pytest.approx(t[2] - t[1], abs=1e-5)


def test_hybrid_loss_rejects_out_of_range_weight():
    att, ctc = Tensor(np.float32(1.0)), Tensor(np.float32(1.0))
    for w in (-0.1, 1.1):
        with pytest.raises(ConfigError):
            hybrid_loss(att, ctc, w)


def test_utterance_loss_combines_components_with_config_weight():
    cfg = _micro_config(ctc_weight=0.3)
    model = AformerModel(cfg, seed=1)
    feats = _rng(20).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    bl = utterance_loss(model, feats, [2, 3, 4])
    assert bl.ctc_weight == 0.3
    want = 0.7 * bl.att_value + 0.3 * bl.ctc_value
    assert bl.total.item() == pytest.approx(want, rel=1e-5)
    # explicit override wins over the config value
    bl2 = utterance_loss(model, feats, [2, 3, 4], ctc_weight=1.0)
    assert bl2.total.item() == pytest.approx(bl2.ctc_value, rel=1e-5)


# -- decoder causality ----------------------------------------------------------------


def test_decoder_position_ignores_future_inputs():
    """Changing input id j leaves logits rows < j bitwise unchanged."""
    cfg = _micro_config()
    model = AformerModel(cfg, seed=2)
    memory = Tensor(_rng(21).standard_normal((3, cfg.d_model)).astype(np.float32))
    ids = [1, 2, 3, 4, 5]
    base = model.decoder.forward(ids, memory).data
    for j in range(1, len(ids)):
        mutated = list(ids)
        mutated[j] = 6 if ids[j] != 6 else 2
        out = model.decoder.forward(mutated, memory).data
        assert np.array_equal(out[:j], base[:j]), f"row(s) before {j} changed"
        assert not np.array_equal(out[j:], base[j:])


def test_stepwise_decoding_matches_full_forward():
    """The last row of a prefix forward equals the corresponding row of the
    full-sequence forward up to matmul rounding (BLAS kernels may differ by
    an ulp across operand shapes); beam search relies on this."""
    cfg = _micro_config()
    model = AformerModel(cfg, seed=3)
    memory = Tensor(_rng(22).standard_normal((3, cfg.d_model)).astype(np.float32))
    ids = [1, 2, 4, 3]
    full = model.decoder.forward(ids, memory).data
    for i in range(1, len(ids) + 1):
        step = model.decoder.forward(ids[:i], memory).data
        assert np.allclose(step[-1], full[i - 1], atol=1e-5)


# -- full-model gradients ----------------------------------------------------------------


def _full_model_fd(model: AformerModel, feats, targets, seed, rtol=1e-2):
    params = [p for _, p in model.named_parameters()]
    for p in params:
        p.zero_grad()
    loss = utterance_loss(model, feats, targets).total
    backward(loss)
    rng = _rng(seed + 1300)
    vs = [rng.standard_normal(p.shape).astype(np.float32) for p in params]
    analytic = sum(float(np.sum(p.grad.astype(np.float64) * v))
                   for p, v in zip(params, vs) if p.grad is not None)
    last = None
    for eps in (1e-3, 2e-4, 5e-5):
        evals = []
        for sign in (1.0, -1.0):
            for p, v in zip(params, vs):
                p.data = (p.data + sign * eps * v).astype(np.float32)
            with no_grad():
                evals.append(utterance_loss(model, feats, targets).total.item())
            for p, v in zip(params, vs):
                p.data = (p.data - sign * eps * v).astype(np.float32)
        fd = (evals[0] - evals[1]) / (2.0 * eps)
        tol = rtol * max(1.0, abs(fd), abs(analytic))
        if abs(fd - analytic) <= tol:
            return
        last = (eps, fd, tol)
    eps, fd, tol = last
    raise AssertionError(f"fd {fd:.6f} vs analytic {analytic:.6f} at eps {eps}")


@pytest.mark.parametrize("fusion", ["add", "concat", "cross_attention"])
@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients_per_fusion(fusion, seed):
    cfg = _micro_config(fusion=fusion)
    model = AformerModel(cfg, seed=seed)
    feats = _rng(seed + 1400).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    _full_model_fd(model, feats, [2, 3, 4], seed)


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients_lstm_accent(seed):
    cfg = _micro_config(accent_kind="lstm")
    model = AformerModel(cfg, seed=seed)
    feats = _rng(seed + 1500).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    _full_model_fd(model, feats, [2, 4], seed)


def test_full_model_gradients_accent_disabled():
    cfg = _micro_config(accent_enabled=False)
    model = AformerModel(cfg, seed=0)
    feats = _rng(1600).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    _full_model_fd(model, feats, [3, 5], 0)


def test_every_parameter_receives_gradient():
    cfg = _micro_config(fusion="cross_attention")
    model = AformerModel(cfg, seed=0)
    feats = _rng(23).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    backward(utterance_loss(model, feats, [2, 3]).total)
    for name, p in model.named_parameters():
        assert p.grad is not None, f"no gradient reached {name}"


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = _micro_config()
    model = AformerModel(cfg, seed=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, "A1", global_step=17, extra={"lineage": ["A1"]})
    meta, params = load_checkpoint(path)
    assert meta["pass_id"] == "A1"
    assert meta["global_step"] == 17
    assert meta["config"] == cfg.to_dict()
    assert meta["extra"]["lineage"] == ["A1"]
    own = dict(model.named_parameters())
    assert set(params) == set(own)
    for name, arr in params.items():
        assert np.array_equal(arr, own[name].data)


def test_checkpoint_restores_identical_behavior(tmp_path):
    cfg = _micro_config()
    model = AformerModel(cfg, seed=5)
    feats = _rng(24).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    ref = model.encode(feats).data
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, "A2", global_step=1, extra={})
    loaded, meta = model_from_checkpoint(path, seed=99)
    assert np.array_equal(loaded.encode(feats).data, ref)
    assert meta["pass_id"] == "A2"


def test_checkpoint_save_is_deterministic(tmp_path):
    model = AformerModel(_micro_config(), seed=6)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, "A1", 3)
    save_checkpoint(p2, model, "A1", 3)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_unknown_pass_id(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "x.ckpt", model, "warmstart", 0)
    assert set(PASS_IDS) == {"A1", "A2", "A2-finetune", "A3", "finetune", "pooled-pretrain"}


def test_checkpoint_bad_magic(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, "A1", 0)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, "A1", 0)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncation_reports_byte_offset(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, "A1", 0)
    raw = path.read_bytes()
    for cut in (2, 6, 11, 40, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="byte offset"):
            load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, "A1", 0)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_apply_parameters_name_and_shape_mismatch(tmp_path):
    model = AformerModel(_micro_config(), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, "A1", 0)
    _, params = load_checkpoint(path)

    some = next(iter(params))
    missing = dict(params)
    del missing[some]
    with pytest.raises(CheckpointError, match="mismatch"):
        apply_parameters(AformerModel(_micro_config(), seed=1), missing)

    extra = dict(params)
    extra["bogus"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(CheckpointError, match="mismatch"):
        apply_parameters(AformerModel(_micro_config(), seed=1), extra)

    reshaped = dict(params)
    reshaped[some] = np.zeros(params[some].size + 1, dtype=np.float32)
    with pytest.raises(ShapeError):
        apply_parameters(AformerModel(_micro_config(), seed=1), reshaped)


# -- decoding ------------------------------------------------------------------------


def _decode_oracle(model: AformerModel, feats, w: float, max_len: int):
    """Exhaustively score every token sequence up to max_len.

    Attention scores accumulate over prefix forwards, exactly as the beam
    search computes them, so the comparison is exact instead of modulo
    shape-dependent matmul rounding.
    """
    with no_grad():
        memory = model.encode(feats)
        ctc_lp = _log_softmax64(model.ctc_head.forward(memory).data.astype(np.float64))
    real = list(range(2, model.config.vocab_size))
    eos = model.sos_eos
    best_seq, best_score = None, -np.inf
    for L in range(0, max_len + 1):
        for seq in itertools.product(real, repeat=L):
            att = 0.0
            for i in range(len(seq) + 1):
                with no_grad():
                    logits = model.decoder.forward([eos, *seq[:i]], memory).data
                lp = _log_softmax64(logits.astype(np.float64))[-1]
                att += lp[seq[i]] if i < len(seq) else lp[eos]
            if w == 0.0:
                score = att
            else:
                score = (1.0 - w) * att + w * _brute_ctc_logprob(ctc_lp, seq)
            if score > best_score:
                best_seq, best_score = list(seq), float(score)
    return best_seq, best_score


@pytest.mark.parametrize("seed,w", [(s, w) for s in range(7) for w in (0.0, 0.3, 1.0)])
def test_beam_search_exhaustive_equality(seed, w):
    """With the beam at least as large as the number of live prefixes, the
    search must return the globally best-scoring sequence."""
    cfg = _micro_config(vocab_size=4)
    model = AformerModel(cfg, seed=seed)
    feats = _rng(seed + 1700).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    want_seq, want_score = _decode_oracle(model, feats, w, max_len=3)
    got = decode_utterance(model, feats, beam=16, ctc_weight=w, max_len=3)
    assert got.tokens == want_seq
    assert got.score == pytest.approx(want_score, abs=1e-9)
    assert got.n_frames == 3  # 16 frames subsample to 3


@pytest.mark.parametrize("seed", range(5))
def test_narrow_beams_never_beat_exhaustive(seed):
    cfg = _micro_config(vocab_size=4)
    model = AformerModel(cfg, seed=seed + 40)
    feats = _rng(seed + 1800).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    full = decode_utterance(model, feats, beam=16, max_len=3).score
    for beam in (1, 2, 4):
        assert decode_utterance(model, feats, beam=beam, max_len=3).score <= full + 1e-12


def test_decode_respects_max_len_and_beam_validation():
    cfg = _micro_config(vocab_size=4)
    model = AformerModel(cfg, seed=9)
    feats = _rng(25).standard_normal((16, cfg.feat_dim)).astype(np.float32)
    assert len(decode_utterance(model, feats, beam=4, max_len=1).tokens) <= 1
    with pytest.raises(ConfigError):
        decode_utterance(model, feats, beam=0)
    with pytest.raises(ConfigError):
        decode_utterance(model, feats, beam=2, ctc_weight=1.5)


def test_prefix_scorer_empty_labelling_probability():
    """Closing the empty prefix scores the all-blank path exactly."""
    lp = _log_softmax64(_rng(26).standard_normal((4, 4)).astype(np.float64))
    scorer = CtcPrefixScorer(lp)
    want = lp[:, 0].sum()
    assert scorer.final(scorer.initial_state()) == pytest.approx(want, abs=1e-12)


def test_prefix_scorer_extension_matches_brute_prefix_mass():
    """psi for prefix (c,) equals the probability mass of all labellings that
    start with c."""
    lp = _log_softmax64(_rng(27).standard_normal((3, 4)).astype(np.float64))
    scorer = CtcPrefixScorer(lp)
    psi, _ = scorer.extend((), np.array([2, 3]), scorer.initial_state())
    for i, c in enumerate((2, 3)):
        mass = -np.inf
        # continuations range over every non-blank symbol, not just the two
        # being extended
        for L in range(0, 4):
            for seq in itertools.product((1, 2, 3), repeat=L):
                full = (c,) + seq
                lg = _brute_ctc_logprob(lp, full)
                if np.isfinite(lg):
                    mass = np.logaddexp(mass, lg)
        assert psi[i] == pytest.approx(mass, abs=1e-9)


def test_decode_prefers_trained_transcript():
    """After overfitting one utterance, decoding returns its exact targets."""
    from aformer.training import Adam, warmup_lr

    cfg = _micro_config(vocab_size=6)
    model = AformerModel(cfg, seed=11)
    feats = _rng(28).standard_normal((20, cfg.feat_dim)).astype(np.float32)
    targets = [2, 4, 3]
    opt = Adam(model.named_parameters())
    for step in range(1, 121):
        for _, p in opt.params:
            p.zero_grad()
        backward(utterance_loss(model, feats, targets, train=False).total)
        opt.step(warmup_lr(step, 30, base=0.5, d_model=cfg.d_model))
    assert decode_utterance(model, feats, beam=4).tokens == targets
