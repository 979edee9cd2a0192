import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgen.errors import CheckpointError, DomainError, ShapeError
from fedgen.gradcheck import check_case, random_case
from fedgen.linalg import make_rng
from fedgen.lora import LoraAdapter, LoraConfig, LoraPair, init_adapter
from fedgen.model import (AdamWState, Backbone, IGNORE_INDEX, ModelConfig, TrainBatch, adamw_step,
                          attention_targets, backbone_shapes, backward_adapter, forward, generate, init_backbone,
                          load_backbone, loss, loss_and_grads, make_batch, perplexity, pretrain_backbone,
                          save_backbone, softmax, to_samples, total_params, windows)

from conftest import dense_adapter

torch = pytest.importorskip("torch")


def torch_forward(backbone, adapter, ids):
    """Independent reference implementation in torch (autograd for gradients)."""
    cfg = backbone.config
    w = {k: torch.tensor(v, requires_grad=True) for k, v in backbone.weights.items()}
    a = {}
    if adapter is not None:
        for k, p in adapter.pairs.items():
            a[k] = (torch.tensor(p.down, requires_grad=True), torch.tensor(p.up, requires_grad=True))
    factor = adapter.config.scaling / adapter.config.rank if adapter is not None else 0.0

    def lin(x, name):
        y = x @ w[name].T
        if name in a:
            y = y + factor * (x @ a[name][0].T) @ a[name][1].T
        return y

    ids = torch.tensor(ids)
    B, T = ids.shape
    H, D = cfg.n_heads, cfg.dim
    x = w["tok_emb"][ids] + w["pos_emb"][:T]
    mask = torch.triu(torch.ones(T, T, dtype=torch.bool), 1)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = torch.nn.functional.layer_norm(x, (D,), w[f"{p}.ln1.g"], w[f"{p}.ln1.b"], eps=1e-5)
        q, k, v = (lin(h, f"{p}.attn.{n}").view(B, T, H, D // H).transpose(1, 2) for n in ("wq", "wk", "wv"))
        s = (q @ k.transpose(-1, -2)) / math.sqrt(D // H)
        s = s.masked_fill(mask, float("-inf"))
        y = (torch.softmax(s, -1) @ v).transpose(1, 2).reshape(B, T, D)
        x = x + lin(y, f"{p}.attn.wo")
        h = torch.nn.functional.layer_norm(x, (D,), w[f"{p}.ln2.g"], w[f"{p}.ln2.b"], eps=1e-5)
        h = torch.nn.functional.gelu(lin(h, f"{p}.mlp.w1") + w[f"{p}.mlp.b1"], approximate="tanh")
        x = x + lin(h, f"{p}.mlp.w2") + w[f"{p}.mlp.b2"]
    x = torch.nn.functional.layer_norm(x, (D,), w["ln_f.g"], w["ln_f.b"], eps=1e-5)
    return lin(x, "head"), w, a


@pytest.fixture(scope="module")
def case():
    backbone, adapter, batch = random_case(make_rng(42), max_dim=8)
    return backbone, adapter, batch


def test_shapes_and_counts():
    cfg = ModelConfig(vocab_size=10, dim=8, n_layers=2, n_heads=2, context_len=5, mlp_ratio=2)
    shapes = backbone_shapes(cfg)
    by_hand = 10 * 8 + 5 * 8 + 2 * (4 * 8 + 4 * 64 + 16 * 8 + 16 + 8 * 16 + 8) + 2 * 8 + 10 * 8
    assert total_params(cfg) == by_hand
    assert shapes["layers.1.mlp.w1"] == (16, 8)
    assert attention_targets(cfg) == ("layers.0.attn.wq", "layers.0.attn.wv", "layers.1.attn.wq", "layers.1.attn.wv")
    with pytest.raises(ShapeError):
        ModelConfig(vocab_size=10, dim=9, n_heads=2)


def test_logits_match_torch_reference(case):
    backbone, adapter, batch = case
    ours, _ = forward(backbone, adapter, batch)
    ref, _, _ = torch_forward(backbone, adapter, batch.inputs)
    np.testing.assert_allclose(ours, ref.detach().numpy(), rtol=1e-10, atol=1e-10)


def test_gradients_match_torch_autograd(case):
    backbone, adapter, batch = case
    names = sorted(backbone.weights)
    value, wg, ag = loss_and_grads(backbone, adapter, batch, weights=names)
    logits, w, a = torch_forward(backbone, adapter, batch.inputs)
    ref = torch.nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                            torch.tensor(batch.targets).reshape(-1), ignore_index=IGNORE_INDEX)
    ref.backward()
    assert value == pytest.approx(ref.item(), abs=1e-12)
    for n in names:
        np.testing.assert_allclose(wg[n], w[n].grad.numpy(), rtol=1e-8, atol=1e-12, err_msg=n)
    for n, (down, up) in a.items():
        np.testing.assert_allclose(ag.pairs[n].down, down.grad.numpy(), rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(ag.pairs[n].up, up.grad.numpy(), rtol=1e-8, atol=1e-12)


def test_adapter_gradients_match_finite_differences_dim8(tiny_backbone, tiny_lora):
    adapter = dense_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(1))
    rng = make_rng(2)
    V = tiny_backbone.config.vocab_size
    batch = TrainBatch(rng.integers(0, V, (2, 8)), rng.integers(0, V, (2, 8)))
    assert tiny_backbone.config.dim == 8
    errors = check_case(tiny_backbone, adapter, batch)
    assert max(errors.values()) < 1e-4


def test_only_requested_weight_gradients_materialize(case):
    backbone, adapter, batch = case
    _, wg, ag = loss_and_grads(backbone, adapter, batch)
    assert wg == {} and ag is not None
    _, wg, ag = loss_and_grads(backbone, adapter, batch, weights=["head"], adapter_grads=False)
    assert set(wg) == {"head"} and ag is None


def test_duplicated_batch_gives_same_gradient(tiny_backbone, tiny_lora):
    adapter = dense_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(3))
    sample = make_rng(4).integers(0, tiny_backbone.config.vocab_size, 9)
    once = backward_adapter(tiny_backbone, adapter, make_batch([sample]))
    twice = backward_adapter(tiny_backbone, adapter, make_batch([sample, sample]))
    assert twice.allclose(once, atol=1e-15)


def test_zero_adapter_is_bitwise_inert(tiny_backbone, tiny_lora, tiny_corpus):
    adapter = init_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(5))
    batch = make_batch(to_samples(tiny_corpus.sequences[:3], 8))
    with_adapter, _ = forward(tiny_backbone, adapter, batch)
    without, _ = forward(tiny_backbone, None, batch)
    assert np.array_equal(with_adapter, without)


def test_zero_adapter_gradient_is_finite(tiny_backbone, tiny_lora, tiny_corpus):
    adapter = init_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(5))
    grads = backward_adapter(tiny_backbone, adapter, make_batch(to_samples(tiny_corpus.sequences[:3], 8)))
    assert all(np.isfinite(m).all() for p in grads.pairs.values() for m in p)


def test_down_factor_perturbation_changes_logits(tiny_backbone, tiny_lora, tiny_corpus):
    adapter = dense_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(6))
    batch = make_batch(to_samples(tiny_corpus.sequences[:2], 8))
    base, _ = forward(tiny_backbone, adapter, batch)
    bumped = adapter.copy()
    bumped.pairs["layers.0.attn.wq"].down[0, 0] += 1e-3
    moved, _ = forward(tiny_backbone, bumped, batch)
    assert np.abs(moved - base).max() > 0


def test_softmax_rows_normalize(tiny_backbone, tiny_corpus):
    logits, _ = forward(tiny_backbone, None, make_batch(to_samples(tiny_corpus.sequences, 8)))
    np.testing.assert_allclose(softmax(logits).sum(-1), 1.0, atol=1e-9)


def test_forward_rejects_bad_ids(tiny_backbone):
    with pytest.raises(DomainError):
        forward(tiny_backbone, None, np.array([[0, tiny_backbone.config.vocab_size]]))
    with pytest.raises(ShapeError):
        forward(tiny_backbone, None, np.zeros((1, 9), dtype=int))


def test_loss_special_cases():
    targets = np.array([[0, 2, 1]])
    confident = np.full((1, 3, 4), -20.0)
    confident[0, [0, 1, 2], targets[0]] = 20.0
    assert loss(confident, targets) < 1e-3
    assert loss(np.zeros((2, 3, 7)), np.zeros((2, 3), dtype=int)) == pytest.approx(math.log(7), abs=1e-9)


def test_loss_matches_scalar_loop_oracle():
    logits = np.array([[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5], [0.1, 0.2, 0.3]],
                       [[-2.0, 1.0, 0.0], [3.0, 3.0, 3.0], [0.0, -1.0, 4.0]]])
    targets = np.array([[2, 0, IGNORE_INDEX], [1, 1, 2]])
    total, n = 0.0, 0
    for b in range(2):
        for t in range(3):
            if targets[b, t] == IGNORE_INDEX:
                continue
            row = logits[b, t]
            total += math.log(sum(math.exp(z) for z in row)) - row[targets[b, t]]
            n += 1
    assert loss(logits, targets) == pytest.approx(total / n, abs=1e-12)


def test_adamw_zero_gradient_no_decay_is_identity():
    p = {"w": np.array([[1.0, -2.0]])}
    state = AdamWState(lr=0.1, weight_decay=0.0)
    out = adamw_step(state, p, {"w": np.zeros((1, 2))})
    np.testing.assert_array_equal(out["w"], p["w"])
    assert state.step == 1
    adamw_step(state, out, {"w": np.zeros((1, 2))})
    assert state.step == 2


def test_adamw_first_step_closed_form():
    p = {"w": np.array([[0.5, -1.0, 2.0]])}
    g = np.array([[0.3, -4.0, 1e-9]])
    state = AdamWState(lr=0.01, beta1=0.0, beta2=0.0, eps=1e-8, weight_decay=0.0)
    out = adamw_step(state, p, {"w": g})
    np.testing.assert_allclose(out["w"], p["w"] - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adamw_matches_torch_over_several_steps():
    r = make_rng(8)
    p = {"a": r.standard_normal((3, 2)), "b": r.standard_normal((4,))}
    grads = [{k: r.standard_normal(v.shape) for k, v in p.items()} for _ in range(5)]
    state = AdamWState(lr=1e-2, weight_decay=0.01)
    tp = [torch.tensor(p[k], requires_grad=True) for k in ("a", "b")]
    opt = torch.optim.AdamW(tp, lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    ours = p
    for g in grads:
        ours = adamw_step(state, ours, g)
        for t, k in zip(tp, ("a", "b")):
            t.grad = torch.tensor(g[k])
        opt.step()
    for t, k in zip(tp, ("a", "b")):
        np.testing.assert_allclose(ours[k], t.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_adamw_works_on_adapters_and_checks_shapes(tiny_backbone, tiny_lora):
    adapter = dense_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(9))
    state = AdamWState(lr=1e-3)
    grads = LoraAdapter(adapter.config, {k: LoraPair(np.ones_like(p.down), np.ones_like(p.up))
                                         for k, p in adapter.pairs.items()})
    out = adamw_step(state, adapter, grads)
    assert isinstance(out, LoraAdapter) and not out.allclose(adapter)
    with pytest.raises(ShapeError):
        adamw_step(state, {"w": np.zeros((2, 2))}, {"w": np.zeros((2, 3))})


def test_uniform_model_perplexity_equals_vocab(tiny_model_config, tiny_corpus):
    weights = {k: np.zeros(s) for k, s in backbone_shapes(tiny_model_config).items()}
    zero = Backbone(tiny_model_config, weights)
    assert perplexity(zero, None, tiny_corpus.sequences) == pytest.approx(tiny_model_config.vocab_size, rel=1e-3)


def test_perfect_predictor_has_unit_perplexity(tiny_model_config):
    weights = {k: np.zeros(s) for k, s in backbone_shapes(tiny_model_config).items()}
    weights["ln_f.b"][0] = 1.0
    weights["head"][3, 0] = 60.0
    model = Backbone(tiny_model_config, weights)
    assert perplexity(model, None, [np.full(20, 3)]) == pytest.approx(1.0, abs=1e-12)


def test_perplexity_is_exp_of_pooled_nll(tiny_backbone, tiny_corpus):
    seqs = tiny_corpus.sequences[:7]
    total, count = 0.0, 0
    for s in seqs:  # one sequence at a time, a different accumulation order
        for w in windows(s, tiny_backbone.config.context_len):
            logits, _ = forward(tiny_backbone, None, w[None, :-1])
            lp = logits[0] - logits[0].max(-1, keepdims=True)
            lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
            total -= lp[np.arange(len(w) - 1), w[1:]].sum()
            count += len(w) - 1
    assert perplexity(tiny_backbone, None, seqs, batch_size=3) == pytest.approx(math.exp(total / count), rel=1e-9)
    with pytest.raises(DomainError):
        perplexity(tiny_backbone, None, [])


def test_windows_cover_each_position_once():
    seq = np.arange(20)
    ws = windows(seq, 8)
    predicted = np.concatenate([w[1:] for w in ws])
    np.testing.assert_array_equal(predicted, np.arange(1, 20))
    batch = make_batch(ws)
    for row_in, row_t, w in zip(batch.inputs, batch.targets, ws):
        n = len(w) - 1
        np.testing.assert_array_equal(row_t[:n - 1], row_in[1:n])
        assert (row_t[n:] == IGNORE_INDEX).all()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.integers(1, 8))
def test_windows_predict_every_token_once(lengths, ctx):
    seqs = [np.arange(n) for n in lengths]
    samples = to_samples(seqs, ctx)
    assert sum(len(s) - 1 for s in samples) == sum(n - 1 for n in lengths)
    assert all(2 <= len(s) <= ctx + 1 for s in samples)


def test_generate_contract(tiny_backbone):
    prompt = [1, 2, 3]
    a = generate(tiny_backbone, None, prompt, 12, temperature=0.0)
    b = generate(tiny_backbone, None, prompt, 12, temperature=0.0)
    assert a == b and a[:3] == prompt and len(a) == 15
    assert generate(tiny_backbone, None, prompt, 0, temperature=0.0) == prompt
    s1 = generate(tiny_backbone, None, prompt, 10, 1.0, make_rng(1))
    s2 = generate(tiny_backbone, None, prompt, 10, 1.0, make_rng(1))
    assert s1 == s2 and max(s1) < tiny_backbone.config.vocab_size
    with pytest.raises(DomainError):
        generate(tiny_backbone, None, [tiny_backbone.config.vocab_size], 3)


def test_pretraining_contract(tiny_model_config, tiny_corpus):
    seqs = tiny_corpus.sequences
    untrained, trace = pretrain_backbone(seqs, tiny_model_config, 0, make_rng(1))
    assert trace == []
    assert math.log(perplexity(untrained, None, seqs)) == pytest.approx(math.log(tiny_model_config.vocab_size), rel=0.1)
    a, trace = pretrain_backbone(seqs, tiny_model_config, 40, make_rng(1), lr=1e-2)
    b, _ = pretrain_backbone(seqs, tiny_model_config, 40, make_rng(1), lr=1e-2)
    assert a.checksum() == b.checksum()
    assert np.mean(trace[-5:]) < trace[0] < math.log(tiny_model_config.vocab_size) * 1.1
    assert all(np.isfinite(w).all() for w in a.weights.values())
    with pytest.raises(DomainError):
        pretrain_backbone([], tiny_model_config, 3, make_rng(1))


def test_backbone_is_read_only_and_checksummed(tiny_backbone, tiny_lora, tiny_corpus):
    with pytest.raises(ValueError):
        tiny_backbone.weights["head"][0, 0] = 1.0
    before = tiny_backbone.checksum()
    adapter = init_adapter(tiny_lora, tiny_backbone.linear_shapes(), make_rng(2))
    state = AdamWState(lr=1e-2)
    for batch in [make_batch(to_samples(tiny_corpus.sequences[:4], 8))] * 3:
        adapter = adamw_step(state, adapter, backward_adapter(tiny_backbone, adapter, batch))
    assert tiny_backbone.checksum() == before == tiny_backbone.frozen_checksum


def test_checkpoint_round_trip(tmp_path, tiny_backbone):
    path = save_backbone(tiny_backbone, tmp_path / "b.fgbb", {"note": "x"})
    back, meta = load_backbone(path)
    assert back.checksum() == tiny_backbone.checksum() and meta == {"note": "x"}
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "bad.fgbb").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_backbone(tmp_path / "bad.fgbb")
    (tmp_path / "junk.fgbb").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_backbone(tmp_path / "junk.fgbb")


def test_init_backbone_seeded(tiny_model_config):
    a = init_backbone(tiny_model_config, make_rng(3))
    b = init_backbone(tiny_model_config, make_rng(3))
    assert a.checksum() == b.checksum()
    assert np.array_equal(a.weights["layers.0.ln1.g"], np.ones(tiny_model_config.dim))


def test_lora_config_from_targets(tiny_model_config):
    cfg = LoraConfig(2, 16.0, attention_targets(tiny_model_config, ("wq", "wv", "w1", "head")))
    assert "head" in cfg.target_layers and "layers.1.mlp.w1" in cfg.target_layers
