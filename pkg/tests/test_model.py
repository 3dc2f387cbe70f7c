"""Tower forward passes, parameter bookkeeping, and checkpointing."""

import numpy as np
import pytest

from tworank import autodiff as ad
from tworank.autodiff import Tensor
from tworank.model import (FROZEN_IN_CONTINUOUS, GROUP_NAMES, ModelParams,
                           TowerConfig, batch_histories, context_score,
                           context_unknown_ids, init_params,
                           item_tower_forward, item_tower_forward_batch,
                           similarity, similarity_matrix, user_tower_forward,
                           user_tower_forward_batch)
from tworank.types import ContextFeatures, Event, EventType, UserHistory


def _history(user=0, n=3):
    events = [Event(day, EventType.CLICK, f"item number {day}", day) for day in range(n)]
    return UserHistory(user, events)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_defaults_fill_in():
    cfg = TowerConfig(d=32)
    assert cfg.user_ffn_hidden == 128
    assert cfg.item_hidden == 32
    assert cfg.max_positions == cfg.max_history + 1


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        TowerConfig(d=10, user_heads=4)


def test_config_rejects_mismatched_item_hidden():
    with pytest.raises(ValueError):
        TowerConfig(d=16, item_hidden=32)


def test_config_rejects_short_positions():
    with pytest.raises(ValueError):
        TowerConfig(d=16, max_history=64, max_positions=10)


def test_reference_scale_config():
    cfg = TowerConfig.paper()
    assert cfg.d == 256
    assert cfg.user_layers == 4
    assert cfg.user_heads == 4
    assert cfg.max_history == 1024


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def test_init_deterministic(tiny_config):
    a = init_params(tiny_config, seed=5)
    b = init_params(tiny_config, seed=5)
    assert a.names() == b.names()
    for n in a.names():
        assert np.array_equal(a[n].data, b[n].data)


def test_every_param_belongs_to_a_group(tiny_params):
    for name in tiny_params.names():
        assert tiny_params.group_of(name) in GROUP_NAMES
    for g in GROUP_NAMES:
        assert tiny_params.group(g), f"group {g} is empty"


def test_frozen_prefixes_exist(tiny_params):
    for prefix in FROZEN_IN_CONTINUOUS:
        assert any(n.startswith(prefix) for n in tiny_params.names()), prefix


def test_calibration_init_values(tiny_params):
    assert float(tiny_params["loss_params.alpha_cl"].data) == 1.0
    assert float(tiny_params["loss_params.gamma.click"].data) == 1.0
    assert float(tiny_params["loss_params.beta.click"].data) == 0.0
    # softplus(tau_raw) == 10 at init
    raw = float(tiny_params["loss_params.tau_raw"].data)
    assert np.log1p(np.exp(raw)) == pytest.approx(10.0, abs=1e-9)
    assert np.all(tiny_params["loss_params.ctx_surface"].data == 0.0)


def test_copy_is_deep(tiny_params):
    clone = tiny_params.copy()
    clone["embeddings.cls"].data[:] = 99.0
    assert not np.any(tiny_params["embeddings.cls"].data == 99.0)


def test_checkpoint_roundtrip(tiny_params, tmp_path):
    path = tmp_path / "model.ckpt"
    tiny_params.save(path)
    loaded = ModelParams.load(path)
    assert loaded.config == tiny_params.config
    assert loaded.names() == tiny_params.names()
    for n in tiny_params.names():
        # storage is float32
        assert np.allclose(loaded[n].data, tiny_params[n].data, atol=1e-6)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        ModelParams.load(path)


# ---------------------------------------------------------------------------
# item tower
# ---------------------------------------------------------------------------


def test_item_tower_zero_weights_reduces_to_layer_norm(tiny_config):
    params = init_params(tiny_config, seed=0)
    for i in range(tiny_config.item_layers):
        params[f"candidate_tower.L{i}.w"].data[:] = 0.0
        params[f"candidate_tower.L{i}.b"].data[:] = 0.0
    x = np.random.default_rng(0).normal(size=(2, tiny_config.d))
    out = item_tower_forward_batch(Tensor(x), params).data
    # relu(0)+x = x, so each block is plain layer norm; then l2 normalize
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + 1e-5)
    expect = (x - mu) * inv
    expect /= np.linalg.norm(expect, axis=-1, keepdims=True)
    assert np.allclose(out, expect, atol=1e-10)


def test_item_tower_output_unit_norm(tiny_params, tiny_config):
    x = np.random.default_rng(1).normal(size=(5, tiny_config.d))
    out = item_tower_forward_batch(Tensor(x), tiny_params).data
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)


def test_item_tower_single_matches_batch(tiny_params, tiny_config):
    x = np.random.default_rng(2).normal(size=tiny_config.d)
    single = item_tower_forward(Tensor(x), tiny_params).data
    batched = item_tower_forward_batch(Tensor(x[None]), tiny_params).data[0]
    assert np.allclose(single, batched, atol=1e-12)


# ---------------------------------------------------------------------------
# history batching and user tower
# ---------------------------------------------------------------------------


def test_position_ids_reverse_chronological(tiny_config, word_tokenizer):
    hb = batch_histories([_history(n=3)], word_tokenizer, tiny_config)
    assert list(hb.pos_ids[0]) == [2, 1, 0]  # latest event gets position 0
    assert np.all(hb.event_mask[0] == 1.0)


def test_overlong_history_rejected(tiny_config, word_tokenizer):
    with pytest.raises(ValueError):
        batch_histories([_history(n=tiny_config.max_history + 1)],
                        word_tokenizer, tiny_config)


def test_empty_history_encodes(tiny_params, tiny_config, word_tokenizer):
    out = user_tower_forward(UserHistory(0, []), tiny_params, word_tokenizer)
    assert out.shape == (tiny_config.d,)
    assert np.linalg.norm(out.data) == pytest.approx(1.0, abs=1e-9)


def test_user_embedding_invariant_to_batch_padding(tiny_params, word_tokenizer):
    """Batching a short history next to a longer one must not change its
    embedding (padding is fully masked)."""
    short = _history(user=0, n=2)
    long = _history(user=1, n=4)
    alone = user_tower_forward_batch(
        batch_histories([short], word_tokenizer, tiny_params.config), tiny_params).data[0]
    padded = user_tower_forward_batch(
        batch_histories([short, long], word_tokenizer, tiny_params.config), tiny_params).data[0]
    assert np.allclose(alone, padded, atol=1e-10)


def test_user_embedding_unit_norm(tiny_params, word_tokenizer):
    out = user_tower_forward_batch(
        batch_histories([_history(n=3), _history(user=1, n=1)],
                        word_tokenizer, tiny_params.config), tiny_params).data
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)


def test_user_embedding_depends_on_event_type(tiny_params, word_tokenizer):
    click = UserHistory(0, [Event(0, EventType.CLICK, "red anchor", 7)])
    prch = UserHistory(0, [Event(0, EventType.PURCHASE, "red anchor", 7)])
    a = user_tower_forward(click, tiny_params, word_tokenizer).data
    b = user_tower_forward(prch, tiny_params, word_tokenizer).data
    assert not np.allclose(a, b)


def test_web_query_event_encodes(tiny_params, word_tokenizer):
    h = UserHistory(0, [Event(0, EventType.WEB_QUERY, "red anchor")])
    out = user_tower_forward(h, tiny_params, word_tokenizer)
    assert np.linalg.norm(out.data) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# context tower and similarity
# ---------------------------------------------------------------------------


def test_context_score_is_table_sum(tiny_params):
    tiny_params["loss_params.ctx_surface"].data[1, 0] = 0.7
    tiny_params["loss_params.ctx_device"].data[0, 0] = -0.2
    out = context_score(ContextFeatures(1, 0), tiny_params)
    assert float(out.data) == pytest.approx(0.5, abs=1e-12)


def test_context_unknown_ids_clamp(tiny_params, tiny_config):
    unk = context_unknown_ids(tiny_config)
    tiny_params["loss_params.ctx_surface"].data[unk.surface_id, 0] = 42.0
    tiny_params["loss_params.ctx_device"].data[unk.device_id, 0] = 1.0
    # out-of-range ids fall back to the reserved last row
    out = context_score(ContextFeatures(999, 999), tiny_params)
    assert float(out.data) == pytest.approx(43.0, abs=1e-12)


def test_similarity_analytic_value():
    u = Tensor(np.array([1.0, 0.0]))
    v = Tensor(np.array([np.sqrt(0.5), np.sqrt(0.5)]))
    assert float(similarity(u, v).data) == pytest.approx(0.70710678, abs=1e-8)


def test_similarity_matrix_shape_and_values():
    users = Tensor(np.eye(3, 4))
    items = Tensor(np.eye(2, 4))
    out = similarity_matrix(users, items).data
    assert out.shape == (3, 2)
    assert out[0, 0] == 1.0 and out[1, 1] == 1.0 and out[2, 0] == 0.0


def test_gradient_reaches_every_group(tiny_params, word_tokenizer):
    """End to end, d(similarity)/d(params) touches embeddings, transformer,
    and candidate tower."""
    h = _history(n=2)
    user = user_tower_forward(h, tiny_params, word_tokenizer)
    content = Tensor(np.random.default_rng(3).normal(size=tiny_params.config.d))
    item = item_tower_forward(content, tiny_params)
    grads = ad.backward(similarity(user, item), tiny_params.parameters())
    touched = {tiny_params.group_of(n)
               for n in tiny_params.names()
               if np.any(grads[tiny_params[n]])}
    assert {"embeddings", "transformer", "candidate_tower"} <= touched
