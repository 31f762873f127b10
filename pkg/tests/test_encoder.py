import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_relative_error, numeric_grad
from synmodal import numcore as nc
from synmodal.assembly import ModalTriple, collate, pack
from synmodal.encoder import (
    CheckpointError,
    EncoderConfig,
    check_compatible,
    embed,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from synmodal.tokenizer import PAD_ID

SMALL = EncoderConfig(vocab_size=30, layers=2, hidden_size=16, heads=4, ffn_size=32, max_positions=40)


def triple(n_pl=3, n_ast=4, nl=(7, 8)):
    return ModalTriple(
        pl=tuple(range(10, 10 + n_pl)), pl_identifier=(False,) * n_pl,
        ast=tuple(range(5, 5 + n_ast)), ast_edges=(), ast_nodes=(0,), nl=nl,
    )


@pytest.fixture
def params():
    return init_params(SMALL, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(vocab_size=10, hidden_size=10, heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)
    with pytest.raises(ValueError):
        EncoderConfig.from_dict({"vocab_size": 5, "colour": 1})
    assert EncoderConfig.from_dict(SMALL.to_dict()) == SMALL


def test_init_std_and_truncation():
    cfg = EncoderConfig(vocab_size=500, hidden_size=64, heads=4, ffn_size=64)
    w = init_params(cfg, np.random.default_rng(1))["embeddings.token"].data
    assert np.abs(w).max() <= 0.04
    assert 0.015 < w.std() < 0.02


def test_zero_token_table_gives_position_embeddings(params):
    params["embeddings.token"].data[:] = 0.0
    ids = np.array([3, 9, 1])
    out = embed(params, ids, np.arange(3))
    np.testing.assert_array_equal(out.data, params["embeddings.position"].data[:3])


def test_same_id_differs_by_position_difference(params):
    out = embed(params, np.array([4, 4]), np.array([2, 11])).data
    pos = params["embeddings.position"].data
    np.testing.assert_allclose(out[1] - out[0], pos[11] - pos[2], atol=1e-15)


def test_embed_shape_and_index_errors(params):
    assert embed(params, np.arange(6), np.arange(6)).shape == (6, 16)
    with pytest.raises(IndexError):
        embed(params, np.array([30]), np.array([0]))
    with pytest.raises(IndexError):
        embed(params, np.array([1]), np.array([40]))


def test_single_token_output_shape(params):
    from synmodal.assembly import PackedInput

    single = PackedInput((2,), ("CLS",), (), (), (), (), (), ())
    out = forward(params, SMALL, single)
    assert out.hidden.shape == (1, 16) and out.cls.shape == (16,)


def test_hidden_rows_equal_packed_length(params):
    packed = pack(triple())
    out = forward(params, SMALL, packed)
    assert out.hidden.shape == (len(packed), 16)
    np.testing.assert_array_equal(out.cls.data, out.hidden.data[0])


def test_too_long_input_is_a_dimension_error(params):
    with pytest.raises(nc.ShapeError):
        forward(params, SMALL, pack(triple(n_pl=30, n_ast=20)))


def test_wrongly_shaped_params_raise(params):
    params["layer0.ffn.in.weight"] = nc.Tensor(np.zeros((16, 31)))
    with pytest.raises(nc.ShapeError):
        forward(params, SMALL, pack(triple()))


@settings(max_examples=30, deadline=None)
@given(tail=st.lists(st.integers(0, 29), min_size=1, max_size=8), seed=st.integers(0, 2**16))
def test_pad_tail_content_does_not_leak(tail, seed):
    params = init_params(SMALL, np.random.default_rng(seed))
    short, long_ = pack(triple()), pack(triple(n_pl=6, n_ast=8))
    batch = collate([short, long_])
    n = len(short)
    base = forward(params, SMALL, batch).hidden.data[0, :n]
    width = batch.ids.shape[1] - n
    batch.ids[0, n:] = np.resize(np.asarray(tail), width)
    moved = forward(params, SMALL, batch).hidden.data[0, :n]
    np.testing.assert_allclose(moved, base, rtol=0, atol=1e-12)
    alone = forward(params, SMALL, short).hidden.data
    np.testing.assert_allclose(alone, base, rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one_and_ignore_pad(params):
    batch = collate([pack(triple()), pack(triple(n_pl=6, n_ast=8))])
    out = forward(params, SMALL, batch, keep_attention=True)
    assert len(out.attentions) == SMALL.layers
    for probs in out.attentions:
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(probs[0, :, :, ~batch.attention_mask[0]] == 0.0)


def test_deterministic_without_dropout(params):
    packed = pack(triple())
    a = forward(params, SMALL, packed).hidden.data
    b = forward(params, SMALL, packed).hidden.data
    assert np.array_equal(a, b)


def test_dropout_only_with_rng(params):
    packed = pack(triple())
    plain = forward(params, SMALL, packed).hidden.data
    dropped = forward(params, SMALL, packed, rng=np.random.default_rng(3)).hidden.data
    assert not np.allclose(plain, dropped)


def test_twelve_layers_stay_finite():
    cfg = EncoderConfig(vocab_size=50, layers=12, hidden_size=32, heads=4, ffn_size=64)
    rng = np.random.default_rng(5)
    params = init_params(cfg, rng)
    items = [pack(triple(n_pl=int(rng.integers(1, 20)), n_ast=int(rng.integers(1, 20)))) for _ in range(4)]
    batch = collate(items)
    batch.ids[:] = np.where(batch.attention_mask, rng.integers(0, 50, batch.ids.shape), PAD_ID)
    hidden = forward(params, cfg, batch).hidden.data
    assert np.isfinite(hidden).all()
    assert np.linalg.norm(hidden, axis=-1).max() < 10 * np.sqrt(cfg.hidden_size)


def test_gradients_match_finite_differences():
    cfg = EncoderConfig(vocab_size=12, layers=2, hidden_size=8, heads=2, ffn_size=16, max_positions=16,
                        dropout_rate=0.0, init_std=0.5)
    params = init_params(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    for name, p in params.items():
        if name.endswith(("gamma", "beta", "bias")):
            p.data = p.data + rng.normal(0, 0.3, p.shape)
    batch = collate([pack(triple(n_pl=2, n_ast=2, nl=(3,))), pack(triple(n_pl=1, n_ast=1, nl=None))])
    batch.ids[:] = np.where(batch.attention_mask, batch.ids % 12, PAD_ID)
    readout = rng.normal(size=(2, batch.ids.shape[1], 8))

    def scalar():
        return (forward(params, cfg, batch).hidden * nc.Tensor(readout)).sum()

    loss = scalar()
    nc.zero_grad(params)
    loss.backward()
    names = list(params)
    numeric = numeric_grad(lambda: scalar().item(), [params[n].data for n in names])
    # Roundoff in the central difference of a readout of magnitude ~10 is ~1e-10,
    # so entries whose true gradient vanishes are compared against a 1e-5 floor.
    for name, num in zip(names, numeric):
        assert max_relative_error(params[name].grad, num, floor=1e-5) < 1e-4, name
    # Softmax is shift-invariant along each row, so the key bias gets no gradient.
    for i in range(cfg.layers):
        assert np.abs(params[f"layer{i}.attn.key.bias"].grad).max() < 1e-12


def test_checkpoint_round_trip_and_byte_stability(tmp_path, params):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(a, params, SMALL, step=5)
    save_checkpoint(b, init_params(SMALL, np.random.default_rng(0)), SMALL, step=5)
    assert a.read_bytes() == b.read_bytes()
    doc = load_checkpoint(a)
    assert doc["encoder_config"] == SMALL and doc["step"] == 5
    for name, p in params.items():
        assert np.array_equal(doc["params"][name].data, p.data)
    check_compatible(doc["params"], params)


def test_checkpoint_errors(tmp_path, params):
    path = tmp_path / "c.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    other = init_params(EncoderConfig(vocab_size=30, layers=2, hidden_size=8, heads=4, ffn_size=32,
                                      max_positions=40), np.random.default_rng(0))
    with pytest.raises(CheckpointError, match="shape"):
        check_compatible(other, params)
