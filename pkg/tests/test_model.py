import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rtkge.model import (ModelConfig, TemporalKGE, build_context_index, context_encoding, de_rotate_score,
                         diachronic_embed, gamma, param_count, positional_row, relative_delta, rotate_score,
                         rt_bilinear_score, rt_de_rotate_score, table_shapes)


def _model(kind="rt", V=6, R=3, d_s=4, d_t=4, d_r=4, seed=0, **kw):
    return TemporalKGE(ModelConfig(V, R, kind=kind, d_s=d_s, d_t=d_t, d_r=d_r, dtype="float64", **kw), seed=seed)


def _set(model, **tables):
    with torch.no_grad():
        for name, value in tables.items():
            getattr(model, name).copy_(torch.as_tensor(np.asarray(value, dtype=np.float64)))


def _randomise(model, seed=0):
    rng = np.random.default_rng(seed)
    _set(model, **{k: rng.normal(size=v.shape) for k, v in model.state_arrays().items()})


# -- independent oracles (plain numpy / python complex arithmetic) -------------------------

def o_diachronic(p, e, t):
    dia = p["E_A"][e] + np.sin(t * p["E_F"][e] + p["E_PHI"][e]) if "E_A" in p else np.zeros(0)
    return np.concatenate([p["E"][e], dia])


def o_complex(x):
    return x[0::2] + 1j * x[1::2]


def o_term_a(p, s, r, o, t):
    rot = np.exp(1j * p["E_R"][r])
    return float(np.sum(np.abs(o_complex(o_diachronic(p, s, t)) * rot - o_complex(o_diachronic(p, o, t)))))


def o_rho(i, d):
    return np.array([math.sin(i / 10000 ** ((j // 2) / d)) if j % 2 == 0 else math.cos(i / 10000 ** ((j // 2) / d))
                     for j in range(d)])


def o_history(train, e, r, t_q):
    return sorted({int(q[3]) for q in train if q[1] == r and (q[0] == e or q[2] == e) and q[3] < t_q})


def o_P(train, e, t, t_q, R, d):
    rows = []
    for rr in range(R):
        h = o_history(train, e, rr, t_q)
        rows.append(o_rho(t - t_q + (t_q - h[-1]), d) if h else np.zeros(d))
    return np.array(rows)


def o_gamma(p, train, r, e, t, t_q, R, d):
    return p["W_P"][r] @ o_P(train, e, t, t_q, R, d)


def o_rt(p, train, s, r, o, t, t_q, R, d):
    gs, go = o_gamma(p, train, r, s, t, t_q, R, d), o_gamma(p, train, r, o, t, t_q, R, d)
    b = np.abs(p["E"][s] @ p["W_E"] - go).sum()
    c = np.abs(gs - p["E"][o] @ p["W_E"]).sum()
    return o_term_a(p, s, r, o, t) + b + c


def o_bilinear(p, train, s, r, o, t, t_q, R, d):
    gs, go = o_gamma(p, train, r, s, t, t_q, R, d), o_gamma(p, train, r, o, t, t_q, R, d)
    ds, do = o_diachronic(p, s, t), o_diachronic(p, o, t)
    return (ds @ p["W_rel"][r] @ do + gs @ p["W_bil"] @ go
            + (p["E"][s] @ p["W_E"]) @ go + gs @ (p["E"][o] @ p["W_E"]))


def _random_train(rng, V, R, T, n):
    return np.stack([rng.integers(0, V, n), rng.integers(0, R, n), rng.integers(0, V, n), rng.integers(0, T, n)], 1)


# -- config ------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(d_s=3), dict(kind="rotate", d_t=2, d_r=0), dict(kind="de", d_r=2),
                                dict(kind="de", d_r=0, bilinear=True), dict(d_s=0, d_t=0, d_r=0),
                                dict(kind="xyz"), dict(norm="l3")])
def test_config_rejects_inconsistent_dims(kw):
    base = dict(n_entities=3, n_relations=2, kind="rt", d_s=4, d_t=4, d_r=4)
    base.update(kw)
    with pytest.raises(ValueError):
        ModelConfig(**base)


# -- diachronic embeddings -----------------------------------------------------------------

def test_diachronic_static_when_dt_zero():
    m = _model("rotate", d_t=0, d_r=0)
    for t in (0, 5, 100):
        assert torch.equal(diachronic_embed(m, 2, t), m.E[2])


def test_diachronic_frozen_sinusoid():
    m = _model("de", d_r=0)
    _set(m, E_F=np.zeros((6, 4)), E_PHI=np.zeros((6, 4)))
    for t in (0, 3, 17):
        assert torch.equal(diachronic_embed(m, 1, t)[4:], m.E_A[1])


def test_diachronic_scalar_example():
    m = _model("de", V=1, R=1, d_s=2, d_t=2, d_r=0)
    _set(m, E_A=[[1.0, 1.0]], E_F=[[math.pi / 2, 0.0]], E_PHI=[[0.0, 0.0]])
    assert diachronic_embed(m, 0, 1)[2].item() == pytest.approx(2.0, abs=1e-15)


# -- scores ---------------------------------------------------------------------------------

def test_rotate_identity_and_half_turn():
    m = _model("rotate", V=2, R=2, d_s=2, d_t=0, d_r=0)
    _set(m, E=[[1.0, 0.0], [-1.0, 0.0]], E_R=[[0.0], [math.pi]])
    assert rotate_score(m, 0, 0, 0) == 0.0
    assert rotate_score(m, 0, 1, 1) == pytest.approx(0.0, abs=1e-15)
    assert rotate_score(m, 0, 0, 1) == pytest.approx(2.0)


def test_de_rotate_zero_when_embeddings_coincide():
    m = _model("de", d_r=0)
    p = m.state_arrays()
    p["E"][1], p["E_A"][1], p["E_F"][1], p["E_PHI"][1] = p["E"][0], p["E_A"][0], p["E_F"][0], p["E_PHI"][0]
    p["E_R"][2] = 0.0
    m.load_arrays(p)
    assert de_rotate_score(m, 0, 2, 1, 9) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_scores_match_oracle(seed):
    rng = np.random.default_rng(seed)
    V, R, T, d = 7, 3, 12, 4
    train = _random_train(rng, V, R, T, 25)
    index = build_context_index(train, R)
    rt = _model("rt", V=V, R=R, d_r=d)
    _randomise(rt, seed)
    p = rt.state_arrays()
    de = _model("de", V=V, R=R, d_r=0)
    de.load_arrays({k: v for k, v in p.items() if k in de.tables})
    ro = _model("rotate", V=V, R=R, d_t=0, d_r=0)
    ro.load_arrays({"E": p["E"], "E_R": p["E_R"][:, :2]})
    for _ in range(5):
        s, r, o, t, t_q = (int(x) for x in (rng.integers(V), rng.integers(R), rng.integers(V),
                                            rng.integers(T), rng.integers(T + 2)))
        assert rt_de_rotate_score(rt, index, s, r, o, t, t_q) == pytest.approx(o_rt(p, train, s, r, o, t, t_q, R, d),
                                                                              rel=1e-12)
        assert de_rotate_score(de, s, r, o, t) == pytest.approx(o_term_a(p, s, r, o, t), rel=1e-12)
        static = {"E": p["E"], "E_R": p["E_R"][:, :2]}
        assert rotate_score(ro, s, r, o) == pytest.approx(o_term_a(static, s, r, o, t), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_bilinear_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    V, R, T, d = 5, 2, 10, 4
    train = _random_train(rng, V, R, T, 15)
    index = build_context_index(train, R)
    m = _model("rt", V=V, R=R, d_r=d, bilinear=True)
    _randomise(m, seed)
    p = m.state_arrays()
    for _ in range(5):
        s, r, o, t = (int(x) for x in (rng.integers(V), rng.integers(R), rng.integers(V), rng.integers(T)))
        assert rt_bilinear_score(m, index, s, r, o, t, T) == pytest.approx(o_bilinear(p, train, s, r, o, t, T, R, d),
                                                                           rel=1e-10, abs=1e-12)


def test_bilinear_mode_guard_and_zero_params():
    m = _model("rt")
    index = build_context_index(np.array([[0, 0, 1, 2]]), 3)
    with pytest.raises(ValueError, match="bilinear"):
        rt_bilinear_score(m, index, 0, 0, 1, 3, 3)
    b = _model("rt", bilinear=True)
    _set(b, **{k: np.zeros(v.shape) for k, v in b.state_arrays().items()})
    assert rt_bilinear_score(b, index, 0, 0, 1, 3, 3) == 0.0


def test_bilinear_reduces_to_first_term_without_gamma():
    m = _model("rt", bilinear=True)
    _randomise(m, 3)
    _set(m, W_P=np.zeros((3, 3)))
    p = m.state_arrays()
    index = build_context_index(np.array([[0, 0, 1, 2], [1, 2, 3, 4]]), 3)
    ds, do = o_diachronic(p, 0, 5), o_diachronic(p, 1, 5)
    assert rt_bilinear_score(m, index, 0, 1, 1, 5, 5) == pytest.approx(ds @ p["W_rel"][1] @ do, rel=1e-12)


def test_rt_all_zero_params_gives_zero():
    m = _model("rt")
    _set(m, **{k: np.zeros(v.shape) for k, v in m.state_arrays().items()})
    index = build_context_index(np.array([[0, 0, 1, 2]]), 3)
    assert rt_de_rotate_score(m, index, 0, 1, 1, 4, 4) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["rotate", "de", "rt"]), st.sampled_from(["l1", "l2"]))
def test_scores_finite_and_non_negative(seed, kind, norm):
    rng = np.random.default_rng(seed)
    dims = {"rotate": (4, 0, 0), "de": (4, 4, 0), "rt": (4, 4, 4)}[kind]
    m = _model(kind, V=8, R=3, d_s=dims[0], d_t=dims[1], d_r=dims[2], norm=norm)
    _randomise(m, seed)
    train = _random_train(rng, 8, 3, 20, 30)
    q = _random_train(rng, 8, 3, 20, 50)
    d = m.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3], np.full(50, 20), build_context_index(train, 3))
    assert torch.isfinite(d).all() and (d >= 0).all()


def test_time_shift_invariance_without_frequencies():
    m = _model("de", d_r=0)
    _randomise(m, 5)
    _set(m, E_F=np.zeros((6, 4)))
    assert len({de_rotate_score(m, 1, 2, 3, t) for t in range(0, 50, 7)}) == 1


# -- relative temporal context --------------------------------------------------------------

def test_context_index_definition():
    idx = build_context_index(np.array([[0, 0, 1, 5]]), 1)
    assert idx[(0, 0)] == [5] and idx[(1, 0)] == [5]
    idx = build_context_index(np.array([[0, 0, 1, 5], [0, 0, 2, 2]]), 1)
    assert idx[(0, 0)] == [2, 5]


def test_context_index_matches_naive_oracle():
    rng = np.random.default_rng(11)
    V, R = 30, 4
    train = _random_train(rng, V, R, 60, 1000)
    idx = build_context_index(train, R)
    expected = {}
    for s, r, o, t in train.tolist():
        for e in (s, o):
            expected.setdefault((e, r), set()).add(t)
    assert idx.pairs() == {k: sorted(v) for k, v in expected.items()}
    for e in range(V):
        for r in range(R):
            assert idx[(e, r)] == sorted(expected.get((e, r), ()))


def test_relative_delta_examples():
    idx = build_context_index(np.array([[0, 0, 1, 2], [0, 0, 1, 5], [2, 0, 3, 9]]), 1)
    assert relative_delta(idx, 0, 0, 9) == 4
    assert relative_delta(idx, 2, 0, 9) is None
    assert relative_delta(build_context_index(np.zeros((0, 4), np.int64), 1), 0, 0, 3) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_relative_delta_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    train = _random_train(rng, 6, 2, 15, 20)
    idx = build_context_index(train, 2)
    for _ in range(10):
        e, r, t = int(rng.integers(6)), int(rng.integers(2)), int(rng.integers(-2, 18))
        h = o_history(train, e, r, t)
        assert relative_delta(idx, e, r, t) == (t - h[-1] if h else None)


def test_positional_row_examples():
    np.testing.assert_array_equal(positional_row(0.0, 6), [0, 1, 0, 1, 0, 1])
    i = 2.7
    np.testing.assert_allclose(positional_row(i, 8)[:2], [math.sin(i), math.cos(i)], rtol=0, atol=1e-15)
    np.testing.assert_allclose(positional_row(i, 8), o_rho(i, 8), rtol=0, atol=1e-15)
    tensor = positional_row(torch.tensor([i], dtype=torch.float64), 8)[0].numpy()
    np.testing.assert_allclose(tensor, o_rho(i, 8), rtol=0, atol=1e-15)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from([2, 4, 16, 32]))
def test_positional_row_bounded(i, d):
    assert np.abs(positional_row(i, d)).max() <= 1.0


def test_gamma_examples():
    m = _model("rt", V=2, R=1, d_s=2, d_t=2, d_r=4)
    idx = build_context_index(np.array([[0, 0, 1, 6]]), 1)
    assert torch.equal(gamma(m, idx, 0, 0, 10, 10), torch.zeros(4, dtype=torch.float64))
    _set(m, W_P=[[1.0]])
    np.testing.assert_allclose(gamma(m, idx, 0, 0, 10, 10).numpy(), o_rho(4, 4), atol=1e-15)
    # t differs from t_q: the lag becomes t - t_q + delta
    np.testing.assert_allclose(gamma(m, idx, 0, 0, 12, 10).numpy(), o_rho(6, 4), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gamma_matches_oracle_and_ignores_tuple_order(seed):
    rng = np.random.default_rng(seed)
    V, R, d = 5, 3, 6
    train = _random_train(rng, V, R, 20, 30)
    m = _model("rt", V=V, R=R, d_r=d)
    _randomise(m, seed)
    p = m.state_arrays()
    idx = build_context_index(train, R)
    shuffled = build_context_index(train[rng.permutation(len(train))], R)
    for _ in range(5):
        r, e, t, t_q = (int(x) for x in (rng.integers(R), rng.integers(V), rng.integers(25), rng.integers(25)))
        got = gamma(m, idx, r, e, t, t_q).numpy()
        np.testing.assert_allclose(got, o_gamma(p, train, r, e, t, t_q, R, d), rtol=1e-12, atol=1e-12)
        assert np.array_equal(got, gamma(m, shuffled, r, e, t, t_q).numpy())


def test_context_encoding_no_history_rows_are_zero():
    idx = build_context_index(np.array([[0, 1, 1, 3]]), 2)
    enc = context_encoding(idx, [0], [5], [5], 4, torch.float64)[0]
    assert torch.equal(enc[0], torch.zeros(4, dtype=torch.float64))
    np.testing.assert_allclose(enc[1].numpy(), o_rho(2, 4), atol=1e-15)


# -- reductions ------------------------------------------------------------------------------

def test_reduction_chain_bit_identical():
    rng = np.random.default_rng(0)
    V, R = 10, 3
    rt0 = _model("rt", V=V, R=R, d_r=0)
    de = _model("de", V=V, R=R, d_r=0)
    _randomise(rt0, 1)
    de.load_arrays(rt0.state_arrays())
    q = _random_train(rng, V, R, 30, 1000)
    assert torch.equal(rt0.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3]),
                       de.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3]))
    rt = _model("rt", V=V, R=R, d_r=4)
    arrays = dict(rt0.state_arrays(), W_E=np.zeros((4, 4)), W_P=np.zeros((R, R)))
    rt.load_arrays(arrays)
    idx = build_context_index(q[:500], R)
    assert torch.equal(rt.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3], np.full(1000, 30), idx),
                       de.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3]))
    de0 = _model("de", V=V, R=R, d_t=0, d_r=0)
    ro = _model("rotate", V=V, R=R, d_t=0, d_r=0)
    _randomise(de0, 2)
    ro.load_arrays(de0.state_arrays())
    assert torch.equal(de0.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3]),
                       ro.score_quads(q[:, 0], q[:, 1], q[:, 2], q[:, 3]))


# -- parameter count -------------------------------------------------------------------------

def test_param_count_closed_forms():
    assert param_count(ModelConfig(10, 3, kind="rotate", d_s=8, d_t=0, d_r=0)) == 10 * 8 + 3 * 4
    cfg = ModelConfig(10, 3, kind="rt", d_s=4, d_t=4, d_r=4)
    model = TemporalKGE(cfg)
    assert param_count(cfg) == sum(p.numel() for p in model.parameters())
    assert set(table_shapes(cfg)) == {"E", "E_A", "E_F", "E_PHI", "E_R", "W_E", "W_P"}
    doubled = ModelConfig(20, 3, kind="rt", d_s=4, d_t=4, d_r=4)
    assert param_count(doubled) - param_count(cfg) == 10 * (4 + 3 * 4)
