import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import copy_model, micro_model
from oracles import brute_jaccard, brute_top_k, two_pass_layernorm
from pmetlab.analysis import (
    PROFILE_HEADER,
    delta_norm_comparison,
    jaccard,
    similarity_profile,
    top_k_vocab,
)
from pmetlab.editor import EditReport, LayerReport
from pmetlab.model import BOS, forward

id_sets = st.sets(st.integers(0, 30), max_size=12)


@given(id_sets, id_sets)
def test_jaccard_symmetric_and_bounded(a, b):
    j = jaccard(a, b)
    assert j == jaccard(b, a)
    assert 0.0 <= j <= 1.0
    assert jaccard(a, a) == 1.0


def test_jaccard_empty_sets():
    assert jaccard([], []) == 1.0
    assert jaccard([1], []) == 0.0


def test_jaccard_and_top_k_against_brute_force():
    rng = np.random.default_rng(0)
    model = micro_model(seed=3, vocab_size=32)
    for _ in range(200):
        a = rng.integers(0, 20, size=int(rng.integers(0, 10))).tolist()
        b = rng.integers(0, 20, size=int(rng.integers(0, 10))).tolist()
        assert jaccard(a, b) == brute_jaccard(a, b)
        h = rng.normal(size=16)
        k = int(rng.integers(1, 33))
        logits = model.params["wte"] @ np.array(two_pass_layernorm(h.tolist(), model.params["lnf_g"],
                                                                   model.params["lnf_b"]))
        assert top_k_vocab(model, h, k) == brute_top_k(logits, k)


def test_top_k_ties_prefer_lower_ids():
    model = micro_model(seed=1, vocab_size=12)
    model.params["wte"][7] = model.params["wte"][3]
    model.params["wte"][9] = model.params["wte"][3]
    h = model.params["wte"][3] * 5
    top = top_k_vocab(model, h, 12)
    assert top.index(3) < top.index(7) < top.index(9)
    assert top[top.index(3) : top.index(3) + 3] == [3, 7, 9]
    with pytest.raises(ValueError):
        top_k_vocab(model, h, 0)
    with pytest.raises(ValueError):
        top_k_vocab(model, h, 13)


@given(st.integers(1, 31), st.integers(0, 100))
def test_top_k_nested(k, seed):
    model = micro_model(seed=2, vocab_size=32)
    h = np.random.default_rng(seed).normal(size=16)
    small = top_k_vocab(model, h, k)
    big = top_k_vocab(model, h, k + 1)
    assert big[:k] == small and len(set(big)) == k + 1


def test_identical_states_give_unit_scores():
    model = copy_model()
    _, tr = forward(model, [BOS])
    np.testing.assert_allclose(tr.attn(1)[0], tr.layer_input(1)[0], rtol=1e-5)
    np.testing.assert_allclose(tr.ffn(1)[0], tr.layer_input(1)[0], rtol=1e-5)
    prof = similarity_profile(model, [""], k=5)
    assert prof.cos_mhsa[0] == pytest.approx(1.0, abs=1e-12)
    assert prof.cos_ffn[0] == pytest.approx(1.0, abs=1e-12)
    assert prof.jac_mhsa[0] == 1.0 and prof.jac_ffn[0] == 1.0


def test_profile_ranges_and_order_independence(micro):
    prompts = ["w1 w2", "w3 w4 w5", "w6"]
    a = similarity_profile(micro, prompts, k=8)
    b = similarity_profile(micro, prompts[::-1], k=8)
    assert a.rows() == b.rows()
    for row in a.rows():
        assert all(-1 <= c <= 1 for c in row[1:3]) and all(0 <= j <= 1 for j in row[3:])
    assert a.layers == [1, 2] and a.n_prompts == 3
    assert a.to_csv().splitlines()[0] == ",".join(PROFILE_HEADER)
    assert similarity_profile(micro, prompts, k=500).k_used == 32
    with pytest.raises(ValueError):
        similarity_profile(micro, [])


def test_zero_state_cosine_is_counted(caplog):
    model = copy_model()
    model.params["layer1.w_o_ffn"][:] = 0.0
    prof = similarity_profile(model, [""], k=3)
    assert prof.cos_ffn[0] == 0.0 and prof.zero_cosines == 1
    assert "zero vector" in caplog.text


def test_delta_norm_comparison():
    a = EditReport([LayerReport(1, 3.0, 1, 0), LayerReport(2, 4.0, 1, 0)], {}, 1)
    b = EditReport([LayerReport(1, 1.0, 1, 0), LayerReport(2, 1.0, 1, 0)], {}, 1)
    t = delta_norm_comparison([("sqrt", a), ("even", b)])
    assert t.totals == {"sqrt": 5.0, "even": 2 ** 0.5}
    assert t.to_csv().splitlines()[0] == "layer,sqrt,even"
    c = EditReport([LayerReport(1, 1.0, 1, 0)], {}, 1)
    with pytest.raises(ValueError):
        delta_norm_comparison([("a", a), ("c", c)])
    with pytest.raises(ValueError):
        delta_norm_comparison([("a", a), ("a", b)])
    with pytest.raises(ValueError):
        delta_norm_comparison([("a", a)])
