import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from xmrs.dataset import MODALITIES, Modality
from xmrs.prompts import (
    ContextGenerator,
    ReferenceContext,
    generate_modality_context,
    generate_sample_context,
    init_prompt_bank,
    prompt_bound,
)

NATIVE = {Modality.TEXT: 5, Modality.VISUAL: 4, Modality.ACOUSTIC: 3}


def _gen_params(gen):
    g = lambda lin: (lin.weight.detach().numpy(), lin.bias.detach().numpy())  # noqa: E731
    return {"proj": {k: g(v) for k, v in gen.proj.items()}, "agg": {k: g(v) for k, v in gen.agg.items()}}


def test_bound_value():
    # independent arithmetic: a = 5 gives 1 + a^2 = 26
    assert prompt_bound(26) == pytest.approx(math.sqrt(6 / (26 * 26)))
    assert prompt_bound(26) == pytest.approx(0.09417, abs=5e-5)


@settings(max_examples=20, deadline=None)
@given(p_len=st.integers(1, 16), d=st.integers(1, 64), seed=st.integers(0, 2**31 - 1))
def test_prompt_entries_within_bound(p_len, d, seed):
    bank = init_prompt_bank(p_len, d, seed)
    beta = prompt_bound(d)
    assert len(list(bank.parameters())) == 6
    for p in bank.parameters():
        assert p.shape == (p_len, d)
        assert p.requires_grad
        assert float(p.detach().abs().max()) <= beta


def test_prompt_determinism_and_distinct():
    a, b = init_prompt_bank(4, 8, 3), init_prompt_bank(4, 8, 3)
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and torch.equal(pa, pb)
    params = list(a.parameters())
    assert all(not torch.equal(params[i], params[j]) for i in range(6) for j in range(i + 1, 6))


def test_context_shape_and_zero():
    torch.manual_seed(0)
    gen = ContextGenerator("modality", {m: 4 for m in MODALITIES}, 8)
    bank = init_prompt_bank(4, 8, 0)
    feats = {m: torch.randn(3, 4) for m in MODALITIES}
    ctx = generate_modality_context(Modality.TEXT, feats, bank, gen)
    assert isinstance(ctx, ReferenceContext)
    # prompt rows plus three projected length-3 sequences
    assert ctx.context.shape == (4 + 3 * 3, 8)
    with torch.no_grad():
        for p in gen.parameters():
            p.zero_()
    ctx = generate_modality_context(Modality.TEXT, feats, bank, gen)
    assert torch.equal(ctx.context, torch.zeros(13, 8))


@pytest.mark.parametrize("level", ["modality", "sample"])
def test_context_matches_oracle(level):
    torch.manual_seed(1)
    gen = ContextGenerator(level, NATIVE, 6).double()
    bank = init_prompt_bank(3, 6, 1).double()
    lengths = {Modality.TEXT: 2, Modality.VISUAL: 4, Modality.ACOUSTIC: 3}
    src = {m: torch.randn(lengths[m], NATIVE[m], dtype=torch.float64) for m in MODALITIES}
    fn = generate_modality_context if level == "modality" else generate_sample_context
    for m in MODALITIES:
        got = fn(m, src, bank, gen).context.detach().numpy()
        want = oracles.context_oracle(
            m.short, {k.value: v.numpy() for k, v in src.items()},
            bank.get(level, m).detach().numpy(), _gen_params(gen),
        )
        assert got.shape == (3 + 9, 6)
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_batched_context_equals_per_sample():
    torch.manual_seed(2)
    gen = ContextGenerator("sample", NATIVE, 6)
    bank = init_prompt_bank(2, 6, 2)
    src = {m: torch.randn(4, 3, NATIVE[m]) for m in MODALITIES}
    batched = gen(Modality.VISUAL, src, bank.get("sample", Modality.VISUAL))
    for i in range(4):
        single = gen(Modality.VISUAL, {m: v[i] for m, v in src.items()}, bank.get("sample", Modality.VISUAL))
        torch.testing.assert_close(batched[i], single)


def test_levels_are_separate():
    torch.manual_seed(3)
    m_gen = ContextGenerator("modality", NATIVE, 6)
    s_gen = ContextGenerator("sample", NATIVE, 6)
    bank = init_prompt_bank(2, 6, 3)
    src = {m: torch.randn(3, NATIVE[m]) for m in MODALITIES}
    a = generate_modality_context(Modality.TEXT, src, bank, m_gen).context
    b = generate_sample_context(Modality.TEXT, src, bank, s_gen).context
    assert a.shape == b.shape == (2 + 9, 6)
    assert not torch.allclose(a, b)
    with pytest.raises(ValueError):
        generate_sample_context(Modality.TEXT, src, bank, m_gen)
    with pytest.raises(ValueError):
        generate_modality_context(Modality.TEXT, src, bank, s_gen)


def test_missing_source_rejected():
    gen = ContextGenerator("modality", NATIVE, 6)
    bank = init_prompt_bank(2, 6, 0)
    with pytest.raises(ValueError, match="acoustic"):
        gen(Modality.TEXT, {Modality.TEXT: torch.randn(2, 5), Modality.VISUAL: torch.randn(2, 4)},
            bank.get("modality", Modality.TEXT))
