import io
import itertools
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from complexdec.rvq import (Codebook, RvqStack, commitment_loss, ema_update, load_codebooks, perplexity,
                            rvq_decode, rvq_encode, save_codebooks, vq_nearest)


def make_stack(entries, decay=0.99):
    entries = torch.as_tensor(np.asarray(entries), dtype=torch.float32)
    n, k, d = entries.shape
    stack = RvqStack(n, k, d, decay=decay)
    for stage, e in zip(stack.stages, entries):
        stage.entries.copy_(e)
        stage.initialized.fill_(True)
    return stack


def test_nearest_examples():
    idx, q = vq_nearest(torch.tensor([0.9, 0.1]), torch.tensor([[0.0, 0.0], [1.0, 0.0]]))
    assert idx == 1
    torch.testing.assert_close(q, torch.tensor([1.0, 0.0]))
    # tie goes to the lower index
    idx, _ = vq_nearest(torch.tensor([0.5]), torch.tensor([[0.0], [1.0]]))
    assert idx == 0


def test_nearest_errors():
    with pytest.raises(ValueError, match="empty"):
        vq_nearest(torch.zeros(3, 2), torch.zeros(0, 2))
    with pytest.raises(ValueError, match="dimension"):
        vq_nearest(torch.zeros(3, 2), torch.zeros(4, 3))


def test_nearest_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(200, 5, generator=g, dtype=torch.float64)
    cb = torch.randn(32, 5, generator=g, dtype=torch.float64)
    idx, _ = vq_nearest(x, cb)
    brute = [min(range(32), key=lambda k: float(((x[i] - cb[k]) ** 2).sum())) for i in range(200)]
    assert idx.tolist() == brute


def test_single_stage_exact_entry():
    stack = make_stack([[[0.0, 0.0], [1.0, 2.0], [-3.0, 1.0]]])
    res = rvq_encode(torch.tensor([[1.0, 2.0]]), stack)
    assert res.indices.tolist() == [[1]]
    assert res.residual_energy_per_stage.tolist() == [0.0]


def brute_rvq_error(x, stages):
    """Greedy residual coding written with plain loops."""
    total = 0.0
    for v in x:
        r = v.copy()
        for cb in stages:
            best = min(cb, key=lambda e: float(np.sum((r - e) ** 2)))
            r = r - best
        total += float(np.sum(r ** 2))
    return total / len(x)


def test_two_stage_grid_beats_one_stage():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (100, 2))
    coarse = np.array(list(itertools.product([-1.5, -0.5, 0.5, 1.5], repeat=2)))
    fine = np.array(list(itertools.product([-0.25, 0.0, 0.25], repeat=2)) + [(0.0, 0.0)] * 7)
    one = brute_rvq_error(x, [coarse])
    two = brute_rvq_error(x, [coarse, fine])
    assert two <= one
    res1 = rvq_encode(torch.as_tensor(x, dtype=torch.float32), make_stack([coarse]))
    res2 = rvq_encode(torch.as_tensor(x, dtype=torch.float32), make_stack([coarse, fine]))
    assert res1.residual_energy_per_stage[-1].item() == pytest.approx(one, rel=1e-5)
    assert res2.residual_energy_per_stage[-1].item() == pytest.approx(two, rel=1e-5)
    assert res2.residual_energy_per_stage[-1] <= res1.residual_energy_per_stage[-1]


def test_decode_examples():
    stack = make_stack(np.zeros((3, 4, 2)))
    assert torch.count_nonzero(rvq_decode(torch.tensor([[1, 2, 3]]), stack)) == 0
    entries = np.arange(8, dtype=np.float32).reshape(1, 4, 2)
    stack = make_stack(entries)
    torch.testing.assert_close(rvq_decode(torch.tensor([[2]]), stack), torch.tensor([[4.0, 5.0]]))


def test_decode_matches_loop_oracle():
    rng = np.random.default_rng(1)
    entries = rng.standard_normal((4, 16, 3)).astype(np.float32)
    stack = make_stack(entries)
    idx = rng.integers(0, 16, (50, 4))
    out = rvq_decode(torch.as_tensor(idx), stack).numpy()
    for i in range(50):
        expected = sum(entries[s, idx[i, s]] for s in range(4))
        np.testing.assert_allclose(out[i], expected, rtol=1e-6)


def test_decode_out_of_range():
    stack = make_stack(np.zeros((2, 4, 2)))
    with pytest.raises(ValueError, match="out of range"):
        rvq_decode(torch.tensor([[0, 4]]), stack)
    with pytest.raises(ValueError):
        rvq_decode(torch.tensor([[0, 1, 2]]), stack)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n_stages=st.integers(1, 5))
def test_encode_decode_consistency(seed, n_stages):
    rng = np.random.default_rng(seed)
    stack = make_stack(rng.standard_normal((n_stages, 8, 3)))
    x = torch.as_tensor(rng.standard_normal((20, 3)), dtype=torch.float32)
    res = rvq_encode(x, stack)
    torch.testing.assert_close(rvq_decode(res.indices, stack), res.quantized.detach())
    assert res.indices.min() >= 0 and res.indices.max() < 8


def test_dim_mismatch():
    stack = make_stack(np.zeros((1, 4, 2)))
    with pytest.raises(ValueError, match="dim"):
        rvq_encode(torch.zeros(3, 5), stack)


# EMA

def test_ema_decay_zero_gives_cluster_means():
    cb = Codebook(2, 2, decay=0.0, eps=1e-5)
    cb.entries.copy_(torch.tensor([[0.0, 0.0], [5.0, 5.0]]))
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0], [4.0, 6.0], [6.0, 6.0]])
    ema_update(cb, x, torch.tensor([0, 0, 1, 1]))
    torch.testing.assert_close(cb.entries, torch.tensor([[0.5, 0.5], [5.0, 6.0]]), rtol=1e-5, atol=1e-5)


def test_ema_decay_one_is_noop():
    cb = Codebook(3, 2, decay=1.0)
    cb.entries.copy_(torch.arange(6.0).reshape(3, 2))
    before = cb.entries.clone()
    ema_update(cb, torch.randn(10, 2), torch.randint(0, 3, (10,)))
    assert torch.equal(cb.entries, before)


def test_ema_unassigned_entries_kept():
    cb = Codebook(3, 1, decay=0.5)
    cb.entries.copy_(torch.tensor([[1.0], [2.0], [3.0]]))
    cb.ema_cluster_size.fill_(1.0)
    cb.ema_embed_sum.copy_(cb.entries)
    ema_update(cb, torch.tensor([[10.0]]), torch.tensor([0]))
    assert cb.entries[1:].flatten().tolist() == [2.0, 3.0]


def test_ema_matches_hand_rolled_recurrence():
    k, d, decay, eps = 4, 3, 0.99, 1e-5
    rng = np.random.default_rng(2)
    cb = Codebook(k, d, decay=decay, eps=eps, dead_code_steps=0)
    cb.entries.copy_(torch.as_tensor(rng.standard_normal((k, d)), dtype=torch.float32))
    cb.ema_cluster_size.fill_(1.0)
    cb.ema_embed_sum.copy_(cb.entries)

    n_ema = np.ones(k)
    m_ema = cb.entries.double().numpy().copy()
    entries = m_ema.copy()
    for _ in range(2):
        x = rng.standard_normal((30, d))
        a = rng.integers(0, k - 1, 30)  # last code never assigned
        ema_update(cb, torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(a))
        for j in range(k):
            cnt = np.sum(a == j)
            s = x[a == j].sum(axis=0) if cnt else np.zeros(d)
            n_ema[j] = decay * n_ema[j] + (1 - decay) * cnt
            m_ema[j] = decay * m_ema[j] + (1 - decay) * s
        total = n_ema.sum()
        for j in range(k):
            if np.any(a == j):
                smoothed = (n_ema[j] + eps) / (total + k * eps) * total
                entries[j] = m_ema[j] / smoothed
    np.testing.assert_allclose(cb.entries.double().numpy(), entries, atol=1e-6)


def test_dead_code_reseeded():
    cb = Codebook(2, 1, decay=0.5, dead_code_steps=3)
    cb.entries.copy_(torch.tensor([[0.0], [100.0]]))
    cb.ema_cluster_size.fill_(1.0)
    cb.ema_embed_sum.copy_(cb.entries)
    x = torch.tensor([[0.1], [0.2]])
    for _ in range(3):
        cb.ema_update(x, torch.tensor([0, 0]))
    assert any(abs(cb.entries[1].item() - v) < 1e-6 for v in (0.1, 0.2))


def test_commitment_loss_examples():
    assert commitment_loss(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0])) == 0
    assert commitment_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0])).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        commitment_loss(torch.zeros(2), torch.zeros(3))


def test_straight_through_gradient_finite_difference():
    stack = make_stack([[[0.0, 0.0], [1.0, 1.0], [-1.0, 2.0]]])
    z = torch.tensor([[0.8, 0.9]], dtype=torch.float32, requires_grad=True)
    w = torch.tensor([0.7, -1.3])

    def objective(q):
        return (torch.sin(q) * w).sum() + (q ** 2).sum()

    res = rvq_encode(z, stack)
    objective(res.quantized).backward()
    q0 = res.quantized.detach().double()
    h = 1e-6
    fd = torch.zeros(2, dtype=torch.float64)
    for i in range(2):
        e = torch.zeros_like(q0)
        e[0, i] = h
        fd[i] = (objective(q0 + e) - objective(q0 - e)) / (2 * h)
    torch.testing.assert_close(z.grad[0].double(), fd, atol=1e-4, rtol=1e-4)


def test_residual_energy_monotone_after_ema_training():
    g = torch.Generator().manual_seed(0)
    stack = RvqStack(8, 32, 4)
    stack.train()
    scales = torch.tensor([3.0, 1.0, 0.5, 0.2])
    for _ in range(150):
        stack.encode(torch.randn(256, 4, generator=g) * scales, generator=g)
    res = stack.encode(torch.randn(2048, 4, generator=g) * scales, update=False)
    e = res.residual_energy_per_stage
    assert torch.all(e[1:] <= e[:-1] + 1e-6), e


def test_perplexity_uniform_input():
    g = torch.Generator().manual_seed(1)
    stack = RvqStack(1, 16, 2)
    stack.train()
    for _ in range(100):
        stack.encode(torch.rand(512, 2, generator=g), generator=g)
    res = stack.encode(torch.rand(4096, 2, generator=g), update=False)
    assert perplexity(res.indices[:, 0], 16) > 16 / 4


def test_perplexity_values():
    assert perplexity(torch.arange(8), 8) == pytest.approx(8.0)
    assert perplexity(torch.zeros(10, dtype=torch.long), 8) == pytest.approx(1.0)


def test_first_batch_initialization():
    stack = RvqStack(2, 4, 3)
    stack.train()
    x = torch.randn(16, 3)
    stack.encode(x)
    assert all(bool(s.initialized) for s in stack.stages)
    assert not torch.equal(stack.stages[0].entries, torch.zeros(4, 3))


def test_codebook_file_roundtrip():
    rng = np.random.default_rng(3)
    entries = rng.standard_normal((3, 16, 4)).astype(np.float32)
    stack = make_stack(entries)
    buf = io.BytesIO()
    save_codebooks(buf, stack, "imag")
    raw = buf.getvalue()
    assert raw[:4] == b"CPXB"
    assert struct.unpack("<BBIII", raw[4:18]) == (1, 1, 16, 4, 3)
    assert len(raw) == 18 + entries.size * 4
    branch, loaded = load_codebooks(io.BytesIO(raw))
    assert branch == "imag"
    np.testing.assert_array_equal(loaded, entries)
    with pytest.raises(ValueError, match="truncated"):
        load_codebooks(io.BytesIO(raw[:-1]))
    with pytest.raises(ValueError, match="magic"):
        load_codebooks(io.BytesIO(b"XXXX" + raw[4:]))
