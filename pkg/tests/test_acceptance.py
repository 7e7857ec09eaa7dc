"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary).  Oracles are written independently of the package: plain-Python bit
packing, direct Euler-Maruyama simulation, hand-rolled EMA recurrences and the
textbook SI-SDR definition.
"""
import copy
import math

import numpy as np
import pytest
import torch

from complexdec import dsp
from complexdec.bitstream import CRC_SIZE, HEADER_SIZE, BitstreamHeader, bitrate, compression_ratio, pack, unpack
from complexdec.codec import CodecModel
from complexdec.config import CodecConfig, CompandingParams, SdeConfig, TrainConfig, UNetConfig, tiny_codec_config
from complexdec.data import synthetic_utterance
from complexdec.evaluation import evaluate
from complexdec.losses import complex_mse
from complexdec.metrics import si_sdr
from complexdec.postfilter import ScoreModel, enhance
from complexdec.rvq import Codebook, RvqStack, ema_update
from complexdec.sde import (analytic_score_fn, complex_randn, pc_sample, perturbation_kernel, sample_t,
                            sample_xt, score_matching_loss, true_score)
from complexdec.training import codec_loss, companded_pairs, train_codec, train_spf

SDE = SdeConfig()

# desk-scale toy run: one 10 s utterance, tiny preset
TOY_SECONDS = 10.0
TOY_CODEC = TrainConfig(lr=5e-3, batch_size=8, segment_length=12800, max_steps=2000, log_every=0,
                        lr_schedule="cosine")
TOY_SPF = TrainConfig(lr=3e-3, batch_size=1, segment_length=320, max_steps=500, log_every=0, grad_clip=1e4)
TOY_UNET = UNetConfig(base_channels=16, channel_mults=(1, 2), embed_dim=32, tile_frames=64)


def test_bitrate_identity(verdict):
    cfg = CodecConfig()
    got = cfg.bitrate
    verdict("bitrate identity", got == 24000 and bitrate(150, 16, 10) == 24000, f"{got} bps")


def test_compression_ratios(verdict):
    got = {h: compression_ratio(48000, 150, h) for h in (64, 256, 1024)}
    verdict("compression ratios", got == {64: 5.0, 256: 1.25, 1024: 0.3125}, str(got))


def test_stft_geometry(verdict):
    spec = dsp.stft(np.zeros(48000))
    ok = tuple(spec.shape) == (150, 256) and CodecConfig().frame_rate == 150 and CodecConfig().n_bins == 256
    verdict("STFT geometry", ok, f"1 s -> {tuple(spec.shape)} (frames, bins)")


def test_stft_roundtrip_snr(verdict):
    rng = np.random.default_rng(0)
    worst = math.inf
    for _ in range(5):
        x = rng.standard_normal(96000)
        y = dsp.istft(dsp.stft(x), len(x)).numpy()
        inner = slice(510, len(x) - 510)
        snr = 10 * np.log10(np.sum(x[inner] ** 2) / np.sum((x[inner] - y[inner]) ** 2))
        worst = min(worst, snr)
    verdict("STFT round-trip SNR > 60 dB", worst > 60, f"worst {worst:.1f} dB over 5 segments")


def test_companding_roundtrip(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for alpha, beta in [(0.5, 0.15), (0.3, 1.0), (0.7, 0.4)]:
        x = torch.as_tensor(rng.standard_normal((64, 256)) + 1j * rng.standard_normal((64, 256)))
        p = CompandingParams(alpha, beta)
        back = dsp.decompand(dsp.compand(x, p), p)
        worst = max(worst, float(((back - x).abs() / x.abs()).max()))
    verdict("companding round trip < 1e-10", worst < 1e-10, f"max rel err {worst:.2e}")


def _oracle_payload(indices, bits):
    """Frames as MSB-first bit strings, each zero-padded to a whole byte."""
    out = bytearray()
    for frame in indices:
        s = "".join(format(int(v), f"0{bits}b") for v in frame)
        s += "0" * (-len(s) % 8)
        out += bytes(int(s[i:i + 8], 2) for i in range(0, len(s), 8))
    return bytes(out)


def test_bitstream_conformance(verdict):
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        bits, nr, ni = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(0, 17))
        n = int(rng.integers(0, 9))
        idx = rng.integers(0, 1 << bits, (n, nr + ni))
        h = BitstreamHeader(n_stages_real=nr, n_stages_imag=ni, bits_per_index=bits, n_frames=n)
        blob = pack(idx, h)
        h2, back = unpack(blob)
        same = h2 == h and np.array_equal(back.reshape(idx.shape), idx)
        bad += not (same and blob[HEADER_SIZE:-CRC_SIZE] == _oracle_payload(idx, bits))
    one_second = pack(np.zeros((150, 16), dtype=int), BitstreamHeader(n_frames=150, n_samples=48000))
    payload_bits = (len(one_second) - HEADER_SIZE - CRC_SIZE) * 8
    verdict("bitstream conformance", bad == 0 and payload_bits == 24000,
            f"{1000 - bad}/1000 configs bit-exact, 1 s = {payload_bits} payload bits")


def _euler_maruyama(x0, x_hat, t_end, cfg, n_paths=100_000, dt=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    k = cfg.sigma_max / cfg.sigma_min
    x = np.full(n_paths, x0, dtype=np.float64)
    for i in range(int(round(t_end / dt))):
        g = cfg.sigma_min * k ** (i * dt) * math.sqrt(2 * math.log(k))
        x = x + cfg.gamma * (x_hat - x) * dt + g * math.sqrt(dt) * rng.standard_normal(n_paths)
    return x


def test_sde_moment_oracle(verdict):
    x0, x_hat = 1.0, -0.5
    details, ok = [], True
    for t in (0.1, 0.5, 1.0):
        paths = _euler_maruyama(x0, x_hat, t, SDE, seed=int(t * 10))
        mean, std = perturbation_kernel(torch.tensor([x0], dtype=torch.float64),
                                        torch.tensor([x_hat], dtype=torch.float64), t, SDE)
        n = paths.size
        z_mean = abs(paths.mean() - mean.item()) / (paths.std() / math.sqrt(n))
        z_std = abs(paths.std() - float(std)) / (paths.std() / math.sqrt(2 * n))
        ok &= z_mean < 3 and z_std < 3
        details.append(f"t={t}: {z_mean:.2f}/{z_std:.2f} SE")
    verdict("SDE moment oracle", ok, ", ".join(details))


def test_score_identity(verdict):
    g = torch.Generator().manual_seed(0)
    x0, x_hat, z = (complex_randn((4, 16, 16), g, torch.float64) for _ in range(3))
    worst = 0.0
    for t in (SDE.t_eps, 0.3, 0.7, 1.0):
        mean, std = perturbation_kernel(x0, x_hat, t, SDE)
        xt = sample_xt(x0, x_hat, t, z, SDE)
        worst = max(worst, float((true_score(xt, mean, std) + z / std).abs().max()))
    verdict("score identity to 1e-6", worst < 1e-6, f"max deviation {worst:.1e}")


def test_analytic_sampler(verdict):
    g = torch.Generator().manual_seed(123)
    x0 = complex_randn((1, 16, 16), g, torch.float64)
    x_hat = x0 + 0.5 * complex_randn((1, 16, 16), g, torch.float64)
    fn = analytic_score_fn(x0, SDE)
    mean = torch.stack([pc_sample(fn, x_hat, SDE, seed=s) for s in range(50)]).mean(0)
    reduction = 1 - float(torch.linalg.vector_norm(mean - x0) / torch.linalg.vector_norm(x_hat - x0))
    verdict("analytic-score sampler", reduction >= 0.5, f"relative error reduced by {reduction:.1%}")


def _finite_difference_errors(model, wave, params, bypass, n=10, seed=0, h=1e-6):
    loss, _ = codec_loss(model, wave, bypass_quantizer=bypass)
    model.zero_grad()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = codec_loss(model, wave, bypass_quantizer=bypass)[0].item()
            p[idx] = orig - h
            down = codec_loss(model, wave, bypass_quantizer=bypass)[0].item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(numeric), 1e-6))
    return errors


def test_gradient_check(verdict):
    torch.manual_seed(8)
    model = CodecModel(tiny_codec_config()).double().eval()
    g = torch.Generator().manual_seed(0)
    w = model.decoder.conv_out.weight
    with torch.no_grad():
        w.copy_(torch.randn(w.shape, generator=g, dtype=w.dtype) * 0.05)
    wave = torch.as_tensor(np.random.default_rng(8).standard_normal((1, 4800)) * 0.3)
    enc = [p for n, p in model.named_parameters() if n.startswith("encoder") and p.ndim == 3]
    dec = [p for n, p in model.named_parameters() if n.startswith("decoder") and p.ndim == 3]
    # the straight-through estimator is not the derivative of the quantized
    # forward pass, so encoder weights are checked with the quantizer bypassed
    enc_err = _finite_difference_errors(model, wave, enc, bypass=True)
    dec_err = _finite_difference_errors(model, wave, dec, bypass=False, seed=1)
    worst = max(enc_err + dec_err)
    verdict("gradient check", worst <= 1e-3,
            f"worst rel err {worst:.1e} (10 encoder weights bypassed, 10 decoder weights quantized)")


def test_rvq_monotonicity_and_ema(verdict):
    g = torch.Generator().manual_seed(0)
    stack = RvqStack(8, 32, 4)
    stack.train()
    scales = torch.tensor([3.0, 1.0, 0.5, 0.2])
    for _ in range(150):
        stack.encode(torch.randn(256, 4, generator=g) * scales, generator=g)
    energy = stack.encode(torch.randn(2048, 4, generator=g) * scales, update=False).residual_energy_per_stage
    monotone = bool(torch.all(energy[1:] <= energy[:-1] + 1e-6))

    k, d, decay, eps = 8, 3, 0.99, 1e-5
    rng = np.random.default_rng(2)
    cb = Codebook(k, d, decay=decay, eps=eps, dead_code_steps=0)
    cb.entries.copy_(torch.as_tensor(rng.standard_normal((k, d)), dtype=torch.float32))
    cb.ema_cluster_size.fill_(1.0)
    cb.ema_embed_sum.copy_(cb.entries)
    n_ema, m_ema = np.ones(k), cb.entries.double().numpy().copy()
    entries = m_ema.copy()
    for _ in range(5):
        x = rng.standard_normal((40, d))
        a = rng.integers(0, k, 40)
        ema_update(cb, torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(a))
        for j in range(k):
            hit = a == j
            n_ema[j] = decay * n_ema[j] + (1 - decay) * hit.sum()
            m_ema[j] = decay * m_ema[j] + (1 - decay) * x[hit].sum(axis=0)
        total = n_ema.sum()
        for j in np.unique(a):
            entries[j] = m_ema[j] / ((n_ema[j] + eps) / (total + k * eps) * total)
    ema_err = float(np.abs(cb.entries.double().numpy() - entries).max())
    verdict("RVQ monotonicity + EMA recurrence", monotone and ema_err < 1e-6,
            f"stage energies {[round(float(e), 4) for e in energy]}, EMA max err {ema_err:.1e}")


def test_si_sdr_oracle(verdict):
    def oracle(ref, est):
        dot = sum(r * e for r, e in zip(ref, est))
        energy = sum(r * r for r in ref)
        target = [dot / energy * r for r in ref]
        noise = [e - t for e, t in zip(est, target)]
        return 10 * math.log10(sum(t * t for t in target) / sum(n * n for n in noise))

    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        ref = rng.standard_normal(400)
        est = ref + rng.uniform(0.05, 5) * rng.standard_normal(400)
        worst = max(worst, abs(si_sdr(ref, est) - oracle(ref.tolist(), est.tolist())))
    caps = (si_sdr(ref, 3.0 * ref), si_sdr([1.0, 0.0], [0.0, 1.0]))
    verdict("SI-SDR oracle equivalence", worst < 1e-9 and caps == (100.0, -100.0),
            f"max diff {worst:.1e} dB, caps {caps}")


# toy overfit


@pytest.fixture(scope="module")
def toy():
    wave = synthetic_utterance(TOY_SECONDS)
    torch.manual_seed(TOY_CODEC.seed)
    init = CodecModel(tiny_codec_config())
    before = copy.deepcopy(init).eval()
    codec = train_codec([wave], model=init, train_config=TOY_CODEC).model
    return wave, before, codec


@pytest.fixture(scope="module")
def toy_spf(toy):
    wave, _, codec = toy
    x0, xh = companded_pairs(codec, [wave])[0]
    x0, xh = x0.to(torch.complex64), xh.to(torch.complex64)
    torch.manual_seed(TOY_SPF.seed)
    model = ScoreModel(SDE, TOY_UNET)
    before = copy.deepcopy(model).eval()
    trained = train_spf(None, train_config=TOY_SPF, model=model, crop_frames=TOY_UNET.tile_frames,
                        pairs=[(x0, xh)]).model
    return x0, xh, before, trained


def _fixed_score_loss(model, x0, xh, frames, n=256, seed=99):
    """Score-matching loss averaged over a frozen set of (crop, t, z) draws."""
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n):
            s = int(torch.randint(x0.shape[0] - frames + 1, (1,), generator=g))
            a, b = x0[None, s:s + frames], xh[None, s:s + frames]
            t = sample_t(1, SDE, g)
            z = torch.complex(torch.randn(a.shape, generator=g), torch.randn(a.shape, generator=g))
            total += score_matching_loss(model, a, b, t, z, SDE).item()
    return total / n


def test_toy_codec_loss(toy, verdict):
    wave, before, codec = toy
    full = torch.as_tensor(wave, dtype=torch.float32)[None]
    with torch.no_grad():
        l0 = codec_loss(before, full)[1].total
        l1 = codec_loss(codec, full)[1].total
    ratio = l1 / l0
    verdict("toy overfit: codec total loss < 20% of step 0", ratio < 0.2,
            f"full-utterance total {l0:.1f} -> {l1:.1f} ({ratio:.1%})")


def test_toy_codec_si_sdr(toy, verdict):
    wave, _, codec = toy
    score = evaluate({"toy": wave}, codec).si_sdr
    verdict("toy overfit: codec SI-SDR > 0 dB", score > 0, f"{score:.2f} dB")


def test_toy_spf_loss(toy_spf, verdict):
    x0, xh, before, trained = toy_spf
    l0 = _fixed_score_loss(before, x0, xh, TOY_UNET.tile_frames)
    l1 = _fixed_score_loss(trained, x0, xh, TOY_UNET.tile_frames)
    verdict("toy overfit: SPF score-matching loss down >= 50%", l1 <= 0.5 * l0,
            f"{l0:.1f} -> {l1:.1f} ({1 - l1 / l0:.1%} reduction)")


def test_toy_spf_enhancement(toy, toy_spf, verdict):
    wave, _, codec = toy
    x0, xh, _, trained = toy_spf
    coded = codec.decode_indices(codec.encode_indices(wave))
    enhanced = enhance(coded, trained, cfg=SDE, seed=0, tile_frames=TOY_UNET.tile_frames)
    # compared in the companded domain the post-filter works in
    before, after = complex_mse(x0, xh).item(), complex_mse(x0, dsp.compand(enhanced)).item()
    spec = codec.analyze(torch.as_tensor(wave, dtype=torch.float32))
    linear = complex_mse(spec, coded).item(), complex_mse(spec, enhanced).item()
    verdict("toy overfit: enhanced complex-MSE below codec output", after < before,
            f"companded {before:.4g} -> {after:.4g} (linear {linear[0]:.4g} -> {linear[1]:.4g})")
