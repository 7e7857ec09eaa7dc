"""scikit-learn style front ends.

``ComplexDecCodec`` is a transformer: ``fit`` trains the codec on waveforms,
``transform`` maps waveforms to code indices and ``inverse_transform`` maps
indices back to waveforms.  ``ScorePostFilter`` learns to refine decoded
spectra and applies itself through ``predict``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import bitstream, checkpoints, dsp
from .codec import CodecModel
from .config import CodecConfig, CompandingParams, SdeConfig, TrainConfig, UNetConfig, get_preset
from .evaluation import evaluate, scored_length
from .metrics import si_sdr
from .postfilter import ScoreModel, enhance
from .training import companded_pairs, train_codec, train_spf
from .validation import check_indices, check_waveform, check_waveforms


class ComplexDecCodec(TransformerMixin, BaseEstimator):
    """Complex-spectral RVQ codec.

    Parameters
    ----------
    preset : str
        Name of a :mod:`complexdec.config` preset (``"full"``, ``"default"`` or ``"tiny"``).
    config_overrides : dict or None
        Field overrides applied to the preset's ``CodecConfig``.
    lr, batch_size, segment_length, max_steps, seed, lr_schedule
        Training settings; see :class:`~complexdec.config.TrainConfig`.
    """

    def __init__(self, preset="tiny", config_overrides=None, lr=1e-4, batch_size=16,
                 segment_length=96000, max_steps=2000, seed=0, lr_schedule="constant"):
        self.preset = preset
        self.config_overrides = config_overrides
        self.lr = lr
        self.batch_size = batch_size
        self.segment_length = segment_length
        self.max_steps = max_steps
        self.seed = seed
        self.lr_schedule = lr_schedule

    def _make_config(self) -> CodecConfig:
        cfg = get_preset(self.preset)
        if self.config_overrides:
            cfg = CodecConfig.from_dict({**cfg.to_dict(), **self.config_overrides})
        return cfg

    def fit(self, X, y=None):
        cfg = self._make_config()
        waves = check_waveforms(X, min_length=cfg.fft_size)
        tc = TrainConfig(lr=self.lr, batch_size=self.batch_size, segment_length=self.segment_length,
                         max_steps=self.max_steps, seed=self.seed, hop=cfg.hop, log_every=0,
                         lr_schedule=self.lr_schedule)
        result = train_codec(waves, cfg, tc)
        self.model_ = result.model
        self.config_ = cfg
        self.history_ = result.history
        self.bitrate_ = cfg.bitrate
        return self

    @classmethod
    def from_model(cls, model: CodecModel) -> "ComplexDecCodec":
        est = cls()
        est.model_ = model.eval()
        est.config_ = model.config
        est.history_ = []
        est.bitrate_ = model.config.bitrate
        return est

    @classmethod
    def load(cls, path) -> "ComplexDecCodec":
        return cls.from_model(checkpoints.load_codec(path))

    def save(self, path):
        check_is_fitted(self, "model_")
        return checkpoints.save_codec(path, self.model_)

    def transform(self, X):
        """Waveform(s) -> ``(n_frames, 2 * n_stages)`` int64 code indices."""
        check_is_fitted(self, "model_")
        single = not isinstance(X, (list, tuple)) and np.ndim(X) == 1
        waves = check_waveforms(X, min_length=self.config_.fft_size // 2 + 1)
        codes = [self.model_.encode_indices(w).numpy() for w in waves]
        return codes[0] if single else codes

    def inverse_transform(self, codes, lengths=None):
        """Code indices -> waveform(s); ``lengths`` defaults to ``n_frames * hop``."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        single = isinstance(codes, np.ndarray) and codes.ndim == 2
        batch = [codes] if single else list(codes)
        if lengths is None:
            lengths = [len(c) * cfg.hop for c in batch]
        elif np.ndim(lengths) == 0:
            lengths = [int(lengths)]
        out = []
        for c, n in zip(batch, lengths):
            idx = check_indices(c, cfg.n_codebooks, cfg.codebook_size)
            out.append(self.model_.decode_indices(torch.from_numpy(idx), int(n)).double().numpy())
        return out[0] if single else out

    def reconstruct_spec(self, wave) -> torch.Tensor:
        check_is_fitted(self, "model_")
        return self.model_.decode_indices(self.model_.encode_indices(check_waveform(wave)))

    @property
    def config(self) -> CodecConfig:
        check_is_fitted(self, "config_")
        return self.config_

    def reconstruct(self, X, postfilter=None, seed=0):
        waves = check_waveforms(X)
        return [self._roundtrip(w, postfilter, seed) for w in waves]

    def _roundtrip(self, wave, postfilter=None, seed=0):
        spec = self.reconstruct_spec(wave)
        if postfilter is not None:
            spec = postfilter.predict(spec, seed=seed)
        cfg = self.config_
        return dsp.istft(spec, len(wave), cfg.hop, cfg.fft_size, cfg.window).double().numpy()

    def score(self, X, y=None):
        """Mean SI-SDR (dB) of the codec round trip."""
        waves = check_waveforms(X)
        report = evaluate({str(i): w for i, w in enumerate(waves)}, self)
        return report.si_sdr

    def to_bitstream(self, wave) -> bytes:
        cfg = self.config
        wave = check_waveform(wave)
        codes = self.transform(wave)
        header = bitstream.BitstreamHeader(cfg.sample_rate, cfg.hop, cfg.fft_size, cfg.n_stages,
                                           cfg.n_stages, cfg.codebook_bits, len(codes), len(wave))
        return bitstream.pack(codes, header)

    def from_bitstream(self, data: bytes) -> np.ndarray:
        header, codes = bitstream.unpack(data)
        cfg = self.config
        if (header.hop, header.fft_size, header.n_stages_real, header.bits_per_index) != (
                cfg.hop, cfg.fft_size, cfg.n_stages, cfg.codebook_bits):
            raise ValueError("bitstream was produced with an incompatible codec configuration")
        return self.inverse_transform(codes, header.n_samples)


class ScorePostFilter(BaseEstimator):
    """Score-based refinement of decoded complex spectra."""

    def __init__(self, gamma=1.5, sigma_min=0.05, sigma_max=0.5, t_eps=0.03, n_steps=30, snr=0.5,
                 base_channels=16, channel_mults=(1, 2, 4), alpha=0.5, beta=0.15, lr=1e-4,
                 batch_size=1, crop_frames=256, max_steps=500, seed=0):
        self.gamma = gamma
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.t_eps = t_eps
        self.n_steps = n_steps
        self.snr = snr
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.alpha = alpha
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.max_steps = max_steps
        self.seed = seed

    def _sde(self) -> SdeConfig:
        return SdeConfig(gamma=self.gamma, sigma_min=self.sigma_min, sigma_max=self.sigma_max,
                         t_eps=self.t_eps, n_steps=self.n_steps, snr=self.snr)

    def _params(self) -> CompandingParams:
        return CompandingParams(self.alpha, self.beta)

    def fit(self, X, y=None, codec=None):
        """Train on waveforms ``X`` coded by ``codec`` (a fitted ``ComplexDecCodec``
        or ``CodecModel``)."""
        if codec is None:
            raise ValueError("fit needs the codec whose output is to be refined")
        model = codec.model_ if isinstance(codec, ComplexDecCodec) else codec
        waves = check_waveforms(X)
        pairs = companded_pairs(model, waves, self._params())
        tc = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_steps=self.max_steps,
                         seed=self.seed, segment_length=model.config.hop, hop=model.config.hop, log_every=0)
        unet = UNetConfig(base_channels=self.base_channels, channel_mults=tuple(self.channel_mults),
                          tile_frames=self.crop_frames)
        result = train_spf(None, sde_config=self._sde(), unet_config=unet, train_config=tc,
                           crop_frames=self.crop_frames, pairs=pairs)
        self.model_ = result.model
        self.history_ = result.history
        return self

    @classmethod
    def from_model(cls, model: ScoreModel) -> "ScorePostFilter":
        s = model.sde
        est = cls(gamma=s.gamma, sigma_min=s.sigma_min, sigma_max=s.sigma_max, t_eps=s.t_eps,
                  n_steps=s.n_steps, snr=s.snr, base_channels=model.net.cfg.base_channels,
                  channel_mults=model.net.cfg.channel_mults)
        est.model_ = model.eval()
        est.history_ = []
        return est

    @classmethod
    def load(cls, path) -> "ScorePostFilter":
        return cls.from_model(checkpoints.load_spf(path))

    def save(self, path):
        check_is_fitted(self, "model_")
        return checkpoints.save_spf(path, self.model_)

    def predict(self, spec, seed=0, tile_frames=256):
        """Refine a decoded ``(frames, bins)`` complex spectrogram."""
        check_is_fitted(self, "model_")
        wrapped = isinstance(spec, dsp.ComplexSpectrogram)
        data = spec.data if wrapped else torch.as_tensor(spec)
        out = enhance(data.to(torch.complex64), self.model_, self._params(), self.model_.sde,
                      seed=seed, tile_frames=tile_frames)
        return spec.with_data(out) if wrapped else out


def codec_si_sdr(codec: ComplexDecCodec, wave, postfilter=None, seed=0) -> float:
    wave = check_waveform(wave)
    est = codec._roundtrip(wave, postfilter, seed)
    cfg = codec.config
    n = scored_length(len(wave), cfg.hop, cfg.fft_size)
    return si_sdr(wave[:n], est[:n])
