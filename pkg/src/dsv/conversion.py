"""Latent feature extraction, voice conversion, and spectrogram inversion."""
import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ContractViolation, IncompatibleCheckpointError
from .features import LOG_EPS, Normalizer, StftConfig, segment_sequence, stft_complex
from .model import load_checkpoint, model_from_payload
from .training import svector_from_means


@dataclass
class SegmentalFeature:
    sequence_id: str
    segment_index: int
    vector: np.ndarray  # [q_z1 mean ; q_z1 logvar]


@dataclass
class SequentialFeature:
    sequence_id: str
    vector: np.ndarray
    speaker_id: Optional[str] = None


@dataclass
class LoadedModel:
    """A trained model plus what is needed to feed it raw feature matrices."""

    model: object
    normalizer: Normalizer
    shift: int
    payload: dict

    @property
    def config(self):
        return self.model.config


def load_model(path, shift=None):
    payload = load_checkpoint(path)
    model = model_from_payload(payload)
    norm = payload.get("normalization")
    normalizer = Normalizer.from_dict(norm) if norm else Normalizer.identity(model.config.feature_dim)
    return LoadedModel(model, normalizer, shift or model.config.segment_len, payload)


def _frames(seq, lm, shift=None):
    c = lm.config
    F = seq.features.shape[1]
    if F != c.feature_dim:
        raise IncompatibleCheckpointError(
            f"{seq.sequence_id}: feature dimension {F} but checkpoint expects {c.feature_dim}")
    view = copy.copy(seq)
    view.features = lm.normalizer.apply(seq.features)
    segs = segment_sequence(view, c.segment_len, shift or lm.shift, 0)
    if not segs:
        return None
    return torch.as_tensor(np.stack([s.frames for s in segs]), dtype=c.torch_dtype)


def _posteriors(lm, x):
    model = lm.model
    with torch.no_grad():
        q_z2 = model.encode_z2(x)
        q_z1 = model.encode_z1(x, q_z2.mean)
    return q_z2, q_z1


def extract_segmental(seq, lm):
    """Per-segment [mean; logvar] of q(z1), with z2 at its posterior mean."""
    x = _frames(seq, lm)
    if x is None:
        return []
    _, q_z1 = _posteriors(lm, x)
    vecs = torch.cat([q_z1.mean, q_z1.logvar], dim=-1).double().numpy()
    return [SegmentalFeature(seq.sequence_id, n, v) for n, v in enumerate(vecs)]


def extract_sequential(seq, lm):
    x = _frames(seq, lm)
    if x is None:
        raise ContractViolation(f"{seq.sequence_id}: too short for a single segment")
    with torch.no_grad():
        means = lm.model.encode_z2(x).mean
    sv = svector_from_means(means, lm.config.sigma2_z2)
    return SequentialFeature(seq.sequence_id, sv.numpy(), seq.speaker_id)


def _decode(lm, z1, svector):
    z2 = torch.as_tensor(svector, dtype=lm.config.torch_dtype).expand(z1.shape[0], -1)
    with torch.no_grad():
        recon, _ = lm.model.decode_recon(z1, z2)
    out = recon.reshape(-1, lm.config.feature_dim).double().numpy()
    return lm.normalizer.invert(out)


def reconstruct(seq, lm):
    """Decode a sequence from its own z1 means and its own s-vector."""
    x = _frames(seq, lm, shift=lm.config.segment_len)
    if x is None:
        raise ContractViolation(f"{seq.sequence_id}: too short for a single segment")
    _, q_z1 = _posteriors(lm, x)
    return _decode(lm, q_z1.mean, extract_sequential(seq, lm).vector)


def convert_voice(source, target, lm, target_svector=None):
    """Source content latents decoded with the target's s-vector.

    Segments are non-overlapping, so the output has ``floor(T_src / L) * L``
    frames. ``target_svector`` may be given instead of a target record.
    """
    x = _frames(source, lm, shift=lm.config.segment_len)
    if x is None:
        raise ContractViolation(f"source {source.sequence_id} yields no segments")
    if target_svector is None:
        if _frames(target, lm) is None:
            raise ContractViolation(f"target {target.sequence_id} yields no segments")
        target_svector = extract_sequential(target, lm).vector
    _, q_z1 = _posteriors(lm, x)
    return _decode(lm, q_z1.mean, target_svector)


# --------------------------------------------------------------------------
# Griffin-Lim


def istft(spec, cfg, length=None):
    """Least-squares inverse of :func:`stft_complex` (weighted overlap-add)."""
    win, hop = cfg.win_length, cfg.hop_length
    window = np.hanning(win + 1)[:-1]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win] * window
    T = spec.shape[0]
    n = length or (T - 1) * hop + win
    out = np.zeros(n)
    norm = np.zeros(n)
    for t in range(T):
        s = t * hop
        out[s : s + win] += frames[t]
        norm[s : s + win] += window ** 2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return out


def magnitude_from_log(log_magnitude, cfg):
    """Undo the log and re-insert a zero DC bin (and zero bins above n_bins)."""
    log_magnitude = np.asarray(log_magnitude, dtype=np.float64)
    n_full = cfg.fft_size // 2 + 1
    F = log_magnitude.shape[1]
    if F != cfg.n_bins or F > n_full - 1:
        raise ContractViolation(f"{F} feature bins do not match STFT config with n_bins={cfg.n_bins}")
    mag = np.zeros((log_magnitude.shape[0], n_full))
    mag[:, 1 : F + 1] = np.maximum(np.exp(log_magnitude) - LOG_EPS, 0.0)
    return mag


def spectral_convergence(waveform, magnitude, cfg):
    est = np.abs(stft_complex(waveform, cfg))
    return float(np.linalg.norm(est - magnitude) / max(np.linalg.norm(magnitude), 1e-12))


def griffin_lim(log_magnitude, stft_config=None, iterations=60, seed=0, history=False):
    """Waveform whose STFT magnitude approximates ``exp(log_magnitude)``.

    Starts from seeded uniform random phase. With ``history=True`` also
    returns the spectral convergence after every iteration.
    """
    cfg = stft_config or StftConfig()
    if iterations < 1:
        raise ContractViolation("iterations must be >= 1")
    mag = magnitude_from_log(log_magnitude, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    length = (mag.shape[0] - 1) * cfg.hop_length + cfg.win_length
    trace = []
    x = istft(mag * phase, cfg, length)
    for _ in range(iterations):
        spec = stft_complex(x, cfg)
        x = istft(mag * np.exp(1j * np.angle(spec)), cfg, length)
        if history:
            trace.append(spectral_convergence(x, mag, cfg))
    return (x, trace) if history else x


def write_wav(path, waveform, sample_rate):
    from scipy.io import wavfile

    w = np.asarray(waveform, dtype=np.float64)
    peak = np.max(np.abs(w)) if w.size else 0.0
    if peak > 1.0:
        w = w / peak
    wavfile.write(path, int(sample_rate), (w * 32767).astype("<i2"))
