"""Recurrent FHVAE with an optional parallel future-prediction decoder."""
import hashlib
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import nn

from .errors import CheckpointError, ContractViolation, UnsupportedVariantError
from .gaussian import DiagGaussian, reparam_sample

# variant -> (z1-encoder recurrent layers, prediction-decoder recurrent layers)
VARIANTS = {
    "fhvae": (1, 0),
    "apc-enc1-dec1": (1, 1),
    "apc-enc2-dec1": (2, 1),
    "apc-enc2-dec2": (2, 2),
}

CHECKPOINT_MAGIC = b"DSVCKPT\x01"


@dataclass
class ModelConfig:
    variant: str = "apc-enc1-dec1"
    feature_dim: int = 200
    segment_len: int = 20
    latent_dim_z1: int = 32
    latent_dim_z2: int = 32
    hidden_units: int = 256
    m: int = 3
    sigma2_z2: float = 0.25
    alpha_dis: float = 10.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnsupportedVariantError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        for name in ("feature_dim", "segment_len", "latent_dim_z1", "latent_dim_z2", "hidden_units"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.m < 0:
            raise ContractViolation("m must be >= 0")
        if not self.sigma2_z2 > 0:
            raise ContractViolation("sigma2_z2 must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ContractViolation(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def is_apc(self):
        return self.variant != "fhvae"

    @property
    def z1_layers(self):
        return VARIANTS[self.variant][0]

    @property
    def pred_layers(self):
        return VARIANTS[self.variant][1]

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LatentOutputs:
    q_z2: DiagGaussian
    q_z1: DiagGaussian
    z2_sample: torch.Tensor
    z1_sample: torch.Tensor
    recon: torch.Tensor
    recon_logvar: Optional[torch.Tensor] = None
    prediction: Optional[torch.Tensor] = None


def _init_uniform(module, generator):
    # every weight and its bias share bound 1/sqrt(fan_in)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.startswith("weight"):
                bound = 1.0 / math.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=generator)
                bias = getattr(module, "bias" + name[len("weight"):], None)
                if bias is not None:
                    bias.uniform_(-bound, bound, generator=generator)


class SeqVAE(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = c = config
        F, H, d1, d2 = c.feature_dim, c.hidden_units, c.latent_dim_z1, c.latent_dim_z2

        self.z2_rnn = nn.LSTM(F, H, num_layers=1, batch_first=True)
        self.z2_head = nn.Linear(H, 2 * d2)
        self.z1_rnn = nn.LSTM(F + d2, H, num_layers=c.z1_layers, batch_first=True)
        self.z1_head = nn.Linear(H, 2 * d1)
        self.recon_rnn = nn.LSTM(d1 + d2, H, num_layers=1, batch_first=True)
        self.recon_mean = nn.Linear(H, F)
        self.recon_logvar = None if c.is_apc else nn.Linear(H, F)
        self.pred_rnn = self.pred_head = None
        if c.is_apc:
            self.pred_rnn = nn.LSTM(d1 + d2, H, num_layers=c.pred_layers, batch_first=True)
            self.pred_head = nn.Linear(H, F)

        gen = torch.Generator().manual_seed(c.seed)
        for mod in self.children():
            _init_uniform(mod, gen)
        self.to(c.torch_dtype)

    # -- shape checks -----------------------------------------------------

    def _frames(self, x):
        x = torch.as_tensor(x, dtype=self.config.torch_dtype)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        L, F = self.config.segment_len, self.config.feature_dim
        if x.dim() != 3 or x.shape[1:] != (L, F):
            raise ContractViolation(f"expected segment frames of shape ({L}, {F}), got {tuple(x.shape)}")
        return x, squeeze

    def _latent(self, z, d, name):
        z = torch.as_tensor(z, dtype=self.config.torch_dtype)
        if z.shape[-1] != d:
            raise ContractViolation(f"{name} has dimension {z.shape[-1]}, expected {d}")
        return z

    # -- inference model --------------------------------------------------

    def encode_z2(self, frames):
        x, squeeze = self._frames(frames)
        _, (h, _) = self.z2_rnn(x)
        mean, logvar = self.z2_head(h[-1]).chunk(2, dim=-1)
        if squeeze:
            mean, logvar = mean[0], logvar[0]
        return DiagGaussian(mean, logvar)

    def encode_z1(self, frames, z2):
        x, squeeze = self._frames(frames)
        z2 = self._latent(z2, self.config.latent_dim_z2, "z2")
        if z2.dim() == 1:
            z2 = z2.expand(x.shape[0], -1)
        inp = torch.cat([x, z2.unsqueeze(1).expand(-1, x.shape[1], -1)], dim=-1)
        _, (h, _) = self.z1_rnn(inp)
        mean, logvar = self.z1_head(h[-1]).chunk(2, dim=-1)
        if squeeze:
            mean, logvar = mean[0], logvar[0]
        return DiagGaussian(mean, logvar)

    # -- generative model -------------------------------------------------

    def _decoder_input(self, z1, z2):
        c = self.config
        z1 = self._latent(z1, c.latent_dim_z1, "z1")
        z2 = self._latent(z2, c.latent_dim_z2, "z2")
        squeeze = z1.dim() == 1 and z2.dim() == 1
        z1, z2 = torch.atleast_2d(z1), torch.atleast_2d(z2)
        if z1.shape[0] != z2.shape[0]:
            if z1.shape[0] == 1:
                z1 = z1.expand(z2.shape[0], -1)
            elif z2.shape[0] == 1:
                z2 = z2.expand(z1.shape[0], -1)
            else:
                raise ContractViolation("z1 and z2 batch sizes differ")
        z = torch.cat([z1, z2], dim=-1)
        return z.unsqueeze(1).expand(-1, c.segment_len, -1), squeeze

    def decode_recon(self, z1, z2):
        """Reconstruction mean (and per-frame logvar for the fhvae baseline)."""
        inp, squeeze = self._decoder_input(z1, z2)
        h, _ = self.recon_rnn(inp)
        mean = self.recon_mean(h)
        logvar = self.recon_logvar(h) if self.recon_logvar is not None else None
        if squeeze:
            mean = mean[0]
            logvar = logvar[0] if logvar is not None else None
        return mean, logvar

    def decode_predict(self, z1, z2):
        if not self.config.is_apc:
            raise UnsupportedVariantError("the fhvae baseline has no prediction decoder")
        inp, squeeze = self._decoder_input(z1, z2)
        h, _ = self.pred_rnn(inp)
        out = self.pred_head(h)
        return out[0] if squeeze else out

    # -- composition ------------------------------------------------------

    def forward(self, frames, noise=None):
        """Run inference and generative paths.

        ``noise`` may be None (posterior means), a torch.Generator, or a pair
        of tensors ``(eps_z2, eps_z1)`` shaped like the batched latents.
        """
        x, squeeze = self._frames(frames)
        B, dt = x.shape[0], x.dtype
        c = self.config
        if noise is None:
            eps2 = torch.zeros(B, c.latent_dim_z2, dtype=dt)
            eps1 = torch.zeros(B, c.latent_dim_z1, dtype=dt)
        elif isinstance(noise, torch.Generator):
            eps2 = torch.randn(B, c.latent_dim_z2, generator=noise, dtype=torch.float64).to(dt)
            eps1 = torch.randn(B, c.latent_dim_z1, generator=noise, dtype=torch.float64).to(dt)
        else:
            eps2 = torch.as_tensor(noise[0], dtype=dt).reshape(B, c.latent_dim_z2)
            eps1 = torch.as_tensor(noise[1], dtype=dt).reshape(B, c.latent_dim_z1)

        q_z2 = self.encode_z2(x)
        z2 = reparam_sample(q_z2, eps2)
        q_z1 = self.encode_z1(x, z2)
        z1 = reparam_sample(q_z1, eps1)
        recon, recon_logvar = self.decode_recon(z1, z2)
        prediction = self.decode_predict(z1, z2) if c.is_apc else None
        out = LatentOutputs(q_z2, q_z1, z2, z1, recon, recon_logvar, prediction)
        return _unbatch(out) if squeeze else out

    def num_parameters(self, prefix=""):
        return sum(p.numel() for n, p in self.named_parameters() if n.startswith(prefix))


def _unbatch(out):
    def one(t):
        return None if t is None else t[0]
    return LatentOutputs(
        DiagGaussian(out.q_z2.mean[0], out.q_z2.logvar[0]),
        DiagGaussian(out.q_z1.mean[0], out.q_z1.logvar[0]),
        one(out.z2_sample), one(out.z1_sample), one(out.recon),
        one(out.recon_logvar), one(out.prediction),
    )


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, payload):
    """Write ``payload`` (a dict of tensors / plain data) with a sha256 guard."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(digest)
        fh.write(body)
    return digest.hex()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    start = len(CHECKPOINT_MAGIC)
    digest, body = raw[start : start + 32], raw[start + 32 :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: content hash mismatch, file is corrupt")
    return torch.load(io.BytesIO(body), weights_only=False)


def model_payload(model, **extra):
    return {
        "format_version": 1,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        **extra,
    }


def model_from_payload(payload):
    model = SeqVAE(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
