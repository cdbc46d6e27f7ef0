"""Diagonal-Gaussian primitives.

Everything works on torch tensors whose last axis is the latent dimension, so
the same functions serve single vectors and batches. Inputs are promoted to
float64 before any reduction; callers get double-precision scalars back.
"""
import math
from dataclasses import dataclass

import torch

from .errors import ContractViolation, NonFiniteError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.logvar = torch.as_tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise ContractViolation(
                f"mean shape {tuple(self.mean.shape)} != logvar shape {tuple(self.logvar.shape)}"
            )
        if self.mean.dim() == 0 or self.mean.shape[-1] < 1:
            raise ContractViolation("DiagGaussian needs dimension d >= 1")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return torch.exp(self.logvar)

    @classmethod
    def standard(cls, d, dtype=torch.float64):
        return cls(torch.zeros(d, dtype=dtype), torch.zeros(d, dtype=dtype))

    def detach(self):
        return DiagGaussian(self.mean.detach(), self.logvar.detach())


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteError("non-finite values in Gaussian parameters")


def kl_diag_gaussians(q, p):
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.dim != p.dim:
        raise ContractViolation(f"dimension mismatch: {q.dim} vs {p.dim}")
    _check_finite(q.mean, q.logvar, p.mean, p.logvar)
    mq, lq = q.mean.double(), q.logvar.double()
    mp, lp = p.mean.double(), p.logvar.double()
    terms = 0.5 * (torch.exp(lq - lp) + (mq - mp) ** 2 * torch.exp(-lp) - 1.0 + lp - lq)
    return terms.sum(-1)


def gaussian_log_prob(x, g):
    """Natural-log density of ``x`` under ``g``, summed over the last axis."""
    x = torch.as_tensor(x)
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ContractViolation("log-density needs a non-empty vector")
    if x.shape[-1] != g.dim:
        raise ContractViolation(f"dimension mismatch: x has {x.shape[-1]}, Gaussian has {g.dim}")
    x = x.double()
    m, lv = g.mean.double(), g.logvar.double()
    return -0.5 * (LOG_2PI + lv + (x - m) ** 2 * torch.exp(-lv)).sum(-1)


def reparam_sample(g, noise):
    noise = torch.as_tensor(noise, dtype=g.mean.dtype)
    if noise.shape != g.mean.shape:
        raise ContractViolation(
            f"noise shape {tuple(noise.shape)} != Gaussian shape {tuple(g.mean.shape)}"
        )
    return g.mean + torch.exp(0.5 * g.logvar) * noise


def log_prior_mu2(mu2):
    """log N(mu2; 0, I), the hyperprior on s-vectors."""
    mu2 = torch.as_tensor(mu2)
    if not torch.isfinite(mu2).all():
        raise NonFiniteError("non-finite s-vector")
    zeros = torch.zeros_like(mu2, dtype=torch.float64)
    return gaussian_log_prob(mu2, DiagGaussian(zeros, zeros))
