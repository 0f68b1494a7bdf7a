"""Diagonal Gaussian posteriors and the divergences built on them.

All functions accept batched parameters with the latent dimension last,
so a ``(B, D)`` pair of tensors yields ``(B,)`` divergences and a bare
``(D,)`` pair yields a 0-d tensor.
"""

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

JS_IMPLS = ("moment_matched", "symmetric_kl")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass(frozen=True)
class DiagonalGaussian:
    """N(mean, diag(exp(log_var))), latent dimension last."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        mean = _as_tensor(self.mean)
        log_var = _as_tensor(self.log_var)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)
        if mean.ndim == 0 or mean.shape != log_var.shape:
            raise InvalidInputError(
                f"mean {tuple(mean.shape)} and log_var {tuple(log_var.shape)} "
                "must share a shape with a trailing latent dimension"
            )
        if mean.shape[-1] < 1:
            raise InvalidInputError("latent dimension must be >= 1")

    @classmethod
    def standard(cls, dim, batch=(), dtype=torch.float64):
        zeros = torch.zeros(*batch, dim, dtype=dtype)
        return cls(zeros, zeros.clone())

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return self.log_var.exp()

    def check_finite(self):
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all()):
            raise InvalidInputError("non-finite Gaussian parameters")
        return self

    def __getitem__(self, idx):
        return DiagonalGaussian(self.mean[idx], self.log_var[idx])


def _same_dim(p, q):
    if p.mean.shape != q.mean.shape:
        raise InvalidInputError(
            f"dimension mismatch: {tuple(p.mean.shape)} vs {tuple(q.mean.shape)}"
        )


def kl_to_standard(dist):
    """KL(dist || N(0, I)), summed over the latent dimension."""
    dist.check_finite()
    # expm1(v) - v == exp(v) - 1 - v without cancellation near v = 0
    return 0.5 * (torch.expm1(dist.log_var) - dist.log_var + dist.mean.pow(2)).sum(-1)


def kl_between(p, q):
    """Closed-form KL(p || q) for diagonal Gaussians."""
    _same_dim(p, q)
    p.check_finite()
    q.check_finite()
    d = p.log_var - q.log_var
    return 0.5 * (torch.expm1(d) - d + (p.mean - q.mean).pow(2) / q.log_var.exp()).sum(-1)


def mixture_moments(p, q):
    """Gaussian matching the first two moments of the 50/50 mixture of p and q."""
    _same_dim(p, q)
    mean = 0.5 * (p.mean + q.mean)
    # E[x^2] of the mixture minus mean^2 == average variance + quarter squared gap
    var = 0.5 * (p.log_var.exp() + q.log_var.exp()) + 0.25 * (p.mean - q.mean).pow(2)
    return DiagonalGaussian(mean, var.log())


def js_between(p, q, impl="moment_matched"):
    """Symmetric Jensen-Shannon-style divergence between diagonal Gaussians.

    The true JS divergence has no closed form here. ``moment_matched``
    replaces the mixture by its moment-matched Gaussian M and returns
    ``(KL(p||M) + KL(q||M)) / 2``; ``symmetric_kl`` returns
    ``(KL(p||q) + KL(q||p)) / 2``.
    """
    _same_dim(p, q)
    if impl == "moment_matched":
        m = mixture_moments(p, q)
        return 0.5 * kl_between(p, m) + 0.5 * kl_between(q, m)
    if impl == "symmetric_kl":
        return 0.5 * kl_between(p, q) + 0.5 * kl_between(q, p)
    raise InvalidInputError(f"unknown js_impl {impl!r}; expected one of {JS_IMPLS}")


def reparameterize(dist, noise):
    """z = mean + std * noise, differentiable in the distribution parameters."""
    noise = _as_tensor(noise).to(dist.mean.dtype)
    if noise.shape != dist.mean.shape:
        raise InvalidInputError(
            f"noise shape {tuple(noise.shape)} does not match {tuple(dist.mean.shape)}"
        )
    return dist.mean + torch.exp(0.5 * dist.log_var) * noise


def sample(dist, generator=None):
    noise = torch.randn(
        dist.mean.shape, generator=generator, dtype=dist.mean.dtype, device=dist.mean.device
    )
    return reparameterize(dist, noise)
