"""Per-sample loss terms and the three batch objectives.

Every term is returned per sample (shape ``(B,)``); only
:func:`batch_objective` reduces, and it sums over the batch.
"""

from dataclasses import dataclass

import torch

from .errors import InvalidInputError
from .latent import DiagonalGaussian, js_between, kl_to_standard

MODES = ("o", "d", "e")


@dataclass
class ForwardTrace:
    """One encode -> decode -> re-encode pass over a batch."""

    x: torch.Tensor
    q1: DiagonalGaussian
    x_hat: torch.Tensor
    q2: DiagonalGaussian

    def __post_init__(self):
        if self.x.shape != self.x_hat.shape:
            raise InvalidInputError(
                f"x {tuple(self.x.shape)} and x_hat {tuple(self.x_hat.shape)} differ"
            )
        n = self.x.shape[0]
        if self.q1.mean.shape[0] != n or self.q2.mean.shape[0] != n:
            raise InvalidInputError("trace batch dimensions disagree")


@dataclass(frozen=True)
class LossWeights:
    lambda_consist: float = 0.1
    beta_anom: float = 1.0
    js_impl: str = "moment_matched"
    recon_reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_consist < 0 or self.beta_anom < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.recon_reduction not in ("mean", "sum"):
            raise InvalidInputError("recon_reduction must be 'mean' or 'sum'")


def recon_loss(x, x_hat, reduction="mean"):
    """Per-sample L1 distance: ``mean`` divides by the element count, ``sum`` does not."""
    if x.shape != x_hat.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat).abs().flatten(1)
    return diff.sum(1) if reduction == "sum" else diff.mean(1)


def enc1_loss(trace):
    return kl_to_standard(trace.q1)


def enc2_loss(trace):
    return kl_to_standard(trace.q2)


def mut_loss(trace, js_impl="moment_matched"):
    return js_between(trace.q1, trace.q2, impl=js_impl)


def consist_loss(trace, js_impl="moment_matched"):
    return enc2_loss(trace) + mut_loss(trace, js_impl)


def normal_loss(trace, w=LossWeights()):
    return (
        recon_loss(trace.x, trace.x_hat, w.recon_reduction)
        + enc1_loss(trace)
        + w.lambda_consist * consist_loss(trace, w.js_impl)
    )


def anomalous_loss(trace, w=LossWeights()):
    """Latent-only objective for anomalies: no reconstruction term."""
    return enc1_loss(trace) + w.lambda_consist * consist_loss(trace, w.js_impl)


def pseudo_loss(trace, w=LossWeights()):
    """Same form as :func:`anomalous_loss`; ``trace`` must come from a DSA-transformed image."""
    return anomalous_loss(trace, w)


def _check_roles(mode, roles, n):
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    roles = torch.as_tensor(roles)
    if roles.shape != (n,):
        raise InvalidInputError(f"roles must have shape ({n},), got {tuple(roles.shape)}")
    if not ((roles == 0) | (roles == 1)).all():
        raise InvalidInputError("roles must be 0 (normal) or 1 (anomalous)")
    if mode == "o" and roles.any():
        raise InvalidInputError("mode 'o' trains on normals only; got anomalous roles")
    return roles


def batch_objective(mode, trace, roles, w=LossWeights()):
    """Sum over the batch of the per-sample objective selected by ``mode``.

    ``o``: normal loss on every sample. ``d``/``e``: normal loss on
    role-0 samples plus ``beta_anom`` times the latent-only loss on role-1
    samples (pseudo-anomalies for ``d``, real anomalies for ``e``).
    """
    roles = _check_roles(mode, roles, trace.x.shape[0])
    per_normal = normal_loss(trace, w)
    if mode == "o":
        return per_normal.sum()
    y = roles.to(per_normal.dtype)
    if not roles.any():
        return ((1 - y) * per_normal).sum()
    per_anom = anomalous_loss(trace, w)
    return ((1 - y) * per_normal + w.beta_anom * y * per_anom).sum()


def loss_components(trace, js_impl="moment_matched"):
    """Detached per-sample terms, for logging and scoring."""
    with torch.no_grad():
        return {
            "recon": recon_loss(trace.x, trace.x_hat),
            "enc1": enc1_loss(trace),
            "enc2": enc2_loss(trace),
            "mut": mut_loss(trace, js_impl),
        }
