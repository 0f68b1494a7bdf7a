"""Inference-time outlier scores, AUROC, and latent export."""

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError
from .latent import js_between
from .losses import recon_loss

log = logging.getLogger(__name__)


class DegenerateScoresWarning(UserWarning):
    pass


def _batches(images, batch_size):
    for start in range(0, len(images), batch_size):
        yield start, images[start:start + batch_size]


def _to_tensor(images, model):
    p = next(model.parameters())
    return torch.as_tensor(np.asarray(images), dtype=p.dtype, device=p.device)


@torch.no_grad()
def score_terms(model, images, batch_size=256):
    """Per-sample ``(l_mut, l_recon)`` on the deterministic inference path.

    The model is put in eval mode, the posterior mean is decoded (no
    sampling), and that reconstruction is re-encoded once.
    """
    model.eval()
    mut, recon = [], []
    for _, chunk in _batches(images, batch_size):
        x = chunk if isinstance(chunk, torch.Tensor) else _to_tensor(chunk, model)
        tr = model.trace(x, sample=False)
        mut.append(js_between(tr.q1, tr.q2, impl=model.js_impl).double().cpu())
        recon.append(recon_loss(tr.x, tr.x_hat).double().cpu())
    if not mut:
        return np.zeros(0), np.zeros(0)
    return torch.cat(mut).numpy(), torch.cat(recon).numpy()


def norm_constants(mut, recon):
    """Means of both terms over the evaluation set (the first pass of scoring)."""
    return float(np.mean(mut)), float(np.mean(recon))


def combine_scores(mut, recon, constants, alpha=0.5):
    """alpha * mut / E[mut] + (1 - alpha) * recon / E[recon]."""
    e_mut, e_recon = constants
    if not (e_mut > 0 and e_recon > 0):
        raise InvalidInputError(f"normalization constants must be positive, got {constants}")
    mut = np.asarray(mut, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    return alpha * mut / e_mut + (1.0 - alpha) * recon / e_recon


def score_batch(model, batch, constants, alpha=0.5):
    mut, recon = score_terms(model, batch)
    return combine_scores(mut, recon, constants, alpha)


def normalize_scores(s):
    """Min-max scaling to [0, 1]; a constant vector maps to zeros with a warning."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise InvalidInputError("cannot normalize an empty score vector")
    lo, hi = s.min(), s.max()
    if hi == lo:
        warnings.warn("all scores are equal; normalized scores set to 0", DegenerateScoresWarning)
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def auroc(scores, labels):
    """Probability that a random anomaly (label 1) outscores a random normal.

    Computed from midranks (Mann-Whitney U), so ties count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidInputError("scores and labels must be 1-D and equally long")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUROC needs both normal and anomalous labels")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # doubled midranks stay integral: 2 * rank = first + last (1-based)
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_scores)) + 1]
    ends = np.r_[starts[1:], scores.size]
    twice_rank = np.empty(scores.size, dtype=np.int64)
    twice_rank[order] = np.repeat(starts + 1 + ends, ends - starts)
    twice_u = int(twice_rank[labels].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2.0 * n_pos * n_neg)


def correspondence_indicator(mut, recon, constants=None):
    """Per-sample ratio of the two normalized score terms, and its population SD.

    ``constants`` default to the means over the given samples. Samples
    with zero reconstruction error are dropped with a warning.
    """
    mut = np.asarray(mut, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    keep = recon > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} samples with zero reconstruction error excluded")
    if not keep.any():
        raise InvalidInputError("no samples with nonzero reconstruction error")
    e_mut, e_recon = constants or norm_constants(mut[keep], recon[keep])
    a = np.full(mut.shape, np.nan)
    a[keep] = (mut[keep] / e_mut) / (recon[keep] / e_recon)
    return a, float(np.std(a[keep]))


@dataclass
class ScoreReport:
    alpha: float
    auroc: float
    s_a: float
    norm_constants: tuple
    ids: list
    labels: np.ndarray
    s: np.ndarray
    s_prime: np.ndarray
    mut: np.ndarray
    recon: np.ndarray
    a: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        samples = []
        for i, sid in enumerate(self.ids):
            row = {
                "id": sid,
                "label": int(self.labels[i]),
                "s": float(self.s[i]),
                "s_prime": float(self.s_prime[i]),
                "mut": float(self.mut[i]),
                "recon": float(self.recon[i]),
            }
            if not np.isnan(self.a[i]):
                row["a"] = float(self.a[i])
            samples.append(row)
        return {
            "alpha": self.alpha,
            "auroc": self.auroc,
            "s_a": self.s_a,
            "norm_constants": {"e_mut": self.norm_constants[0], "e_recon": self.norm_constants[1]},
            "meta": self.meta,
            "samples": samples,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")


def build_report(mut, recon, labels, ids, alpha=0.5, constants=None, meta=None):
    """Two-pass scoring of a labelled evaluation set into a :class:`ScoreReport`."""
    labels = np.asarray(labels, dtype=np.int64)
    constants = constants or norm_constants(mut, recon)
    s = combine_scores(mut, recon, constants, alpha)
    s_prime = normalize_scores(s)
    normal = labels == 0
    a = np.full(len(s), np.nan)
    s_a = float("nan")
    if normal.any():
        a_norm, s_a = correspondence_indicator(mut[normal], recon[normal], constants)
        a[normal] = a_norm
    score = auroc(s_prime, labels) if 0 < labels.sum() < len(labels) else float("nan")
    return ScoreReport(alpha, score, s_a, tuple(constants), list(ids), labels,
                       s, s_prime, np.asarray(mut), np.asarray(recon), a, meta or {})


def evaluate(model, images, labels, ids=None, alpha=0.5, constants=None, meta=None):
    mut, recon = score_terms(model, images)
    ids = ids if ids is not None else [str(i) for i in range(len(mut))]
    return build_report(mut, recon, labels, ids, alpha, constants, meta)


@torch.no_grad()
def latent_means(model, images, batch_size=256):
    model.eval()
    out = []
    for _, chunk in _batches(images, batch_size):
        out.append(model.encode(_to_tensor(chunk, model)).mean.double().cpu())
    return torch.cat(out).numpy()


def export_latents(model, images, labels, ids, path=None):
    """Posterior means as rows ``id,label,mu_0..mu_{D-1}``; optionally written as CSV."""
    mu = latent_means(model, images)
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "label"] + [f"mu_{d}" for d in range(mu.shape[1])])
            for sid, lab, row in zip(ids, labels, mu):
                w.writerow([sid, int(lab)] + [repr(float(v)) for v in row])
    return mu


def read_latents(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    mu = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(header) - 2)
    return ids, labels, mu
