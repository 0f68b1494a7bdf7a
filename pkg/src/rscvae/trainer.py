"""Training loop for the three modes (o: normals only, d: DSA pseudo-anomalies,
e: a few real anomalies)."""

import copy
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import standard_augment
from .dsa import apply_dsa
from .errors import NonFiniteLossError
from .losses import LossWeights, batch_objective, loss_components
from .networks import EncoderSpec, RecodingVAE
from .scoring import evaluate

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOG_KEYS = ("recon", "enc1", "enc2", "mut")


def cosine_lr(epoch, cfg):
    """Cosine annealing from ``lr0`` towards 0, restarting every ``t_max`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    phase = (epoch % cfg.t_max) / cfg.t_max
    return max(0.0, 0.5 * cfg.lr0 * (1.0 + math.cos(math.pi * phase)))


def loss_weights(cfg):
    return LossWeights(cfg.lambda_consist, cfg.beta_anom, cfg.js_impl, cfg.recon_reduction)


def build_model(cfg, input_shape):
    """Fresh model for ``cfg``; parameter init is seeded from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    spec = EncoderSpec(
        tuple(input_shape), cfg.latent_dim, cfg.backbone, cfg.widths, cfg.log_var_bound
    )
    return RecodingVAE(spec, js_impl=cfg.js_impl).to(DTYPES[cfg.dtype])


def make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), weight_decay=0.0)


def seed_streams(seed):
    """Independent numpy generators for split, shuffling, DSA and augmentation,
    plus a torch generator for reparameterization noise, all from one seed."""
    ss = np.random.SeedSequence(seed)
    split, shuffle, dsa, augment = (np.random.default_rng(s) for s in ss.spawn(4))
    noise = torch.Generator().manual_seed(int(ss.generate_state(1)[0]))
    return {"split": split, "shuffle": shuffle, "dsa": dsa, "augment": augment, "noise": noise}


def train_step(model, optimizer, batch, roles, cfg, generator=None, noise=None):
    """One optimizer update on the mode's batch objective.

    Returns a log fragment: the objective and per-role sums of each loss
    term. Raises :class:`NonFiniteLossError` before touching the weights
    if the objective is NaN or infinite.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    trace = model.trace(batch, noise=noise, generator=generator)
    finite = all(torch.isfinite(t).all() for t in (trace.q1.mean, trace.q1.log_var,
                                                   trace.q2.mean, trace.q2.log_var))
    if finite:
        objective = batch_objective(cfg.mode, trace, roles, loss_weights(cfg))
    else:
        objective = torch.tensor(float("nan"))
    if not torch.isfinite(objective):
        diag = {
            "objective": float(objective.detach()),
            "lr": optimizer.param_groups[0]["lr"],
            "batch_min": float(batch.min()),
            "batch_max": float(batch.max()),
            "batch_mean": float(batch.mean()),
            "mean_abs_max": float(trace.q1.mean.detach().abs().max()),
            "log_var_max": float(trace.q1.log_var.detach().max()),
        }
        raise NonFiniteLossError(f"non-finite objective: {diag}", diag)
    objective.backward()
    optimizer.step()
    objective = objective.detach()
    parts = loss_components(trace, cfg.js_impl)
    anom = torch.as_tensor(roles).bool()
    frag = {"objective": float(objective), "n_normal": int((~anom).sum()), "n_anom": int(anom.sum())}
    for key in LOG_KEYS:
        frag[f"{key}_normal"] = float(parts[key][~anom].sum())
        frag[f"{key}_anom"] = float(parts[key][anom].sum())
    return frag


@dataclass
class EpochLog:
    epoch: int
    lr: float
    objective: float
    means: dict
    auroc: float = None

    def to_json(self):
        row = {"epoch": self.epoch, "lr": self.lr, "objective": self.objective}
        for key in LOG_KEYS:
            row[f"{key}_mean"] = self.means.get(f"{key}_normal")
        for key in LOG_KEYS:
            row[f"{key}_anom_mean"] = self.means.get(f"{key}_anom")
        row["auroc"] = self.auroc
        return row


def _epoch_log(epoch, lr, frags):
    total = {k: sum(f[k] for f in frags) for k in frags[0]} if frags else {}
    means = {}
    for key in LOG_KEYS:
        for role, count in (("normal", "n_normal"), ("anom", "n_anom")):
            n = total.get(count, 0)
            means[f"{key}_{role}"] = total[f"{key}_{role}"] / n if n else None
    return EpochLog(epoch, lr, total.get("objective", 0.0), means)


@dataclass
class FitResult:
    model: RecodingVAE
    final_state: dict
    best_state: dict
    best_auroc: float
    best_epoch: int
    logs: list = field(default_factory=list)


def _batch_order(n, batch_size, rng):
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        # batch norm cannot train on a single sample
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def fit(model, task, cfg, streams=None, log_path=None, eval_every=None, callback=None):
    """Train ``model`` on ``task`` for ``cfg.epochs`` epochs.

    AUROC on the test split is computed every ``eval_every`` epochs and
    after the last one; the parameters with the best AUROC are retained
    alongside the final ones. Epoch logs are appended to ``log_path``
    (JSON lines) when given.
    """
    streams = streams or seed_streams(cfg.seed)
    eval_every = eval_every or cfg.eval_every
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    x_train, roles_train = task.train_arrays()
    x_train = torch.as_tensor(x_train, dtype=dtype, device=device)
    roles_train = torch.as_tensor(roles_train)
    if cfg.mode != "e":
        roles_train = torch.zeros_like(roles_train)
    x_test, y_test, test_ids = task.test_arrays()
    optimizer = make_optimizer(model, cfg)

    initial = copy.deepcopy(model.state_dict())
    best_state, best_auroc, best_epoch = initial, float("-inf"), -1
    logs = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            frags = []
            for idx in _batch_order(len(x_train), cfg.batch_size, streams["shuffle"]):
                idx = torch.as_tensor(idx)
                batch = x_train[idx]
                if cfg.data.augment:
                    batch = standard_augment(batch, cfg.data.category, streams["augment"])
                if cfg.mode == "d":
                    batch, roles = apply_dsa(batch, cfg.dsa, streams["dsa"])
                else:
                    roles = roles_train[idx]
                frags.append(
                    train_step(model, optimizer, batch, roles, cfg, generator=streams["noise"])
                )
            entry = _epoch_log(epoch, lr, frags)
            last = epoch == cfg.epochs - 1
            if (epoch + 1) % eval_every == 0 or last:
                report = evaluate(model, x_test, y_test, test_ids, cfg.alpha_score)
                entry.auroc = report.auroc
                if report.auroc > best_auroc:
                    best_auroc, best_epoch = report.auroc, epoch
                    best_state = copy.deepcopy(model.state_dict())
            logs.append(entry)
            log.info("epoch %d lr %.5f objective %.4f auroc %s",
                     epoch, lr, entry.objective, entry.auroc)
            if log_file:
                log_file.write(json.dumps(entry.to_json()) + "\n")
                log_file.flush()
            if callback:
                callback(model, entry)
    finally:
        if log_file:
            log_file.close()
    final_state = copy.deepcopy(model.state_dict())
    if best_epoch < 0:
        best_auroc = None
    return FitResult(model, final_state, best_state, best_auroc, best_epoch, logs)
