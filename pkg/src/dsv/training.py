"""Segment-level objectives, the trainable s-vector table, and the training loop."""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation, NonFiniteError, TrainingDivergedError, VariantMismatchError
from .features import Normalizer, Segment, segment_sequence
from .gaussian import DiagGaussian, gaussian_log_prob, kl_diag_gaussians, log_prior_mu2
from .model import SeqVAE, load_checkpoint, model_payload, save_checkpoint

log = logging.getLogger(__name__)

LOSS_FIELDS = ("total", "recon", "prediction", "kl_z1", "kl_z2", "mu2_prior", "discriminative")


# --------------------------------------------------------------------------
# data containers


@dataclass
class SegmentBatch:
    frames: torch.Tensor  # (B, L, F)
    future: torch.Tensor  # (B, L, F); zeros where has_target is False
    has_target: torch.Tensor  # (B,) bool
    seq_index: torch.Tensor  # (B,) long, row in the s-vector table
    n_segments: torch.Tensor  # (B,) N^(i) of the owning sequence

    def __len__(self):
        return self.frames.shape[0]

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SegmentBatch(self.frames[idx], self.future[idx], self.has_target[idx],
                            self.seq_index[idx], self.n_segments[idx])

    @classmethod
    def from_segments(cls, segments, seq_index=0, n_segments=None, dtype=torch.float32):
        if isinstance(segments, Segment):
            segments = [segments]
        if not segments:
            raise ContractViolation("empty segment list")
        frames = np.stack([s.frames for s in segments])
        future = np.stack([s.future_frames if s.has_target else np.zeros_like(s.frames) for s in segments])
        B = len(segments)
        idx = torch.as_tensor(seq_index, dtype=torch.long).expand(B).clone()
        n = torch.as_tensor(n_segments if n_segments is not None else B, dtype=torch.float64).expand(B).clone()
        return cls(torch.as_tensor(frames, dtype=dtype), torch.as_tensor(future, dtype=dtype),
                   torch.tensor([s.has_target for s in segments]), idx, n)


class SVectorTable(nn.Module):
    """Trainable per-sequence s-vectors, initialised at zero (the prior mode)."""

    def __init__(self, sequence_ids, n_segments, dim, dtype=torch.float32):
        super().__init__()
        if len(sequence_ids) != len(n_segments):
            raise ContractViolation("one segment count per sequence required")
        if any(n < 1 for n in n_segments):
            raise ContractViolation("every table entry needs N >= 1 segments")
        self.sequence_ids = list(sequence_ids)
        self.index = {sid: i for i, sid in enumerate(self.sequence_ids)}
        if len(self.index) != len(self.sequence_ids):
            raise ContractViolation("duplicate sequence ids in s-vector table")
        self.n_segments = torch.as_tensor(n_segments, dtype=torch.float64)
        self.vectors = nn.Parameter(torch.zeros(len(sequence_ids), dim, dtype=dtype))

    def __len__(self):
        return len(self.sequence_ids)

    def lookup(self, sequence_id):
        try:
            return self.index[sequence_id]
        except KeyError:
            raise KeyError(f"sequence {sequence_id!r} has no s-vector") from None

    def __getitem__(self, sequence_id):
        return self.vectors[self.lookup(sequence_id)]

    def to_dict(self):
        return {"sequence_ids": self.sequence_ids, "n_segments": self.n_segments.clone(),
                "vectors": self.vectors.detach().clone()}

    @classmethod
    def from_dict(cls, d):
        v = d["vectors"]
        table = cls(d["sequence_ids"], d["n_segments"].tolist(), v.shape[1], v.dtype)
        with torch.no_grad():
            table.vectors.copy_(v)
        return table


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    prediction: torch.Tensor
    kl_z1: torch.Tensor
    kl_z2: torch.Tensor
    mu2_prior: torch.Tensor
    discriminative: torch.Tensor
    missing_targets: int = 0

    def __post_init__(self):
        parts = self.recon + self.prediction + self.kl_z1 + self.kl_z2 + self.mu2_prior + self.discriminative
        t, p = float(self.total.detach()), float(parts.detach())
        # non-finite totals are left for the divergence handler to report
        if math.isfinite(t) and abs(t - p) > 1e-6 * max(1.0, abs(t)):
            raise AssertionError(f"loss decomposition broken: total {t} vs parts {p}")

    def as_dict(self):
        d = {k: float(getattr(self, k).detach()) for k in LOSS_FIELDS}
        d["missing_targets"] = int(self.missing_targets)
        return d


# --------------------------------------------------------------------------
# objectives


def _as_batch(segment, dtype):
    if isinstance(segment, SegmentBatch):
        return segment
    return SegmentBatch.from_segments(segment, dtype=dtype)


def _batched(outputs):
    if outputs.q_z1.mean.dim() == 1:
        def up(t):
            return None if t is None else t.unsqueeze(0)
        outputs = copy.copy(outputs)
        outputs.q_z1 = DiagGaussian(up(outputs.q_z1.mean), up(outputs.q_z1.logvar))
        outputs.q_z2 = DiagGaussian(up(outputs.q_z2.mean), up(outputs.q_z2.logvar))
        outputs.recon, outputs.recon_logvar = up(outputs.recon), up(outputs.recon_logvar)
        outputs.prediction = up(outputs.prediction)
    return outputs


def _latent_terms(out, svector, n_segments, config):
    B = out.q_z1.mean.shape[0]
    svector = torch.as_tensor(svector).double()
    if svector.dim() == 1:
        svector = svector.expand(B, -1)
    n = torch.as_tensor(n_segments, dtype=torch.float64).expand(B)
    prior_z1 = DiagGaussian(torch.zeros_like(out.q_z1.mean, dtype=torch.float64),
                            torch.zeros_like(out.q_z1.mean, dtype=torch.float64))
    prior_z2 = DiagGaussian(svector, torch.full_like(svector, math.log(config.sigma2_z2)))
    kl_z1 = kl_diag_gaussians(out.q_z1, prior_z1)
    kl_z2 = kl_diag_gaussians(out.q_z2, prior_z2)
    mu2_prior = -log_prior_mu2(svector) / n
    return kl_z1, kl_z2, mu2_prior


def _finish(recon, prediction, kl_z1, kl_z2, mu2_prior, discriminative, missing=0):
    if discriminative is None:
        discriminative = torch.zeros_like(recon)
    terms = [t.mean() for t in (recon, prediction, kl_z1, kl_z2, mu2_prior, discriminative)]
    total = sum(terms[1:], terms[0])
    return LossBreakdown(total, *terms, missing_targets=missing)


def fhvae_loss(outputs, segment, svector, N_i, config, discriminative=None):
    """Negative segment objective of the FHVAE baseline (Gaussian likelihood).

    ``discriminative`` is an optional per-segment, already alpha-scaled term.
    Batched inputs are averaged over segments.
    """
    if outputs.prediction is not None or config.is_apc:
        raise VariantMismatchError("fhvae_loss applies to the fhvae variant only")
    out = _batched(outputs)
    batch = _as_batch(segment, out.recon.dtype)
    B = batch.frames.shape[0]
    x = batch.frames.reshape(B, -1)
    lik = DiagGaussian(out.recon.reshape(B, -1), out.recon_logvar.reshape(B, -1))
    recon = -gaussian_log_prob(x, lik)
    kl_z1, kl_z2, mu2_prior = _latent_terms(out, svector, N_i, config)
    return _finish(recon, torch.zeros_like(recon), kl_z1, kl_z2, mu2_prior, discriminative)


def fhvae_apc_loss(outputs, segment, svector, N_i, config, discriminative=None):
    """Squared-error reconstruction + m-ahead prediction + the FHVAE latent terms.

    Squared errors are summed over all L x F entries. Segments without a full
    future window contribute zero prediction loss and are counted in
    ``missing_targets``.
    """
    if outputs.prediction is None:
        raise VariantMismatchError("fhvae_apc_loss needs a prediction decoder output")
    out = _batched(outputs)
    batch = _as_batch(segment, out.recon.dtype)
    B = batch.frames.shape[0]
    recon = ((out.recon.double() - batch.frames.double()) ** 2).reshape(B, -1).sum(-1)
    mask = batch.has_target.to(torch.float64)
    pred_err = ((out.prediction.double() - batch.future.double()) ** 2).reshape(B, -1).sum(-1)
    prediction = pred_err * mask
    kl_z1, kl_z2, mu2_prior = _latent_terms(out, svector, N_i, config)
    missing = int((~batch.has_target).sum())
    return _finish(recon, prediction, kl_z1, kl_z2, mu2_prior, discriminative, missing)


def discriminative_loss(q_z2, sequence_id, table, config):
    """-log p(i | z2 mean): softmax over squared distances to every s-vector.

    ``sequence_id`` is a string or a tensor of table row indices. Returns the
    unscaled per-segment loss; callers multiply by ``alpha_dis``.
    """
    mean = q_z2.mean if isinstance(q_z2, DiagGaussian) else q_z2
    mean = torch.atleast_2d(mean).double()
    if isinstance(sequence_id, str):
        idx = torch.full((mean.shape[0],), table.lookup(sequence_id), dtype=torch.long)
    else:
        idx = torch.as_tensor(sequence_id, dtype=torch.long).reshape(-1)
    mu = table.vectors.double()
    d2 = ((mean[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
    logits = -d2 / (2.0 * config.sigma2_z2)
    return -torch.log_softmax(logits, dim=-1).gather(1, idx[:, None]).squeeze(1)


def segment_loss(model, batch, table, noise=None, svectors=None, use_discriminative=True):
    """Forward a batch and evaluate the variant's objective."""
    config = model.config
    out = model(batch.frames, noise)
    if svectors is None:
        svectors = table.vectors[batch.seq_index]
    dis = None
    if use_discriminative and table is not None and config.alpha_dis != 0:
        dis = config.alpha_dis * discriminative_loss(out.q_z2, batch.seq_index, table, config)
    loss_fn = fhvae_apc_loss if config.is_apc else fhvae_loss
    return loss_fn(out, batch, svectors, batch.n_segments, config, discriminative=dis)


def infer_svector(segments, model, config=None):
    """Posterior-mean s-vector of an unseen sequence under the N(0, I) hyperprior."""
    config = config or model.config
    if isinstance(segments, SegmentBatch):
        frames = segments.frames
    else:
        if len(segments) == 0:
            raise ContractViolation("infer_svector needs at least one segment")
        frames = np.stack([s.frames for s in segments]) if isinstance(segments[0], Segment) else segments
    frames = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames)
    if frames.shape[0] == 0:
        raise ContractViolation("infer_svector needs at least one segment")
    with torch.no_grad():
        means = model.encode_z2(frames).mean.double()
    return svector_from_means(means, config.sigma2_z2)


def svector_from_means(means, sigma2_z2, hyper_var=1.0):
    means = torch.as_tensor(means, dtype=torch.float64)
    return means.sum(0) / (means.shape[0] + sigma2_z2 / hyper_var)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainOptions:
    learning_rate: float = 1e-3
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 500
    out_dir: Optional[str] = None
    checkpoint_every: int = 1


@dataclass
class TrainState:
    model: SeqVAE
    table: SVectorTable
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    best_dev: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    best_params: Optional[dict] = None
    history: List[dict] = field(default_factory=list)
    seed: int = 0
    normalization: Optional[dict] = None
    corpus_hash: Optional[str] = None
    stopped_early: bool = False

    @property
    def config(self):
        return self.model.config

    def payload(self, best=False):
        params = self.best_params if best and self.best_params is not None else None
        if params is None:
            params = {"state_dict": self.model.state_dict(), "table": self.table.to_dict()}
        payload = model_payload(self.model, svectors=params["table"], step=self.epoch,
                                normalization=self.normalization, corpus_hash=self.corpus_hash,
                                seed=self.seed, best_dev=self.best_dev, best_epoch=self.best_epoch)
        payload["state_dict"] = {k: v.detach().clone() for k, v in params["state_dict"].items()}
        if not best:
            payload.update(optimizer=copy.deepcopy(self.optimizer.state_dict()),
                           bad_epochs=self.bad_epochs, best_params=copy.deepcopy(self.best_params),
                           history=list(self.history), stopped_early=self.stopped_early)
        return payload


def _segment_records(records, config, normalizer, shift):
    segs, owners = [], []
    for r in records:
        feats = normalizer.apply(r.features) if normalizer is not None else r.features
        view = copy.copy(r)
        view.features = feats
        s = segment_sequence(view, config.segment_len, shift, config.m)
        segs.append(s)
        owners.append(r.sequence_id)
    return segs, owners


def build_training_batch(records, config, normalizer=None, shift=None):
    """All segments of ``records`` as one SegmentBatch plus the matching s-vector table."""
    shift = shift or config.segment_len
    segs, owners = _segment_records(records, config, normalizer, shift)
    keep = [(o, s) for o, s in zip(owners, segs) if s]
    if not keep:
        raise ContractViolation("no record is long enough to yield a segment")
    table = SVectorTable([o for o, _ in keep], [len(s) for _, s in keep], config.latent_dim_z2,
                         config.torch_dtype)
    parts = [SegmentBatch.from_segments(s, i, len(s), config.torch_dtype) for i, (_, s) in enumerate(keep)]
    return _concat(parts), table


def _concat(parts):
    return SegmentBatch(*(torch.cat([getattr(p, f) for p in parts]) for f in
                          ("frames", "future", "has_target", "seq_index", "n_segments")))


def _epoch_generators(seed, epoch):
    rng = np.random.default_rng([seed, epoch])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
    return rng, gen


def _dev_loss(model, dev_batches):
    """Dev objective with posterior-mean latents and closed-form s-vectors."""
    if not dev_batches:
        return None
    sums, count = dict.fromkeys(LOSS_FIELDS, 0.0), 0
    with torch.no_grad():
        for batch in dev_batches:
            sv = svector_from_means(model.encode_z2(batch.frames).mean, model.config.sigma2_z2)
            bd = segment_loss(model, batch, None, noise=None, svectors=sv, use_discriminative=False)
            for k in LOSS_FIELDS:
                sums[k] += float(getattr(bd, k)) * len(batch)
            count += len(batch)
    return {k: v / count for k, v in sums.items()}


def init_state(train_records, config, options, normalizer=None, shift=None):
    model = SeqVAE(config)
    data, table = build_training_batch(train_records, config, normalizer, shift)
    opt = torch.optim.Adam(list(model.parameters()) + list(table.parameters()), lr=options.learning_rate)
    state = TrainState(model, table, opt, seed=config.seed,
                       normalization=normalizer.to_dict() if normalizer is not None else None)
    return state, data


def state_from_checkpoint(payload, train_records, options, normalizer=None, shift=None):
    from .model import ModelConfig
    config = ModelConfig.from_dict(payload["config"])
    state, data = init_state(train_records, config, options, normalizer, shift)
    state.model.load_state_dict(payload["state_dict"])
    saved = SVectorTable.from_dict(payload["svectors"])
    if saved.sequence_ids != state.table.sequence_ids:
        raise ContractViolation("checkpoint s-vector table does not match the training records")
    with torch.no_grad():
        state.table.vectors.copy_(saved.vectors)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = payload["step"]
    state.best_dev = payload["best_dev"]
    state.best_epoch = payload["best_epoch"]
    state.bad_epochs = payload["bad_epochs"]
    state.best_params = payload["best_params"]
    state.history = list(payload["history"])
    state.stopped_early = payload.get("stopped_early", False)
    state.corpus_hash = payload.get("corpus_hash")
    return state, data


def fit(train_records, dev_records, config, options=None, normalizer=None, resume_from=None,
        shift=None, corpus_hash=None):
    """Optimise the variant's objective; returns the final TrainState.

    Epoch ``e`` draws its shuffling and reparameterisation noise from
    ``(seed, e)`` alone, so resuming from a saved epoch replays the
    uninterrupted trajectory exactly.
    """
    options = options or TrainOptions()
    if resume_from is not None:
        payload = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        state, data = state_from_checkpoint(payload, train_records, options, normalizer, shift)
        config = state.config
    else:
        state, data = init_state(train_records, config, options, normalizer, shift)
    state.corpus_hash = corpus_hash or state.corpus_hash
    model, table, opt = state.model, state.table, state.optimizer

    dev_batches = []
    if dev_records:
        segs, _ = _segment_records(dev_records, config, normalizer, shift or config.segment_len)
        dev_batches = [SegmentBatch.from_segments(s, 0, len(s), config.torch_dtype) for s in segs if s]

    out_dir = Path(options.out_dir) if options.out_dir else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir else None

    n, bs = len(data), options.batch_size

    if state.epoch == 0 and not state.history:
        _, gen = _epoch_generators(config.seed, 0)
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        with torch.no_grad():
            for b in range(0, n, bs):
                idx = torch.arange(b, min(b + bs, n))
                bd = segment_loss(model, data.subset(idx), table, noise=gen)
                for k in LOSS_FIELDS:
                    sums[k] += float(getattr(bd, k).detach()) * len(idx)
        _record(state, log_path, {"epoch": 0, "split": "train", **{k: v / n for k, v in sums.items()}})

    while state.epoch < options.max_epochs and not state.stopped_early:
        epoch = state.epoch + 1
        rng, gen = _epoch_generators(config.seed, epoch)
        order = torch.as_tensor(rng.permutation(n))
        model.train()
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        for b in range(0, n, bs):
            idx = order[b : b + bs]
            batch = data.subset(idx)
            try:
                bd = segment_loss(model, batch, table, noise=gen)
                detail = bd.as_dict()
                finite = bool(torch.isfinite(bd.total))
            except NonFiniteError as err:
                detail, finite = str(err), False
            if not finite:
                dump = None
                if out_dir is not None:
                    dump = out_dir / "diverged_batch.pt"
                    torch.save({"epoch": epoch, "indices": idx, "batch": batch, "loss": detail}, dump)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {detail}", dump)
            opt.zero_grad()
            bd.total.backward()
            opt.step()
            for k in LOSS_FIELDS:
                sums[k] += float(getattr(bd, k).detach()) * len(idx)
        model.eval()
        state.epoch = epoch
        _record(state, log_path, {"epoch": epoch, "split": "train", **{k: v / n for k, v in sums.items()}})

        dev = _dev_loss(model, dev_batches)
        monitor = dev["total"] if dev is not None else sums["total"] / n
        if dev is not None:
            _record(state, log_path, {"epoch": epoch, "split": "dev", **dev})
        if monitor < state.best_dev:
            state.best_dev, state.best_epoch, state.bad_epochs = monitor, epoch, 0
            state.best_params = {"state_dict": copy.deepcopy(model.state_dict()), "table": table.to_dict()}
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= options.patience:
                state.stopped_early = True
        log.info("epoch %d train %.4f dev %s", epoch, sums["total"] / n,
                 f"{dev['total']:.4f}" if dev else "-")

        if out_dir is not None and (epoch % options.checkpoint_every == 0 or state.stopped_early
                                    or epoch == options.max_epochs):
            save_checkpoint(out_dir / "checkpoints" / "latest.ckpt", state.payload())
            save_checkpoint(out_dir / "checkpoints" / "best.ckpt", state.payload(best=True))
    return state


def _record(state, log_path, rec):
    state.history.append(rec)
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(manifest, config, options=None, resume=False):
    """Train from a corpus manifest; checkpoints land in ``options.out_dir``."""
    options = options or TrainOptions()
    seg = manifest.segmentation
    if seg["L"] != config.segment_len or seg["m"] != config.m:
        raise ContractViolation(
            f"manifest segmentation L={seg['L']} m={seg['m']} disagrees with model "
            f"segment_len={config.segment_len} m={config.m}")
    if manifest.features["F"] != config.feature_dim:
        raise ContractViolation(
            f"manifest F={manifest.features['F']} disagrees with feature_dim={config.feature_dim}")
    records = manifest.load_records()
    train_recs = [r for r in records if r.split == "train"]
    dev_recs = [r for r in records if r.split == "dev"]
    resume_from = None
    if resume and options.out_dir:
        latest = Path(options.out_dir) / "checkpoints" / "latest.ckpt"
        if latest.exists():
            resume_from = latest
    elif options.out_dir:
        log_file = Path(options.out_dir) / "train_log.jsonl"
        if log_file.exists():
            log_file.unlink()
    return fit(train_recs, dev_recs, config, options, manifest.normalizer, resume_from,
               shift=seg["shift"], corpus_hash=manifest.corpus_hash())
