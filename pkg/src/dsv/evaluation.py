"""EER scoring, k-fold probe classifiers, the ND conversion metric, and the
synthetic disentanglement benchmark."""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from . import __version__
from .conversion import convert_voice, extract_segmental, extract_sequential, load_model
from .errors import ContractViolation, CorpusMismatchError, ProtocolError
from .features import SequenceRecord

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# trials and EER


@dataclass
class TrialSet:
    scores: np.ndarray
    is_target: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1:
            raise ContractViolation("scores and labels must be equal-length vectors")
        if not self.is_target.any() or self.is_target.all():
            raise ContractViolation(f"trial set needs target and non-target trials ({self.provenance})")
        if not np.isfinite(self.scores).all():
            raise ContractViolation("non-finite trial scores")

    def to_dict(self):
        return {"provenance": self.provenance, "scores": self.scores.tolist(),
                "is_target": self.is_target.astype(int).tolist()}


def _unit_rows(vectors, ids):
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    for i, n in enumerate(norms):
        if n == 0:
            raise ContractViolation(f"zero-norm feature for sequence {ids[i]}")
    return v / norms[:, None]


def cosine_score_matrix(features, labels=None):
    """Cosine score for every unordered pair; target iff same speaker."""
    if len(features) < 2:
        raise ContractViolation("need at least two features to form trials")
    labels = labels if labels is not None else [f.speaker_id for f in features]
    if any(lab is None for lab in labels):
        raise ContractViolation("every feature needs a speaker label")
    ids = [f.sequence_id for f in features]
    u = _unit_rows([f.vector for f in features], ids)
    sim = u @ u.T
    i, j = np.triu_indices(len(features), k=1)
    lab = np.asarray(labels)
    return TrialSet(sim[i, j], lab[i] == lab[j], provenance=f"all unordered pairs of {len(features)} features")


def _crossing(far_counts, frr_counts, n_non, n_tar):
    """Linear interpolation of the FAR = FRR crossing along the operating points.

    Counts are ordered by decreasing threshold, starting at the reject-all point.
    """
    prev = None
    for fa, fr in zip(far_counts, frr_counts):
        far, frr = Fraction(int(fa), n_non), Fraction(int(fr), n_tar)
        if far >= frr:
            if prev is None or far == frr:
                return float(far * 100)
            pfar, pfrr = prev
            d0, d1 = pfar - pfrr, far - frr
            t = d0 / (d0 - d1)
            return float((pfar + t * (far - pfar)) * 100)
        prev = (far, frr)
    raise AssertionError("ROC never reaches FAR >= FRR")


def compute_eer(trials):
    """Equal error rate in percent; accept iff score >= threshold."""
    s, y = trials.scores, trials.is_target
    n_tar, n_non = int(y.sum()), int((~y).sum())
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    acc_tar = np.cumsum(y_sorted)[ends]
    acc_non = np.cumsum(~y_sorted)[ends]
    far = np.r_[0, acc_non]
    frr = np.r_[n_tar, n_tar - acc_tar]
    return _crossing(far, frr, n_non, n_tar)


def nd_metric(eer_a, eer_b, eer_c):
    """Normalized difference (EER_B - EER_A) / EER_C."""
    if not eer_c > 0:
        raise ContractViolation(f"EER_C must be positive, got {eer_c}")
    return (eer_b - eer_a) / eer_c


# --------------------------------------------------------------------------
# probes

PROBE_PATIENCE = {"gru": 15, "gru_fc": 5, "linear": 10}


class Probe(nn.Module):
    def __init__(self, kind, in_dim, n_classes):
        super().__init__()
        self.kind = kind
        if kind == "gru":
            # the recurrent state itself is the class score vector
            self.rnn = nn.GRU(in_dim, n_classes, batch_first=True)
            self.fc = None
        elif kind == "gru_fc":
            self.rnn = nn.GRU(in_dim, 512, batch_first=True)
            self.fc = nn.Linear(512, n_classes)
        elif kind == "linear":
            self.rnn = None
            self.fc = nn.Linear(in_dim, n_classes)
        else:
            raise ContractViolation(f"unknown probe kind {kind!r}")

    def forward(self, x):
        if self.rnn is None:
            return self.fc(x)
        h = _gru_first_step(self.rnn, x)
        return h if self.fc is None else self.fc(h)


def _gru_first_step(gru, x):
    """One GRU step from a zero state, i.e. ``gru(x[:, None])`` without the
    hidden-to-hidden product, which vanishes at h0 = 0."""
    gi = x @ gru.weight_ih_l0.T + gru.bias_ih_l0
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gru.bias_hh_l0.chunk(3)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n


def fold_assignment(labels, k, seed):
    """Fold id per item: each class is shuffled and dealt into k groups."""
    labels = np.asarray(labels)
    if k < 3:
        raise ProtocolError("need k >= 3 folds (test, dev and train groups)")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ProtocolError(f"class {c!r} has {len(idx)} items, fewer than k={k} folds")
        idx = idx[rng.permutation(len(idx))]
        for f, part in enumerate(np.array_split(idx, k)):
            folds[part] = f
    return folds


def fold_split(folds, f, k):
    test = np.flatnonzero(folds == f)
    dev = np.flatnonzero(folds == (f + 1) % k)
    train = np.flatnonzero((folds != f) & (folds != (f + 1) % k))
    return train, dev, test


@dataclass
class ProbeResult:
    accuracy: float
    fold_accuracies: List[float]
    folds: List[int]
    kind: str
    epochs: List[int] = field(default_factory=list)

    def to_dict(self):
        return {"accuracy": self.accuracy, "fold_accuracies": self.fold_accuracies,
                "folds": self.folds, "kind": self.kind, "epochs": self.epochs}


def _train_probe(kind, x, y, train, dev, n_classes, seed, max_epochs, lr=1e-3, batch_size=32, tol=1e-4):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    probe = Probe(kind, x.shape[1], n_classes).float()
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    patience = PROBE_PATIENCE[kind]
    train = torch.as_tensor(train)
    best, best_state, stale, epoch = np.inf, None, 0, 0
    for epoch in range(1, max_epochs + 1):
        order = train[torch.randperm(len(train), generator=gen)]
        for b in range(0, len(order), batch_size):
            idx = order[b : b + batch_size]
            opt.zero_grad()
            ce(probe(x[idx]), y[idx]).backward()
            opt.step()
        with torch.no_grad():
            dev_loss = float(ce(probe(x[dev]), y[dev]))
        if dev_loss < best - tol:
            best, stale = dev_loss, 0
            best_state = {k: v.clone() for k, v in probe.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        probe.load_state_dict(best_state)
    return probe, epoch


def kfold_probe(features, labels, k, probe_kind="gru_fc", seed=0, max_epochs=300):
    """Mean test accuracy over k folds (one fold tests, the next one is dev)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) != len(labels):
        raise ContractViolation("features and labels differ in length")
    classes = sorted(set(labels.tolist()))
    y = torch.as_tensor(np.searchsorted(np.asarray(classes), labels))
    folds = fold_assignment(labels, k, seed)
    accs, epochs = [], []
    for f in range(k):
        train, dev, test = fold_split(folds, f, k)
        mu, sd = x[train].mean(0), x[train].std(0)
        sd[sd < 1e-12] = 1.0
        xt = torch.as_tensor((x - mu) / sd, dtype=torch.float32)
        probe, ep = _train_probe(probe_kind, xt, y, train, dev, len(classes), seed * 1000 + f, max_epochs)
        with torch.no_grad():
            pred = probe(xt[test]).argmax(-1)
        accs.append(float((pred == y[test]).double().mean()))
        epochs.append(ep)
    return ProbeResult(float(np.mean(accs)), accs, folds.tolist(), probe_kind, epochs)


# --------------------------------------------------------------------------
# conversion evaluation


def _speaker_models(features):
    by_spk = {}
    for f in features:
        by_spk.setdefault(f.speaker_id, []).append(f.vector / np.linalg.norm(f.vector))
    return {s: np.mean(v, axis=0) for s, v in sorted(by_spk.items())}


def _verify(converted, models, true_role, exclude_role):
    scores, labels = [], []
    for conv in converted:
        v = conv["feature"] / np.linalg.norm(conv["feature"])
        for spk, m in models.items():
            if spk == conv[exclude_role]:
                continue
            scores.append(float(v @ m / np.linalg.norm(m)))
            labels.append(spk == conv[true_role])
    return scores, labels


def conversion_eval(converted, enrollment, baseline, conditions=None):
    """EER_A / EER_B / ND per condition.

    ``converted``: dicts with keys ``source``, ``target`` (speaker ids) and
    ``feature`` (re-encoded sequential vector). ``enrollment``: unconverted
    SequentialFeatures defining one cosine speaker model per speaker.
    ``baseline``: unconverted SequentialFeatures for EER_C. ``conditions``
    maps a name to the set of speakers it covers.
    """
    if not baseline:
        raise ContractViolation("conversion_eval needs unconverted baseline features for EER_C")
    all_spk = {f.speaker_id for f in enrollment}
    conditions = conditions or {"all": all_spk}
    out = {}
    for name, spk_set in sorted(conditions.items()):
        models = {s: m for s, m in _speaker_models(enrollment).items() if s in spk_set}
        conv = [c for c in converted if c["source"] in spk_set and c["target"] in spk_set
                and c["source"] != c["target"]]
        base = [f for f in baseline if f.speaker_id in spk_set]
        res = {"n_converted": len(conv)}
        try:
            a_s, a_l = _verify(conv, models, "source", "target")
            b_s, b_l = _verify(conv, models, "target", "source")
            ta = TrialSet(a_s, a_l, f"{name}: converted vs speakers except target, source is true")
            tb = TrialSet(b_s, b_l, f"{name}: converted vs speakers except source, target is true")
            tc = cosine_score_matrix(base)
            tc.provenance = f"{name}: unconverted features, {tc.provenance}"
        except ContractViolation as exc:
            res["error"] = str(exc)
            out[name] = res
            continue
        res.update(eer_a=compute_eer(ta), eer_b=compute_eer(tb), eer_c=compute_eer(tc),
                   trials={"a": ta.to_dict(), "b": tb.to_dict(), "c": tc.to_dict()})
        if res["eer_c"] > 0:
            res["nd"] = nd_metric(res["eer_a"], res["eer_b"], res["eer_c"])
        else:
            res["nd"] = None
            res["nd_note"] = "EER_C is 0 on unconverted features; ND undefined"
        out[name] = res
    return out


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkOptions:
    k_speaker: int = 0  # 0: per-speaker sequence count of the evaluation split
    k_content: int = 8
    probe_kinds: tuple = ("gru", "gru_fc")
    split: str = "test"
    max_probe_epochs: int = 300


def _segment_labels(rec, L, n_segments):
    if rec.content_labels is None:
        return None
    out = []
    for n in range(n_segments):
        vals, counts = np.unique(rec.content_labels[n * L : (n + 1) * L], return_counts=True)
        out.append(int(vals[np.argmax(counts)]))
    return out


def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def disentanglement_benchmark(manifest, checkpoint, seed=0, options=None, run_config=None):
    """Probes, cosine EER and a conversion grid on the held-out split."""
    options = options or BenchmarkOptions()
    lm = load_model(checkpoint, shift=manifest.segmentation["shift"])
    corpus_hash = manifest.corpus_hash()
    trained_on = lm.payload.get("corpus_hash")
    if trained_on is not None and trained_on != corpus_hash:
        raise CorpusMismatchError(
            f"checkpoint was trained on corpus {trained_on[:12]} but manifest hashes to {corpus_hash[:12]}")
    records = manifest.load_records(splits={options.split})
    if not records:
        raise ProtocolError(f"manifest has no {options.split!r} sequences")
    L = lm.config.segment_len

    seq_feats = [extract_sequential(r, lm) for r in records]
    seg_feats, seg_spk, seg_content, seq_of_seg = [], [], [], []
    for i, r in enumerate(records):
        feats = extract_segmental(r, lm)
        labels = _segment_labels(r, L, len(feats)) if lm.shift == L else None
        for n, f in enumerate(feats):
            seg_feats.append(f.vector)
            seg_spk.append(r.speaker_id)
            seg_content.append(None if labels is None else labels[n])
            seq_of_seg.append(i)

    report = {
        "code_version": __version__,
        "seed": seed,
        "corpus_hash": corpus_hash,
        "checkpoint": {"variant": lm.config.variant, "config": lm.config.to_dict(),
                       "step": lm.payload.get("step"), "best_epoch": lm.payload.get("best_epoch")},
        "config": run_config,
        "config_hash": config_hash(run_config) if run_config is not None else None,
        "split": options.split,
        "n_sequences": len(records),
        "n_segments": len(seg_feats),
    }

    trials = cosine_score_matrix(seq_feats)
    report["eer"] = {"sequential_cosine": compute_eer(trials)}

    spk_labels = [r.speaker_id for r in records]
    counts = np.unique(spk_labels, return_counts=True)[1]
    k_spk = options.k_speaker or int(counts.min())
    seq_x = np.stack([f.vector for f in seq_feats])
    seg_x = np.stack(seg_feats)
    probes = {}
    for kind in options.probe_kinds:
        probes[f"speaker/sequential/{kind}"] = kfold_probe(
            seq_x, spk_labels, k_spk, kind, seed, options.max_probe_epochs)
        probes[f"speaker/segmental/{kind}"] = kfold_probe(
            seg_x, seg_spk, k_spk, kind, seed, options.max_probe_epochs)
        if all(c is not None for c in seg_content):
            probes[f"content/segmental/{kind}"] = kfold_probe(
                seg_x, seg_content, options.k_content, kind, seed, options.max_probe_epochs)
            probes[f"content/sequential/{kind}"] = kfold_probe(
                seq_x[seq_of_seg], seg_content, options.k_content, kind, seed, options.max_probe_epochs)
    report["probes"] = {k: v.accuracy for k, v in probes.items()}

    report["conversion"] = conversion_grid(records, seq_feats, lm, seed)
    report["provenance"] = {
        "sequential_trials": trials.to_dict(),
        "probe_folds": {k: v.to_dict() for k, v in probes.items()},
    }
    return report


def conversion_grid(records, seq_feats, lm, seed):
    """One sequence per speaker converted to every other speaker, then re-encoded."""
    rng = np.random.default_rng(seed)
    by_spk = {}
    for r, f in zip(records, seq_feats):
        by_spk.setdefault(r.speaker_id, []).append((r, f))
    chosen, enrollment = {}, []
    for spk in sorted(by_spk):
        items = by_spk[spk]
        pick = int(rng.integers(len(items)))
        chosen[spk] = items[pick]
        enrollment.extend(f for i, (_, f) in enumerate(items) if i != pick)
    if not enrollment:
        enrollment = [f for _, f in chosen.values()]

    converted, closer = [], []
    for src in sorted(chosen):
        src_rec, src_feat = chosen[src]
        for tgt in sorted(chosen):
            tgt_feat = chosen[tgt][1]
            spec = convert_voice(src_rec, None, lm, target_svector=tgt_feat.vector)
            rec = SequenceRecord(f"{src_rec.sequence_id}__to__{chosen[tgt][0].sequence_id}", src, spec)
            v = extract_sequential(rec, lm).vector
            converted.append({"source": src, "target": tgt, "feature": v})
            if src != tgt:
                closer.append(bool(_cos(v, tgt_feat.vector) > _cos(v, src_feat.vector)))

    groups = {}
    for r in records:
        if r.group is not None:
            groups.setdefault(r.group, set()).add(r.speaker_id)
    conditions = {"all": set(chosen)}
    conditions.update({g: s & set(chosen) for g, s in groups.items()})
    baseline = [f for _, f in chosen.values()] + enrollment
    result = conversion_eval(converted, enrollment, baseline, conditions)
    return {
        "pairs": len(converted),
        "closer_to_target": float(np.mean(closer)) if closer else None,
        "closer_flags": closer,
        "conditions": result,
    }


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
