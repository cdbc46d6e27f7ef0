import math

import numpy as np
import pytest
import torch

from _gradcheck import max_relative_error
from dsv.errors import ContractViolation, VariantMismatchError
from dsv.features import Segment, SequenceRecord, make_synthetic_corpus, segment_sequence
from dsv.gaussian import DiagGaussian, gaussian_log_prob, kl_diag_gaussians
from dsv.model import LatentOutputs, ModelConfig, SeqVAE
from dsv.training import (
    LossBreakdown,
    SVectorTable,
    TrainOptions,
    discriminative_loss,
    fhvae_apc_loss,
    fhvae_loss,
    fit,
    infer_svector,
    svector_from_means,
)

LOG_2PI = math.log(2 * math.pi)


def ideal_segment(L=4, F=3, m=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((L + m, F))
    return Segment("s", 0, 0, x[:L], x[m : m + L])


def ideal_outputs(seg, d1=4, d2=32, svector=None, sigma2=0.25, apc=True):
    svector = torch.zeros(d2, dtype=torch.float64) if svector is None else svector
    q2 = DiagGaussian(svector.clone(), torch.full((d2,), math.log(sigma2), dtype=torch.float64))
    q1 = DiagGaussian(torch.zeros(d1, dtype=torch.float64), torch.zeros(d1, dtype=torch.float64))
    recon = torch.as_tensor(seg.frames, dtype=torch.float64).clone()
    future = seg.future_frames if seg.has_target else np.zeros_like(seg.frames)
    pred = torch.as_tensor(future, dtype=torch.float64).clone() if apc else None
    logvar = None if apc else torch.zeros_like(recon)
    return LatentOutputs(q2, q1, q2.mean, q1.mean, recon, logvar, pred)


CFG = ModelConfig(feature_dim=3, segment_len=4, latent_dim_z1=4, latent_dim_z2=32)
FH_CFG = ModelConfig(variant="fhvae", feature_dim=3, segment_len=4, latent_dim_z1=4, latent_dim_z2=32)


# -- objectives -------------------------------------------------------------


def test_apc_degenerate_total_is_prior_term():
    seg = ideal_segment()
    bd = fhvae_apc_loss(ideal_outputs(seg), seg, torch.zeros(32), 10, CFG)
    assert float(bd.kl_z1) == 0.0 and float(bd.kl_z2) == 0.0
    assert float(bd.recon) == 0.0 and float(bd.prediction) == 0.0
    assert float(bd.total) == pytest.approx(16 * LOG_2PI / 10, abs=1e-12)
    assert float(bd.total) == pytest.approx(2.9406, abs=1e-4)


def test_apc_single_residual_adds_one():
    seg = ideal_segment()
    out = ideal_outputs(seg)
    out.recon[1, 2] += 1.0
    bd = fhvae_apc_loss(out, seg, torch.zeros(32), 10, CFG)
    assert float(bd.recon) == pytest.approx(1.0, abs=1e-12)
    assert float(bd.total) == pytest.approx(1 + 16 * LOG_2PI / 10, abs=1e-12)


def test_apc_squared_errors_are_summed_not_averaged():
    seg = ideal_segment(L=4, F=3)
    out = ideal_outputs(seg)
    out.prediction += 0.5
    bd = fhvae_apc_loss(out, seg, torch.zeros(32), 10, CFG)
    assert float(bd.prediction) == pytest.approx(4 * 3 * 0.25, abs=1e-12)


def test_missing_target_contributes_zero_and_is_flagged():
    x = np.arange(30, dtype=float).reshape(10, 3)
    segs = segment_sequence(SequenceRecord("s", "k", x), L=4, shift=4, m=3)
    tail = segs[-1]
    assert not tail.has_target
    out = ideal_outputs(tail)
    out.prediction = torch.full((4, 3), 9.0, dtype=torch.float64)
    bd = fhvae_apc_loss(out, tail, torch.zeros(32), 10, CFG)
    assert float(bd.prediction) == 0.0 and bd.missing_targets == 1


def _toy_outputs(rng, apc):
    seg = Segment("s", 0, 0, rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
    q2 = DiagGaussian(torch.as_tensor(rng.standard_normal(2)), torch.as_tensor(rng.standard_normal(2)))
    q1 = DiagGaussian(torch.as_tensor(rng.standard_normal(2)), torch.as_tensor(rng.standard_normal(2)))
    recon = torch.as_tensor(rng.standard_normal((2, 2)))
    logvar = None if apc else torch.as_tensor(rng.standard_normal((2, 2)))
    pred = torch.as_tensor(rng.standard_normal((2, 2))) if apc else None
    return seg, LatentOutputs(q2, q1, q2.mean, q1.mean, recon, logvar, pred)


def _scalar_kl(mq, lq, mp, lp):
    return sum(0.5 * (math.exp(a - c) + (b - d) ** 2 / math.exp(c) - 1 + c - a)
               for a, b, c, d in zip(lq, mq, lp, mp))


def test_toy_totals_match_scalar_recomputation():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(feature_dim=2, segment_len=2, latent_dim_z1=2, latent_dim_z2=2, sigma2_z2=0.5)
    fcfg = ModelConfig(variant="fhvae", feature_dim=2, segment_len=2, latent_dim_z1=2, latent_dim_z2=2, sigma2_z2=0.5)
    sv = [0.3, -0.7]
    N = 7
    prior = -0.5 * sum(LOG_2PI + v * v for v in sv) / N

    def latent_part(out):
        q1m, q1l = out.q_z1.mean.tolist(), out.q_z1.logvar.tolist()
        q2m, q2l = out.q_z2.mean.tolist(), out.q_z2.logvar.tolist()
        return _scalar_kl(q1m, q1l, [0, 0], [0, 0]) + _scalar_kl(q2m, q2l, sv, [math.log(0.5)] * 2) - prior

    seg, out = _toy_outputs(rng, apc=True)
    expected = (sum((a - b) ** 2 for a, b in zip(out.recon.flatten().tolist(), seg.frames.flatten()))
                + sum((a - b) ** 2 for a, b in zip(out.prediction.flatten().tolist(), seg.future_frames.flatten()))
                + latent_part(out))
    assert float(fhvae_apc_loss(out, seg, torch.tensor(sv, dtype=torch.float64), N, cfg).total) == pytest.approx(expected, rel=1e-12)

    seg, out = _toy_outputs(rng, apc=False)
    nll = sum(0.5 * (LOG_2PI + lv + (x - mu) ** 2 / math.exp(lv)) for x, mu, lv in
              zip(seg.frames.flatten(), out.recon.flatten().tolist(), out.recon_logvar.flatten().tolist()))
    assert float(fhvae_loss(out, seg, torch.tensor(sv, dtype=torch.float64), N, fcfg).total) == pytest.approx(nll + latent_part(out), rel=1e-12)


def test_fhvae_and_apc_share_latent_terms():
    rng = np.random.default_rng(5)
    seg, out = _toy_outputs(rng, apc=False)
    cfg = ModelConfig(feature_dim=2, segment_len=2, latent_dim_z1=2, latent_dim_z2=2)
    fcfg = ModelConfig(variant="fhvae", feature_dim=2, segment_len=2, latent_dim_z1=2, latent_dim_z2=2)
    sv = torch.tensor([0.1, 0.2])
    fh = fhvae_loss(out, seg, sv, 4, fcfg)
    apc_out = LatentOutputs(out.q_z2, out.q_z1, out.z2_sample, out.z1_sample, out.recon, None,
                            torch.as_tensor(seg.future_frames))
    ap = fhvae_apc_loss(apc_out, seg, sv, 4, cfg)
    assert float(ap.prediction) == 0.0
    for k in ("kl_z1", "kl_z2", "mu2_prior"):
        assert abs(float(getattr(fh, k)) - float(getattr(ap, k))) < 1e-10
    # swapping the squared error for the Gaussian likelihood recovers the fhvae total
    lik = DiagGaussian(out.recon.reshape(-1), out.recon_logvar.reshape(-1))
    nll = -float(gaussian_log_prob(torch.as_tensor(seg.frames).reshape(-1), lik))
    assert float(ap.total) - float(ap.recon) + nll == pytest.approx(float(fh.total), abs=1e-10)


def test_fhvae_fhvae_mismatch_errors():
    seg = ideal_segment()
    with pytest.raises(VariantMismatchError):
        fhvae_loss(ideal_outputs(seg), seg, torch.zeros(32), 10, FH_CFG)
    with pytest.raises(VariantMismatchError):
        fhvae_apc_loss(ideal_outputs(seg, apc=False), seg, torch.zeros(32), 10, CFG)


def test_fhvae_matched_posteriors_have_zero_kl():
    seg = ideal_segment()
    bd = fhvae_loss(ideal_outputs(seg, apc=False), seg, torch.zeros(32), 10, FH_CFG)
    assert float(bd.kl_z1) == 0.0 and float(bd.kl_z2) == 0.0
    assert float(bd.mu2_prior) == pytest.approx(2.9406, abs=1e-4)


def test_loss_breakdown_detects_broken_sum():
    z = torch.tensor(0.0, dtype=torch.float64)
    with pytest.raises(AssertionError):
        LossBreakdown(torch.tensor(1.0), z, z, z, z, z, z)
    LossBreakdown(torch.tensor(float("nan")), z, z, z, z, z, z)  # left to the divergence handler


def test_mu2_prior_gradient_identity():
    sv = torch.tensor([0.4, -1.3, 2.0], dtype=torch.float64, requires_grad=True)
    seg = ideal_segment()
    cfg = ModelConfig(feature_dim=3, segment_len=4, latent_dim_z1=4, latent_dim_z2=3)
    out = ideal_outputs(seg, d2=3, svector=sv.detach())
    bd = fhvae_apc_loss(out, seg, sv, 8, cfg)
    grad, = torch.autograd.grad(bd.mu2_prior, sv)
    # descent direction of the prior term is exactly -mu/N
    assert torch.equal(-grad, -sv.detach() / 8)


# -- discriminative term ------------------------------------------------------


def test_discriminative_singleton_is_zero():
    table = SVectorTable(["a"], [3], 4, torch.float64)
    with torch.no_grad():
        table.vectors.normal_()
    q = DiagGaussian(torch.randn(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    assert float(discriminative_loss(q, "a", table, CFG).detach()) == 0.0


def test_discriminative_matches_direct_softmax():
    table = SVectorTable(["a", "b", "c"], [1, 1, 1], 2, torch.float64)
    with torch.no_grad():
        table.vectors.copy_(torch.tensor([[0.0, 0.0], [3.0, 0.0], [0.0, -3.0]]))
    q = DiagGaussian(torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    got = float(discriminative_loss(q, "a", table, CFG).detach())
    logits = [0.0, -9 / 0.5, -9 / 0.5]
    expected = -(logits[0] - math.log(sum(math.exp(v) for v in logits)))
    assert got == pytest.approx(expected, abs=1e-14)
    assert got < math.log(3)


def test_discriminative_unknown_id_and_disabled():
    table = SVectorTable(["a"], [1], 2)
    with pytest.raises(KeyError):
        discriminative_loss(torch.zeros(2), "zz", table, CFG)
    cfg = ModelConfig(feature_dim=3, segment_len=4, latent_dim_z1=2, latent_dim_z2=2, alpha_dis=0.0)
    from dsv.training import SegmentBatch, segment_loss
    seg = ideal_segment()
    batch = SegmentBatch.from_segments([seg], dtype=torch.float32)
    bd = segment_loss(SeqVAE(cfg), batch, table, noise=None)
    assert float(bd.discriminative) == 0.0


def test_svector_table_invariants():
    with pytest.raises(ContractViolation):
        SVectorTable(["a", "b"], [1, 0], 2)
    with pytest.raises(ContractViolation):
        SVectorTable(["a", "a"], [1, 1], 2)
    t = SVectorTable(["a", "b"], [2, 5], 3)
    assert torch.count_nonzero(t.vectors) == 0
    back = SVectorTable.from_dict(t.to_dict())
    assert back.sequence_ids == ["a", "b"] and torch.equal(back.n_segments, t.n_segments)


# -- s-vector inference --------------------------------------------------------


def test_svector_closed_form_examples():
    v = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    assert torch.allclose(svector_from_means(v.expand(10, 3), 0.25), v * 10 / 10.25, atol=0, rtol=1e-15)
    assert torch.allclose(svector_from_means(v[None], 0.25), v / 1.25, rtol=1e-15)
    assert torch.allclose(svector_from_means(v.expand(100000, 3), 0.25), v, atol=1e-5)


def test_infer_svector_uses_encoder_means():
    cfg = ModelConfig(feature_dim=3, segment_len=4, latent_dim_z1=2, latent_dim_z2=2, hidden_units=5, dtype="float64")
    model = SeqVAE(cfg)
    segs = segment_sequence(SequenceRecord("s", "k", np.random.default_rng(0).standard_normal((20, 3))), 4, 4, 3)
    means = torch.stack([model.encode_z2(torch.as_tensor(s.frames)).mean for s in segs])
    assert torch.allclose(infer_svector(segs, model), means.sum(0) / (len(segs) + 0.25), rtol=1e-12)
    with pytest.raises(ContractViolation):
        infer_svector([], model)


# -- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("variant", ["fhvae", "apc-enc2-dec2"])
def test_gradients_match_finite_differences(variant):
    worst, count = max_relative_error(variant, seed=4)
    assert count > 1000 and worst < 1e-4


# -- training loop ---------------------------------------------------------------


SMALL = dict(feature_dim=24, segment_len=20, latent_dim_z1=4, latent_dim_z2=4, hidden_units=16)


@pytest.fixture(scope="module")
def small_corpus():
    recs = make_synthetic_corpus(n_speakers=6, sequences_per_speaker=3, frames_per_sequence=100, n_test_speakers=2)
    return [r for r in recs if r.split == "train"], [r for r in recs if r.split == "dev"]


def test_resume_equals_uninterrupted(tmp_path, small_corpus):
    train, dev = small_corpus
    cfg = ModelConfig(seed=3, **SMALL)
    full = fit(train, dev, cfg, TrainOptions(max_epochs=4, batch_size=8, out_dir=str(tmp_path / "a")))
    fit(train, dev, cfg, TrainOptions(max_epochs=2, batch_size=8, out_dir=str(tmp_path / "b")))
    resumed = fit(train, dev, cfg, TrainOptions(max_epochs=4, batch_size=8, out_dir=str(tmp_path / "b")),
                  resume_from=tmp_path / "b" / "checkpoints" / "latest.ckpt")
    for (k, a), (_, b) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), k
    assert torch.equal(full.table.vectors, resumed.table.vectors)
    assert full.history == resumed.history
    log_a = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    log_b = (tmp_path / "b" / "train_log.jsonl").read_text().splitlines()
    assert log_a == log_b


def test_training_moves_every_svector_and_lowers_loss(tmp_path, small_corpus):
    train, dev = small_corpus
    state = fit(train, dev, ModelConfig(seed=0, **SMALL), TrainOptions(max_epochs=5, batch_size=8))
    assert (state.table.vectors.norm(dim=1) > 0).all()
    assert state.history[0]["epoch"] == 0
    train_hist = [h for h in state.history if h["split"] == "train"]
    assert train_hist[-1]["total"] < train_hist[0]["total"]
    assert {"recon", "prediction", "kl_z1", "kl_z2", "mu2_prior", "discriminative"} <= set(train_hist[-1])


def test_early_stopping_and_best_checkpoint(tmp_path, small_corpus):
    train, dev = small_corpus
    state = fit(train, dev, ModelConfig(seed=1, **SMALL),
                TrainOptions(max_epochs=50, batch_size=8, patience=1, learning_rate=0.5, out_dir=str(tmp_path)))
    assert state.stopped_early and state.epoch < 50
    assert state.bad_epochs >= 1
    from dsv.model import load_checkpoint
    best = load_checkpoint(tmp_path / "checkpoints" / "best.ckpt")
    assert best["best_epoch"] == state.best_epoch


def test_divergence_dumps_batch(tmp_path, small_corpus):
    from dsv.errors import TrainingDivergedError
    train, dev = small_corpus
    with pytest.raises(TrainingDivergedError) as info:
        fit(train, [], ModelConfig(seed=0, **SMALL),
            TrainOptions(max_epochs=20, batch_size=8, learning_rate=1e12, out_dir=str(tmp_path)))
    assert info.value.dump_path is not None and info.value.dump_path.exists()
