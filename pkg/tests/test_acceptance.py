"""Acceptance suite: one test per criterion, property-based on the synthetic
corpus plus numerical oracles. Each test prints a single pass line once its
assertions hold."""

import shutil
import struct

import numpy as np
import pytest
import torch
from scipy import stats as sstats
from torch.func import functional_call

from saic.dataset import (Manifest, SynthCorpusConfig, generate_synthetic_corpus,
                          make_splits)
from saic.evaluation import (OracleConfig, disentanglement_report,
                             eval_anonymization, train_oracle)
from saic.features import FeatureConfig
from saic.inference import AnonymizationRequest, anonymize, reconstruct
from saic.losses import (PerceptualNet, Stage1Config, Stage2Config,
                         embedding_losses, grad_check, perceptual_loss,
                         stage1_loss, stage2_total_loss)
from saic.model import ModelConfig, adain, build_models, instance_norm
from saic.training import (Checkpoint, CheckpointError, init_latents,
                           load_checkpoint, load_crops, prepare_features,
                           save_checkpoint, train_stage1, train_stage2)


def _ok(n, msg):
    print(f"[criterion {n}] PASS — {msg}")


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradient_correctness():
    torch.manual_seed(0)
    mcfg = ModelConfig(mel_bins=16, frames_per_crop=12, d_c=8, d_s=8,
                       width=16, kernel_size=3, n_decoder_blocks=2)
    ce, se, fd = build_models(mcfg, seed=13)
    net = PerceptualNet(mcfg.mel_bins, seed=14).double()
    for m in (ce, se, fd):
        m.double()
    cfg = Stage2Config(lambda_1=1.0, lambda_2=1.0, lambda_3=1.0)
    g = torch.Generator().manual_seed(15)
    target = torch.randn(2, mcfg.mel_bins, mcfg.frames_per_crop,
                         generator=g, dtype=torch.float64)
    ec_t = torch.randn(2, mcfg.d_c, generator=g, dtype=torch.float64)
    es_t = torch.randn(2, mcfg.d_s, generator=g, dtype=torch.float64)

    specs = []  # (module, param name, shape, numel)
    for tag, mod in (("ce", ce), ("se", se), ("fd", fd)):
        for name, p in mod.named_parameters():
            specs.append((tag, mod, name, p.shape, p.numel()))

    def unflatten(x):
        dicts = {"ce": {}, "se": {}, "fd": {}}
        off = 0
        for tag, _, name, shape, numel in specs:
            dicts[tag][name] = x[off:off + numel].view(shape)
            off += numel
        return dicts

    def loss_fn(x):
        d = unflatten(x)
        e_cz = functional_call(ce, d["ce"], (target,))
        e_sz = functional_call(se, d["se"], (target,))
        l_ec, l_es = embedding_losses(ec_t, e_cz, es_t, e_sz)
        recon = functional_call(fd, d["fd"], (e_sz, e_cz))
        l_r2 = perceptual_loss(net, recon, target)
        return stage2_total_loss(cfg, l_ec, l_es, l_r2)

    x0 = np.concatenate([p.detach().numpy().ravel()
                         for _, mod, name, _, _ in specs
                         for p in [dict(mod.named_parameters())[name]]])
    # epsilon at the small end of the supported range: the adaptive-IN sites
    # have large higher-order curvature when a channel variance is tiny, and
    # truncation error shrinks with epsilon while fd noise stays below atol
    err = grad_check(loss_fn, x0, epsilon=1e-7, probes=64, seed=0, atol=1e-6)
    assert err < 1e-3, f"max relative gradient error {err:.3e}"
    _ok(1, f"stage-2 loss max relative gradient error {err:.2e} < 1e-3")


# ---------------------------------------------------------------------------
# 2. normalization algebra


def test_criterion_2_normalization_algebra():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        x = torch.randn(3, 32, generator=g) * 4 + 2
        out = instance_norm(x, epsilon=1e-8)
        assert out.mean(dim=-1).abs().max() < 1e-5
        scale = torch.ones(3)
        shift = torch.zeros(3)
        assert torch.equal(adain(x, scale, shift, epsilon=1e-8),
                           instance_norm(x, epsilon=1e-8))
    _ok(2, "instance-norm zero-mean and adain(x,1,0) == instance_norm(x), 1000 cases")


# ---------------------------------------------------------------------------
# 3. loss identities


def test_criterion_3_loss_identities():
    mcfg = ModelConfig(mel_bins=12, frames_per_crop=10, d_c=8, d_s=8,
                       width=16, kernel_size=3, n_decoder_blocks=2)
    _, _, fd = build_models(mcfg, seed=0)
    net = PerceptualNet(mcfg.mel_bins, seed=1)
    g = torch.Generator().manual_seed(2)
    a = torch.randn(1, mcfg.mel_bins, mcfg.frames_per_crop, generator=g)
    assert float(perceptual_loss(net, a, a.clone())) == 0.0

    # weighted-sum linearity: zeroing one lambda removes exactly that gradient
    t1 = torch.tensor(1.0, requires_grad=True)
    t2 = torch.tensor(2.0, requires_grad=True)
    t3 = torch.tensor(3.0, requires_grad=True)
    cfg = Stage2Config(lambda_1=1.0, lambda_2=0.0, lambda_3=1.0)
    total = stage2_total_loss(cfg, t1 * t1, t2 * t2, t3 * t3)
    g1, g2, g3 = torch.autograd.grad(total, [t1, t2, t3], allow_unused=True)
    assert float(g1) == pytest.approx(2.0)
    assert g2 is None or float(g2) == 0.0
    assert float(g3) == pytest.approx(6.0)

    # stage-1 total at sigma=0, lambda=0 coincides with the stage-2
    # reconstruction term
    c = torch.randn(2, mcfg.d_c, generator=g)
    s = torch.randn(2, mcfg.d_s, generator=g)
    tgt = torch.randn(2, mcfg.mel_bins, mcfg.frames_per_crop, generator=g)
    with torch.no_grad():
        total1, _ = stage1_loss(net, fd, c, s, tgt, torch.zeros_like(c), 0.0)
        from saic.losses import stage2_reconstruction_loss
        l_r2 = stage2_reconstruction_loss(net, fd, s, c, tgt)
    assert float(total1) == pytest.approx(float(l_r2))
    _ok(3, "perceptual self-distance 0, lambda-zeroing isolates gradients, "
           "stage-1 == stage-2 reconstruction at sigma=0, lambda=0")


# ---------------------------------------------------------------------------
# 4. stage-1 memorization oracle


def test_criterion_4_memorization_oracle(tmp_path):
    scfg = SynthCorpusConfig(num_speakers=2, utterances_per_speaker=2, seed=17)
    m = generate_synthetic_corpus(scfg, tmp_path / "corpus")
    fcfg = FeatureConfig()
    m.feature_config_fingerprint = fcfg.fingerprint()
    stats = prepare_features(m, fcfg, tmp_path / "cache")
    crops = load_crops(m, "train", fcfg, stats, tmp_path / "cache")
    u = m.utterance_ids("train")[0]
    r = m.record(u)
    single = Manifest(records=[r], speakers=[r.speaker_id],
                      feature_config_fingerprint=m.feature_config_fingerprint)
    mcfg = ModelConfig()
    cfg = Stage1Config(sigma=0.0, lambda_noise=0.0, epochs=200, batch_size=1,
                       lr_latents=1.0, lr_decoder=0.02, seed=7)
    ckpt = train_stage1(single, {u: crops[u]}, fcfg, stats, mcfg, cfg)
    log = ckpt.training_log
    ratio = log[-1]["recon"] / log[0]["recon"]
    assert ratio < 0.10, f"reconstruction only reached {ratio:.3f} of initial"
    _ok(4, f"single-utterance reconstruction fell to {ratio:.1%} of initial "
           f"within {cfg.epochs} epochs")


# ---------------------------------------------------------------------------
# 5 + 6. end-to-end desk-scale run


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Full pipeline on the 8x20 synthetic corpus with package defaults."""
    wd = tmp_path_factory.mktemp("reference")
    scfg = SynthCorpusConfig()
    m = generate_synthetic_corpus(scfg, wd / "corpus")
    m = make_splits(m, 0.2, seed=100)
    fcfg = FeatureConfig()
    m.feature_config_fingerprint = fcfg.fingerprint()
    stats = prepare_features(m, fcfg, wd / "cache")
    center = load_crops(m, "train", fcfg, stats, wd / "cache", policy="center")
    start = load_crops(m, "train", fcfg, stats, wd / "cache", policy="start")
    test_crops = load_crops(m, "test", fcfg, stats, wd / "cache")
    mcfg = ModelConfig()
    ck1 = train_stage1(m, center, fcfg, stats, mcfg, Stage1Config())
    ck2 = train_stage2(m, center, ck1, Stage2Config())
    train_crops = {u: [center[u], start[u]] for u in center}
    oracle = train_oracle(m, train_crops, test_crops, OracleConfig())
    return m, fcfg, stats, mcfg, ck1, ck2, oracle


def test_criterion_5_end_to_end_identification(reference_run):
    m, fcfg, stats, mcfg, ck1, ck2, oracle = reference_run
    assert oracle.holdout_accuracy >= 0.95  # (a) oracle gate

    report = eval_anonymization(ck2, oracle, m, pairs=100, seed=77)
    assert report.target_top1 >= 0.80, f"target_top1 {report.target_top1}"
    assert report.source_top1 <= 0.10, f"source_top1 {report.source_top1}"

    # (c) untrained-checkpoint control stays at chance
    untrained_models = build_models(mcfg, seed=12345)
    ce0, se0, fd0 = untrained_models
    control = Checkpoint(
        stage="stage2", feature_config=fcfg, mel_stats=stats, model_config=mcfg,
        decoder_state=fd0.state_dict(),
        latents=init_latents(m, mcfg.d_c, mcfg.d_s, seed=1),
        perceptual_seed=0, manifest_fingerprint=m.fingerprint(),
        content_encoder_state=ce0.state_dict(),
        speaker_encoder_state=se0.state_dict())
    ctrl = eval_anonymization(control, oracle, m, pairs=200, seed=78)
    lo, hi = sstats.binom.interval(0.99, 200, 1.0 / 8)
    hits = round(ctrl.target_top1 * 200)
    assert lo <= hits <= hi, f"control hits {hits} outside [{lo}, {hi}]"
    _ok(5, f"oracle {oracle.holdout_accuracy:.3f}, target_top1 "
           f"{report.target_top1:.2f}, source_top1 {report.source_top1:.2f}, "
           f"control {hits}/200 within 99% band [{lo:.0f}, {hi:.0f}]")


def test_criterion_6_disentanglement(reference_run):
    m, _, _, _, _, ck2, _ = reference_run
    rep = disentanglement_report(ck2, m, k=3)
    se_acc = rep["speaker_knn_acc_on_speaker_emb"]
    ce_acc = rep["speaker_knn_acc_on_content_emb"]
    bound = rep["chance_level"] + 0.15
    assert se_acc >= 0.90, f"SE k-NN accuracy {se_acc}"
    assert ce_acc <= bound, f"CE k-NN accuracy {ce_acc} > {bound}"
    _ok(6, f"SE k-NN {se_acc:.2f} >= 0.90, CE k-NN {ce_acc:.2f} <= "
           f"chance+0.15 = {bound:.3f}")


# ---------------------------------------------------------------------------
# 7. determinism & serialization


def test_criterion_7_determinism_and_serialization(tmp_path):
    def pipeline(run_dir):
        scfg = SynthCorpusConfig(num_speakers=3, utterances_per_speaker=4,
                                 duration_s=1.5, seed=9)
        m = generate_synthetic_corpus(scfg, run_dir / "corpus")
        m = make_splits(m, 0.25, seed=10)
        fcfg = FeatureConfig()
        m.feature_config_fingerprint = fcfg.fingerprint()
        stats = prepare_features(m, fcfg, run_dir / "cache")
        crops = load_crops(m, "train", fcfg, stats, run_dir / "cache")
        mcfg = ModelConfig(d_c=8, d_s=8, width=16, kernel_size=3,
                           n_decoder_blocks=2)
        ck1 = train_stage1(m, crops, fcfg, stats, mcfg,
                           Stage1Config(epochs=3, batch_size=8, seed=7))
        ck2 = train_stage2(m, crops, ck1, Stage2Config(epochs=2, seed=11))
        save_checkpoint(ck1, run_dir / "s1.bin")
        save_checkpoint(ck2, run_dir / "s2.bin")
        return ((run_dir / "s1.bin").read_bytes(),
                (run_dir / "s2.bin").read_bytes())

    # same path both times so manifest audio paths (hashed into the
    # fingerprint) match; the second run recreates everything from scratch
    run_dir = tmp_path / "run"
    first = pipeline(run_dir)
    shutil.rmtree(run_dir)
    second = pipeline(run_dir)
    assert first[0] == second[0] and first[1] == second[1]

    # round-trip losslessness
    loaded = load_checkpoint(run_dir / "s2.bin")
    save_checkpoint(loaded, run_dir / "s2_again.bin")
    assert (run_dir / "s2_again.bin").read_bytes() == second[1]

    # truncation is rejected via the payload checksum
    (run_dir / "trunc.bin").write_bytes(second[1][:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(run_dir / "trunc.bin")
    _ok(7, "repeated pipeline bit-identical, round-trip lossless, "
           "truncated checkpoint rejected")


# ---------------------------------------------------------------------------
# 8. degenerate-swap identity


def test_criterion_8_degenerate_swap(small_stage2, tmp_path):
    _, ck2, m = small_stage2
    path = m.record(m.utterance_ids("test")[0]).audio_path
    req = AnonymizationRequest(content_audio=path, identity_audio=path,
                               checkpoint=ck2, griffin_lim_iterations=2)
    synth, _ = anonymize(req)
    recon = reconstruct(ck2, path)
    assert np.array_equal(synth.values, recon.values)
    _ok(8, "anonymize(content==identity) equals reconstruct exactly")
