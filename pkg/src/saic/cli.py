"""Single entry-point CLI: synth-data, prepare, train, anonymize, evaluate,
export-embeddings. All behavior is driven by a JSON config plus overrides."""

import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from .dataset import (DatasetError, Manifest, SynthCorpusConfig,
                      generate_synthetic_corpus, make_splits, scan_corpus)
from .features import FeatureConfig, FeatureError, save_mel_tensor
from .losses import Stage1Config, Stage2Config
from .model import ModelConfig
from .training import (Checkpoint, CheckpointError, TrainingError, load_checkpoint,
                       load_crops, prepare_features, save_checkpoint, train_stage1,
                       train_stage2)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING_PREREQ = 3
EXIT_RUNTIME = 4
EXIT_THRESHOLD = 5


def default_config() -> dict:
    return {
        "feature": asdict(FeatureConfig()),
        "data": {
            "corpus_root": None,
            "synth": asdict(SynthCorpusConfig()),
            "test_fraction": 0.2,
            "seed": 99,
        },
        "model": {"d_c": 64, "d_s": 64, "width": 128, "kernel_size": 5},
        "stage1": Stage1Config().to_json(),
        "stage2": Stage2Config().to_json(),
        "eval": {
            "pairs": 100,
            "k": 3,
            "seed": 77,
            "oracle": {"epochs": 60, "lr": 1e-3, "seed": 21, "accuracy_floor": 0.95},
            "thresholds": {"target_top1": 0.80, "source_top1": 0.10,
                           "se_knn": 0.90, "ce_knn_margin": 0.15},
        },
        "paths": {"workdir": "workdir"},
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise FeatureError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _apply_seed(cfg: dict, seed: int) -> None:
    cfg["data"]["synth"]["seed"] = seed
    cfg["data"]["seed"] = seed + 1
    cfg["stage1"]["seed"] = seed + 2
    cfg["stage2"]["seed"] = seed + 3
    cfg["eval"]["seed"] = seed + 4
    cfg["eval"]["oracle"]["seed"] = seed + 5


def load_config(path, sets, seed) -> dict:
    cfg = default_config()
    if path:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    for s in sets:
        _apply_set(cfg, s)
    if seed is not None:
        _apply_seed(cfg, seed)
    return cfg


def _feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig(**cfg["feature"])


def _model_config(cfg: dict) -> ModelConfig:
    f = _feature_config(cfg)
    return ModelConfig(mel_bins=f.mel_bins, frames_per_crop=f.frames_per_crop,
                       **cfg["model"])


def _paths(cfg: dict) -> dict:
    wd = Path(cfg["paths"]["workdir"])
    return {
        "workdir": wd,
        "corpus": wd / "corpus",
        "manifest": wd / "manifest.json",
        "cache": wd / "cache",
        "stage1": wd / "checkpoints" / "stage1.ckpt",
        "stage2": wd / "checkpoints" / "stage2.ckpt",
        "reports": wd / "reports",
    }


def _fail(category: str, message: str, code: int):
    click.echo(f"error:{category}: {message}", err=True)
    sys.exit(code)


def _require(path: Path, what: str):
    if not path.exists():
        _fail("missing-prerequisite", f"{what} not found at {path}", EXIT_MISSING_PREREQ)


def _load_manifest(cfg: dict) -> Manifest:
    p = _paths(cfg)
    _require(p["manifest"], "manifest (run `saic synth-data` or `saic prepare`)")
    return Manifest.load(p["manifest"])


def _prepared(cfg: dict):
    m = _load_manifest(cfg)
    fcfg = _feature_config(cfg)
    if m.feature_config_fingerprint != fcfg.fingerprint():
        _fail("missing-prerequisite",
              "feature cache is stale; run `saic prepare`", EXIT_MISSING_PREREQ)
    stats = prepare_features(m, fcfg, _paths(cfg)["cache"])
    return m, fcfg, stats


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config file; defaults are used for unset fields.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="Override a config leaf via dotted path.")
@click.option("--seed", type=int, default=None, help="Global seed override.")
@click.pass_context
def main(ctx, config_path, sets, seed):
    """Speech anonymization pipeline: synthesize data, train both stages,
    swap identities, and evaluate de-identification quality."""
    try:
        ctx.obj = load_config(config_path, sets, seed)
    except (FeatureError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        _fail("validation", str(e), EXIT_VALIDATION)


@main.command("synth-data")
@click.pass_obj
def cmd_synth_data(cfg):
    """Generate the synthetic speaker corpus and its train/test manifest."""
    p = _paths(cfg)
    try:
        scfg = SynthCorpusConfig(**cfg["data"]["synth"])
    except (DatasetError, TypeError) as e:
        _fail("validation", f"data.synth: {e}", EXIT_VALIDATION)
    stamp = p["workdir"] / "synth.fingerprint"
    blob = json.dumps({"synth": asdict(scfg), "test_fraction": cfg["data"]["test_fraction"],
                       "seed": cfg["data"]["seed"]}, sort_keys=True)
    fp = hashlib.sha256(blob.encode()).hexdigest()[:16]
    if stamp.exists() and stamp.read_text() == fp and p["manifest"].exists():
        click.echo("synth corpus up to date")
        return
    p["workdir"].mkdir(parents=True, exist_ok=True)
    m = generate_synthetic_corpus(scfg, p["corpus"])
    m = make_splits(m, cfg["data"]["test_fraction"], cfg["data"]["seed"])
    m.save(p["manifest"])
    stamp.write_text(fp)
    click.echo(f"wrote {len(m.records)} utterances for {len(m.speakers)} speakers")


@main.command("prepare")
@click.pass_obj
def cmd_prepare(cfg):
    """Index the corpus and cache normalized mel crops."""
    p = _paths(cfg)
    fcfg = _feature_config(cfg)
    try:
        if p["manifest"].exists():
            m = Manifest.load(p["manifest"])
        elif cfg["data"]["corpus_root"]:
            m = scan_corpus(cfg["data"]["corpus_root"])
            m = make_splits(m, cfg["data"]["test_fraction"], cfg["data"]["seed"])
        else:
            _fail("missing-prerequisite",
                  "no manifest and no data.corpus_root; run `saic synth-data` first",
                  EXIT_MISSING_PREREQ)
        already = m.feature_config_fingerprint == fcfg.fingerprint()
        m.feature_config_fingerprint = fcfg.fingerprint()
        prepare_features(m, fcfg, p["cache"])
        m.save(p["manifest"])
        click.echo("features up to date" if already else
                   f"cached features under fingerprint {fcfg.fingerprint()}")
    except (DatasetError, FeatureError) as e:
        _fail("validation", str(e), EXIT_VALIDATION)


@main.command("train")
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@click.pass_obj
def cmd_train(cfg, stage):
    """Train stage 1 (latent optimization) or stage 2 (encoders)."""
    p = _paths(cfg)
    m, fcfg, stats = _prepared(cfg)
    crops = load_crops(m, "train", fcfg, stats, p["cache"])
    mcfg = _model_config(cfg)
    p["stage1"].parent.mkdir(parents=True, exist_ok=True)
    try:
        if stage == "1":
            ckpt = train_stage1(m, crops, fcfg, stats, mcfg, Stage1Config(**cfg["stage1"]))
            save_checkpoint(ckpt, p["stage1"])
            click.echo(f"stage1 checkpoint -> {p['stage1']}")
        else:
            _require(p["stage1"], "stage1 checkpoint (run `saic train --stage 1`)")
            s1 = load_checkpoint(p["stage1"])
            ckpt = train_stage2(m, crops, s1, Stage2Config(**cfg["stage2"]))
            save_checkpoint(ckpt, p["stage2"])
            click.echo(f"stage2 checkpoint -> {p['stage2']}")
    except TrainingError as e:
        _fail("runtime", str(e), EXIT_RUNTIME)
    except (CheckpointError, TypeError) as e:
        _fail("validation", str(e), EXIT_VALIDATION)


@main.command("anonymize")
@click.option("--content", "content_path", required=True, type=click.Path(exists=True))
@click.option("--identity", "identity_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mel-out", type=click.Path(), default=None)
@click.option("--figure", type=click.Path(), default=None,
              help="Three-panel heatmap (original / reconstructed / synthesized).")
@click.pass_obj
def cmd_anonymize(cfg, content_path, identity_path, out_path, mel_out, figure):
    """Swap the content audio's identity for the identity audio's voiceprint."""
    from .inference import (AnonymizationRequest, InferenceError, anonymize,
                            reconstruct, _crops, three_panel_figure)
    p = _paths(cfg)
    _require(p["stage2"], "stage2 checkpoint (run `saic train --stage 2`)")
    try:
        ckpt = load_checkpoint(p["stage2"])
        req = AnonymizationRequest(content_audio=content_path,
                                   identity_audio=identity_path,
                                   checkpoint=ckpt, out_mel=mel_out, out_wav=out_path)
        synth, _ = anonymize(req)
        if figure:
            original = np.concatenate(_crops(content_path, ckpt), axis=1)
            recon = reconstruct(ckpt, content_path)
            three_panel_figure(figure, original, recon.values, synth.values)
        click.echo(f"synthesized audio -> {out_path}")
    except (CheckpointError, InferenceError, FeatureError) as e:
        _fail("runtime", str(e), EXIT_RUNTIME)


def _metrics_figure(path, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r[0] for r in rows]
    values = [r[1] for r in rows]
    thresholds = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    bars = ax.bar(range(len(rows)), values, color="#4477aa")
    for i, (t, kind) in enumerate(zip(thresholds, (r[3] for r in rows))):
        ax.plot([i - 0.4, i + 0.4], [t, t], color="#cc3311", lw=2)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("value")
    ax.set_title("anonymization evaluation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@main.command("evaluate")
@click.pass_obj
def cmd_evaluate(cfg):
    """Train the verification oracle, run identity swaps, report metrics."""
    from .evaluation import (EvaluationError, OracleConfig, disentanglement_report,
                             eval_anonymization, train_oracle)
    p = _paths(cfg)
    _require(p["stage2"], "stage2 checkpoint (run `saic train --stage 2`)")
    m, fcfg, stats = _prepared(cfg)
    try:
        ckpt = load_checkpoint(p["stage2"])
        center = load_crops(m, "train", fcfg, stats, p["cache"], policy="center")
        start = load_crops(m, "train", fcfg, stats, p["cache"], policy="start")
        train_crops = {u: [center[u], start[u]] for u in center}
        test_crops = load_crops(m, "test", fcfg, stats, p["cache"])
        ocfg = OracleConfig(**cfg["eval"]["oracle"])
        oracle = train_oracle(m, train_crops, test_crops, ocfg)
        report = eval_anonymization(ckpt, oracle, m, cfg["eval"]["pairs"],
                                    cfg["eval"]["seed"])
        report.disentanglement = disentanglement_report(ckpt, m, cfg["eval"]["k"])
    except EvaluationError as e:
        _fail("runtime", str(e), EXIT_RUNTIME)
    except CheckpointError as e:
        _fail("validation", str(e), EXIT_VALIDATION)

    th = cfg["eval"]["thresholds"]
    dis = report.disentanglement
    rows = [
        ("oracle_holdout_top1", report.oracle_holdout_accuracy,
         cfg["eval"]["oracle"]["accuracy_floor"], ">="),
        ("target_top1", report.target_top1, th["target_top1"], ">="),
        ("source_top1", report.source_top1, th["source_top1"], "<="),
        ("se_knn_accuracy", dis["speaker_knn_acc_on_speaker_emb"], th["se_knn"], ">="),
        ("ce_knn_accuracy", dis["speaker_knn_acc_on_content_emb"],
         dis["chance_level"] + th["ce_knn_margin"], "<="),
    ]
    p["reports"].mkdir(parents=True, exist_ok=True)
    report.save(p["reports"] / "eval.json")
    with open(p["reports"] / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "target", "content_utt", "identity_utt", "predicted"])
        for r in report.pairs:
            w.writerow([r["source"], r["target"], r["content_utt"],
                        r["identity_utt"], r["predicted"]])
    _metrics_figure(p["reports"] / "metrics.png", rows)

    all_ok = True
    click.echo(f"{'metric':<22}{'value':>8}{'threshold':>11}  status")
    for name, value, thr, op in rows:
        ok = value >= thr if op == ">=" else value <= thr
        all_ok &= ok
        click.echo(f"{name:<22}{value:>8.3f}{op:>3}{thr:>8.3f}  {'pass' if ok else 'FAIL'}")
    click.echo(f"report -> {p['reports'] / 'eval.json'}")
    if not all_ok:
        _fail("threshold", "one or more evaluation thresholds failed", EXIT_THRESHOLD)


@main.command("export-embeddings")
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
@click.pass_obj
def cmd_export_embeddings(cfg, split):
    """Write per-utterance CE/SE embeddings as CSV for external projection."""
    from .evaluation import export_embeddings
    p = _paths(cfg)
    _require(p["stage2"], "stage2 checkpoint (run `saic train --stage 2`)")
    m, fcfg, stats = _prepared(cfg)
    try:
        ckpt = load_checkpoint(p["stage2"])
        p["reports"].mkdir(parents=True, exist_ok=True)
        out = p["reports"] / "embeddings.csv"
        export_embeddings(ckpt, m, out, split=split)
        click.echo(f"embeddings -> {out.with_suffix('.speaker.csv')} and "
                   f"{out.with_suffix('.content.csv')}")
    except CheckpointError as e:
        _fail("validation", str(e), EXIT_VALIDATION)


if __name__ == "__main__":
    main()
