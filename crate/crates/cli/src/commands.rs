use std::collections::HashSet;
use std::error::Error as StdError;
use std::path::{Path, PathBuf};

use clap::Parser;
use gated_res2net::blocks::{gate_param_delta, model_param_count, BackboneConfig, Model};
use gated_res2net::config::KvMap;
use gated_res2net::corpus::{attack_map, parse_protocol, synth_corpus, Checkpoint, SynthConfig};
use gated_res2net::diagnostics::{block_check, primitive_checks, CheckResult};
use gated_res2net::error::Error;
use gated_res2net::features::{extract_files, CqtConfig};
use gated_res2net::metrics::{read_scores, write_scores, MetricsReport, ScoreRecord, TdcfParams};
use gated_res2net::tensor::Tensor;
use gated_res2net::training::{feature_path, load_examples, score_batch, train, AdamConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{manifest_path, now, RunManifest};
use crate::{
    Cli, Command, EvaluateArgs, ExtractArgs, GradCheckArgs, MetricsArgs, ParamCountArgs, ReplayArgs, SynthArgs,
    TrainArgs,
};

type CmdResult = Result<(), Box<dyn StdError>>;

/// Runs `cmd`. `pinned`, when present, is a resolved configuration from a
/// manifest and overrides every other layer.
pub fn run(cmd: Command, argv: &[String], pinned: Option<&KvMap>) -> CmdResult {
    match cmd {
        Command::SynthData(a) => synth_data(a, argv, pinned),
        Command::Extract(a) => extract(a, argv, pinned),
        Command::Train(a) => train_cmd(a, argv, pinned),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::Metrics(a) => metrics(a, argv),
        Command::ParamCount(a) => param_count(a, pinned),
        Command::GradCheck(a) => grad_check(a),
        Command::Replay(a) => replay(a),
    }
}

/// Built-in defaults < config file < flags < pinned. Keys outside `allowed`
/// are rejected.
fn layered(file: Option<&Path>, flags: KvMap, pinned: Option<&KvMap>, allowed: &KvMap) -> Result<KvMap, Error> {
    let mut kv = match file {
        Some(f) => KvMap::load(f)?,
        None => KvMap::default(),
    };
    kv = kv.merged(&flags);
    if let Some(p) = pinned {
        kv = kv.merged(p);
    }
    if let Some(bad) = kv.keys().find(|k| allowed.get(k).is_none()) {
        let known: Vec<&str> = allowed.keys().collect();
        return Err(Error::Config(format!("unknown setting `{bad}`; known settings: {}", known.join(", "))));
    }
    Ok(kv)
}

fn synth_data(a: SynthArgs, argv: &[String], pinned: Option<&KvMap>) -> CmdResult {
    let started = now();
    let mut flags = KvMap::default();
    if let Some(s) = a.seed {
        flags.set("seed", s);
    }
    let kv = layered(a.config.as_deref(), flags, pinned, &SynthConfig::default().to_kv())?;
    let cfg = SynthConfig::default().merge_kv(&kv)?;
    let out = synth_corpus(&cfg, &a.out)?;
    println!("wrote {} utterances to {}", out.trials.len(), out.wav_dir.display());
    RunManifest::new("synth-data", argv, &cfg.to_kv(), Some(cfg.seed), started)
        .result("utterances", out.trials.len())
        .write(&manifest_path(&a.out, true))?;
    Ok(())
}

fn extract(a: ExtractArgs, argv: &[String], pinned: Option<&KvMap>) -> CmdResult {
    let started = now();
    let mut flags = KvMap::default();
    if let Some(f) = a.fmin {
        flags.set("f_min", f);
    }
    if let Some(h) = a.hop {
        flags.set("hop", h);
    }
    let kv = layered(a.config.as_deref(), flags, pinned, &CqtConfig::default().to_kv())?;
    let cfg = CqtConfig::default().merge_kv(&kv)?;
    let list = std::fs::read_to_string(&a.wav_list)?;
    let base = a.wav_list.parent().unwrap_or(Path::new("")).to_path_buf();
    std::fs::create_dir_all(&a.out)?;
    let mut seen = HashSet::new();
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    for line in list.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let wav = base.join(line);
        let stem = wav
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("cannot name features for {line:?}")))?
            .to_string();
        if !seen.insert(stem.clone()) {
            return Err(Error::Config(format!("two inputs share the name `{stem}`")).into());
        }
        jobs.push((wav, feature_path(&a.out, &stem)));
    }
    let done = extract_files(&jobs, &cfg)?;
    let adjusted = done.iter().filter(|e| e.raw_frames != cfg.target_frames).count();
    println!(
        "extracted {} feature files ({} x {}) to {}; {adjusted} padded or truncated",
        done.len(),
        cfg.bins(),
        cfg.target_frames,
        a.out.display()
    );
    RunManifest::new("extract", argv, &cfg.to_kv(), None, started)
        .result("files", done.len())
        .result("frames_adjusted", adjusted)
        .write(&manifest_path(&a.out, true))?;
    Ok(())
}

fn training_keys() -> KvMap {
    BackboneConfig::default().to_kv().merged(&TrainConfig::default().to_kv()).merged(&AdamConfig::default().to_kv())
}

fn train_cmd(a: TrainArgs, argv: &[String], pinned: Option<&KvMap>) -> CmdResult {
    let started = now();
    let mut flags = KvMap::default();
    flags.set("arch", a.arch.name());
    if let Some(v) = a.epochs {
        flags.set("epochs", v);
    }
    if let Some(v) = a.lr {
        flags.set("lr", v);
    }
    if let Some(v) = a.seed {
        flags.set("seed", v);
    }
    if let Some(v) = a.batch_size {
        flags.set("batch_size", v);
    }
    if let Some(v) = a.target_dev_eer {
        flags.set("target_dev_eer", v);
    }
    let kv = layered(a.config.as_deref(), flags, pinned, &training_keys())?;
    let backbone = BackboneConfig::default().merge_kv(&kv)?;
    let tc = TrainConfig { checkpoint_dir: Some(a.out.clone()), ..TrainConfig::default() }.merge_kv(&kv)?;
    let ac = AdamConfig::default().merge_kv(&kv)?;

    let train_trials = parse_protocol(&a.protocols.join("train.txt"))?;
    let dev_trials = parse_protocol(&a.protocols.join("dev.txt"))?;
    let train_set = load_examples(&a.features, &train_trials)?;
    let dev_set = load_examples(&a.features, &dev_trials)?;
    log::info!("training {} on {} train / {} dev utterances", backbone.arch, train_set.len(), dev_set.len());
    let model = Model::<f32>::new(backbone.clone(), &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let params = model_param_count(&model);
    let outcome = train(model, &train_set, &dev_set, &tc, &ac)?;
    println!(
        "best epoch {} with dev EER {} ({} epochs run); checkpoint {}",
        outcome.best_epoch,
        outcome.best_dev_eer,
        outcome.log.len(),
        a.out.join("best.ckpt").display()
    );
    let resolved = backbone.to_kv().merged(&tc.to_kv()).merged(&ac.to_kv());
    RunManifest::new("train", argv, &resolved, Some(tc.seed), started)
        .result("params", params)
        .result("best_epoch", outcome.best_epoch)
        .result("best_dev_eer", outcome.best_dev_eer)
        .result("epochs_run", outcome.log.len())
        .write(&manifest_path(&a.out, true))?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, argv: &[String]) -> CmdResult {
    let started = now();
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let trials = parse_protocol(&a.protocol)?;
    let examples = load_examples(&a.features, &trials)?;
    let xs: Vec<&Tensor<f32>> = examples.iter().map(|e| &e.features).collect();
    let scores = score_batch(&model, &xs, a.batch_size)?;
    let records: Vec<ScoreRecord> =
        trials.iter().zip(scores).map(|(t, s)| ScoreRecord::new(t.trial_id.clone(), t.label, s)).collect();
    write_scores(&a.out, &records)?;
    println!("scored {} trials into {}", records.len(), a.out.display());
    let mut cfg = ck.config.to_kv();
    for key in ck.meta.keys() {
        cfg.set(&format!("checkpoint.{key}"), ck.meta.get(key).unwrap());
    }
    RunManifest::new("evaluate", argv, &cfg, None, started)
        .result("trials", records.len())
        .write(&manifest_path(&a.out, false))?;
    Ok(())
}

fn metrics(a: MetricsArgs, argv: &[String]) -> CmdResult {
    let started = now();
    let records = read_scores(&a.scores)?;
    let tdcf = a.tdcf_params.as_deref().map(TdcfParams::load).transpose()?;
    let attacks = match &a.attacks {
        Some(p) => Some(attack_map(&parse_protocol(p)?)),
        None => None,
    };
    let report = MetricsReport::compute(&records, tdcf.as_ref(), attacks.as_ref())?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        std::fs::write(out, &csv)?;
        let mut cfg = KvMap::default();
        if let Some(p) = &tdcf {
            let (c1, c2) = p.weights();
            cfg.set("tdcf.c1", c1);
            cfg.set("tdcf.c2", c2);
        }
        RunManifest::new("metrics", argv, &cfg, None, started)
            .result("eer", report.eer)
            .write(&manifest_path(out, false))?;
    }
    Ok(())
}

fn param_count(a: ParamCountArgs, pinned: Option<&KvMap>) -> CmdResult {
    let mut flags = KvMap::default();
    flags.set("arch", a.arch.name());
    let kv = layered(a.config.as_deref(), flags, pinned, &BackboneConfig::default().to_kv())?;
    let cfg = BackboneConfig::default().merge_kv(&kv)?;
    let model = Model::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("arch {}", cfg.arch);
    for (name, count) in model.param_breakdown() {
        println!("{name} {count}");
    }
    if let Some(kind) = cfg.arch.gate() {
        println!("gates {}", gate_param_delta(&cfg, kind));
    }
    println!("total {}", model_param_count(&model));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let mut failed = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        let mut results: Vec<CheckResult> = primitive_checks(seed)?;
        results.push(block_check(a.arch, seed)?);
        for r in results {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!("seed {seed} {:<20} max rel err {:.3e} {verdict}", r.name, r.max_rel_err);
            if !r.passed() {
                failed.push(format!("{} (seed {seed})", r.name));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn replay(a: ReplayArgs) -> CmdResult {
    let manifest = RunManifest::read(&a.manifest)?;
    let cli = Cli::try_parse_from(&manifest.argv)?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Config("a manifest cannot record a replay".into()).into());
    }
    run(cli.command, &manifest.argv, Some(&manifest.config_kv()))
}
