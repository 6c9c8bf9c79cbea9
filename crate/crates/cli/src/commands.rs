use std::collections::HashMap;
use std::path::Path;

use acanet::container::Container;
use acanet::data::{all_pairs, build_trials, generate_corpus, load_manifest, CorpusSpec};
use acanet::eval::{evaluate_with, TrialList, ZeroNormPolicy};
use acanet::frontend::{read_wav, save_features, Fbank, FbankConfig};
use acanet::model::{build_ablation, checkpoint_container, count_params, from_container, param_breakdown, AcaNet};
use acanet::training::{embed_all, extract_features, fit, FitPaths};
use anyhow::{bail, Context, Result};

use crate::config::{self, RunConfig};
use crate::ConfigArgs;

pub const EMBEDDINGS_KIND: &str = "embeddings";

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = config::load(args.config.as_deref(), &args.overrides)?;
    if let Some(v) = &args.variant {
        cfg.model = build_ablation(&cfg.model, v.parse()?)?;
    }
    Ok(cfg)
}

pub fn gen_data(spec: &CorpusSpec, n_trials: usize, target_fraction: f64, out: &Path) -> Result<()> {
    let corpus = generate_corpus(spec, out)?;
    let source = if corpus.test.is_empty() { &corpus.all } else { &corpus.test };
    let trials = if n_trials == 0 {
        all_pairs(source)
    } else {
        build_trials(source, n_trials, target_fraction, spec.seed)?
    };
    let trials_path = out.join("trials.txt");
    trials.save(&trials_path)?;
    for split in ["manifest", "train", "dev", "test"] {
        println!("{split}: {}", corpus.manifest_path(split).display());
    }
    println!("trials: {} ({} pairs, {} target)", trials_path.display(), trials.len(), trials.n_target());
    Ok(())
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = run_config(args)?;
    let train_path = cfg
        .data
        .train_manifest
        .as_deref()
        .context("data.train_manifest is not set")?;
    let train = load_manifest(train_path)?;
    let dev = match &cfg.data.dev_manifest {
        Some(p) => Some(load_manifest(p)?),
        None => None,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    println!("parameters: {}", count_params(&cfg.model));
    let paths = FitPaths::in_dir(out);
    let result = fit::<f32>(&train, dev.as_deref(), &cfg.model, &cfg.frontend, &cfg.train, &paths)?;
    for (epoch, eer) in result.dev_eer.iter().enumerate() {
        match eer {
            Some(e) => println!("epoch {} dev EER {:.2}%", epoch + 1, 100.0 * e),
            None => println!("epoch {}", epoch + 1),
        }
    }
    // keep the frontend settings next to the weights
    let mut c = checkpoint_container(&result.best)?;
    c.meta.insert("frontend".into(), serde_json::to_value(&cfg.frontend)?);
    c.save(&paths.checkpoint)?;
    println!("checkpoint: {} (epoch {})", paths.checkpoint.display(), result.best_epoch + 1);
    println!("metrics: {}", paths.metrics.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(AcaNet<f32>, FbankConfig)> {
    let c = Container::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let net = from_container(&c, path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let fbank = match c.meta.get("frontend") {
        Some(v) => serde_json::from_value(v.clone()).context("bad frontend record in checkpoint")?,
        None => FbankConfig {
            n_filters: net.config().n_filters,
            ..FbankConfig::default()
        },
    };
    Ok((net, fbank))
}

pub fn embed(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (net, fbank) = load_model(checkpoint)?;
    let entries = load_manifest(manifest)?;
    let feats = extract_features::<f32>(&entries, &fbank)?;
    let emb = embed_all(&net, &entries, &feats)?;
    let e = net.config().embedding_size;
    let mut c = Container::new(EMBEDDINGS_KIND);
    c.meta.insert("embedding_size".into(), e.into());
    for entry in &entries {
        c.push(entry.utt_id.clone(), &[e], emb[&entry.utt_id].clone())?;
    }
    c.save(out)?;
    println!("{} embeddings of size {e} -> {}", entries.len(), out.display());
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let c = Container::load(path)?;
    if c.kind != EMBEDDINGS_KIND {
        bail!("{}: expected an embeddings container, found {:?}", path.display(), c.kind);
    }
    Ok(c.arrays().iter().map(|a| (a.name.clone(), a.data.clone())).collect())
}

pub fn score(
    embeddings: &Path,
    trials: &Path,
    report: Option<&Path>,
    allow_zero_norm: bool,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = run_config(args)?;
    let emb = load_embeddings(embeddings)?;
    let trials = TrialList::load(trials)?;
    let policy = if allow_zero_norm {
        ZeroNormPolicy::ScoreZero
    } else {
        ZeroNormPolicy::Error
    };
    let r = evaluate_with(&trials, &emb, &cfg.eval, policy)?;
    println!("EER {:.2}% minDCF {:.3}", 100.0 * r.eer, r.min_dcf);
    if let Some(p) = report {
        std::fs::write(p, serde_json::to_string_pretty(&r)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn params(args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args)?;
    let rows = param_breakdown(&cfg.model);
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, n) in &rows {
        println!("{name:<width$}  {n}");
    }
    println!("{:<width$}  {}", "total", count_params(&cfg.model));
    Ok(())
}

pub fn fbank(wav: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = run_config(args)?;
    let w = read_wav(wav)?;
    let f = Fbank::new(cfg.frontend.clone(), w.sample_rate)?.compute::<f32>(&w)?;
    let (c, t) = f.values.dims2()?;
    let id = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    save_features(out, &[(id, f)])?;
    println!("{c} x {t} features -> {}", out.display());
    Ok(())
}
