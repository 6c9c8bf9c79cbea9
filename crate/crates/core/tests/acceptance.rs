//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use acanet::data::{all_pairs, generate_corpus, CorpusSpec, ManifestEntry};
use acanet::eval::{compute_eer, compute_min_dcf, evaluate_with, DcfParams, ScoreSet, ZeroNormPolicy};
use acanet::frontend::FbankConfig;
use acanet::model::{
    aca_sub_block, build_ablation, count_params, latent_sub_block, load_checkpoint, mla_block, save_checkpoint,
    tdnn_block, AblationVariant, AcaNet, DropoutCtx, ModelConfig, PaddedBatch,
};
use acanet::numerics::{
    grad_check, multi_head_attention, AttentionSpec, BatchNormState, GradCheckOptions, Graph, MhaWeights, Mode,
    ScaleConvention, Tensor, Var,
};
use acanet::rng::{rng_for, sub_seed};
use acanet::training::{aam_loss, embed_all, extract_features, fit, AamHead, FitPaths, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn relative(a: usize, target: f64) -> f64 {
    (a as f64 - target).abs() / target
}

fn param_counts() -> Outcome {
    let t0 = Instant::now();
    let full_cfg = ModelConfig::default();
    let full = count_params(&full_cfg);
    let shared = count_params(&build_ablation(&full_cfg, AblationVariant::WeightSharing).unwrap());
    let no_mla = count_params(&build_ablation(&full_cfg, AblationVariant::NoMla).unwrap());
    let ratio = shared as f64 / full as f64;
    let elapsed = t0.elapsed();
    check(
        relative(full, 3.6e6) <= 0.15
            && relative(shared, 2.0e6) <= 0.15
            && (0.50..=0.62).contains(&ratio)
            && no_mla < full
            && elapsed < Duration::from_secs(1),
        format!("full {full}, weight_sharing {shared} (ratio {ratio:.3}), no_mla {no_mla}, {elapsed:?}"),
    )
}

fn pooling_replacement() -> Outcome {
    let cfg = ModelConfig::default();
    let net = AcaNet::<f32>::new(cfg.clone(), 7).unwrap();
    let mut lens = Vec::new();
    for t in [10usize, 98, 500, 2000] {
        let x = Tensor::from_fn(&[cfg.n_filters, t], |i| ((i as f32 * 0.618).fract() - 0.5) * 3.0);
        lens.push((t, net.embed_tensor(&x).unwrap().len()));
    }
    // ACA sub-block alone keeps the C × E latent shape
    let mut block_shapes = Vec::new();
    let spec = net.attention_spec().unwrap();
    for t in [10usize, 98, 500, 2000] {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let feats = g.constant(Tensor::from_fn(&[cfg.channels, t], |i| (i as f32 * 0.37).fract() - 0.5));
        let out = aca_sub_block(
            &mut g,
            vars.latent,
            feats,
            None,
            &vars.mla.aca,
            &spec,
            None,
            &mut DropoutCtx::<ChaCha8Rng>::off(),
        )
        .unwrap();
        block_shapes.push(g.shape(out).to_vec());
    }
    let ok = lens.iter().all(|&(_, n)| n == cfg.embedding_size)
        && block_shapes.iter().all(|s| s == &[cfg.channels, cfg.embedding_size]);
    check(ok, format!("embedding lengths {lens:?}, sub-block shapes {block_shapes:?}"))
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        embedding_size: 4,
        ffn_size: 16,
        n_latent_blocks: 2,
        num_heads: 2,
        dropout_p: 0.0,
        n_filters: 6,
        ..ModelConfig::default()
    }
}

fn probe(g: &mut Graph<f64>, y: Var) -> acanet::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7 % 11) as f64 - 4.0) / 3.0);
    let p = g.mul_const(y, w)?;
    Ok(g.sum(p))
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = toy_config();
    let net = AcaNet::<f64>::new(cfg.clone(), 11).unwrap();
    let spec = net.attention_spec().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = 16;
    let x = random(&[cfg.n_filters, t], &mut rng);
    let x2 = random(&[cfg.n_filters, 11], &mut rng);
    let h = random(&[cfg.channels, t], &mut rng);
    let posenc = acanet::frontend::sinusoidal_pos_encoding::<f64>(t, cfg.channels).unwrap();
    let slots: Vec<Tensor<f64>> = net.params().slots().to_vec();
    let opts = GradCheckOptions::default();
    let mut results: Vec<(&str, f64)> = Vec::new();

    // every check differentiates with respect to the full parameter list plus
    // the block input where one exists
    let with_input = |extra: &Tensor<f64>| {
        let mut v = slots.clone();
        v.push(extra.clone());
        v
    };

    let r = grad_check(
        |g, v| {
            let nv = net.vars_from_slots(v[..v.len() - 1].to_vec())?;
            let mut bn = BatchNormState::standard(cfg.channels);
            let y = tdnn_block(g, v[v.len() - 1], &nv.tdnn, &mut bn, Mode::Train, None)?;
            probe(g, y)
        },
        &with_input(&x),
        opts,
    )
    .unwrap();
    results.push(("tdnn", r.max_rel_error()));

    let r = grad_check(
        |g, v| {
            let nv = net.vars_from_slots(v[..v.len() - 1].to_vec())?;
            let y = aca_sub_block(
                g,
                nv.latent,
                v[v.len() - 1],
                Some(&posenc),
                &nv.mla.aca,
                &spec,
                None,
                &mut DropoutCtx::<ChaCha8Rng>::off(),
            )?;
            probe(g, y)
        },
        &with_input(&h),
        opts,
    )
    .unwrap();
    results.push(("aca_sub_block", r.max_rel_error()));

    let lat = random(&[cfg.channels, cfg.embedding_size], &mut rng);
    let r = grad_check(
        |g, v| {
            let nv = net.vars_from_slots(v[..v.len() - 1].to_vec())?;
            let y = latent_sub_block(g, v[v.len() - 1], &nv.mla.latent_blocks[0], &spec, &mut DropoutCtx::<ChaCha8Rng>::off())?;
            probe(g, y)
        },
        &with_input(&lat),
        opts,
    )
    .unwrap();
    results.push(("latent_sub_block", r.max_rel_error()));

    let r = grad_check(
        |g, v| {
            let nv = net.vars_from_slots(v[..v.len() - 1].to_vec())?;
            let mut bn = BatchNormState::standard(cfg.channels);
            let y = mla_block(
                g,
                nv.latent,
                v[v.len() - 1],
                Some(&posenc),
                &nv.mla,
                &cfg,
                &spec,
                None,
                &mut bn,
                Mode::Eval,
                &mut DropoutCtx::<ChaCha8Rng>::off(),
            )?;
            probe(g, y)
        },
        &with_input(&h),
        opts,
    )
    .unwrap();
    results.push(("mla_block", r.max_rel_error()));

    let head = AamHead::<f64>::new(3, cfg.embedding_size, 0.2, 30.0, 4).unwrap();
    let emb = Tensor::from_fn(&[4, cfg.embedding_size], |_| rng.gen_range(0.1..1.0));
    let r = grad_check(
        |g, v| aam_loss(g, v[0], &[0, 2, 1, 2], &head, v[1]),
        &[emb, head.weights.clone()],
        opts,
    )
    .unwrap();
    results.push(("aam_loss", r.max_rel_error()));

    let batch = PaddedBatch::new(&[&x, &x2]).unwrap();
    let r = grad_check(
        |g, v| {
            let mut local = net.clone();
            let nv = local.vars_from_slots(v.to_vec())?;
            let y = local.forward(g, &nv, &batch, Mode::Train, None::<&mut ChaCha8Rng>)?;
            probe(g, y)
        },
        &slots,
        opts,
    )
    .unwrap();
    results.push(("full_model", r.max_rel_error()));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let elapsed = t0.elapsed();
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst < 1e-4 && elapsed < Duration::from_secs(120), format!("{detail}; {elapsed:?}"))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let c = 8;
    let w = MhaWeights {
        wq: random(&[c, c], &mut rng),
        bq: random(&[c], &mut rng),
        wk: random(&[c, c], &mut rng),
        bk: random(&[c], &mut rng),
        wv: random(&[c, c], &mut rng),
        bv: random(&[c], &mut rng),
        wo: random(&[c, c], &mut rng),
        bo: random(&[c], &mut rng),
    };
    let spec = AttentionSpec::new(c, 2, ScaleConvention::PerHead, 0.0).unwrap();

    // softmax rows
    let mut g = Graph::new();
    let vars = w.bind(&mut g, false);
    let q = g.constant(random(&[5, c], &mut rng));
    let kv = g.constant(random(&[13, c], &mut rng));
    let out = multi_head_attention(&mut g, q, kv, kv, &vars, &spec, None, None::<&mut ChaCha8Rng>).unwrap();
    let mut row_err = 0.0f64;
    for hw in &out.weights {
        let a = g.value(*hw);
        let (r, _) = a.dims2().unwrap();
        for i in 0..r {
            row_err = row_err.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }

    // key-mask padding: model level, padded batch against the lone item
    let cfg = ModelConfig { dropout_p: 0.0, ..ModelConfig::desk() };
    let net = AcaNet::<f64>::new(cfg.clone(), 31).unwrap();
    let short = random(&[cfg.n_filters, 37], &mut rng);
    let long = random(&[cfg.n_filters, 90], &mut rng);
    let batched = net.embed_batch(&[&short, &long]).unwrap();
    let alone = net.embed_tensor(&short).unwrap();
    let mask_err = batched.row(0).iter().zip(&alone).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // frame permutation
    let x = random(&[cfg.n_filters, 50], &mut rng);
    let mut perm: Vec<usize> = (0..50).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
    let y = Tensor::from_fn2(cfg.n_filters, 50, |r, t| x.at(r, perm[t]));
    let diff = |net: &AcaNet<f64>| {
        let a = net.embed_tensor(&x).unwrap();
        let b = net.embed_tensor(&y).unwrap();
        a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let no_pe = build_ablation(&cfg, AblationVariant::NoPosenc).unwrap();
    let mut perm_err = 0.0f64;
    let mut perm_change = f64::INFINITY;
    let mut dead = 0;
    for seed in 0..8 {
        perm_err = perm_err.max(diff(&AcaNet::new(no_pe.clone(), 40 + seed).unwrap()));
        let net = AcaNet::new(cfg.clone(), 40 + seed).unwrap();
        // an all-zero ReLU output cannot respond to any input change
        if net.embed_tensor(&x).unwrap().iter().all(|v| *v == 0.0) {
            dead += 1;
            continue;
        }
        perm_change = perm_change.min(diff(&net));
    }
    check(
        row_err <= 1e-6 && mask_err <= 1e-5 && perm_err <= 1e-6 && dead < 8 && perm_change > 1e-3,
        format!(
            "softmax row error {row_err:.1e}, mask {mask_err:.1e}, permutation without posenc {perm_err:.1e}, \
             min change with posenc {perm_change:.2e} ({dead}/8 inits with all-zero output skipped)"
        ),
    )
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let params = DcfParams::default();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (s, t) = common::random_score_set(&mut rng, 1000);
        let set = ScoreSet::new(s.clone(), t.clone()).unwrap();
        let eer = compute_eer(&set).unwrap();
        let (dcf, _) = compute_min_dcf(&set, &params).unwrap();
        if eer != common::brute_eer(&s, &t) || dcf != common::brute_min_dcf(&s, &t, params.p_target) {
            mismatches += 1;
        }
    }
    let sep = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.1, 0.2, 0.3], vec![true, true, true, false, false, false]).unwrap();
    let sep_eer = compute_eer(&sep).unwrap().0;
    let sep_dcf = compute_min_dcf(&sep, &params).unwrap().0;
    let mut same_s = Vec::new();
    let mut same_t = Vec::new();
    for _ in 0..20000 {
        same_s.push(rng.gen_range(0.0..1.0));
        same_t.push(rng.gen_bool(0.5));
    }
    let same = ScoreSet::new(same_s, same_t).unwrap();
    let same_eer = compute_eer(&same).unwrap().0;
    let same_dcf = compute_min_dcf(&same, &params).unwrap().0;
    let elapsed = t0.elapsed();
    check(
        mismatches == 0
            && sep_eer == 0.0
            && sep_dcf == 0.0
            && (same_eer - 0.5).abs() < 0.02
            && (same_dcf - 1.0).abs() < 0.05
            && elapsed < Duration::from_secs(60),
        format!(
            "{mismatches}/1000 mismatches, separated EER {sep_eer} minDCF {sep_dcf}, \
             identical EER {same_eer:.4} minDCF {same_dcf:.4}, {elapsed:?}"
        ),
    )
}

struct DeskRun {
    untrained_eer: f64,
    trained_eer: f64,
    elapsed: Duration,
    checkpoint: std::path::PathBuf,
    net: AcaNet<f32>,
}

fn desk_options() -> TrainOptions {
    TrainOptions {
        epochs: 10,
        batch_size: 32,
        max_lr: 1e-3,
        seed: 0,
        ..TrainOptions::default()
    }
}

fn test_eer(net: &AcaNet<f32>, test: &[ManifestEntry], feats: &[Tensor<f32>]) -> f64 {
    let emb: HashMap<String, Vec<f32>> = embed_all(net, test, feats).unwrap();
    let trials = all_pairs(test);
    evaluate_with(&trials, &emb, &DcfParams::default(), ZeroNormPolicy::ScoreZero)
        .unwrap()
        .eer
}

fn desk_run(corpus: &acanet::data::Corpus, cfg: &ModelConfig, out: &Path) -> DeskRun {
    let fb = FbankConfig::default();
    let opts = desk_options();
    let test_feats: Vec<Tensor<f32>> = extract_features::<f32>(&corpus.test, &fb).unwrap();
    let untrained = AcaNet::<f32>::new(cfg.clone(), sub_seed(opts.seed, "model")).unwrap();
    let untrained_eer = test_eer(&untrained, &corpus.test, &test_feats);
    let t0 = Instant::now();
    let paths = FitPaths::in_dir(out);
    let r = fit::<f32>(&corpus.train, Some(&corpus.dev), cfg, &fb, &opts, &paths).unwrap();
    let elapsed = t0.elapsed();
    DeskRun {
        untrained_eer,
        trained_eer: test_eer(&r.best, &corpus.test, &test_feats),
        elapsed,
        checkpoint: paths.checkpoint,
        net: r.best,
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("parameter counts", param_counts()),
        ("pooling replacement", pooling_replacement()),
        ("gradient fidelity", gradient_fidelity()),
        ("attention invariants", attention_invariants()),
        ("metric oracle", metric_oracle()),
    ];

    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&CorpusSpec::default(), &dir.path().join("corpus")).unwrap();
    let desk = ModelConfig::desk();
    let full = desk_run(&corpus, &desk, &dir.path().join("full"));
    let again = desk_run(&corpus, &desk, &dir.path().join("again"));
    let no_pe = desk_run(
        &corpus,
        &build_ablation(&desk, AblationVariant::NoPosenc).unwrap(),
        &dir.path().join("no_posenc"),
    );
    let deterministic = again.net == full.net && again.trained_eer == full.trained_eer;
    results.push((
        "desk-scale learning",
        check(
            full.trained_eer < 0.15
                && (0.35..=0.65).contains(&full.untrained_eer)
                && deterministic
                && full.elapsed < Duration::from_secs(900),
            format!(
                "held-out EER trained {:.4}, untrained {:.4}, deterministic {deterministic}, {:?}",
                full.trained_eer, full.untrained_eer, full.elapsed
            ),
        ),
    ));
    results.push((
        "ablation direction",
        check(
            no_pe.trained_eer >= full.trained_eer,
            format!("no_posenc {:.4} vs full {:.4}", no_pe.trained_eer, full.trained_eer),
        ),
    ));

    let resaved = dir.path().join("resaved.acat");
    let loaded = load_checkpoint::<f32>(&full.checkpoint).unwrap();
    save_checkpoint(&loaded, &resaved).unwrap();
    let same_bytes = std::fs::read(&full.checkpoint).unwrap() == std::fs::read(&resaved).unwrap();
    let mut rng = rng_for(60, "acceptance");
    let x = Tensor::from_fn(&[desk.n_filters, 120], |_| rng.gen_range(-3.0f32..3.0));
    let same_emb = full.net.embed_tensor(&x).unwrap() == loaded.embed_tensor(&x).unwrap();
    results.push((
        "checkpoint round trip",
        check(same_bytes && same_emb, format!("identical bytes {same_bytes}, identical embeddings {same_emb}")),
    ));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}")
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
