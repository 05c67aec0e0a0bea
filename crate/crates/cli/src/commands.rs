//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use limn_core::captioner::{generate_caption, Captioner, CaptionerConfig};
use limn_core::encoders::ImageEncoderConfig;
use limn_core::matcher::TransformerConfig;
use limn_core::selftrain::{
    mine_pairs, run_paradigm, IterationRecord, LimnPort, MiningStrategy, ParadigmConfig,
    StopReason,
};
use limn_core::synthio::io::{
    read_items, read_pairs, read_triplets, write_captions, write_items, write_pairs,
    write_triplets, write_vocab, CaptionRecord,
};
use limn_core::synthio::{
    make_triplets, queries_of, split_triplets, RenderSpec, Triplet, World,
};
use limn_core::trainer::{evaluate, score_triplet, train, GalleryCache, RecallReport, TrainConfig};
use limn_core::{Ablation, Checkpoint, LimnConfig, LimnModel, LossConfig};

use crate::args::*;
use crate::settings::{parse_ks, Settings};

const WORLD_MANIFEST: &str = "world.json";

#[derive(Serialize, Deserialize)]
struct WorldManifest {
    render: RenderManifest,
}

#[derive(Serialize, Deserialize)]
struct RenderManifest {
    seed: u64,
    noise: f64,
    channels: usize,
    height: usize,
    width: usize,
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output dir {}", dir.display()))
}

fn load_world(data: &Path) -> Result<World> {
    let (items, slots) = read_items(&data.join("items.jsonl"))?;
    let manifest: WorldManifest =
        serde_json::from_slice(&fs::read(data.join(WORLD_MANIFEST)).with_context(|| {
            format!("reading {} (generate data with `limn gen-data`)", data.join(WORLD_MANIFEST).display())
        })?)?;
    let render = RenderSpec {
        seed: manifest.render.seed,
        noise: manifest.render.noise,
        channels: manifest.render.channels,
        height: manifest.render.height,
        width: manifest.render.width,
    };
    Ok(World::new(slots, render, items)?)
}

fn load_triplets(data: &Path) -> Result<Vec<Triplet>> {
    Ok(read_triplets(&data.join("triplets.jsonl"))?)
}

fn parse_ablation(raw: &str) -> Result<Ablation> {
    let mut ablation = Ablation::default();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "one_factor" => ablation.one_factor = true,
            "avepool" => ablation.avepool = true,
            "no_ortho" => ablation.no_ortho = true,
            "no_global" => ablation.no_global = true,
            "no_local" => ablation.no_local = true,
            other => bail!("unknown ablation switch `{other}`"),
        }
    }
    Ok(ablation)
}

fn ablation_echo(a: &Ablation) -> String {
    let mut on = Vec::new();
    if a.one_factor {
        on.push("one_factor");
    }
    if a.avepool {
        on.push("avepool");
    }
    if a.no_ortho {
        on.push("no_ortho");
    }
    if a.no_global {
        on.push("no_global");
    }
    if a.no_local {
        on.push("no_local");
    }
    if on.is_empty() {
        "none".to_string()
    } else {
        on.join(",")
    }
}

/// Shared resolution of the model/training settings used by `train`,
/// `eval` (for dims) and `self-train`.
fn resolve_train_config(
    s: &mut Settings,
    flags: &TrainFlags,
    world: &World,
    seed: u64,
) -> Result<TrainConfig> {
    let epochs = s.resolve("epochs", flags.epochs, 20usize)?;
    let batch = s.resolve("batch", flags.batch, 32usize)?;
    let lr = s.resolve("lr", flags.lr, 1e-4)?;
    let u = s.resolve("u", flags.u, 8usize)?;
    let lambda = s.resolve("lambda", flags.lambda, 0.1)?;
    let tau = s.resolve("tau", flags.tau, 10.0)?;
    let layers = s.resolve("layers", flags.layers, 2usize)?;
    let heads = s.resolve("heads", flags.heads, 4usize)?;
    let dim = s.resolve("dim", flags.dim, 32usize)?;
    let ablation_raw =
        s.resolve("ablation", flags.ablation.clone(), "none".to_string())?;
    let ablation =
        if ablation_raw == "none" { Ablation::default() } else { parse_ablation(&ablation_raw)? };
    s.note("ablation", ablation_echo(&ablation));

    let rs = &world.render_spec;
    if rs.height % 2 != 0 || rs.width % 2 != 0 {
        bail!("render grid {}x{} is not stride-2 compatible", rs.height, rs.width);
    }
    let mut model = LimnConfig::desk_default(world.vocab.len());
    model.image = ImageEncoderConfig::new(rs.channels, 8, 8, rs.height / 2, rs.width / 2, dim)
        .map_err(|e| anyhow!(e))?;
    model.text.embed_dim = dim;
    model.text.hidden_dim = dim;
    model.text.dim = dim;
    model.transformer = TransformerConfig::new(layers, heads, dim).map_err(|e| anyhow!(e))?;
    model.loss = LossConfig { temperature: tau, lambda, batch_size: batch };
    model.tokens = u;
    model.ablation = ablation;

    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        decay_factor: 0.1,
        decay_epoch: 10,
        seed,
        model,
    };
    cfg.validate().map_err(|e| anyhow!(e))?;
    Ok(cfg)
}

// ── metrics files ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TrainMetricsFile {
    config: BTreeMap<String, String>,
    initial_loss: f64,
    loss_curve: Vec<f64>,
    epoch_reports: Vec<RecallReport>,
}

#[derive(Serialize, Deserialize)]
struct EvalMetricsFile {
    config: BTreeMap<String, String>,
    report: RecallReport,
}

#[derive(Serialize, Deserialize)]
struct SelfTrainReportFile {
    config: BTreeMap<String, String>,
    iterations: Vec<IterationRecord>,
    stop_reason: StopReason,
    best_iteration: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn recall_header(ks: &[usize]) -> String {
    ks.iter().map(|k| format!("r@{k}")).collect::<Vec<_>>().join(",")
}

fn recall_row(report: &RecallReport) -> String {
    report.recalls.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn print_recall_table(label: &str, report: &RecallReport) {
    println!("{label}: gallery={} queries={}", report.gallery_size, report.query_count);
    for (k, r) in report.ks.iter().zip(&report.recalls) {
        println!("  R@{k:<4} {r:.4}");
    }
    println!("  avg   {:.4}", report.average);
}

// ── subcommands ─────────────────────────────────────────────────────

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let seed = s.resolve_seed(args.seed)?;
    let items = s.resolve("items", args.items, 500usize)?;
    let triplets = s.resolve("triplets", args.triplets, 2000usize)?;
    let slots = s.resolve("slots", args.slots, 5usize)?;
    let max_edits = s.resolve("max_edits", args.max_edits, 3usize)?;
    let noise = s.resolve("noise", args.noise, 0.05)?;
    ensure_out(&args.out)?;

    let world = World::generate(items, slots, noise, seed)?;
    let triplet_set = make_triplets(&world.items, &world.slots, &world.vocab, triplets, max_edits, seed)?;

    write_items(&args.out.join("items.jsonl"), &world.items, &world.slots)?;
    write_triplets(&args.out.join("triplets.jsonl"), &triplet_set)?;
    write_vocab(&args.out.join("vocab.json"), &world.vocab)?;
    let rs = &world.render_spec;
    write_json(
        &args.out.join(WORLD_MANIFEST),
        &WorldManifest {
            render: RenderManifest {
                seed: rs.seed,
                noise: rs.noise,
                channels: rs.channels,
                height: rs.height,
                width: rs.width,
            },
        },
    )?;
    s.write_echo(&args.out)?;

    println!(
        "generated {} items ({} slots, {} combinations), {} triplets (max {} edits), vocab {}",
        world.items.len(),
        world.slots.len(),
        world.slots.combinations(),
        triplet_set.len(),
        max_edits,
        world.vocab.len()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let seed = s.resolve_seed(args.common.seed)?;
    let ks = parse_ks(&s.resolve("ks", args.ks.clone(), "1,10,50".to_string())?)?;
    let world = load_world(&args.common.data)?;
    let cfg = resolve_train_config(&mut s, &args.flags, &world, seed)?;
    ensure_out(&args.common.out)?;

    let all = load_triplets(&args.common.data)?;
    let (train_set, val_set, _) = split_triplets(&all, seed);
    s.note("train_triplets", train_set.len());
    s.note("val_triplets", val_set.len());

    let val_queries = queries_of(&val_set);
    let (ckpt, metrics) = train(&world, &train_set, Some(&val_queries), &ks, &cfg)?;
    ckpt.save(&args.common.out.join("model"))?;

    let file = TrainMetricsFile {
        config: s.echo().clone(),
        initial_loss: metrics.initial_loss,
        loss_curve: metrics.loss_curve.clone(),
        epoch_reports: metrics.epoch_reports.clone(),
    };
    write_json(&args.common.out.join("metrics.json"), &file)?;

    let mut csv = format!("epoch,loss,{},average\n", recall_header(&ks));
    for (i, loss) in metrics.loss_curve.iter().enumerate() {
        let report = &metrics.epoch_reports[i];
        csv.push_str(&format!("{},{},{},{}\n", i + 1, loss, recall_row(report), report.average));
    }
    fs::write(args.common.out.join("metrics.csv"), csv)?;
    s.write_echo(&args.common.out)?;

    println!(
        "trained {} epochs on {} triplets; initial loss {:.6}, final loss {:.6}",
        cfg.epochs,
        train_set.len(),
        metrics.initial_loss,
        metrics.loss_curve.last().unwrap()
    );
    if let Some(report) = metrics.epoch_reports.last() {
        print_recall_table("validation", report);
    }
    println!("checkpoint: {}", args.common.out.join("model").display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let seed = s.resolve_seed(args.common.seed)?;
    let ks = parse_ks(&s.resolve("ks", args.ks.clone(), "1,10,50".to_string())?)?;
    let split = s.resolve("split", args.split.clone(), "test".to_string())?;
    let world = load_world(&args.common.data)?;
    ensure_out(&args.common.out)?;

    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let model = LimnModel::from_checkpoint(&ckpt)?;
    s.note("checkpoint", args.checkpoint.display());
    s.note("model_hash", model.content_hash());

    let all = load_triplets(&args.common.data)?;
    let (train_set, val_set, test_set) = split_triplets(&all, seed);
    let chosen = match split.as_str() {
        "train" => train_set,
        "val" => val_set,
        "test" => test_set,
        "all" => all,
        other => bail!("unknown split `{other}` (expected train|val|test|all)"),
    };
    if chosen.is_empty() {
        bail!("split `{split}` is empty");
    }
    let queries = queries_of(&chosen);
    let mut cache = GalleryCache::default();
    let report = evaluate(&model, &world, &queries, &ks, &mut cache)?;

    let file = EvalMetricsFile { config: s.echo().clone(), report: report.clone() };
    write_json(&args.common.out.join("metrics.json"), &file)?;
    let csv = format!(
        "split,queries,gallery,{},average\n{},{},{},{},{}\n",
        recall_header(&ks),
        split,
        report.query_count,
        report.gallery_size,
        recall_row(&report),
        report.average
    );
    fs::write(args.common.out.join("metrics.csv"), csv)?;
    s.write_echo(&args.common.out)?;

    print_recall_table(&format!("split {split}"), &report);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ScoreRecord {
    ref_id: u32,
    tgt_id: u32,
    score: f64,
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let _seed = s.resolve_seed(args.common.seed)?;
    let world = load_world(&args.common.data)?;
    ensure_out(&args.common.out)?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = LimnModel::from_checkpoint(&ckpt)?;
    s.note("checkpoint", args.checkpoint.display());
    s.note("model_hash", model.content_hash());

    let triplets_path =
        args.triplets.clone().unwrap_or_else(|| args.common.data.join("triplets.jsonl"));
    s.note("triplets_file", triplets_path.display());
    let triplets = read_triplets(&triplets_path)?;
    if triplets.is_empty() {
        bail!("no triplets to score in {}", triplets_path.display());
    }

    let mut out = Vec::new();
    let mut total = 0.0;
    for t in &triplets {
        let score = score_triplet(&model, &world, t)?;
        total += score;
        let record = ScoreRecord { ref_id: t.ref_id, tgt_id: t.tgt_id, score };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    fs::write(args.common.out.join("scores.jsonl"), out)?;
    s.write_echo(&args.common.out)?;

    println!(
        "scored {} triplets; mean score {:.6}",
        triplets.len(),
        total / triplets.len() as f64
    );
    Ok(())
}

fn resolve_strategy(
    s: &mut Settings,
    raw_strategy: Option<String>,
    raw_budget: Option<usize>,
    default_budget: usize,
) -> Result<MiningStrategy> {
    let name = s.resolve("strategy", raw_strategy, "tfidf_title".to_string())?;
    let budget = s.resolve("budget", raw_budget, default_budget)?;
    let strategy = match name.as_str() {
        "tfidf_title" => MiningStrategy::tfidf(budget),
        "similarity_band" => MiningStrategy::similarity_band(budget),
        "taxonomy_visual" => MiningStrategy::taxonomy_visual(budget),
        other => bail!("unknown strategy `{other}` (expected tfidf_title|similarity_band|taxonomy_visual)"),
    };
    Ok(strategy)
}

pub fn cmd_mine_pairs(args: &MinePairsArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let seed = s.resolve_seed(args.common.seed)?;
    let world = load_world(&args.common.data)?;
    let all = load_triplets(&args.common.data)?;
    let (train_set, _, _) = split_triplets(&all, seed);
    let strategy = resolve_strategy(&mut s, args.strategy.clone(), args.budget, train_set.len())?;
    ensure_out(&args.common.out)?;

    let pairs = if strategy.needs_model() {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("strategy `{}` requires --checkpoint", strategy.name()))?;
        let ckpt = Checkpoint::load(path)?;
        s.note("checkpoint", path.display());
        let port = LimnPort::new(TrainConfig::desk_default(world.vocab.len(), seed));
        mine_pairs(&world, &train_set, &strategy, Some((&port, &ckpt)), seed)?
    } else {
        s.note("checkpoint", "none");
        mine_pairs::<LimnPort>(&world, &train_set, &strategy, None, seed)?
    };

    write_pairs(&args.common.out.join("pairs.jsonl"), &pairs)?;
    s.write_echo(&args.common.out)?;
    println!("mined {} pairs with strategy {}", pairs.len(), strategy.name());
    Ok(())
}

pub fn cmd_caption(args: &CaptionArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let _seed = s.resolve_seed(args.common.seed)?;
    let world = load_world(&args.common.data)?;
    ensure_out(&args.common.out)?;

    let ckpt = Checkpoint::load(&args.captioner)?;
    let captioner = Captioner::from_checkpoint(&ckpt)?;
    let model_hash = captioner.content_hash();
    s.note("captioner", args.captioner.display());
    s.note("model_hash", &model_hash);

    let pairs_path = args.pairs.clone().unwrap_or_else(|| args.common.out.join("pairs.jsonl"));
    s.note("pairs_file", pairs_path.display());
    let pairs = read_pairs(&pairs_path)?;
    if pairs.is_empty() {
        bail!("no pairs in {}", pairs_path.display());
    }

    let mut records = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let caption = generate_caption(
            &captioner,
            &world,
            world.item(pair.ref_id)?,
            world.item(pair.tgt_id)?,
        )?;
        records.push(CaptionRecord {
            ref_id: pair.ref_id,
            tgt_id: pair.tgt_id,
            caption,
            model_hash: model_hash.clone(),
        });
    }
    write_captions(&args.common.out.join("captions.jsonl"), &records)?;
    s.write_echo(&args.common.out)?;
    println!("captioned {} pairs", records.len());
    Ok(())
}

pub fn cmd_self_train(args: &SelfTrainArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let seed = s.resolve_seed(args.common.seed)?;
    let ks = parse_ks(&s.resolve("ks", args.ks.clone(), "1,10,50".to_string())?)?;
    let world = load_world(&args.common.data)?;
    let train_cfg = resolve_train_config(&mut s, &args.flags, &world, seed)?;

    let all = load_triplets(&args.common.data)?;
    let (train_set, val_set, _) = split_triplets(&all, seed);
    if train_set.is_empty() || val_set.is_empty() {
        bail!("dataset too small to split into train/val");
    }
    s.note("train_triplets", train_set.len());
    s.note("val_triplets", val_set.len());

    let strategy =
        resolve_strategy(&mut s, args.strategy.clone(), args.budget, 2 * train_set.len())?;
    let kappa = s.resolve_opt("kappa", args.kappa)?;
    let max_iters = s.resolve("max_iters", args.max_iters, 3usize)?;
    let epsilon = s.resolve("epsilon", args.epsilon, 0.001)?;
    let cap_epochs = s.resolve("cap_epochs", args.cap_epochs, 20usize)?;
    let cap_lr = s.resolve("cap_lr", args.cap_lr, 1e-3)?;
    let flip_noise = s.resolve("flip_noise", args.flip_noise, 0.0)?;
    ensure_out(&args.common.out)?;

    let mut captioner_cfg = CaptionerConfig::for_world(&world);
    captioner_cfg.epochs = cap_epochs;
    captioner_cfg.learning_rate = cap_lr;
    captioner_cfg.flip_noise = flip_noise;
    captioner_cfg.noise_seed = seed;

    let paradigm = ParadigmConfig {
        strategy,
        kappa,
        max_iters,
        epsilon,
        ks,
        captioner: captioner_cfg,
        seed,
    };
    let port = LimnPort::new(train_cfg);
    let outcome = run_paradigm(&world, &train_set, &val_set, &port, &paradigm)?;

    outcome.best_cir.save(&args.common.out.join("best_model"))?;
    outcome.best_captioner.save(&args.common.out.join("best_captioner"))?;
    let file = SelfTrainReportFile {
        config: s.echo().clone(),
        iterations: outcome.history.clone(),
        stop_reason: outcome.stop_reason,
        best_iteration: outcome.best_iteration,
    };
    write_json(&args.common.out.join("selftrain_report.json"), &file)?;
    s.write_echo(&args.common.out)?;

    println!("self-training finished: {:?} after {} iteration(s)", outcome.stop_reason, outcome.history.len() - 1);
    for record in &outcome.history {
        println!(
            "  iter {}: mined {} retained {} avg-recall {:.4} captions {:.4}",
            record.iteration,
            record.mined_pairs,
            record.retained,
            record.cir_report.average,
            record.caption_metrics.average
        );
    }
    println!("best iteration: {}", outcome.best_iteration);
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut found = false;
    let metrics_path = args.out.join("metrics.json");
    if metrics_path.exists() {
        found = true;
        let raw = fs::read(&metrics_path)?;
        if let Ok(train_file) = serde_json::from_slice::<TrainMetricsFile>(&raw) {
            println!("training run ({}):", metrics_path.display());
            println!("  initial loss {:.6}", train_file.initial_loss);
            for (i, loss) in train_file.loss_curve.iter().enumerate() {
                match train_file.epoch_reports.get(i) {
                    Some(report) => println!(
                        "  epoch {:>3}: loss {:.6} avg-recall {:.4}",
                        i + 1,
                        loss,
                        report.average
                    ),
                    None => println!("  epoch {:>3}: loss {loss:.6}", i + 1),
                }
            }
            if let Some(report) = train_file.epoch_reports.last() {
                print_recall_table("final validation", report);
            }
        } else {
            let eval_file: EvalMetricsFile = serde_json::from_slice(&raw)?;
            print_recall_table("evaluation", &eval_file.report);
        }
    }
    let selftrain_path = args.out.join("selftrain_report.json");
    if selftrain_path.exists() {
        found = true;
        let file: SelfTrainReportFile = serde_json::from_slice(&fs::read(&selftrain_path)?)?;
        println!("self-training run ({}):", selftrain_path.display());
        println!(
            "  {:>4} {:>7} {:>9} {:>8} {:>11} {:>9}",
            "iter", "mined", "retained", "kappa", "avg-recall", "captions"
        );
        for r in &file.iterations {
            println!(
                "  {:>4} {:>7} {:>9} {:>8} {:>11.4} {:>9.4}",
                r.iteration,
                r.mined_pairs,
                r.retained,
                r.kappa,
                r.cir_report.average,
                r.caption_metrics.average
            );
        }
        println!("  stop: {:?}, best iteration {}", file.stop_reason, file.best_iteration);
    }
    if !found {
        bail!("no metrics.json or selftrain_report.json under {}", args.out.display());
    }
    Ok(())
}

