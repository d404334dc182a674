//! Implementations behind each subcommand: resolve the configuration,
//! load or synthesize data, run the pipeline pieces from the library, and
//! write the outputs.

use std::fs;
use std::path::Path;

use mcae::analysis::{
    attention_map, markov_chain, mutual_information, render_reconstructions, save_heatmap_png,
    tsne_embed, variational_mse_equivalence, verify_dpi_chain, write_embedding_csv, DiscreteJoint,
    EmbeddingCloud,
};
use mcae::config::FullConfig;
use mcae::data::{load_domains, make_synthetic_domains, write_domain_dirs, DomainDataset};
use mcae::error::{Error, Result};
use mcae::eval::{
    format_summary_table, run_fold, run_fold_from, run_limited_source, run_loo_protocol,
    write_results_csv, write_summary_table, ProtocolResult, TrainRecipe,
};
use mcae::model::{aggregate, encode, init_params, is_decoder_param};
use mcae::tokenizer::{patchify, sample_mask};
use mcae::trainer::{
    checkpoint_configs, checkpoint_has_decoder, load_checkpoint, load_encoder_into,
    save_checkpoint, save_params_checkpoint, write_finetune_csv, write_metrics_csv,
};
use mcae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    AblateArgs, CommonOpts, EvalLimitedArgs, FinetuneArgs, SweepDecoderArgs, SweepMaskRatioArgs,
    SynthDataArgs, TrainDataArgs, VisualizeArgs,
};

/// Which section the generic `--epochs` / `--batch-size` flags steer.
#[derive(Clone, Copy, PartialEq)]
enum Scope {
    Pretraining,
    Finetuning,
}

/// Defaults, overlaid by `--config`, overlaid by individual flags.
fn resolve_config(common: &CommonOpts, scope: Scope) -> Result<FullConfig> {
    let mut cfg = match &common.config {
        Some(path) => FullConfig::load(path)?,
        None => FullConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.schedule.seed = v;
        cfg.finetune.seed = v;
    }
    if let Some(v) = common.epochs {
        match scope {
            Scope::Pretraining => cfg.schedule.epochs = v,
            Scope::Finetuning => cfg.finetune.epochs = v,
        }
    }
    if let Some(v) = common.batch_size {
        match scope {
            Scope::Pretraining => cfg.schedule.batch_size = v,
            Scope::Finetuning => cfg.finetune.batch_size = v,
        }
    }
    if let Some(v) = common.mask_ratio {
        cfg.schedule.mask_ratio = v;
    }
    if let Some(v) = common.decoder_width {
        cfg.decoder.width = v;
    }
    if let Some(v) = common.decoder_depth {
        cfg.decoder.depth = v;
    }
    if let Some(v) = common.tau {
        cfg.contrastive.temperature = v;
    }
    if let Some(v) = common.lambda_cross {
        cfg.contrastive.lambda_live_cross = v;
    }
    if let Some(v) = common.lambda_same {
        cfg.contrastive.lambda_live_same = v;
    }
    if let Some(v) = common.lambda_spoof {
        cfg.contrastive.lambda_spoof = v;
    }
    if let Some(v) = common.beta {
        cfg.schedule.beta = v;
    }
    if let Some(v) = common.epsilon {
        cfg.schedule.epsilon = v;
    }
    if let Some(v) = &common.switch_epoch {
        cfg.apply("schedule.switch_epoch", v)?;
    }
    if let Some(v) = &common.gate_mode {
        cfg.apply("schedule.gate_mode", v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every run prints its resolved settings and keeps them next to the
/// outputs, so a result directory is self-describing and re-runnable.
fn echo_config(cfg: &FullConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text = cfg.to_text();
    println!("resolved configuration:\n{text}");
    let path = out_dir.join("resolved.cfg");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Load the requested domains: an explicit `--only` list, or every
/// subdirectory of the data root in name order.
fn load_requested_domains(args: &TrainDataArgs, input_size: usize) -> Result<Vec<DomainDataset>> {
    let names: Vec<String> = match &args.only {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => {
            let mut names = Vec::new();
            let entries = fs::read_dir(&args.data).map_err(|e| Error::io(&args.data, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&args.data, e))?;
                if entry.path().is_dir() {
                    names.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
            names.sort();
            names
        }
    };
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no domain directories found under {}",
            args.data.display()
        )));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    load_domains(&args.data, &refs, input_size)
}

fn recipe_of(cfg: &FullConfig) -> TrainRecipe {
    TrainRecipe {
        enc: cfg.encoder,
        dec: cfg.decoder,
        sched: cfg.schedule.clone(),
        con: cfg.contrastive,
        finetune: cfg.finetune.clone(),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad {what} value {s:?}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what} list")));
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Data synthesis and training
// ---------------------------------------------------------------------------

pub fn synth_data(args: SynthDataArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.common.out_dir)?;
    if args.domains == 0 || args.per_class == 0 {
        return Err(Error::Config(
            "--domains and --per-class must be at least 1".into(),
        ));
    }
    let size = args.image_size.unwrap_or(cfg.encoder.image_size);
    let out = args.out.unwrap_or_else(|| args.common.out_dir.join("data"));
    let datasets = make_synthetic_domains(args.domains, args.per_class, size, cfg.schedule.seed)?;
    write_domain_dirs(&datasets, &out)?;
    println!(
        "wrote {} domains x {} samples per class ({size}x{size}) under {}",
        args.domains,
        args.per_class,
        out.display()
    );
    Ok(())
}

pub fn pretrain(args: TrainDataArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.common.out_dir)?;
    let domains = load_requested_domains(&args, cfg.encoder.image_size)?;
    let (state, metrics) = mcae::trainer::pretrain(
        &domains,
        cfg.encoder,
        cfg.decoder,
        &cfg.schedule,
        &cfg.contrastive,
    )?;
    let ckpt = args.common.out_dir.join("checkpoint");
    save_checkpoint(&ckpt, &state)?;
    write_metrics_csv(&args.common.out_dir.join("metrics.csv"), &metrics)?;
    let last = metrics.last().expect("at least one epoch");
    println!(
        "pre-training done: {} epochs, final rec loss {:.6}, stage {}; checkpoint at {}",
        metrics.len(),
        last.rec_loss,
        last.stage,
        ckpt.display()
    );
    Ok(())
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = resolve_config(&args.data.common, Scope::Finetuning)?;
    echo_config(&cfg, &args.data.common.out_dir)?;
    let domains = load_requested_domains(&args.data, cfg.encoder.image_size)?;
    let mut params = init_params(cfg.encoder, cfg.decoder, cfg.finetune.seed)?;
    match &args.checkpoint {
        Some(ck) => load_encoder_into(ck, &mut params)?,
        None => println!("note: no --checkpoint given; fine-tuning from random initialization"),
    }
    let (tuned, log) = mcae::trainer::finetune(params, &domains, &cfg.finetune)?;
    let ckpt = args.data.common.out_dir.join("checkpoint");
    // The classifier has no use for the reconstruction decoder; drop it.
    save_params_checkpoint(&ckpt, &tuned, |n| !is_decoder_param(n))?;
    write_finetune_csv(&args.data.common.out_dir.join("finetune.csv"), &log)?;
    let last = log.last().expect("at least one epoch");
    println!(
        "fine-tuning done: {} epochs, final accuracy {:.3}; checkpoint at {}",
        log.len(),
        last.accuracy,
        ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation protocols
// ---------------------------------------------------------------------------

fn write_protocol_outputs(out_dir: &Path, results: &[ProtocolResult]) -> Result<()> {
    write_results_csv(&out_dir.join("results.csv"), results)?;
    write_summary_table(&out_dir.join("summary.txt"), results)?;
    print!("{}", format_summary_table(results));
    Ok(())
}

pub fn eval_loo(args: TrainDataArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.common.out_dir)?;
    let domains = load_requested_domains(&args, cfg.encoder.image_size)?;
    let results = run_loo_protocol(&domains, &recipe_of(&cfg), args.common.parallel_folds)?;
    write_protocol_outputs(&args.common.out_dir, &results)
}

pub fn eval_limited(args: EvalLimitedArgs) -> Result<()> {
    let cfg = resolve_config(&args.data.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.data.common.out_dir)?;
    let all = load_requested_domains(&args.data, cfg.encoder.image_size)?;

    let source_names: Vec<&str> = args
        .sources
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if source_names.len() != 2 {
        return Err(Error::Config(format!(
            "--sources needs exactly two comma-separated names, got {:?}",
            args.sources
        )));
    }
    let find = |name: &str| -> Result<DomainDataset> {
        all.iter()
            .find(|d| d.domain_name == name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("domain {name:?} not found in the data root")))
    };
    let sources = vec![find(source_names[0])?, find(source_names[1])?];
    let targets: Vec<DomainDataset> = match &args.targets {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(find)
            .collect::<Result<_>>()?,
        None => all
            .iter()
            .filter(|d| !source_names.contains(&d.domain_name.as_str()))
            .cloned()
            .collect(),
    };
    let results = run_limited_source(&sources, &targets, &recipe_of(&cfg))?;
    write_protocol_outputs(&args.data.common.out_dir, &results)
}

// ---------------------------------------------------------------------------
// Sweeps and ablations
// ---------------------------------------------------------------------------

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    sum / n as f64
}

/// One sweep row: the grid label columns, then mean HTER/AUC, then one
/// HTER/AUC pair per held-out domain.
fn sweep_row(label_values: &[String], results: &[ProtocolResult]) -> String {
    let mut row = label_values.join(",");
    row.push_str(&format!(
        ",{},{}",
        mean(results.iter().map(|r| r.hter)),
        mean(results.iter().map(|r| r.auc))
    ));
    for r in results {
        row.push_str(&format!(",{},{}", r.hter, r.auc));
    }
    row.push('\n');
    row
}

fn sweep_header(label_names: &[&str], fold_domains: &[String]) -> String {
    let mut header = label_names.join(",");
    header.push_str(",mean_hter,mean_auc");
    for d in fold_domains {
        header.push_str(&format!(",{d}_hter,{d}_auc"));
    }
    header.push('\n');
    header
}

pub fn sweep_mask_ratio(args: SweepMaskRatioArgs) -> Result<()> {
    let cfg = resolve_config(&args.data.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.data.common.out_dir)?;
    let ratios: Vec<f64> = parse_list(&args.ratios, "mask ratio")?;
    let domains = load_requested_domains(&args.data, cfg.encoder.image_size)?;
    let fold_names: Vec<String> = domains.iter().map(|d| d.domain_name.clone()).collect();

    let mut csv = sweep_header(&["mask_ratio"], &fold_names);
    let mut all_folds = Vec::new();
    for &ratio in &ratios {
        let mut point = cfg.clone();
        point.schedule.mask_ratio = ratio;
        point.validate()?;
        let mut results = run_loo_protocol(
            &domains,
            &recipe_of(&point),
            args.data.common.parallel_folds,
        )?;
        println!(
            "mask_ratio {ratio}: mean HTER {:.2}, mean AUC {:.2}",
            mean(results.iter().map(|r| r.hter)),
            mean(results.iter().map(|r| r.auc))
        );
        csv.push_str(&sweep_row(&[format!("{ratio}")], &results));
        for r in &mut results {
            r.protocol = format!("mask_ratio={ratio}");
        }
        all_folds.extend(results);
    }
    let path = args.data.common.out_dir.join("mask_ratio_sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_results_csv(
        &args.data.common.out_dir.join("mask_ratio_folds.csv"),
        &all_folds,
    )?;
    println!("sweep written to {}", path.display());
    Ok(())
}

pub fn sweep_decoder(args: SweepDecoderArgs) -> Result<()> {
    let cfg = resolve_config(&args.data.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.data.common.out_dir)?;
    let widths: Vec<usize> = parse_list(&args.widths, "decoder width")?;
    let depths: Vec<usize> = parse_list(&args.depths, "decoder depth")?;
    let domains = load_requested_domains(&args.data, cfg.encoder.image_size)?;
    let fold_names: Vec<String> = domains.iter().map(|d| d.domain_name.clone()).collect();

    let mut csv = sweep_header(&["width", "depth"], &fold_names);
    let mut all_folds = Vec::new();
    for &width in &widths {
        for &depth in &depths {
            let mut point = cfg.clone();
            point.decoder.width = width;
            point.decoder.depth = depth;
            point.validate()?;
            let mut results = run_loo_protocol(
                &domains,
                &recipe_of(&point),
                args.data.common.parallel_folds,
            )?;
            println!(
                "decoder {width}x{depth}: mean HTER {:.2}, mean AUC {:.2}",
                mean(results.iter().map(|r| r.hter)),
                mean(results.iter().map(|r| r.auc))
            );
            csv.push_str(&sweep_row(
                &[width.to_string(), depth.to_string()],
                &results,
            ));
            for r in &mut results {
                r.protocol = format!("decoder={width}x{depth}");
            }
            all_folds.extend(results);
        }
    }
    let path = args.data.common.out_dir.join("decoder_sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_results_csv(
        &args.data.common.out_dir.join("decoder_folds.csv"),
        &all_folds,
    )?;
    println!("sweep written to {}", path.display());
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.data.common, Scope::Pretraining)?;
    echo_config(&cfg, &args.data.common.out_dir)?;
    let modes: Vec<&str> = match args.mode.as_str() {
        "all" => vec!["no-pretrain", "imagenet-free", "full"],
        m @ ("no-pretrain" | "imagenet-free" | "full") => vec![m],
        other => {
            return Err(Error::Config(format!(
                "unknown ablation mode {other:?}; expected no-pretrain, imagenet-free, full, or all"
            )));
        }
    };
    if modes.contains(&"imagenet-free") && args.init_checkpoint.is_none() {
        println!(
            "note: no --init-checkpoint supplied; the imagenet-free row falls back to \
             random initialization (external pre-training is not bundled)"
        );
    }
    let domains = load_requested_domains(&args.data, cfg.encoder.image_size)?;
    let recipe = recipe_of(&cfg);
    let fold_names: Vec<String> = domains.iter().map(|d| d.domain_name.clone()).collect();

    let mut csv = sweep_header(&["mode"], &fold_names);
    let mut all_folds = Vec::new();
    for mode in modes {
        let mut results = Vec::new();
        for held_out in 0..domains.len() {
            let train: Vec<DomainDataset> = domains
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held_out)
                .map(|(_, d)| d.clone())
                .collect();
            let test = &domains[held_out];
            let result = match mode {
                "full" => run_fold(mode, &train, test, &recipe)?,
                "no-pretrain" => {
                    let init = init_params(recipe.enc, recipe.dec, recipe.sched.seed)?;
                    run_fold_from(mode, &train, test, &recipe, init)?
                }
                "imagenet-free" => {
                    let mut init = init_params(recipe.enc, recipe.dec, recipe.sched.seed)?;
                    if let Some(ck) = &args.init_checkpoint {
                        load_encoder_into(ck, &mut init)?;
                    }
                    run_fold_from(mode, &train, test, &recipe, init)?
                }
                _ => unreachable!("modes are filtered above"),
            };
            results.push(result);
        }
        println!(
            "{mode}: mean HTER {:.2}, mean AUC {:.2}",
            mean(results.iter().map(|r| r.hter)),
            mean(results.iter().map(|r| r.auc))
        );
        csv.push_str(&sweep_row(&[mode.to_string()], &results));
        all_folds.extend(results);
    }
    let path = args.data.common.out_dir.join("ablate.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_results_csv(
        &args.data.common.out_dir.join("ablate_folds.csv"),
        &all_folds,
    )?;
    println!("ablation written to {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Visualization
// ---------------------------------------------------------------------------

pub fn visualize(args: VisualizeArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.data.common, Scope::Pretraining)?;
    // The checkpoint dictates the geometry; the echoed config must match
    // what actually runs.
    let (enc, dec) = checkpoint_configs(&args.checkpoint)?;
    cfg.encoder = enc;
    cfg.decoder = dec;
    echo_config(&cfg, &args.data.common.out_dir)?;

    let params = load_checkpoint(&args.checkpoint)?.params;
    let domains = load_requested_domains(&args.data, cfg.encoder.image_size)?;
    let out_dir = &args.data.common.out_dir;

    match args.kind.as_str() {
        "recon" => {
            if !checkpoint_has_decoder(&args.checkpoint)? {
                return Err(Error::Config(format!(
                    "checkpoint {} stores no decoder weights; reconstruction needs a \
                     pre-training checkpoint",
                    args.checkpoint.display()
                )));
            }
            let images: Vec<_> = domains
                .iter()
                .flat_map(|d| d.samples.iter().map(|s| s.image.clone()))
                .take(args.count.max(1))
                .collect();
            let path = out_dir.join("reconstructions.png");
            render_reconstructions(
                &params,
                &images,
                cfg.schedule.mask_ratio,
                cfg.schedule.seed,
                &path,
            )?;
            println!(
                "wrote {} reconstruction rows (mask ratio {}) to {}",
                images.len(),
                cfg.schedule.mask_ratio,
                path.display()
            );
        }
        "attention" => {
            let mut written = 0usize;
            'outer: for d in &domains {
                for sample in &d.samples {
                    if written == args.count.max(1) {
                        break 'outer;
                    }
                    let map = attention_map(&params, &sample.image, sample.label.as_index())?;
                    let path = out_dir.join(format!(
                        "attention_{written:02}_{}_{}.png",
                        d.domain_name,
                        sample.label.dir_name()
                    ));
                    save_heatmap_png(&map, &path)?;
                    written += 1;
                }
            }
            println!(
                "wrote {written} class-evidence heatmaps to {}",
                out_dir.display()
            );
        }
        "tsne" => {
            let mut rows: Vec<Tensor> = Vec::new();
            let mut labels = Vec::new();
            let mut names = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
            for d in &domains {
                for sample in &d.samples {
                    let seq = patchify(&sample.image, cfg.encoder.patch_size)?;
                    let plan = sample_mask(seq.len(), 0.0, &mut rng)?;
                    let latent = encode(&params, &seq, &plan)?;
                    rows.push(aggregate(&latent)?);
                    labels.push(sample.label);
                    names.push(d.domain_name.clone());
                }
            }
            let n = rows.len();
            if !(args.perplexity > 1.0 && args.perplexity < n as f64) {
                return Err(Error::Config(format!(
                    "--perplexity must lie in (1, {n}) for {n} samples, got {}",
                    args.perplexity
                )));
            }
            if args.iters == 0 {
                return Err(Error::Config("--iters must be at least 1".into()));
            }
            let features = Tensor::from_fn(n, cfg.encoder.embed_dim, |r, c| rows[r].get(0, c));
            let result = tsne_embed(&features, args.perplexity, args.iters, cfg.schedule.seed)?;
            let cloud = EmbeddingCloud {
                points: result.points,
                labels,
                domains: names,
            };
            let path = out_dir.join("embedding.csv");
            write_embedding_csv(&cloud, &path)?;
            println!(
                "embedded {n} samples in {} iterations (KL {:.4} -> {:.4}); wrote {}",
                args.iters,
                result.kl_trace.first().expect("at least one iteration"),
                result.kl_trace.last().expect("at least one iteration"),
                path.display()
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown --kind {other:?}; expected recon, attention, or tsne"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Theory checks
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    value: f64,
    expected: f64,
    tolerance: f64,
}

impl Check {
    fn ok(&self) -> bool {
        (self.value - self.expected).abs() <= self.tolerance
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    let s2: f64 = p.iter().sum();
    p[0] += 1.0 - s2;
    p
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let row = random_distribution(rng, cols);
        t.row_mut(r).copy_from_slice(&row);
    }
    t
}

/// Numerically verify the information-theoretic backbone: mutual
/// information on hand-checkable tables, the data-processing inequality on
/// randomized common-cause chains, and the Gaussian-likelihood/MSE
/// equivalence. Writes one CSV row per check and fails (exit 2) if any
/// check is out of tolerance.
pub fn verify_theory(common: CommonOpts) -> Result<()> {
    let cfg = resolve_config(&common, Scope::Pretraining)?;
    echo_config(&cfg, &common.out_dir)?;
    let mut checks = Vec::new();

    // Mutual information on 2x2 tables with closed-form values.
    let product = DiscreteJoint::new(
        vec!["X".into(), "Y".into()],
        vec![2, 2],
        vec![0.21, 0.09, 0.49, 0.21],
    )?;
    checks.push(Check {
        name: "independent_pair_bits",
        value: mutual_information(&product, &["X"], &["Y"])?,
        expected: 0.0,
        tolerance: 1e-12,
    });
    let copy = DiscreteJoint::new(
        vec!["X".into(), "Y".into()],
        vec![2, 2],
        vec![0.5, 0.0, 0.0, 0.5],
    )?;
    checks.push(Check {
        name: "copied_fair_bit_bits",
        value: mutual_information(&copy, &["X"], &["Y"])?,
        expected: 1.0,
        tolerance: 1e-12,
    });
    let correlated = DiscreteJoint::new(
        vec!["X".into(), "Y".into()],
        vec![2, 2],
        vec![0.4, 0.1, 0.1, 0.4],
    )?;
    let correlated_mi = mutual_information(&correlated, &["X"], &["Y"])?;
    checks.push(Check {
        name: "correlated_pair_bits",
        value: correlated_mi,
        expected: 2.0 + 0.8 * 0.4f64.log2() + 0.2 * 0.1f64.log2(),
        tolerance: 1e-12,
    });
    checks.push(Check {
        name: "correlated_pair_bits_rounded",
        value: correlated_mi,
        expected: 0.2781,
        tolerance: 5e-5,
    });

    // Data-processing inequality on common-cause chains.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
    let identity = Tensor::from_fn(3, 3, |r, c| f64::from(u8::from(r == c)));
    let g = random_stochastic(&mut rng, 3, 3);
    let chain = markov_chain(&random_distribution(&mut rng, 3), &identity, &g)?;
    let report = verify_dpi_chain(&chain, 0.0)?;
    checks.push(Check {
        name: "identity_aggregate_gap_bits",
        value: report.gap,
        expected: 0.0,
        tolerance: 1e-12,
    });
    let constant = Tensor::from_fn(3, 2, |_, c| f64::from(u8::from(c == 0)));
    let g = random_stochastic(&mut rng, 3, 3);
    let chain = markov_chain(&random_distribution(&mut rng, 3), &constant, &g)?;
    let report = verify_dpi_chain(&chain, f64::INFINITY)?;
    checks.push(Check {
        name: "constant_aggregate_info_bits",
        value: report.i_ag,
        expected: 0.0,
        tolerance: 1e-12,
    });
    let mut worst_gap = f64::INFINITY;
    for _ in 0..100 {
        let p_t = random_distribution(&mut rng, 3);
        let a = random_stochastic(&mut rng, 3, 3);
        let g = random_stochastic(&mut rng, 3, 3);
        let chain = markov_chain(&p_t, &a, &g)?;
        let report = verify_dpi_chain(&chain, f64::INFINITY)?;
        worst_gap = worst_gap.min(report.gap);
    }
    checks.push(Check {
        name: "dpi_worst_gap_over_100_chains",
        value: worst_gap.min(0.0),
        expected: 0.0,
        tolerance: 1e-10,
    });

    // Gaussian log-likelihood is an affine function of squared error.
    let dim = 6;
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..40)
        .map(|_| {
            let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = mu.iter().map(|m| m + rng.gen_range(-2.0..2.0)).collect();
            (x, mu)
        })
        .collect();
    for (sigma, slope_name, intercept_name, residual_name) in [
        (
            0.5,
            "slope_sigma_0.5",
            "intercept_sigma_0.5",
            "residual_sigma_0.5",
        ),
        (
            1.0,
            "slope_sigma_1",
            "intercept_sigma_1",
            "residual_sigma_1",
        ),
        (
            2.0,
            "slope_sigma_2",
            "intercept_sigma_2",
            "residual_sigma_2",
        ),
    ] {
        let report = variational_mse_equivalence(&samples, sigma)?;
        checks.push(Check {
            name: slope_name,
            value: report.slope,
            expected: report.expected_slope,
            tolerance: 1e-9,
        });
        checks.push(Check {
            name: intercept_name,
            value: report.intercept,
            expected: report.expected_intercept,
            tolerance: 1e-9,
        });
        checks.push(Check {
            name: residual_name,
            value: report.max_residual,
            expected: 0.0,
            tolerance: 1e-9,
        });
    }

    let mut csv = String::from("check,value,expected,tolerance,ok\n");
    let mut failures = 0usize;
    for c in &checks {
        let ok = c.ok();
        println!(
            "{} {:<32} value {:+.12e}  expected {:+.12e}  tol {:.0e}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.value,
            c.expected,
            c.tolerance
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name, c.value, c.expected, c.tolerance, ok
        ));
        if !ok {
            failures += 1;
        }
    }
    let path = common.out_dir.join("theory.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("{} checks written to {}", checks.len(), path.display());
    if failures > 0 {
        return Err(Error::InvalidArgument(format!(
            "{failures} theory checks failed"
        )));
    }
    Ok(())
}
