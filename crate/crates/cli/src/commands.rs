use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use headroute::accounting::{bench, compare, cost_report, param_count, pruned_layout, BenchConfig, CostComparison, CountOptions};
use headroute::data::write_atomic;
use headroute::encoder::{Encoder, EncoderConfig, Layer};
use headroute::model_io::{load, save};
use headroute::pruning::{prune_layer, prune_model, verify_static};
use headroute::selfcheck::{model_check, op_checks, CheckOutcome};
use headroute::training::{convert_next_layer, evaluate, train, ScheduleState, TrainReport};
use headroute::usage::{collect_usage, frequencies, UsageReport};
use headroute::Error;
use serde::Serialize;

use crate::config::{DataSource, RunConfig, Split};
use crate::NumericFailure;

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_split(data: &Path, cfg: &EncoderConfig, split: Split) -> Result<headroute::data::Dataset> {
    DataSource::load(data)?.splits(cfg.max_len, cfg.n_classes)?.pick(split)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub quiet: bool,
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config)?;
    let splits = cfg.data.splits(cfg.model.max_len, cfg.model.n_classes)?;
    let mut model = Encoder::<f32>::new(cfg.model.clone())?;
    let mut log = Vec::new();
    let report = train(&mut model, &splits.train, splits.valid.as_ref(), &cfg.train, |record| {
        serde_json::to_writer(&mut log, record)?;
        log.push(b'\n');
        Ok(())
    })?;

    save(&model, args.out)?;
    let log_path = args.log.map_or_else(|| with_suffix(args.out, ".log.jsonl"), Path::to_path_buf);
    write_atomic(&log_path, &log)?;
    write_atomic(&with_suffix(args.out, ".report.json"), &json_bytes(&report)?)?;
    if !args.quiet {
        print_epochs(&report);
    }
    println!("final_loss {:?}", report.final_loss);
    Ok(())
}

fn print_epochs(report: &TrainReport) {
    println!("{:>5} {:>5} {:>9} {:>10} {:>8}  max usage per routed layer", "epoch", "stage", "converted", "task_loss", "acc");
    for e in &report.epochs {
        let converted = e.converted_layer.map_or("-".to_string(), |l| l.to_string());
        let acc = e.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let usage: Vec<String> = e.usage.iter().map(|u| format!("L{}:{:.3}", u.layer, u.max_frequency)).collect();
        println!(
            "{:>5} {:>5} {:>9} {:>10.5} {:>8}  {}",
            e.epoch,
            e.stage,
            converted,
            e.mean_task_loss,
            acc,
            usage.join(" ")
        );
    }
}

pub fn usage_cmd(model: &Path, data: &Path, split: Split, out: &Path, batch_size: usize) -> Result<()> {
    let model: Encoder<f32> = load(model)?;
    let ds = load_split(data, &model.config, split)?;
    let name = format!("{}:{split:?}", data.display()).to_lowercase();
    let report = collect_usage(&model, &ds, &name, batch_size)?;
    report.save(out)?;
    for r in &report.layers {
        let f = frequencies(r, report.k)?;
        let cells: Vec<String> = f.iter().map(|p| format!("{p:.3}")).collect();
        println!("layer {:>2}  n={}  {}", r.layer, r.total, cells.join(" "));
    }
    Ok(())
}

pub fn prune_cmd(model_path: &Path, usage: &Path, m: usize, out: &Path) -> Result<()> {
    let model: Encoder<f32> = load(model_path)?;
    let report = UsageReport::load(usage)?;
    let (pruned, manifest) = prune_model(&model, &report, m)?;
    save(&pruned, out)?;
    manifest.save(with_suffix(out, ".prune.json"))?;
    let opts = CountOptions {
        include_pooler: false,
        ..CountOptions::default()
    };
    let (before, after) = (param_count(&model, opts), param_count(&pruned, opts));
    println!("non-embedding parameters: {before} -> {after}");
    for (layer, kept) in &manifest.retained {
        println!("layer {layer:>2}: kept experts {kept:?}");
    }
    Ok(())
}

/// Where a model for `count` or `bench` comes from.
pub enum ModelSource<'a> {
    Checkpoint(&'a Path),
    /// The bert-base shape with the top `converted` layers pruned to `m` experts.
    Preset { converted: usize, m: usize },
}

fn preset_config(converted: usize, m: usize) -> Result<EncoderConfig> {
    let cfg = EncoderConfig::bert_base();
    if converted > cfg.n_layers {
        return Err(Error::Config(format!("--converted {converted} exceeds {} layers", cfg.n_layers)).into());
    }
    if m == 0 || m > cfg.h {
        return Err(Error::Config(format!("--m must lie in 1..={}, got {m}", cfg.h)).into());
    }
    Ok(cfg)
}

/// Structure-only model: every tensor allocated, all values zero.
fn skeleton_for(source: &ModelSource) -> Result<Encoder<f32>> {
    match *source {
        ModelSource::Checkpoint(p) => Ok(load(p)?),
        ModelSource::Preset { converted, m } => {
            let cfg = preset_config(converted, m)?;
            let layout = pruned_layout(cfg.n_layers, converted, m);
            Ok(Encoder::skeleton(cfg, &layout)?)
        }
    }
}

/// Randomly initialized model that went through conversion and pruning.
pub fn preset_model(converted: usize, m: usize, seed: u64) -> Result<Encoder<f32>> {
    let cfg = EncoderConfig {
        seed,
        ..preset_config(converted, m)?
    };
    let mut model = Encoder::<f32>::new(cfg)?;
    let mut schedule = ScheduleState::new(converted);
    let retained: Vec<usize> = (0..m).collect();
    while let Some(i) = convert_next_layer(&mut model, &mut schedule, 1, seed)? {
        let Layer::Moe(moe) = &model.layers[i] else { unreachable!("just converted") };
        model.layers[i] = Layer::Deterministic(prune_layer(i, moe, &retained)?);
    }
    Ok(model)
}

pub struct CountArgs<'a> {
    pub model: ModelSource<'a>,
    pub baseline: Option<&'a Path>,
    pub seq_len: usize,
    pub no_pooler: bool,
    pub json: bool,
}

/// Costs of the model against the baseline, or against the all-standard
/// model of the same configuration when none is given.
pub fn count(args: &CountArgs) -> Result<CostComparison> {
    let opts = CountOptions {
        include_pooler: !args.no_pooler,
        ..CountOptions::default()
    };
    let model = skeleton_for(&args.model)?;
    let baseline = match args.baseline {
        Some(p) => skeleton_for(&ModelSource::Checkpoint(p))?,
        None => Encoder::skeleton(model.config.clone(), &pruned_layout(model.config.n_layers, 0, 1))?,
    };
    Ok(compare(cost_report(&baseline, args.seq_len, opts), cost_report(&model, args.seq_len, opts)))
}

pub fn count_cmd(args: CountArgs) -> Result<()> {
    let c = count(&args)?;
    if args.json {
        return print_json(&c);
    }
    println!("{:<28} {:>14} {:>14}", "", "baseline", "model");
    println!("{:<28} {:>14} {:>14}", "params (total)", c.baseline.params_total, c.model.params_total);
    println!(
        "{:<28} {:>14} {:>14}",
        "params (non-embedding)", c.baseline.params_excluding_embeddings, c.model.params_excluding_embeddings
    );
    println!(
        "{:<28} {:>14} {:>14}",
        format!("FLOPs/example (L={})", args.seq_len),
        c.baseline.flops_per_example,
        c.model.flops_per_example
    );
    println!("param reduction   {:>6.2}%", c.param_reduction);
    println!("FLOPs remaining   {:>6.2}%", c.flops_remaining);
    if c.model.pooler_counted {
        println!("(counts include a d×d pooler)");
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    static_model: bool,
    flops_per_example: u64,
    result: headroute::accounting::BenchResult,
}

pub fn bench_cmd(source: ModelSource, cfg: BenchConfig, json: bool) -> Result<()> {
    let model = match source {
        ModelSource::Checkpoint(p) => load(p)?,
        ModelSource::Preset { converted, m } => preset_model(converted, m, cfg.seed)?,
    };
    let result = bench(&model, &cfg)?;
    let report = BenchReport {
        static_model: verify_static(&model),
        flops_per_example: cost_report(&model, cfg.seq_len, CountOptions::default()).flops_per_example,
        result,
    };
    if json {
        return print_json(&report);
    }
    let r = &report.result;
    println!("batch {} x seq_len {} ({} timed iterations)", r.batch, r.seq_len, r.timed_iters);
    println!("throughput  {:.2} examples/s (median)", r.throughput);
    println!("latency     {:.3} ms/example", r.latency_ms);
    Ok(())
}

pub fn eval_cmd(model: &Path, data: &Path, split: Split, batch_size: usize, json: bool) -> Result<()> {
    let model: Encoder<f32> = load(model)?;
    let ds = load_split(data, &model.config, split)?;
    let accuracy = evaluate(&model, &ds, batch_size)?;
    if json {
        return print_json(&serde_json::json!({ "accuracy": accuracy, "examples": ds.len() }));
    }
    println!("accuracy {accuracy:.4} on {} examples", ds.len());
    Ok(())
}

pub fn gradcheck_cmd(seed: u64, json: bool) -> Result<()> {
    let mut checks = op_checks(seed)?;
    checks.push(model_check(seed)?);
    if json {
        print_json(&checks)?;
    } else {
        for c in &checks {
            print_check(c);
        }
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        bail!(NumericFailure(format!("{failed} gradient check(s) exceeded tolerance")));
    }
    Ok(())
}

fn print_check(c: &CheckOutcome) {
    let verdict = if c.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} {:<20} max rel err {:.3e} (tol {:.0e}, {} elements)", c.name, c.max_rel_error, c.tolerance, c.elements);
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub z: usize,
    pub m: usize,
    pub pre_prune_acc: f64,
    pub post_prune_acc: f64,
    pub diff: f64,
    pub final_loss: f64,
    /// Validation usage frequencies of each routed layer before pruning.
    pub usage: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AblationReport<'a> {
    config: &'a RunConfig,
    rows: Vec<AblationRow>,
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad list entry `{t}`: {e}")).into())
        })
        .collect()
}

pub fn ablate_cmd(config: &Path, ks: &[usize], ms: &[usize], out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let h = cfg.model.h;
    for &k in ks {
        let mut tc = cfg.train.clone();
        tc.k = k;
        tc.validate(cfg.model.n_layers, h)?;
    }
    if let Some(&m) = ms.iter().find(|&&m| m == 0 || m > h) {
        return Err(Error::Config(format!("m must lie in 1..={h}, got {m}")).into());
    }
    let splits = cfg.data.splits(cfg.model.max_len, cfg.model.n_classes)?;
    let valid = splits.valid.as_ref().unwrap_or(&splits.train);
    let bs = cfg.train.batch_size;

    let mut rows = Vec::new();
    for &k in ks {
        let mut tc = cfg.train.clone();
        tc.k = k;
        let mut model = Encoder::<f32>::new(cfg.model.clone())?;
        let report = train(&mut model, &splits.train, Some(valid), &tc, |_| Ok(()))?;
        let pre = evaluate(&model, valid, bs)?;
        let usage = collect_usage(&model, valid, "valid", bs)?;
        let freqs = usage
            .layers
            .iter()
            .map(|r| frequencies(r, usage.k))
            .collect::<headroute::Result<Vec<_>>>()?;
        for &m in ms {
            let (pruned, _) = prune_model(&model, &usage, m)?;
            let post = evaluate(&pruned, valid, bs)?;
            rows.push(AblationRow {
                k,
                z: tc.target_modified_layers,
                m,
                pre_prune_acc: pre,
                post_prune_acc: post,
                diff: post - pre,
                final_loss: report.final_loss,
                usage: freqs.clone(),
            });
        }
    }
    write_atomic(out, &json_bytes(&AblationReport { config: &cfg, rows: rows.clone() })?)?;
    println!("{:>3} {:>3} {:>3} {:>13} {:>14} {:>8}", "k", "Z", "m", "Pre-Prune Acc", "Post-Prune Acc", "Diff");
    for r in &rows {
        println!(
            "{:>3} {:>3} {:>3} {:>13.4} {:>14.4} {:>+8.4}",
            r.k, r.z, r.m, r.pre_prune_acc, r.post_prune_acc, r.diff
        );
    }
    Ok(())
}
