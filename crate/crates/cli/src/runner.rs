//! Executes configured experiments and writes the artifacts:
//! `summary.json`, `diagnostics.csv`, and `rc_curve.csv` for runs,
//! `sweep.csv` for sweeps, `ablation.csv` for the component grid, and
//! `theory_report.json` for the sign-agreement suite.
//!
//! Everything is a pure function of (config, seeds): no timestamps or
//! absolute paths are written, so identical inputs produce byte-identical
//! outputs.

use crate::config::{Dataset, Method, RunConfig};
use deyo_core::data::{
    build_colored_mnist, make_stream, parse_idx_images, parse_idx_labels, synth_fallback, Split,
};
use deyo_core::deyo::{ablation_grid, run_stream, ComponentFlags, RunResult};
use deyo_core::error::{Error, Result};
use deyo_core::metrics::{
    area_partition, entropy_quartile_accuracy, group_accuracies, rc_curve, AreaPartition,
    EvalRecord, GroupAccuracies, QuartileAccuracy,
};
use deyo_core::model::{ModelState, PlpdFilter, PretrainConfig};
use deyo_core::numerics::{sub_seed, Rng};
use deyo_core::{AdaptConfig, Batch, LabeledImage, RunCounters, SampleRecord, ScenarioSpec};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// Stream tags for deriving independent per-seed randomness.
const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_STREAM: u64 = 4;
const TAG_TRANSFORM: u64 = 5;
const TAG_ANALYSIS: u64 = 6;

#[derive(Debug, Clone, serde::Serialize)]
pub struct AccuracyBlock {
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub worst_group_id: usize,
    pub group_acc: BTreeMap<usize, f64>,
    pub group_counts: BTreeMap<usize, usize>,
}

impl From<GroupAccuracies> for AccuracyBlock {
    fn from(g: GroupAccuracies) -> Self {
        AccuracyBlock {
            avg_acc: g.average,
            worst_group_acc: g.worst_group,
            worst_group_id: g.worst_group_id,
            group_acc: g.per_group,
            group_counts: g.counts,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Absent when the model came from a checkpoint.
    pub pretrain_train_accuracy: Option<f64>,
    /// Frozen (pre-adaptation) evaluation of the same stream.
    pub frozen: AccuracyBlock,
    /// The configured method's run.
    pub run: AccuracyBlock,
    pub counters: RunCounters,
    /// Confidence-metric comparison on the frozen worst group.
    pub aurc_entropy: f64,
    pub aurc_plpd: f64,
    pub entropy_quartiles: QuartileAccuracy,
    pub areas: AreaPartition,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Aggregate {
    pub mean_avg_acc: f64,
    pub median_avg_acc: f64,
    pub mean_worst_group_acc: f64,
    pub median_worst_group_acc: f64,
    pub mean_aurc_entropy: f64,
    pub mean_aurc_plpd: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfigEcho {
    pub dataset: String,
    pub method: String,
    pub scenario_kind: String,
    pub batch_size: usize,
    pub adapt: AdaptConfig,
    pub norm: String,
    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_plpd_threshold: Option<f64>,
    pub train_n: usize,
    pub test_n: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub config: ConfigEcho,
    pub per_seed: Vec<SeedSummary>,
    pub aggregate: Aggregate,
}

fn echo(config: &RunConfig) -> ConfigEcho {
    ConfigEcho {
        dataset: config.dataset.name().to_string(),
        method: config.method.name(),
        scenario_kind: config.scenario.kind.name().to_string(),
        batch_size: config.scenario.batch_size,
        adapt: config.adapt.clone(),
        norm: config.model.norm.name().to_string(),
        hidden: config.model.hidden,
        pretrain_epochs: config.pretrain.epochs,
        pretrain_lr: config.pretrain.lr,
        pretrain_plpd_threshold: config.pretrain.plpd_threshold,
        train_n: config.data.train_n,
        test_n: config.data.test_n,
        seeds: config.seeds.clone(),
    }
}

fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    match split {
        Split::Train => (
            root.join("train-images-idx3-ubyte"),
            root.join("train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            root.join("t10k-images-idx3-ubyte"),
            root.join("t10k-labels-idx1-ubyte"),
        ),
    }
}

/// Loads one split: synthetic glyphs or IDX-backed digits, both run through
/// the colored construction.
pub fn load_split(config: &RunConfig, split: Split, rng: &mut Rng) -> Result<Vec<LabeledImage>> {
    let n = match split {
        Split::Train => config.data.train_n,
        Split::Test => config.data.test_n,
    };
    match config.dataset {
        Dataset::Synth => {
            if n == 0 {
                return Err(Error::Config(
                    "synth dataset needs data.train_n/data.test_n >= 1".into(),
                ));
            }
            synth_fallback(n, split, rng)
        }
        Dataset::ColoredMnist => {
            let (img_path, lbl_path) = mnist_paths(&config.data.root, split);
            if !img_path.exists() || !lbl_path.exists() {
                return Err(Error::Config(format!(
                    "missing MNIST IDX files; expected\n  {}\n  {}\n\
                     point data.root (or the {} env var) at a directory holding the \
                     standard IDX files, or use dataset=synth",
                    img_path.display(),
                    lbl_path.display(),
                    crate::config::DATA_ROOT_ENV,
                )));
            }
            let mut digits = parse_idx_images(&std::fs::read(&img_path)?)?;
            let mut labels = parse_idx_labels(&std::fs::read(&lbl_path)?)?;
            if digits.len() != labels.len() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "{} images but {} labels in {}",
                        digits.len(),
                        labels.len(),
                        img_path.display()
                    ),
                });
            }
            if n > 0 && n < digits.len() {
                let mut idx: Vec<usize> = (0..digits.len()).collect();
                rng.shuffle(&mut idx);
                idx.truncate(n);
                digits = idx.iter().map(|&i| digits[i].clone()).collect();
                labels = idx.iter().map(|&i| labels[i]).collect();
            }
            build_colored_mnist(&digits, &labels, split, rng)
        }
    }
}

/// Obtains the model for one seed: a checkpoint if configured, otherwise a
/// fresh pretraining run. Returns the train accuracy when pretraining ran.
pub fn prepare_model(
    config: &RunConfig,
    train: &[LabeledImage],
    seed: u64,
) -> Result<(ModelState, Option<f64>)> {
    if let Some(path) = &config.model.checkpoint {
        return Ok((ModelState::load(path)?, None));
    }
    let input_dim = train
        .first()
        .map(|s| s.image.data.len())
        .ok_or(Error::EmptyInput("prepare_model: train set"))?;
    let mut model = ModelState::new(
        input_dim,
        config.model.hidden,
        2,
        config.model.norm,
        &mut Rng::new(sub_seed(seed, TAG_INIT)),
    )?;
    let cfg = PretrainConfig {
        epochs: config.pretrain.epochs,
        lr: config.pretrain.lr,
        momentum: config.pretrain.momentum,
        batch_size: config.pretrain.batch_size,
        plpd_filter: config.pretrain.plpd_threshold.map(|threshold| PlpdFilter {
            threshold,
            warmup_frac: config.pretrain.warmup_frac,
            transform: config.adapt.transform,
        }),
    };
    let report = model.pretrain(train, &cfg, &mut Rng::new(sub_seed(seed, TAG_PRETRAIN)))?;
    Ok((model, Some(report.final_train_accuracy)))
}

fn build_stream(config: &RunConfig, test: &[LabeledImage], seed: u64) -> Result<Vec<Batch>> {
    let mut spec = ScenarioSpec::new(
        config.scenario.kind,
        config.scenario.batch_size,
        sub_seed(seed, TAG_STREAM),
    );
    spec.mix = config.scenario_mix();
    make_stream(test, &spec)
}

/// Frozen-model pass with PLPD computed for every sample: the source for
/// the confidence-metric analyses and for method=none diagnostics.
fn frozen_analysis(
    model: &ModelState,
    stream: &[Batch],
    base: &AdaptConfig,
    seed: u64,
) -> Result<RunResult> {
    let mut cfg = base.clone();
    cfg.lr = 0.0;
    cfg.use_ent_select = false;
    cfg.use_plpd_select = true;
    let mut frozen = model.clone();
    run_stream(&mut frozen, stream, &cfg, sub_seed(seed, TAG_ANALYSIS))
}

fn records_to_groups(records: &[SampleRecord]) -> Result<GroupAccuracies> {
    group_accuracies(records.iter().map(|r| (r.group, r.correct)))
}

struct SeedOutput {
    summary: SeedSummary,
    run_records: Vec<SampleRecord>,
    rc_rows: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn run_one_seed(config: &RunConfig, seed: u64) -> Result<SeedOutput> {
    let mut data_rng = Rng::new(sub_seed(seed, TAG_DATA));
    let train = load_split(config, Split::Train, &mut data_rng)?;
    let test = load_split(config, Split::Test, &mut data_rng)?;
    let (model, pretrain_acc) = prepare_model(config, &train, seed)?;
    let stream = build_stream(config, &test, seed)?;

    let analysis = frozen_analysis(&model, &stream, &config.adapt, seed)?;
    let frozen_groups = records_to_groups(&analysis.records)?;
    let worst_id = frozen_groups.worst_group_id;

    let full_eval = |r: &SampleRecord, confidence: f64| EvalRecord {
        confidence,
        correct: r.correct,
        entropy: r.entropy,
        plpd: r.plpd.unwrap_or(0.0),
        group_id: r.group,
    };
    let worst_records: Vec<&SampleRecord> = analysis
        .records
        .iter()
        .filter(|r| r.group == worst_id)
        .collect();
    let ent_curve = rc_curve(
        &worst_records
            .iter()
            .map(|r| full_eval(r, -r.entropy))
            .collect::<Vec<_>>(),
    )?;
    let plpd_curve = rc_curve(
        &worst_records
            .iter()
            .map(|r| full_eval(r, r.plpd.unwrap_or(0.0)))
            .collect::<Vec<_>>(),
    )?;
    let all_eval: Vec<EvalRecord> = analysis
        .records
        .iter()
        .map(|r| full_eval(r, -r.entropy))
        .collect();
    let quartiles = entropy_quartile_accuracy(&all_eval)?;
    let areas = area_partition(&all_eval, config.adapt.tau_ent, config.adapt.tau_plpd)?;

    let (run_result, run_groups) = if config.method == Method::None {
        let groups = frozen_groups.clone();
        (analysis.clone(), groups)
    } else {
        let mut adapted = model.clone();
        let result = run_stream(
            &mut adapted,
            &stream,
            &config.method_adapt(),
            sub_seed(seed, TAG_TRANSFORM),
        )?;
        let groups = records_to_groups(&result.records)?;
        (result, groups)
    };

    let summary = SeedSummary {
        seed,
        pretrain_train_accuracy: pretrain_acc,
        frozen: frozen_groups.into(),
        run: run_groups.into(),
        counters: run_result.counters,
        aurc_entropy: ent_curve.aurc,
        aurc_plpd: plpd_curve.aurc,
        entropy_quartiles: quartiles,
        areas,
    };
    Ok(SeedOutput {
        summary,
        run_records: run_result.records,
        rc_rows: vec![
            ("entropy".into(), ent_curve.coverage, ent_curve.risk),
            ("plpd".into(), plpd_curve.coverage, plpd_curve.risk),
        ],
    })
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(per_seed: &[SeedSummary]) -> Aggregate {
    let n = per_seed.len() as f64;
    let avg: Vec<f64> = per_seed.iter().map(|s| s.run.avg_acc).collect();
    let worst: Vec<f64> = per_seed.iter().map(|s| s.run.worst_group_acc).collect();
    Aggregate {
        mean_avg_acc: avg.iter().sum::<f64>() / n,
        median_avg_acc: median(avg),
        mean_worst_group_acc: worst.iter().sum::<f64>() / n,
        median_worst_group_acc: median(worst),
        mean_aurc_entropy: per_seed.iter().map(|s| s.aurc_entropy).sum::<f64>() / n,
        mean_aurc_plpd: per_seed.iter().map(|s| s.aurc_plpd).sum::<f64>() / n,
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn diagnostics_csv(seeds: &[(u64, &[SampleRecord])]) -> String {
    let mut out = String::from("seed,batch_idx,entropy,plpd,selected,weight,pred,label,group,area\n");
    for (seed, records) in seeds {
        for r in *records {
            let plpd = r.plpd.map(fmt_f64).unwrap_or_default();
            let area = r.area.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{seed},{},{},{plpd},{},{},{},{},{},{area}",
                r.batch_idx,
                fmt_f64(r.entropy),
                r.selected as u8,
                fmt_f64(r.weight),
                r.pred,
                r.label,
                r.group,
            );
        }
    }
    out
}

fn rc_csv(rows: &[(u64, &[(String, Vec<f64>, Vec<f64>)])]) -> String {
    let mut out = String::from("seed,metric,coverage,risk\n");
    for (seed, metrics) in rows {
        for (metric, coverage, risk) in *metrics {
            for (c, r) in coverage.iter().zip(risk) {
                let _ = writeln!(out, "{seed},{metric},{},{}", fmt_f64(*c), fmt_f64(*r));
            }
        }
    }
    out
}

pub struct RunArtifacts {
    pub summary: RunSummary,
    pub summary_path: PathBuf,
    pub diagnostics_path: PathBuf,
    pub rc_curve_path: PathBuf,
}

/// Executes the configured run for every seed and writes the three
/// artifacts into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.adapt.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut per_seed = Vec::new();
    let mut all_records: Vec<(u64, Vec<SampleRecord>)> = Vec::new();
    let mut all_rc: Vec<(u64, Vec<(String, Vec<f64>, Vec<f64>)>)> = Vec::new();
    for &seed in &config.seeds {
        let out = run_one_seed(config, seed)?;
        per_seed.push(out.summary);
        all_records.push((seed, out.run_records));
        all_rc.push((seed, out.rc_rows));
    }
    let summary = RunSummary {
        config: echo(config),
        aggregate: aggregate(&per_seed),
        per_seed,
    };

    let summary_path = out_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    json.push('\n');
    std::fs::write(&summary_path, json)?;

    let diagnostics_path = out_dir.join("diagnostics.csv");
    let record_refs: Vec<(u64, &[SampleRecord])> = all_records
        .iter()
        .map(|(s, r)| (*s, r.as_slice()))
        .collect();
    std::fs::write(&diagnostics_path, diagnostics_csv(&record_refs))?;

    let rc_curve_path = out_dir.join("rc_curve.csv");
    let rc_refs: Vec<(u64, &[(String, Vec<f64>, Vec<f64>)])> =
        all_rc.iter().map(|(s, r)| (*s, r.as_slice())).collect();
    std::fs::write(&rc_curve_path, rc_csv(&rc_refs))?;

    Ok(RunArtifacts {
        summary,
        summary_path,
        diagnostics_path,
        rc_curve_path,
    })
}

/// One sweep row: the mean over seeds for a single parameter value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub selected: f64,
}

pub fn apply_sweep_value(config: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    match param {
        "tau_plpd" | "tau_ent" | "ent0" => config.set(&format!("adapt.{param}"), value),
        "patch_grid" => {
            config.set("adapt.transform", "patch_shuffle")?;
            config.set("adapt.patch_grid", value)
        }
        "transform_kind" => config.set("adapt.transform", value),
        other => Err(Error::Config(format!(
            "unknown sweep param '{other}' (expected tau_plpd, patch_grid, transform_kind, \
             tau_ent, or ent0)"
        ))),
    }
}

/// Runs the configured method once per value, averaging across seeds, and
/// writes `sweep.csv`.
pub fn sweep(
    config: &RunConfig,
    param: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for value in values {
        let mut cfg = config.clone();
        apply_sweep_value(&mut cfg, param, value)?;
        cfg.adapt.validate()?;
        let mut avg = 0.0;
        let mut worst = 0.0;
        let mut selected = 0.0;
        for &seed in &cfg.seeds {
            let out = run_one_seed(&cfg, seed)?;
            avg += out.summary.run.avg_acc;
            worst += out.summary.run.worst_group_acc;
            selected += out.summary.counters.selected as f64;
        }
        let n = cfg.seeds.len() as f64;
        rows.push(SweepRow {
            param: param.to_string(),
            value: value.clone(),
            avg_acc: avg / n,
            worst_group_acc: worst / n,
            selected: selected / n,
        });
    }
    let mut csv = String::from("param,value,avg_acc,worst_group_acc,selected\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.param,
            row.value,
            fmt_f64(row.avg_acc),
            fmt_f64(row.worst_group_acc),
            fmt_f64(row.selected)
        );
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub index: usize,
    pub label: String,
    pub flags: ComponentFlags,
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub selected: f64,
}

/// Runs all 16 component combinations per seed and writes `ablation.csv`
/// with per-cell means.
pub fn ablation(config: &RunConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    config.adapt.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64); 16];
    let mut labels: Vec<(usize, String, ComponentFlags)> = Vec::new();
    for &seed in &config.seeds {
        let mut data_rng = Rng::new(sub_seed(seed, TAG_DATA));
        let train = load_split(config, Split::Train, &mut data_rng)?;
        let test = load_split(config, Split::Test, &mut data_rng)?;
        let (model, _) = prepare_model(config, &train, seed)?;
        let stream = build_stream(config, &test, seed)?;
        let cells = ablation_grid(&model, &stream, &config.adapt, sub_seed(seed, TAG_TRANSFORM))?;
        if labels.is_empty() {
            labels = cells
                .iter()
                .map(|c| (c.index, c.label.clone(), c.flags))
                .collect();
        }
        for (i, cell) in cells.iter().enumerate() {
            let groups = records_to_groups(&cell.result.records)?;
            acc[i].0 += groups.average;
            acc[i].1 += groups.worst_group;
            acc[i].2 += cell.result.counters.selected as f64;
        }
    }
    let n = config.seeds.len() as f64;
    let rows: Vec<AblationRow> = labels
        .into_iter()
        .zip(acc)
        .map(|((index, label, flags), (a, w, s))| AblationRow {
            index,
            label,
            flags,
            avg_acc: a / n,
            worst_group_acc: w / n,
            selected: s / n,
        })
        .collect();
    let mut csv = String::from(
        "row,label,select_ent,select_plpd,weight_ent,weight_plpd,avg_acc,worst_group_acc,selected\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.label,
            r.flags.select_ent as u8,
            r.flags.select_plpd as u8,
            r.flags.weight_ent as u8,
            r.flags.weight_plpd as u8,
            fmt_f64(r.avg_acc),
            fmt_f64(r.worst_group_acc),
            fmt_f64(r.selected)
        );
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Runs the sign-agreement suite and writes `theory_report.json`.
pub fn verify_theory(
    trials: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<deyo_core::theory::TheoryReport> {
    std::fs::create_dir_all(out_dir)?;
    let report = deyo_core::theory::verify_sign_agreement(trials, seed)?;
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    json.push('\n');
    std::fs::write(out_dir.join("theory_report.json"), json)?;
    Ok(report)
}

/// Pretrains on the configured train split and writes a checkpoint.
pub fn pretrain_to_checkpoint(config: &RunConfig, seed: u64, out: &Path) -> Result<f64> {
    let mut data_rng = Rng::new(sub_seed(seed, TAG_DATA));
    let train = load_split(config, Split::Train, &mut data_rng)?;
    let mut cfg = config.clone();
    cfg.model.checkpoint = None;
    let (model, acc) = prepare_model(&cfg, &train, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    model.save(out)?;
    Ok(acc.unwrap_or(f64::NAN))
}
