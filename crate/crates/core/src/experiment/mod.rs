//! Experiment drivers behind the command-line tool: data loading, repeated
//! seeded training runs, and CSV/JSON reports.
//!
//! Every run writes its per-epoch metrics to `<out_dir>/metrics/`, and each
//! command writes `<command>_report.csv` and `<command>_summary.json`. CSV
//! files start with a timestamp comment line and are otherwise byte-identical
//! across reruns with the same configuration.

mod config;

pub use config::{DataSource, DistillMode, ExperimentConfig, Settings, TraceSelection, KEYS};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{generate_blob_split, read_csv, read_idx, BlobData, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, WeightStrategy};
use crate::models::{ModelParams, ModelSpec};
use crate::numerics::std_dev;
use crate::training::{
    build_teacher_cache, evaluate, timestamp_line, train, write_metrics_csv, LossSelector, Split,
    TeacherCache, TrainOutcome, WeightTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    TrainBaseline,
    Distill,
    TfNkd,
    SweepTemp,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::TrainBaseline => "train-baseline",
            Command::Distill => "distill",
            Command::TfNkd => "tfnkd",
            Command::SweepTemp => "sweep-temp",
        }
    }

    fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

/// Final numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub seed: u64,
    /// Test split, after the last epoch.
    pub top1: f64,
    pub topk: f64,
    /// Training objective and its terms, averaged over the last epoch.
    pub mean_loss: f64,
    pub loss_ce: f64,
    pub loss_soft: f64,
    pub loss_distributed: f64,
    pub clamp_events: usize,
    /// Wall-clock seconds; kept out of the CSV so reruns stay byte-identical.
    pub runtime_secs: f64,
}

impl ReportRow {
    fn values(&self) -> [f64; 6] {
        [
            self.top1,
            self.topk,
            self.mean_loss,
            self.loss_ce,
            self.loss_soft,
            self.loss_distributed,
        ]
    }
}

/// Mean and population standard deviation over the seeds of one label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub label: String,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub topk_mean: f64,
    pub topk_std: f64,
    /// Means and std-devs of the loss columns in [`REPORT_COLUMNS`] order.
    pub loss_mean: [f64; 4],
    pub loss_std: [f64; 4],
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "label",
    "seed",
    "top1",
    "topk",
    "mean_loss",
    "loss_ce",
    "loss_soft",
    "loss_distributed",
    "clamp_events",
];

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    /// Command-specific extras (teacher digest, best temperature, ...).
    pub notes: BTreeMap<String, Value>,
    /// Weight traces as `(label, seed, trace)`; written as separate CSVs.
    #[serde(skip)]
    pub traces: Vec<(String, u64, WeightTrace)>,
}

impl Report {
    fn new(command: Command, config: &ExperimentConfig) -> Self {
        Report {
            command: command.name().to_string(),
            config: config.snapshot.clone(),
            rows: Vec::new(),
            aggregates: Vec::new(),
            notes: BTreeMap::new(),
            traces: Vec::new(),
        }
    }

    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// Recomputes aggregates, keeping labels in first-appearance order.
    fn aggregate_rows(&mut self) {
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        self.aggregates = labels
            .iter()
            .map(|label| {
                let rows: Vec<&ReportRow> =
                    self.rows.iter().filter(|r| r.label == *label).collect();
                let col = |k: usize| -> Vec<f64> { rows.iter().map(|r| r.values()[k]).collect() };
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let mut loss_mean = [0.0; 4];
                let mut loss_std = [0.0; 4];
                for k in 0..4 {
                    loss_mean[k] = mean(&col(k + 2));
                    loss_std[k] = std_dev(&col(k + 2));
                }
                Aggregate {
                    label: label.to_string(),
                    runs: rows.len(),
                    top1_mean: mean(&col(0)),
                    top1_std: std_dev(&col(0)),
                    topk_mean: mean(&col(1)),
                    topk_std: std_dev(&col(1)),
                    loss_mean,
                    loss_std,
                }
            })
            .collect();
    }

    /// Per-run rows, then a `mean` and a `std` row per label.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let f6 = |x: f64| format!("{x:.6}");
        let f10 = |x: f64| format!("{x:.10}");
        let mut out: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.seed.to_string(),
                    f6(r.top1),
                    f6(r.topk),
                    f10(r.mean_loss),
                    f10(r.loss_ce),
                    f10(r.loss_soft),
                    f10(r.loss_distributed),
                    r.clamp_events.to_string(),
                ]
            })
            .collect();
        for a in &self.aggregates {
            for (tag, top1, topk, losses) in [
                ("mean", a.top1_mean, a.topk_mean, a.loss_mean),
                ("std", a.top1_std, a.topk_std, a.loss_std),
            ] {
                let mut row = vec![a.label.clone(), tag.to_string(), f6(top1), f6(topk)];
                row.extend(losses.iter().map(|&x| f10(x)));
                row.push(String::new());
                out.push(row);
            }
        }
        out
    }

    /// Writes `<stem>_report.csv` (timestamp line, `# key = value` config
    /// lines, table) and `<stem>_summary.json`.
    fn write(&self, out_dir: &Path, stem: &str) -> Result<()> {
        let csv_path = out_dir.join(format!("{stem}_report.csv"));
        let mut text = timestamp_line();
        for (k, v) in &self.config {
            text.push_str(&format!("# {k} = {v}\n"));
        }
        let mut body = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut body);
            let to_io = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e.to_string()));
            w.write_record(REPORT_COLUMNS).map_err(to_io)?;
            for row in self.csv_rows() {
                w.write_record(&row).map_err(to_io)?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
        }
        let mut bytes = text.into_bytes();
        bytes.extend(body);
        write_bytes(&csv_path, &bytes)?;

        let json_path = out_dir.join(format!("{stem}_summary.json"));
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::io(&json_path, std::io::Error::other(e)))?;
        write_bytes(&json_path, &json)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.aggregates {
            writeln!(
                f,
                "{:<24} top1 {:.4} ± {:.4}  topk {:.4} ± {:.4}  ({} runs)",
                a.label, a.top1_mean, a.top1_std, a.topk_mean, a.topk_std, a.runs
            )?;
        }
        if let Some(Value::String(line)) = self.notes.get("summary") {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Training and test data, plus the generator output for synthetic data.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub blobs: Option<BlobData>,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    Ok(match source {
        DataSource::Blobs {
            spec,
            test_per_class,
        } => {
            let (blobs, test) = generate_blob_split(spec, *test_per_class)?;
            LoadedData {
                train: blobs.dataset.clone(),
                test,
                blobs: Some(blobs),
            }
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => {
            let train = read_idx(train_images, train_labels, *num_classes)?;
            let test = read_idx(test_images, test_labels, Some(train.num_classes()))?;
            LoadedData {
                train,
                test,
                blobs: None,
            }
        }
        DataSource::Csv {
            train,
            test,
            num_classes,
        } => LoadedData {
            train: read_csv(train, *num_classes)?,
            test: read_csv(test, *num_classes)?,
            blobs: None,
        },
    })
}

/// Objective of one labelled run; resolved to a [`LossSelector`] per run.
#[derive(Debug, Clone, Copy)]
enum Objective {
    Ce,
    LabelSmooth(f64),
    Nkd(DistillConfig),
    ClassicalKd { alpha: f64, lambda: f64 },
    TfNkd(WeightStrategy),
}

impl Objective {
    fn selector<'a>(&self, cache: Option<&'a TeacherCache>) -> Result<LossSelector<'a>> {
        let need = || Error::Precondition("this objective needs a teacher cache".into());
        Ok(match *self {
            Objective::Ce => LossSelector::Ce,
            Objective::LabelSmooth(alpha_ls) => LossSelector::LabelSmooth { alpha_ls },
            Objective::Nkd(config) => LossSelector::Nkd {
                cache: cache.ok_or_else(need)?,
                config,
            },
            Objective::ClassicalKd { alpha, lambda } => LossSelector::ClassicalKd {
                cache: cache.ok_or_else(need)?,
                alpha,
                lambda,
            },
            Objective::TfNkd(strategy) => LossSelector::TfNkd { strategy },
        })
    }
}

fn ce_or_smooth(alpha_ls: f64) -> Objective {
    if alpha_ls > 0.0 {
        Objective::LabelSmooth(alpha_ls)
    } else {
        Objective::Ce
    }
}

/// Shared state of one command invocation.
struct Runner<'a> {
    config: &'a ExperimentConfig,
    data: &'a LoadedData,
    cache: Option<&'a TeacherCache>,
    student: ModelSpec,
}

impl Runner<'_> {
    /// Trains `objective` once per seed and writes each run's metrics and
    /// checkpoint. Runs go to threads when `parallel` is set; results are
    /// always returned in seed order.
    fn run(
        &self,
        label: &str,
        objective: Objective,
        trace_ids: &[SampleId],
    ) -> Result<Vec<(ReportRow, TrainOutcome)>> {
        let selector = objective.selector(self.cache)?;
        let one = |seed: u64| -> Result<(ReportRow, TrainOutcome)> {
            let cfg = crate::training::TrainConfig {
                seed,
                ..self.config.train.clone()
            };
            // traces are kept for the first seed only
            let ids = if seed == self.config.seeds[0] {
                trace_ids
            } else {
                &[]
            };
            let start = Instant::now();
            let outcome = train(
                &self.student,
                &self.data.train,
                &self.data.test,
                selector,
                &cfg,
                ids,
            )
            .map_err(|e| self.postmortem(e, label, seed))?;
            Ok((
                row_from(label, seed, &outcome, start.elapsed().as_secs_f64())?,
                outcome,
            ))
        };
        let one = &one;
        let results: Vec<Result<(ReportRow, TrainOutcome)>> = if self.config.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .config
                    .seeds
                    .iter()
                    .map(|&seed| scope.spawn(move || one(seed)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            })
        } else {
            self.config.seeds.iter().map(|&seed| one(seed)).collect()
        };
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            let (row, outcome) = r?;
            let stem = format!("{}_seed{}", file_label(label), row.seed);
            write_metrics_csv(
                &self
                    .config
                    .out_dir
                    .join("metrics")
                    .join(format!("{stem}.csv")),
                &outcome.metrics,
            )?;
            outcome.params.save(
                &self
                    .config
                    .out_dir
                    .join("checkpoints")
                    .join(format!("{stem}.ckpt")),
            )?;
            out.push((row, outcome));
        }
        Ok(out)
    }

    /// On a numeric failure, dumps the offending batch next to the reports.
    fn postmortem(&self, err: Error, label: &str, seed: u64) -> Error {
        let Error::Diverged { sample_ids, .. } = &err else {
            return err;
        };
        let path = self
            .config
            .out_dir
            .join(format!("postmortem_{}_seed{seed}.txt", file_label(label)));
        let mut text = format!("run {label} seed {seed}\n{err}\n");
        text.push_str("sample_id,label_row,input_row,teacher_logits\n");
        for id in sample_ids {
            let Some(pos) = self.data.train.position_of(*id) else {
                continue;
            };
            let teacher = self
                .cache
                .and_then(|c| c.get(*id))
                .map(|t| format!("{t:?}"))
                .unwrap_or_default();
            text.push_str(&format!(
                "{id},{:?},{:?},{teacher}\n",
                self.data.train.labels().values().row(pos),
                self.data.train.inputs().row(pos),
            ));
        }
        // the original error matters more than a failed dump
        let _ = write_bytes(&path, text.as_bytes());
        err
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn row_from(
    label: &str,
    seed: u64,
    outcome: &TrainOutcome,
    runtime_secs: f64,
) -> Result<ReportRow> {
    let missing = || Error::Contract("training produced no metrics".into());
    let test = outcome.final_record(Split::Test).ok_or_else(missing)?;
    let train = outcome.final_record(Split::Train).ok_or_else(missing)?;
    Ok(ReportRow {
        label: label.to_string(),
        seed,
        top1: test.top1,
        topk: test.topk,
        mean_loss: train.mean_loss,
        loss_ce: train.loss_ce,
        loss_soft: train.loss_soft,
        loss_distributed: train.loss_distributed,
        clamp_events: train.clamp_events,
        runtime_secs,
    })
}

fn model_spec(data: &LoadedData, hidden: &[usize]) -> Result<ModelSpec> {
    ModelSpec::new(
        data.train.input_dim(),
        hidden.to_vec(),
        data.train.num_classes(),
    )
}

/// Path of the teacher cache stored beside a checkpoint.
pub fn cache_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cache")
}

/// Runs one command end to end and writes its reports.
pub fn run_command(command: Command, config: &ExperimentConfig) -> Result<Report> {
    let data = load_data(&config.data)?;
    run_command_with_data(command, config, &data)
}

/// Like [`run_command`] with already loaded data.
pub fn run_command_with_data(
    command: Command,
    config: &ExperimentConfig,
    data: &LoadedData,
) -> Result<Report> {
    create_dir(&config.out_dir)?;
    create_dir(&config.out_dir.join("metrics"))?;
    create_dir(&config.out_dir.join("checkpoints"))?;
    let mut report = Report::new(command, config);
    match command {
        Command::TrainTeacher => train_teacher(config, data, &mut report)?,
        Command::TrainBaseline => {
            let runner = Runner {
                config,
                data,
                cache: None,
                student: model_spec(data, &config.student_hidden)?,
            };
            let label = if config.student_alpha_ls > 0.0 {
                format!("baseline-ls{}", config.student_alpha_ls)
            } else {
                "baseline".to_string()
            };
            let runs = runner.run(&label, ce_or_smooth(config.student_alpha_ls), &[])?;
            report.rows.extend(runs.into_iter().map(|(r, _)| r));
        }
        Command::Distill | Command::SweepTemp => distill(command, config, data, &mut report)?,
        Command::TfNkd => tfnkd(config, data, &mut report)?,
    }
    report.aggregate_rows();
    report.write(&config.out_dir, &command.file_stem())?;
    Ok(report)
}

fn train_teacher(config: &ExperimentConfig, data: &LoadedData, report: &mut Report) -> Result<()> {
    let spec = model_spec(data, &config.teacher_hidden)?;
    let cfg = config.teacher_train_config();
    let label = if config.teacher_alpha_ls > 0.0 {
        format!("teacher-ls{}", config.teacher_alpha_ls)
    } else {
        "teacher".to_string()
    };
    let start = Instant::now();
    let outcome = train(
        &spec,
        &data.train,
        &data.test,
        ce_or_smooth(config.teacher_alpha_ls).selector(None)?,
        &cfg,
        &[],
    )?;
    let row = row_from(&label, cfg.seed, &outcome, start.elapsed().as_secs_f64())?;
    if let Some(dir) = config.teacher_checkpoint.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir(dir)?;
        }
    }
    outcome.params.save(&config.teacher_checkpoint)?;
    let cache = build_teacher_cache(&outcome.params, &data.train)?;
    let cache_file = cache_path(&config.teacher_checkpoint);
    cache.save(&cache_file)?;
    write_metrics_csv(
        &config.out_dir.join("metrics").join(format!(
            "{}_seed{}.csv",
            file_label(&label),
            cfg.seed
        )),
        &outcome.metrics,
    )?;
    let mean_tt = cache.mean_target_prob(&data.train)?;
    report
        .notes
        .insert("teacher_digest".into(), json!(cache.digest()));
    report
        .notes
        .insert("teacher_mean_target_prob".into(), json!(mean_tt));
    report.notes.insert(
        "checkpoint".into(),
        json!(config.teacher_checkpoint.display().to_string()),
    );
    report
        .notes
        .insert("cache".into(), json!(cache_file.display().to_string()));
    report.notes.insert(
        "summary".into(),
        json!(format!(
            "{label}: test top1 {:.4}, mean teacher target probability {mean_tt:.4}",
            row.top1
        )),
    );
    report.rows.push(row);
    Ok(())
}

/// Loads the teacher checkpoint and checks it matches the data.
fn load_teacher(config: &ExperimentConfig, data: &LoadedData) -> Result<ModelParams> {
    if !config.teacher_checkpoint.exists() {
        return Err(Error::Config(format!(
            "teacher checkpoint {} not found; run train-teacher first",
            config.teacher_checkpoint.display()
        )));
    }
    let teacher = ModelParams::load(&config.teacher_checkpoint)?;
    let spec = teacher.spec();
    if spec.input_dim != data.train.input_dim() || spec.num_classes != data.train.num_classes() {
        return Err(Error::Config(format!(
            "teacher checkpoint expects {} inputs / {} classes, data has {} / {}",
            spec.input_dim,
            spec.num_classes,
            data.train.input_dim(),
            data.train.num_classes()
        )));
    }
    Ok(teacher)
}

fn distill(
    command: Command,
    config: &ExperimentConfig,
    data: &LoadedData,
    report: &mut Report,
) -> Result<()> {
    let teacher = load_teacher(config, data)?;
    let digest = teacher.digest();
    let cache = build_teacher_cache(&teacher, &data.train)?;
    cache.save(&config.out_dir.join("distill_teacher.cache"))?;
    let runner = Runner {
        config,
        data,
        cache: Some(&cache),
        student: model_spec(data, &config.student_hidden)?,
    };

    let jobs: Vec<(String, Objective)> = if command == Command::SweepTemp {
        config
            .lambdas
            .iter()
            .map(|&lambda| {
                let dc = DistillMode::Nkd.distill_config(DistillConfig {
                    lambda,
                    ..config.distill
                });
                (format!("lambda={lambda}"), Objective::Nkd(dc))
            })
            .collect()
    } else {
        config
            .modes
            .iter()
            .map(|&mode| {
                let objective = match mode {
                    DistillMode::ClassicalKd => Objective::ClassicalKd {
                        alpha: config.distill.alpha,
                        lambda: config.distill.lambda,
                    },
                    m => Objective::Nkd(m.distill_config(config.distill)),
                };
                (mode.name().to_string(), objective)
            })
            .collect()
    };
    // sanity: the teacher should fit the training set at least as well as
    // any student; reported, not enforced
    let teacher_train_top1 = evaluate(&teacher, &data.train, config.train.topk)?.top1;
    let mut above_teacher = Vec::new();
    let mut max_residual: f64 = 0.0;
    for (label, objective) in jobs {
        for (row, outcome) in runner.run(&label, objective, &[])? {
            max_residual = max_residual.max(outcome.max_additivity_residual);
            if let Some(rec) = outcome.final_record(Split::Train) {
                if rec.top1 > teacher_train_top1 {
                    above_teacher.push(format!("{label}/seed{}", row.seed));
                }
            }
            report.rows.push(row);
        }
    }
    report
        .notes
        .insert("teacher_train_top1".into(), json!(teacher_train_top1));
    report.notes.insert(
        "students_above_teacher_train_top1".into(),
        json!(above_teacher),
    );

    // the teacher is read-only throughout
    if ModelParams::load(&config.teacher_checkpoint)?.digest() != digest || cache.digest() != digest
    {
        return Err(Error::Contract(
            "teacher checkpoint changed during distillation".into(),
        ));
    }
    report.notes.insert("teacher_digest".into(), json!(digest));
    report.notes.insert(
        "teacher_mean_target_prob".into(),
        json!(cache.mean_target_prob(&data.train)?),
    );
    report
        .notes
        .insert("max_additivity_residual".into(), json!(max_residual));

    if command == Command::SweepTemp {
        report.aggregate_rows();
        let best = report.aggregates.iter().zip(&config.lambdas).fold(
            None::<(&Aggregate, f64)>,
            |best, (a, &l)| match best {
                Some((b, _)) if b.top1_mean >= a.top1_mean => best,
                _ => Some((a, l)),
            },
        );
        if let Some((a, lambda)) = best {
            report.notes.insert("best_lambda".into(), json!(lambda));
            report.notes.insert(
                "summary".into(),
                json!(format!(
                    "best lambda: {lambda} (mean top1 {:.4} over {} runs)",
                    a.top1_mean, a.runs
                )),
            );
        }
    }
    Ok(())
}

/// Easiest and hardest training samples for weight tracing.
fn trace_ids(config: &ExperimentConfig, data: &LoadedData) -> Vec<SampleId> {
    match (&config.trace, &data.blobs) {
        (TraceSelection::Ids(ids), _) => ids.clone(),
        (TraceSelection::Auto, Some(blobs)) => {
            let (easy, hard) = blobs.easiest_and_hardest();
            vec![easy, hard]
        }
        _ => Vec::new(),
    }
}

fn trace_summary(trace: &WeightTrace, ids: &[SampleId]) -> Value {
    let per_sample: Vec<Value> = ids
        .iter()
        .map(|&id| {
            let (std_w, std_st) = trace.stability(id);
            json!({
                "sample_id": id,
                "weight_std": std_w,
                "student_target_std": std_st,
                "student_target_thirds": trace.thirds_mean(id),
            })
        })
        .collect();
    Value::Array(per_sample)
}

fn tfnkd(config: &ExperimentConfig, data: &LoadedData, report: &mut Report) -> Result<()> {
    let runner = Runner {
        config,
        data,
        cache: None,
        student: model_spec(data, &config.student_hidden)?,
    };
    if config.tfnkd_baseline {
        let runs = runner.run("baseline", Objective::Ce, &[])?;
        report.rows.extend(runs.into_iter().map(|(r, _)| r));
    }
    let ids = trace_ids(config, data);
    if let (Some(&easy), Some(&hard)) = (ids.first(), ids.get(1)) {
        if config.trace == TraceSelection::Auto {
            report
                .notes
                .insert("trace_samples".into(), json!({"easy": easy, "hard": hard}));
        }
    }
    let mut traces = serde_json::Map::new();
    for &strategy in &config.strategies {
        let label = format!("tfnkd-{}", strategy.name());
        for (row, outcome) in runner.run(&label, Objective::TfNkd(strategy), &ids)? {
            if let Some(trace) = outcome.trace {
                let path =
                    config
                        .out_dir
                        .join(format!("trace_{}_seed{}.csv", strategy.name(), row.seed));
                trace.write_csv(&path)?;
                traces.insert(strategy.name().to_string(), trace_summary(&trace, &ids));
                report.traces.push((label.clone(), row.seed, trace));
            }
            report.rows.push(row);
        }
    }
    if !traces.is_empty() {
        report.notes.insert("trace".into(), Value::Object(traces));
    }
    Ok(())
}
