//! Plain-text `key = value` experiment configuration.
//!
//! Every key has a default; a config file and command-line overrides replace
//! individual values. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, WeightStrategy};
use crate::models::ModelSpec;
use crate::training::{LrSchedule, MixupMode, TrainConfig};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seeds", "0,1,2,3,4", "comma-separated run seeds"),
    (
        "out_dir",
        "out",
        "directory for reports, metrics and checkpoints",
    ),
    (
        "parallel",
        "false",
        "train independent seeds on separate threads",
    ),
    ("data.source", "blobs", "blobs | idx | csv"),
    ("blobs.classes", "10", "number of classes"),
    ("blobs.dim", "20", "input dimension"),
    ("blobs.train_per_class", "500", "training samples per class"),
    ("blobs.test_per_class", "100", "test samples per class"),
    ("blobs.center_scale", "1.0", "std-dev of class centers"),
    (
        "blobs.noise_sigma",
        "2.2",
        "std-dev of samples around their center",
    ),
    ("blobs.modes_per_class", "1", "Gaussian clusters per class"),
    ("blobs.seed", "0", "dataset seed"),
    ("idx.train_images", "", "IDX image file for training"),
    ("idx.train_labels", "", "IDX label file for training"),
    ("idx.test_images", "", "IDX image file for testing"),
    ("idx.test_labels", "", "IDX label file for testing"),
    (
        "idx.classes",
        "",
        "class count; empty infers it from the training labels",
    ),
    ("csv.train", "", "training CSV"),
    ("csv.test", "", "test CSV"),
    ("csv.classes", "10", "class count"),
    ("teacher.hidden", "128,128", "teacher hidden layer widths"),
    ("teacher.weight_decay", "0.01", "teacher weight decay"),
    (
        "teacher.alpha_ls",
        "0",
        "label smoothing for the teacher (0 = plain CE)",
    ),
    ("teacher.seed", "0", "teacher training seed"),
    (
        "teacher.checkpoint",
        "",
        "teacher checkpoint path; empty means <out_dir>/teacher.ckpt",
    ),
    ("student.hidden", "16", "student hidden layer widths"),
    (
        "student.alpha_ls",
        "0",
        "label smoothing for the baseline student",
    ),
    ("train.epochs", "60", "training epochs"),
    ("train.batch_size", "64", "mini-batch size"),
    ("train.lr", "0.1", "base learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.schedule", "step", "constant | step | cosine"),
    (
        "train.milestones",
        "30,45",
        "step schedule milestones (epochs)",
    ),
    ("train.gamma", "0.1", "step schedule decay factor"),
    ("train.weight_decay", "0.0005", "student weight decay"),
    ("train.topk", "5", "k of the top-k accuracy"),
    ("train.mixup", "off", "off | fixed:<lam> | beta:<alpha>"),
    ("distill.alpha", "1.5", "weight of the non-target term"),
    ("distill.lambda", "1", "temperature of the non-target term"),
    (
        "distill.modes",
        "nkd",
        "baseline, classical-kd, soft, distributed, nkd, perfect",
    ),
    (
        "tfnkd.strategies",
        "st-plus-vt-minus-mean",
        "weight strategies, or `all`",
    ),
    (
        "tfnkd.baseline",
        "true",
        "also train a plain CE baseline row",
    ),
    (
        "tfnkd.trace",
        "auto",
        "auto | off | comma-separated sample ids",
    ),
    (
        "sweep.lambdas",
        "0.5,1,2,3,4,5",
        "temperatures for sweep-temp",
    ),
];

/// Raw string settings: defaults overlaid by a file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), unquote(v.trim()))
    }

    /// Applies every line of a config text. `origin` names it in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{n}: expected `key = value`")))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), n) {
                return Err(Error::Config(format!(
                    "{origin}:{n}: `{k}` already set on line {prev}"
                )));
            }
            self.set(k, unquote(v.trim()))
                .map_err(|e| Error::Config(format!("{origin}:{n}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{key}` is not a registered key"))
    }

    /// Every key with its effective value, sorted by key.
    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

fn parse<T: FromStr>(s: &Settings, key: &str) -> Result<T> {
    let v = s.get(key);
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(s: &Settings, key: &str) -> Result<Vec<T>> {
    let v = s.get(key);
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`")))
        })
        .collect()
}

fn path(s: &Settings, key: &str) -> Result<PathBuf> {
    match s.get(key) {
        "" => Err(Error::Config(format!(
            "`{key}` is required for this data source"
        ))),
        p => Ok(PathBuf::from(p)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        spec: BlobSpec,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: usize,
    },
}

/// Student objective in the distillation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// Both distillation terms off: plain CE through the distillation path.
    Baseline,
    ClassicalKd,
    Soft,
    Distributed,
    Nkd,
    /// Soft term only, with the teacher's target probability forced to 1.
    Perfect,
}

impl DistillMode {
    pub const ALL: [DistillMode; 6] = [
        DistillMode::Baseline,
        DistillMode::ClassicalKd,
        DistillMode::Soft,
        DistillMode::Distributed,
        DistillMode::Nkd,
        DistillMode::Perfect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Baseline => "baseline",
            DistillMode::ClassicalKd => "classical-kd",
            DistillMode::Soft => "soft",
            DistillMode::Distributed => "distributed",
            DistillMode::Nkd => "nkd",
            DistillMode::Perfect => "perfect",
        }
    }

    /// Term switches on top of `base` (alpha and lambda are kept).
    pub fn distill_config(self, base: DistillConfig) -> DistillConfig {
        let (use_soft, use_distributed, perfect_teacher) = match self {
            DistillMode::Baseline | DistillMode::ClassicalKd => (false, false, false),
            DistillMode::Soft => (true, false, false),
            DistillMode::Distributed => (false, true, false),
            DistillMode::Nkd => (true, true, false),
            DistillMode::Perfect => (true, false, true),
        };
        DistillConfig {
            use_soft,
            use_distributed,
            perfect_teacher,
            ..base
        }
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distill mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceSelection {
    Off,
    /// Easiest and hardest training sample by blob margin.
    Auto,
    Ids(Vec<u64>),
}

/// Fully parsed experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: bool,
    pub data: DataSource,
    pub teacher_hidden: Vec<usize>,
    pub teacher_weight_decay: f64,
    pub teacher_alpha_ls: f64,
    pub teacher_seed: u64,
    pub teacher_checkpoint: PathBuf,
    pub student_hidden: Vec<usize>,
    pub student_alpha_ls: f64,
    /// Student schedule; the teacher uses it too, with its own weight decay
    /// and seed.
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub modes: Vec<DistillMode>,
    pub strategies: Vec<WeightStrategy>,
    pub tfnkd_baseline: bool,
    pub trace: TraceSelection,
    pub lambdas: Vec<f64>,
    /// Effective key/value pairs, echoed into every report.
    pub snapshot: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seeds: Vec<u64> = parse_list(s, "seeds")?;
        if seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        let out_dir = PathBuf::from(s.get("out_dir"));
        let data = match s.get("data.source") {
            "blobs" => DataSource::Blobs {
                spec: BlobSpec {
                    num_classes: parse(s, "blobs.classes")?,
                    dim: parse(s, "blobs.dim")?,
                    samples_per_class: parse(s, "blobs.train_per_class")?,
                    center_scale: parse(s, "blobs.center_scale")?,
                    noise_sigma: parse(s, "blobs.noise_sigma")?,
                    seed: parse(s, "blobs.seed")?,
                    modes_per_class: parse(s, "blobs.modes_per_class")?,
                },
                test_per_class: parse(s, "blobs.test_per_class")?,
            },
            "idx" => DataSource::Idx {
                train_images: path(s, "idx.train_images")?,
                train_labels: path(s, "idx.train_labels")?,
                test_images: path(s, "idx.test_images")?,
                test_labels: path(s, "idx.test_labels")?,
                num_classes: match s.get("idx.classes") {
                    "" => None,
                    _ => Some(parse(s, "idx.classes")?),
                },
            },
            "csv" => DataSource::Csv {
                train: path(s, "csv.train")?,
                test: path(s, "csv.test")?,
                num_classes: parse(s, "csv.classes")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "`data.source` must be blobs, idx or csv, got `{other}`"
                )))
            }
        };
        if let DataSource::Blobs { spec, .. } = &data {
            spec.validate().map_err(as_config)?;
        }

        let lr_schedule = match s.get("train.schedule") {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            "step" => LrSchedule::Step {
                milestones: parse_list(s, "train.milestones")?,
                gamma: parse(s, "train.gamma")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "`train.schedule` must be constant, step or cosine, got `{other}`"
                )))
            }
        };
        let mixup = parse_mixup(s.get("train.mixup"))?;
        let train = TrainConfig {
            epochs: parse(s, "train.epochs")?,
            batch_size: parse(s, "train.batch_size")?,
            lr: parse(s, "train.lr")?,
            momentum: parse(s, "train.momentum")?,
            lr_schedule,
            weight_decay: parse(s, "train.weight_decay")?,
            seed: seeds[0],
            topk: parse(s, "train.topk")?,
            mixup,
        };
        train.validate()?;

        let distill = DistillConfig {
            alpha: parse(s, "distill.alpha")?,
            lambda: parse(s, "distill.lambda")?,
            ..DistillConfig::default()
        };
        distill.validate().map_err(as_config)?;
        let modes: Vec<DistillMode> = parse_list(s, "distill.modes")?;
        if modes.is_empty() {
            return Err(Error::Config("`distill.modes` is empty".into()));
        }

        let strategies: Vec<WeightStrategy> = if s.get("tfnkd.strategies") == "all" {
            WeightStrategy::TEACHER_FREE.to_vec()
        } else {
            parse_list(s, "tfnkd.strategies")?
        };
        if strategies.contains(&WeightStrategy::TeacherTarget) {
            return Err(Error::Config(
                "the teacher-target strategy needs a teacher; tfnkd is teacher-free".into(),
            ));
        }
        if strategies.is_empty() {
            return Err(Error::Config("`tfnkd.strategies` is empty".into()));
        }
        let trace = match s.get("tfnkd.trace") {
            "auto" => TraceSelection::Auto,
            "off" | "" => TraceSelection::Off,
            _ => TraceSelection::Ids(parse_list(s, "tfnkd.trace")?),
        };

        let lambdas: Vec<f64> = parse_list(s, "sweep.lambdas")?;
        if lambdas.is_empty() {
            return Err(Error::Config("`sweep.lambdas` is empty".into()));
        }
        if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Config(format!(
                "sweep temperature {l} must be positive"
            )));
        }

        let alpha_ls = |key: &str| -> Result<f64> {
            let a: f64 = parse(s, key)?;
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "`{key}` must lie in [0, 1), got {a}"
                )));
            }
            Ok(a)
        };
        let teacher_weight_decay: f64 = parse(s, "teacher.weight_decay")?;
        if !(teacher_weight_decay.is_finite() && teacher_weight_decay >= 0.0) {
            return Err(Error::Config(
                "`teacher.weight_decay` must be nonnegative".into(),
            ));
        }
        let teacher_checkpoint = match s.get("teacher.checkpoint") {
            "" => out_dir.join("teacher.ckpt"),
            p => PathBuf::from(p),
        };
        let cfg = ExperimentConfig {
            seeds,
            out_dir,
            parallel: parse(s, "parallel")?,
            data,
            teacher_hidden: parse_list(s, "teacher.hidden")?,
            teacher_weight_decay,
            teacher_alpha_ls: alpha_ls("teacher.alpha_ls")?,
            teacher_seed: parse(s, "teacher.seed")?,
            teacher_checkpoint,
            student_hidden: parse_list(s, "student.hidden")?,
            student_alpha_ls: alpha_ls("student.alpha_ls")?,
            train,
            distill,
            modes,
            strategies,
            tfnkd_baseline: parse(s, "tfnkd.baseline")?,
            trace,
            lambdas,
            snapshot: s.snapshot().clone(),
        };
        // widths are checked here so bad specs fail before any compute
        ModelSpec::new(1, cfg.teacher_hidden.clone(), 2).map_err(as_config)?;
        ModelSpec::new(1, cfg.student_hidden.clone(), 2).map_err(as_config)?;
        Ok(cfg)
    }

    /// Teacher schedule: the student's, with teacher weight decay and seed.
    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            weight_decay: self.teacher_weight_decay,
            seed: self.teacher_seed,
            ..self.train.clone()
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn parse_mixup(v: &str) -> Result<MixupMode> {
    let bad = || {
        Error::Config(format!(
            "`train.mixup`: expected off, fixed:<lam> or beta:<alpha>, got `{v}`"
        ))
    };
    if v == "off" {
        return Ok(MixupMode::Off);
    }
    let (kind, num) = v.split_once(':').ok_or_else(bad)?;
    let x: f64 = num.trim().parse().map_err(|_| bad())?;
    match kind.trim() {
        "fixed" => Ok(MixupMode::Fixed { lam: x }),
        "beta" => Ok(MixupMode::Beta { alpha: x }),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = ExperimentConfig::from_settings(&Settings::default()).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.student_hidden, vec![16]);
        assert_eq!(cfg.teacher_checkpoint, PathBuf::from("out/teacher.ckpt"));
        assert_eq!(cfg.lambdas.len(), 6);
        assert_eq!(cfg.strategies, vec![WeightStrategy::StPlusVtMinusMean]);
    }

    #[test]
    fn file_and_overrides() {
        let mut s = Settings::default();
        s.apply_text(
            "# comment\n\ntrain.epochs = 3\ndistill.modes = soft, nkd\ntfnkd.strategies = all\ntrain.mixup = \"beta:0.4\"\n",
            "test",
        )
        .unwrap();
        s.set_pair("seeds=7").unwrap();
        let cfg = ExperimentConfig::from_settings(&s).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.modes, vec![DistillMode::Soft, DistillMode::Nkd]);
        assert_eq!(cfg.strategies.len(), 6);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.train.mixup, MixupMode::Beta { alpha: 0.4 });
        assert_eq!(cfg.snapshot["train.epochs"], "3");
    }

    #[test]
    fn rejections() {
        let mut s = Settings::default();
        let e = s.apply_text("train.epoch = 3", "f").unwrap_err();
        assert!(e.to_string().contains("f:1"), "{e}");
        assert!(s.apply_text("a = 1\nno equals sign", "f").is_err());
        assert!(s.apply_text("seeds = 1\nseeds = 2", "f").is_err());
        for bad in [
            "sweep.lambdas=",
            "tfnkd.strategies=teacher-target",
            "train.lr=-1",
            "data.source=parquet",
            "train.mixup=sometimes",
            "student.hidden=0",
            "blobs.noise_sigma=0",
            "seeds=",
        ] {
            let mut s = Settings::default();
            s.set_pair(bad).unwrap();
            let e = ExperimentConfig::from_settings(&s).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
        let mut s = Settings::default();
        s.set_pair("data.source=idx").unwrap();
        assert!(ExperimentConfig::from_settings(&s).is_err());
    }
}
