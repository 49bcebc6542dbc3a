//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Runs the default blobs experiment, so it takes
//! about a minute in release-like test builds.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nkd_lab::experiment::{
    cache_path, load_data, run_command_with_data, Command, ExperimentConfig, LoadedData, Report,
    Settings,
};
use nkd_lab::losses::WeightStrategy;
use nkd_lab::training::TeacherCache;
use nkd_lab::verify::{run_verify, VerifyOptions, VerifyReport};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(out: &Path, pairs: &[&str]) -> ExperimentConfig {
    let mut s = Settings::default();
    s.set("out_dir", out.to_str().unwrap()).unwrap();
    for p in pairs {
        s.set_pair(p).unwrap();
    }
    ExperimentConfig::from_settings(&s).unwrap()
}

fn run(command: Command, cfg: &ExperimentConfig, data: &LoadedData) -> (Report, f64) {
    let start = Instant::now();
    let report = run_command_with_data(command, cfg, data).unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn mean_top1(report: &Report, label: &str) -> f64 {
    report.aggregate(label).unwrap().top1_mean
}

fn identity_checks(report: &VerifyReport, secs: f64) -> Vec<Outcome> {
    let kd = report.check("kd decomposition").unwrap();
    let ls = report.check("label-smooth decomposition").unwrap();
    let norm = report.check("non-target normalization").unwrap();
    let grads: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("gradient "))
        .collect();
    let add = report.check("nkd additivity").unwrap();
    vec![
        Outcome {
            name: "kd decomposition identity",
            pass: kd.passed() && kd.cases >= 1000 && secs < 1.0,
            detail: format!(
                "max residual {:.2e} (< 1e-9) over {} cases, suite {secs:.3} s (< 1 s)",
                kd.max_residual, kd.cases
            ),
        },
        Outcome {
            name: "label-smooth decomposition identity",
            pass: ls.passed() && ls.cases >= 1000 && secs < 1.0,
            detail: format!(
                "max residual {:.2e} (< 1e-9) over {} cases",
                ls.max_residual, ls.cases
            ),
        },
        Outcome {
            name: "non-target normalization",
            pass: norm.passed() && norm.cases > 0,
            detail: format!(
                "max |sum - 1| {:.2e} (< 1e-10) over {} non-degenerate cases",
                norm.max_residual, norm.cases
            ),
        },
        Outcome {
            name: "gradient correctness",
            pass: grads.len() == 7 && grads.iter().all(|c| c.passed() && c.cases >= 100),
            detail: grads
                .iter()
                .map(|c| format!("{} {:.1e}/{}", &c.name[9..], c.max_residual, c.cases))
                .collect::<Vec<_>>()
                .join(", "),
        },
        Outcome {
            name: "ablation additivity",
            pass: add.passed(),
            detail: format!(
                "max elementwise residual {:.2e} (< 1e-12) over {} cases",
                add.max_residual, add.cases
            ),
        },
    ]
}

/// Every CSV under `dir`, minus its leading comment lines: the timestamp,
/// and for reports the config echo (which names the differing `out_dir`).
fn csv_bodies(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let text = std::fs::read_to_string(&path).unwrap();
                let body: String = text
                    .split_inclusive('\n')
                    .skip_while(|l| l.starts_with('#'))
                    .collect();
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, body);
            }
        }
    }
    out
}

fn main() -> ExitCode {
    let mut outcomes = Vec::new();

    let start = Instant::now();
    let verify = run_verify(&VerifyOptions::default()).unwrap();
    outcomes.extend(identity_checks(&verify, start.elapsed().as_secs_f64()));

    let work = tempfile::tempdir().unwrap();
    let main_dir = work.path().join("main");
    let cfg = config(&main_dir, &[]);
    let data = load_data(&cfg.data).unwrap();

    let (teacher, teacher_secs) = run(Command::TrainTeacher, &cfg, &data);
    let distill_cfg = config(
        &main_dir,
        &["distill.modes=baseline,soft,distributed,nkd,perfect"],
    );
    let (distill, distill_secs) = run(Command::Distill, &distill_cfg, &data);
    let baseline = distill.aggregate("baseline").unwrap();
    let soft = mean_top1(&distill, "soft");
    let dist = mean_top1(&distill, "distributed");
    let nkd = mean_top1(&distill, "nkd");
    let perfect = mean_top1(&distill, "perfect");
    let train_residual = distill.notes["max_additivity_residual"].as_f64().unwrap();
    // training-time additivity joins the loss-level check above
    if let Some(o) = outcomes
        .iter_mut()
        .find(|o| o.name == "ablation additivity")
    {
        o.pass &= train_residual <= 1e-10;
        o.detail += &format!("; logged training terms {train_residual:.1e} (<= 1e-10)");
    }
    let trend_secs = teacher_secs + distill_secs;
    outcomes.push(Outcome {
        name: "distillation trend",
        pass: nkd >= soft.max(dist)
            && soft.max(dist) >= baseline.top1_mean
            && nkd - baseline.top1_mean > baseline.top1_std
            && trend_secs < 600.0
            && baseline.runs == 5,
        detail: format!(
            "nkd {nkd:.4} >= max(soft {soft:.4}, distributed {dist:.4}) >= baseline {:.4}; \
             nkd - baseline {:.4} > baseline std {:.4}; {trend_secs:.0} s (< 600 s)",
            baseline.top1_mean,
            nkd - baseline.top1_mean,
            baseline.top1_std
        ),
    });

    let tf_cfg = config(&main_dir, &["tfnkd.baseline=false"]);
    let (tf, tf_secs) = run(Command::TfNkd, &tf_cfg, &data);
    let tf_label = format!("tfnkd-{}", WeightStrategy::default().name());
    let tf_top1 = mean_top1(&tf, &tf_label);
    outcomes.push(Outcome {
        name: "teacher-free trend",
        pass: tf_top1 >= baseline.top1_mean && tf_secs < 300.0,
        detail: format!(
            "tf-nkd {tf_top1:.4} >= baseline {:.4} over 5 seeds; {tf_secs:.0} s (< 300 s)",
            baseline.top1_mean
        ),
    });

    outcomes.push(Outcome {
        name: "perfect-teacher direction",
        pass: perfect <= soft,
        detail: format!("soft with T_t = 1: {perfect:.4} <= soft with real teacher: {soft:.4}"),
    });

    let ls_ckpt = main_dir.join("teacher_ls.ckpt");
    let ls_cfg = config(
        &main_dir,
        &[
            "teacher.alpha_ls=0.1",
            &format!("teacher.checkpoint={}", ls_ckpt.display()),
        ],
    );
    run(Command::TrainTeacher, &ls_cfg, &data);
    let plain_tt = TeacherCache::load(&cache_path(&cfg.teacher_checkpoint), None)
        .unwrap()
        .mean_target_prob(&data.train)
        .unwrap();
    let ls_tt = TeacherCache::load(&cache_path(&ls_ckpt), None)
        .unwrap()
        .mean_target_prob(&data.train)
        .unwrap();
    outcomes.push(Outcome {
        name: "label-smoothed teacher sharpness",
        pass: ls_tt < plain_tt,
        detail: format!(
            "mean T_t with alpha_ls 0.1: {ls_tt:.4} < plain: {plain_tt:.4} (teacher test top1 {:.4})",
            teacher.rows[0].top1
        ),
    });

    let (easy, hard) = data.blobs.as_ref().unwrap().easiest_and_hardest();
    let trace = &tf
        .traces
        .iter()
        .find(|(label, _, _)| *label == tf_label)
        .unwrap()
        .2;
    let default_index = WeightStrategy::TEACHER_FREE
        .iter()
        .position(|&s| s == WeightStrategy::default())
        .unwrap();
    let algebra_ok = trace.records.iter().all(|r| {
        r.weights[default_index] == r.student_target + r.target_value - r.batch_mean
            && r.weights.iter().all(|w| w.is_finite())
    });
    let per_sample = |id| trace.for_sample(id).count();
    let thirds = trace.thirds_mean(easy).unwrap();
    let series_ok = per_sample(easy) == cfg.train.epochs && per_sample(hard) == cfg.train.epochs;
    let csv_rows = std::fs::read_to_string(main_dir.join(format!(
        "trace_{}_seed0.csv",
        WeightStrategy::default().name()
    )))
    .unwrap()
    .lines()
    .count();
    outcomes.push(Outcome {
        name: "weight-trace algebra and shape",
        pass: algebra_ok
            && series_ok
            && csv_rows == 2 + 2 * 6 * cfg.train.epochs
            && thirds[0] < thirds[1]
            && thirds[1] < thirds[2],
        detail: format!(
            "{} records exact: {algebra_ok}; easy sample {easy} S_t by thirds {:.5} < {:.5} < {:.5}; \
             hard sample {hard} last third {:.4}",
            trace.records.len(),
            thirds[0],
            thirds[1],
            thirds[2],
            trace.thirds_mean(hard).unwrap()[2]
        ),
    });

    let rerun = |name: &str, extra: &[&str]| {
        let dir = work.path().join(name);
        let mut pairs = vec![
            "seeds=0,1",
            "distill.modes=nkd,classical-kd",
            "tfnkd.strategies=all",
            "sweep.lambdas=1,2",
        ];
        pairs.extend_from_slice(extra);
        let teacher_arg = format!("teacher.checkpoint={}", cfg.teacher_checkpoint.display());
        pairs.push(&teacher_arg);
        let c = config(&dir, &pairs);
        for command in [
            Command::TrainBaseline,
            Command::Distill,
            Command::TfNkd,
            Command::SweepTemp,
        ] {
            run(command, &c, &data);
        }
        csv_bodies(&dir)
    };
    let first = rerun("rerun_a", &[]);
    let second = rerun("rerun_b", &[]);
    let parallel = rerun("rerun_c", &["parallel=true"]);
    outcomes.push(Outcome {
        name: "determinism",
        pass: first.len() > 10 && first == second && first == parallel,
        detail: format!(
            "{} CSV files byte-identical below the comment header across 2 sequential reruns and 1 parallel run",
            first.len()
        ),
    });

    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
