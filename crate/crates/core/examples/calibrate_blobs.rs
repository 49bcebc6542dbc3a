//! Sweeps the blob noise level under the default experiment settings and
//! prints, per sigma: nearest-center (Bayes) test accuracy, teacher test
//! accuracy and mean target probability, and mean student test accuracy for
//! the CE baseline and NKD over the default seeds. Used to pick the default
//! `blobs.noise_sigma`.
//!
//! cargo run --release --example calibrate_blobs -- [sigma ...]

use nkd_lab::data::generate_blob_split;
use nkd_lab::experiment::{DataSource, ExperimentConfig, Settings};
use nkd_lab::models::ModelSpec;
use nkd_lab::training::{build_teacher_cache, train, LossSelector, Split, TrainConfig};

fn main() -> nkd_lab::Result<()> {
    let sigmas: Vec<f64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("sigma must be a number"))
        .collect();
    let sigmas = if sigmas.is_empty() {
        vec![1.0, 1.6, 2.2, 2.8]
    } else {
        sigmas
    };
    println!("sigma,bayes_top1,teacher_top1,teacher_mean_tt,baseline_top1,nkd_top1");
    for sigma in sigmas {
        let mut settings = Settings::default();
        settings.set("blobs.noise_sigma", &sigma.to_string())?;
        let cfg = ExperimentConfig::from_settings(&settings)?;
        let DataSource::Blobs {
            spec,
            test_per_class,
        } = &cfg.data
        else {
            unreachable!("defaults use blobs")
        };
        let (blobs, test) = generate_blob_split(spec, *test_per_class)?;
        let train_set = &blobs.dataset;

        let modes = blobs.modes_per_class;
        let hits = (0..test.len())
            .filter(|&r| {
                let x = test.inputs().row(r);
                let d = |k: usize| -> f64 {
                    x.iter()
                        .zip(blobs.centers.row(k))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                };
                let nearest = (0..blobs.centers.rows())
                    .min_by(|&a, &b| d(a).total_cmp(&d(b)))
                    .unwrap();
                nearest / modes == test.labels().targets()[r]
            })
            .count();
        let bayes = hits as f64 / test.len() as f64;

        let dims = |hidden: &[usize]| ModelSpec::new(spec.dim, hidden.to_vec(), spec.num_classes);
        let teacher = train(
            &dims(&cfg.teacher_hidden)?,
            train_set,
            &test,
            LossSelector::Ce,
            &cfg.teacher_train_config(),
            &[],
        )?;
        let cache = build_teacher_cache(&teacher.params, train_set)?;
        let student = dims(&cfg.student_hidden)?;
        let mean_top1 = |selector: LossSelector<'_>| -> nkd_lab::Result<f64> {
            let mut sum = 0.0;
            for &seed in &cfg.seeds {
                let tc = TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                let out = train(&student, train_set, &test, selector, &tc, &[])?;
                sum += out.final_record(Split::Test).unwrap().top1;
            }
            Ok(sum / cfg.seeds.len() as f64)
        };
        let baseline = mean_top1(LossSelector::Ce)?;
        let nkd = mean_top1(LossSelector::Nkd {
            cache: &cache,
            config: cfg.distill,
        })?;
        println!(
            "{sigma},{bayes:.4},{:.4},{:.4},{baseline:.4},{nkd:.4}",
            teacher.final_record(Split::Test).unwrap().top1,
            cache.mean_target_prob(train_set)?,
        );
    }
    Ok(())
}
