use vlsa::data::k_fold;
use vlsa::metrics::concordance_index;
use vlsa::synth::{generate, SynthCohort, SynthConfig};
use vlsa::trainer::{fit, predict_outputs, TrainConfig};

fn held_out_ci(cohort: &SynthCohort, cfg: &TrainConfig) -> (f64, f64) {
    let folds = k_fold(cohort.data.len(), 5, 0).unwrap();
    let (mut test_ci, mut train_ci) = (0.0, 0.0);
    for f in &folds {
        let (train, test) = (cohort.data.subset(&f.train), cohort.data.subset(&f.test));
        let model = fit(&train, Some(cohort.priors().unwrap()), cfg, None).unwrap().model;
        let ci = |d: &vlsa::data::Dataset| {
            let risks: Vec<f64> = predict_outputs(&model, d).unwrap().iter().map(|o| o.risk).collect();
            concordance_index(&risks, &d.records()).unwrap()
        };
        test_ci += ci(&test) / folds.len() as f64;
        train_ci += ci(&train) / folds.len() as f64;
    }
    (test_ci, train_ci)
}

#[test]
fn loss_decreases_over_first_epochs() {
    let cohort = generate(&SynthConfig { n_patients: 200, hazard_slope: 3.0, seed: 11, ..Default::default() }).unwrap();
    let out = fit(&cohort.data, Some(cohort.priors().unwrap()), &TrainConfig::default(), None).unwrap();
    assert_eq!(out.log.len(), 10);
    let losses: Vec<f64> = out.log.iter().map(|e| e.mean_loss).collect();
    assert!(losses[1] < losses[0] && losses[2] < losses[1], "{losses:?}");
}

#[test]
fn no_signal_gives_chance_concordance() {
    let cohort = generate(&SynthConfig { signal_strength: 0.0, seed: 5, ..Default::default() }).unwrap();
    let (test_ci, _) = held_out_ci(&cohort, &TrainConfig::default());
    assert!((test_ci - 0.5).abs() <= 0.07, "held-out CI {test_ci}");
}

#[test]
fn training_folds_score_at_least_held_out() {
    let cohort = generate(&SynthConfig { hazard_slope: 3.0, seed: 3, ..Default::default() }).unwrap();
    let (test_ci, train_ci) = held_out_ci(&cohort, &TrainConfig::default());
    assert!(train_ci >= test_ci, "train {train_ci} vs held-out {test_ci}");
    assert!(test_ci > 0.7, "held-out CI {test_ci}");
}
