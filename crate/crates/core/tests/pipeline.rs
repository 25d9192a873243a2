use std::fmt::Write as _;
use std::path::Path;

use biaslab::accept_loop::{run_loop, LoopConfig};
use biaslab::data::{ColumnSchema, Dataset};
use biaslab::experiments::report::verify_aggregates;
use biaslab::experiments::{run_mode, DataSource, Mode, RankBy, RunConfig};
use biaslab::learners::{predict_proba, Scorecard};

fn quick_loop() -> LoopConfig {
    let mut c = LoopConfig {
        batch_size: 200,
        iterations: 3,
        holdout_size: 600,
        warmup: 2,
        ..LoopConfig::default()
    };
    c.learner.gbt.n_trees = 30;
    c
}

fn quick(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        trials: 3,
        loop_cfg: quick_loop(),
        ..RunConfig::default()
    };
    cfg.bayes.j_max = 40;
    cfg
}

fn csv_rows(out: &mut String, d: &Dataset, accepted: bool) {
    let y = d.labels();
    for r in 0..d.n_rows() {
        let _ = write!(out, "{}", d.ids()[r]);
        for v in d.row(r) {
            let _ = write!(out, ",{v}");
        }
        let label = match y {
            Some(y) if accepted => y[r].to_string(),
            _ => String::new(),
        };
        let _ = writeln!(out, ",{},{label}", u8::from(accepted));
    }
}

/// Writes a loop's observed data and its holdout in the standard layout.
fn write_observed(dir: &Path) -> (String, String) {
    let out = run_loop(&quick_loop(), None).unwrap();
    let s = &out.split;
    let k = s.train_accepts().n_features();
    let header = (0..k)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    let mut main = format!("id,{header},a,y\n");
    csv_rows(
        &mut main,
        &s.train_accepts().concat(s.validation_accepts()).unwrap(),
        true,
    );
    csv_rows(
        &mut main,
        &s.rejects().concat(s.validation_rejects()).unwrap(),
        false,
    );
    let mut hold = format!("id,{header},a,y\n");
    csv_rows(&mut hold, s.holdout(), true);
    let (m, h) = (dir.join("apps.csv"), dir.join("holdout.csv"));
    std::fs::write(&m, main).unwrap();
    std::fs::write(&h, hold).unwrap();
    (
        m.to_string_lossy().into_owned(),
        h.to_string_lossy().into_owned(),
    )
}

fn data_source(path: String, holdout: Option<String>) -> DataSource {
    DataSource {
        path: path.into(),
        schema: ColumnSchema::standard(),
        holdout_path: holdout.map(Into::into),
        validation_fraction: 0.2,
    }
}

#[test]
fn aggregates_recompute_from_raw() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, rank_by) in [
        (Mode::Experiment1, RankBy::AbsError),
        (Mode::Experiment2, RankBy::Value),
    ] {
        let paths = run_mode(&quick(mode), dir.path()).unwrap();
        let find = |suffix: &str| {
            paths
                .iter()
                .find(|p| p.to_string_lossy().ends_with(suffix))
                .unwrap()
        };
        let dev = verify_aggregates(find("_raw.csv"), find("_agg.csv"), rank_by).unwrap();
        assert!(dev <= 1e-12, "{mode:?}: {dev}");
    }
}

#[test]
fn real_data_basl_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (apps, hold) = write_observed(dir.path());

    let mut cfg = quick(Mode::BaslTrain);
    cfg.data = Some(data_source(apps.clone(), None));
    let paths = run_mode(&cfg, &dir.path().join("basl")).unwrap();
    let model = Scorecard::load(&paths[0]).unwrap();
    let holdout = biaslab::data::load_csv(&hold, &ColumnSchema::standard()).unwrap();
    let p = predict_proba(&model, &holdout).unwrap();
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    let history = std::fs::read_to_string(&paths[1]).unwrap();
    assert!(history.lines().count() >= 2);

    let mut cfg = quick(Mode::Evaluate);
    cfg.data = Some(data_source(apps.clone(), Some(hold)));
    let paths = run_mode(&cfg, &dir.path().join("eval")).unwrap();
    let raw = std::fs::read_to_string(&paths[0]).unwrap();
    // accepts_only, reweighted and bayesian for each of two metrics
    assert_eq!(raw.lines().count(), 1 + 6);

    // evaluation needs a labeled holdout
    let mut cfg = quick(Mode::Evaluate);
    cfg.data = Some(data_source(apps, None));
    assert!(cfg.validate().is_err());
}

#[test]
fn simulate_traces_each_trial() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Mode::Simulate);
    cfg.trials = 2;
    cfg.simulate_correction = Some(biaslab::benchmarks::CorrectionMethod::Ignore);
    let paths = run_mode(&cfg, dir.path()).unwrap();
    let traces: Vec<_> = paths
        .iter()
        .filter(|p| p.extension().unwrap() == "csv")
        .collect();
    assert_eq!(traces.len(), 2);
    let text = std::fs::read_to_string(traces[0]).unwrap();
    assert_eq!(text.lines().count(), 1 + quick_loop().iterations);
    assert!(paths.iter().any(|p| p.extension().unwrap() == "svg"));
}
