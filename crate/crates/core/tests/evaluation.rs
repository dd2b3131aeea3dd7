use msad_core::data::{generate_synthetic, SyntheticSpec};
use msad_core::evaluation::{
    auc, confusion, emit_metrics_report, emit_sweep_report, f1_score, parse_metrics_report,
    precision_recall_f1, read_score_dump, run_sweep, score_dump, ExperimentConfig, MetricsReport,
    ReportFormat, SweepKind, SweepTable,
};
use proptest::prelude::*;

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (&si, _) in scores.iter().zip(labels).filter(|&(_, &l)| l == 1) {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..300).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u32..40).prop_map(|k| k as f64 / 40.0), n),
            proptest::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 1;
                l[1] = 0;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count((scores, labels) in scored()) {
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_increasing_maps((scores, labels) in scored()) {
        let a = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert!((auc(&affine, &labels).unwrap() - a).abs() <= 1e-12);
        prop_assert!((auc(&exp, &labels).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn confusion_matches_loop((scores, labels) in scored(), threshold in 0.0f64..1.0) {
        let c = confusion(&scores, &labels, threshold).unwrap();
        let count = |flag: bool, y: u8| {
            scores.iter().zip(&labels).filter(|&(&s, &l)| (s >= threshold) == flag && l == y).count()
        };
        prop_assert_eq!((c.tp, c.fp, c.tn, c.fn_), (count(true, 1), count(true, 0), count(false, 0), count(false, 1)));
        prop_assert_eq!(c.total(), scores.len());
        let (p, r, f) = precision_recall_f1(&c);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        prop_assert!(f <= p.max(r) + 1e-15 && f >= p.min(r) - 1e-15);
    }
}

#[test]
fn auc_reference_cases() {
    assert_eq!(auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
    assert_eq!(auc(&[0.5, 0.5, 0.5], &[0, 1, 1]).unwrap(), 0.5);
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auc(&[f64::NAN, 0.2], &[0, 1]).is_err());
}

#[test]
fn published_precision_and_recall_give_published_f1() {
    assert!((f1_score(0.902, 0.887) - 0.894).abs() < 0.0005);
    assert_eq!(f1_score(0.0, 0.0), 0.0);
}

#[test]
fn metrics_reports_round_trip_at_six_decimals() {
    let scores = [0.91, 0.2, 0.55, 0.49, 0.73, 0.05, 0.5];
    let labels = [1, 0, 1, 1, 0, 0, 1];
    let report = MetricsReport::from_scores(&scores, &labels, 0.5).unwrap();
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        let text = emit_metrics_report(&report, format).unwrap();
        let back = parse_metrics_report(&text, format).unwrap();
        assert_eq!(back.confusion, report.confusion);
        assert_eq!(back.n_samples, 7);
        for (a, b) in [
            (back.precision, report.precision),
            (back.recall, report.recall),
            (back.auc, report.auc),
            (back.f1, report.f1),
        ] {
            assert!((a - b).abs() <= 5e-7, "{a} vs {b}");
        }
        // a second pass is exact
        assert_eq!(emit_metrics_report(&back, format).unwrap(), text);
    }
}

#[test]
fn score_dumps_round_trip_exactly() {
    let scores = [0.1, 1.0 / 3.0, 0.999_999_999_7, 0.0];
    let labels = [0, 1, 1, 0];
    let (s, l) = read_score_dump(&score_dump(&scores, &labels)).unwrap();
    assert_eq!(s, scores);
    assert_eq!(l, labels);
    assert!(read_score_dump("score,label\n0.5,2\n").is_err());
    assert!(read_score_dump("score,label\nx,1\n").is_err());
}

fn tiny_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.window_len = 12;
    c.model.window_len = 12;
    c.model.model_dim = 8;
    c.model.heads = 2;
    c.model.layers_per_scale = 1;
    c.model.ffn_dim = 16;
    c.train.initial_lr = 2e-3;
    c.train.max_epochs = 2;
    c.train.max_batches_per_epoch = Some(2);
    c.train.max_val_windows = Some(32);
    c
}

#[test]
fn sweeps_keep_grid_order_and_record_failures() {
    let series = generate_synthetic(&SyntheticSpec {
        length: 1500,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let grid: Vec<String> = ["0.5", "0.0", "0.1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let r = run_sweep(
        SweepKind::Noise,
        &grid,
        &tiny_experiment(),
        &series,
        &[0, 1],
        2,
    )
    .unwrap();
    let values: Vec<&str> = r.rows.iter().map(|row| row.value.as_str()).collect();
    assert_eq!(values, ["0.5", "0.0", "0.1"]);
    for row in &r.rows {
        assert_eq!(row.n_seeds, 2);
        let f1s: Vec<f64> = row
            .outcomes
            .iter()
            .map(|o| o.report.as_ref().unwrap().f1)
            .collect();
        assert!((row.f1 - (f1s[0] + f1s[1]) / 2.0).abs() < 1e-15);
    }
    // a sweep is deterministic whatever the parallelism
    let serial = run_sweep(
        SweepKind::Noise,
        &grid,
        &tiny_experiment(),
        &series,
        &[0, 1],
        1,
    )
    .unwrap();
    assert_eq!(serial, r);

    let bad = vec!["1e-3".to_string(), "bogus".to_string()];
    let r = run_sweep(
        SweepKind::Optimizer,
        &["adam".into()],
        &tiny_experiment(),
        &series,
        &[0],
        1,
    )
    .unwrap();
    assert!(r.any_succeeded());
    let r = run_sweep(
        SweepKind::LearningRate,
        &bad,
        &tiny_experiment(),
        &series,
        &[0],
        1,
    )
    .unwrap();
    assert!(r.rows[0].succeeded());
    assert!(!r.rows[1].succeeded());
    assert!(r.rows[1].status.starts_with("failed"));
    let table = SweepTable::from_result(&r).unwrap();
    assert_eq!(table.rows[1].f1, None);
    let csv = emit_sweep_report(&r, ReportFormat::Csv).unwrap();
    assert_eq!(SweepTable::parse_csv(&csv).unwrap(), table.rows);

    assert!(run_sweep(SweepKind::Noise, &[], &tiny_experiment(), &series, &[0], 1).is_err());
}

#[test]
fn default_grids() {
    assert_eq!(
        SweepKind::LearningRate.default_grid(),
        ["1e-3", "3e-4", "2e-4", "1e-4"]
    );
    assert_eq!(
        SweepKind::Optimizer.default_grid(),
        ["adagrad", "sgd", "adam", "adamw"]
    );
    assert_eq!(
        SweepKind::Activation.default_grid(),
        ["relu", "leaky_relu", "elu", "gelu"]
    );
    assert_eq!(
        SweepKind::Noise.default_grid(),
        ["0", "0.05", "0.1", "0.25", "0.5"]
    );
    assert_eq!(
        SweepKind::AnomalyRatio.default_grid(),
        ["0.01", "0.05", "0.10", "0.20"]
    );
    assert_eq!(SweepKind::AblationScales.default_grid(), ["1", "2", "3"]);
    let c = SweepKind::AblationScales
        .apply(&ExperimentConfig::default(), "3")
        .unwrap();
    assert_eq!(c.model.scale_factors, [1, 2, 4]);
}
