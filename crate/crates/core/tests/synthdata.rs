use norface::classifier::{TaskKind, TaskSpec};
use norface::synthdata::{
    read_jsonl, write_jsonl, FactorBlock, FactorConfig, FactorSpace, IdentitySplit, Label, TargetFactors,
};
use norface::{Error, Rng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn space(nonlinear: bool, noise: f64) -> FactorSpace {
    FactorSpace::new(FactorConfig { nonlinear, observation_noise_std: noise, ..FactorConfig::default() }).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn readout_recovers_factors_exactly_without_noise() {
    for nonlinear in [false, true] {
        let s = space(nonlinear, 0.0);
        let task = TaskSpec::new(TaskKind::AuIntensity);
        let (train, _) = s.generate(&task, 200, IdentitySplit::default(), &mut Rng::new(1)).unwrap();
        for x in &train.samples {
            let f = s.factor_readout(&x.observed).unwrap();
            assert!(max_diff(&f.identity, &x.identity_vec) < 1e-9);
            assert!(max_diff(&f.expression, &x.expression_vec) < 1e-9);
            assert!(max_diff(&f.pose, &x.pose_vec) < 1e-9);
            assert!(max_diff(&f.background, &x.background_vec) < 1e-9);
        }
    }
}

#[test]
fn readout_block_matches_full_readout() {
    let s = space(false, 0.0);
    let (train, _) = s.generate(&TaskSpec::new(TaskKind::Fer), 20, IdentitySplit::default(), &mut Rng::new(2)).unwrap();
    let r = s.readout_block(FactorBlock::Expression);
    for x in &train.samples {
        let by_block: Vec<f64> =
            (0..r.cols()).map(|j| (0..r.rows()).map(|i| x.observed[i] * r.get(i, j)).sum()).collect();
        assert!(max_diff(&by_block, &x.expression_vec) < 1e-9);
    }
}

#[test]
fn readout_error_scales_with_observation_noise() {
    let sigma = 0.05;
    let s = space(false, sigma);
    let (train, _) =
        s.generate(&TaskSpec::new(TaskKind::Fer), 300, IdentitySplit::default(), &mut Rng::new(3)).unwrap();
    let r = s.readout_block(FactorBlock::Expression);
    // Each read-out coordinate is a fixed linear combination of i.i.d. noise,
    // so its error has std sigma·‖column‖.
    let col_norm: Vec<f64> =
        (0..r.cols()).map(|j| (0..r.rows()).map(|i| r.get(i, j).powi(2)).sum::<f64>().sqrt()).collect();
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    for x in &train.samples {
        let f = s.factor_readout(&x.observed).unwrap();
        for ((got, want), norm) in f.expression.iter().zip(&x.expression_vec).zip(&col_norm) {
            let z = (got - want) / (sigma * norm);
            assert!(z.abs() < 6.0);
            sum_sq += z * z;
            count += 1.0;
        }
    }
    let var = sum_sq / count;
    assert!((var - 1.0).abs() < 0.15, "standardized error variance {var}");
}

#[test]
fn mixing_map_is_well_conditioned() {
    let s = space(false, 0.0);
    let c = s.condition_number();
    assert!(c.is_finite() && c > 1.0 && c < 50.0, "condition number {c}");
}

#[test]
fn undersized_sample_dimension_is_rejected() {
    let r = FactorSpace::new(FactorConfig { sample_dim: 10, ..FactorConfig::default() });
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn oracle_normalization_swaps_nuisance_factors_only() {
    for nonlinear in [false, true] {
        let s = space(nonlinear, 0.0);
        let (train, test) =
            s.generate(&TaskSpec::new(TaskKind::AuDetect), 100, IdentitySplit::default(), &mut Rng::new(4)).unwrap();
        let target = TargetFactors::from(&train.samples[0]);
        let mut rng = Rng::new(5);
        for x in &test.samples {
            let n = s.oracle_normalize(x, &target, &mut rng);
            let f = s.factor_readout(&n.observed).unwrap();
            assert!(max_diff(&f.identity, &target.identity) < 1e-9);
            assert!(max_diff(&f.pose, &target.pose) < 1e-9);
            assert!(max_diff(&f.background, &target.background) < 1e-9);
            assert!(max_diff(&f.expression, &x.expression_vec) < 1e-9);
            assert_eq!(n.label, x.label);
            assert_eq!(n.identity_id, target.identity_id);
        }
    }
}

#[test]
fn identity_split_is_disjoint_and_complete() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::Fer);
    let (train, test) = s.generate(&task, 10_000, IdentitySplit::default(), &mut Rng::new(6)).unwrap();
    let a = train.identities();
    let b = test.identities();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len(), 20);
    assert_eq!(b.len(), 5);
    assert_eq!(train.len() + test.len(), 10_000);
}

#[test]
fn zero_samples_give_empty_splits() {
    let s = space(false, 0.0);
    let (train, test) =
        s.generate(&TaskSpec::new(TaskKind::Fer), 0, IdentitySplit::default(), &mut Rng::new(0)).unwrap();
    assert!(train.is_empty() && test.is_empty());
}

#[test]
fn oversized_split_is_rejected() {
    let s = space(false, 0.0);
    let r = s.generate(&TaskSpec::new(TaskKind::Fer), 10, IdentitySplit { train: 20, test: 10 }, &mut Rng::new(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn classes_are_balanced() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::Fer);
    let (train, test) = s.generate(&task, 7_000, IdentitySplit::default(), &mut Rng::new(7)).unwrap();
    let mut counts = [0usize; 7];
    for x in train.samples.iter().chain(&test.samples) {
        match x.label {
            Label::Class(c) => counts[c] += 1,
            _ => panic!("wrong label kind"),
        }
    }
    assert!(counts.iter().all(|&c| c == 1000));
}

#[test]
fn labels_are_independent_of_identity() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::Fer);
    let (train, _) = s.generate(&task, 10_000, IdentitySplit::default(), &mut Rng::new(8)).unwrap();
    let ids: Vec<usize> = train.identities().into_iter().collect();
    let mut table = vec![vec![0.0; 7]; ids.len()];
    for x in &train.samples {
        let r = ids.iter().position(|&i| i == x.identity_id).unwrap();
        if let Label::Class(c) = x.label {
            table[r][c] += 1.0;
        }
    }
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..7).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut chi2 = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = rows[i] * cols[j] / n;
            chi2 += (obs - exp).powi(2) / exp;
        }
    }
    let dof = ((ids.len() - 1) * 6) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2} dof {dof} p {p}");
}

#[test]
fn au_co_occurrence_follows_the_conditional_rates() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::AuDetect);
    let (train, test) = s.generate(&task, 10_000, IdentitySplit::default(), &mut Rng::new(9)).unwrap();
    let (mut n1, mut n12, mut n0, mut n02) = (0.0, 0.0, 0.0, 0.0);
    for x in train.samples.iter().chain(&test.samples) {
        if let Label::Bits(b) = &x.label {
            assert_eq!(b.len(), 12);
            if b[0] == 1 {
                n1 += 1.0;
                n12 += b[1] as f64;
            } else {
                n0 += 1.0;
                n02 += b[1] as f64;
            }
        }
    }
    assert!((n12 / n1 - 0.7).abs() < 0.03);
    assert!((n02 / n0 - 0.3).abs() < 0.03);
}

#[test]
fn intensity_labels_are_integer_levels_in_range() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::AuIntensity);
    let (train, _) = s.generate(&task, 500, IdentitySplit::default(), &mut Rng::new(10)).unwrap();
    for x in &train.samples {
        match &x.label {
            Label::Intensities(v) => {
                assert_eq!(v.len(), 5);
                assert!(v.iter().all(|&l| (0.0..=5.0).contains(&l) && l.fract() == 0.0));
            }
            _ => panic!("wrong label kind"),
        }
    }
}

#[test]
fn generation_is_reproducible() {
    let s = space(true, 0.01);
    let task = TaskSpec::new(TaskKind::AuIntensity);
    let a = s.generate(&task, 300, IdentitySplit::default(), &mut Rng::new(11)).unwrap();
    let b = s.generate(&task, 300, IdentitySplit::default(), &mut Rng::new(11)).unwrap();
    assert_eq!(a.0.samples, b.0.samples);
    assert_eq!(a.1.samples, b.1.samples);
}

#[test]
fn jsonl_round_trip_and_version_check() {
    let s = space(false, 0.0);
    let task = TaskSpec::new(TaskKind::AuDetect);
    let (train, _) = s.generate(&task, 50, IdentitySplit::default(), &mut Rng::new(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_jsonl(&path, &task, "train", "seed=0", &train).unwrap();
    let (task2, back) = read_jsonl(&path).unwrap();
    assert_eq!(task2, task);
    assert_eq!(back.samples, train.samples);

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("{\"format_version\":1"));
    std::fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    assert!(matches!(read_jsonl(&path), Err(Error::FormatVersion { found: 99, .. })));
}
