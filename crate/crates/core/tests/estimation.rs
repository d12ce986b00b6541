use timeuse_core::estimator::{bootstrap_ci, fit_structural, FitOptions};
use timeuse_core::model::{Activity, Feature, FEATURE_DIM};
use timeuse_core::record::Record;
use timeuse_core::shifts::{run_invariance, EstimatorKind, InvarianceOptions, OutcomePolicy, ShiftSpec};
use timeuse_core::synth::{generate_population, random_theta, simulate_allocations, NoiseConfig, PopulationConfig};
use timeuse_core::Error;

fn dataset(n: usize, seed: u64, theta_seed: u64, noise: NoiseConfig) -> Vec<Record> {
    let (recs, _) = generate_population(&PopulationConfig { n, seed, ..PopulationConfig::default() }).unwrap();
    simulate_allocations(&random_theta(theta_seed, 0.5), &recs, &noise, seed + 1, 1440.0).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn recovery_at_kappa_1000() {
    let truth = random_theta(21, 0.5).flat();
    let fit = fit_structural(&dataset(4000, 20, 21, NoiseConfig::Dirichlet { kappa: 1000.0 }), &FitOptions::default()).unwrap();
    let est = fit.flat();
    for a in 0..3 {
        let r = a * FEATURE_DIM..(a + 1) * FEATURE_DIM;
        assert!(cosine(&est[r.clone()], &truth[r]) >= 0.99);
    }
    let mad = est.iter().zip(&truth).map(|(x, y)| (x - y).abs()).sum::<f64>() / truth.len() as f64;
    assert!(mad <= 0.02, "MAD {mad}");
}

#[test]
fn sse_non_increasing_and_permutation_invariant() {
    let recs = dataset(1500, 30, 31, NoiseConfig::Dirichlet { kappa: 300.0 });
    let fit = fit_structural(&recs, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.sse_history.windows(2).all(|w| w[1] <= w[0]));
    let mut shuffled = recs.clone();
    shuffled.reverse();
    shuffled.rotate_left(377);
    let refit = fit_structural(&shuffled, &FitOptions::default()).unwrap();
    for (a, b) in fit.flat().iter().zip(refit.flat()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn asymptotic_intervals_cover_truth() {
    let truth = random_theta(41, 0.5).flat();
    let (mut covered, mut total) = (0, 0);
    for rep in 0..20 {
        let fit = fit_structural(&dataset(800, 100 + rep, 41, NoiseConfig::Dirichlet { kappa: 200.0 }), &FitOptions::default()).unwrap();
        for c in 0..truth.len() {
            total += 1;
            if fit.ci_low[c] <= truth[c] && truth[c] <= fit.ci_high[c] {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    assert!(rate > 0.85, "coverage {rate}");
}

#[test]
fn bootstrap_noiseless_is_tight_and_seeded() {
    let recs = dataset(600, 50, 51, NoiseConfig::None);
    let opts = FitOptions::default();
    let a = bootstrap_ci(&recs, &opts, 100, 7).unwrap();
    let b = bootstrap_ci(&recs, &opts, 100, 7).unwrap();
    assert_eq!(a, b);
    let widest = a.ci_low.iter().zip(&a.ci_high).map(|(l, h)| h - l).fold(0.0, f64::max);
    assert!(widest < 1e-4, "widest interval {widest}");
    let fit = fit_structural(&recs, &opts).unwrap().with_bootstrap(&a);
    let json = serde_json::to_string(&fit).unwrap();
    assert!(json.contains("\"bootstrap\""));
    assert!(matches!(bootstrap_ci(&recs, &opts, 50, 7), Err(Error::InvalidConfig(_))));
}

#[test]
fn bootstrap_brackets_estimate_under_noise() {
    let recs = dataset(800, 60, 61, NoiseConfig::Dirichlet { kappa: 300.0 });
    let opts = FitOptions::default();
    let fit = fit_structural(&recs, &opts).unwrap();
    let boot = bootstrap_ci(&recs, &opts, 120, 3).unwrap();
    let inside = fit.flat().iter().enumerate().filter(|(c, v)| boot.ci_low[*c] <= **v && **v <= boot.ci_high[*c]).count();
    assert!(inside >= 31, "only {inside} of 33 estimates inside their bootstrap interval");
}

#[test]
fn zero_magnitude_invariance_is_flat() {
    let (recs, params) = generate_population(&PopulationConfig { n: 800, seed: 70, ..PopulationConfig::default() }).unwrap();
    let opts = InvarianceOptions {
        outcomes: OutcomePolicy::Simulate { theta: random_theta(71, 0.5), noise: NoiseConfig::Dirichlet { kappa: 500.0 }, seed: 72 },
        ..InvarianceOptions::default()
    };
    let specs: Vec<ShiftSpec> = ShiftSpec::standard_set(73).iter().map(ShiftSpec::zeroed).collect();
    let run = run_invariance(&recs, &params, &specs, &EstimatorKind::ALL, &opts).unwrap();
    assert_eq!(run.reports.len(), 8);
    for r in &run.reports {
        assert!(r.mad < 1e-9 && r.rel_l2 < 1e-9 && r.one_minus_cos < 1e-9, "{r:?}");
    }
}

#[test]
fn subset_fit_pins_inactive_coefficients() {
    let recs = dataset(500, 80, 81, NoiseConfig::Dirichlet { kappa: 500.0 });
    let opts = FitOptions { active_features: vec![Feature::Intercept, Feature::Age, Feature::Male], ..FitOptions::default() };
    let fit = fit_structural(&recs, &opts).unwrap();
    for a in Activity::FREE {
        assert_eq!(fit.theta_hat.get(a, Feature::RaceAsian), 0.0);
        assert_ne!(fit.theta_hat.get(a, Feature::Age), 0.0);
    }
}
