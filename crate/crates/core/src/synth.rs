//! Synthetic populations and forward simulation of allocations from a known
//! parameter matrix.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::fit_standardization;
use crate::model::{predict_shares, Allocation, ThetaMatrix, DEFAULT_TOTAL_MINUTES};
use crate::record::{Demographics, EduLevel, Race, Record, SpouseStatus, StandardizationParams};
use crate::rng::{derive_seed, derive_seed_str, rng, PRNG_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeSpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub mu: f64,
    pub sigma: f64,
}

/// Optional dependence between covariates. All zeros means independent draws.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateLinks {
    /// Added to log-earnings per education level above the midpoint (2.5).
    pub earn_log_per_edu: f64,
    /// Added to log-earnings per decade of age above 40.
    pub earn_log_per_decade: f64,
    /// Log-odds multiplier on spouse-present per decade of age above 40.
    pub spouse_log_per_decade: f64,
    /// Log-odds multiplier on a bachelor's-or-higher level per decade of age below 40.
    pub edu_log_per_decade_younger: f64,
}

impl CovariateLinks {
    /// Moderate links between age, education, earnings and partnership.
    pub fn correlated() -> Self {
        CovariateLinks {
            earn_log_per_edu: 0.30,
            earn_log_per_decade: 0.12,
            spouse_log_per_decade: 0.35,
            edu_log_per_decade_younger: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n: usize,
    pub seed: u64,
    /// Normal, truncated to [18, 80] and rounded to whole years.
    pub age: AgeSpec,
    /// Probabilities of education levels 1..=4.
    pub edu_probs: [f64; 4],
    /// Weekly earnings in dollars, rounded to cents.
    pub earnweek: LogNormalSpec,
    pub male_prob: f64,
    /// Probabilities of spouse present, unmarried partner, neither.
    pub spouse_probs: [f64; 3],
    /// Probabilities of White, Black, Native American, Asian, Pacific Islander.
    pub race_probs: [f64; 5],
    #[serde(default)]
    pub links: CovariateLinks,
}

impl Default for PopulationConfig {
    /// Marginals in the neighborhood of a national time-use sample.
    fn default() -> Self {
        PopulationConfig {
            n: 2000,
            seed: 20240601,
            age: AgeSpec { mean: 42.0, sd: 13.0 },
            edu_probs: [0.34, 0.28, 0.23, 0.15],
            earnweek: LogNormalSpec { mu: 6.75, sigma: 0.65 },
            male_prob: 0.51,
            spouse_probs: [0.54, 0.06, 0.40],
            race_probs: [0.79, 0.11, 0.02, 0.06, 0.02],
            links: CovariateLinks::default(),
        }
    }
}

fn check_probs(name: &str, probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidConfig(format!("{name}: probabilities must be non-negative")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{name}: probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        check_probs("edu_probs", &self.edu_probs)?;
        check_probs("spouse_probs", &self.spouse_probs)?;
        check_probs("race_probs", &self.race_probs)?;
        if !(0.0..=1.0).contains(&self.male_prob) {
            return Err(Error::InvalidConfig("male_prob must lie in [0, 1]".into()));
        }
        if !(self.age.sd > 0.0 && self.age.mean.is_finite()) {
            return Err(Error::InvalidConfig("age sd must be positive".into()));
        }
        if !(self.earnweek.sigma > 0.0 && self.earnweek.mu.is_finite()) {
            return Err(Error::InvalidConfig("earnweek sigma must be positive".into()));
        }
        Ok(())
    }
}

fn categorical<R: rand::Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn draw_demographics(cfg: &PopulationConfig, index: u64) -> Demographics {
    let mut r = rng(derive_seed(cfg.seed, index));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut age = cfg.age.mean;
    for _ in 0..1000 {
        let a = cfg.age.mean + cfg.age.sd * std_normal.sample(&mut r);
        if (18.0..=80.0).contains(&a) {
            age = a;
            break;
        }
    }
    let age = age.round().clamp(18.0, 80.0);
    let decades = (age - 40.0) / 10.0;

    let mut edu_w = cfg.edu_probs;
    let younger = (-decades).max(0.0);
    let tilt = (cfg.links.edu_log_per_decade_younger * younger).exp();
    edu_w[2] *= tilt;
    edu_w[3] *= tilt;
    let edu = EduLevel::ALL[categorical(&mut r, &edu_w)];

    let log_earn = cfg.earnweek.mu
        + cfg.links.earn_log_per_edu * (edu.level() as f64 - 2.5)
        + cfg.links.earn_log_per_decade * decades
        + cfg.earnweek.sigma * std_normal.sample(&mut r);
    let earnweek = (log_earn.exp() * 100.0).round().max(1.0) / 100.0;

    let male = r.random::<f64>() < cfg.male_prob;

    let mut sp_w = cfg.spouse_probs;
    sp_w[0] *= (cfg.links.spouse_log_per_decade * decades).exp();
    let spouse = SpouseStatus::ALL[categorical(&mut r, &sp_w)];

    let race = Race::ALL[categorical(&mut r, &cfg.race_probs)];

    Demographics {
        age,
        male,
        race,
        edu,
        spouse,
        earnweek,
    }
}

/// Draws `cfg.n` respondents and standardizes them with moments fit on the
/// generated sample. Records carry no observed allocation yet.
pub fn generate_population(cfg: &PopulationConfig) -> Result<(Vec<Record>, StandardizationParams)> {
    cfg.validate()?;
    let demos: Vec<Demographics> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| draw_demographics(cfg, i))
        .collect();
    let params = fit_standardization(&demos).map_err(|e| e.context("standardizing synthetic population"))?;
    let records = demos
        .into_iter()
        .enumerate()
        .map(|(i, d)| Record::new(format!("syn-{i:06}"), d, &params))
        .collect();
    Ok((records, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseConfig {
    None,
    /// Shares drawn from a Dirichlet with mean equal to the predicted shares
    /// and total concentration `kappa`.
    Dirichlet { kappa: f64 },
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseConfig::Dirichlet { kappa } if !(*kappa > 0.0 && kappa.is_finite()) => {
                Err(Error::InvalidConfig(format!("dirichlet concentration must be positive, got {kappa}")))
            }
            _ => Ok(()),
        }
    }
}

/// Draws shares around `mean` via normalized gamma variates.
pub fn dirichlet_shares<R: rand::Rng>(rng: &mut R, mean: &[f64; 4], kappa: f64) -> [f64; 4] {
    let mut draws = [0.0; 4];
    for (d, m) in draws.iter_mut().zip(mean) {
        let g = Gamma::new(kappa * m, 1.0).expect("positive gamma shape");
        *d = g.sample(rng).max(f64::MIN_POSITIVE);
    }
    let sum: f64 = draws.iter().sum();
    draws.map(|d| (d / sum).max(f64::MIN_POSITIVE))
}

/// Noise-free or Dirichlet-perturbed shares for one feature vector.
pub fn simulate_shares(theta: &ThetaMatrix, record: &Record, noise: &NoiseConfig, seed: u64) -> [f64; 4] {
    let mean = *predict_shares(theta, &record.features).as_array();
    match noise {
        NoiseConfig::None => mean,
        NoiseConfig::Dirichlet { kappa } => {
            let mut r = rng(derive_seed_str(seed, &record.id));
            dirichlet_shares(&mut r, &mean, *kappa)
        }
    }
}

/// Attaches allocations generated from `theta_star`. Each record's noise
/// stream is keyed by its id, so results do not depend on record order.
pub fn simulate_allocations(
    theta_star: &ThetaMatrix,
    records: &[Record],
    noise: &NoiseConfig,
    seed: u64,
    total: f64,
) -> Result<Vec<Record>> {
    noise.validate()?;
    records
        .par_iter()
        .map(|r| {
            let shares = simulate_shares(theta_star, r, noise, seed);
            let minutes = shares.map(|s| s * total);
            let alloc = Allocation::new(minutes, total)
                .map_err(|e| e.context(format!("simulating record {}", r.id)))?;
            let mut out = r.clone();
            out.observed = Some(alloc);
            out.renormalized = false;
            out.floored = false;
            Ok(out)
        })
        .collect()
}

/// Provenance written beside every synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub prng: String,
    pub population: PopulationConfig,
    pub theta_star: ThetaMatrix,
    pub noise: NoiseConfig,
    pub noise_seed: u64,
    pub total_minutes: f64,
    pub standardization: StandardizationParams,
}

impl SynthMetadata {
    pub fn new(
        population: PopulationConfig,
        theta_star: ThetaMatrix,
        noise: NoiseConfig,
        noise_seed: u64,
        standardization: StandardizationParams,
    ) -> Self {
        SynthMetadata {
            prng: PRNG_ID.to_string(),
            population,
            theta_star,
            noise,
            noise_seed,
            total_minutes: DEFAULT_TOTAL_MINUTES,
            standardization,
        }
    }
}

/// A reproducible ground-truth matrix with moderate effects, used by the
/// CLI when no truth file is supplied.
pub fn random_theta(seed: u64, scale: f64) -> ThetaMatrix {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let flat: Vec<f64> = (0..crate::model::PARAM_DIM).map(|_| normal.sample(&mut r)).collect();
    ThetaMatrix::from_flat(&flat).expect("finite draws")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::write_records_csv;

    fn small(n: usize) -> PopulationConfig {
        PopulationConfig { n, seed: 11, ..PopulationConfig::default() }
    }

    #[test]
    fn seeded_output_is_byte_identical() {
        let bytes = || {
            let (recs, _) = generate_population(&small(5)).unwrap();
            let mut buf = Vec::new();
            write_records_csv(&mut buf, &recs).unwrap();
            buf
        };
        assert_eq!(bytes(), bytes());
    }

    #[test]
    fn white_only_population() {
        let cfg = PopulationConfig { race_probs: [1.0, 0.0, 0.0, 0.0, 0.0], ..small(200) };
        let (recs, _) = generate_population(&cfg).unwrap();
        assert!(recs.iter().all(|r| r.demo.race == Race::White));
        use crate::model::Feature::*;
        for r in &recs {
            for f in [RaceBlack, RaceNative, RaceAsian, RacePacific] {
                assert_eq!(r.features.get(f), 0.0);
            }
        }
    }

    #[test]
    fn edu_marginals_within_binomial_bound() {
        let cfg = PopulationConfig { edu_probs: [0.4, 0.3, 0.2, 0.1], ..small(10_000) };
        let (recs, _) = generate_population(&cfg).unwrap();
        for (k, p) in cfg.edu_probs.iter().enumerate() {
            let share = recs.iter().filter(|r| r.demo.edu.level() as usize == k + 1).count() as f64 / 10_000.0;
            // sd <= 0.0049; 0.015 is about three standard errors
            assert!((share - p).abs() < 0.015, "level {} share {share}", k + 1);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_population(&PopulationConfig { n: 0, ..small(1) }).is_err());
        assert!(generate_population(&PopulationConfig { edu_probs: [0.5, 0.5, 0.5, 0.0], ..small(10) }).is_err());
        assert!(NoiseConfig::Dirichlet { kappa: 0.0 }.validate().is_err());
    }

    #[test]
    fn zero_theta_noiseless_is_uniform() {
        let (recs, _) = generate_population(&small(50)).unwrap();
        let sim = simulate_allocations(&ThetaMatrix::zeros(), &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        for r in sim {
            assert_eq!(r.observed.unwrap().minutes(), &[360.0; 4]);
        }
    }

    #[test]
    fn noiseless_matches_predicted_shares() {
        let (recs, _) = generate_population(&small(100)).unwrap();
        let theta = random_theta(3, 0.3);
        let sim = simulate_allocations(&theta, &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        for r in &sim {
            let s = r.observed.unwrap().to_shares();
            let p = predict_shares(&theta, &r.features);
            for (a, b) in s.as_array().iter().zip(p.as_array()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dirichlet_concentrates_at_high_kappa() {
        let (recs, _) = generate_population(&small(500)).unwrap();
        let theta = random_theta(5, 0.3);
        let sim = simulate_allocations(&theta, &recs, &NoiseConfig::Dirichlet { kappa: 10_000.0 }, 9, 1440.0).unwrap();
        // per-share sd <= sqrt(0.25 / 10001) = 0.005, so 0.02 is four sds
        let bad = sim
            .iter()
            .filter(|r| {
                let s = r.observed.unwrap().to_shares();
                let p = predict_shares(&theta, &r.features);
                s.as_array().iter().zip(p.as_array()).any(|(a, b)| (a - b).abs() >= 0.02)
            })
            .count();
        assert!(bad as f64 / 500.0 < 0.01, "{bad} records outside 0.02");
        for r in &sim {
            let s = r.observed.unwrap().to_shares();
            assert!(s.as_array().iter().all(|v| *v > 0.0));
            assert!((s.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_independent_of_record_order() {
        let (recs, _) = generate_population(&small(40)).unwrap();
        let theta = random_theta(5, 0.3);
        let noise = NoiseConfig::Dirichlet { kappa: 50.0 };
        let a = simulate_allocations(&theta, &recs, &noise, 4, 1440.0).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        let mut b = simulate_allocations(&theta, &rev, &noise, 4, 1440.0).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }
}
