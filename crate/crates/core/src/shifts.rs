//! Counterfactual covariate shifts and pre/post drift metrics.
//!
//! Shifts act on raw demographics; features are recomputed afterwards with
//! the baseline standardization moments unless [`Standardization::Refit`]
//! is requested. Every random choice is keyed by record id so a permuted
//! input yields the same shifted set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_ols, fit_structural, FitOptions};
use crate::ingest::fit_standardization;
use crate::model::{ThetaMatrix, DEFAULT_TOTAL_MINUTES};
use crate::record::{restandardize, write_atomic, Demographics, Race, Record, SpouseStatus, StandardizationParams};
use crate::rng::{derive_seed_str, rng};
use crate::synth::{simulate_allocations, NoiseConfig};

pub const AGE_BAND_CUTPOINTS: [f64; 8] = [18.0, 25.0, 30.0, 35.0, 45.0, 55.0, 65.0, 100.0];

/// Index of the half-open band `[cut[i], cut[i+1])` containing `age`.
pub fn band_of(age: f64, cutpoints: &[f64]) -> Option<usize> {
    cutpoints.windows(2).position(|w| w[0] <= age && age < w[1])
}

pub fn age_band(age: f64) -> Option<usize> {
    band_of(age, &AGE_BAND_CUTPOINTS)
}

/// Round-half-even after snapping away binary noise near `.5`.
pub fn round_half_even(x: f64) -> f64 {
    ((x * 1e9).round() / 1e9).round_ties_even()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftKind {
    /// Adds `magnitude`·sd(earnweek) to every record at or below the median.
    EarningsQuantileLift { magnitude: f64 },
    /// Moves a seeded fraction `p` of ages in `[band_low, band_high]` up by `delta` years.
    AgeBandShift { p: f64, delta: f64, band_low: f64, band_high: f64 },
    /// Within (age band, sex) strata, Asian share `+asian_pp` and White share `+white_pp`.
    RaceMix { asian_pp: f64, white_pp: f64 },
    /// Within the 30-35 and 35-45 bands by sex, spouse-present `+present_pp`
    /// and no-spouse-or-partner `+baseline_pp`.
    SpouseMix { present_pp: f64, baseline_pp: f64 },
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::EarningsQuantileLift { .. } => "earnings_quantile_lift",
            ShiftKind::AgeBandShift { .. } => "age_band_shift",
            ShiftKind::RaceMix { .. } => "race_mix",
            ShiftKind::SpouseMix { .. } => "spouse_mix",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(flatten)]
    pub kind: ShiftKind,
    pub seed: u64,
    #[serde(default = "default_cutpoints")]
    pub cutpoints: Vec<f64>,
}

fn default_cutpoints() -> Vec<f64> {
    AGE_BAND_CUTPOINTS.to_vec()
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> ShiftSpec {
        ShiftSpec { kind, seed, cutpoints: default_cutpoints() }
    }

    pub fn earnings_lift() -> ShiftSpec {
        ShiftSpec::new(ShiftKind::EarningsQuantileLift { magnitude: 0.5 }, 0)
    }

    pub fn age_band_shift(seed: u64) -> ShiftSpec {
        ShiftSpec::new(ShiftKind::AgeBandShift { p: 0.1, delta: 10.0, band_low: 25.0, band_high: 34.0 }, seed)
    }

    pub fn race_mix(seed: u64) -> ShiftSpec {
        ShiftSpec::new(ShiftKind::RaceMix { asian_pp: 0.02, white_pp: -0.02 }, seed)
    }

    pub fn spouse_mix(seed: u64) -> ShiftSpec {
        ShiftSpec::new(ShiftKind::SpouseMix { present_pp: 0.03, baseline_pp: -0.03 }, seed)
    }

    /// The four standard shifts, in reporting order.
    pub fn standard_set(seed: u64) -> Vec<ShiftSpec> {
        vec![
            ShiftSpec::earnings_lift(),
            ShiftSpec::age_band_shift(seed),
            ShiftSpec::race_mix(seed),
            ShiftSpec::spouse_mix(seed),
        ]
    }

    /// Same shift with every magnitude set to zero.
    pub fn zeroed(&self) -> ShiftSpec {
        let kind = match &self.kind {
            ShiftKind::EarningsQuantileLift { .. } => ShiftKind::EarningsQuantileLift { magnitude: 0.0 },
            ShiftKind::AgeBandShift { delta, band_low, band_high, .. } => ShiftKind::AgeBandShift {
                p: 0.0,
                delta: *delta,
                band_low: *band_low,
                band_high: *band_high,
            },
            ShiftKind::RaceMix { .. } => ShiftKind::RaceMix { asian_pp: 0.0, white_pp: 0.0 },
            ShiftKind::SpouseMix { .. } => ShiftKind::SpouseMix { present_pp: 0.0, baseline_pp: 0.0 },
        };
        ShiftSpec { kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{}: {msg}", self.kind.name())));
        if self.cutpoints.len() < 2 || self.cutpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("age-band cutpoints must be strictly increasing".into());
        }
        let pp_ok = |v: f64| (-0.5..=0.5).contains(&v);
        match self.kind {
            ShiftKind::EarningsQuantileLift { magnitude } => {
                if !(0.0..=5.0).contains(&magnitude) {
                    return bad(format!("magnitude {magnitude} outside [0, 5]"));
                }
            }
            ShiftKind::AgeBandShift { p, delta, band_low, band_high } => {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("fraction {p} outside [0, 1]"));
                }
                if !(band_low <= band_high) {
                    return bad("band bounds out of order".into());
                }
                if !(0.0..=20.0).contains(&delta) || band_high + delta > 90.0 {
                    return bad(format!("delta {delta} must lie in [0, 20] and keep ages at most 90"));
                }
            }
            ShiftKind::RaceMix { asian_pp, white_pp } => {
                if !pp_ok(asian_pp) || !pp_ok(white_pp) {
                    return bad("share changes must lie in [-0.5, 0.5]".into());
                }
            }
            ShiftKind::SpouseMix { present_pp, baseline_pp } => {
                if !pp_ok(present_pp) || !pp_ok(baseline_pp) {
                    return bad("share changes must lie in [-0.5, 0.5]".into());
                }
            }
        }
        Ok(())
    }
}

/// What a shift actually did, stored with the shifted dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftRealization {
    pub n_before: usize,
    pub n_after: usize,
    /// Records whose demographics changed or that were added by resampling.
    pub affected: usize,
    /// Earnings threshold or age-band member count, where applicable.
    pub detail: BTreeMap<String, f64>,
    pub skipped_strata: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftOutcome {
    pub records: Vec<Record>,
    pub realization: ShiftRealization,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn shift_earnings_quantile_lift(records: &[Record], magnitude: f64) -> ShiftOutcome {
    let n = records.len();
    let mut realization = ShiftRealization { n_before: n, n_after: n, ..Default::default() };
    if n == 0 || magnitude == 0.0 {
        return ShiftOutcome { records: records.to_vec(), realization };
    }
    let mut earn: Vec<f64> = records.iter().map(|r| r.demo.earnweek).collect();
    earn.sort_by(f64::total_cmp);
    let med = median(&earn);
    let sd = if n > 1 {
        let mean = earn.iter().sum::<f64>() / n as f64;
        (earn.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let lift = magnitude * sd;
    let out = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.demo.earnweek <= med {
                r.demo.earnweek += lift;
                realization.affected += 1;
            }
            r
        })
        .collect();
    realization.detail.insert("median".into(), med);
    realization.detail.insert("lift".into(), lift);
    ShiftOutcome { records: out, realization }
}

fn selection_key(seed: u64, id: &str) -> (u64, String) {
    (derive_seed_str(seed, id), id.to_string())
}

pub fn shift_age_band(records: &[Record], p: f64, delta: f64, band: (f64, f64), seed: u64) -> ShiftOutcome {
    let n = records.len();
    let mut members: Vec<(u64, String, usize)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| band.0 <= r.demo.age && r.demo.age <= band.1)
        .map(|(i, r)| {
            let (k, id) = selection_key(seed, &r.id);
            (k, id, i)
        })
        .collect();
    let count = round_half_even(p * members.len() as f64) as usize;
    members.sort();
    let mut out = records.to_vec();
    for (_, _, i) in members.iter().take(count) {
        out[*i].demo.age += delta;
    }
    let mut realization = ShiftRealization { n_before: n, n_after: n, affected: count, ..Default::default() };
    realization.detail.insert("band_members".into(), members.len() as f64);
    realization.detail.insert("selected".into(), count as f64);
    ShiftOutcome { records: out, realization }
}

type StratumKey = (usize, bool);

fn stratum_label(k: &StratumKey) -> String {
    format!("band{}-{}", k.0, if k.1 { "male" } else { "female" })
}

/// Stratified resampling toward shifted category shares.
///
/// Adjusted categories get `round_half_even(count + m·pp)`; untouched ones
/// keep their counts except the largest, which absorbs the residual so the
/// stratum size is preserved. Shrinking keeps a seeded subset; growing
/// draws with replacement from the stratum's existing members.
fn rake<C>(
    records: &[Record],
    stratum: impl Fn(&Record) -> Option<StratumKey>,
    category: impl Fn(&Demographics) -> C,
    categories: &[C],
    adjust: &[(C, f64)],
    seed: u64,
) -> ShiftOutcome
where
    C: Copy + Eq + std::fmt::Debug,
{
    let n = records.len();
    let mut realization = ShiftRealization { n_before: n, ..Default::default() };
    let mut strata: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(k) = stratum(r) {
            strata.entry(k).or_default().push(i);
        }
    }
    let mut keep = vec![true; n];
    let mut added = Vec::new();
    let mut dup_counter: BTreeMap<String, usize> = BTreeMap::new();
    for (key, idx) in &strata {
        let m = idx.len() as i64;
        let mut members: Vec<Vec<usize>> = categories.iter().map(|_| Vec::new()).collect();
        for &i in idx {
            let c = category(&records[i].demo);
            let pos = categories.iter().position(|x| *x == c).expect("category listed");
            members[pos].push(i);
        }
        for list in &mut members {
            list.sort_by(|a, b| records[*a].id.cmp(&records[*b].id));
        }
        let counts: Vec<i64> = members.iter().map(|l| l.len() as i64).collect();
        let mut targets = counts.clone();
        let mut adjusted = vec![false; categories.len()];
        for (c, pp) in adjust {
            let pos = categories.iter().position(|x| x == c).expect("category listed");
            adjusted[pos] = true;
            targets[pos] = (round_half_even(counts[pos] as f64 + m as f64 * pp) as i64).clamp(0, m);
        }
        let residual = m - targets.iter().sum::<i64>();
        let absorber = (0..categories.len())
            .filter(|j| !adjusted[*j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if counts[b] >= counts[j] => Some(b),
                _ => Some(j),
            });
        let skip = |why: &str, realization: &mut ShiftRealization| {
            log::warn!("stratum {} skipped: {why}", stratum_label(key));
            realization.skipped_strata.push(stratum_label(key));
        };
        if residual != 0 {
            match absorber {
                Some(a) if counts[a] + residual >= 0 => targets[a] += residual,
                _ => {
                    skip("residual cannot be absorbed", &mut realization);
                    continue;
                }
            }
        }
        if let Some(j) = (0..categories.len()).find(|j| targets[*j] > 0 && counts[*j] == 0) {
            skip(&format!("no {:?} members to resample", categories[j]), &mut realization);
            continue;
        }
        for (j, list) in members.iter().enumerate() {
            let (t, c) = (targets[j] as usize, list.len());
            if t < c {
                let mut ranked: Vec<((u64, String), usize)> =
                    list.iter().map(|&i| (selection_key(seed, &records[i].id), i)).collect();
                ranked.sort();
                for (_, i) in &ranked[t..] {
                    keep[*i] = false;
                }
                realization.affected += c - t;
            } else if t > c {
                let stream = format!("{}/{:?}", stratum_label(key), categories[j]);
                let mut g = rng(derive_seed_str(seed, &stream));
                for _ in 0..t - c {
                    let src = &records[list[g.random_range(0..c)]];
                    let k = dup_counter.entry(src.id.clone()).or_insert(0);
                    *k += 1;
                    let mut dup = src.clone();
                    dup.id = format!("{}#dup{}", src.id, k);
                    added.push(dup);
                }
                realization.affected += t - c;
            }
        }
    }
    let mut out: Vec<Record> = records.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.clone()).collect();
    out.extend(added);
    realization.n_after = out.len();
    ShiftOutcome { records: out, realization }
}

pub fn shift_race_mix(records: &[Record], asian_pp: f64, white_pp: f64, cutpoints: &[f64], seed: u64) -> ShiftOutcome {
    if asian_pp == 0.0 && white_pp == 0.0 {
        let n = records.len();
        return ShiftOutcome {
            records: records.to_vec(),
            realization: ShiftRealization { n_before: n, n_after: n, ..Default::default() },
        };
    }
    rake(
        records,
        |r| band_of(r.demo.age, cutpoints).map(|b| (b, r.demo.male)),
        |d| d.race,
        &Race::ALL,
        &[(Race::Asian, asian_pp), (Race::White, white_pp)],
        seed,
    )
}

/// Bands covering ages 30 to 44 under the given cutpoints.
fn spouse_bands(cutpoints: &[f64]) -> Vec<usize> {
    cutpoints
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] >= 30.0 && w[1] <= 45.0)
        .map(|(i, _)| i)
        .collect()
}

pub fn shift_spouse_mix(records: &[Record], present_pp: f64, baseline_pp: f64, cutpoints: &[f64], seed: u64) -> ShiftOutcome {
    if present_pp == 0.0 && baseline_pp == 0.0 {
        let n = records.len();
        return ShiftOutcome {
            records: records.to_vec(),
            realization: ShiftRealization { n_before: n, n_after: n, ..Default::default() },
        };
    }
    let bands = spouse_bands(cutpoints);
    rake(
        records,
        |r| band_of(r.demo.age, cutpoints).filter(|b| bands.contains(b)).map(|b| (b, r.demo.male)),
        |d| d.spouse,
        &SpouseStatus::ALL,
        &[(SpouseStatus::Spouse, present_pp), (SpouseStatus::NoPartner, baseline_pp)],
        seed,
    )
}

/// Applies a shift to raw demographics. Features are left stale; callers
/// re-standardize (see [`run_invariance`]).
pub fn apply_shift(records: &[Record], spec: &ShiftSpec) -> Result<ShiftOutcome> {
    spec.validate()?;
    Ok(match spec.kind {
        ShiftKind::EarningsQuantileLift { magnitude } => shift_earnings_quantile_lift(records, magnitude),
        ShiftKind::AgeBandShift { p, delta, band_low, band_high } => {
            shift_age_band(records, p, delta, (band_low, band_high), spec.seed)
        }
        ShiftKind::RaceMix { asian_pp, white_pp } => shift_race_mix(records, asian_pp, white_pp, &spec.cutpoints, spec.seed),
        ShiftKind::SpouseMix { present_pp, baseline_pp } => {
            shift_spouse_mix(records, present_pp, baseline_pp, &spec.cutpoints, spec.seed)
        }
    })
}

/// Pre/post distance between two coefficient vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    pub mad: f64,
    pub rel_l2: f64,
    pub one_minus_cos: f64,
}

pub fn drift_metrics(theta0: &[f64], theta1: &[f64]) -> Result<DriftMetrics> {
    if theta0.len() != theta1.len() || theta0.is_empty() {
        return Err(Error::SchemaMismatch(format!(
            "drift vectors must be nonempty and equal length ({} vs {})",
            theta0.len(),
            theta1.len()
        )));
    }
    let n0 = theta0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n0 == 0.0 {
        return Err(Error::ZeroVector("baseline coefficients for drift".into()));
    }
    let diff: Vec<f64> = theta0.iter().zip(theta1).map(|(a, b)| b - a).collect();
    let mad = diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len() as f64;
    let rel_l2 = diff.iter().map(|d| d * d).sum::<f64>().sqrt() / n0;
    let n1 = theta1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let one_minus_cos = if n1 == 0.0 {
        1.0
    } else {
        let dot: f64 = theta0.iter().zip(theta1).map(|(a, b)| a * b).sum();
        1.0 - (dot / (n0 * n1)).clamp(-1.0, 1.0)
    };
    Ok(DriftMetrics { mad, rel_l2, one_minus_cos })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Structural,
    Ols,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 2] = [EstimatorKind::Structural, EstimatorKind::Ols];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Structural => "structural",
            EstimatorKind::Ols => "ols",
        }
    }

    /// Flat coefficient vector: 33 structural or 44 OLS entries.
    pub fn fit_flat(self, records: &[Record], opts: &FitOptions) -> Result<Vec<f64>> {
        match self {
            EstimatorKind::Structural => Ok(fit_structural(records, opts)?.flat()),
            EstimatorKind::Ols => Ok(fit_ols(records, &opts.active_features)?.flat()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub estimator: EstimatorKind,
    pub shift: String,
    pub mad: f64,
    pub rel_l2: f64,
    pub one_minus_cos: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Reuse the baseline moments.
    #[default]
    Baseline,
    /// Re-fit moments on the shifted data.
    Refit,
}

/// Where post-shift outcomes come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomePolicy {
    /// Keep each record's observed allocation (duplicates inherit their source's).
    #[default]
    Carry,
    /// Regenerate outcomes from a known structural model, keyed by record id.
    Simulate { theta: ThetaMatrix, noise: NoiseConfig, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOptions {
    pub fit: FitOptions,
    pub standardization: Standardization,
    pub outcomes: OutcomePolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedDataset {
    pub spec: ShiftSpec,
    pub records: Vec<Record>,
    pub realization: ShiftRealization,
    pub standardization: StandardizationParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRun {
    pub reports: Vec<DriftReport>,
    pub shifted: Vec<ShiftedDataset>,
}

fn with_outcomes(records: Vec<Record>, policy: &OutcomePolicy) -> Result<Vec<Record>> {
    match policy {
        OutcomePolicy::Carry => Ok(records),
        OutcomePolicy::Simulate { theta, noise, seed } => {
            simulate_allocations(theta, &records, noise, *seed, DEFAULT_TOTAL_MINUTES)
        }
    }
}

/// Produces the shifted, re-standardized dataset for one spec.
pub fn shifted_dataset(
    records: &[Record],
    baseline: &StandardizationParams,
    spec: &ShiftSpec,
    opts: &InvarianceOptions,
) -> Result<ShiftedDataset> {
    let outcome = apply_shift(records, spec)?;
    let mut shifted = outcome.records;
    let params = match opts.standardization {
        Standardization::Baseline => *baseline,
        Standardization::Refit => {
            let demos: Vec<Demographics> = shifted.iter().map(|r| r.demo).collect();
            fit_standardization(&demos)?
        }
    };
    restandardize(&mut shifted, &params);
    let shifted = with_outcomes(shifted, &opts.outcomes)?;
    Ok(ShiftedDataset { spec: spec.clone(), records: shifted, realization: outcome.realization, standardization: params })
}

/// Fits each estimator before and after every shift and reports drift.
/// Cells of the (shift × estimator) grid run in parallel; output order is
/// shifts in input order, structural before OLS.
pub fn run_invariance(
    records: &[Record],
    baseline: &StandardizationParams,
    specs: &[ShiftSpec],
    estimators: &[EstimatorKind],
    opts: &InvarianceOptions,
) -> Result<InvarianceRun> {
    let mut base = records.to_vec();
    restandardize(&mut base, baseline);
    let base = with_outcomes(base, &opts.outcomes)?;
    let theta0: Vec<Vec<f64>> = estimators
        .par_iter()
        .map(|e| e.fit_flat(&base, &opts.fit).map_err(|err| err.context(format!("baseline {} fit", e.name()))))
        .collect::<Result<_>>()?;
    let shifted: Vec<ShiftedDataset> = specs
        .par_iter()
        .map(|s| shifted_dataset(records, baseline, s, opts).map_err(|e| e.context(format!("shift {}", s.kind.name()))))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..specs.len()).flat_map(|s| (0..estimators.len()).map(move |e| (s, e))).collect();
    let reports = cells
        .par_iter()
        .map(|&(s, e)| {
            let est = estimators[e];
            let ctx = |err: Error| err.context(format!("shift {} / {} fit", specs[s].kind.name(), est.name()));
            let theta1 = est.fit_flat(&shifted[s].records, &opts.fit).map_err(ctx)?;
            let m = drift_metrics(&theta0[e], &theta1).map_err(ctx)?;
            Ok(DriftReport {
                estimator: est,
                shift: specs[s].kind.name().to_string(),
                mad: m.mad,
                rel_l2: m.rel_l2,
                one_minus_cos: m.one_minus_cos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InvarianceRun { reports, shifted })
}

/// Provenance stored beside a shifted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftProvenance {
    pub spec: ShiftSpec,
    pub realization: ShiftRealization,
    pub standardization_mode: Standardization,
    pub standardization: StandardizationParams,
}

const LONG_HEADER: [&str; 5] = ["shift", "estimator", "mad", "rel_l2", "one_minus_cos"];

/// Long-form drift CSV, one row per (shift, estimator).
pub fn drift_csv(reports: &[DriftReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    for r in reports {
        w.write_record([
            r.shift.clone(),
            r.estimator.name().to_string(),
            format!("{:?}", r.mad),
            format!("{:?}", r.rel_l2),
            format!("{:?}", r.one_minus_cos),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

pub fn read_drift_csv<R: std::io::Read>(reader: R) -> Result<Vec<DriftReport>> {
    let mut rd = csv::Reader::from_reader(reader);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != LONG_HEADER {
        return Err(Error::SchemaMismatch(format!("unexpected drift header {header:?}")));
    }
    rd.records()
        .map(|row| {
            let row = row?;
            let num = |i: usize| {
                row[i].parse::<f64>().map_err(|_| Error::SchemaMismatch(format!("bad number `{}`", &row[i])))
            };
            let estimator = match &row[1] {
                "structural" => EstimatorKind::Structural,
                "ols" => EstimatorKind::Ols,
                other => return Err(Error::SchemaMismatch(format!("unknown estimator `{other}`"))),
            };
            Ok(DriftReport { estimator, shift: row[0].to_string(), mad: num(2)?, rel_l2: num(3)?, one_minus_cos: num(4)? })
        })
        .collect()
}

/// Wide table: one row per shift, metric × estimator columns.
pub fn drift_table_csv(reports: &[DriftReport]) -> Result<Vec<u8>> {
    let mut shifts: Vec<&str> = Vec::new();
    for r in reports {
        if !shifts.contains(&r.shift.as_str()) {
            shifts.push(&r.shift);
        }
    }
    let mut estimators: Vec<EstimatorKind> = reports.iter().map(|r| r.estimator).collect();
    estimators.sort();
    estimators.dedup();
    let mut header = vec!["shift".to_string()];
    for metric in ["mad", "rel_l2", "one_minus_cos"] {
        for e in &estimators {
            header.push(format!("{metric}_{}", e.name()));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for s in shifts {
        let mut row = vec![s.to_string()];
        for metric in 0..3 {
            for e in &estimators {
                let cell = reports.iter().find(|r| r.shift == s && r.estimator == *e).map(|r| match metric {
                    0 => r.mad,
                    1 => r.rel_l2,
                    _ => r.one_minus_cos,
                });
                row.push(cell.map(|v| format!("{v:?}")).unwrap_or_default());
            }
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

/// Writes `drift.csv` and `drift_table.csv` into `dir`.
pub fn write_drift(dir: &Path, reports: &[DriftReport]) -> Result<Vec<PathBuf>> {
    let long = dir.join("drift.csv");
    let wide = dir.join("drift_table.csv");
    write_atomic(&long, &drift_csv(reports)?)?;
    write_atomic(&wide, &drift_table_csv(reports)?)?;
    Ok(vec![long, wide])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::EduLevel;

    fn params() -> StandardizationParams {
        use crate::record::Moments;
        StandardizationParams {
            age: Moments { mean: 40.0, sd: 10.0 },
            edu: Moments { mean: 2.0, sd: 1.0 },
            earnweek: Moments { mean: 900.0, sd: 400.0 },
        }
    }

    fn person(id: &str, age: f64, male: bool, race: Race, spouse: SpouseStatus, earn: f64) -> Record {
        let demo = Demographics { age, male, race, edu: EduLevel::SomeCollege, spouse, earnweek: earn };
        Record::new(id, demo, &params())
    }

    #[test]
    fn earnings_lift_four_points() {
        let recs: Vec<Record> = (1..=4)
            .map(|i| person(&format!("r{i}"), 40.0, true, Race::White, SpouseStatus::Spouse, i as f64))
            .collect();
        let out = shift_earnings_quantile_lift(&recs, 0.5);
        let lift = 0.5 * (5.0f64 / 3.0).sqrt();
        let got: Vec<f64> = out.records.iter().map(|r| r.demo.earnweek).collect();
        assert_eq!(got, vec![1.0 + lift, 2.0 + lift, 3.0, 4.0]);
        assert!((got[0] - 1.6455).abs() < 1e-4);
        let same: Vec<Record> = (0..5).map(|i| person(&format!("s{i}"), 40.0, true, Race::White, SpouseStatus::Spouse, 7.0)).collect();
        assert_eq!(shift_earnings_quantile_lift(&same, 0.5).realization.affected, 5);
        assert_eq!(shift_earnings_quantile_lift(&recs, 0.0).records, recs);
    }

    #[test]
    fn age_band_count_and_delta() {
        let recs: Vec<Record> = (0..100)
            .map(|i| person(&format!("a{i:03}"), 25.0 + (i % 10) as f64, i % 2 == 0, Race::White, SpouseStatus::Spouse, 500.0))
            .collect();
        let out = shift_age_band(&recs, 0.1, 10.0, (25.0, 34.0), 3);
        let moved: Vec<(f64, f64)> = recs
            .iter()
            .zip(&out.records)
            .filter(|(a, b)| a.demo.age != b.demo.age)
            .map(|(a, b)| (a.demo.age, b.demo.age))
            .collect();
        assert_eq!(moved.len(), 10);
        assert!(moved.iter().all(|(a, b)| b - a == 10.0));
        assert_eq!(shift_age_band(&recs, 0.0, 10.0, (25.0, 34.0), 3).records, recs);
        assert_eq!(shift_age_band(&recs, 0.1, 10.0, (25.0, 34.0), 3).records, out.records);
    }

    fn count<F: Fn(&Record) -> bool>(recs: &[Record], f: F) -> usize {
        recs.iter().filter(|r| f(r)).count()
    }

    #[test]
    fn race_mix_stratum_example() {
        let mut recs = Vec::new();
        for i in 0..100 {
            let race = match i {
                0..=9 => Race::Asian,
                10..=59 => Race::White,
                60..=89 => Race::Black,
                _ => Race::Pacific,
            };
            recs.push(person(&format!("p{i:03}"), 40.0, true, race, SpouseStatus::Spouse, 500.0));
        }
        let out = shift_race_mix(&recs, 0.02, -0.02, &AGE_BAND_CUTPOINTS, 9);
        assert_eq!(out.records.len(), 100);
        assert_eq!(count(&out.records, |r| r.demo.race == Race::Asian), 12);
        assert_eq!(count(&out.records, |r| r.demo.race == Race::White), 48);
        assert_eq!(count(&out.records, |r| r.demo.race == Race::Black), 30);
        assert_eq!(shift_race_mix(&recs, 0.0, 0.0, &AGE_BAND_CUTPOINTS, 9).records, recs);
    }

    #[test]
    fn race_mix_skips_stratum_without_asian() {
        let recs: Vec<Record> =
            (0..40).map(|i| person(&format!("w{i}"), 40.0, false, Race::White, SpouseStatus::Spouse, 500.0)).collect();
        let out = shift_race_mix(&recs, 0.02, -0.02, &AGE_BAND_CUTPOINTS, 1);
        assert_eq!(out.records, recs);
        assert_eq!(out.realization.skipped_strata, vec!["band3-female".to_string()]);
    }

    #[test]
    fn spouse_mix_band_example() {
        let mut recs = Vec::new();
        for i in 0..200 {
            let spouse = if i < 100 { SpouseStatus::Spouse } else { SpouseStatus::NoPartner };
            recs.push(person(&format!("q{i:03}"), 37.0, true, Race::White, spouse, 500.0));
        }
        let out = shift_spouse_mix(&recs, 0.03, -0.03, &AGE_BAND_CUTPOINTS, 4);
        assert_eq!(count(&out.records, |r| r.demo.spouse == SpouseStatus::Spouse), 106);
        assert_eq!(count(&out.records, |r| r.demo.spouse == SpouseStatus::NoPartner), 94);
        assert_eq!(out, shift_spouse_mix(&recs, 0.03, -0.03, &AGE_BAND_CUTPOINTS, 4));
        let old: Vec<Record> =
            (0..30).map(|i| person(&format!("o{i}"), 55.0, true, Race::White, SpouseStatus::NoPartner, 500.0)).collect();
        assert_eq!(shift_spouse_mix(&old, 0.03, -0.03, &AGE_BAND_CUTPOINTS, 4).records, old);
        assert_eq!(spouse_bands(&AGE_BAND_CUTPOINTS), vec![2, 3]);
    }

    #[test]
    fn drift_identities() {
        let m = drift_metrics(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.mad, 1.0);
        assert!((m.rel_l2 - 2f64.sqrt()).abs() < 1e-12);
        assert!((m.one_minus_cos - 1.0).abs() < 1e-12);
        let z = drift_metrics(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0]).unwrap();
        assert_eq!((z.mad, z.rel_l2), (0.0, 0.0));
        assert!(z.one_minus_cos.abs() < 1e-12);
        assert!(drift_metrics(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(drift_metrics(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn spec_serde_and_validation() {
        for s in ShiftSpec::standard_set(5) {
            s.validate().unwrap();
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<ShiftSpec>(&json).unwrap(), s);
        }
        let mut bad = ShiftSpec::race_mix(1);
        bad.cutpoints = vec![18.0, 18.0, 30.0];
        assert!(bad.validate().is_err());
        assert!(ShiftSpec::new(ShiftKind::AgeBandShift { p: 1.5, delta: 10.0, band_low: 25.0, band_high: 34.0 }, 0)
            .validate()
            .is_err());
    }

    #[test]
    fn drift_csv_round_trip() {
        let reports = vec![
            DriftReport { estimator: EstimatorKind::Structural, shift: "race_mix".into(), mad: 0.1, rel_l2: 0.2, one_minus_cos: 1e-5 },
            DriftReport { estimator: EstimatorKind::Ols, shift: "race_mix".into(), mad: 0.3, rel_l2: 0.4, one_minus_cos: 2e-3 },
        ];
        let bytes = drift_csv(&reports).unwrap();
        assert_eq!(read_drift_csv(bytes.as_slice()).unwrap(), reports);
        let wide = String::from_utf8(drift_table_csv(&reports).unwrap()).unwrap();
        assert!(wide.starts_with("shift,mad_structural,mad_ols,rel_l2_structural"));
    }
}
