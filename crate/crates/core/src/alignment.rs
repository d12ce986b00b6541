//! Alignment diagnostics between a human fit and one or more model fits.
//!
//! Deviations are taken per (activity, feature) cell. `M_l` averages a
//! model's deviations over cells; `A_f` averages one cell's deviations over
//! models. Both are reported with and without the intercept depending on
//! [`AlignmentOptions::include_intercept`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_structural, FitOptions, FitResult};
use crate::model::{Activity, Feature, ThetaMatrix, FEATURE_DIM, FREE_ACTIVITIES};
use crate::record::{write_atomic, Record};
use crate::shifts::age_band;

/// Cosine of the angle between two equal-length vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SchemaMismatch(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine similarity".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `|θ_model − θ_human|` per (activity, feature) cell for L, W, S.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviations {
    pub cells: [[f64; FEATURE_DIM]; FREE_ACTIVITIES],
}

impl Deviations {
    pub fn between(human: &ThetaMatrix, model: &ThetaMatrix) -> Deviations {
        let mut cells = [[0.0; FEATURE_DIM]; FREE_ACTIVITIES];
        for a in Activity::FREE {
            for f in Feature::ALL {
                cells[a.index()][f.index()] = (model.get(a, f) - human.get(a, f)).abs();
            }
        }
        Deviations { cells }
    }

    pub fn get(&self, activity: Activity, feature: Feature) -> f64 {
        self.cells[activity.index()][feature.index()]
    }

    /// Cell values in activity-major order, optionally without intercepts.
    pub fn selected(&self, include_intercept: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(FREE_ACTIVITIES * FEATURE_DIM);
        for a in Activity::FREE {
            for f in Feature::ALL {
                if include_intercept || f != Feature::Intercept {
                    out.push(self.get(a, f));
                }
            }
        }
        out
    }
}

fn check_schema(human: &FitResult, model: &FitResult) -> Result<()> {
    if human.feature_names != model.feature_names {
        let differing: Vec<String> = human
            .feature_names
            .iter()
            .zip(&model.feature_names)
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("{a}/{b}"))
            .chain(
                human.feature_names.iter().skip(model.feature_names.len())
                    .chain(model.feature_names.iter().skip(human.feature_names.len()))
                    .cloned(),
            )
            .collect();
        return Err(Error::SchemaMismatch(format!("feature lists differ: [{}]", differing.join(", "))));
    }
    Ok(())
}

pub fn feature_deviations(human: &FitResult, model: &FitResult) -> Result<Deviations> {
    check_schema(human, model)?;
    Ok(Deviations::between(&human.theta_hat, &model.theta_hat))
}

/// Mean of the deviation cells (`M_l`).
pub fn model_divergence(deviations: &Deviations, include_intercept: bool) -> f64 {
    let cells = deviations.selected(include_intercept);
    cells.iter().sum::<f64>() / cells.len() as f64
}

/// Per-cell mean across models (`A_f`).
pub fn attribute_divergence(tables: &[Deviations]) -> Result<Deviations> {
    if tables.is_empty() {
        return Err(Error::InsufficientData("attribute divergence needs at least one model".into()));
    }
    let mut cells = [[0.0; FEATURE_DIM]; FREE_ACTIVITIES];
    for t in tables {
        for (row, trow) in cells.iter_mut().zip(&t.cells) {
            for (c, v) in row.iter_mut().zip(trow) {
                *c += v;
            }
        }
    }
    let l = tables.len() as f64;
    for row in &mut cells {
        for c in row.iter_mut() {
            *c /= l;
        }
    }
    Ok(Deviations { cells })
}

/// Cosine between the (L, W, S) coefficient vectors of one feature.
pub fn attribute_activity_cosine(human: &FitResult, model: &FitResult, feature: Feature) -> Result<f64> {
    check_schema(human, model)?;
    attribute_activity_cosine_theta(&human.theta_hat, &model.theta_hat, feature)
}

pub fn attribute_activity_cosine_theta(human: &ThetaMatrix, model: &ThetaMatrix, feature: Feature) -> Result<f64> {
    cosine_similarity(&human.feature_column(feature), &model.feature_column(feature))
        .map_err(|e| e.context(format!("feature {feature}")))
}

/// Cosine between one activity's coefficient vectors.
pub fn activity_cosine(human: &ThetaMatrix, model: &ThetaMatrix, activity: Activity, include_intercept: bool) -> Result<f64> {
    let skip = usize::from(!include_intercept);
    cosine_similarity(&human.row(activity)[skip..], &model.row(activity)[skip..])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOptions {
    pub include_intercept: bool,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        AlignmentOptions { include_intercept: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityCosineRow {
    pub model: String,
    pub activity: Activity,
    pub cosine_all_features: Option<f64>,
    pub cosine_excluding_intercept: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub model: String,
    pub activity: Activity,
    pub feature: Feature,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDivergenceRow {
    pub model: String,
    /// Mean over (activity, feature) cells.
    pub m_cells: f64,
    /// Mean over features of the L2 norm of the per-feature activity deviations.
    pub m_feature_l2: f64,
    pub m_leisure: f64,
    pub m_work: f64,
    pub m_sleep_personal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDivergenceRow {
    pub rank: usize,
    pub activity: Activity,
    pub feature: Feature,
    pub a_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTotalRow {
    pub feature: Feature,
    /// `A_f` averaged over the three activities.
    pub a_f_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCosineRow {
    pub model: String,
    pub feature: Feature,
    /// None when either coefficient vector is zero.
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstAlignmentRow {
    pub activity: Activity,
    pub worst_feature: Feature,
    pub worst_feature_a_f: f64,
    pub worst_model: String,
    pub worst_model_feature: Feature,
    pub worst_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub include_intercept: bool,
    pub models: Vec<String>,
    pub activity_cosine: Vec<ActivityCosineRow>,
    pub deviations: Vec<DeviationRow>,
    pub model_divergence: Vec<ModelDivergenceRow>,
    pub attribute_divergence: Vec<AttributeDivergenceRow>,
    pub attribute_totals: Vec<AttributeTotalRow>,
    pub attribute_activity_cosine: Vec<AttributeCosineRow>,
    pub worst_alignment: Vec<WorstAlignmentRow>,
}

fn features_selected(include_intercept: bool) -> impl Iterator<Item = Feature> {
    Feature::ALL.into_iter().filter(move |f| include_intercept || *f != Feature::Intercept)
}

pub fn alignment_report(human: &FitResult, models: &[(String, FitResult)], opts: &AlignmentOptions) -> Result<AlignmentReport> {
    if models.is_empty() {
        return Err(Error::InsufficientData("no model fits to compare".into()));
    }
    let incl = opts.include_intercept;
    let mut report = AlignmentReport {
        include_intercept: incl,
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        activity_cosine: Vec::new(),
        deviations: Vec::new(),
        model_divergence: Vec::new(),
        attribute_divergence: Vec::new(),
        attribute_totals: Vec::new(),
        attribute_activity_cosine: Vec::new(),
        worst_alignment: Vec::new(),
    };
    let mut tables = Vec::with_capacity(models.len());
    for (name, fit) in models {
        let dev = feature_deviations(human, fit).map_err(|e| e.context(format!("model {name}")))?;
        for a in Activity::FREE {
            report.activity_cosine.push(ActivityCosineRow {
                model: name.clone(),
                activity: a,
                cosine_all_features: activity_cosine(&human.theta_hat, &fit.theta_hat, a, true).ok(),
                cosine_excluding_intercept: activity_cosine(&human.theta_hat, &fit.theta_hat, a, false).ok(),
            });
            for f in features_selected(incl) {
                report.deviations.push(DeviationRow {
                    model: name.clone(),
                    activity: a,
                    feature: f,
                    delta: dev.get(a, f),
                });
            }
        }
        let per_activity = |a: Activity| {
            let vals: Vec<f64> = features_selected(incl).map(|f| dev.get(a, f)).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let l2: Vec<f64> = features_selected(incl)
            .map(|f| Activity::FREE.iter().map(|a| dev.get(*a, f).powi(2)).sum::<f64>().sqrt())
            .collect();
        report.model_divergence.push(ModelDivergenceRow {
            model: name.clone(),
            m_cells: model_divergence(&dev, incl),
            m_feature_l2: l2.iter().sum::<f64>() / l2.len() as f64,
            m_leisure: per_activity(Activity::Leisure),
            m_work: per_activity(Activity::Work),
            m_sleep_personal: per_activity(Activity::SleepPersonal),
        });
        for f in Feature::ALL {
            report.attribute_activity_cosine.push(AttributeCosineRow {
                model: name.clone(),
                feature: f,
                cosine: attribute_activity_cosine_theta(&human.theta_hat, &fit.theta_hat, f).ok(),
            });
        }
        tables.push(dev);
    }
    let af = attribute_divergence(&tables)?;
    let mut ranked: Vec<(Activity, Feature, f64)> = Activity::FREE
        .iter()
        .flat_map(|a| features_selected(incl).map(move |f| (*a, f)))
        .map(|(a, f)| (a, f, af.get(a, f)))
        .collect();
    ranked.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    report.attribute_divergence = ranked
        .iter()
        .enumerate()
        .map(|(i, (a, f, v))| AttributeDivergenceRow { rank: i + 1, activity: *a, feature: *f, a_f: *v })
        .collect();
    report.attribute_totals = features_selected(incl)
        .map(|f| AttributeTotalRow {
            feature: f,
            a_f_mean: Activity::FREE.iter().map(|a| af.get(*a, f)).sum::<f64>() / 3.0,
        })
        .collect();
    for a in Activity::FREE {
        let (wf, wv) = features_selected(incl)
            .map(|f| (f, af.get(a, f)))
            .fold((Feature::Intercept, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut worst = (String::new(), Feature::Intercept, f64::NEG_INFINITY);
        for ((name, _), dev) in models.iter().zip(&tables) {
            for f in features_selected(incl) {
                if dev.get(a, f) > worst.2 {
                    worst = (name.clone(), f, dev.get(a, f));
                }
            }
        }
        report.worst_alignment.push(WorstAlignmentRow {
            activity: a,
            worst_feature: wf,
            worst_feature_a_f: wv,
            worst_model: worst.0,
            worst_model_feature: worst.1,
            worst_delta: worst.2,
        });
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

impl AlignmentReport {
    /// Writes `alignment.json` plus one CSV per metric into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
            Ok(())
        };
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        put("alignment.json", json)?;
        put(
            "activity_cosine.csv",
            csv_bytes(
                &["model", "activity", "cosine_all_features", "cosine_excluding_intercept"],
                self.activity_cosine.iter().map(|r| {
                    vec![r.model.clone(), r.activity.name().into(), opt(r.cosine_all_features), opt(r.cosine_excluding_intercept)]
                }),
            )?,
        )?;
        // Matrix layout: rows are models, columns activities.
        let matrix_rows = self.models.iter().map(|m| {
            let mut row = vec![m.clone()];
            for a in Activity::FREE {
                let v = self
                    .activity_cosine
                    .iter()
                    .find(|r| &r.model == m && r.activity == a)
                    .and_then(|r| if self.include_intercept { r.cosine_all_features } else { r.cosine_excluding_intercept });
                row.push(opt(v));
            }
            row
        });
        put("cosine_matrix.csv", csv_bytes(&["model", "leisure", "work", "sleep_personal"], matrix_rows)?)?;
        put(
            "deviations.csv",
            csv_bytes(
                &["model", "activity", "feature", "delta"],
                self.deviations
                    .iter()
                    .map(|r| vec![r.model.clone(), r.activity.name().into(), r.feature.name().into(), format!("{:?}", r.delta)]),
            )?,
        )?;
        put(
            "model_divergence.csv",
            csv_bytes(
                &["model", "m_cells", "m_feature_l2", "m_leisure", "m_work", "m_sleep_personal"],
                self.model_divergence.iter().map(|r| {
                    vec![
                        r.model.clone(),
                        format!("{:?}", r.m_cells),
                        format!("{:?}", r.m_feature_l2),
                        format!("{:?}", r.m_leisure),
                        format!("{:?}", r.m_work),
                        format!("{:?}", r.m_sleep_personal),
                    ]
                }),
            )?,
        )?;
        put(
            "attribute_divergence.csv",
            csv_bytes(
                &["rank", "activity", "feature", "a_f"],
                self.attribute_divergence
                    .iter()
                    .map(|r| vec![r.rank.to_string(), r.activity.name().into(), r.feature.name().into(), format!("{:?}", r.a_f)]),
            )?,
        )?;
        put(
            "attribute_activity_cosine.csv",
            csv_bytes(
                &["model", "feature", "cosine"],
                self.attribute_activity_cosine
                    .iter()
                    .map(|r| vec![r.model.clone(), r.feature.name().into(), opt(r.cosine)]),
            )?,
        )?;
        put(
            "worst_alignment.csv",
            csv_bytes(
                &["activity", "worst_feature", "worst_feature_a_f", "worst_model", "worst_model_feature", "worst_delta"],
                self.worst_alignment.iter().map(|r| {
                    vec![
                        r.activity.name().into(),
                        r.worst_feature.name().into(),
                        format!("{:?}", r.worst_feature_a_f),
                        r.worst_model.clone(),
                        r.worst_model_feature.name().into(),
                        format!("{:?}", r.worst_delta),
                    ]
                }),
            )?,
        )?;
        Ok(written)
    }
}

/// Demographic attribute used to partition records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Male,
    Race,
    Spouse,
    Edu,
    AgeBand,
}

impl GroupKey {
    pub fn parse(name: &str) -> Option<GroupKey> {
        match name {
            "male" | "sex" => Some(GroupKey::Male),
            "race" => Some(GroupKey::Race),
            "spouse" | "spousepres" => Some(GroupKey::Spouse),
            "edu" => Some(GroupKey::Edu),
            "age_band" => Some(GroupKey::AgeBand),
            _ => None,
        }
    }

    fn value(self, r: &Record) -> String {
        match self {
            GroupKey::Male => u8::from(r.demo.male).to_string(),
            GroupKey::Race => r.demo.race.code().to_string(),
            GroupKey::Spouse => r.demo.spouse.code().to_string(),
            GroupKey::Edu => r.demo.edu.level().to_string(),
            GroupKey::AgeBand => match age_band(r.demo.age) {
                Some(b) => b.to_string(),
                None => "out".into(),
            },
        }
    }
}

/// One cell of a partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// `key=value` pairs, one per grouping key.
    pub label: Vec<(GroupKey, String)>,
    pub indices: Vec<usize>,
    /// Fewer members than the minimum size.
    pub unstable: bool,
}

pub const DEFAULT_MIN_GROUP_SIZE: usize = 50;

/// Partitions records by the given keys; groups are ordered by label.
pub fn subgroup_aggregate(records: &[Record], keys: &[GroupKey], min_size: usize) -> Result<Vec<Group>> {
    if keys.is_empty() || records.is_empty() {
        return Err(Error::InsufficientData("empty group set".into()));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(keys.iter().map(|k| k.value(r)).collect()).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(vals, indices)| Group {
            label: keys.iter().copied().zip(vals).collect(),
            unstable: indices.len() < min_size,
            indices,
        })
        .collect())
}

/// Mean observed shares of a group's members.
pub fn group_mean_shares(records: &[Record], group: &Group) -> Result<[f64; 4]> {
    let mut acc = [0.0; 4];
    for &i in &group.indices {
        let s = records[i].observed()?.to_shares();
        for (a, v) in acc.iter_mut().zip(s.as_array()) {
            *a += v;
        }
    }
    Ok(acc.map(|v| v / group.indices.len() as f64))
}

/// Runs a structural fit per group. Groups whose design is degenerate keep
/// their error rather than aborting the others.
pub fn fit_groups(records: &[Record], groups: &[Group], opts: &FitOptions) -> Vec<Result<FitResult>> {
    groups
        .iter()
        .map(|g| {
            let members: Vec<Record> = g.indices.iter().map(|&i| records[i].clone()).collect();
            fit_structural(&members, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_population, PopulationConfig};

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector(_))));
    }

    fn theta_with(f: impl Fn(Activity, Feature) -> f64) -> ThetaMatrix {
        let mut t = ThetaMatrix::zeros();
        for a in Activity::FREE {
            for feat in Feature::ALL {
                t.set(a, feat, f(a, feat)).unwrap();
            }
        }
        t
    }

    #[test]
    fn deviations_of_reported_black_coefficients() {
        let mut human = ThetaMatrix::zeros();
        human.set(Activity::Leisure, Feature::RaceBlack, 0.164).unwrap();
        human.set(Activity::SleepPersonal, Feature::RaceBlack, 0.189).unwrap();
        human.set(Activity::Work, Feature::RaceBlack, 0.216).unwrap();
        let mut model = human.clone();
        model.set(Activity::Leisure, Feature::RaceBlack, -0.053).unwrap();
        let d = Deviations::between(&human, &model);
        assert!((d.get(Activity::Leisure, Feature::RaceBlack) - 0.217).abs() < 1e-12);
        assert_eq!(d.get(Activity::Work, Feature::RaceBlack), 0.0);
    }

    #[test]
    fn constant_offset_and_identity() {
        let human = theta_with(|a, f| a.index() as f64 * 0.3 - f.index() as f64 * 0.05);
        let shifted = theta_with(|a, f| human.get(a, f) + 0.1);
        let d = Deviations::between(&human, &shifted);
        assert!(d.selected(true).iter().all(|v| (v - 0.1).abs() < 1e-12));
        let z = Deviations::between(&human, &human);
        assert_eq!(model_divergence(&z, true), 0.0);
    }

    #[test]
    fn divergence_means() {
        let mut t = Deviations { cells: [[0.0; FEATURE_DIM]; 3] };
        t.cells[0][0] = 0.1;
        t.cells[1][0] = 0.2;
        t.cells[2][0] = 0.3;
        let expected = 0.6 / 33.0;
        assert!((model_divergence(&t, true) - expected).abs() < 1e-15);
        let a = Deviations { cells: [[0.1; FEATURE_DIM]; 3] };
        let b = Deviations { cells: [[0.3; FEATURE_DIM]; 3] };
        let af = attribute_divergence(&[a.clone(), b]).unwrap();
        assert!(af.selected(true).iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(attribute_divergence(&[a.clone()]).unwrap(), a);
        assert!(attribute_divergence(&[]).is_err());
    }

    #[test]
    fn subgroups_partition_by_sex() {
        let (recs, _) = generate_population(&PopulationConfig { n: 300, ..PopulationConfig::default() }).unwrap();
        let groups = subgroup_aggregate(&recs, &[GroupKey::Male], 50).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups.iter().map(|g| g.indices.len()).sum::<usize>(), 300);
        assert!(subgroup_aggregate(&recs, &[], 50).is_err());
        let white = PopulationConfig { n: 60, race_probs: [1.0, 0.0, 0.0, 0.0, 0.0], ..PopulationConfig::default() };
        let (recs, _) = generate_population(&white).unwrap();
        let groups = subgroup_aggregate(&recs, &[GroupKey::Race], 50).unwrap();
        assert_eq!(groups.len(), 1);
        assert!(!groups[0].unstable);
    }
}
