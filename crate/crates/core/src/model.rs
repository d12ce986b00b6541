//! The structural time-allocation model.
//!
//! A decision maker with covariates `x` splits a daily budget of `T` minutes
//! across four activities. Each focal activity `j` has a linear index
//! `θ_j·x`; the reference activity (Other) has its index pinned to zero.
//! Under the default exponentiated-index form the optimal shares are the
//! softmax of the indices, which is the closed-form maximizer of
//! `Σ_j exp(θ_j·x) ln h_j` subject to `Σ_j h_j = T`.

use std::collections::HashMap;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minutes in a day.
pub const DEFAULT_TOTAL_MINUTES: f64 = 1440.0;

/// Number of covariates, including the intercept.
pub const FEATURE_DIM: usize = 11;

/// Number of activities with free coefficients (all but the reference).
pub const FREE_ACTIVITIES: usize = 3;

/// Number of free structural parameters.
pub const PARAM_DIM: usize = FREE_ACTIVITIES * FEATURE_DIM;

/// Lower bound applied to predicted shares before taking logs.
pub const SHARE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Leisure,
    Work,
    SleepPersonal,
    Other,
}

impl Activity {
    /// Canonical order: Leisure, Work, Sleep/Personal, Other.
    pub const ALL: [Activity; 4] = [
        Activity::Leisure,
        Activity::Work,
        Activity::SleepPersonal,
        Activity::Other,
    ];

    /// Activities that carry free coefficients.
    pub const FREE: [Activity; 3] = [Activity::Leisure, Activity::Work, Activity::SleepPersonal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Leisure => "leisure",
            Activity::Work => "work",
            Activity::SleepPersonal => "sleep_personal",
            Activity::Other => "other",
        }
    }

    pub fn code(self) -> char {
        match self {
            Activity::Leisure => 'L',
            Activity::Work => 'W',
            Activity::SleepPersonal => 'S',
            Activity::Other => 'O',
        }
    }

    pub fn from_name(name: &str) -> Option<Activity> {
        Activity::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "intercept")]
    Intercept,
    #[serde(rename = "age_z")]
    Age,
    #[serde(rename = "edu_z")]
    Edu,
    #[serde(rename = "earnweek_z")]
    Earnweek,
    #[serde(rename = "male")]
    Male,
    #[serde(rename = "spouse_present")]
    SpousePresent,
    #[serde(rename = "partner_present")]
    PartnerPresent,
    #[serde(rename = "race_black")]
    RaceBlack,
    #[serde(rename = "race_native")]
    RaceNative,
    #[serde(rename = "race_asian")]
    RaceAsian,
    #[serde(rename = "race_pacific")]
    RacePacific,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_DIM] = [
        Feature::Intercept,
        Feature::Age,
        Feature::Edu,
        Feature::Earnweek,
        Feature::Male,
        Feature::SpousePresent,
        Feature::PartnerPresent,
        Feature::RaceBlack,
        Feature::RaceNative,
        Feature::RaceAsian,
        Feature::RacePacific,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Intercept => "intercept",
            Feature::Age => "age_z",
            Feature::Edu => "edu_z",
            Feature::Earnweek => "earnweek_z",
            Feature::Male => "male",
            Feature::SpousePresent => "spouse_present",
            Feature::PartnerPresent => "partner_present",
            Feature::RaceBlack => "race_black",
            Feature::RaceNative => "race_native",
            Feature::RaceAsian => "race_asian",
            Feature::RacePacific => "race_pacific",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn is_binary(self) -> bool {
        !matches!(
            self,
            Feature::Intercept | Feature::Age | Feature::Edu | Feature::Earnweek
        )
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One respondent's covariates in canonical feature order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector([f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn new(values: [f64; FEATURE_DIM]) -> Result<Self> {
        if values[Feature::Intercept.index()] != 1.0 {
            return Err(Error::InvalidFeatures(format!(
                "intercept must be 1.0, got {}",
                values[0]
            )));
        }
        for feature in Feature::ALL {
            let v = values[feature.index()];
            if !v.is_finite() {
                return Err(Error::InvalidFeatures(format!("{feature} is not finite")));
            }
            if feature.is_binary() && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidFeatures(format!(
                    "{feature} must be 0 or 1, got {v}"
                )));
            }
        }
        Ok(FeatureVector(values))
    }

    /// Intercept-only vector with every other covariate at zero.
    pub fn intercept_only() -> Self {
        let mut v = [0.0; FEATURE_DIM];
        v[0] = 1.0;
        FeatureVector(v)
    }

    pub fn get(&self, feature: Feature) -> f64 {
        self.0[feature.index()]
    }

    pub fn as_array(&self) -> &[f64; FEATURE_DIM] {
        &self.0
    }
}

/// Coefficients for Leisure, Work and Sleep/Personal; Other is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaMatrix {
    coef: [[f64; FEATURE_DIM]; FREE_ACTIVITIES],
}

impl Default for ThetaMatrix {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ThetaMatrix {
    pub fn zeros() -> Self {
        ThetaMatrix {
            coef: [[0.0; FEATURE_DIM]; FREE_ACTIVITIES],
        }
    }

    pub fn from_rows(coef: [[f64; FEATURE_DIM]; FREE_ACTIVITIES]) -> Result<Self> {
        if coef.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTheta("non-finite coefficient".into()));
        }
        Ok(ThetaMatrix { coef })
    }

    /// Builds from the flattened activity-major layout (L, W, S blocks of
    /// `FEATURE_DIM` coefficients each).
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != PARAM_DIM {
            return Err(Error::InvalidTheta(format!(
                "expected {PARAM_DIM} coefficients, got {}",
                flat.len()
            )));
        }
        let mut coef = [[0.0; FEATURE_DIM]; FREE_ACTIVITIES];
        for (j, row) in coef.iter_mut().enumerate() {
            row.copy_from_slice(&flat[j * FEATURE_DIM..(j + 1) * FEATURE_DIM]);
        }
        Self::from_rows(coef)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coef.iter().flatten().copied().collect()
    }

    /// Coefficient for a free activity; always 0.0 for Other.
    pub fn get(&self, activity: Activity, feature: Feature) -> f64 {
        match activity {
            Activity::Other => 0.0,
            a => self.coef[a.index()][feature.index()],
        }
    }

    /// Sets a coefficient. Setting Other is rejected since it is pinned at zero.
    pub fn set(&mut self, activity: Activity, feature: Feature, value: f64) -> Result<()> {
        if activity == Activity::Other {
            return Err(Error::InvalidTheta(
                "the reference activity is pinned to zero".into(),
            ));
        }
        if !value.is_finite() {
            return Err(Error::InvalidTheta(format!(
                "non-finite value for {activity}/{feature}"
            )));
        }
        self.coef[activity.index()][feature.index()] = value;
        Ok(())
    }

    pub fn row(&self, activity: Activity) -> [f64; FEATURE_DIM] {
        match activity {
            Activity::Other => [0.0; FEATURE_DIM],
            a => self.coef[a.index()],
        }
    }

    pub fn rows(&self) -> &[[f64; FEATURE_DIM]; FREE_ACTIVITIES] {
        &self.coef
    }

    /// Coefficients of one feature across (L, W, S).
    pub fn feature_column(&self, feature: Feature) -> [f64; FREE_ACTIVITIES] {
        let f = feature.index();
        [self.coef[0][f], self.coef[1][f], self.coef[2][f]]
    }

    /// Linear indices `θ_j·x` in canonical order, with Other at zero.
    pub fn indices(&self, x: &FeatureVector) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (j, row) in self.coef.iter().enumerate() {
            out[j] = row.iter().zip(x.as_array()).map(|(t, v)| t * v).sum();
        }
        out
    }
}

impl Serialize for ThetaMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Row<'a>(&'a [f64; FEATURE_DIM]);
        impl Serialize for Row<'_> {
            fn serialize<S: Serializer>(
                &self,
                serializer: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(FEATURE_DIM))?;
                for f in Feature::ALL {
                    map.serialize_entry(f.name(), &self.0[f.index()])?;
                }
                map.end()
            }
        }
        let mut map = serializer.serialize_map(Some(FREE_ACTIVITIES))?;
        for a in Activity::FREE {
            map.serialize_entry(a.name(), &Row(&self.coef[a.index()]))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ThetaMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw: HashMap<String, HashMap<String, f64>> = HashMap::deserialize(deserializer)?;
        let mut theta = ThetaMatrix::zeros();
        for (activity_name, row) in &raw {
            let activity = match Activity::from_name(activity_name) {
                Some(a) if a != Activity::Other => a,
                _ => return Err(de::Error::custom(format!("unknown activity `{activity_name}`"))),
            };
            let unknown: Vec<&str> = row
                .keys()
                .filter(|k| Feature::from_name(k).is_none())
                .map(String::as_str)
                .collect();
            if !unknown.is_empty() {
                return Err(de::Error::custom(format!(
                    "unknown features for {activity_name}: {}",
                    unknown.join(", ")
                )));
            }
            for f in Feature::ALL {
                let v = row.get(f.name()).ok_or_else(|| {
                    de::Error::custom(format!("missing feature {f} for {activity_name}"))
                })?;
                theta.set(activity, f, *v).map_err(de::Error::custom)?;
            }
        }
        for a in Activity::FREE {
            if !raw.contains_key(a.name()) {
                return Err(de::Error::custom(format!("missing activity `{a}`")));
            }
        }
        Ok(theta)
    }
}

/// Minutes per activity in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    minutes: [f64; 4],
}

impl Allocation {
    /// Validates strict positivity and that minutes sum to `total`.
    pub fn new(minutes: [f64; 4], total: f64) -> Result<Self> {
        if let Some(j) = minutes.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::InvalidAllocation(format!(
                "{} minutes must be positive and finite, got {}",
                Activity::ALL[j],
                minutes[j]
            )));
        }
        let sum: f64 = minutes.iter().sum();
        let tol = 1e-9 * (total / DEFAULT_TOTAL_MINUTES).max(1.0);
        if (sum - total).abs() > tol {
            return Err(Error::InvalidAllocation(format!(
                "minutes sum to {sum}, expected {total}"
            )));
        }
        Ok(Allocation { minutes })
    }

    pub fn minutes(&self) -> &[f64; 4] {
        &self.minutes
    }

    pub fn get(&self, activity: Activity) -> f64 {
        self.minutes[activity.index()]
    }

    pub fn total(&self) -> f64 {
        self.minutes.iter().sum()
    }

    pub fn to_shares(&self) -> ShareVector {
        let total = self.total();
        ShareVector(self.minutes.map(|m| m / total))
    }
}

/// Time shares in canonical order; strictly positive and summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareVector([f64; 4]);

impl ShareVector {
    pub fn new(shares: [f64; 4]) -> Result<Self> {
        if shares.iter().any(|s| !(s.is_finite() && *s > 0.0 && *s < 1.0)) {
            return Err(Error::InvalidAllocation(format!(
                "shares must lie in (0, 1): {shares:?}"
            )));
        }
        let sum: f64 = shares.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidAllocation(format!(
                "shares sum to {sum}, expected 1"
            )));
        }
        Ok(ShareVector(shares))
    }

    pub fn as_array(&self) -> &[f64; 4] {
        &self.0
    }

    pub fn get(&self, activity: Activity) -> f64 {
        self.0[activity.index()]
    }
}

/// Which share map turns linear indices into shares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    /// `s_j = exp(θ_j·x) / Σ_k exp(θ_k·x)` with the reference index at 0.
    #[default]
    Softmax,
    /// `s_j = (θ_j·x) / Σ_k (θ_k·x)` with the reference index fixed at 1;
    /// every focal index must be strictly positive.
    LiteralRatio,
}

/// Softmax of the linear indices, with max-subtraction.
pub fn softmax(indices: &[f64; 4]) -> [f64; 4] {
    let max = indices.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = indices.map(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| (e / sum).max(f64::MIN_POSITIVE))
}

/// Optimal shares under the default softmax form.
pub fn predict_shares(theta: &ThetaMatrix, x: &FeatureVector) -> ShareVector {
    ShareVector(softmax(&theta.indices(x)))
}

/// Optimal shares under either model form.
pub fn predict_shares_with(
    form: ModelForm,
    theta: &ThetaMatrix,
    x: &FeatureVector,
) -> Result<ShareVector> {
    match form {
        ModelForm::Softmax => Ok(predict_shares(theta, x)),
        ModelForm::LiteralRatio => {
            let mut idx = theta.indices(x);
            idx[Activity::Other.index()] = 1.0;
            if let Some(j) = idx.iter().position(|v| *v <= 0.0) {
                return Err(Error::InvalidTheta(format!(
                    "literal-ratio index for {} is {} (must be positive)",
                    Activity::ALL[j],
                    idx[j]
                )));
            }
            let sum: f64 = idx.iter().sum();
            Ok(ShareVector(idx.map(|v| v / sum)))
        }
    }
}

fn check_positive(minutes: &[f64; 4]) -> Result<()> {
    match minutes.iter().position(|m| !(*m > 0.0)) {
        Some(j) => Err(Error::InvalidAllocation(format!(
            "{} minutes must be positive for ln, got {}",
            Activity::ALL[j],
            minutes[j]
        ))),
        None => Ok(()),
    }
}

/// `Σ_j (θ_j·x) ln h_j` with the linear indices as weights (the reference
/// activity contributes nothing).
pub fn utility(theta: &ThetaMatrix, x: &FeatureVector, minutes: &[f64; 4]) -> Result<f64> {
    check_positive(minutes)?;
    let idx = theta.indices(x);
    Ok(idx.iter().zip(minutes).map(|(w, h)| w * h.ln()).sum())
}

/// `Σ_j exp(θ_j·x) ln h_j`, the objective whose budget-constrained maximizer
/// is `T · predict_shares`.
pub fn softmax_utility(theta: &ThetaMatrix, x: &FeatureVector, minutes: &[f64; 4]) -> Result<f64> {
    check_positive(minutes)?;
    let idx = theta.indices(x);
    let max = idx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Dividing every weight by exp(max) rescales the objective without moving the maximizer.
    Ok(idx
        .iter()
        .zip(minutes)
        .map(|(v, h)| (v - max).exp() * h.ln())
        .sum())
}

pub fn shares_to_minutes(shares: &ShareVector, total: f64) -> Result<Allocation> {
    if !(total > 0.0) {
        return Err(Error::InvalidConfig(format!("total must be positive, got {total}")));
    }
    Allocation::new(shares.0.map(|s| s * total), total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform() -> [f64; 4] {
        [360.0; 4]
    }

    #[test]
    fn utility_zero_theta_is_zero() {
        let u = utility(&ThetaMatrix::zeros(), &FeatureVector::intercept_only(), &uniform()).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn utility_intercept_only_leisure() {
        let mut theta = ThetaMatrix::zeros();
        theta.set(Activity::Leisure, Feature::Intercept, 1.0).unwrap();
        let u = utility(&theta, &FeatureVector::intercept_only(), &uniform()).unwrap();
        // ln(360) = 5.886104031450156
        assert!((u - 5.886_104_031_450_156).abs() < 1e-12);
    }

    #[test]
    fn utility_rejects_zero_minutes() {
        let h = [720.0, 0.0, 360.0, 360.0];
        assert!(utility(&ThetaMatrix::zeros(), &FeatureVector::intercept_only(), &h).is_err());
        assert!(softmax_utility(&ThetaMatrix::zeros(), &FeatureVector::intercept_only(), &h).is_err());
    }

    #[test]
    fn shares_uniform_and_ln2() {
        let x = FeatureVector::intercept_only();
        let s = predict_shares(&ThetaMatrix::zeros(), &x);
        assert_eq!(s.as_array(), &[0.25; 4]);

        let mut theta = ThetaMatrix::zeros();
        theta.set(Activity::Leisure, Feature::Intercept, 2f64.ln()).unwrap();
        let s = predict_shares(&theta, &x);
        let expected = [0.4, 0.2, 0.2, 0.2];
        for (a, b) in s.as_array().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shares_stable_for_extreme_indices() {
        let mut theta = ThetaMatrix::zeros();
        theta.set(Activity::Leisure, Feature::Intercept, 700.0).unwrap();
        theta.set(Activity::Work, Feature::Intercept, -700.0).unwrap();
        let s = predict_shares(&theta, &FeatureVector::intercept_only());
        assert!(s.as_array().iter().all(|v| *v > 0.0 && v.is_finite()));
        assert!((s.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minutes_from_paper_means() {
        let means = [247.0, 266.0, 578.0, 349.0];
        let shares = ShareVector::new(means.map(|m| m / 1440.0)).unwrap();
        let alloc = shares_to_minutes(&shares, 1440.0).unwrap();
        for (a, b) in alloc.minutes().iter().zip(means) {
            assert!((a - b).abs() < 1e-9);
        }
        let back = shares_to_minutes(&alloc.to_shares(), 1440.0).unwrap();
        for (a, b) in back.minutes().iter().zip(means) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn allocation_invariants() {
        assert!(Allocation::new([360.0; 4], 1440.0).is_ok());
        assert!(Allocation::new([360.0, 360.0, 360.0, 361.0], 1440.0).is_err());
        assert!(Allocation::new([720.0, 720.0, 0.0, 0.0], 1440.0).is_err());
    }

    #[test]
    fn feature_vector_validation() {
        let mut v = [0.0; FEATURE_DIM];
        assert!(FeatureVector::new(v).is_err());
        v[0] = 1.0;
        v[Feature::Male.index()] = 0.5;
        assert!(FeatureVector::new(v).is_err());
        v[Feature::Male.index()] = 1.0;
        v[Feature::Age.index()] = -1.3;
        assert!(FeatureVector::new(v).is_ok());
    }

    #[test]
    fn literal_ratio_form() {
        let mut theta = ThetaMatrix::zeros();
        for a in Activity::FREE {
            theta.set(a, Feature::Intercept, 1.0).unwrap();
        }
        let x = FeatureVector::intercept_only();
        let s = predict_shares_with(ModelForm::LiteralRatio, &theta, &x).unwrap();
        assert_eq!(s.as_array(), &[0.25; 4]);
        assert!(predict_shares_with(ModelForm::LiteralRatio, &ThetaMatrix::zeros(), &x).is_err());
    }

    #[test]
    fn theta_json_round_trip_and_schema_errors() {
        let theta = ThetaMatrix::from_flat(&(0..PARAM_DIM).map(|i| i as f64 * 0.1).collect::<Vec<_>>())
            .unwrap();
        let json = serde_json::to_string(&theta).unwrap();
        let back: ThetaMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(theta, back);
        let bad = json.replace("race_pacific", "race_martian");
        assert!(serde_json::from_str::<ThetaMatrix>(&bad).is_err());
    }
}
