//! Survey-extract ingestion: row cleaning, standardization and summaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activity, Feature, DEFAULT_TOTAL_MINUTES};
use crate::record::{
    repair_minutes, ContinuousField, Demographics, EduLevel, Moments, Race, Record, SpouseStatus,
    StandardizationParams,
};
use crate::model::Allocation;

const MISSING_EARNINGS: f64 = 99999.99;
const BUDGET_TOLERANCE: f64 = 1e-6;

/// One parsed row of a survey extract, before any recoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSurveyRow {
    pub record_id: String,
    pub sex: i64,
    pub race: i64,
    pub earnweek: f64,
    pub educyrs: i64,
    pub spousepres: i64,
    pub age: f64,
    pub minutes_work: f64,
    pub minutes_leisure: f64,
    pub minutes_sleep: f64,
    pub minutes_other: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Unparseable,
    SexNiu,
    SpouseNiu,
    MultiracialExcluded,
    MissingEarnings,
    InvalidSexCode,
    UnknownRaceCode,
    EducationUnmapped,
    InvalidSpouseCode,
    InvalidAge,
    InvalidMinutes,
    BudgetMismatch,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Unparseable => "unparseable",
            RejectReason::SexNiu => "sex-niu",
            RejectReason::SpouseNiu => "spouse-niu",
            RejectReason::MultiracialExcluded => "multiracial-excluded",
            RejectReason::MissingEarnings => "missing-earnings",
            RejectReason::InvalidSexCode => "invalid-sex-code",
            RejectReason::UnknownRaceCode => "unknown-race-code",
            RejectReason::EducationUnmapped => "education-unmapped",
            RejectReason::InvalidSpouseCode => "invalid-spouse-code",
            RejectReason::InvalidAge => "invalid-age",
            RejectReason::InvalidMinutes => "invalid-minutes",
            RejectReason::BudgetMismatch => "budget-mismatch",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A row that passed every rule; continuous fields are still unstandardized.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedRecord {
    pub record_id: String,
    pub demo: Demographics,
    pub observed: Allocation,
    pub renormalized: bool,
    pub floored: bool,
}

/// Applies the cleaning rules in order and returns the first that fires.
pub fn clean_row(row: &RawSurveyRow) -> std::result::Result<StagedRecord, RejectReason> {
    if row.sex == 99 {
        return Err(RejectReason::SexNiu);
    }
    if row.spousepres == 99 {
        return Err(RejectReason::SpouseNiu);
    }
    if row.race >= 200 {
        return Err(RejectReason::MultiracialExcluded);
    }
    if (row.earnweek - MISSING_EARNINGS).abs() < 1e-6 {
        return Err(RejectReason::MissingEarnings);
    }
    let male = match row.sex {
        1 => true,
        2 => false,
        _ => return Err(RejectReason::InvalidSexCode),
    };
    let race = u32::try_from(row.race)
        .ok()
        .and_then(Race::from_code)
        .ok_or(RejectReason::UnknownRaceCode)?;
    let edu = u32::try_from(row.educyrs)
        .ok()
        .and_then(EduLevel::from_educyrs)
        .ok_or(RejectReason::EducationUnmapped)?;
    let spouse = u32::try_from(row.spousepres)
        .ok()
        .and_then(SpouseStatus::from_code)
        .ok_or(RejectReason::InvalidSpouseCode)?;
    if !(row.age.is_finite() && row.age >= 0.0) {
        return Err(RejectReason::InvalidAge);
    }
    if !(row.earnweek.is_finite() && row.earnweek >= 0.0) {
        return Err(RejectReason::MissingEarnings);
    }
    // canonical order L, W, S, O
    let minutes = [row.minutes_leisure, row.minutes_work, row.minutes_sleep, row.minutes_other];
    if minutes.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(RejectReason::InvalidMinutes);
    }
    let sum: f64 = minutes.iter().sum();
    if (sum - DEFAULT_TOTAL_MINUTES).abs() > BUDGET_TOLERANCE {
        return Err(RejectReason::BudgetMismatch);
    }
    let (observed, _, floored) =
        repair_minutes(minutes, DEFAULT_TOTAL_MINUTES).map_err(|_| RejectReason::InvalidMinutes)?;
    Ok(StagedRecord {
        record_id: row.record_id.clone(),
        demo: Demographics {
            age: row.age,
            male,
            race,
            edu,
            spouse,
            earnweek: row.earnweek,
        },
        observed,
        // sub-tolerance rescaling is not reported as a repair
        renormalized: false,
        floored,
    })
}

/// Maps logical fields to the column names of a particular extract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeaderMap {
    /// Optional identifier column; row numbers are used when absent.
    pub record_id: Option<String>,
    pub sex: String,
    pub race: String,
    pub earnweek: String,
    pub educyrs: String,
    pub spousepres: String,
    pub age: String,
    pub minutes_work: String,
    pub minutes_leisure: String,
    pub minutes_sleep: String,
    pub minutes_other: String,
}

impl Default for HeaderMap {
    fn default() -> Self {
        HeaderMap {
            record_id: Some("CASEID".into()),
            sex: "SEX".into(),
            race: "RACE".into(),
            earnweek: "EARNWEEK".into(),
            educyrs: "EDUCYRS".into(),
            spousepres: "SPOUSEPRES".into(),
            age: "AGE".into(),
            minutes_work: "WORK".into(),
            minutes_leisure: "LEISURE".into(),
            minutes_sleep: "SLEEP".into(),
            minutes_other: "OTHER".into(),
        }
    }
}

/// A raw row or the reason it could not even be parsed.
pub type ParsedRow = std::result::Result<RawSurveyRow, (String, RejectReason)>;

/// Reads a delimited extract. Rows with unparseable fields are returned as
/// rejections so the funnel still accounts for them.
pub fn read_raw_csv<R: Read>(reader: R, map: &HeaderMap, delimiter: u8) -> Result<Vec<ParsedRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| -> Result<usize> {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::SchemaMismatch(format!("input has no column `{name}`")))
    };
    let id_col = match &map.record_id {
        Some(name) => position.get(name.as_str()).copied(),
        None => None,
    };
    let cols = [
        col(&map.sex)?,
        col(&map.race)?,
        col(&map.earnweek)?,
        col(&map.educyrs)?,
        col(&map.spousepres)?,
        col(&map.age)?,
        col(&map.minutes_work)?,
        col(&map.minutes_leisure)?,
        col(&map.minutes_sleep)?,
        col(&map.minutes_other)?,
    ];
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let record_id = id_col
            .and_then(|c| rec.get(c))
            .map(str::to_string)
            .unwrap_or_else(|| (i + 1).to_string());
        let f = |k: usize| rec.get(cols[k]).and_then(|s| s.parse::<f64>().ok());
        let int = |k: usize| f(k).filter(|v| v.fract() == 0.0).map(|v| v as i64);
        let parsed = (|| {
            Some(RawSurveyRow {
                record_id: record_id.clone(),
                sex: int(0)?,
                race: int(1)?,
                earnweek: f(2)?,
                educyrs: int(3)?,
                spousepres: int(4)?,
                age: f(5)?,
                minutes_work: f(6)?,
                minutes_leisure: f(7)?,
                minutes_sleep: f(8)?,
                minutes_other: f(9)?,
            })
        })();
        out.push(parsed.ok_or((record_id, RejectReason::Unparseable)));
    }
    Ok(out)
}

/// Outcome of cleaning a whole extract.
#[derive(Clone, Debug, Default)]
pub struct CleanOutcome {
    pub accepted: Vec<StagedRecord>,
    pub rejected: Vec<(String, RejectReason)>,
}

impl CleanOutcome {
    pub fn funnel(&self) -> Funnel {
        let mut by_reason = BTreeMap::new();
        for (_, reason) in &self.rejected {
            *by_reason.entry(reason.as_str().to_string()).or_insert(0) += 1;
        }
        Funnel {
            raw: self.accepted.len() + self.rejected.len(),
            accepted: self.accepted.len(),
            rejected: by_reason,
        }
    }
}

/// Counts from raw N to final N, by rejection reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub raw: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
}

/// Cleans every row in parallel; output order follows input order.
pub fn clean_rows(rows: Vec<ParsedRow>) -> CleanOutcome {
    let results: Vec<_> = rows
        .into_par_iter()
        .map(|row| match row {
            Ok(raw) => clean_row(&raw).map_err(|reason| (raw.record_id.clone(), reason)),
            Err(rejection) => Err(rejection),
        })
        .collect();
    let mut out = CleanOutcome::default();
    for r in results {
        match r {
            Ok(staged) => out.accepted.push(staged),
            Err(rejection) => out.rejected.push(rejection),
        }
    }
    out
}

fn sample_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Fits z-score moments for age, education level and weekly earnings using
/// the sample (n−1) standard deviation.
pub fn fit_standardization(demos: &[Demographics]) -> Result<StandardizationParams> {
    if demos.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "standardization needs at least 2 records, got {}",
            demos.len()
        )));
    }
    let moments = |field: ContinuousField| -> Result<Moments> {
        let values: Vec<f64> = demos.iter().map(|d| field.value(d)).collect();
        let (mean, sd) = sample_moments(&values);
        // relative guard so constant columns with rounding noise still count as constant
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(field.name().to_string()));
        }
        Ok(Moments { mean, sd })
    };
    Ok(StandardizationParams {
        age: moments(ContinuousField::Age)?,
        edu: moments(ContinuousField::Edu)?,
        earnweek: moments(ContinuousField::Earnweek)?,
    })
}

pub fn apply_standardization(staged: &[StagedRecord], params: &StandardizationParams) -> Vec<Record> {
    staged
        .par_iter()
        .map(|s| {
            let mut r = Record::new(s.record_id.clone(), s.demo, params).with_observed(s.observed);
            r.renormalized = s.renormalized;
            r.floored = s.floored;
            r
        })
        .collect()
}

/// Per-variable descriptive statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variable: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// False when fewer than two records make the sd undefined (reported as 0).
    pub sd_defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, variable: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variable", "n", "mean", "sd", "min", "max", "sd_defined"])?;
        for r in &self.rows {
            w.write_record([
                r.variable.clone(),
                r.n.to_string(),
                format!("{:?}", r.mean),
                format!("{:?}", r.sd),
                format!("{:?}", r.min),
                format!("{:?}", r.max),
                r.sd_defined.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::io("<summary>", e.into_error()))
    }
}

/// Raw continuous attributes, model features and mean minutes per activity.
pub fn summarize(records: &[Record]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InsufficientData("cannot summarize an empty sample".into()));
    }
    let mut rows = Vec::new();
    let mut push = |variable: String, values: Vec<f64>| {
        let (mean, sd) = sample_moments(&values);
        rows.push(SummaryRow {
            variable,
            n: values.len(),
            mean,
            sd,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            sd_defined: values.len() >= 2,
        });
    };
    for field in ContinuousField::ALL {
        push(field.name().to_string(), records.iter().map(|r| field.value(&r.demo)).collect());
    }
    for f in Feature::ALL.into_iter().skip(1) {
        push(f.name().to_string(), records.iter().map(|r| r.features.get(f)).collect());
    }
    let with_obs: Vec<&Record> = records.iter().filter(|r| r.observed.is_some()).collect();
    if !with_obs.is_empty() {
        for a in Activity::ALL {
            push(
                format!("minutes_{}", a.name()),
                with_obs.iter().map(|r| r.observed.unwrap().get(a)).collect(),
            );
        }
    }
    Ok(Summary { n: records.len(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> RawSurveyRow {
        RawSurveyRow {
            record_id: "1".into(),
            sex: 1,
            race: 100,
            earnweek: 800.0,
            educyrs: 217,
            spousepres: 1,
            age: 40.0,
            minutes_work: 480.0,
            minutes_leisure: 240.0,
            minutes_sleep: 480.0,
            minutes_other: 240.0,
        }
    }

    #[test]
    fn rejection_rules() {
        assert_eq!(clean_row(&RawSurveyRow { earnweek: 99999.99, ..row() }), Err(RejectReason::MissingEarnings));
        assert_eq!(clean_row(&RawSurveyRow { race: 200, ..row() }), Err(RejectReason::MultiracialExcluded));
        assert_eq!(clean_row(&RawSurveyRow { sex: 99, ..row() }), Err(RejectReason::SexNiu));
        assert_eq!(clean_row(&RawSurveyRow { spousepres: 99, ..row() }), Err(RejectReason::SpouseNiu));
        assert_eq!(clean_row(&RawSurveyRow { race: 105, ..row() }), Err(RejectReason::UnknownRaceCode));
        assert_eq!(clean_row(&RawSurveyRow { educyrs: 250, ..row() }), Err(RejectReason::EducationUnmapped));
        assert_eq!(
            clean_row(&RawSurveyRow { minutes_other: 250.0, ..row() }),
            Err(RejectReason::BudgetMismatch)
        );
        // SEX=99 fires before the multiracial rule
        assert_eq!(clean_row(&RawSurveyRow { sex: 99, race: 300, ..row() }), Err(RejectReason::SexNiu));
    }

    #[test]
    fn recoding() {
        let s = clean_row(&row()).unwrap();
        assert_eq!(s.demo.edu, EduLevel::Bachelor);
        assert_eq!(s.demo.edu.level(), 3);
        assert!(s.demo.male);
        assert_eq!(s.demo.spouse, SpouseStatus::Spouse);
        assert_eq!(s.observed.minutes(), &[240.0, 480.0, 480.0, 240.0]);
        let s = clean_row(&RawSurveyRow { race: 132, spousepres: 2, sex: 2, ..row() }).unwrap();
        assert_eq!(s.demo.race, Race::Pacific);
        assert_eq!(s.demo.spouse, SpouseStatus::Partner);
        assert!(!s.demo.male);
    }

    #[test]
    fn zero_minutes_are_floored() {
        let s = clean_row(&RawSurveyRow { minutes_work: 0.0, minutes_leisure: 720.0, ..row() }).unwrap();
        assert!(s.floored);
        assert!(s.observed.minutes().iter().all(|m| *m > 0.0));
    }

    fn demo_with_age(age: f64, edu: EduLevel) -> Demographics {
        Demographics {
            age,
            male: false,
            race: Race::White,
            edu,
            spouse: SpouseStatus::NoPartner,
            earnweek: 100.0 * age,
        }
    }

    #[test]
    fn standardization_two_ages() {
        let demos = [demo_with_age(20.0, EduLevel::HighSchool), demo_with_age(40.0, EduLevel::Bachelor)];
        let p = fit_standardization(&demos).unwrap();
        assert!((p.age.sd - 14.142_135_623_730_951).abs() < 1e-12);
        let z: Vec<f64> = demos.iter().map(|d| p.features(d).get(Feature::Age)).collect();
        assert!((z[0] + 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!((z[1] - 0.707_106_781_186_547_5).abs() < 1e-12);
    }

    #[test]
    fn constant_column_names_itself() {
        let demos = [demo_with_age(20.0, EduLevel::Bachelor), demo_with_age(40.0, EduLevel::Bachelor)];
        match fit_standardization(&demos) {
            Err(Error::ZeroVariance(col)) => assert_eq!(col, "edu"),
            other => panic!("expected zero variance error, got {other:?}"),
        }
    }

    #[test]
    fn single_record_summary_flags_sd() {
        let p = StandardizationParams {
            age: Moments { mean: 0.0, sd: 1.0 },
            edu: Moments { mean: 0.0, sd: 1.0 },
            earnweek: Moments { mean: 0.0, sd: 1.0 },
        };
        let r = Record::new("x", demo_with_age(30.0, EduLevel::HighSchool), &p);
        let s = summarize(&[r]).unwrap();
        let age = s.row("age").unwrap();
        assert_eq!(age.sd, 0.0);
        assert!(!age.sd_defined);
    }

    #[test]
    fn header_map_and_unparseable_rows() {
        let csv = "CASEID,SEX,RACE,EARNWEEK,EDUCYRS,SPOUSEPRES,AGE,WORK,LEISURE,SLEEP,OTHER\n\
                   a,1,100,800,217,1,40,480,240,480,240\n\
                   b,x,100,800,217,1,40,480,240,480,240\n\
                   c,2,110,99999.99,217,1,40,480,240,480,240\n";
        let rows = read_raw_csv(csv.as_bytes(), &HeaderMap::default(), b',').unwrap();
        let out = clean_rows(rows);
        let funnel = out.funnel();
        assert_eq!(funnel.raw, 3);
        assert_eq!(funnel.accepted, 1);
        assert_eq!(funnel.rejected["unparseable"], 1);
        assert_eq!(funnel.rejected["missing-earnings"], 1);
        assert_eq!(out.rejected[0].0, "b");
    }
}
