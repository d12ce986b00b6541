//! Respondent records shared across ingest, simulation, agents and shifts,
//! plus the cleaned-records CSV format.
//!
//! Cleaned-records CSV columns, in order:
//!
//! ```text
//! record_id, age, sex, race, edu, earnweek, spousepres,
//! intercept, age_z, edu_z, earnweek_z, male, spouse_present, partner_present,
//! race_black, race_native, race_asian, race_pacific,
//! minutes_leisure, minutes_work, minutes_sleep_personal, minutes_other,
//! renormalized, floored
//! ```
//!
//! `sex`, `race` and `spousepres` carry the survey codes (1/2, 100/110/120/131/132,
//! 1/2/3); `edu` is the collapsed level 1..=4. Minutes columns are empty when a
//! record has no observed allocation yet.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activity, Allocation, Feature, FeatureVector, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    White,
    Black,
    Native,
    Asian,
    Pacific,
}

impl Race {
    pub const ALL: [Race; 5] = [Race::White, Race::Black, Race::Native, Race::Asian, Race::Pacific];

    pub fn code(self) -> u32 {
        match self {
            Race::White => 100,
            Race::Black => 110,
            Race::Native => 120,
            Race::Asian => 131,
            Race::Pacific => 132,
        }
    }

    pub fn from_code(code: u32) -> Option<Race> {
        Race::ALL.into_iter().find(|r| r.code() == code)
    }

    /// Demographic label used in prompts and persona sentences.
    pub fn label(self) -> &'static str {
        match self {
            Race::White => "White",
            Race::Black => "Black",
            Race::Native => "American Indian or Alaskan Native",
            Race::Asian => "Asian",
            Race::Pacific => "Native Hawaiian or Pacific Islander",
        }
    }

    pub fn from_label(label: &str) -> Option<Race> {
        Race::ALL.into_iter().find(|r| r.label() == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpouseStatus {
    Spouse,
    Partner,
    NoPartner,
}

impl SpouseStatus {
    pub const ALL: [SpouseStatus; 3] = [SpouseStatus::Spouse, SpouseStatus::Partner, SpouseStatus::NoPartner];

    pub fn code(self) -> u32 {
        match self {
            SpouseStatus::Spouse => 1,
            SpouseStatus::Partner => 2,
            SpouseStatus::NoPartner => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<SpouseStatus> {
        SpouseStatus::ALL.into_iter().find(|s| s.code() == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EduLevel {
    HighSchool,
    SomeCollege,
    Bachelor,
    Advanced,
}

impl EduLevel {
    pub const ALL: [EduLevel; 4] = [EduLevel::HighSchool, EduLevel::SomeCollege, EduLevel::Bachelor, EduLevel::Advanced];

    pub fn level(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_level(level: u32) -> Option<EduLevel> {
        EduLevel::ALL.into_iter().find(|e| e.level() == level)
    }

    /// Collapses a detailed EDUCYRS code; codes 218..=300 have no level.
    pub fn from_educyrs(code: u32) -> Option<EduLevel> {
        match code {
            0..=112 => Some(EduLevel::HighSchool),
            113..=216 => Some(EduLevel::SomeCollege),
            217 => Some(EduLevel::Bachelor),
            c if c > 300 => Some(EduLevel::Advanced),
            _ => None,
        }
    }
}

/// Unstandardized respondent attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    pub male: bool,
    pub race: Race,
    pub edu: EduLevel,
    pub spouse: SpouseStatus,
    pub earnweek: f64,
}

/// Which continuous column a moment or error refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousField {
    Age,
    Edu,
    Earnweek,
}

impl ContinuousField {
    pub const ALL: [ContinuousField; 3] = [ContinuousField::Age, ContinuousField::Edu, ContinuousField::Earnweek];

    pub fn name(self) -> &'static str {
        match self {
            ContinuousField::Age => "age",
            ContinuousField::Edu => "edu",
            ContinuousField::Earnweek => "earnweek",
        }
    }

    pub fn value(self, demo: &Demographics) -> f64 {
        match self {
            ContinuousField::Age => demo.age,
            ContinuousField::Edu => demo.edu.level() as f64,
            ContinuousField::Earnweek => demo.earnweek,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

/// Means and sample standard deviations of the continuous covariates.
/// Serialized as `{"age": {"mean", "sd"}, "edu": {...}, "earnweek": {...}}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub age: Moments,
    pub edu: Moments,
    pub earnweek: Moments,
}

impl StandardizationParams {
    pub fn get(&self, field: ContinuousField) -> Moments {
        match field {
            ContinuousField::Age => self.age,
            ContinuousField::Edu => self.edu,
            ContinuousField::Earnweek => self.earnweek,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for field in ContinuousField::ALL {
            let m = self.get(field);
            if !(m.sd > 0.0 && m.sd.is_finite() && m.mean.is_finite()) {
                return Err(Error::ZeroVariance(field.name().to_string()));
            }
        }
        Ok(())
    }

    /// Builds the model feature vector for one respondent.
    pub fn features(&self, demo: &Demographics) -> FeatureVector {
        let z = |field: ContinuousField| {
            let m = self.get(field);
            (field.value(demo) - m.mean) / m.sd
        };
        let b = |flag: bool| if flag { 1.0 } else { 0.0 };
        let mut v = [0.0; FEATURE_DIM];
        v[Feature::Intercept.index()] = 1.0;
        v[Feature::Age.index()] = z(ContinuousField::Age);
        v[Feature::Edu.index()] = z(ContinuousField::Edu);
        v[Feature::Earnweek.index()] = z(ContinuousField::Earnweek);
        v[Feature::Male.index()] = b(demo.male);
        v[Feature::SpousePresent.index()] = b(demo.spouse == SpouseStatus::Spouse);
        v[Feature::PartnerPresent.index()] = b(demo.spouse == SpouseStatus::Partner);
        v[Feature::RaceBlack.index()] = b(demo.race == Race::Black);
        v[Feature::RaceNative.index()] = b(demo.race == Race::Native);
        v[Feature::RaceAsian.index()] = b(demo.race == Race::Asian);
        v[Feature::RacePacific.index()] = b(demo.race == Race::Pacific);
        FeatureVector::new(v).expect("standardized features are finite and binaries are 0/1")
    }
}

/// One respondent (human or simulated) with model features and, once
/// available, an observed allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub demo: Demographics,
    pub features: FeatureVector,
    pub observed: Option<Allocation>,
    /// Observed minutes were rescaled to the daily budget.
    pub renormalized: bool,
    /// At least one zero-minute entry was floored before rescaling.
    pub floored: bool,
}

impl Record {
    pub fn new(id: impl Into<String>, demo: Demographics, params: &StandardizationParams) -> Self {
        Record {
            id: id.into(),
            features: params.features(&demo),
            demo,
            observed: None,
            renormalized: false,
            floored: false,
        }
    }

    pub fn with_observed(mut self, observed: Allocation) -> Self {
        self.observed = Some(observed);
        self
    }

    pub fn observed(&self) -> Result<&Allocation> {
        self.observed
            .as_ref()
            .ok_or_else(|| Error::InsufficientData(format!("record {} has no observed allocation", self.id)))
    }
}

/// Recomputes every record's features from the given moments.
pub fn restandardize(records: &mut [Record], params: &StandardizationParams) {
    for r in records {
        r.features = params.features(&r.demo);
    }
}

/// Floors zero entries to one minute and rescales so the entries sum to
/// `total`. Returns `(allocation, renormalized, floored)`.
pub fn repair_minutes(minutes: [f64; 4], total: f64) -> Result<(Allocation, bool, bool)> {
    if minutes.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidAllocation(format!(
            "minutes must be finite and non-negative: {minutes:?}"
        )));
    }
    let sum: f64 = minutes.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidAllocation("all minutes are zero".into()));
    }
    let mut renormalized = false;
    let mut m = minutes;
    if sum != total {
        m = m.map(|v| v * total / sum);
        renormalized = true;
    }
    let floored = m.iter().any(|v| *v <= 0.0);
    if floored {
        m = m.map(|v| if v <= 0.0 { 1.0 } else { v });
        let s: f64 = m.iter().sum();
        m = m.map(|v| v * total / s);
    }
    let alloc = match Allocation::new(m, total) {
        Ok(a) => a,
        Err(_) => {
            // Last-ulp drift from the rescale; absorb it in the largest entry.
            let s: f64 = m.iter().sum();
            let (jmax, _) = m
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (j, v)| if *v > acc.1 { (j, *v) } else { acc });
            m[jmax] += total - s;
            Allocation::new(m, total)?
        }
    };
    Ok((alloc, renormalized, floored))
}

const RAW_COLUMNS: [&str; 7] = ["record_id", "age", "sex", "race", "edu", "earnweek", "spousepres"];
const MINUTE_COLUMNS: [&str; 4] = [
    "minutes_leisure",
    "minutes_work",
    "minutes_sleep_personal",
    "minutes_other",
];
const FLAG_COLUMNS: [&str; 2] = ["renormalized", "floored"];

pub fn records_csv_header() -> Vec<&'static str> {
    let mut h: Vec<&'static str> = RAW_COLUMNS.to_vec();
    h.extend(Feature::ALL.iter().map(|f| f.name()));
    h.extend(MINUTE_COLUMNS);
    h.extend(FLAG_COLUMNS);
    h
}

/// Formats a float so that parsing it back yields the identical value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_records_csv<W: Write>(writer: W, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(records_csv_header())?;
    for r in records {
        let mut row: Vec<String> = vec![
            r.id.clone(),
            fmt_f64(r.demo.age),
            (if r.demo.male { 1 } else { 2 }).to_string(),
            r.demo.race.code().to_string(),
            r.demo.edu.level().to_string(),
            fmt_f64(r.demo.earnweek),
            r.demo.spouse.code().to_string(),
        ];
        row.extend(r.features.as_array().iter().map(|v| fmt_f64(*v)));
        match &r.observed {
            Some(a) => row.extend(a.minutes().iter().map(|v| fmt_f64(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.push(u8::from(r.renormalized).to_string());
        row.push(u8::from(r.floored).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R, total: f64) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected = records_csv_header();
    if header != expected {
        let diff: Vec<String> = expected
            .iter()
            .filter(|c| !header.iter().any(|h| h == *c))
            .map(|c| c.to_string())
            .collect();
        return Err(Error::SchemaMismatch(format!(
            "records CSV header differs from the canonical layout; missing: [{}]",
            diff.join(", ")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let ctx = |what: &str| Error::SchemaMismatch(format!("row {}: bad {what}", line + 1));
        let num = |i: usize, what: &str| -> Result<f64> { row[i].trim().parse::<f64>().map_err(|_| ctx(what)) };
        let code = |i: usize, what: &str| -> Result<u32> { row[i].trim().parse::<u32>().map_err(|_| ctx(what)) };
        let demo = Demographics {
            age: num(1, "age")?,
            male: match code(2, "sex")? {
                1 => true,
                2 => false,
                _ => return Err(ctx("sex")),
            },
            race: Race::from_code(code(3, "race")?).ok_or_else(|| ctx("race"))?,
            edu: EduLevel::from_level(code(4, "edu")?).ok_or_else(|| ctx("edu"))?,
            earnweek: num(5, "earnweek")?,
            spouse: SpouseStatus::from_code(code(6, "spousepres")?).ok_or_else(|| ctx("spousepres"))?,
        };
        let mut fv = [0.0; FEATURE_DIM];
        for (k, slot) in fv.iter_mut().enumerate() {
            *slot = num(7 + k, Feature::ALL[k].name())?;
        }
        let features = FeatureVector::new(fv).map_err(|e| e.context(format!("row {}", line + 1)))?;
        let base = 7 + FEATURE_DIM;
        let observed = if row[base].trim().is_empty() {
            None
        } else {
            let mut m = [0.0; 4];
            for (j, slot) in m.iter_mut().enumerate() {
                *slot = num(base + j, MINUTE_COLUMNS[j])?;
            }
            Some(Allocation::new(m, total).map_err(|e| e.context(format!("row {}", line + 1)))?)
        };
        let flag = |i: usize, what: &str| -> Result<bool> {
            match row[i].trim() {
                "0" | "" => Ok(false),
                "1" => Ok(true),
                _ => Err(ctx(what)),
            }
        };
        out.push(Record {
            id: row[0].to_string(),
            demo,
            features,
            observed,
            renormalized: flag(base + 4, "renormalized")?,
            floored: flag(base + 5, "floored")?,
        });
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{file_name}.{}.{n}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_records_csv(&mut buf, records)?;
    write_atomic(path, &buf)
}

pub fn load_records(path: &Path, total: f64) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_csv(file, total).map_err(|e| e.context(format!("reading {}", path.display())))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json(e).context(format!("reading {}", path.display())))
}

/// Observed shares of every record; errors if any record lacks an allocation.
pub fn observed_shares(records: &[Record]) -> Result<Vec<[f64; 4]>> {
    records
        .iter()
        .map(|r| r.observed().map(|a| *a.to_shares().as_array()))
        .collect()
}

/// Mean observed minutes per activity in canonical order.
pub fn mean_minutes(records: &[Record]) -> Result<[f64; 4]> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    let mut acc = [0.0; 4];
    for r in records {
        for a in Activity::ALL {
            acc[a.index()] += r.observed()?.get(a);
        }
    }
    Ok(acc.map(|v| v / records.len() as f64))
}
