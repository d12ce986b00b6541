//! Persona prompts, LLM querying with caching, and response parsing.
//!
//! An [`Agent`] turns a [`Query`] into raw response text. [`run_batch`]
//! drives an agent over many records with a content-addressed response
//! cache, a token-bucket rate limit and a bounded worker pool, then parses
//! each response into an [`Allocation`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{predict_shares, Activity, Allocation, ThetaMatrix, DEFAULT_TOTAL_MINUTES};
use crate::record::{repair_minutes, write_atomic, Demographics, EduLevel, Race, Record, SpouseStatus, StandardizationParams};
use crate::rng::{derive_seed_str, rng};
use crate::synth::{dirichlet_shares, NoiseConfig};

pub const SYSTEM_PROMPT: &str = "You are an American making daily time allocation decisions across three activities: \
work, leisure, and other. Your goal is to maximize overall happiness within the 1,440 minutes available each day.";

/// Line that starts the answer-format instruction in every user prompt.
pub const FORMAT_INSTRUCTION: &str =
    "Please answer in the format: [Work, Leisure, Sleep and Personal Care, Other], using numbers to indicate minutes.";

const FORMAT_REMINDER: &str = "Reminder: reply with exactly one bracketed list of four numbers, \
[Work, Leisure, Sleep and Personal Care, Other], giving minutes that add up to 1440.";

pub const GENDER_LABELS: [&str; 2] = ["male", "female"];

pub const EDU_LABELS: [&str; 4] = [
    "no college education",
    "some college without a bachelor's degree",
    "bachelor's degree",
    "advanced degree",
];

pub const SPOUSE_LABELS: [&str; 3] = ["spouse", "unmarried partner", "no spouse or unmarried partner"];

pub fn edu_label(edu: EduLevel) -> &'static str {
    EDU_LABELS[edu.level() as usize - 1]
}

pub fn spouse_label(s: SpouseStatus) -> &'static str {
    match s {
        SpouseStatus::Spouse => SPOUSE_LABELS[0],
        SpouseStatus::Partner => SPOUSE_LABELS[1],
        SpouseStatus::NoPartner => SPOUSE_LABELS[2],
    }
}

/// Prompt-side demographics as text labels. Empty labels or non-finite
/// numbers count as missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub age: f64,
    pub gender: String,
    pub race: String,
    pub education: String,
    pub spouse: String,
    pub income: f64,
}

impl PersonaRecord {
    pub fn from_demographics(d: &Demographics) -> PersonaRecord {
        PersonaRecord {
            age: d.age,
            gender: GENDER_LABELS[usize::from(!d.male)].to_string(),
            race: d.race.label().to_string(),
            education: edu_label(d.edu).to_string(),
            spouse: spouse_label(d.spouse).to_string(),
            income: d.earnweek,
        }
    }

    /// Checks every slot against its vocabulary.
    pub fn validate(&self) -> Result<()> {
        let slot = |name: &str| Err(Error::PromptSlot(name.to_string()));
        if !(self.age.is_finite() && self.age >= 0.0) {
            return slot("age");
        }
        if !GENDER_LABELS.contains(&self.gender.as_str()) {
            return slot("gender");
        }
        if Race::from_label(&self.race).is_none() {
            return slot("race");
        }
        if !EDU_LABELS.contains(&self.education.as_str()) {
            return slot("education");
        }
        if !SPOUSE_LABELS.contains(&self.spouse.as_str()) {
            return slot("spouse");
        }
        if !(self.income.is_finite() && self.income >= 0.0) {
            return slot("income");
        }
        Ok(())
    }

    /// Inverse of [`PersonaRecord::from_demographics`].
    pub fn demographics(&self) -> Result<Demographics> {
        self.validate()?;
        let pos = |list: &[&str], v: &str| list.iter().position(|x| *x == v).expect("validated");
        Ok(Demographics {
            age: self.age,
            male: self.gender == GENDER_LABELS[0],
            race: Race::from_label(&self.race).expect("validated"),
            edu: EduLevel::from_level(pos(&EDU_LABELS, &self.education) as u32 + 1).expect("validated"),
            spouse: SpouseStatus::ALL[pos(&SPOUSE_LABELS, &self.spouse)],
            earnweek: self.income,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    /// SHA-256 over the system and user text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn render_prompt(p: &PersonaRecord) -> Result<Prompt> {
    p.validate()?;
    let user = format!(
        "You are a {}, {} years old, ethnically identified as {}. Your highest level of education is {}, \
and your weekly income is ${:.2}. Based on this background, how would you allocate your time across Work, \
Leisure, Sleep and Personal Care, and Other in a typical day?\n{FORMAT_INSTRUCTION}",
        p.gender, p.age, p.race, p.education, p.income
    );
    Ok(Prompt { system: SYSTEM_PROMPT.to_string(), user })
}

/// A parsed and repaired response.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedAllocation {
    pub allocation: Allocation,
    pub renormalized: bool,
    pub floored: bool,
}

fn tuple_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+))\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).expect("static pattern")
    })
}

/// Extracts the first bracketed `[Work, Leisure, Sleep, Other]` tuple and
/// repairs it to the daily budget.
pub fn parse_allocation(text: &str) -> Result<ParsedAllocation> {
    let caps = tuple_regex()
        .captures(text)
        .ok_or_else(|| Error::Parse("no bracketed list of four numbers".into()))?;
    let v: Vec<f64> = (1..=4).map(|i| caps[i].parse::<f64>().expect("regex guarantees a number")).collect();
    let minutes = [v[1], v[0], v[2], v[3]];
    let (allocation, renormalized, floored) =
        repair_minutes(minutes, DEFAULT_TOTAL_MINUTES).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(ParsedAllocation { allocation, renormalized, floored })
}

/// Integer minutes summing exactly to `total`, by largest remainder
/// (ties go to the lower activity index).
pub fn round_minutes(shares: &[f64; 4], total: u32) -> [u32; 4] {
    let raw = shares.map(|s| s * f64::from(total));
    let mut out = raw.map(|r| r.floor() as u32);
    let assigned: u32 = out.iter().sum();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &j in order.iter().take(total.saturating_sub(assigned) as usize) {
        out[j] += 1;
    }
    out
}

/// Formats canonical (L, W, S, O) minutes in the answer order.
pub fn format_answer(minutes: &[u32; 4]) -> String {
    let m = |a: Activity| minutes[a.index()];
    format!(
        "[{}, {}, {}, {}]",
        m(Activity::Work),
        m(Activity::Leisure),
        m(Activity::SleepPersonal),
        m(Activity::Other)
    )
}

/// One request to an agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub record_id: String,
    pub persona: PersonaRecord,
    pub prompt: Prompt,
}

pub trait Agent: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, query: &Query) -> Result<String>;
}

/// Offline agent answering from a hidden structural model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockAgent {
    pub model: String,
    pub theta: ThetaMatrix,
    /// Used instead of `theta` when the prompt carries retrieved findings.
    pub augmented_theta: Option<ThetaMatrix>,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub standardization: StandardizationParams,
}

pub const AUGMENTATION_MARKER: &str = "Relevant research findings:";

impl MockAgent {
    pub fn new(theta: ThetaMatrix, noise: NoiseConfig, seed: u64, standardization: StandardizationParams) -> MockAgent {
        MockAgent { model: "mock".into(), theta, augmented_theta: None, noise, seed, standardization }
    }
}

impl Agent for MockAgent {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, query: &Query) -> Result<String> {
        let demo = query.persona.demographics()?;
        let x = self.standardization.features(&demo);
        let theta = match &self.augmented_theta {
            Some(t) if query.prompt.user.contains(AUGMENTATION_MARKER) => t,
            _ => &self.theta,
        };
        let mean = *predict_shares(theta, &x).as_array();
        let shares = match self.noise {
            NoiseConfig::None => mean,
            NoiseConfig::Dirichlet { kappa } => {
                dirichlet_shares(&mut rng(derive_seed_str(self.seed, &query.record_id)), &mean, kappa)
            }
        };
        Ok(format_answer(&round_minutes(&shares, DEFAULT_TOTAL_MINUTES as u32)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_base_ms: u64,
    pub concurrency: usize,
    /// Token-bucket refill rate; 0 disables the limit.
    pub requests_per_second: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-2024-08-06".into(),
            temperature: 0.1,
            max_tokens: 1024,
            top_p: 1.0,
            timeout_secs: 120,
            max_retries: 4,
            backoff_base_ms: 1000,
            concurrency: 4,
            requests_per_second: 2.0,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidConfig("temperature must be non-negative".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::InvalidConfig("concurrency must be at least 1".into()));
        }
        if !(self.requests_per_second >= 0.0) {
            return Err(Error::InvalidConfig("requests_per_second must be non-negative".into()));
        }
        Ok(())
    }
}

/// Token bucket shared by all workers of a batch.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rate: f64, burst: usize) -> RateLimiter {
        let capacity = burst.max(1) as f64;
        RateLimiter { rate, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available. A zero rate never blocks.
    pub fn acquire(&self) {
        if self.rate <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut s = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Chat-completions client.
pub struct HttpAgent {
    config: AgentConfig,
    token: Option<String>,
    client: ureq::Agent,
    limiter: RateLimiter,
}

impl HttpAgent {
    pub fn new(config: AgentConfig) -> Result<HttpAgent> {
        config.validate()?;
        let token = std::env::var(&config.api_key_env).ok().filter(|t| !t.is_empty());
        let client = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .http_status_as_error(false)
                .build(),
        );
        let limiter = RateLimiter::new(config.requests_per_second, config.concurrency);
        Ok(HttpAgent { config, token, client, limiter })
    }

    fn request_body(&self, prompt: &Prompt) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "top_p": self.config.top_p,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, (Error, bool)> {
        self.limiter.acquire();
        let mut req = self.client.post(&self.config.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.send_json(body).map_err(|e| (Error::Transport(e.to_string()), true))?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(|e| (Error::Transport(e.to_string()), true))?;
        match status {
            200..=299 => extract_content(&text).map_err(|e| (e, false)),
            429 => Err((Error::RateLimited(format!("HTTP 429 from {}", self.config.endpoint)), true)),
            500..=599 => Err((Error::Transport(format!("HTTP {status} from {}", self.config.endpoint)), true)),
            _ => Err((Error::Transport(format!("HTTP {status}: {}", truncate(&text, 200))), false)),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Reads `choices[0].message.content` from a chat-completions response.
pub fn extract_content(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Transport("response lacks choices[0].message.content".into()))
}

impl Agent for HttpAgent {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, query: &Query) -> Result<String> {
        let body = self.request_body(&query.prompt);
        let mut delay = Duration::from_millis(self.config.backoff_base_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((e, retryable)) => {
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(e.context(format!("record {} after {} attempt(s)", query.record_id, attempt + 1)));
                    }
                    log::warn!("record {}: {e}; retrying in {delay:?}", query.record_id);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// Raw responses stored one file per (model, prompt hash).
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub model: String,
    pub prompt_hash: String,
    pub system: String,
    pub user: String,
    pub response: String,
}

fn sanitize(model: &str) -> String {
    model.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, model: &str, hash: &str) -> PathBuf {
        self.dir.join(sanitize(model)).join(format!("{hash}.json"))
    }

    pub fn get(&self, model: &str, prompt: &Prompt) -> Result<Option<String>> {
        let p = self.path(model, &prompt.hash());
        match fs::read(&p) {
            Ok(bytes) => {
                let c: CachedResponse = serde_json::from_slice(&bytes)?;
                Ok(Some(c.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    }

    pub fn put(&self, model: &str, prompt: &Prompt, response: &str) -> Result<()> {
        let hash = prompt.hash();
        let entry = CachedResponse {
            model: model.to_string(),
            prompt_hash: hash.clone(),
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            response: response.to_string(),
        };
        write_atomic(&self.path(model, &hash), &serde_json::to_vec_pretty(&entry)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    ParseFailed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionResponse {
    pub record_id: String,
    pub model: String,
    pub prompt_hash: String,
    pub raw: String,
    pub status: ResponseStatus,
    pub parsed: Option<ParsedAllocation>,
    pub failure: Option<String>,
    /// Parse retries used (0 or 1).
    pub retries: u32,
    /// Every text came from the cache.
    pub from_cache: bool,
}

pub struct BatchItem {
    pub record: Record,
    pub query: Query,
}

/// Renders the standard prompt for each record.
pub fn prepare_items(records: &[Record]) -> Result<Vec<BatchItem>> {
    records
        .iter()
        .map(|r| {
            let persona = PersonaRecord::from_demographics(&r.demo);
            let prompt = render_prompt(&persona).map_err(|e| e.context(format!("record {}", r.id)))?;
            Ok(BatchItem { record: r.clone(), query: Query { record_id: r.id.clone(), persona, prompt } })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    /// Records with parsed allocations, in input order.
    pub records: Vec<Record>,
    pub responses: Vec<DecisionResponse>,
    pub network_calls: usize,
}

impl BatchOutcome {
    pub fn dropped(&self) -> impl Iterator<Item = &DecisionResponse> {
        self.responses.iter().filter(|r| r.status != ResponseStatus::Ok)
    }

    /// Index CSV: record_id, model, prompt_hash, status, renormalized, floored.
    pub fn index_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["record_id", "model", "prompt_hash", "status", "renormalized", "floored"])?;
        for r in &self.responses {
            let (ren, flo) = r.parsed.as_ref().map(|p| (p.renormalized, p.floored)).unwrap_or((false, false));
            let status = match r.status {
                ResponseStatus::Ok => "ok",
                ResponseStatus::ParseFailed => "parse_failed",
            };
            w.write_record([
                r.record_id.as_str(),
                r.model.as_str(),
                r.prompt_hash.as_str(),
                status,
                &u8::from(ren).to_string(),
                &u8::from(flo).to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
    }
}

fn fetch(agent: &dyn Agent, cache: Option<&ResponseCache>, query: &Query, calls: &AtomicUsize) -> Result<(String, bool)> {
    if let Some(c) = cache {
        if let Some(text) = c.get(agent.model_id(), &query.prompt)? {
            return Ok((text, true));
        }
    }
    calls.fetch_add(1, Ordering::Relaxed);
    let text = agent.complete(query)?;
    if let Some(c) = cache {
        c.put(agent.model_id(), &query.prompt, &text)?;
    }
    Ok((text, false))
}

fn query_one(agent: &dyn Agent, cache: Option<&ResponseCache>, query: &Query, calls: &AtomicUsize) -> Result<DecisionResponse> {
    let (raw, cached) = fetch(agent, cache, query, calls)?;
    let mut resp = DecisionResponse {
        record_id: query.record_id.clone(),
        model: agent.model_id().to_string(),
        prompt_hash: query.prompt.hash(),
        raw,
        status: ResponseStatus::Ok,
        parsed: None,
        failure: None,
        retries: 0,
        from_cache: cached,
    };
    match parse_allocation(&resp.raw) {
        Ok(p) => resp.parsed = Some(p),
        Err(first) => {
            let mut retry = query.clone();
            retry.prompt.user = format!("{}\n\n{FORMAT_REMINDER}", query.prompt.user);
            let (raw, cached) = fetch(agent, cache, &retry, calls)?;
            resp.retries = 1;
            resp.from_cache &= cached;
            resp.raw = raw;
            match parse_allocation(&resp.raw) {
                Ok(p) => resp.parsed = Some(p),
                Err(second) => {
                    log::warn!("record {} dropped: {first}; retry: {second}", query.record_id);
                    resp.status = ResponseStatus::ParseFailed;
                    resp.failure = Some(second.to_string());
                }
            }
        }
    }
    Ok(resp)
}

/// Queries every item, at most `concurrency` at a time. Transport errors
/// abort the batch (responses already cached are kept); parse failures
/// drop the record and are listed in the outcome.
pub fn run_batch(agent: &dyn Agent, cache: Option<&ResponseCache>, items: &[BatchItem], concurrency: usize) -> Result<BatchOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let calls = AtomicUsize::new(0);
    let responses: Vec<DecisionResponse> =
        pool.install(|| items.par_iter().map(|it| query_one(agent, cache, &it.query, &calls)).collect::<Result<_>>())?;
    let records = items
        .iter()
        .zip(&responses)
        .filter_map(|(it, r)| {
            r.parsed.as_ref().map(|p| {
                let mut rec = it.record.clone();
                rec.observed = Some(p.allocation);
                rec.renormalized = p.renormalized;
                rec.floored = p.floored;
                rec
            })
        })
        .collect();
    Ok(BatchOutcome { records, responses, network_calls: calls.into_inner() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Moments;

    fn params() -> StandardizationParams {
        StandardizationParams {
            age: Moments { mean: 45.0, sd: 15.0 },
            edu: Moments { mean: 2.2, sd: 1.0 },
            earnweek: Moments { mean: 1000.0, sd: 600.0 },
        }
    }

    fn persona() -> PersonaRecord {
        PersonaRecord {
            age: 53.0,
            gender: "male".into(),
            race: "Black".into(),
            education: "advanced degree".into(),
            spouse: "spouse".into(),
            income: 1173.0,
        }
    }

    #[test]
    fn prompt_contains_answer_format() {
        let p = render_prompt(&persona()).unwrap();
        assert!(p.user.contains("[Work, Leisure, Sleep and Personal Care, Other]"));
        assert!(p.user.starts_with("You are a male, 53 years old, ethnically identified as Black."));
        assert!(p.user.contains("your weekly income is $1173.00."));
        assert_eq!(p, render_prompt(&persona()).unwrap());
    }

    #[test]
    fn prompt_slot_errors() {
        let mut p = persona();
        p.race = "Martian".into();
        assert!(matches!(render_prompt(&p), Err(Error::PromptSlot(s)) if s == "race"));
        let mut p = persona();
        p.education = String::new();
        assert!(matches!(render_prompt(&p), Err(Error::PromptSlot(s)) if s == "education"));
    }

    #[test]
    fn persona_round_trips_demographics() {
        let d = persona().demographics().unwrap();
        assert_eq!(PersonaRecord::from_demographics(&d), persona());
    }

    #[test]
    fn parse_examples() {
        let p = parse_allocation("[480, 240, 480, 240]").unwrap();
        assert_eq!(p.allocation.minutes(), &[240.0, 480.0, 480.0, 240.0]);
        assert!(!p.renormalized && !p.floored);
        let p = parse_allocation("Sure! [500, 250, 500, 250] is my day.").unwrap();
        assert_eq!(p.allocation.minutes(), &[240.0, 480.0, 480.0, 240.0]);
        assert!(p.renormalized);
        assert!(matches!(parse_allocation("I would work 8 hours"), Err(Error::Parse(_))));
        let p = parse_allocation("[0, 720, 480, 240]").unwrap();
        assert!(p.floored);
        assert!(p.allocation.minutes().iter().all(|m| *m > 0.0));
        assert!(parse_allocation("[1, 2, 3] then [480.5, 240, 479.5, 240]").is_ok());
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(round_minutes(&[0.25; 4], 1440), [360; 4]);
        let r = round_minutes(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 - 1e-9, 1e-9], 1440);
        assert_eq!(r.iter().sum::<u32>(), 1440);
    }

    #[test]
    fn mock_zero_theta_is_uniform() {
        let agent = MockAgent::new(ThetaMatrix::zeros(), NoiseConfig::None, 1, params());
        let q = Query { record_id: "a".into(), persona: persona(), prompt: render_prompt(&persona()).unwrap() };
        assert_eq!(agent.complete(&q).unwrap(), "[360, 360, 360, 360]");
    }

    struct Flaky {
        calls: AtomicUsize,
    }

    impl Agent for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, q: &Query) -> Result<String> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            if q.prompt.user.contains("Reminder:") {
                Ok("[480, 240, 480, 240]".into())
            } else {
                Ok("eight hours of work".into())
            }
        }
    }

    #[test]
    fn parse_failure_retries_once() {
        let demo = persona().demographics().unwrap();
        let rec = Record::new("r1", demo, &params());
        let items = prepare_items(&[rec]).unwrap();
        let agent = Flaky { calls: AtomicUsize::new(0) };
        let out = run_batch(&agent, None, &items, 1).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.responses[0].retries, 1);
        assert_eq!(agent.calls.load(Ordering::Relaxed), 2);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let cfg = AgentConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            max_retries: 0,
            timeout_secs: 5,
            requests_per_second: 0.0,
            ..AgentConfig::default()
        };
        let agent = HttpAgent::new(cfg).unwrap();
        let q = Query { record_id: "x".into(), persona: persona(), prompt: render_prompt(&persona()).unwrap() };
        let err = agent.complete(&q).unwrap_err();
        assert_eq!(err.class(), crate::error::ErrorClass::Transport);
    }

    #[test]
    fn content_extraction() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"[1, 2, 3, 4]"}}]}"#;
        assert_eq!(extract_content(body).unwrap(), "[1, 2, 3, 4]");
        assert!(extract_content("{}").is_err());
    }
}
