//! Retrieval-augmented prompting: knowledge bases, persona embeddings,
//! top-k cosine retrieval and prompt augmentation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    render_prompt, BatchItem, PersonaRecord, Prompt, Query, RateLimiter, AUGMENTATION_MARKER, EDU_LABELS,
    FORMAT_INSTRUCTION, SPOUSE_LABELS,
};
use crate::alignment::attribute_activity_cosine;
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::model::Feature;
use crate::record::{write_atomic, Record};
use crate::rng::fnv1a64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeInstance {
    pub id: String,
    pub topic: String,
    pub text: String,
}

/// Instances with unique ids and nonempty text.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeBase {
    pub instances: Vec<KnowledgeInstance>,
}

impl KnowledgeBase {
    pub fn new(instances: Vec<KnowledgeInstance>) -> Result<KnowledgeBase> {
        let mut seen = BTreeSet::new();
        for inst in &instances {
            if inst.text.trim().is_empty() {
                return Err(Error::SchemaMismatch(format!("knowledge instance `{}` has empty text", inst.id)));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate knowledge instance id `{}`", inst.id)));
            }
        }
        Ok(KnowledgeBase { instances })
    }

    pub fn from_json(bytes: &[u8]) -> Result<KnowledgeBase> {
        let instances: Vec<KnowledgeInstance> = serde_json::from_slice(bytes)?;
        KnowledgeBase::new(instances)
    }

    /// Loads and concatenates one or more topic files.
    pub fn load(paths: &[PathBuf]) -> Result<KnowledgeBase> {
        let mut all = Vec::new();
        for p in paths {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            all.extend(KnowledgeBase::from_json(&bytes).map_err(|e| e.context(format!("reading {}", p.display())))?.instances);
        }
        KnowledgeBase::new(all)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn edu_phrase(label: &str) -> Option<&'static str> {
    let phrases = [
        "no college education",
        "some college education but no bachelor's degree",
        "a bachelor's degree",
        "an advanced degree",
    ];
    EDU_LABELS.iter().position(|l| *l == label).map(|i| phrases[i])
}

fn spouse_phrase(label: &str) -> Option<&'static str> {
    let phrases = ["a spouse", "an unmarried partner", "no spouse or unmarried partner"];
    SPOUSE_LABELS.iter().position(|l| *l == label).map(|i| phrases[i])
}

/// The sentence embedded for each respondent.
pub fn build_persona_sentence(p: &PersonaRecord) -> Result<String> {
    p.validate()?;
    Ok(format!(
        "A {}-year-old {} {} with {}, {}, earning ${:.2} per week.",
        p.age,
        p.gender,
        p.race,
        edu_phrase(&p.education).expect("validated"),
        spouse_phrase(&p.spouse).expect("validated"),
        p.income
    ))
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    /// Unit-norm embeddings, one per text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::ZeroVector(format!("embedding of {what}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Signed feature hashing of lowercased alphanumeric tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { dim: 256 }
    }
}

impl MockEmbedder {
    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::InvalidConfig("cannot embed empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = fnv1a64(tok.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        normalize(v, &format!("`{}`", text.chars().take(40).collect::<String>()))
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> &str {
        "mock-hash"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.par_iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub batch_size: usize,
    pub requests_per_second: f64,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-large".into(),
            timeout_secs: 120,
            batch_size: 64,
            requests_per_second: 2.0,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

/// Embeddings endpoint client: POST `{model, input}` → `data[i].embedding`.
pub struct HttpEmbedder {
    config: EmbedderConfig,
    token: Option<String>,
    client: ureq::Agent,
    limiter: RateLimiter,
}

impl HttpEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<HttpEmbedder> {
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("embedding batch size must be at least 1".into()));
        }
        let token = std::env::var(&config.api_key_env).ok().filter(|t| !t.is_empty());
        let client = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .http_status_as_error(false)
                .build(),
        );
        let limiter = RateLimiter::new(config.requests_per_second, 1);
        Ok(HttpEmbedder { config, token, client, limiter })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.limiter.acquire();
        let body = serde_json::json!({"model": self.config.model, "input": texts});
        let mut req = self.client.post(&self.config.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.send_json(&body).map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(|e| Error::Transport(e.to_string()))?;
        if status == 429 {
            return Err(Error::RateLimited(format!("HTTP 429 from {}", self.config.endpoint)));
        }
        if !(200..300).contains(&status) {
            return Err(Error::Transport(format!("HTTP {status} from {}", self.config.endpoint)));
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
        let data = v
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::Transport("response lacks `data`".into()))?;
        if data.len() != texts.len() {
            return Err(Error::Transport(format!("expected {} embeddings, got {}", texts.len(), data.len())));
        }
        data.iter()
            .zip(texts)
            .map(|(d, t)| {
                let vec: Vec<f64> = d
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| Error::Transport("entry lacks `embedding`".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| Error::Transport("non-numeric embedding".into())))
                    .collect::<Result<_>>()?;
                normalize(vec, &format!("`{}`", t.chars().take(40).collect::<String>()))
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::InvalidConfig("cannot embed empty text".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size) {
            out.extend(self.embed_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Content-addressed embedding store wrapping another embedder.
pub struct CachedEmbedder<'a> {
    inner: &'a dyn Embedder,
    dir: PathBuf,
}

impl<'a> CachedEmbedder<'a> {
    pub fn new(inner: &'a dyn Embedder, dir: impl Into<PathBuf>) -> CachedEmbedder<'a> {
        CachedEmbedder { inner, dir: dir.into() }
    }

    fn path(&self, text: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(self.inner.model_id().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        let model: String =
            self.inner.model_id().chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
        self.dir.join(model).join(format!("{}.json", hex::encode(h.finalize())))
    }
}

impl Embedder for CachedEmbedder<'_> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(texts.len());
        let mut missing = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            let p = self.path(t);
            match fs::read(&p) {
                Ok(bytes) => out.push(Some(serde_json::from_slice(&bytes)?)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    out.push(None);
                    missing.push(i);
                }
                Err(e) => return Err(Error::io(p, e)),
            }
        }
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing.iter().map(|&i| texts[i].clone()).collect::<Vec<_>>())?;
            for (&i, v) in missing.iter().zip(fresh) {
                write_atomic(&self.path(&texts[i]), &serde_json::to_vec(&v)?)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

/// A knowledge base with one embedding per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedKb {
    pub kb: KnowledgeBase,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddedKb {
    pub fn build(kb: KnowledgeBase, embedder: &dyn Embedder) -> Result<EmbeddedKb> {
        if kb.is_empty() {
            return Err(Error::InsufficientData("knowledge base is empty".into()));
        }
        let texts: Vec<String> = kb.instances.iter().map(|i| i.text.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        Ok(EmbeddedKb { kb, vectors })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub hits: Vec<Hit>,
    /// The knowledge base had fewer than `k` instances.
    pub short: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` most similar instances, by descending cosine then ascending id.
pub fn retrieve_top_k(query: &[f64], kb: &EmbeddedKb, k: usize) -> Retrieval {
    let mut hits: Vec<Hit> = kb
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| Hit { index: i, id: kb.kb.instances[i].id.clone(), similarity: cosine(query, v) })
        .collect();
    let k = k.max(1);
    let cmp = |a: &Hit, b: &Hit| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id));
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, cmp);
        hits.truncate(k);
    }
    hits.sort_by(cmp);
    Retrieval { short: kb.vectors.len() < k, hits }
}

/// Inserts a numbered findings block ahead of the answer-format line.
pub fn augment_prompt(prompt: &Prompt, findings: &[&KnowledgeInstance]) -> Prompt {
    if findings.is_empty() {
        return prompt.clone();
    }
    let mut block = format!("{AUGMENTATION_MARKER}\n");
    for (i, f) in findings.iter().enumerate() {
        block.push_str(&format!("{}. {}\n", i + 1, f.text));
    }
    let user = match prompt.user.rfind(FORMAT_INSTRUCTION) {
        Some(pos) => format!("{}{block}{}", &prompt.user[..pos], &prompt.user[pos..]),
        None => format!("{}\n{}", prompt.user, block.trim_end()),
    };
    Prompt { system: prompt.system.clone(), user }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLogRow {
    pub record_id: String,
    pub rank: usize,
    pub instance_id: String,
    pub similarity: f64,
}

/// Builds augmented queries: persona sentence → embedding → top-k → prompt.
pub fn prepare_augmented_items(
    records: &[Record],
    kb: &EmbeddedKb,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<(Vec<BatchItem>, Vec<RetrievalLogRow>)> {
    let personas: Vec<PersonaRecord> = records.iter().map(|r| PersonaRecord::from_demographics(&r.demo)).collect();
    let sentences: Vec<String> = personas.iter().map(build_persona_sentence).collect::<Result<_>>()?;
    let queries = embedder.embed(&sentences)?;
    let mut items = Vec::with_capacity(records.len());
    let mut log = Vec::new();
    for ((rec, persona), q) in records.iter().zip(personas).zip(&queries) {
        let retrieval = retrieve_top_k(q, kb, k);
        let found: Vec<&KnowledgeInstance> = retrieval.hits.iter().map(|h| &kb.kb.instances[h.index]).collect();
        let prompt = augment_prompt(&render_prompt(&persona)?, &found);
        for (rank, h) in retrieval.hits.iter().enumerate() {
            log.push(RetrievalLogRow { record_id: rec.id.clone(), rank: rank + 1, instance_id: h.id.clone(), similarity: h.similarity });
        }
        items.push(BatchItem { record: rec.clone(), query: Query { record_id: rec.id.clone(), persona, prompt } });
    }
    Ok((items, log))
}

pub fn retrieval_log_csv(rows: &[RetrievalLogRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

/// Attribute-activity cosine against the human fit, before and after augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationRow {
    pub feature: Feature,
    pub cosine_before: Option<f64>,
    pub cosine_after: Option<f64>,
    pub change: Option<f64>,
}

pub fn mitigation_table(human: &FitResult, before: &FitResult, after: &FitResult, features: &[Feature]) -> Result<Vec<MitigationRow>> {
    features
        .iter()
        .map(|&f| {
            let cos = |m: &FitResult| match attribute_activity_cosine(human, m, f) {
                Ok(c) => Ok(Some(c)),
                Err(e) if matches!(root(&e), Error::ZeroVector(_)) => Ok(None),
                Err(e) => Err(e),
            };
            let (b, a) = (cos(before)?, cos(after)?);
            Ok(MitigationRow { feature: f, cosine_before: b, cosine_after: a, change: b.zip(a).map(|(b, a)| a - b) })
        })
        .collect()
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Context { source, .. } => root(source),
        other => other,
    }
}

pub fn mitigation_csv(rows: &[MitigationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["feature", "cosine_before", "cosine_after", "change"])?;
    let o = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([r.feature.name().to_string(), o(r.cosine_before), o(r.cosine_after), o(r.change)])?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

/// Writes a knowledge base as JSON.
pub fn save_kb(path: &Path, kb: &KnowledgeBase) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(kb)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn persona(age: f64, gender: &str, race: &str, edu: usize, spouse: usize, income: f64) -> PersonaRecord {
        PersonaRecord {
            age,
            gender: gender.into(),
            race: race.into(),
            education: EDU_LABELS[edu].into(),
            spouse: SPOUSE_LABELS[spouse].into(),
            income,
        }
    }

    #[test]
    fn persona_sentences() {
        assert_eq!(
            build_persona_sentence(&persona(53.0, "male", "Black", 3, 0, 1173.0)).unwrap(),
            "A 53-year-old male Black with an advanced degree, a spouse, earning $1173.00 per week."
        );
        assert_eq!(
            build_persona_sentence(&persona(30.0, "female", "White", 2, 1, 1730.76)).unwrap(),
            "A 30-year-old female White with a bachelor's degree, an unmarried partner, earning $1730.76 per week."
        );
    }

    #[test]
    fn mock_embedding_properties() {
        let e = MockEmbedder::default();
        let a = e.embed_one("Married people work longer hours").unwrap();
        let b = e.embed_one("Married people work longer hours").unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert!(e.embed_one("   ").is_err());
    }

    #[test]
    fn disjoint_vocabulary_is_orthogonal() {
        let e = MockEmbedder::default();
        let (s1, s2) = ("alpha", "omega");
        let b = |t: &str| fnv1a64(t.as_bytes()) % 256;
        assert_ne!(b(s1), b(s2));
        assert_eq!(cosine(&e.embed_one(s1).unwrap(), &e.embed_one(s2).unwrap()), 0.0);
    }

    fn kb(texts: &[&str]) -> KnowledgeBase {
        KnowledgeBase::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| KnowledgeInstance { id: format!("k{i:02}"), topic: "test".into(), text: t.to_string() })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn retrieval_ranks_and_ties() {
        let e = MockEmbedder::default();
        let ekb = EmbeddedKb::build(kb(&["work hours", "sleep duration", "work hours", "leisure time"]), &e).unwrap();
        let r = retrieve_top_k(&e.embed_one("work hours").unwrap(), &ekb, 3);
        assert_eq!(r.hits[0].id, "k00");
        assert_eq!(r.hits[1].id, "k02");
        assert!((r.hits[0].similarity - 1.0).abs() < 1e-12);
        assert!(!r.short);
        let all = retrieve_top_k(&e.embed_one("work hours").unwrap(), &ekb, 10);
        assert!(all.short);
        assert_eq!(all.hits.len(), 4);
    }

    #[test]
    fn kb_validation() {
        let dup = vec![
            KnowledgeInstance { id: "a".into(), topic: "t".into(), text: "x".into() },
            KnowledgeInstance { id: "a".into(), topic: "t".into(), text: "y".into() },
        ];
        assert!(KnowledgeBase::new(dup).is_err());
        assert!(KnowledgeBase::from_json(br#"[{"id":"a","topic":"t","text":""}]"#).is_err());
    }

    #[test]
    fn augmentation_placement() {
        let base = render_prompt(&persona(40.0, "female", "Asian", 1, 2, 500.0)).unwrap();
        assert_eq!(augment_prompt(&base, &[]), base);
        let k = kb(&["First.", "Second.", "Third."]);
        let refs: Vec<&KnowledgeInstance> = k.instances.iter().collect();
        let aug = augment_prompt(&base, &refs);
        assert!(aug.user.contains("\nRelevant research findings:\n1. First.\n2. Second.\n3. Third.\nPlease answer in the format:"));
        assert_eq!(aug.system, base.system);
    }
}
