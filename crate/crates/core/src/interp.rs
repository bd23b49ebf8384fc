//! Auto-interpretation: activating contexts, LLM descriptions and category
//! labels.
//!
//! All LLM traffic goes through [`Endpoint`]. [`HttpEndpoint`] talks to a
//! chat-completions style server; [`MockEndpoint`] answers from the prompt
//! text alone so the pipeline runs offline. Every call is recorded in an
//! [`Archive`].

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{AmpClass, LatentAttribution, NormClass};
use crate::crosscoder::{infer_code, CrossCoder, InferenceMode};
use crate::store::{sequential_batches, ActivationShard, TokenText};
use crate::{Error, Real, Result};

pub const DEFAULT_TOKEN_ENV: &str = "CROSSDIFF_LLM_TOKEN";

/// A completion service. Implementations must be deterministic for the
/// archive to be reproducible.
pub trait Endpoint {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn name(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4o".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 60,
            max_retries: 2,
        }
    }
}

pub struct HttpEndpoint {
    cfg: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        if cfg.timeout_secs == 0 {
            return Err(Error::Param("endpoint timeout must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(HttpEndpoint { cfg, agent })
    }

    fn once(&self, prompt: &str) -> std::result::Result<String, String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = self.agent.post(&url);
        if let Ok(token) = std::env::var(&self.cfg.token_env) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }
}

impl Endpoint for HttpEndpoint {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.once(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    warn!("endpoint attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt < self.cfg.max_retries {
                        std::thread::sleep(Duration::from_millis(250 << attempt));
                    }
                }
            }
        }
        Err(Error::Endpoint(format!(
            "{} unreachable after {} attempts: {last}",
            self.cfg.base_url,
            self.cfg.max_retries + 1
        )))
    }

    fn name(&self) -> String {
        format!("http:{}", self.cfg.model)
    }
}

/// Offline stand-in that reads the rendered prompt:
///
/// - description prompts echo the center token of the first context;
/// - category prompts apply a keyword table, else the description's first word;
/// - match prompts answer yes when description and probe share a keyword;
/// - task prompts pick categories through a task keyword table.
#[derive(Debug, Clone, Default)]
pub struct MockEndpoint;

const CATEGORY_KEYWORDS: [(&str, &str); 8] = [
    ("bomb", "explosives"),
    ("explosive", "explosives"),
    ("divine", "religion"),
    ("biblical", "religion"),
    ("religious", "religion"),
    ("worship", "religion"),
    ("virus", "virology"),
    ("pathogen", "virology"),
];

const TASK_KEYWORDS: [(&str, &[&str]); 6] = [
    ("bio", &["biology", "medicine"]),
    ("chem", &["chemistry"]),
    ("cyber", &["computing", "security"]),
    ("hazard", &["biology", "chemistry", "physics"]),
    ("weapon", &["biology", "chemistry", "physics"]),
    ("code", &["computing"]),
];

const STOPWORDS: [&str; 14] = [
    "the", "and", "for", "that", "this", "with", "text", "often", "appears", "about", "from", "token", "into",
    "are",
];

fn after_last<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.rfind(marker).map(|i| &text[i + marker.len()..])
}

fn first_line(text: &str) -> &str {
    text.lines().next().unwrap_or("").trim()
}

fn keywords(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.len() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

impl Endpoint for MockEndpoint {
    fn complete(&self, prompt: &str) -> Result<String> {
        if let Some(rest) = after_last(prompt, "\nContexts:\n") {
            let start = rest.find("<<").map(|i| i + 2);
            let center = start.and_then(|s| rest[s..].find(">>").map(|e| &rest[s..s + e]));
            return Ok(center.unwrap_or("").to_string());
        }
        if let (Some(task), Some(cats)) = (after_last(prompt, "\nTask: "), after_last(prompt, "\nCategories: ")) {
            let task = first_line(task).to_lowercase();
            let universe: Vec<&str> = first_line(cats).split(", ").collect();
            let mut picked: Vec<&str> = universe
                .iter()
                .copied()
                .filter(|c| {
                    TASK_KEYWORDS
                        .iter()
                        .any(|(k, cs)| task.contains(k) && cs.contains(c))
                })
                .collect();
            picked.sort_unstable();
            return Ok(serde_json::to_string(&picked).expect("list serializes"));
        }
        if let Some(probe) = after_last(prompt, "\nProbe: ") {
            let desc = after_last(prompt, "\nDescription: ").map(first_line).unwrap_or("");
            let dk = keywords(desc);
            let hit = keywords(first_line(probe)).iter().any(|w| dk.contains(w));
            return Ok(if hit { "yes" } else { "no" }.to_string());
        }
        if let Some(desc) = after_last(prompt, "\nDescription: ") {
            let desc = first_line(desc).to_lowercase();
            if let Some((_, label)) = CATEGORY_KEYWORDS.iter().find(|(k, _)| desc.contains(k)) {
                return Ok(label.to_string());
            }
            return Ok(keywords(&desc).into_iter().next().unwrap_or_default());
        }
        Ok(String::new())
    }

    fn name(&self) -> String {
        "mock".into()
    }
}

/// Prompt templates with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub describe: String,
    pub category: String,
    pub matching: String,
    pub naive: String,
    pub version: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            describe: include_str!("../templates/describe_v1.txt").into(),
            category: include_str!("../templates/category_v1.txt").into(),
            matching: include_str!("../templates/match_v1.txt").into(),
            naive: include_str!("../templates/naive_v1.txt").into(),
            version: "v1".into(),
        }
    }
}

impl Templates {
    /// Reads `describe_<v>.txt`, `category_<v>.txt`, `match_<v>.txt` and
    /// `naive_<v>.txt` from `dir`.
    pub fn from_dir(dir: &Path, version: &str) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(format!("{name}_{version}.txt"));
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        Ok(Templates {
            describe: read("describe")?,
            category: read("category")?,
            matching: read("match")?,
            naive: read("naive")?,
            version: version.into(),
        })
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub kind: String,
    pub endpoint: String,
    pub template_version: String,
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
    /// sha256 over kind, request and response.
    pub hash: String,
}

/// Append-only call log, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct Archive {
    path: Option<PathBuf>,
    pub records: Vec<ArchiveRecord>,
}

impl Archive {
    pub fn in_memory() -> Self {
        Archive::default()
    }

    pub fn to_file(path: &Path) -> Self {
        Archive {
            path: Some(path.to_path_buf()),
            records: Vec::new(),
        }
    }

    fn append(&mut self, record: ArchiveRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Sends `prompt` and archives the exchange, successful or not.
    pub fn call(&mut self, endpoint: &dyn Endpoint, kind: &str, version: &str, prompt: String) -> Result<String> {
        let result = endpoint.complete(&prompt);
        let (response, error) = match &result {
            Ok(text) => (Some(text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        h.update([0]);
        h.update(response.as_deref().unwrap_or("").as_bytes());
        self.append(ArchiveRecord {
            kind: kind.into(),
            endpoint: endpoint.name(),
            template_version: version.into(),
            request: prompt,
            response,
            error,
            hash: hex::encode(h.finalize()),
        })?;
        result
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivatingContext {
    pub latent_id: usize,
    pub activation: f64,
    /// Row of the center token.
    pub offset: u64,
    pub sequence_id: u32,
    /// Inclusive row range of the window.
    pub start: u64,
    pub end: u64,
    /// Window tokens joined by spaces, center wrapped as `<<token>>`.
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub top_k: usize,
    pub window: usize,
    pub one_per_sequence: bool,
    pub batch_size: usize,
    pub inference: InferenceMode,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            top_k: 20,
            window: 32,
            one_per_sequence: true,
            batch_size: 4096,
            inference: InferenceMode::Threshold,
        }
    }
}

fn window_text(tokens: &[TokenText], center: usize, w: usize) -> (u64, u64, String) {
    let seq = tokens[center].sequence_id;
    let mut start = center;
    while start > 0 && center - start < w && tokens[start - 1].sequence_id == seq {
        start -= 1;
    }
    let mut end = center;
    while end + 1 < tokens.len() && end - center < w && tokens[end + 1].sequence_id == seq {
        end += 1;
    }
    let text = (start..=end)
        .map(|i| {
            if i == center {
                format!("<<{}>>", tokens[i].text)
            } else {
                tokens[i].text.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    (start as u64, end as u64, text)
}

/// Top activating contexts for each requested latent, highest first, ties
/// to the lower row.
pub fn collect_contexts<T: Real>(
    model: &CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    latents: &[usize],
    cfg: &ContextConfig,
) -> Result<BTreeMap<usize, Vec<ActivatingContext>>> {
    if cfg.top_k == 0 {
        return Err(Error::Param("top_k contexts must be at least 1".into()));
    }
    let tokens = base
        .token_texts()
        .or_else(|| ft.token_texts())
        .ok_or_else(|| Error::Precondition("shard carries no token texts".into()))?;
    if let Some(&j) = latents.iter().find(|&&j| j >= model.m()) {
        return Err(Error::Param(format!("latent {j} out of range (m={})", model.m())));
    }
    let mut slot = vec![usize::MAX; model.m()];
    for (i, &j) in latents.iter().enumerate() {
        slot[j] = i;
    }
    // candidates per latent: (activation, row); keyed by sequence when deduplicating
    let mut per_seq: Vec<BTreeMap<u32, (f64, u64)>> = vec![BTreeMap::new(); latents.len()];
    let mut all: Vec<Vec<(f64, u64)>> = vec![Vec::new(); latents.len()];
    let better = |a: (f64, u64), b: (f64, u64)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
    let mut row0 = 0u64;
    for raw in sequential_batches(base, ft, cfg.batch_size)? {
        let batch = model.normalize(&raw);
        let code = infer_code(model, &batch, cfg.inference)?;
        for (i, j, z) in code.entries() {
            let s = slot[j];
            let z = z.to_f64_lossy();
            if s == usize::MAX || z <= 0.0 {
                continue;
            }
            let cand = (z, row0 + i as u64);
            if cfg.one_per_sequence {
                let seq = tokens[cand.1 as usize].sequence_id;
                let e = per_seq[s].entry(seq).or_insert(cand);
                if better(cand, *e) {
                    *e = cand;
                }
            } else {
                all[s].push(cand);
            }
        }
        row0 += batch.len() as u64;
    }
    let mut out = BTreeMap::new();
    for (s, &j) in latents.iter().enumerate() {
        let mut cands: Vec<(f64, u64)> = if cfg.one_per_sequence {
            per_seq[s].values().copied().collect()
        } else {
            std::mem::take(&mut all[s])
        };
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.top_k);
        let contexts = cands
            .into_iter()
            .map(|(activation, row)| {
                let (start, end, text) = window_text(tokens, row as usize, cfg.window);
                ActivatingContext {
                    latent_id: j,
                    activation,
                    offset: row,
                    sequence_id: tokens[row as usize].sequence_id,
                    start,
                    end,
                    text,
                }
            })
            .collect();
        out.insert(j, contexts);
    }
    Ok(out)
}

/// One-to-three sentence description of a feature from its contexts.
pub fn describe_feature(
    endpoint: &dyn Endpoint,
    archive: &mut Archive,
    templates: &Templates,
    contexts: &[ActivatingContext],
) -> Result<String> {
    if contexts.is_empty() {
        return Err(Error::Precondition("no activating contexts to describe".into()));
    }
    let listing = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = render(&templates.describe, &[("contexts", &listing)]);
    let text = archive.call(endpoint, "describe", &templates.version, prompt)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Generation("empty description".into()));
    }
    Ok(text.to_string())
}

/// Lowercase, punctuation stripped, at most two words.
pub fn canonical_label(raw: &str) -> String {
    raw.split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .take(2)
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Short semantic label for a description, with no fixed taxonomy.
pub fn map_category(
    endpoint: &dyn Endpoint,
    archive: &mut Archive,
    templates: &Templates,
    description: &str,
) -> Result<String> {
    if description.trim().is_empty() {
        return Err(Error::Precondition("empty description".into()));
    }
    let prompt = render(&templates.category, &[("description", description.trim())]);
    let raw = archive.call(endpoint, "category", &templates.version, prompt)?;
    let label = canonical_label(first_line(&raw));
    if label.is_empty() {
        return Err(Error::Generation("empty category label".into()));
    }
    Ok(label)
}

/// Yes/no relevance of a description to each probe text.
pub fn match_semantics(
    endpoint: &dyn Endpoint,
    archive: &mut Archive,
    templates: &Templates,
    description: &str,
    probes: &[&str],
) -> Result<Vec<bool>> {
    if probes.is_empty() {
        return Err(Error::Precondition("no probe texts".into()));
    }
    probes
        .iter()
        .map(|probe| {
            let prompt = render(&templates.matching, &[("description", description.trim()), ("probe", probe)]);
            let raw = archive.call(endpoint, "match", &templates.version, prompt)?;
            match raw.trim().to_lowercase().trim_end_matches('.') {
                "yes" => Ok(true),
                "no" => Ok(false),
                _ => Err(Error::Completion {
                    reason: "expected yes or no".into(),
                    raw,
                }),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub latent_id: usize,
    pub contexts: Vec<ActivatingContext>,
    /// Empty when generation failed.
    pub description: String,
    pub category: Option<String>,
    pub norm_class: NormClass,
    pub amp_class: AmpClass,
    pub error: Option<String>,
}

/// Describes and labels every latent in `contexts`. Stops at the first
/// endpoint failure and returns what was finished together with the error.
pub fn build_dossiers(
    endpoint: &dyn Endpoint,
    archive: &mut Archive,
    templates: &Templates,
    contexts: &BTreeMap<usize, Vec<ActivatingContext>>,
    table: &[LatentAttribution],
) -> (Vec<FeatureDossier>, Option<Error>) {
    let mut out = Vec::with_capacity(contexts.len());
    for (&j, ctx) in contexts {
        let Some(row) = table.get(j).filter(|r| r.latent_id == j) else {
            return (out, Some(Error::Param(format!("latent {j} missing from the attribution table"))));
        };
        let mut dossier = FeatureDossier {
            latent_id: j,
            contexts: ctx.clone(),
            description: String::new(),
            category: None,
            norm_class: row.norm_class,
            amp_class: row.amp_class,
            error: None,
        };
        let step = describe_feature(endpoint, archive, templates, ctx)
            .and_then(|desc| {
                dossier.description = desc;
                map_category(endpoint, archive, templates, &dossier.description)
            })
            .map(|cat| dossier.category = Some(cat));
        match step {
            Ok(()) => {}
            Err(e @ Error::Endpoint(_)) => {
                dossier.error = Some(e.to_string());
                out.push(dossier);
                return (out, Some(e));
            }
            Err(e) => dossier.error = Some(e.to_string()),
        }
        out.push(dossier);
    }
    (out, None)
}

pub fn write_dossiers(dossiers: &[FeatureDossier], path: &Path) -> Result<()> {
    let mut text = String::new();
    for d in dossiers {
        text.push_str(&serde_json::to_string(d).expect("dossier serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dossiers(path: &Path) -> Result<Vec<FeatureDossier>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
