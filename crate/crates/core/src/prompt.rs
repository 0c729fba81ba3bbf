//! Per-scene category prompts: the instruction sent to a category predictor,
//! reply parsing, refinement with sparse annotations and outcome statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PredictorError, Result};
use crate::io;
use crate::scene::{stream_rng, AnnotationSet, Corpus, Scene, SparseAnnotations};

pub const PROMPT_FORMAT: &str = "saod-prompts/1";
pub const ENV_URL: &str = "SAOD_PREDICTOR_URL";
pub const ENV_TOKEN: &str = "SAOD_PREDICTOR_TOKEN";
pub const ENV_TIMEOUT: &str = "SAOD_PREDICTOR_TIMEOUT";

/// Categories believed present in one scene. An empty set means "none".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPrompt {
    pub scene_id: u64,
    pub classes: BTreeSet<usize>,
}

impl ClassPrompt {
    pub fn new(
        scene_id: u64,
        classes: impl IntoIterator<Item = usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let classes: BTreeSet<usize> = classes.into_iter().collect();
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!(
                "scene {scene_id}: class id {c} out of range (C = {num_classes})"
            )));
        }
        Ok(Self { scene_id, classes })
    }

    pub fn none(scene_id: u64) -> Self {
        Self {
            scene_id,
            classes: BTreeSet::new(),
        }
    }

    pub fn is_none(&self) -> bool {
        self.classes.is_empty()
    }

    /// Sorted class ids, the form the assignment functions take.
    pub fn to_vec(&self) -> Vec<usize> {
        self.classes.iter().copied().collect()
    }
}

pub fn build_instruction(names: &[impl AsRef<str>]) -> Result<String> {
    if names.is_empty() {
        return Err(Error::invalid("instruction needs at least one category name"));
    }
    let list: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    Ok(format!(
        "Choose categories presented in the image: {}, none. \
         Choose one or several classes. Answer in one word or a short phrase.",
        list.join(", ")
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub classes: BTreeSet<usize>,
    pub said_none: bool,
    pub unrecognized: usize,
    /// Set when tokens were dropped or nothing usable was found.
    pub warning: bool,
}

fn normalize(token: &str) -> String {
    let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
    let mut out = String::with_capacity(trimmed.len());
    let mut gap = false;
    for ch in trimmed.chars() {
        if ch.is_whitespace() || ch == '_' || ch == '-' {
            gap = true;
        } else {
            if gap && !out.is_empty() {
                out.push('-');
            }
            gap = false;
            out.extend(ch.to_lowercase());
        }
    }
    out
}

/// Lenient reply parser. Tokens are delimited by commas, semicolons,
/// newlines and the word "and"; matching ignores case and treats spaces,
/// underscores and hyphens alike.
pub fn parse_response(text: &str, names: &[impl AsRef<str>]) -> ParsedResponse {
    let lookup: BTreeMap<String, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (normalize(n.as_ref()), i))
        .collect();
    let mut parsed = ParsedResponse::default();
    for piece in text.split([',', ';', '\n']) {
        let mut words: Vec<&str> = Vec::new();
        let mut tokens = Vec::new();
        for word in piece.split_whitespace() {
            if normalize(word) == "and" {
                tokens.push(words.join(" "));
                words.clear();
            } else {
                words.push(word);
            }
        }
        tokens.push(words.join(" "));
        for tok in tokens {
            let key = normalize(&tok);
            if key.is_empty() {
                continue;
            }
            if key == "none" {
                parsed.said_none = true;
            } else if let Some(&id) = lookup.get(&key) {
                parsed.classes.insert(id);
            } else {
                parsed.unrecognized += 1;
            }
        }
    }
    parsed.warning =
        parsed.unrecognized > 0 || (parsed.classes.is_empty() && !parsed.said_none);
    parsed
}

/// A category predictor: given the instruction and a scene, returns the raw
/// textual answer.
pub trait Predictor: Sync {
    fn answer(&self, instruction: &str, scene: &Scene) -> Result<String, PredictorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// Omit one true class.
    Drop,
    /// Add one absent class.
    Add,
    /// Replace one true class by an absent one.
    Swap,
    /// Answer "none".
    None,
}

#[derive(Debug, Clone)]
pub enum MockPredictor {
    /// Canned replies keyed by scene id.
    Fixed(BTreeMap<u64, String>),
    /// Answers the true class set with probability `accuracy`, otherwise
    /// applies one of the corruptions. Draws depend only on seed and scene id.
    Stochastic {
        names: Vec<String>,
        accuracy: f64,
        corruptions: Vec<Corruption>,
        seed: u64,
    },
}

impl MockPredictor {
    pub fn fixed(replies: BTreeMap<u64, String>) -> Self {
        Self::Fixed(replies)
    }

    pub fn stochastic(names: Vec<String>, accuracy: f64, seed: u64) -> Result<Self> {
        Self::stochastic_with(
            names,
            accuracy,
            vec![Corruption::Drop, Corruption::Add, Corruption::Swap, Corruption::None],
            seed,
        )
    }

    pub fn stochastic_with(
        names: Vec<String>,
        accuracy: f64,
        corruptions: Vec<Corruption>,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!("mock accuracy {accuracy} outside [0, 1]")));
        }
        if names.is_empty() {
            return Err(Error::invalid("mock predictor needs category names"));
        }
        if corruptions.is_empty() && accuracy < 1.0 {
            return Err(Error::invalid("mock predictor needs at least one corruption"));
        }
        Ok(Self::Stochastic {
            names,
            accuracy,
            corruptions,
            seed,
        })
    }
}

const MOCK_STREAM_SALT: u64 = 0x5EED_9F0E_0000_0000;

fn corrupt(
    truth: &BTreeSet<usize>,
    num_classes: usize,
    kind: Corruption,
    rng: &mut impl Rng,
) -> BTreeSet<usize> {
    let absent: Vec<usize> = (0..num_classes).filter(|c| !truth.contains(c)).collect();
    let present: Vec<usize> = truth.iter().copied().collect();
    let mut out = truth.clone();
    match kind {
        Corruption::Drop if !present.is_empty() => {
            out.remove(present.choose(rng).unwrap());
        }
        Corruption::Swap if !present.is_empty() && !absent.is_empty() => {
            out.remove(present.choose(rng).unwrap());
            out.insert(*absent.choose(rng).unwrap());
        }
        Corruption::None if !present.is_empty() => out.clear(),
        _ => {
            if let Some(&c) = absent.choose(rng) {
                out.insert(c);
            }
        }
    }
    out
}

impl Predictor for MockPredictor {
    fn answer(&self, _instruction: &str, scene: &Scene) -> Result<String, PredictorError> {
        match self {
            MockPredictor::Fixed(replies) => replies.get(&scene.id).cloned().ok_or_else(|| {
                PredictorError::Config(format!("no canned reply for scene {}", scene.id))
            }),
            MockPredictor::Stochastic {
                names,
                accuracy,
                corruptions,
                seed,
            } => {
                let mut rng = stream_rng(seed ^ MOCK_STREAM_SALT, scene.id);
                let truth: BTreeSet<usize> = scene.class_set().into_iter().collect();
                let classes = if rng.random::<f64>() < *accuracy {
                    truth
                } else {
                    let kind = *corruptions.choose(&mut rng).unwrap();
                    corrupt(&truth, names.len(), kind, &mut rng)
                };
                Ok(if classes.is_empty() {
                    "none".to_owned()
                } else {
                    let picked: Vec<&str> = classes.iter().map(|&c| names[c].as_str()).collect();
                    picked.join(", ")
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }

    /// Reads the endpoint, token and timeout (seconds) from the environment.
    pub fn from_env() -> Result<Self, PredictorError> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| PredictorError::Config(format!("{ENV_URL} is not set")))?;
        Self::new(url).with_env()
    }

    /// Picks up the token and timeout from the environment, if set.
    pub fn with_env(mut self) -> Result<Self, PredictorError> {
        if let Ok(t) = std::env::var(ENV_TOKEN) {
            if !t.is_empty() {
                self.token = Some(t);
            }
        }
        if let Ok(raw) = std::env::var(ENV_TIMEOUT) {
            let secs: f64 = raw
                .trim()
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite() && *s > 0.0)
                .ok_or_else(|| PredictorError::Config(format!("{ENV_TIMEOUT}={raw:?}")))?;
            self.timeout = Duration::from_secs_f64(secs);
        }
        Ok(self)
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    scene_id: u64,
    instruction: &'a str,
    image: String,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct RemoteReply {
    answer: String,
}

/// JSON-over-HTTP client. Sends `{scene_id, instruction, image, height,
/// width}` and expects `{"answer": "..."}` back.
pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(PredictorError),
    Fatal(PredictorError),
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self, PredictorError> {
        if cfg.url.is_empty() {
            return Err(PredictorError::Config("empty endpoint URL".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn attempt(&self, body: &RemoteRequest<'_>, attempts: u32) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(token) = &self.cfg.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Attempt::Retry(PredictorError::Timeout { attempts }))
            }
            Err(e) => {
                return Err(Attempt::Retry(PredictorError::Transport {
                    attempts,
                    message: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(Attempt::Retry(PredictorError::Http { status }));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(PredictorError::Http { status }));
        }
        match resp.body_mut().read_json::<RemoteReply>() {
            Ok(reply) => Ok(reply.answer),
            Err(ureq::Error::Timeout(_)) => Err(Attempt::Retry(PredictorError::Timeout { attempts })),
            Err(e) => Err(Attempt::Fatal(PredictorError::Malformed(e.to_string()))),
        }
    }
}

impl Predictor for RemoteClient {
    fn answer(&self, instruction: &str, scene: &Scene) -> Result<String, PredictorError> {
        let body = RemoteRequest {
            scene_id: scene.id,
            instruction,
            image: format!("scene-{}", scene.id),
            height: scene.height(),
            width: scene.width(),
        };
        let total = self.cfg.retries + 1;
        let mut last = None;
        for attempt in 1..=total {
            match self.attempt(&body, attempt) {
                Ok(answer) => return Ok(answer),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::warn!("scene {}: attempt {attempt}/{total} failed: {e}", scene.id);
                    last = Some(e);
                    if attempt < total {
                        std::thread::sleep(self.cfg.backoff * attempt);
                    }
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            PredictorError::Timeout { .. } => PredictorError::Timeout { attempts: total },
            PredictorError::Transport { message, .. } => PredictorError::Transport {
                attempts: total,
                message,
            },
            other => other,
        })
    }
}

pub fn query_predictor(
    predictor: &dyn Predictor,
    scene: &Scene,
    names: &[impl AsRef<str>],
) -> Result<ClassPrompt> {
    let instruction = build_instruction(names)?;
    let reply = predictor.answer(&instruction, scene)?;
    let parsed = parse_response(&reply, names);
    if parsed.warning {
        log::warn!(
            "scene {}: reply {reply:?} had {} unrecognized token(s)",
            scene.id,
            parsed.unrecognized
        );
    }
    Ok(ClassPrompt {
        scene_id: scene.id,
        classes: parsed.classes,
    })
}

/// Unions the prediction with the classes of the kept annotations. Scenes
/// with nothing kept are unlabeled and keep the prediction as is.
pub fn refine_prompt(pred: &ClassPrompt, sparse: &SparseAnnotations) -> Result<ClassPrompt> {
    if pred.scene_id != sparse.scene_id {
        return Err(Error::invalid(format!(
            "prompt for scene {} refined with annotations of scene {}",
            pred.scene_id, sparse.scene_id
        )));
    }
    let mut out = pred.clone();
    out.classes.extend(sparse.kept.iter().map(|i| i.class_id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    None,
    Exact,
    Partly,
    Error,
}

pub fn classify_prediction(pred: &BTreeSet<usize>, gt: &BTreeSet<usize>) -> Outcome {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => Outcome::None,
        (true, false) => Outcome::Error,
        _ if pred == gt => Outcome::Exact,
        _ if pred.is_subset(gt) => Outcome::Partly,
        _ => Outcome::Error,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStats {
    pub none_count: usize,
    pub exact_count: usize,
    pub partly_count: usize,
    pub error_count: usize,
}

impl PromptStats {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::None => self.none_count += 1,
            Outcome::Exact => self.exact_count += 1,
            Outcome::Partly => self.partly_count += 1,
            Outcome::Error => self.error_count += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.none_count + self.exact_count + self.partly_count + self.error_count
    }

    /// Share of scenes whose prediction is `None`, `Exact` or `Partly`.
    pub fn correct_fraction(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.none_count + self.exact_count + self.partly_count) as f64 / self.total() as f64
    }
}

pub fn compute_stats(prompts: &PromptSet, corpus: &Corpus) -> Result<PromptStats> {
    let mut stats = PromptStats::default();
    for scene in &corpus.scenes {
        let pred = prompts
            .get(scene.id)
            .ok_or_else(|| Error::invalid(format!("no prediction for scene {}", scene.id)))?;
        let gt: BTreeSet<usize> = scene.class_set().into_iter().collect();
        stats.record(classify_prediction(&pred.classes, &gt));
    }
    Ok(stats)
}

/// Prompts for a whole corpus, keyed by scene id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub names: Vec<String>,
    pub prompts: BTreeMap<u64, ClassPrompt>,
}

#[derive(Serialize, Deserialize)]
struct PromptFile {
    format: String,
    categories: Vec<String>,
    prompts: BTreeMap<u64, Vec<String>>,
}

impl PromptSet {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            prompts: BTreeMap::new(),
        }
    }

    /// Prompts equal to the true class sets of the corpus.
    pub fn ground_truth(corpus: &Corpus) -> Self {
        let mut set = Self::new(corpus.category_names());
        for scene in &corpus.scenes {
            set.insert(ClassPrompt {
                scene_id: scene.id,
                classes: scene.class_set().into_iter().collect(),
            });
        }
        set
    }

    pub fn insert(&mut self, prompt: ClassPrompt) {
        self.prompts.insert(prompt.scene_id, prompt);
    }

    pub fn get(&self, scene_id: u64) -> Option<&ClassPrompt> {
        self.prompts.get(&scene_id)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn refine(&self, annotations: &AnnotationSet) -> Result<Self> {
        let mut out = self.clone();
        for sparse in &annotations.scenes {
            let pred = self.get(sparse.scene_id).ok_or_else(|| {
                Error::invalid(format!("no prediction for scene {}", sparse.scene_id))
            })?;
            out.insert(refine_prompt(pred, sparse)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PromptFile {
            format: PROMPT_FORMAT.to_owned(),
            categories: self.names.clone(),
            prompts: self
                .prompts
                .iter()
                .map(|(&id, p)| (id, p.classes.iter().map(|&c| self.names[c].clone()).collect()))
                .collect(),
        };
        io::write_json_atomic(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PromptFile = io::read_json(path)?;
        if file.format != PROMPT_FORMAT {
            return Err(Error::format(path, format!("unknown format {:?}", file.format)));
        }
        let index: BTreeMap<&str, usize> = file
            .categories
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut set = Self::new(file.categories.clone());
        for (id, names) in &file.prompts {
            let mut classes = BTreeSet::new();
            for n in names {
                let c = index.get(n.as_str()).ok_or_else(|| {
                    Error::format(path, format!("scene {id}: unknown category {n:?}"))
                })?;
                classes.insert(*c);
            }
            set.insert(ClassPrompt {
                scene_id: *id,
                classes,
            });
        }
        Ok(set)
    }
}

/// Queries the predictor for every scene with at most `jobs` requests in
/// flight. A failing scene aborts the run and outstanding queries are skipped.
pub fn generate_prompts(predictor: &dyn Predictor, corpus: &Corpus, jobs: usize) -> Result<PromptSet> {
    let names = corpus.category_names();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let prompts: Vec<ClassPrompt> = pool.install(|| {
        corpus
            .scenes
            .par_iter()
            .map(|scene| query_predictor(predictor, scene, &names))
            .collect::<Result<_>>()
    })?;
    let mut set = PromptSet::new(names);
    for p in prompts {
        set.insert(p);
    }
    Ok(set)
}
