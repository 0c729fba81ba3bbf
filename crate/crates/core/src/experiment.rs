//! Comparison harness: trains every strategy on the same seeded corpora and
//! label rates and scores the final models on a held-out corpus.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::assign::ClaConfig;
use crate::eval::evaluate;
use crate::model::SgdConfig;
use crate::prompt::{generate_prompts, MockPredictor, PromptSet};
use crate::scene::{generate_corpus_with, AnnotationSet, CategorySpec, Corpus, CorpusConfig};
use crate::teacher::{run_training, Assignment, EvalSnapshot, PromptMode, RunOptions, TrainConfig, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SupervisedOnly,
    GlobalTopk,
    ClaNoPrompt,
    ClaPredictor,
    ClaGtPrompt,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::SupervisedOnly,
        Strategy::GlobalTopk,
        Strategy::ClaNoPrompt,
        Strategy::ClaPredictor,
        Strategy::ClaGtPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SupervisedOnly => "supervised-only",
            Strategy::GlobalTopk => "global-topk",
            Strategy::ClaNoPrompt => "cla-no-prompt",
            Strategy::ClaPredictor => "cla-predictor",
            Strategy::ClaGtPrompt => "cla-gt-prompt",
        }
    }

    /// The training configuration this strategy runs with.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Strategy::SupervisedOnly => cfg.burn_in_iters = cfg.total_iters,
            Strategy::GlobalTopk => {
                cfg.assignment = Assignment::GlobalTopk;
                cfg.prompt_mode = PromptMode::NoPrompt;
            }
            Strategy::ClaNoPrompt => {
                cfg.assignment = Assignment::Cla;
                cfg.prompt_mode = PromptMode::NoPrompt;
            }
            Strategy::ClaPredictor => {
                cfg.assignment = Assignment::Cla;
                cfg.prompt_mode = PromptMode::Predictor;
            }
            Strategy::ClaGtPrompt => {
                cfg.assignment = Assignment::Cla;
                cfg.prompt_mode = PromptMode::GtPrompt;
            }
        }
        cfg
    }
}

/// Five classes with a 9:1 frequency ratio between the most and least common.
pub fn imbalanced_categories() -> Vec<CategorySpec> {
    [
        ("plane", 9.0),
        ("ship", 4.0),
        ("storage-tank", 2.5),
        ("small-vehicle", 1.5),
        ("harbor", 1.0),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (n, w))| CategorySpec::new(i, n, w))
    .collect()
}

/// How annotations are thinned out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Per scene and class (`sparsify`).
    PerScene,
    /// Per class over the whole corpus (`AnnotationSet::build_pooled`).
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub label_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    /// Per-scene accuracy of the mock category predictor.
    pub mock_accuracy: f64,
    pub at_least_one_per_class: bool,
    pub sampling: Sampling,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut corpus = CorpusConfig::new(imbalanced_categories(), 8.0);
        corpus.clutter_density = 4.0;
        corpus.clutter_affinity = vec![0.0, 0.5, 1.0, 2.0, 3.0];
        Self {
            corpus,
            train_scenes: 200,
            eval_scenes: 100,
            label_rates: vec![0.05, 0.10],
            seeds: vec![0, 1, 2],
            strategies: Strategy::ALL.to_vec(),
            mock_accuracy: 0.9,
            at_least_one_per_class: false,
            sampling: Sampling::Pooled,
            train: TrainConfig {
                total_iters: 3_000,
                burn_in_iters: 1_000,
                ema_momentum: 0.995,
                log_interval: 100,
                eval_interval: 0,
                sgd: SgdConfig {
                    lr: 0.01,
                    ..SgdConfig::default()
                },
                cla: ClaConfig {
                    thr: 0.2,
                    ..ClaConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::invalid("train_scenes and eval_scenes must be positive"));
        }
        if self.label_rates.is_empty() || self.seeds.is_empty() || self.strategies.is_empty() {
            return Err(Error::invalid("need at least one label rate, seed and strategy"));
        }
        if !(0.0..=1.0).contains(&self.mock_accuracy) {
            return Err(Error::invalid("mock_accuracy outside [0, 1]"));
        }
        self.train.validate()
    }
}

const EVAL_SALT: u64 = 0xE7A1_0000_0000_0000;

/// Corpora, annotations and prompts shared by every strategy for one seed
/// and label rate.
pub struct Workload {
    pub train: Corpus,
    pub eval: Corpus,
    pub annotations: AnnotationSet,
    pub prompts: PromptSet,
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig, rate: f64, seed: u64) -> Result<Self> {
        let train = generate_corpus_with(&cfg.corpus, cfg.train_scenes, seed)?;
        let eval = generate_corpus_with(&cfg.corpus, cfg.eval_scenes, seed ^ EVAL_SALT)?;
        let annotations = match cfg.sampling {
            Sampling::PerScene => AnnotationSet::build(&train, rate, cfg.at_least_one_per_class, seed)?,
            Sampling::Pooled => AnnotationSet::build_pooled(&train, rate, cfg.at_least_one_per_class, seed)?,
        };
        let mock = MockPredictor::stochastic(train.category_names(), cfg.mock_accuracy, seed)?;
        let prompts = generate_prompts(&mock, &train, 1)?;
        Ok(Self {
            train,
            eval,
            annotations,
            prompts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub label_rate: f64,
    pub seed: u64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub snapshots: Vec<EvalSnapshot>,
    pub checksum: String,
}

pub fn run_one(
    work: &Workload,
    strategy: Strategy,
    base: &TrainConfig,
    rate: f64,
    seed: u64,
) -> Result<RunResult> {
    let mut cfg = strategy.apply(base);
    cfg.seed = seed;
    let data = TrainData {
        corpus: &work.train,
        annotations: &work.annotations,
        prompts: Some(&work.prompts),
        eval: Some(&work.eval),
    };
    let run = run_training(&data, &cfg, RunOptions::default())?;
    let report = evaluate(run.teacher(), &work.eval, &cfg.decode)?;
    Ok(RunResult {
        strategy,
        label_rate: rate,
        seed,
        ap50: report.ap50,
        ap75: report.ap75,
        map: report.map,
        snapshots: run.log.iter().filter_map(|r| r.eval).collect(),
        checksum: run.teacher().checksum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub label_rate: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
    pub mean_map: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: Strategy, rate: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.strategy == strategy && r.label_rate == rate)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>6} {:>7} {:>7} {:>7} {:>5}", "strategy", "rate", "AP50", "AP75", "mAP", "runs");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:<18} {:>5.1}% {:>7.2} {:>7.2} {:>7.2} {:>5}",
                r.strategy.name(),
                100.0 * r.label_rate,
                100.0 * r.mean_ap50,
                100.0 * r.mean_ap75,
                100.0 * r.mean_map,
                r.runs
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,label_rate,seed,ap50,ap75,map\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.strategy.name(),
                r.label_rate,
                r.seed,
                r.ap50,
                r.ap75,
                r.map
            );
        }
        s
    }
}

fn summarize(runs: &[RunResult], cfg: &ExperimentConfig) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &rate in &cfg.label_rates {
        for &strategy in &cfg.strategies {
            let sel: Vec<&RunResult> = runs
                .iter()
                .filter(|r| r.strategy == strategy && r.label_rate == rate)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            out.push(SummaryRow {
                strategy,
                label_rate: rate,
                mean_ap50: sel.iter().map(|r| r.ap50).sum::<f64>() / n,
                mean_ap75: sel.iter().map(|r| r.ap75).sum::<f64>() / n,
                mean_map: sel.iter().map(|r| r.map).sum::<f64>() / n,
                runs: sel.len(),
            });
        }
    }
    out
}

/// Runs every (label rate, seed, strategy) combination. `on_run` sees each
/// result as soon as it is available.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    mut on_run: impl FnMut(&RunResult),
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &rate in &cfg.label_rates {
        for &seed in &cfg.seeds {
            let work = Workload::build(cfg, rate, seed)?;
            for &strategy in &cfg.strategies {
                let r = run_one(&work, strategy, &cfg.train, rate, seed)?;
                on_run(&r);
                runs.push(r);
            }
        }
    }
    let summary = summarize(&runs, cfg);
    Ok(ComparisonReport { runs, summary })
}
