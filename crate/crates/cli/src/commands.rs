use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use saod::checkpoint::Checkpoint;
use saod::eval::{evaluate, DecodeConfig};
use saod::experiment::{run_comparison, ExperimentConfig};
use saod::io::{write_atomic, write_json_atomic};
use saod::model::ModelParams;
use saod::prompt::{
    compute_stats, generate_prompts, MockPredictor, Predictor, PromptSet, PromptStats, RemoteClient,
    RemoteConfig,
};
use saod::scene::{generate_corpus_with, AnnotationSet, Corpus, CorpusConfig};
use saod::teacher::{
    pseudo_labels, resolve_prompts, run_training, MetricsRecord, RunOptions, TrainConfig, TrainData,
    TrainScene, TrainState,
};

use crate::manifest::{
    config_hash, InputFile, RunManifest, DIAGNOSTIC_FILE, METRICS_FILE, STATE_FILE, TEACHER_FILE,
};
use crate::{
    CliResult, CompareArgs, EvalArgs, Failure, GenArgs, PromptArgs, ReportFormat, SamplingArg,
    SelmapArgs, SparsifyArgs, TrainArgs,
};

fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn read_toml_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

/// Config of the `gen` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub scenes: usize,
    pub corpus: CorpusConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            scenes: exp.train_scenes,
            corpus: exp.corpus,
        }
    }
}

pub fn gen(a: GenArgs) -> CliResult {
    let mut cfg: GenConfig = read_toml_or_default(a.config.as_deref())?;
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    if cfg.corpus.categories.is_empty() {
        cfg.corpus.categories = saod::experiment::imbalanced_categories();
    }
    let corpus = generate_corpus_with(&cfg.corpus, cfg.scenes, a.seed)?;
    corpus.save(&a.out)?;
    let instances: usize = corpus.scenes.iter().map(|s| s.instances.len()).sum();
    println!(
        "wrote {} scenes, {} instances, {} classes to {}",
        corpus.scenes.len(),
        instances,
        corpus.num_classes(),
        a.out.display()
    );
    Ok(())
}

pub fn sparsify(a: SparsifyArgs) -> CliResult {
    let corpus = Corpus::load(&a.corpus)?;
    let set = match a.sampling {
        SamplingArg::PerScene => AnnotationSet::build(&corpus, a.rate, a.at_least_one_per_class, a.seed)?,
        SamplingArg::Pooled => AnnotationSet::build_pooled(&corpus, a.rate, a.at_least_one_per_class, a.seed)?,
    };
    set.save(&a.out)?;
    let kept: usize = set.scenes.iter().map(|s| s.kept.len()).sum();
    let removed: usize = set.scenes.iter().map(|s| s.removed_count).sum();
    let unlabeled = set.scenes.iter().filter(|s| s.is_unlabeled()).count();
    println!(
        "kept {kept} of {} instances; {unlabeled} of {} scenes unlabeled",
        kept + removed,
        set.scenes.len()
    );
    Ok(())
}

fn print_stats(title: &str, s: &PromptStats) {
    println!(
        "{title:<10} none {:>6}  exact {:>6}  partly {:>6}  errors {:>6}",
        s.none_count, s.exact_count, s.partly_count, s.error_count
    );
}

pub fn prompt(a: PromptArgs, jobs: usize) -> CliResult {
    let corpus = Corpus::load(&a.corpus)?;
    let names = corpus.category_names();
    let predictor: Box<dyn Predictor> = match &a.endpoint {
        Some(url) => {
            let cfg = RemoteConfig::new(url.clone())
                .with_env()
                .map_err(saod::Error::from)?;
            Box::new(RemoteClient::new(cfg).map_err(saod::Error::from)?)
        }
        None => Box::new(MockPredictor::stochastic(names, a.accuracy, a.seed)?),
    };
    let jobs = if jobs == 0 { rayon::current_num_threads() } else { jobs };
    let prompts = generate_prompts(predictor.as_ref(), &corpus, jobs)?;
    prompts.save(&a.out)?;
    print_stats("predicted", &compute_stats(&prompts, &corpus)?);
    if let Some(path) = &a.annotations {
        let ann = AnnotationSet::load(path)?;
        ann.validate_against(&corpus)?;
        print_stats("refined", &compute_stats(&prompts.refine(&ann)?, &corpus)?);
    }
    Ok(())
}

fn write_metrics(path: &Path, log: &[MetricsRecord]) -> CliResult {
    let text: String = log.iter().map(MetricsRecord::to_json_line).collect();
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn train(a: TrainArgs) -> CliResult {
    if a.checkpoint_every == 0 {
        return Err(Failure::validation("--checkpoint-every must be positive"));
    }
    let mut cfg: TrainConfig = read_toml_or_default(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let corpus_in = InputFile::corpus(&a.corpus)?;
    let ann_in = InputFile::hash(&a.annotations)?;
    let prompts_in = a.prompts.as_deref().map(InputFile::hash).transpose()?;
    let eval_in = a.eval_corpus.as_deref().map(InputFile::corpus).transpose()?;

    let dir = &a.out;
    let (mut state, mut log) = if a.resume {
        let m = RunManifest::load(dir)?;
        let hash = config_hash(&cfg, &corpus_in, &ann_in, &prompts_in, &eval_in);
        if hash != m.config_hash {
            return Err(Failure::validation(format!(
                "config or inputs differ from the run in {} (hash {} vs {})",
                dir.display(),
                &hash[..12],
                &m.config_hash[..12]
            )));
        }
        let state = TrainState::from_checkpoint(&Checkpoint::load(&dir.join(STATE_FILE))?)?;
        let mut log = read_metrics(&dir.join(METRICS_FILE))?;
        log.retain(|r| r.iteration <= state.iteration);
        (Some(state), log)
    } else {
        if dir.join(crate::manifest::MANIFEST_FILE).exists() {
            return Err(Failure::validation(format!(
                "{} already holds a run; pass --resume or pick another --out",
                dir.display()
            )));
        }
        RunManifest::new(cfg.clone(), corpus_in, ann_in, prompts_in, eval_in).save(dir)?;
        (None, Vec::new())
    };

    let corpus = Corpus::load(&a.corpus)?;
    let annotations = AnnotationSet::load(&a.annotations)?;
    let prompts = a.prompts.as_deref().map(PromptSet::load).transpose()?;
    let eval = a.eval_corpus.as_deref().map(Corpus::load).transpose()?;
    let data = TrainData {
        corpus: &corpus,
        annotations: &annotations,
        prompts: prompts.as_ref(),
        eval: eval.as_ref(),
    };

    loop {
        let done = state.as_ref().map_or(0, |s| s.iteration);
        if done >= cfg.total_iters && state.is_some() {
            break;
        }
        let stop = (done + a.checkpoint_every).min(cfg.total_iters);
        let run = run_training(
            &data,
            &cfg,
            RunOptions {
                resume: state.take(),
                diagnostic_path: Some(dir.join(DIAGNOSTIC_FILE)),
                stop_at: Some(stop),
            },
        )?;
        log.extend(run.log);
        // a resume trims records past the saved state, so metrics go first
        write_metrics(&dir.join(METRICS_FILE), &log)?;
        run.state.to_checkpoint().save(&dir.join(STATE_FILE))?;
        log::info!("checkpoint at iteration {}", run.state.iteration);
        state = Some(run.state);
    }
    let state = state.expect("at least one chunk ran");
    state.teacher.to_checkpoint().save(&dir.join(TEACHER_FILE))?;
    if let Some(last) = log.last() {
        println!(
            "iteration {}  loss {:.5}  selected {}",
            last.iteration, last.stats.loss, last.stats.selected
        );
    }
    if let Some(ev) = &eval {
        let r = evaluate(&state.teacher, ev, &cfg.decode)?;
        println!("teacher  AP50 {:.4}  AP75 {:.4}  mAP {:.4}", r.ap50, r.ap75, r.map);
    }
    println!("wrote {}", dir.join(TEACHER_FILE).display());
    Ok(())
}

/// Loads a model checkpoint, or the teacher of a training state.
fn load_model(path: &Path) -> CliResult<ModelParams> {
    let ck = Checkpoint::load(path)?;
    match ck.meta("kind") {
        Some("model") => Ok(ModelParams::from_checkpoint(&ck, "params")?),
        Some("train-state") => Ok(ModelParams::from_checkpoint(&ck, "teacher")?),
        other => Err(Failure::validation(format!(
            "{}: unsupported checkpoint kind {other:?}",
            path.display()
        ))),
    }
}

fn check_model_fits(model: &ModelParams, corpus: &Corpus) -> CliResult {
    let shape = model.shape();
    if shape.features != corpus.layout.num_features() || shape.classes != corpus.num_classes() {
        return Err(Failure::validation(format!(
            "checkpoint expects {} features / {} classes, corpus has {} / {}",
            shape.features,
            shape.classes,
            corpus.layout.num_features(),
            corpus.num_classes()
        )));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    check_model_fits(&model, &corpus)?;
    let decode = DecodeConfig {
        score_thr: a.score_thr,
        nms_thr: a.nms_thr,
        ..DecodeConfig::default()
    };
    let report = evaluate(&model, &corpus, &decode)?;
    let text = match a.format {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    };
    match &a.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn compare(a: CompareArgs) -> CliResult {
    let mut cfg: ExperimentConfig = read_toml_or_default(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let report = run_comparison(&cfg, |r| {
        log::info!(
            "{} rate {} seed {}: AP50 {:.4}",
            r.strategy.name(),
            r.label_rate,
            r.seed,
            r.ap50
        );
    })?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
        write_atomic(&dir.join("runs.csv"), report.to_csv().as_bytes())?;
        write_json_atomic(&dir.join("report.json"), &report)?;
    }
    Ok(())
}

pub fn selmap(a: SelmapArgs) -> CliResult {
    let cfg: TrainConfig = read_toml_or_default(a.config.as_deref())?;
    cfg.validate()?;
    let model = load_model(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    check_model_fits(&model, &corpus)?;
    let annotations = match &a.annotations {
        Some(p) => AnnotationSet::load(p)?,
        None => AnnotationSet::build(&corpus, 0.0, false, 0)?,
    };
    annotations.validate_against(&corpus)?;
    let prompts = a.prompts.as_deref().map(PromptSet::load).transpose()?;
    let data = TrainData {
        corpus: &corpus,
        annotations: &annotations,
        prompts: prompts.as_ref(),
        eval: None,
    };
    let per_scene = resolve_prompts(&data, &cfg)?;
    for &id in &a.scenes {
        let idx = corpus
            .scenes
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Failure::validation(format!("no scene {id} in the corpus")))?;
        let scene = &corpus.scenes[idx];
        let ts = TrainScene::new(scene, &annotations.scenes[idx], per_scene[idx].clone(), corpus.num_classes())?;
        let (_, sel) = pseudo_labels(&model, &ts, &scene.features, &cfg)?;
        write_atomic(&a.out.join(format!("scene-{id}.txt")), sel.to_text().as_bytes())?;
        write_atomic(
            &a.out.join(format!("scene-{id}.pgm")),
            &sel.to_pgm(scene.height(), scene.width(), a.scale),
        )?;
        println!("scene {id}: {} selected pairs on {} cells", sel.len(), sel.cells().len());
    }
    Ok(())
}
