//! Teacher–student training: supervised burn-in, then mutual learning where
//! an EMA teacher labels dense pseudo-targets for the student.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{
    assign_global_topk, assign_sparse, assign_unlabeled, candidates_from_scores, gt_selection,
    ClaConfig, Provenance, SelectionSet,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeConfig};
use crate::loss::{distill_loss, supervised_loss, AhrConfig, SupervisedTargets};
use crate::model::{backward, forward, joint_confidence, ModelParams, ModelShape, OutputGrads, SgdConfig, sgd_step};
use crate::prompt::PromptSet;
use crate::raster::Raster;
use crate::scene::{gt_pixel_mask, AnnotationSet, Corpus, FeatureLayout, Instance, Scene, SparseAnnotations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    Cla,
    GlobalTopk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    NoPrompt,
    Predictor,
    GtPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    /// Std of the Gaussian noise added to the student view.
    pub noise_std: f64,
    /// Mirror the student view horizontally with probability 1/2.
    pub flip: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub burn_in_iters: usize,
    pub ema_momentum: f64,
    pub unsup_weight: f64,
    pub assignment: Assignment,
    pub prompt_mode: PromptMode,
    pub ahr: AhrConfig,
    pub cla: ClaConfig,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Seed of the batch order; `seed` when absent.
    pub shuffle_seed: Option<u64>,
    pub batch_size: usize,
    pub hidden: Option<usize>,
    pub class_prior: f64,
    pub views: ViewConfig,
    pub log_interval: usize,
    /// Evaluate every this many iterations (0 disables).
    pub eval_interval: usize,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 12_000,
            burn_in_iters: 6_400,
            ema_momentum: 0.999,
            unsup_weight: 1.0,
            assignment: Assignment::Cla,
            prompt_mode: PromptMode::Predictor,
            ahr: AhrConfig::standard_focal(),
            cla: ClaConfig::default(),
            sgd: SgdConfig::default(),
            seed: 0,
            shuffle_seed: None,
            batch_size: 4,
            hidden: None,
            class_prior: 0.01,
            views: ViewConfig::default(),
            log_interval: 100,
            eval_interval: 0,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in_iters > self.total_iters {
            return Err(Error::invalid(format!(
                "burn_in_iters {} exceeds total_iters {}",
                self.burn_in_iters, self.total_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        if !(self.unsup_weight >= 0.0 && self.unsup_weight.is_finite()) {
            return Err(Error::invalid(format!("unsup_weight {} must be >= 0", self.unsup_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(self.views.noise_std >= 0.0 && self.views.noise_std.is_finite()) {
            return Err(Error::invalid("views.noise_std must be >= 0"));
        }
        if !(self.sgd.lr > 0.0 && (0.0..1.0).contains(&self.sgd.momentum) && self.sgd.weight_decay >= 0.0) {
            return Err(Error::invalid("sgd: need lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        self.ahr.validate()?;
        self.cla.validate()?;
        self.decode.validate()
    }

    fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed)
    }
}

/// `teacher ← m·teacher + (1 − m)·student`, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    if teacher.shape() != student.shape() {
        return Err(Error::invalid("EMA: teacher and student shapes differ"));
    }
    if m == 0.0 {
        teacher.as_mut_slice().copy_from_slice(student.as_slice());
        return Ok(());
    }
    let step = 1.0 - m;
    for (t, &s) in teacher.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t += step * (s - *t);
    }
    Ok(())
}

/// Mirrors a raster left to right, negating the listed channels.
pub fn flip_horizontal(r: &Raster, negate: &[usize]) -> Raster {
    let (h, w, c) = r.shape();
    let mut out = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dst = out.cell_mut(y, w - 1 - x);
            dst.copy_from_slice(r.cell(y, x));
            for &k in negate {
                dst[k] = -dst[k];
            }
        }
    }
    out
}

/// Channels whose sign flips under a horizontal mirror: the x offset and the
/// angle cue.
pub fn mirrored_channels(layout: &FeatureLayout) -> Vec<usize> {
    layout
        .geometry_base()
        .map(|g| vec![g, g + 4])
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub teacher: Raster,
    pub student: Raster,
    pub flipped: bool,
}

impl Views {
    /// Maps a cell of the teacher view to the student view; an involution.
    pub fn to_student(&self, y: usize, x: usize) -> (usize, usize) {
        if self.flipped {
            (y, self.teacher.width() - 1 - x)
        } else {
            (y, x)
        }
    }
}

/// Teacher view is the raw raster; the student view adds seeded noise and is
/// mirrored with probability 1/2 when flipping is enabled.
pub fn branch_views(scene: &Scene, layout: &FeatureLayout, cfg: &ViewConfig, seed: u64) -> Views {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene.id);
    let flipped = cfg.flip && rng.random_bool(0.5);
    let mut student = if flipped {
        flip_horizontal(&scene.features, &mirrored_channels(layout))
    } else {
        scene.features.clone()
    };
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for v in student.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    Views {
        teacher: scene.features.clone(),
        student,
        flipped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    BurnIn,
    Mutual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub velocity: Vec<f64>,
    pub iteration: usize,
    pub phase: Phase,
}

impl TrainState {
    pub fn new(shape: ModelShape, cfg: &TrainConfig) -> Result<Self> {
        let student = ModelParams::init(shape, cfg.class_prior, cfg.seed)?;
        Ok(Self {
            teacher: student.clone(),
            velocity: vec![0.0; shape.num_params()],
            student,
            iteration: 0,
            phase: if cfg.burn_in_iters == 0 {
                Phase::Mutual
            } else {
                Phase::BurnIn
            },
        })
    }

    /// The model worth evaluating: the student before the handoff, the
    /// teacher after it.
    pub fn current_model(&self) -> &ModelParams {
        match self.phase {
            Phase::BurnIn => &self.student,
            Phase::Mutual => &self.teacher,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let shape = self.student.shape();
        Checkpoint::new()
            .with_meta("kind", "train-state")
            .with_meta("features", shape.features)
            .with_meta("classes", shape.classes)
            .with_meta("hidden", shape.hidden.unwrap_or(0))
            .with_meta("iteration", self.iteration)
            .with_meta(
                "phase",
                match self.phase {
                    Phase::BurnIn => "burn-in",
                    Phase::Mutual => "mutual",
                },
            )
            .with_tensor("student", self.student.as_slice().to_vec())
            .with_tensor("teacher", self.teacher.as_slice().to_vec())
            .with_tensor("velocity", self.velocity.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("train-state") {
            return Err(Error::invalid("checkpoint is not a training state"));
        }
        let student = ModelParams::from_checkpoint(ck, "student")?;
        let teacher = ModelParams::from_checkpoint(ck, "teacher")?;
        let velocity = ck
            .tensor("velocity")
            .ok_or_else(|| Error::invalid("checkpoint has no velocity"))?
            .to_vec();
        if velocity.len() != student.as_slice().len() {
            return Err(Error::invalid("velocity length does not match the model"));
        }
        let phase = match ck.meta("phase") {
            Some("burn-in") => Phase::BurnIn,
            Some("mutual") => Phase::Mutual,
            other => return Err(Error::invalid(format!("bad phase {other:?}"))),
        };
        Ok(Self {
            student,
            teacher,
            velocity,
            iteration: ck.meta_parse("iteration")?,
            phase,
        })
    }
}

/// Everything a training step needs about one scene, prepared once.
#[derive(Debug, Clone)]
pub struct TrainScene<'a> {
    pub scene: &'a Scene,
    pub sparse: &'a SparseAnnotations,
    /// Sorted prompt classes; empty when prompting is off.
    pub prompt: Vec<usize>,
    targets: [SupervisedTargets; 2],
    gt_pixels: SelectionSet,
}

impl<'a> TrainScene<'a> {
    pub fn new(
        scene: &'a Scene,
        sparse: &'a SparseAnnotations,
        prompt: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let (h, w) = (scene.height(), scene.width());
        let axis = w as f64 / 2.0;
        let mirrored: Vec<Instance> = sparse
            .kept
            .iter()
            .map(|i| Instance {
                class_id: i.class_id,
                bbox: i.bbox.mirrored_x(axis),
            })
            .collect();
        Ok(Self {
            scene,
            sparse,
            prompt,
            targets: [
                SupervisedTargets::new(&sparse.kept, h, w, classes)?,
                SupervisedTargets::new(&mirrored, h, w, classes)?,
            ],
            gt_pixels: gt_selection(&gt_pixel_mask(&sparse.kept, h, w, classes)?),
        })
    }
}

/// Teacher scores and the pseudo-label selection for one scene, both in
/// teacher-view coordinates.
pub fn pseudo_labels(
    teacher: &ModelParams,
    ts: &TrainScene<'_>,
    features: &Raster,
    cfg: &TrainConfig,
) -> Result<(Raster, SelectionSet)> {
    let scores = joint_confidence(&forward(teacher, features)?);
    let cands = candidates_from_scores(&scores);
    let selected = match cfg.assignment {
        Assignment::GlobalTopk => assign_global_topk(&cands, cfg.cla.k.resolve(cands.len())),
        Assignment::Cla if ts.sparse.is_unlabeled() => assign_unlabeled(&cands, &ts.prompt, &cfg.cla),
        Assignment::Cla => assign_sparse(&cands, &ts.prompt, &cfg.cla, &ts.gt_pixels),
    };
    Ok((scores, selected))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub sup_cls: f64,
    pub sup_quality: f64,
    pub sup_reg: f64,
    pub distill_pos: f64,
    pub distill_neg: f64,
    pub selected: usize,
    pub sel_fg: usize,
    pub sel_conf: usize,
    pub sel_per_class: usize,
    pub sel_gt: usize,
}

impl StepStats {
    fn add(&mut self, o: &StepStats) {
        self.loss += o.loss;
        self.sup_cls += o.sup_cls;
        self.sup_quality += o.sup_quality;
        self.sup_reg += o.sup_reg;
        self.distill_pos += o.distill_pos;
        self.distill_neg += o.distill_neg;
        self.selected += o.selected;
        self.sel_fg += o.sel_fg;
        self.sel_conf += o.sel_conf;
        self.sel_per_class += o.sel_per_class;
        self.sel_gt += o.sel_gt;
    }

    fn scale_losses(&mut self, s: f64) {
        self.loss *= s;
        self.sup_cls *= s;
        self.sup_quality *= s;
        self.sup_reg *= s;
        self.distill_pos *= s;
        self.distill_neg *= s;
    }
}

const VIEW_SALT: u64 = 0x7669_6577_0000_0001;
const SHUFFLE_SALT: u64 = 0x7368_7566_0000_0002;

fn view_seed(cfg: &TrainConfig, iteration: usize) -> u64 {
    (cfg.seed ^ VIEW_SALT).wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn scene_step(
    state: &TrainState,
    ts: &TrainScene<'_>,
    layout: &FeatureLayout,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, StepStats)> {
    let views = branch_views(ts.scene, layout, &cfg.views, view_seed(cfg, state.iteration));
    let out = forward(&state.student, &views.student)?;
    let (h, w, c) = out.class_logits.shape();
    let mut grads = OutputGrads::zeros(h, w, c);
    let mut stats = StepStats::default();
    if !ts.sparse.is_unlabeled() {
        let sup = supervised_loss(&out, &ts.targets[views.flipped as usize], &cfg.ahr)?;
        grads.add_scaled(&sup.grads, 1.0);
        stats.sup_cls = sup.classification;
        stats.sup_quality = sup.quality;
        stats.sup_reg = sup.regression;
        stats.loss += sup.total;
    }
    if state.phase == Phase::Mutual && cfg.unsup_weight > 0.0 {
        let (scores, selected) = pseudo_labels(&state.teacher, ts, &views.teacher, cfg)?;
        stats.selected = selected.len();
        stats.sel_fg = selected.count_tag(Provenance::Fg);
        stats.sel_conf = selected.count_tag(Provenance::Conf);
        stats.sel_per_class = selected.count_tag(Provenance::PerClass);
        stats.sel_gt = selected.count_tag(Provenance::Gt);
        let (scores, selected) = if views.flipped {
            (
                flip_horizontal(&scores, &[]),
                selected.map_keys(|(y, x, k)| (y, w - 1 - x, k)),
            )
        } else {
            (scores, selected)
        };
        let d = distill_loss(&out, &scores, &selected, &cfg.ahr)?;
        grads.add_scaled(&d.grads, cfg.unsup_weight);
        stats.distill_pos = d.positive;
        stats.distill_neg = d.negative;
        stats.loss += cfg.unsup_weight * d.total;
    }
    if !stats.loss.is_finite() {
        return Err(Error::Numerical(format!(
            "iteration {}, scene {}: non-finite loss (sup cls {}, quality {}, reg {}, distill +{} -{})",
            state.iteration,
            ts.scene.id,
            stats.sup_cls,
            stats.sup_quality,
            stats.sup_reg,
            stats.distill_pos,
            stats.distill_neg
        )));
    }
    Ok((backward(&state.student, &views.student, &grads)?, stats))
}

/// One optimizer step over `batch`. Per-scene work runs in parallel; the
/// gradient sum is reduced in batch order.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainScene<'_>],
    layout: &FeatureLayout,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<Result<(Vec<f64>, StepStats)>> = batch
        .par_iter()
        .map(|ts| scene_step(state, ts, layout, cfg))
        .collect();
    let mut total = vec![0.0; state.velocity.len()];
    let mut stats = StepStats::default();
    for r in results {
        let (g, s) = r?;
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
        stats.add(&s);
    }
    let inv = 1.0 / batch.len() as f64;
    total.iter_mut().for_each(|g| *g *= inv);
    stats.scale_losses(inv);
    sgd_step(&mut state.student, &mut state.velocity, &total, &cfg.sgd)
        .map_err(|e| Error::Numerical(format!("iteration {}: {e}", state.iteration)))?;
    if state.phase == Phase::Mutual {
        ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)?;
    }
    state.iteration += 1;
    if state.phase == Phase::BurnIn && state.iteration >= cfg.burn_in_iters {
        state.teacher = state.student.clone();
        state.phase = Phase::Mutual;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub stats: StepStats,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSnapshot>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub annotations: &'a AnnotationSet,
    /// Required in predictor mode; refined with the annotations on startup.
    pub prompts: Option<&'a PromptSet>,
    /// Held-out scenes for evaluation snapshots.
    pub eval: Option<&'a Corpus>,
}

#[derive(Default)]
pub struct RunOptions {
    pub resume: Option<TrainState>,
    /// Where to write the last good state if training diverges.
    pub diagnostic_path: Option<PathBuf>,
    /// Stop early once this iteration is reached.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<MetricsRecord>,
}

impl TrainRun {
    pub fn teacher(&self) -> &ModelParams {
        &self.state.teacher
    }

    pub fn metrics_jsonl(&self) -> String {
        self.log.iter().map(MetricsRecord::to_json_line).collect()
    }
}

/// Per-scene prompt classes for the configured prompt mode, in corpus order.
pub fn resolve_prompts(data: &TrainData<'_>, cfg: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    let corpus = data.corpus;
    match cfg.prompt_mode {
        PromptMode::NoPrompt => Ok(vec![Vec::new(); corpus.scenes.len()]),
        PromptMode::GtPrompt => Ok(corpus.scenes.iter().map(Scene::class_set).collect()),
        PromptMode::Predictor => {
            let prompts = data
                .prompts
                .ok_or_else(|| Error::invalid("predictor prompt mode needs a prompt file"))?;
            if prompts.names != corpus.category_names() {
                return Err(Error::invalid("prompt file categories do not match the corpus"));
            }
            let refined = prompts.refine(data.annotations)?;
            corpus
                .scenes
                .iter()
                .map(|s| {
                    refined
                        .get(s.id)
                        .map(|p| p.to_vec())
                        .ok_or_else(|| Error::invalid(format!("no prompt for scene {}", s.id)))
                })
                .collect()
        }
    }
}

/// Scene indices of the batch at `iteration`: consecutive slices of
/// per-epoch permutations.
pub fn batch_indices(n: usize, iteration: usize, cfg: &TrainConfig) -> Vec<usize> {
    let start = iteration * cfg.batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + cfg.batch_size)
        .map(|p| {
            let epoch = p / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed() ^ SHUFFLE_SALT);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[p % n]
        })
        .collect()
}

pub fn run_training(data: &TrainData<'_>, cfg: &TrainConfig, opts: RunOptions) -> Result<TrainRun> {
    cfg.validate()?;
    let corpus = data.corpus;
    if corpus.scenes.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    data.annotations.validate_against(corpus)?;
    let prompts = resolve_prompts(data, cfg)?;
    let classes = corpus.num_classes();
    let scenes: Vec<TrainScene<'_>> = corpus
        .scenes
        .iter()
        .zip(prompts)
        .map(|(scene, prompt)| {
            let sparse = data
                .annotations
                .get(scene.id)
                .ok_or_else(|| Error::invalid(format!("no annotations for scene {}", scene.id)))?;
            TrainScene::new(scene, sparse, prompt, classes)
        })
        .collect::<Result<_>>()?;
    let shape = ModelShape {
        features: corpus.layout.num_features(),
        classes,
        hidden: cfg.hidden,
    };
    let mut state = match opts.resume {
        Some(s) => {
            if s.student.shape() != shape {
                return Err(Error::invalid("resumed state does not match the corpus"));
            }
            s
        }
        None => TrainState::new(shape, cfg)?,
    };
    let stop = opts.stop_at.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let mut log = Vec::new();
    while state.iteration < stop {
        let batch: Vec<&TrainScene<'_>> = batch_indices(scenes.len(), state.iteration, cfg)
            .into_iter()
            .map(|i| &scenes[i])
            .collect();
        let before = opts.diagnostic_path.as_ref().map(|_| state.clone());
        let stats = match train_step(&mut state, &batch, &corpus.layout, cfg) {
            Ok(s) => s,
            Err(e) => {
                if let (Some(path), Some(prev)) = (&opts.diagnostic_path, before) {
                    prev.to_checkpoint().save(path)?;
                    log::error!("diverged; last good state written to {}", path.display());
                }
                return Err(e);
            }
        };
        let it = state.iteration;
        let do_log = cfg.log_interval > 0 && it % cfg.log_interval == 0;
        let do_eval = cfg.eval_interval > 0 && it % cfg.eval_interval == 0 && data.eval.is_some();
        if do_log || do_eval || it == cfg.total_iters {
            let eval = match data.eval {
                Some(ev) if do_eval => {
                    let r = evaluate(state.current_model(), ev, &cfg.decode)?;
                    Some(EvalSnapshot {
                        ap50: r.ap50,
                        ap75: r.ap75,
                        map: r.map,
                    })
                }
                _ => None,
            };
            log::info!("iter {it}: loss {:.4} selected {}", stats.loss, stats.selected);
            log.push(MetricsRecord {
                iteration: it,
                phase: state.phase,
                stats,
                eval,
            });
        }
    }
    Ok(TrainRun { state, log })
}
