//! Synthetic scene corpus and the sparse-annotation sampler.
//!
//! A scene is a grid of cells carrying a feature vector each. The feature
//! layout is fixed per corpus:
//!
//! | channels            | content                                           |
//! |---------------------|---------------------------------------------------|
//! | `0..C`              | per-class evidence (detectability inside objects) |
//! | `C..C+K`            | clutter channels, raised on clutter blobs         |
//! | `C+K..C+K+5`        | geometry cues: dx, dy, ln w, ln h, theta          |
//!
//! Every channel carries zero-mean Gaussian noise. Clutter blobs mimic a class
//! by adding part of its evidence, which makes them the hard negatives of the
//! corpus.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersection_area, point_in_box, OrientedBox};
use crate::io;
use crate::raster::{Mask, Raster};

pub const GEOMETRY_CHANNELS: usize = 5;
pub const CORPUS_FORMAT: &str = "saod-corpus/1";
pub const ANNOTATION_FORMAT: &str = "saod-annotations/1";
const POOLED_SALT: u64 = 0x9001_ED00_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub name: String,
    pub frequency_weight: f64,
    pub size_range: (f64, f64),
    pub detectability: f64,
}

impl CategorySpec {
    pub fn new(id: usize, name: impl Into<String>, frequency_weight: f64) -> Self {
        Self {
            id,
            name: name.into(),
            frequency_weight,
            size_range: (3.0, 6.0),
            detectability: 1.0,
        }
    }
}

fn validate_categories(specs: &[CategorySpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one category is required"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.id != i {
            return Err(Error::invalid(format!(
                "category ids must be dense 0..C-1 in order; position {i} has id {}",
                s.id
            )));
        }
        if !(s.frequency_weight > 0.0 && s.frequency_weight.is_finite()) {
            return Err(Error::invalid(format!("category {}: weight must be > 0", s.name)));
        }
        let (lo, hi) = s.size_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("category {}: bad size range", s.name)));
        }
        if !(s.detectability > 0.0 && s.detectability <= 1.0) {
            return Err(Error::invalid(format!(
                "category {}: detectability must be in (0, 1]",
                s.name
            )));
        }
    }
    Ok(())
}

/// Channel layout of a corpus' feature raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_classes: usize,
    pub num_clutter: usize,
    pub geometry: bool,
}

impl FeatureLayout {
    pub fn num_features(&self) -> usize {
        self.num_classes + self.num_clutter + if self.geometry { GEOMETRY_CHANNELS } else { 0 }
    }

    pub fn evidence(&self, class_id: usize) -> usize {
        class_id
    }

    pub fn clutter(&self, k: usize) -> usize {
        self.num_classes + k
    }

    /// First geometry channel, if the layout has them.
    pub fn geometry_base(&self) -> Option<usize> {
        self.geometry.then_some(self.num_classes + self.num_clutter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: OrientedBox,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl Serialize for Instance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let b = &self.bbox;
        InstanceRecord {
            class: self.class_id,
            cx: b.cx(),
            cy: b.cy(),
            w: b.w(),
            h: b.h(),
            theta: b.theta(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = InstanceRecord::deserialize(d)?;
        let bbox = OrientedBox::new(r.cx, r.cy, r.w, r.h, r.theta)
            .map_err(serde::de::Error::custom)?;
        Ok(Instance {
            class_id: r.class,
            bbox,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub features: Raster,
    pub instances: Vec<Instance>,
    /// Hard-negative blobs; never part of the ground truth.
    pub clutter: Vec<Instance>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.features.height()
    }
    pub fn width(&self) -> usize {
        self.features.width()
    }

    /// Distinct classes present, ascending.
    pub fn class_set(&self) -> Vec<usize> {
        class_set(&self.instances)
    }
}

pub fn class_set(instances: &[Instance]) -> Vec<usize> {
    let mut v: Vec<usize> = instances.iter().map(|i| i.class_id).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Knobs of the synthetic generator beyond the category list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub categories: Vec<CategorySpec>,
    /// Expected instances per scene.
    pub density: f64,
    pub height: usize,
    pub width: usize,
    /// Expected clutter blobs per scene.
    pub clutter_density: f64,
    /// Fraction of a class' evidence a clutter blob mimicking it carries.
    pub clutter_mimic: f64,
    /// Level added to the clutter channel on clutter blobs.
    pub clutter_signal: f64,
    pub clutter_channels: usize,
    /// Relative odds of each class being mimicked; uniform when empty.
    pub clutter_affinity: Vec<f64>,
    pub noise_std: f64,
    pub geometry_noise_std: f64,
    /// Short/long side ratio range.
    pub aspect_range: (f64, f64),
    pub placement_attempts: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            categories: Vec::new(),
            density: 8.0,
            height: 32,
            width: 32,
            clutter_density: 0.0,
            clutter_mimic: 0.8,
            clutter_signal: 0.5,
            clutter_channels: 2,
            clutter_affinity: Vec::new(),
            noise_std: 0.3,
            geometry_noise_std: 0.05,
            aspect_range: (0.4, 1.0),
            placement_attempts: 40,
        }
    }
}

impl CorpusConfig {
    pub fn new(categories: Vec<CategorySpec>, density: f64) -> Self {
        Self {
            categories,
            density,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            num_classes: self.categories.len(),
            num_clutter: self.clutter_channels,
            geometry: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_categories(&self.categories)?;
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::invalid("density must be > 0"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if self.clutter_density < 0.0 || self.noise_std < 0.0 || self.geometry_noise_std < 0.0 {
            return Err(Error::invalid("densities and noise levels must be non-negative"));
        }
        if self.clutter_density > 0.0 && self.clutter_channels == 0 {
            return Err(Error::invalid("clutter requires at least one clutter channel"));
        }
        if !self.clutter_affinity.is_empty() {
            if self.clutter_affinity.len() != self.categories.len() {
                return Err(Error::invalid("clutter_affinity needs one weight per class"));
            }
            if self.clutter_affinity.iter().any(|&a| !a.is_finite() || a < 0.0)
                || self.clutter_affinity.iter().all(|&a| a == 0.0)
            {
                return Err(Error::invalid("clutter_affinity weights must be >= 0, not all 0"));
            }
        }
        let (lo, hi) = self.aspect_range;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return Err(Error::invalid("aspect_range must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub categories: Vec<CategorySpec>,
    pub layout: FeatureLayout,
    pub scenes: Vec<Scene>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// Generates `n_scenes` scenes with default generator knobs.
pub fn generate_corpus(
    specs: &[CategorySpec],
    n_scenes: usize,
    density: f64,
    seed: u64,
) -> Result<Corpus> {
    generate_corpus_with(&CorpusConfig::new(specs.to_vec(), density), n_scenes, seed)
}

/// Generates a corpus. Scene `i` draws from its own ChaCha stream `i` under
/// `seed`, so scenes are independent and generation order does not matter.
pub fn generate_corpus_with(cfg: &CorpusConfig, n_scenes: usize, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    if n_scenes == 0 {
        return Err(Error::invalid("n_scenes must be positive"));
    }
    let scenes = (0..n_scenes as u64)
        .into_par_iter()
        .map(|id| generate_scene(cfg, id, seed))
        .collect();
    Ok(Corpus {
        categories: cfg.categories.clone(),
        layout: cfg.layout(),
        scenes,
    })
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_box(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    spec: &CategorySpec,
) -> OrientedBox {
    let (lo, hi) = spec.size_range;
    let long = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let (alo, ahi) = cfg.aspect_range;
    let ratio = if ahi > alo { rng.random_range(alo..ahi) } else { alo };
    let theta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let cx = rng.random_range(0.0..cfg.width as f64);
    let cy = rng.random_range(0.0..cfg.height as f64);
    OrientedBox::new(cx, cy, long, long * ratio, theta).expect("generator draws valid boxes")
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    spec: &CategorySpec,
    occupied: &[Instance],
) -> Option<OrientedBox> {
    (0..cfg.placement_attempts.max(1)).find_map(|_| {
        let b = draw_box(rng, cfg, spec);
        occupied
            .iter()
            .all(|o| intersection_area(&o.bbox, &b) == 0.0)
            .then_some(b)
    })
}

fn generate_scene(cfg: &CorpusConfig, id: u64, seed: u64) -> Scene {
    let mut rng = stream_rng(seed, id);
    let layout = cfg.layout();
    let weights: Vec<f64> = cfg.categories.iter().map(|c| c.frequency_weight).collect();
    let class_dist = WeightedIndex::new(&weights).expect("validated weights");

    let n_inst = poisson(&mut rng, cfg.density);
    let mut instances: Vec<Instance> = Vec::with_capacity(n_inst);
    for _ in 0..n_inst {
        let class_id = class_dist.sample(&mut rng);
        if let Some(bbox) = place(&mut rng, cfg, &cfg.categories[class_id], &instances) {
            instances.push(Instance { class_id, bbox });
        }
    }

    let mut clutter = Vec::new();
    if cfg.clutter_density > 0.0 {
        let affinity = if cfg.clutter_affinity.is_empty() {
            vec![1.0; cfg.categories.len()]
        } else {
            cfg.clutter_affinity.clone()
        };
        let mimic_dist = WeightedIndex::new(&affinity).expect("validated affinity");
        let n_clutter = poisson(&mut rng, cfg.clutter_density);
        for _ in 0..n_clutter {
            let class_id = mimic_dist.sample(&mut rng);
            if let Some(bbox) = place(&mut rng, cfg, &cfg.categories[class_id], &instances) {
                clutter.push(Instance { class_id, bbox });
            }
        }
    }

    let features = render(cfg, &layout, &instances, &clutter, &mut rng);
    Scene {
        id,
        features,
        instances,
        clutter,
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

fn render(
    cfg: &CorpusConfig,
    layout: &FeatureLayout,
    instances: &[Instance],
    clutter: &[Instance],
    rng: &mut ChaCha8Rng,
) -> Raster {
    let (h, w) = (cfg.height, cfg.width);
    let mut raster = Raster::filled(h, w, layout.num_features(), 0.0);
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for v in raster.as_mut_slice() {
            *v = noise.sample(rng);
        }
    }
    let geo_noise = Normal::new(0.0, cfg.geometry_noise_std.max(0.0)).expect("finite std");

    let paint = |raster: &mut Raster, inst: &Instance, is_clutter: bool, rng: &mut ChaCha8Rng| {
        let spec = &cfg.categories[inst.class_id];
        for (y, x) in covered_cells(&inst.bbox, h, w) {
            let cell = raster.cell_mut(y, x);
            if is_clutter {
                cell[layout.evidence(inst.class_id)] += cfg.clutter_mimic * spec.detectability;
                cell[layout.clutter(inst.class_id % layout.num_clutter)] += cfg.clutter_signal;
            } else {
                cell[layout.evidence(inst.class_id)] += spec.detectability;
            }
            if let Some(g) = layout.geometry_base() {
                let cues = geometry_cues(&inst.bbox, y, x);
                for (k, cue) in cues.into_iter().enumerate() {
                    cell[g + k] += cue + geo_noise.sample(rng);
                }
            }
        }
    };
    for inst in instances {
        paint(&mut raster, inst, false, rng);
    }
    for blob in clutter {
        paint(&mut raster, blob, true, rng);
    }
    raster
}

/// Geometry cues of `b` as seen from cell `(y, x)`; these are also the
/// regression targets of the detector.
pub fn geometry_cues(b: &OrientedBox, y: usize, x: usize) -> [f64; GEOMETRY_CHANNELS] {
    let [px, py] = cell_center(y, x);
    [b.cx() - px, b.cy() - py, b.w().ln(), b.h().ln(), b.theta()]
}

pub fn cell_center(y: usize, x: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

/// Grid cells whose centers fall inside `b`.
pub fn covered_cells(b: &OrientedBox, height: usize, width: usize) -> Vec<(usize, usize)> {
    let (x0, y0, x1, y1) = b.bounds();
    let clamp = |v: f64, n: usize| -> usize { v.max(0.0).min(n as f64) as usize };
    let (xa, xb) = (clamp((x0 - 0.5).floor(), width), clamp((x1 - 0.5).ceil() + 1.0, width));
    let (ya, yb) = (clamp((y0 - 0.5).floor(), height), clamp((y1 - 0.5).ceil() + 1.0, height));
    let mut out = Vec::new();
    for y in ya..yb {
        for x in xa..xb {
            if point_in_box(cell_center(y, x), b) {
                out.push((y, x));
            }
        }
    }
    out
}

/// `mask[y][x][c]` is set iff the center of cell `(y, x)` lies inside some
/// class-`c` box.
pub fn gt_pixel_mask(
    instances: &[Instance],
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Mask> {
    if height == 0 || width == 0 || num_classes == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    let mut mask = Mask::filled(height, width, num_classes, false);
    for inst in instances {
        if inst.class_id >= num_classes {
            return Err(Error::invalid(format!(
                "instance class {} out of range for {num_classes} classes",
                inst.class_id
            )));
        }
        for (y, x) in covered_cells(&inst.bbox, height, width) {
            *mask.get_mut(y, x, inst.class_id) = true;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseAnnotations {
    pub scene_id: u64,
    /// Positions of the kept instances in the scene's instance list.
    pub kept_indices: Vec<usize>,
    pub kept: Vec<Instance>,
    pub removed_count: usize,
}

impl SparseAnnotations {
    pub fn full(scene: &Scene) -> Self {
        Self {
            scene_id: scene.id,
            kept_indices: (0..scene.instances.len()).collect(),
            kept: scene.instances.clone(),
            removed_count: 0,
        }
    }

    /// True when nothing was kept; such scenes are treated as unlabeled.
    pub fn is_unlabeled(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn class_set(&self) -> Vec<usize> {
        class_set(&self.kept)
    }
}

/// Per-class keep count: `ceil(rate · n)`, at least one when requested.
pub fn keep_count(rate: f64, n: usize, at_least_one: bool) -> usize {
    if n == 0 {
        return 0;
    }
    // The small slack absorbs products like 0.07 · 100 = 7.000000000000001.
    let k = ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(n);
    if at_least_one {
        k.max(1)
    } else {
        k
    }
}

fn sample_per_class(
    classes: &[usize],
    rate: f64,
    at_least_one: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut keep = Vec::new();
    for members in by_class.values() {
        let k = keep_count(rate, members.len(), at_least_one);
        keep.extend(sample(rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    keep
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("label rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Keeps `ceil(rate · count)` instances of every class present, drawn
/// uniformly without replacement.
pub fn sparsify(
    scene: &Scene,
    rate: f64,
    at_least_one_per_class: bool,
    seed: u64,
) -> Result<SparseAnnotations> {
    check_rate(rate)?;
    let mut rng = stream_rng(seed, scene.id);
    let classes: Vec<usize> = scene.instances.iter().map(|i| i.class_id).collect();
    let kept_indices = sample_per_class(&classes, rate, at_least_one_per_class, &mut rng);
    Ok(SparseAnnotations {
        scene_id: scene.id,
        kept: kept_indices.iter().map(|&i| scene.instances[i]).collect(),
        removed_count: scene.instances.len() - kept_indices.len(),
        kept_indices,
    })
}

/// Subsamples an existing annotation set; indices keep pointing into the
/// original scene.
pub fn resparsify(
    ann: &SparseAnnotations,
    rate: f64,
    at_least_one_per_class: bool,
    seed: u64,
) -> Result<SparseAnnotations> {
    check_rate(rate)?;
    let mut rng = stream_rng(seed, ann.scene_id);
    let classes: Vec<usize> = ann.kept.iter().map(|i| i.class_id).collect();
    let local = sample_per_class(&classes, rate, at_least_one_per_class, &mut rng);
    let total = ann.kept.len() + ann.removed_count;
    let kept_indices: Vec<usize> = local.iter().map(|&j| ann.kept_indices[j]).collect();
    Ok(SparseAnnotations {
        scene_id: ann.scene_id,
        kept: local.iter().map(|&j| ann.kept[j]).collect(),
        removed_count: total - kept_indices.len(),
        kept_indices,
    })
}

/// Annotations for a whole corpus, as persisted by the `sparsify` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub format: String,
    pub rate: f64,
    pub at_least_one_per_class: bool,
    pub seed: u64,
    pub scenes: Vec<SparseAnnotations>,
}

impl AnnotationSet {
    pub fn build(corpus: &Corpus, rate: f64, at_least_one_per_class: bool, seed: u64) -> Result<Self> {
        let scenes = corpus
            .scenes
            .iter()
            .map(|s| sparsify(s, rate, at_least_one_per_class, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            format: ANNOTATION_FORMAT.into(),
            rate,
            at_least_one_per_class,
            seed,
            scenes,
        })
    }

    /// Corpus-level sampling: keeps `ceil(rate · n_c)` of the `n_c`
    /// instances of each class across all scenes, so many scenes end up with
    /// nothing kept. Each class draws one permutation per seed and keeps a
    /// prefix of it, so higher rates keep supersets.
    pub fn build_pooled(corpus: &Corpus, rate: f64, at_least_one_per_class: bool, seed: u64) -> Result<Self> {
        check_rate(rate)?;
        let mut by_class: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (si, scene) in corpus.scenes.iter().enumerate() {
            for (ii, inst) in scene.instances.iter().enumerate() {
                by_class.entry(inst.class_id).or_default().push((si, ii));
            }
        }
        let mut keep: Vec<Vec<usize>> = vec![Vec::new(); corpus.scenes.len()];
        for (&class, members) in &by_class {
            let mut rng = stream_rng(seed ^ POOLED_SALT, class as u64);
            let mut order = members.clone();
            order.shuffle(&mut rng);
            let k = keep_count(rate, order.len(), at_least_one_per_class);
            for &(si, ii) in &order[..k] {
                keep[si].push(ii);
            }
        }
        let scenes = corpus
            .scenes
            .iter()
            .zip(keep)
            .map(|(scene, mut kept_indices)| {
                kept_indices.sort_unstable();
                SparseAnnotations {
                    scene_id: scene.id,
                    kept: kept_indices.iter().map(|&i| scene.instances[i]).collect(),
                    removed_count: scene.instances.len() - kept_indices.len(),
                    kept_indices,
                }
            })
            .collect();
        Ok(Self {
            format: ANNOTATION_FORMAT.into(),
            rate,
            at_least_one_per_class,
            seed,
            scenes,
        })
    }

    pub fn get(&self, scene_id: u64) -> Option<&SparseAnnotations> {
        self.scenes.iter().find(|a| a.scene_id == scene_id)
    }

    /// Checks that every entry refers to an existing scene and is a subset of
    /// its ground truth by index.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        if self.scenes.len() != corpus.scenes.len() {
            return Err(Error::invalid(format!(
                "annotations cover {} scenes, corpus has {}",
                self.scenes.len(),
                corpus.scenes.len()
            )));
        }
        for (a, s) in self.scenes.iter().zip(&corpus.scenes) {
            if a.scene_id != s.id {
                return Err(Error::invalid(format!(
                    "annotation order mismatch: {} vs scene {}",
                    a.scene_id, s.id
                )));
            }
            if a.kept.len() != a.kept_indices.len()
                || a.kept.len() + a.removed_count != s.instances.len()
            {
                return Err(Error::invalid(format!("scene {}: inconsistent counts", s.id)));
            }
            for (inst, &i) in a.kept.iter().zip(&a.kept_indices) {
                if s.instances.get(i) != Some(inst) {
                    return Err(Error::invalid(format!(
                        "scene {}: kept instance {i} is not in the ground truth",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = io::read_json(path)?;
        if set.format != ANNOTATION_FORMAT {
            return Err(Error::format(path, format!("unexpected format tag {}", set.format)));
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    height: usize,
    width: usize,
    instances: Vec<Instance>,
    clutter: Vec<Instance>,
    raster_offset: usize,
    raster_len: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    format: String,
    categories: Vec<CategorySpec>,
    layout: FeatureLayout,
    raster_file: String,
    raster_sha256: String,
    scenes: Vec<SceneRecord>,
}

pub const CORPUS_FILE: &str = "corpus.json";
pub const RASTER_FILE: &str = "rasters.bin";

impl Corpus {
    /// Writes `corpus.json` and `rasters.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut scenes = Vec::with_capacity(self.scenes.len());
        for s in &self.scenes {
            let offset = blob.len() / 8;
            blob.extend(io::f64s_to_le_bytes(s.features.as_slice()));
            scenes.push(SceneRecord {
                id: s.id,
                height: s.height(),
                width: s.width(),
                instances: s.instances.clone(),
                clutter: s.clutter.clone(),
                raster_offset: offset,
                raster_len: s.features.as_slice().len(),
            });
        }
        let record = CorpusRecord {
            format: CORPUS_FORMAT.into(),
            categories: self.categories.clone(),
            layout: self.layout,
            raster_file: RASTER_FILE.into(),
            raster_sha256: io::sha256_hex(&blob),
            scenes,
        };
        io::write_atomic(&dir.join(RASTER_FILE), &blob)?;
        io::write_json_atomic(&dir.join(CORPUS_FILE), &record)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(CORPUS_FILE);
        let record: CorpusRecord = io::read_json(&meta_path)?;
        if record.format != CORPUS_FORMAT {
            return Err(Error::format(&meta_path, format!("unexpected format {}", record.format)));
        }
        validate_categories(&record.categories)?;
        let blob_path = dir.join(&record.raster_file);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if io::sha256_hex(&blob) != record.raster_sha256 {
            return Err(Error::format(&blob_path, "raster checksum mismatch"));
        }
        let values = io::f64s_from_le_bytes(&blob)
            .ok_or_else(|| Error::format(&blob_path, "length is not a multiple of 8"))?;
        let f = record.layout.num_features();
        let scenes = record
            .scenes
            .into_iter()
            .map(|s| {
                let end = s.raster_offset + s.raster_len;
                let data = values
                    .get(s.raster_offset..end)
                    .ok_or_else(|| Error::format(&blob_path, format!("scene {} out of range", s.id)))?
                    .to_vec();
                let features = Raster::from_vec(s.height, s.width, f, data).ok_or_else(|| {
                    Error::format(&meta_path, format!("scene {} raster shape mismatch", s.id))
                })?;
                Ok(Scene {
                    id: s.id,
                    features,
                    instances: s.instances,
                    clutter: s.clutter,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            categories: record.categories,
            layout: record.layout,
            scenes,
        })
    }
}
