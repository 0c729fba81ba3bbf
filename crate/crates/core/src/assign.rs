//! Class-aware dense pseudo-label assignment.
//!
//! Candidates are `(cell, class, score)` triples taken from a teacher's joint
//! confidence map. Three selections are unioned:
//!
//! * **fg**: cells whose argmax class is in the prompt and whose argmax score
//!   exceeds `thr` (strict);
//! * **conf**: the global top-`k` triples;
//! * **per-class**: the top-`k_j` triples of every prompted class, or of every
//!   class present when the prompt is empty.
//!
//! Sparsely annotated scenes additionally union the annotated cells. Ranking
//! ties are broken by `(y, x, class)` ascending, so every selection depends
//! only on the candidate set and never on its order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCandidate {
    pub y: usize,
    pub x: usize,
    pub class_id: usize,
    pub score: f64,
}

impl PixelCandidate {
    pub fn key(&self) -> Key {
        (self.y, self.x, self.class_id)
    }
}

/// `(y, x, class_id)`.
pub type Key = (usize, usize, usize);

/// Descending score, then ascending `(y, x, class)`.
fn rank(a: &PixelCandidate, b: &PixelCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.key().cmp(&b.key()))
}

/// One candidate per `(cell, class)` pair of a score map.
pub fn candidates_from_scores(scores: &Raster) -> Vec<PixelCandidate> {
    let (h, w, c) = scores.shape();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for (class_id, &score) in scores.cell(y, x).iter().enumerate() {
                out.push(PixelCandidate {
                    y,
                    x,
                    class_id,
                    score,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Fg,
    Conf,
    PerClass,
    Gt,
}

impl Provenance {
    const ALL: [Provenance; 4] = [Self::Fg, Self::Conf, Self::PerClass, Self::Gt];

    fn bit(self) -> u8 {
        match self {
            Self::Fg => 1,
            Self::Conf => 2,
            Self::PerClass => 4,
            Self::Gt => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fg => "fg",
            Self::Conf => "conf",
            Self::PerClass => "per-class",
            Self::Gt => "gt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub score: f64,
    tags: u8,
}

impl Selected {
    pub fn has(&self, tag: Provenance) -> bool {
        self.tags & tag.bit() != 0
    }

    pub fn tags(&self) -> impl Iterator<Item = Provenance> + '_ {
        Provenance::ALL.into_iter().filter(|t| self.has(*t))
    }
}

/// Duplicate-free set of selected `(y, x, class)` triples, ordered by key.
/// An element selected by several stages carries all of their tags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionSet {
    items: BTreeMap<Key, Selected>,
}

impl SelectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cand: &PixelCandidate, tag: Provenance) {
        self.items
            .entry(cand.key())
            .and_modify(|s| s.tags |= tag.bit())
            .or_insert(Selected {
                score: cand.score,
                tags: tag.bit(),
            });
    }

    pub fn from_candidates<'a>(
        cands: impl IntoIterator<Item = &'a PixelCandidate>,
        tag: Provenance,
    ) -> Self {
        let mut s = Self::new();
        for c in cands {
            s.insert(c, tag);
        }
        s
    }

    /// In-place union; tags of shared elements are merged and the score of the
    /// existing element is kept.
    pub fn extend(&mut self, other: &SelectionSet) {
        for (k, v) in &other.items {
            self.items
                .entry(*k)
                .and_modify(|s| s.tags |= v.tags)
                .or_insert(*v);
        }
    }

    pub fn union(mut self, other: &SelectionSet) -> Self {
        self.extend(other);
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.items.contains_key(key)
    }

    pub fn get(&self, key: &Key) -> Option<&Selected> {
        self.items.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key, &Selected)> {
        self.items.iter()
    }

    pub fn keys(&self) -> BTreeSet<Key> {
        self.items.keys().copied().collect()
    }

    pub fn count_tag(&self, tag: Provenance) -> usize {
        self.items.values().filter(|s| s.has(tag)).count()
    }

    /// Distinct cells covered, regardless of class.
    pub fn cells(&self) -> BTreeSet<(usize, usize)> {
        self.items.keys().map(|&(y, x, _)| (y, x)).collect()
    }

    /// Maps every key through `f` (used to move selections between views).
    pub fn map_keys(&self, mut f: impl FnMut(Key) -> Key) -> Self {
        Self {
            items: self.items.iter().map(|(k, v)| (f(*k), *v)).collect(),
        }
    }

    /// Plain-text export: one `y x class score tags` line per element.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# y x class score tags\n");
        for ((y, x, c), v) in &self.items {
            let tags: Vec<&str> = v.tags().map(Provenance::name).collect();
            let _ = writeln!(s, "{y} {x} {c} {:.6} {}", v.score, tags.join(","));
        }
        s
    }

    /// Binary grayscale PGM with annotated cells at 128, pseudo-labeled cells
    /// at 255 and the rest black; each cell becomes a `scale × scale` block.
    pub fn to_pgm(&self, height: usize, width: usize, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let mut level = vec![0u8; height * width];
        for ((y, x, _), v) in &self.items {
            if *y < height && *x < width {
                let pseudo = v.tags().any(|t| t != Provenance::Gt);
                let l = if pseudo { 255 } else { 128 };
                let cell = &mut level[y * width + x];
                *cell = (*cell).max(l);
            }
        }
        let (ph, pw) = (height * scale, width * scale);
        let mut out = format!("P5\n{pw} {ph}\n255\n").into_bytes();
        for py in 0..ph {
            for px in 0..pw {
                out.push(level[(py / scale) * width + px / scale]);
            }
        }
        out
    }
}

/// How many triples the global top-k stage keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopK {
    Count(usize),
    /// Fraction of all `(cell, class)` pairs of the scene, rounded up.
    Fraction(f64),
}

impl TopK {
    pub fn resolve(&self, num_pairs: usize) -> usize {
        match *self {
            TopK::Count(k) => k.max(1),
            TopK::Fraction(f) => ((f * num_pairs as f64).ceil() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaConfig {
    pub thr: f64,
    pub k: TopK,
    pub k_j: usize,
}

impl Default for ClaConfig {
    fn default() -> Self {
        Self {
            thr: 0.5,
            k: TopK::Fraction(0.01),
            k_j: 10,
        }
    }
}

impl ClaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.thr > 0.0 && self.thr < 1.0) {
            return Err(Error::invalid(format!("cla thr {} outside (0, 1)", self.thr)));
        }
        match self.k {
            TopK::Count(0) => return Err(Error::invalid("k must be >= 1")),
            TopK::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::invalid("k fraction must be in (0, 1]"))
            }
            _ => {}
        }
        if self.k_j == 0 {
            return Err(Error::invalid("k_j must be >= 1"));
        }
        Ok(())
    }
}

/// Per-cell argmax over classes; ties go to the lower class id.
fn cell_argmax(candidates: &[PixelCandidate]) -> BTreeMap<(usize, usize), PixelCandidate> {
    let mut best: BTreeMap<(usize, usize), PixelCandidate> = BTreeMap::new();
    for c in candidates {
        best.entry((c.y, c.x))
            .and_modify(|b| {
                if rank(c, b) == Ordering::Less {
                    *b = *c;
                }
            })
            .or_insert(*c);
    }
    best
}

/// Cells whose argmax class is prompted and whose argmax score exceeds `thr`.
pub fn select_fg(candidates: &[PixelCandidate], prompt: &[usize], thr: f64) -> SelectionSet {
    if prompt.is_empty() {
        return SelectionSet::new();
    }
    let best = cell_argmax(candidates);
    SelectionSet::from_candidates(
        best.values()
            .filter(|c| prompt.contains(&c.class_id) && c.score > thr),
        Provenance::Fg,
    )
}

fn top(mut pool: Vec<&PixelCandidate>, k: usize) -> Vec<&PixelCandidate> {
    if pool.len() > k {
        pool.select_nth_unstable_by(k, |a, b| rank(a, b));
        pool.truncate(k);
    }
    pool.sort_by(|a, b| rank(a, b));
    pool
}

pub fn select_topk(candidates: &[PixelCandidate], k: usize) -> SelectionSet {
    SelectionSet::from_candidates(top(candidates.iter().collect(), k.max(1)), Provenance::Conf)
}

/// Top-`k_j` per prompted class; every class present when `prompt` is empty.
pub fn select_per_class(candidates: &[PixelCandidate], prompt: &[usize], k_j: usize) -> SelectionSet {
    let classes: BTreeSet<usize> = if prompt.is_empty() {
        candidates.iter().map(|c| c.class_id).collect()
    } else {
        prompt.iter().copied().collect()
    };
    let mut out = SelectionSet::new();
    for class in classes {
        let pool: Vec<&PixelCandidate> = candidates.iter().filter(|c| c.class_id == class).collect();
        for c in top(pool, k_j.max(1)) {
            out.insert(c, Provenance::PerClass);
        }
    }
    out
}

fn num_pairs(candidates: &[PixelCandidate]) -> usize {
    candidates.len()
}

/// Selection for an unlabeled scene: fg ∪ conf ∪ per-class.
pub fn assign_unlabeled(candidates: &[PixelCandidate], prompt: &[usize], cfg: &ClaConfig) -> SelectionSet {
    let k = cfg.k.resolve(num_pairs(candidates));
    select_fg(candidates, prompt, cfg.thr)
        .union(&select_topk(candidates, k))
        .union(&select_per_class(candidates, prompt, cfg.k_j))
}

/// Selection for a sparsely annotated scene: the unlabeled selection plus the
/// annotated cells.
pub fn assign_sparse(
    candidates: &[PixelCandidate],
    prompt: &[usize],
    cfg: &ClaConfig,
    gt_pixels: &SelectionSet,
) -> SelectionSet {
    assign_unlabeled(candidates, prompt, cfg).union(gt_pixels)
}

/// Dense-Teacher-style baseline: the global top-k only.
pub fn assign_global_topk(candidates: &[PixelCandidate], k: usize) -> SelectionSet {
    select_topk(candidates, k)
}

/// Annotated cells as a selection; each element is scored 1.
pub fn gt_selection(mask: &Mask) -> SelectionSet {
    let (h, w, c) = mask.shape();
    let mut out = SelectionSet::new();
    for y in 0..h {
        for x in 0..w {
            for class_id in 0..c {
                if *mask.get(y, x, class_id) {
                    out.insert(
                        &PixelCandidate {
                            y,
                            x,
                            class_id,
                            score: 1.0,
                        },
                        Provenance::Gt,
                    );
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(y: usize, x: usize, class_id: usize, score: f64) -> PixelCandidate {
        PixelCandidate {
            y,
            x,
            class_id,
            score,
        }
    }

    fn fixture() -> Vec<PixelCandidate> {
        // Three cells, two classes each.
        vec![
            cand(0, 0, 0, 0.9),
            cand(0, 0, 2, 0.3),
            cand(0, 1, 1, 0.8),
            cand(0, 1, 2, 0.6),
            cand(1, 0, 2, 0.7),
            cand(1, 0, 0, 0.4),
        ]
    }

    #[test]
    fn fg_on_hand_fixture() {
        // argmax: (0,0)->0 @0.9, (0,1)->1 @0.8, (1,0)->2 @0.7
        let s = select_fg(&fixture(), &[0, 2], 0.5);
        assert_eq!(s.keys(), BTreeSet::from([(0, 0, 0), (1, 0, 2)]));
        assert!(select_fg(&fixture(), &[], 0.5).is_empty());
        assert!(select_fg(&fixture(), &[0, 1, 2], 0.9).is_empty());
    }

    #[test]
    fn fg_is_strict() {
        let c = [cand(0, 0, 0, 0.5)];
        assert!(select_fg(&c, &[0], 0.5).is_empty());
        assert_eq!(select_fg(&c, &[0], 0.4999).len(), 1);
    }

    #[test]
    fn topk_basics() {
        let f = fixture();
        assert_eq!(select_topk(&f, 100).len(), f.len());
        assert_eq!(select_topk(&f, 1).keys(), BTreeSet::from([(0, 0, 0)]));
        assert_eq!(
            select_topk(&f, 3).keys(),
            BTreeSet::from([(0, 0, 0), (0, 1, 1), (1, 0, 2)])
        );
    }

    #[test]
    fn topk_ties_use_coordinates() {
        let c = vec![cand(2, 0, 0, 0.5), cand(0, 3, 1, 0.5), cand(0, 3, 0, 0.5)];
        assert_eq!(select_topk(&c, 1).keys(), BTreeSet::from([(0, 3, 0)]));
        assert_eq!(
            select_topk(&c, 2).keys(),
            BTreeSet::from([(0, 3, 0), (0, 3, 1)])
        );
    }

    #[test]
    fn per_class_basics() {
        let f = fixture();
        assert_eq!(select_per_class(&f, &[1], 1).keys(), BTreeSet::from([(0, 1, 1)]));
        assert!(select_per_class(&f, &[4], 3).is_empty());
        assert_eq!(
            select_per_class(&f, &[0, 2], 1).keys(),
            BTreeSet::from([(0, 0, 0), (1, 0, 2)])
        );
        // Empty prompt: every class present.
        assert_eq!(select_per_class(&f, &[], 1).len(), 3);
    }

    #[test]
    fn union_dedups_and_merges_tags() {
        let c = [cand(0, 0, 0, 0.9)];
        let cfg = ClaConfig {
            thr: 0.5,
            k: TopK::Count(1),
            k_j: 1,
        };
        let s = assign_unlabeled(&c, &[0], &cfg);
        assert_eq!(s.len(), 1);
        let e = s.get(&(0, 0, 0)).unwrap();
        assert!(e.has(Provenance::Fg) && e.has(Provenance::Conf) && e.has(Provenance::PerClass));
    }

    #[test]
    fn sparse_adds_gt() {
        let f = fixture();
        let cfg = ClaConfig {
            thr: 0.95,
            k: TopK::Count(1),
            k_j: 1,
        };
        let base = assign_unlabeled(&f, &[0], &cfg);
        assert_eq!(assign_sparse(&f, &[0], &cfg, &SelectionSet::new()), base);
        let mut mask = Mask::filled(3, 3, 3, false);
        *mask.get_mut(2, 2, 1) = true;
        let gt = gt_selection(&mask);
        let s = assign_sparse(&f, &[0], &cfg, &gt);
        assert_eq!(s.len(), base.len() + 1);
        assert!(s.get(&(2, 2, 1)).unwrap().has(Provenance::Gt));
    }

    #[test]
    fn topk_fraction_resolves_up() {
        assert_eq!(TopK::Fraction(0.01).resolve(5120), 52);
        assert_eq!(TopK::Fraction(0.01).resolve(10), 1);
        assert_eq!(TopK::Count(0).resolve(10), 1);
        assert!(ClaConfig {
            k_j: 0,
            ..ClaConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn exports() {
        let mut s = SelectionSet::new();
        s.insert(&cand(0, 1, 2, 0.75), Provenance::Conf);
        s.insert(&cand(1, 0, 0, 1.0), Provenance::Gt);
        let text = s.to_text();
        assert!(text.contains("0 1 2 0.750000 conf"));
        assert!(text.contains("1 0 0 1.000000 gt"));
        let pgm = s.to_pgm(2, 2, 2);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(px[2], 255); // cell (0, 1)
        assert_eq!(px[8], 128); // cell (1, 0)
        assert_eq!(px[0], 0);
    }
}
