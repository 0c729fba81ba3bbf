//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saod::assign::{ClaConfig, Key, PixelCandidate, Provenance, SelectionSet};
use saod::loss::{SupervisedTargets, SMOOTH_L1_BETA};
use saod::model::{sigmoid, DenseOutput};
use saod::raster::{Mask, Raster};
use saod::OrientedBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut impl Rng) -> OrientedBox {
    OrientedBox::new(
        r.random_range(-5.0..5.0),
        r.random_range(-5.0..5.0),
        r.random_range(0.2..4.0),
        r.random_range(0.2..4.0),
        r.random_range(-PI..PI),
    )
    .unwrap()
}

/// A pair that overlaps more often than two independent draws would.
pub fn random_pair(r: &mut impl Rng) -> (OrientedBox, OrientedBox) {
    let a = random_box(r);
    let b = OrientedBox::new(
        a.cx() + r.random_range(-2.0..2.0),
        a.cy() + r.random_range(-2.0..2.0),
        r.random_range(0.2..4.0),
        r.random_range(0.2..4.0),
        r.random_range(-PI..PI),
    )
    .unwrap();
    (a, b)
}

/// Membership test written from scratch: project onto the box axes.
pub struct Frame {
    cx: f64,
    cy: f64,
    ux: [f64; 2],
    uy: [f64; 2],
    hw: f64,
    hh: f64,
}

impl Frame {
    pub fn new(b: &OrientedBox) -> Self {
        let t = b.theta();
        Self {
            cx: b.cx(),
            cy: b.cy(),
            ux: [t.cos(), t.sin()],
            uy: [(t + FRAC_PI_2).cos(), (t + FRAC_PI_2).sin()],
            hw: b.w() / 2.0,
            hh: b.h() / 2.0,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * self.ux[0] + dy * self.ux[1]).abs() <= self.hw
            && (dx * self.uy[0] + dy * self.uy[1]).abs() <= self.hh
    }

    /// Distance from the boundary in the box frame (negative outside).
    pub fn margin(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.ux[0] + dy * self.ux[1]).abs();
        let v = (dx * self.uy[0] + dy * self.uy[1]).abs();
        (self.hw - u).min(self.hh - v)
    }
}

fn union_bounds(a: &OrientedBox, b: &OrientedBox) -> (f64, f64, f64, f64) {
    let (a0, a1, a2, a3) = a.bounds();
    let (b0, b1, b2, b3) = b.bounds();
    (a0.min(b0), a1.min(b1), a2.max(b2), a3.max(b3))
}

/// Monte-Carlo IoU from `n` uniform samples over the joint bounding box.
pub fn mc_iou(a: &OrientedBox, b: &OrientedBox, n: usize, r: &mut impl Rng) -> f64 {
    let (x0, y0, x1, y1) = union_bounds(a, b);
    let (fa, fb) = (Frame::new(a), Frame::new(b));
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let x = x0 + (x1 - x0) * r.random::<f64>();
        let y = y0 + (y1 - y0) * r.random::<f64>();
        let (pa, pb) = (fa.contains(x, y), fb.contains(x, y));
        ia += pa as usize;
        ib += pb as usize;
        both += (pa && pb) as usize;
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

pub fn axis_aligned_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let area = |r: (f64, f64, f64, f64)| (r.2 - r.0) * (r.3 - r.1);
    inter / (area(a) + area(b) - inter)
}

/// Greedy suppression by repeated search for the best remaining box.
pub fn nms_oracle(boxes: &[OrientedBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && saod::geometry::rotated_iou(&boxes[i], &boxes[b]) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Sorted copy of the candidates, best first, ties by `(y, x, class)`.
fn ranked(cands: &[PixelCandidate]) -> Vec<PixelCandidate> {
    let mut v = cands.to_vec();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then((a.y, a.x, a.class_id).cmp(&(b.y, b.x, b.class_id)))
    });
    v
}

pub fn fg_oracle(cands: &[PixelCandidate], prompt: &[usize], thr: f64) -> BTreeSet<Key> {
    let mut cells: BTreeMap<(usize, usize), Vec<&PixelCandidate>> = BTreeMap::new();
    for c in cands {
        cells.entry((c.y, c.x)).or_default().push(c);
    }
    let mut out = BTreeSet::new();
    for list in cells.values() {
        let mut best = list[0];
        for c in list {
            if c.score > best.score || (c.score == best.score && c.class_id < best.class_id) {
                best = c;
            }
        }
        if prompt.contains(&best.class_id) && best.score > thr {
            out.insert((best.y, best.x, best.class_id));
        }
    }
    out
}

pub fn topk_oracle(cands: &[PixelCandidate], k: usize) -> BTreeSet<Key> {
    ranked(cands)
        .into_iter()
        .take(k)
        .map(|c| (c.y, c.x, c.class_id))
        .collect()
}

pub fn per_class_oracle(cands: &[PixelCandidate], prompt: &[usize], k_j: usize) -> BTreeSet<Key> {
    let classes: BTreeSet<usize> = if prompt.is_empty() {
        cands.iter().map(|c| c.class_id).collect()
    } else {
        prompt.iter().copied().collect()
    };
    let mut out = BTreeSet::new();
    for class in classes {
        let of_class: Vec<PixelCandidate> = cands.iter().filter(|c| c.class_id == class).copied().collect();
        out.extend(topk_oracle(&of_class, k_j));
    }
    out
}

pub fn unlabeled_oracle(cands: &[PixelCandidate], prompt: &[usize], cfg: &ClaConfig) -> BTreeSet<Key> {
    let k = cfg.k.resolve(cands.len());
    let mut out = fg_oracle(cands, prompt, cfg.thr);
    out.extend(topk_oracle(cands, k));
    out.extend(per_class_oracle(cands, prompt, cfg.k_j));
    out
}

/// Dense candidate grid with scores drawn from a small set of values, so
/// ties are common.
pub fn random_candidates(r: &mut impl Rng, h: usize, w: usize, c: usize) -> Vec<PixelCandidate> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for class_id in 0..c {
                let score = if r.random_bool(0.3) {
                    r.random_range(1..8) as f64 / 8.0
                } else {
                    r.random_range(0.001..0.999)
                };
                out.push(PixelCandidate { y, x, class_id, score });
            }
        }
    }
    out
}

/// Five-point central difference.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// `|a − b| / max(|a|, |b|)`. The scale is floored at 1e-6, above the
/// rounding noise of a finite difference, so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}


pub fn random_raster(r: &mut impl Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Raster {
    Raster::from_vec(h, w, c, (0..h * w * c).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_output(r: &mut impl Rng, h: usize, w: usize, c: usize) -> DenseOutput {
    let class_logits = random_raster(r, h, w, c, -4.0, 4.0);
    let quality_logits = random_raster(r, h, w, 1, -3.0, 3.0);
    let quality = quality_logits.map(|&z| sigmoid(z));
    DenseOutput {
        class_logits,
        quality_logits,
        quality,
        regression: random_raster(r, h, w, 5, -1.0, 1.0),
    }
}

pub fn gates_clear_of(out: &DenseOutput, thr: f64, gap: f64) -> bool {
    out.class_logits
        .as_slice()
        .iter()
        .all(|&z| (sigmoid(z) - thr).abs() > gap)
}


pub fn random_targets(r: &mut impl Rng, h: usize, w: usize, c: usize) -> SupervisedTargets {
    let mask = Mask::from_vec(h, w, c, (0..h * w * c).map(|_| r.random_bool(0.15)).collect()).unwrap();
    let mut t = SupervisedTargets::from_mask(mask);
    for y in 0..h {
        for x in 0..w {
            if t.mask.any_at(y, x) {
                t.regression[y * w + x] = Some(std::array::from_fn(|_| r.random_range(-1.0..1.0)));
            }
        }
    }
    t
}

pub fn clear_of_kink(out: &DenseOutput, t: &SupervisedTargets, gap: f64) -> bool {
    let w = out.width();
    t.regression.iter().enumerate().all(|(i, reg)| match reg {
        None => true,
        Some(tv) => {
            let pred = out.regression.cell(i / w, i % w);
            pred.iter().zip(tv).all(|(p, q)| ((p - q).abs() - SMOOTH_L1_BETA).abs() > gap)
        }
    })
}

/// Compares one output gradient entry against a finite difference.
pub fn check_entry(
    out: &DenseOutput,
    field: usize,
    idx: usize,
    analytic: f64,
    loss: &dyn Fn(&DenseOutput) -> f64,
) -> f64 {
    let f = |v: f64| {
        let mut o = out.clone();
        match field {
            0 => o.class_logits.as_mut_slice()[idx] = v,
            1 => {
                o.quality_logits.as_mut_slice()[idx] = v;
                o.quality.as_mut_slice()[idx] = sigmoid(v);
            }
            _ => o.regression.as_mut_slice()[idx] = v,
        }
        loss(&o)
    };
    let x0 = match field {
        0 => out.class_logits.as_slice()[idx],
        1 => out.quality_logits.as_slice()[idx],
        _ => out.regression.as_slice()[idx],
    };
    rel_err(analytic, derivative(f, x0, 1e-4))
}


pub fn random_selection(r: &mut impl Rng, h: usize, w: usize, c: usize) -> SelectionSet {
    let mut s = SelectionSet::new();
    for y in 0..h {
        for x in 0..w {
            for class_id in 0..c {
                if r.random_bool(0.3) {
                    let tag = if r.random_bool(0.2) { Provenance::Gt } else { Provenance::Conf };
                    s.insert(&PixelCandidate { y, x, class_id, score: 0.0 }, tag);
                }
            }
        }
    }
    s
}

