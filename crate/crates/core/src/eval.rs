//! Rotated-box evaluation: decoding dense outputs into detections, greedy
//! matching, all-point interpolated AP and the mAP summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, rotated_nms, OrientedBox};
use crate::model::{forward, joint_confidence, DenseOutput, ModelParams, REG_DIMS};
use crate::scene::{cell_center, Corpus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: OrientedBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: OrientedBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub score_thr: f64,
    pub nms_thr: f64,
    /// Highest-scoring cells kept per class before NMS.
    pub max_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.05,
            nms_thr: 0.3,
            max_candidates: 300,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_thr", self.score_thr), ("nms_thr", self.nms_thr)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} {v} outside (0, 1)")));
            }
        }
        if self.max_candidates == 0 {
            return Err(Error::invalid("max_candidates must be positive"));
        }
        Ok(())
    }
}

/// Box regressed at cell `(y, x)`: center offset, log sizes and angle.
pub fn regressed_box(out: &DenseOutput, y: usize, x: usize) -> Option<OrientedBox> {
    let r = out.regression.cell(y, x);
    debug_assert_eq!(r.len(), REG_DIMS);
    let [px, py] = cell_center(y, x);
    let size = |v: f64| v.clamp(-7.0, 7.0).exp();
    OrientedBox::new(px + r[0], py + r[1], size(r[2]), size(r[3]), r[4]).ok()
}

pub fn decode(out: &DenseOutput, scene_id: u64, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let scores = joint_confidence(out);
    let (h, w, c) = scores.shape();
    let mut dets = Vec::new();
    for class_id in 0..c {
        let mut cells: Vec<(f64, usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let s = *scores.get(y, x, class_id);
                if s > cfg.score_thr {
                    cells.push((s, y, x));
                }
            }
        }
        cells.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        cells.truncate(cfg.max_candidates);
        let (boxes, kept_scores): (Vec<OrientedBox>, Vec<f64>) = cells
            .iter()
            .filter_map(|&(s, y, x)| regressed_box(out, y, x).map(|b| (b, s)))
            .unzip();
        for i in rotated_nms(&boxes, &kept_scores, cfg.nms_thr)? {
            dets.push(Detection {
                scene_id,
                class_id,
                bbox: boxes[i],
                score: kept_scores[i],
            });
        }
    }
    Ok(dets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap: f64,
    /// No ground truth for this class; left out of the mean.
    pub excluded: bool,
}

/// All-point interpolated AP of one class. Detections are visited by
/// descending score and matched to the unmatched ground truth of highest IoU
/// (lower index on ties).
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> ClassAp {
    let mut by_scene: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.class_id == class_id) {
        by_scene.entry(g.scene_id).or_default().push(i);
    }
    let num_gt: usize = by_scene.values().map(Vec::len).sum();
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let num_det = order.len();
    if num_gt == 0 {
        return ClassAp {
            class_id,
            num_gt,
            num_det,
            ap: if num_det == 0 { 1.0 } else { 0.0 },
            excluded: true,
        };
    }
    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(num_det);
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for &g in by_scene.get(&d.scene_id).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[g] {
                continue;
            }
            let iou = rotated_iou(&d.bbox, &gts[g].bbox);
            if iou >= iou_thr && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            matched[g] = true;
        }
        hits.push(best.is_some());
    }
    ClassAp {
        class_id,
        num_gt,
        num_det,
        ap: interpolated_ap(&hits, num_gt),
        excluded: false,
    }
}

/// Area under the precision envelope for a ranked hit list.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Mean over classes and IoU thresholds 0.50:0.05:0.95.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub classes: Vec<ClassRow>,
}

impl MapReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>6} {:>7} {:>7} {:>7} {:>7}", "class", "gt", "dets", "AP50", "AP75", "mAP");
        for r in &self.classes {
            let flag = if r.excluded { " (no gt, excluded)" } else { "" };
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>7} {:>7.2} {:>7.2} {:>7.2}{flag}",
                r.name,
                r.num_gt,
                r.num_det,
                100.0 * r.ap50,
                100.0 * r.ap75,
                100.0 * r.map
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>7} {:>7.2} {:>7.2} {:>7.2}",
            "all",
            self.num_ground_truth,
            self.num_detections,
            100.0 * self.ap50,
            100.0 * self.ap75,
            100.0 * self.map
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,name,num_gt,num_det,ap50,ap75,map,excluded\n");
        for r in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.class_id, r.name, r.num_gt, r.num_det, r.ap50, r.ap75, r.map, r.excluded
            );
        }
        let _ = writeln!(
            s,
            ",all,{},{},{},{},{},false",
            self.num_ground_truth, self.num_detections, self.ap50, self.ap75, self.map
        );
        s
    }
}

pub fn map_report(dets: &[Detection], gts: &[GroundTruth], names: &[String]) -> Result<MapReport> {
    if gts.is_empty() {
        return Err(Error::invalid("no ground truth to evaluate against"));
    }
    if let Some(d) = dets.iter().find(|d| d.class_id >= names.len()) {
        return Err(Error::invalid(format!("detection class {} out of range", d.class_id)));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= names.len()) {
        return Err(Error::invalid(format!("ground-truth class {} out of range", g.class_id)));
    }
    let classes: Vec<ClassRow> = (0..names.len())
        .into_par_iter()
        .map(|c| {
            let aps: Vec<ClassAp> = IOU_THRESHOLDS
                .iter()
                .map(|&t| average_precision(dets, gts, c, t))
                .collect();
            ClassRow {
                class_id: c,
                name: names[c].clone(),
                num_gt: aps[0].num_gt,
                num_det: aps[0].num_det,
                ap50: aps[0].ap,
                ap75: aps[5].ap,
                map: aps.iter().map(|a| a.ap).sum::<f64>() / aps.len() as f64,
                excluded: aps[0].excluded,
            }
        })
        .collect();
    let counted: Vec<&ClassRow> = classes.iter().filter(|r| !r.excluded).collect();
    let mean = |f: fn(&ClassRow) -> f64| counted.iter().map(|r| f(r)).sum::<f64>() / counted.len() as f64;
    Ok(MapReport {
        map: mean(|r| r.map),
        ap50: mean(|r| r.ap50),
        ap75: mean(|r| r.ap75),
        num_detections: dets.len(),
        num_ground_truth: gts.len(),
        classes,
    })
}

pub fn ground_truth(corpus: &Corpus) -> Vec<GroundTruth> {
    corpus
        .scenes
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(move |i| GroundTruth {
                scene_id: s.id,
                class_id: i.class_id,
                bbox: i.bbox,
            })
        })
        .collect()
}

pub fn detect(params: &ModelParams, corpus: &Corpus, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let per_scene: Vec<Result<Vec<Detection>>> = corpus
        .scenes
        .par_iter()
        .map(|s| decode(&forward(params, &s.features)?, s.id, cfg))
        .collect();
    let mut dets = Vec::new();
    for r in per_scene {
        dets.extend(r?);
    }
    Ok(dets)
}

/// Runs the model over every scene and scores the decoded detections.
pub fn evaluate(params: &ModelParams, corpus: &Corpus, cfg: &DecodeConfig) -> Result<MapReport> {
    if corpus.scenes.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let dets = detect(params, corpus, cfg)?;
    map_report(&dets, &ground_truth(corpus), &corpus.category_names())
}
