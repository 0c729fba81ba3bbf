//! Tiny dense per-cell detector.
//!
//! Every cell's feature vector goes through an optional `tanh` hidden layer
//! and three linear heads: per-class logits (sigmoid, multi-label), a
//! localization-quality logit, and five box-regression outputs
//! `(dx, dy, ln w, ln h, theta)`. Gradients are derived by hand; see
//! [`backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scene::GEOMETRY_CHANNELS;

pub const REG_DIMS: usize = GEOMETRY_CHANNELS;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub features: usize,
    pub classes: usize,
    /// Width of the optional hidden layer.
    pub hidden: Option<usize>,
}

impl ModelShape {
    pub fn linear(features: usize, classes: usize) -> Self {
        Self {
            features,
            classes,
            hidden: None,
        }
    }

    /// Input width of the heads.
    pub fn head_dim(&self) -> usize {
        self.hidden.unwrap_or(self.features)
    }

    fn layout(&self) -> Layout {
        let f = self.features;
        let d = self.head_dim();
        let c = self.classes;
        let hid = self.hidden.map_or(0, |h| f * h + h);
        let w1 = 0;
        let b1 = self.hidden.map_or(0, |h| f * h);
        let cls_w = hid;
        let cls_b = cls_w + d * c;
        let q_w = cls_b + c;
        let q_b = q_w + d;
        let reg_w = q_b + 1;
        let reg_b = reg_w + d * REG_DIMS;
        Layout {
            w1,
            b1,
            cls_w,
            cls_b,
            q_w,
            q_b,
            reg_w,
            reg_b,
            len: reg_b + REG_DIMS,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    cls_w: usize,
    cls_b: usize,
    q_w: usize,
    q_b: usize,
    reg_w: usize,
    reg_b: usize,
    len: usize,
}

/// Model parameters as one flat vector; layout fixed by [`ModelShape`].
///
/// Order: hidden weights `F×Hd` (feature-major) and bias, classifier `D×C`
/// and bias, quality `D` and bias, regression `D×5` and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    /// Heads start at zero with the classifier bias set to `logit(prior)`;
    /// hidden weights are Gaussian with std `1/sqrt(F)`.
    pub fn init(shape: ModelShape, prior: f64, seed: u64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::invalid(format!("class prior {prior} outside (0, 1)")));
        }
        let mut p = Self::zeros(shape);
        let l = shape.layout();
        if let Some(h) = shape.hidden {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0 / (shape.features as f64).sqrt()).expect("finite");
            for v in &mut p.data[l.w1..l.w1 + shape.features * h] {
                *v = normal.sample(&mut rng);
            }
        }
        let bias = (prior / (1.0 - prior)).ln();
        p.data[l.cls_b..l.cls_b + shape.classes].fill(bias);
        Ok(p)
    }

    pub fn from_vec(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn checksum(&self) -> String {
        crate::io::sha256_hex(&crate::io::f64s_to_le_bytes(&self.data))
    }

    /// Classifier weight for head input `d` and class `c`.
    pub fn class_weight(&self, d: usize, c: usize) -> f64 {
        self.data[self.shape.layout().cls_w + d * self.shape.classes + c]
    }

    pub fn set_class_weight(&mut self, d: usize, c: usize, v: f64) {
        let i = self.shape.layout().cls_w + d * self.shape.classes + c;
        self.data[i] = v;
    }

    pub fn set_class_bias(&mut self, c: usize, v: f64) {
        let i = self.shape.layout().cls_b + c;
        self.data[i] = v;
    }

    pub fn set_quality(&mut self, weights: &[f64], bias: f64) {
        let l = self.shape.layout();
        let d = self.shape.head_dim();
        self.data[l.q_w..l.q_w + d].copy_from_slice(&weights[..d]);
        self.data[l.q_b] = bias;
    }

    pub fn set_regression_weight(&mut self, d: usize, k: usize, v: f64) {
        let i = self.shape.layout().reg_w + d * REG_DIMS + k;
        self.data[i] = v;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new()
            .with_meta("kind", "model")
            .with_meta("features", self.shape.features)
            .with_meta("classes", self.shape.classes)
            .with_meta("hidden", self.shape.hidden.unwrap_or(0))
            .with_tensor("params", self.data.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, tensor: &str) -> Result<Self> {
        let hidden: usize = ck.meta_parse("hidden")?;
        let shape = ModelShape {
            features: ck.meta_parse("features")?,
            classes: ck.meta_parse("classes")?,
            hidden: (hidden > 0).then_some(hidden),
        };
        let data = ck
            .tensor(tensor)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {tensor}")))?;
        Self::from_vec(shape, data.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    /// `H × W × C` pre-sigmoid class scores.
    pub class_logits: Raster,
    /// `H × W × 1` pre-sigmoid quality scores.
    pub quality_logits: Raster,
    /// `H × W × 1`, strictly inside (0, 1).
    pub quality: Raster,
    /// `H × W × 5`.
    pub regression: Raster,
}

impl DenseOutput {
    pub fn height(&self) -> usize {
        self.class_logits.height()
    }
    pub fn width(&self) -> usize {
        self.class_logits.width()
    }
    pub fn classes(&self) -> usize {
        self.class_logits.channels()
    }

    pub fn class_prob(&self, y: usize, x: usize, c: usize) -> f64 {
        sigmoid(*self.class_logits.get(y, x, c))
    }
}

/// Gradients of a scalar loss with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub class_logits: Raster,
    pub quality_logits: Raster,
    pub regression: Raster,
}

impl OutputGrads {
    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            class_logits: Raster::filled(height, width, classes, 0.0),
            quality_logits: Raster::filled(height, width, 1, 0.0),
            regression: Raster::filled(height, width, REG_DIMS, 0.0),
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrads, scale: f64) {
        for (a, b) in [
            (&mut self.class_logits, &other.class_logits),
            (&mut self.quality_logits, &other.quality_logits),
            (&mut self.regression, &other.regression),
        ] {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += scale * y;
            }
        }
    }
}

fn check_features(params: &ModelParams, features: &Raster) -> Result<()> {
    if features.channels() != params.shape.features {
        return Err(Error::invalid(format!(
            "raster has {} channels, model expects {}",
            features.channels(),
            params.shape.features
        )));
    }
    Ok(())
}

fn hidden_activations(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    let l = params.shape.layout();
    let h = out.len();
    let w = &params.data;
    out.copy_from_slice(&w[l.b1..l.b1 + h]);
    for (f, &xf) in x.iter().enumerate() {
        if xf == 0.0 {
            continue;
        }
        let row = &w[l.w1 + f * h..l.w1 + (f + 1) * h];
        for (o, &wj) in out.iter_mut().zip(row) {
            *o += xf * wj;
        }
    }
    for o in out.iter_mut() {
        *o = o.tanh();
    }
}

pub fn forward(params: &ModelParams, features: &Raster) -> Result<DenseOutput> {
    check_features(params, features)?;
    let (hgt, wid, _) = features.shape();
    let shape = params.shape;
    let c = shape.classes;
    let d = shape.head_dim();
    let l = shape.layout();
    let w = &params.data;
    let mut class_logits = Raster::filled(hgt, wid, c, 0.0);
    let mut quality_logits = Raster::filled(hgt, wid, 1, 0.0);
    let mut regression = Raster::filled(hgt, wid, REG_DIMS, 0.0);
    let mut hidden = vec![0.0; shape.hidden.unwrap_or(0)];
    for y in 0..hgt {
        for x in 0..wid {
            let input: &[f64] = if shape.hidden.is_some() {
                hidden_activations(params, features.cell(y, x), &mut hidden);
                &hidden
            } else {
                features.cell(y, x)
            };
            let logits = class_logits.cell_mut(y, x);
            logits.copy_from_slice(&w[l.cls_b..l.cls_b + c]);
            let mut q = w[l.q_b];
            let reg = regression.cell_mut(y, x);
            reg.copy_from_slice(&w[l.reg_b..l.reg_b + REG_DIMS]);
            for (k, &v) in input.iter().enumerate().take(d) {
                if v == 0.0 {
                    continue;
                }
                for (o, &wk) in logits.iter_mut().zip(&w[l.cls_w + k * c..l.cls_w + (k + 1) * c]) {
                    *o += v * wk;
                }
                q += v * w[l.q_w + k];
                for (o, &wk) in reg
                    .iter_mut()
                    .zip(&w[l.reg_w + k * REG_DIMS..l.reg_w + (k + 1) * REG_DIMS])
                {
                    *o += v * wk;
                }
            }
            *quality_logits.get_mut(y, x, 0) = q;
        }
    }
    let quality = quality_logits.map(|&z| sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
    Ok(DenseOutput {
        class_logits,
        quality_logits,
        quality,
        regression,
    })
}

/// Parameter gradients for the given output gradients (reverse pass of
/// [`forward`]).
pub fn backward(params: &ModelParams, features: &Raster, grads: &OutputGrads) -> Result<Vec<f64>> {
    check_features(params, features)?;
    let (hgt, wid, _) = features.shape();
    if grads.class_logits.shape() != (hgt, wid, params.shape.classes) {
        return Err(Error::invalid("output gradient shape mismatch"));
    }
    let shape = params.shape;
    let c = shape.classes;
    let d = shape.head_dim();
    let l = shape.layout();
    let w = &params.data;
    let mut g = vec![0.0; l.len];
    let hdim = shape.hidden.unwrap_or(0);
    let mut hidden = vec![0.0; hdim];
    let mut dhidden = vec![0.0; hdim];
    for y in 0..hgt {
        for x in 0..wid {
            let gc = grads.class_logits.cell(y, x);
            let gq = *grads.quality_logits.get(y, x, 0);
            let gr = grads.regression.cell(y, x);
            if gq == 0.0 && gc.iter().all(|&v| v == 0.0) && gr.iter().all(|&v| v == 0.0) {
                continue;
            }
            let feats = features.cell(y, x);
            let input: &[f64] = if hdim > 0 {
                hidden_activations(params, feats, &mut hidden);
                &hidden
            } else {
                feats
            };
            for (k, &v) in gc.iter().enumerate() {
                g[l.cls_b + k] += v;
            }
            g[l.q_b] += gq;
            for (k, &v) in gr.iter().enumerate() {
                g[l.reg_b + k] += v;
            }
            for (k, &a) in input.iter().enumerate().take(d) {
                if a != 0.0 {
                    for (j, &v) in gc.iter().enumerate() {
                        g[l.cls_w + k * c + j] += a * v;
                    }
                    g[l.q_w + k] += a * gq;
                    for (j, &v) in gr.iter().enumerate() {
                        g[l.reg_w + k * REG_DIMS + j] += a * v;
                    }
                }
            }
            if hdim > 0 {
                for k in 0..d {
                    let mut s = w[l.q_w + k] * gq;
                    for (j, &v) in gc.iter().enumerate() {
                        s += w[l.cls_w + k * c + j] * v;
                    }
                    for (j, &v) in gr.iter().enumerate() {
                        s += w[l.reg_w + k * REG_DIMS + j] * v;
                    }
                    dhidden[k] = s * (1.0 - hidden[k] * hidden[k]);
                }
                for (j, &v) in dhidden.iter().enumerate() {
                    g[l.b1 + j] += v;
                }
                for (f, &xf) in feats.iter().enumerate() {
                    if xf == 0.0 {
                        continue;
                    }
                    for (j, &v) in dhidden.iter().enumerate() {
                        g[l.w1 + f * hdim + j] += xf * v;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// `S[y][x][c] = sigmoid(class_logit) · quality`.
pub fn joint_confidence(out: &DenseOutput) -> Raster {
    let (h, w, c) = out.class_logits.shape();
    let mut s = Raster::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let q = *out.quality.get(y, x, 0);
            for k in 0..c {
                *s.get_mut(y, x, k) = sigmoid(*out.class_logits.get(y, x, k)) * q;
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← momentum·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut [f64],
    grads: &[f64],
    cfg: &SgdConfig,
) -> Result<()> {
    let n = params.data.len();
    if velocity.len() != n || grads.len() != n {
        return Err(Error::invalid("optimizer state length mismatch"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
    }
    for ((p, v), &g) in params.data.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
        *p -= cfg.lr * *v;
    }
    if !params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(())
}
