//! Hyperbolic prototype classifier over a small feedforward backbone.
//!
//! Feature vectors are mapped by an MLP to a d-dimensional Euclidean output,
//! norm-clipped, and projected onto the ball with the origin exponential
//! map. Logits are negative geodesic distances to fixed class prototypes
//! scaled by a temperature, and training minimizes the softmax
//! cross-entropy of those logits with mini-batch SGD (momentum, cosine
//! annealed step size). Prototypes stay fixed throughout.
//!
//! A matched Euclidean head (affine logits over the same backbone, same
//! optimizer) serves as the controlled baseline.
//!
//! Backpropagation is hand-derived, including the Jacobians of the norm
//! clip and of the exponential map; correctness is pinned by central
//! finite-difference checks in the tests.

use std::io::{BufRead, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, sq_norm, Ball, BallPoint, Curvature};

/// Backbone outputs are clipped to this Euclidean norm before the
/// exponential map; keeps geodesic distances away from the boundary blowup.
pub const OUTPUT_CLIP_NORM: f64 = 6.0;

/// One dense layer, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Multilayer perceptron with rectifier activations on hidden layers and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    layers: Vec<Layer>,
}

impl Backbone {
    /// `sizes` is `[input, hidden..., output]`. Weights are He-uniform,
    /// biases zero, deterministic under `seed`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(
                "backbone needs at least input and output sizes".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("backbone layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    w,
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Backbone { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Raw forward pass (pre-clip output representation).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_cached(x, &mut acts);
        acts.pop().unwrap()
    }

    /// Forward pass keeping every post-activation; `acts[0]` is the input
    /// and `acts.last()` the linear output.
    fn forward_cached(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.b[o];
                for i in 0..layer.in_dim {
                    acc += row[i] * input[i];
                }
                out[o] = if li < last { acc.max(0.0) } else { acc };
            }
            acts.push(out);
        }
    }

    /// Backpropagates `delta` (gradient at the linear output) through the
    /// network, accumulating weight gradients.
    fn backward(&self, acts: &[Vec<f64>], delta_out: &[f64], grads: &mut BackboneGrads) {
        let mut delta = delta_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let (dw, db) = &mut grads.layers[li];
            for o in 0..layer.out_dim {
                db[o] += delta[o];
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    row[i] += delta[o] * input[i];
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    prev[i] += delta[o] * row[i];
                }
            }
            // rectifier derivative from the post-activation values
            for (p, a) in prev.iter_mut().zip(&acts[li]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// Per-layer gradient buffers matching a [`Backbone`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl BackboneGrads {
    pub fn zeros_like(b: &Backbone) -> Self {
        BackboneGrads {
            layers: b
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    fn fill(&mut self, v: f64) {
        for (w, b) in &mut self.layers {
            w.fill(v);
            b.fill(v);
        }
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flat view in layer order (weights then biases per layer); used by the
    /// finite-difference checks.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Fixed hyperbolic class prototypes with the logit temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHead {
    classes: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    pub gamma: f64,
    pub proto_scale: f64,
    curvature: f64,
}

impl PrototypeHead {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.curvature).expect("validated at construction")
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k]
    }

    pub fn prototype_points(&self) -> Vec<BallPoint> {
        let c = self.curvature();
        self.prototypes
            .iter()
            .map(|p| BallPoint::new(p.clone(), c).expect("validated at construction"))
            .collect()
    }

    /// Geodesic distances from `z` (coordinates inside the ball) to every
    /// prototype, in class order.
    pub fn distances(&self, z: &[f64]) -> Vec<f64> {
        let ball = Ball::new(self.curvature());
        self.prototypes
            .iter()
            .map(|p| ball.distance(z, p))
            .collect()
    }
}

/// Builds a [`PrototypeHead`] by scaling the embedding's leaf coordinates
/// toward the origin by `proto_scale`; the class order is the order of
/// `leaves`. The logit temperature defaults to 10.
pub fn scale_prototypes(
    emb: &crate::embedder::EmbeddingSet,
    leaves: &[String],
    proto_scale: f64,
) -> Result<PrototypeHead> {
    if leaves.is_empty() {
        return Err(Error::Config("no classes given for the prototype head".into()));
    }
    if !(proto_scale.is_finite() && proto_scale > 0.0 && proto_scale <= 1.0) {
        return Err(Error::Config(format!(
            "prototype scale {proto_scale} outside (0, 1]"
        )));
    }
    let c = emb.curvature();
    let mut prototypes = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        let coords = emb
            .get(leaf)
            .ok_or_else(|| Error::UnknownNode(leaf.clone()))?;
        let scaled: Vec<f64> = coords.iter().map(|v| v * proto_scale).collect();
        prototypes.push(BallPoint::new(scaled, c)?.into_coords());
    }
    Ok(PrototypeHead {
        classes: leaves.to_vec(),
        prototypes,
        gamma: 10.0,
        proto_scale,
        curvature: c.get(),
    })
}

/// Hyperbolic logits: `-gamma * d(z, p_k)` in class order.
pub fn logits(z: &BallPoint, head: &PrototypeHead) -> Result<Vec<f64>> {
    if z.dim() != head.dim() {
        return Err(Error::DimensionMismatch {
            left: z.dim(),
            right: head.dim(),
        });
    }
    if z.curvature() != head.curvature() {
        return Err(Error::CurvatureMismatch {
            left: z.curvature().get(),
            right: head.curvature().get(),
        });
    }
    Ok(head
        .distances(z.coords())
        .iter()
        .map(|d| -head.gamma * d)
        .collect())
}

/// Maps a feature vector through the backbone onto the ball:
/// `z = exp0(clip(F(x)))`.
pub fn embed_features(features: &[f64], backbone: &Backbone, c: Curvature) -> Result<BallPoint> {
    if features.len() != backbone.input_dim() {
        return Err(Error::DimensionMismatch {
            left: features.len(),
            right: backbone.input_dim(),
        });
    }
    let mut u = backbone.forward(features);
    for (i, v) in u.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }
    clip_in_place(&mut u, OUTPUT_CLIP_NORM);
    let ball = Ball::new(c);
    let mut z = vec![0.0; u.len()];
    ball.exp0(&u, &mut z);
    BallPoint::new(z, c)
}

fn clip_in_place(v: &mut [f64], max_norm: f64) {
    let n = sq_norm(v).sqrt();
    if n > max_norm {
        let s = max_norm / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Applies the transpose Jacobian of the norm clip at `u_raw` to `g`.
fn clip_backward(u_raw: &[f64], g: &mut [f64], max_norm: f64) {
    let rho = sq_norm(u_raw).sqrt();
    if rho <= max_norm {
        return;
    }
    let s = max_norm / rho;
    let proj = dot(u_raw, g) / (rho * rho);
    for i in 0..g.len() {
        g[i] = s * (g[i] - proj * u_raw[i]);
    }
}

/// Applies the (symmetric) Jacobian of exp0 at `u` to `g`:
/// `J = g(r) I + (g'(r)/r) u u^T` with `g(r) = tanh(sr)/(sr)`.
fn exp0_backward(u: &[f64], g: &mut [f64], c: f64) {
    let s = c.sqrt();
    let r2 = sq_norm(u);
    let r = r2.sqrt();
    let (gain, quad) = if s * r < 1e-4 {
        // series around 0: tanh(x)/x = 1 - x^2/3 + 2x^4/15
        (
            1.0 - (s * r) * (s * r) / 3.0,
            -2.0 * s * s / 3.0 + 8.0 * s.powi(4) * r2 / 15.0,
        )
    } else {
        let t = (s * r).tanh();
        let sech2 = 1.0 - t * t;
        let gain = t / (s * r);
        // g'(r)/r
        let quad = sech2 / r2 - t / (s * r2 * r);
        (gain, quad)
    };
    let proj = dot(u, g);
    for i in 0..g.len() {
        g[i] = gain * g[i] + quad * proj * u[i];
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    for l in logits.iter_mut() {
        *l /= z;
    }
}

/// Labeled feature matrix; labels are leaf ids of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub feature_dim: usize,
    rows: Vec<f64>,
    labels: Vec<String>,
    pub split: String,
}

impl LabeledFeatures {
    pub fn new(feature_dim: usize, rows: Vec<f64>, labels: Vec<String>, split: &str) -> Result<Self> {
        if feature_dim == 0 || rows.len() != feature_dim * labels.len() {
            return Err(Error::Config(format!(
                "feature matrix shape mismatch: {} values for {} rows of dim {}",
                rows.len(),
                labels.len(),
                feature_dim
            )));
        }
        for (i, v) in rows.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(LabeledFeatures {
            feature_dim,
            rows,
            labels,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Sorted unique label set.
    pub fn class_set(&self) -> Vec<String> {
        let mut classes: Vec<String> = self.labels.clone();
        classes.sort();
        classes.dedup();
        classes
    }

    /// CSV with a header naming the feature columns and a final `label`
    /// column.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for i in 0..self.feature_dim {
            write!(w, "f{i},")?;
        }
        writeln!(w, "label")?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", self.label(i))?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl BufRead, split: &str) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((lineno, line)) => {
                    let raw = line.map_err(|e| Error::io(format!("line {}", lineno + 1), e))?;
                    if raw.trim().is_empty() {
                        continue;
                    }
                    break raw;
                }
                None => return Err(Error::Parse {
                    line: 1,
                    msg: "empty features file".into(),
                }),
            }
        };
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.last() != Some(&"label") {
            return Err(Error::Parse {
                line: 1,
                msg: "last CSV column must be named 'label'".into(),
            });
        }
        let feature_dim = cols.len() - 1;
        if feature_dim == 0 {
            return Err(Error::Parse {
                line: 1,
                msg: "no feature columns".into(),
            });
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines {
            let lineno = lineno + 1;
            let raw = line.map_err(|e| Error::io(format!("line {lineno}"), e))?;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != feature_dim + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", feature_dim + 1, fields.len()),
                });
            }
            for f in &fields[..feature_dim] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad feature value '{f}'"),
                })?;
                rows.push(v);
            }
            labels.push(fields[feature_dim].to_string());
        }
        LabeledFeatures::new(feature_dim, rows, labels, split)
    }
}

/// Classification head: fixed hyperbolic prototypes or a trainable affine
/// softmax baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Hyperbolic(PrototypeHead),
    Euclidean(LinearHead),
}

impl Head {
    pub fn classes(&self) -> &[String] {
        match self {
            Head::Hyperbolic(h) => &h.classes,
            Head::Euclidean(h) => &h.classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes().len()
    }

    pub fn is_hyperbolic(&self) -> bool {
        matches!(self, Head::Hyperbolic(_))
    }
}

/// Trainable affine softmax head, `logit = W u + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    classes: Vec<String>,
    in_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn new(classes: Vec<String>, in_dim: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() || in_dim == 0 {
            return Err(Error::Config("empty euclidean head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..classes.len() * in_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Ok(LinearHead {
            b: vec![0.0; classes.len()],
            in_dim,
            w,
            classes,
        })
    }

    pub fn zeros(classes: Vec<String>, in_dim: usize) -> Result<Self> {
        let mut head = Self::new(classes, in_dim, 0)?;
        head.w.fill(0.0);
        head.b.fill(0.0);
        Ok(head)
    }

    pub fn logits(&self, u: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| {
                let row = &self.w[k * self.in_dim..(k + 1) * self.in_dim];
                self.b[k] + dot(row, u)
            })
            .collect()
    }
}

/// Backbone plus head; the unit serialized as a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: Backbone,
    pub head: Head,
}

impl Model {
    pub fn class_names(&self) -> &[String] {
        self.head.classes()
    }

    /// Raw backbone representation (pre-clip, pre-map); this is the feature
    /// vector the KNN score bank is built from.
    pub fn backbone_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.backbone.input_dim() {
            return Err(Error::DimensionMismatch {
                left: features.len(),
                right: self.backbone.input_dim(),
            });
        }
        Ok(self.backbone.forward(features))
    }

    /// Per-class logits for one input row.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        match &self.head {
            Head::Hyperbolic(head) => {
                let z = embed_features(features, &self.backbone, head.curvature())?;
                logits(&z, head)
            }
            Head::Euclidean(head) => {
                let u = self.backbone_features(features)?;
                Ok(head.logits(&u))
            }
        }
    }

    /// Hyperbolic embedding and prototype distances; None for the Euclidean
    /// head.
    pub fn hyper_embedding(&self, features: &[f64]) -> Result<Option<(BallPoint, Vec<f64>)>> {
        match &self.head {
            Head::Hyperbolic(head) => {
                let z = embed_features(features, &self.backbone, head.curvature())?;
                let d = head.distances(z.coords());
                Ok(Some((z, d)))
            }
            Head::Euclidean(_) => Ok(None),
        }
    }

    pub fn predict_idx(&self, features: &[f64]) -> Result<usize> {
        let logits = self.logits(features)?;
        Ok(argmax(&logits))
    }

    pub fn accuracy(&self, data: &LabeledFeatures) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("empty evaluation set".into()));
        }
        let classes = self.class_names();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let pred = self.predict_idx(data.row(i))?;
            if classes[pred] == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let model: Model = serde_json::from_str(text)?;
        let expected = model.backbone.output_dim();
        match &model.head {
            Head::Hyperbolic(h) => {
                if h.dim() != expected {
                    return Err(Error::DimensionMismatch {
                        left: h.dim(),
                        right: expected,
                    });
                }
            }
            Head::Euclidean(h) => {
                if h.in_dim != expected {
                    return Err(Error::DimensionMismatch {
                        left: h.in_dim,
                        right: expected,
                    });
                }
            }
        }
        Ok(model)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Optimizer settings: SGD with momentum, weight decay and cosine-annealed
/// step size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-3,
            seed: 0,
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_train_trace_csv(rows: &[TrainEpoch], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,loss,accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, r.loss, r.accuracy)?;
    }
    Ok(())
}

struct SampleScratch {
    acts: Vec<Vec<f64>>,
    grad_buf: Vec<f64>,
    delta: Vec<f64>,
}

/// Loss and gradient of one sample; returns (loss, predicted-class).
#[allow(clippy::too_many_arguments)]
fn sample_loss_grad(
    backbone: &Backbone,
    head: &Head,
    ball: Option<&Ball>,
    x: &[f64],
    label_idx: usize,
    bgrads: &mut BackboneGrads,
    hgrads: Option<&mut (Vec<f64>, Vec<f64>)>,
    scratch: &mut SampleScratch,
) -> Result<(f64, usize)> {
    backbone.forward_cached(x, &mut scratch.acts);
    let u_raw = scratch.acts.last().unwrap().clone();
    for (i, v) in u_raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }

    match head {
        Head::Hyperbolic(h) => {
            let ball = ball.expect("ball present for the hyperbolic head");
            let mut u = u_raw.clone();
            clip_in_place(&mut u, OUTPUT_CLIP_NORM);
            let mut z = vec![0.0; u.len()];
            ball.exp0(&u, &mut z);

            let dists = h.distances(&z);
            let mut probs: Vec<f64> = dists.iter().map(|d| -h.gamma * d).collect();
            let pred = argmax(&probs);
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + probs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let loss = lse - (-h.gamma * dists[label_idx]);
            softmax_in_place(&mut probs);

            // dL/dz = sum_k gamma (y_k - p_k) grad_z d(z, p_k)
            scratch.delta.clear();
            scratch.delta.resize(z.len(), 0.0);
            for (k, p) in h.prototypes.iter().enumerate() {
                let y = if k == label_idx { 1.0 } else { 0.0 };
                let coef = h.gamma * (y - probs[k]);
                if coef == 0.0 {
                    continue;
                }
                if !ball.distance_grad(&z, p, &mut scratch.grad_buf) {
                    continue;
                }
                for i in 0..z.len() {
                    scratch.delta[i] += coef * scratch.grad_buf[i];
                }
            }
            exp0_backward(&u, &mut scratch.delta, ball.c());
            clip_backward(&u_raw, &mut scratch.delta, OUTPUT_CLIP_NORM);
            backbone.backward(&scratch.acts, &scratch.delta, bgrads);
            Ok((loss, pred))
        }
        Head::Euclidean(h) => {
            let mut probs = h.logits(&u_raw);
            let pred = argmax(&probs);
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + probs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let loss = lse - probs[label_idx];
            softmax_in_place(&mut probs);

            scratch.delta.clear();
            scratch.delta.resize(u_raw.len(), 0.0);
            let (dw, db) = hgrads.expect("gradient buffers for the euclidean head");
            for k in 0..h.classes.len() {
                let y = if k == label_idx { 1.0 } else { 0.0 };
                let g = probs[k] - y;
                db[k] += g;
                let row = &h.w[k * h.in_dim..(k + 1) * h.in_dim];
                let drow = &mut dw[k * h.in_dim..(k + 1) * h.in_dim];
                for i in 0..h.in_dim {
                    drow[i] += g * u_raw[i];
                    scratch.delta[i] += g * row[i];
                }
            }
            backbone.backward(&scratch.acts, &scratch.delta, bgrads);
            Ok((loss, pred))
        }
    }
}

/// Mean hyperbolic cross-entropy of a batch with the backbone gradients;
/// prototypes receive no gradient.
pub fn hyper_ce_loss(
    batch: &LabeledFeatures,
    backbone: &Backbone,
    head: &PrototypeHead,
) -> Result<(f64, BackboneGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let label_idx = resolve_labels(batch, &head.classes)?;
    let ball = Ball::new(head.curvature());
    let mut grads = BackboneGrads::zeros_like(backbone);
    let mut scratch = SampleScratch {
        acts: Vec::new(),
        grad_buf: vec![0.0; head.dim()],
        delta: Vec::new(),
    };
    let wrapped = Head::Hyperbolic(head.clone());
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (loss, _) = sample_loss_grad(
            backbone,
            &wrapped,
            Some(&ball),
            batch.row(i),
            label_idx[i],
            &mut grads,
            None,
            &mut scratch,
        )?;
        total += loss;
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((total / batch.len() as f64, grads))
}

fn resolve_labels(data: &LabeledFeatures, classes: &[String]) -> Result<Vec<usize>> {
    data.labels()
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::UnknownNode(l.clone()))
        })
        .collect()
}

/// Trains the model with mini-batch SGD (momentum 0.9 by default, cosine
/// annealing). Hyperbolic prototypes are not updated; the Euclidean head
/// trains jointly with the backbone. Deterministic under the config seed.
pub fn train(
    mut model: Model,
    data: &LabeledFeatures,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<TrainEpoch>)> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if data.feature_dim != model.backbone.input_dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match backbone input {}",
            data.feature_dim,
            model.backbone.input_dim()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let label_idx = resolve_labels(data, model.head.classes())?;
    let ball = match &model.head {
        Head::Hyperbolic(h) => Some(Ball::new(h.curvature())),
        Head::Euclidean(_) => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut bgrads = BackboneGrads::zeros_like(&model.backbone);
    let mut bvel = BackboneGrads::zeros_like(&model.backbone);
    let mut head_dims = (0usize, 0usize);
    if let Head::Euclidean(h) = &model.head {
        head_dims = (h.w.len(), h.b.len());
    }
    let mut hgrads = (vec![0.0; head_dims.0], vec![0.0; head_dims.1]);
    let mut hvel = (vec![0.0; head_dims.0], vec![0.0; head_dims.1]);

    let mut scratch = SampleScratch {
        acts: Vec::new(),
        grad_buf: vec![0.0; model.backbone.output_dim()],
        delta: Vec::new(),
    };

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = 0.5
            * cfg.learning_rate
            * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            bgrads.fill(0.0);
            hgrads.0.fill(0.0);
            hgrads.1.fill(0.0);
            for &i in chunk {
                let hg = match &model.head {
                    Head::Euclidean(_) => Some(&mut hgrads),
                    Head::Hyperbolic(_) => None,
                };
                let (loss, pred) = sample_loss_grad(
                    &model.backbone,
                    &model.head,
                    ball.as_ref(),
                    data.row(i),
                    label_idx[i],
                    &mut bgrads,
                    hg,
                    &mut scratch,
                )?;
                epoch_loss += loss;
                if model.head.classes()[pred] == data.label(i) {
                    correct += 1;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            bgrads.scale(inv);

            for (l, layer) in model.backbone.layers.iter_mut().enumerate() {
                let (dw, db) = &bgrads.layers[l];
                let (vw, vb) = &mut bvel.layers[l];
                for i in 0..layer.w.len() {
                    vw[i] = cfg.momentum * vw[i] + dw[i] + cfg.weight_decay * layer.w[i];
                    layer.w[i] -= lr * vw[i];
                }
                for i in 0..layer.b.len() {
                    vb[i] = cfg.momentum * vb[i] + db[i];
                    layer.b[i] -= lr * vb[i];
                }
            }
            if let Head::Euclidean(h) = &mut model.head {
                for i in 0..h.w.len() {
                    hvel.0[i] =
                        cfg.momentum * hvel.0[i] + hgrads.0[i] * inv + cfg.weight_decay * h.w[i];
                    h.w[i] -= lr * hvel.0[i];
                }
                for i in 0..h.b.len() {
                    hvel.1[i] = cfg.momentum * hvel.1[i] + hgrads.1[i] * inv;
                    h.b[i] -= lr * hvel.1[i];
                }
            }
        }

        let mean_loss = epoch_loss / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite training loss {mean_loss}"),
            });
        }
        trace.push(TrainEpoch {
            epoch,
            loss: mean_loss,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, trace))
}
