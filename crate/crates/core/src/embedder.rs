//! Balanced hyperbolic embedding of a hierarchy.
//!
//! Embeddings are initialized with the Poincare-Embeddings objective
//! (softmax of negative distances per edge against sampled non-neighbors),
//! then trained with full-batch Riemannian SGD on
//!
//! ```text
//! L = L_d + (i/E) * tau * L_n
//! ```
//!
//! where `L_d` is the mean squared relative distortion of pairwise geodesic
//! distances against graph distances and `L_n` pulls the Poincare norms of
//! same-level nodes towards their level mean. The norm-loss weight ramps
//! linearly over the epochs so distortion dominates early training.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{sq_norm, Ball, BallPoint, Curvature, BALL_EPS};
use crate::hierarchy::{GraphDistances, Hierarchy};

/// Training configuration for [`train_balanced`].
#[derive(Debug, Clone)]
pub struct EmbedConfig {
    /// Embedding dimension (>= 2).
    pub dim: usize,
    pub curvature: Curvature,
    /// Total epochs E of the distortion + balancing phase. 0 means
    /// initialization only.
    pub total_epochs: usize,
    /// Epochs of Poincare-Embeddings initialization.
    pub init_epochs: usize,
    /// Step size of the main phase; warms up linearly over the first 1% of
    /// epochs. The pair-averaged loss makes useful rates much larger than
    /// typical SGD values.
    pub learning_rate: f64,
    /// Step size of the initialization phase (burn-in at a tenth of this for
    /// the first tenth of the initialization epochs).
    pub init_learning_rate: f64,
    /// Norm-balancing weight. `None` resolves per hierarchy depth: 0.01 for
    /// hierarchies up to two levels, 0.1 for anything deeper.
    pub tau: Option<f64>,
    /// Non-neighbor samples per edge during initialization.
    pub negatives_per_edge: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 64,
            curvature: Curvature::unit(),
            total_epochs: 10_000,
            init_epochs: 100,
            learning_rate: 8.0,
            init_learning_rate: 0.1,
            tau: None,
            negatives_per_edge: 10,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "embedding dimension {} < 2",
                self.dim
            )));
        }
        if let Some(tau) = self.tau {
            if !(tau.is_finite() && tau >= 0.0) {
                return Err(Error::Config(format!("tau {tau} must be >= 0")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }

    /// The norm-loss weight for a concrete hierarchy.
    pub fn resolved_tau(&self, h: &Hierarchy) -> f64 {
        self.tau
            .unwrap_or(if h.max_level() <= 2 { 0.01 } else { 0.1 })
    }
}

/// Coefficient applied to the norm loss at a 1-based epoch: `(i/E) * tau`.
/// The final epoch applies exactly `tau`; at i = 0 the total loss is the
/// distortion loss alone.
pub fn norm_weight(epoch: usize, total_epochs: usize, tau: f64) -> f64 {
    if total_epochs == 0 {
        return 0.0;
    }
    epoch as f64 / total_epochs as f64 * tau
}

/// One trained point per hierarchy node, in hierarchy node order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    names: Vec<String>,
    points: Vec<Vec<f64>>,
    dim: usize,
    curvature: Curvature,
    seed: u64,
    epochs_trained: usize,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.points[i].as_slice())
    }

    pub fn ball_point(&self, idx: usize) -> BallPoint {
        BallPoint::new(self.points[idx].clone(), self.curvature)
            .expect("stored embedding satisfies the ball invariant")
    }

    /// Reorders the points to match the node order of `h`; errors if any
    /// hierarchy node is missing from the embedding.
    pub fn aligned_to(&self, h: &Hierarchy) -> Result<EmbeddingSet> {
        let mut points = Vec::with_capacity(h.len());
        let mut names = Vec::with_capacity(h.len());
        for idx in 0..h.len() {
            let name = h.name(idx);
            let p = self
                .get(name)
                .ok_or_else(|| Error::UnknownNode(name.to_string()))?;
            points.push(p.to_vec());
            names.push(name.to_string());
        }
        Ok(EmbeddingSet {
            names,
            points,
            dim: self.dim,
            curvature: self.curvature,
            seed: self.seed,
            epochs_trained: self.epochs_trained,
        })
    }

    /// Writes the embedding TSV: a `#dim=d curvature=c seed=s` header, then
    /// one `node_id\tv1\t...\tvd` line per node.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "#dim={} curvature={} seed={}",
            self.dim,
            self.curvature.get(),
            self.seed
        )?;
        for (name, point) in self.names.iter().zip(&self.points) {
            write!(w, "{name}")?;
            for v in point {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<EmbeddingSet> {
        let mut dim = None;
        let mut curvature = Curvature::unit();
        let mut seed = 0u64;
        let mut names = Vec::new();
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut seen = HashSet::new();

        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let raw = line.map_err(|e| Error::io(format!("line {lineno}"), e))?;
            let trimmed = raw.trim_end();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(header) = trimmed.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else {
                        continue;
                    };
                    match k {
                        "dim" => {
                            dim = Some(v.parse::<usize>().map_err(|_| Error::Parse {
                                line: lineno,
                                msg: format!("bad dim '{v}'"),
                            })?)
                        }
                        "curvature" => {
                            let c = v.parse::<f64>().map_err(|_| Error::Parse {
                                line: lineno,
                                msg: format!("bad curvature '{v}'"),
                            })?;
                            curvature = Curvature::new(c)?;
                        }
                        "seed" => {
                            seed = v.parse::<u64>().map_err(|_| Error::Parse {
                                line: lineno,
                                msg: format!("bad seed '{v}'"),
                            })?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let mut parts = trimmed.split('\t');
            let name = parts.next().unwrap_or_default().to_string();
            if name.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "missing node id".into(),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate node id '{name}'"),
                });
            }
            let coords: Vec<f64> = parts
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad coordinate '{t}'"),
                    })
                })
                .collect::<Result<_>>()?;
            let expected = *dim.get_or_insert(coords.len());
            if coords.len() != expected {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {expected} coordinates, got {}", coords.len()),
                });
            }
            // Validates the ball invariant.
            let point = BallPoint::new(coords, curvature)?;
            names.push(name);
            points.push(point.into_coords());
        }
        let dim = dim.ok_or_else(|| Error::Hierarchy("empty embedding file".into()))?;
        Ok(EmbeddingSet {
            names,
            points,
            dim,
            curvature,
            seed,
            epochs_trained: 0,
        })
    }
}

/// Per-epoch loss values recorded during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub distortion_loss: f64,
    pub norm_loss: f64,
    pub total: f64,
}

/// Writes the training trace CSV (`epoch,l_d,l_n,total`).
pub fn write_trace_csv(rows: &[TraceRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,l_d,l_n,total")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.epoch, r.distortion_loss, r.norm_loss, r.total
        )?;
    }
    Ok(())
}

/// Poincare-Embeddings initialization: points start uniformly in a radius
/// 1e-3 ball and train `init_epochs` epochs of the per-edge softmax
/// objective against uniformly sampled non-neighbors, with RSGD updates.
pub fn init_embeddings(h: &Hierarchy, cfg: &EmbedConfig) -> Result<EmbeddingSet> {
    cfg.validate()?;
    let n = h.len();
    let ball = Ball::new(cfg.curvature);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut points: Vec<Vec<f64>> = (0..n)
        .map(|_| sample_in_small_ball(&mut rng, cfg.dim, 1e-3))
        .collect();

    let edges = h.edges();
    let neighbors: Vec<HashSet<usize>> = (0..n)
        .map(|u| {
            let mut s: HashSet<usize> = h.children(u).iter().copied().collect();
            if let Some(p) = h.parent(u) {
                s.insert(p);
            }
            s
        })
        .collect();

    let burn_in = cfg.init_epochs / 10;
    let mut grad_u = vec![0.0; cfg.dim];
    let mut grad_w = vec![0.0; cfg.dim];
    let mut acc_u = vec![0.0; cfg.dim];
    let mut candidates: Vec<usize> = Vec::new();
    let mut dists: Vec<f64> = Vec::new();

    for epoch in 0..cfg.init_epochs {
        let lr = if epoch < burn_in {
            cfg.init_learning_rate * 0.1
        } else {
            cfg.init_learning_rate
        };
        for &(u, v) in &edges {
            candidates.clear();
            candidates.push(v);
            let mut attempts = 0;
            while candidates.len() < 1 + cfg.negatives_per_edge
                && attempts < 20 * (cfg.negatives_per_edge + 1)
            {
                attempts += 1;
                let w = rng.random_range(0..n);
                if w == u || neighbors[u].contains(&w) {
                    continue;
                }
                candidates.push(w);
            }

            dists.clear();
            dists.extend(
                candidates
                    .iter()
                    .map(|&w| ball.distance(&points[u], &points[w])),
            );
            // softmax over -d, stabilized at the smallest distance
            let min_d = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for &d in &dists {
                z += (-(d - min_d)).exp();
            }

            acc_u.fill(0.0);
            for (slot, &w) in candidates.iter().enumerate() {
                let p = (-(dists[slot] - min_d)).exp() / z;
                // dL/dd = target - softmax, since the logit is -d.
                let coef = if slot == 0 { 1.0 - p } else { -p };
                if coef == 0.0 {
                    continue;
                }
                if !ball.distance_grad(&points[u], &points[w], &mut grad_u) {
                    continue;
                }
                for i in 0..cfg.dim {
                    acc_u[i] += coef * grad_u[i];
                }
                if ball.distance_grad(&points[w], &points[u], &mut grad_w) {
                    rsgd_step(&ball, &mut points[w], &mut grad_w, coef, lr);
                }
            }
            rsgd_step(&ball, &mut points[u], &mut acc_u, 1.0, lr);
        }
    }

    Ok(EmbeddingSet {
        names: h.names().to_vec(),
        points,
        dim: cfg.dim,
        curvature: cfg.curvature,
        seed: cfg.seed,
        epochs_trained: 0,
    })
}

fn rsgd_step(ball: &Ball, point: &mut [f64], grad: &mut [f64], coef: f64, lr: f64) {
    ball.riemannian_rescale(grad, point);
    for i in 0..point.len() {
        point[i] -= lr * coef * grad[i];
    }
    ball.project_in_place(point, BALL_EPS);
}

fn sample_in_small_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = sq_norm(&dir).sqrt().max(1e-30);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v / norm * r).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes exactly two uniforms per draw.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Mean squared relative distortion over unordered node pairs, with its
/// Euclidean gradient per point. Embedding order must match `dist` indices
/// (embeddings produced by this module are hierarchy-ordered).
pub fn distortion_loss(emb: &EmbeddingSet, dist: &GraphDistances) -> Result<(f64, Vec<Vec<f64>>)> {
    if emb.len() != dist.len() {
        return Err(Error::DimensionMismatch {
            left: emb.len(),
            right: dist.len(),
        });
    }
    let ball = Ball::new(emb.curvature());
    let mut grads = vec![vec![0.0; emb.dim()]; emb.len()];
    let loss = distortion_loss_raw(&ball, emb.points(), dist, &mut grads);
    Ok((loss, grads))
}

fn distortion_loss_raw(
    ball: &Ball,
    points: &[Vec<f64>],
    dist: &GraphDistances,
    grads: &mut [Vec<f64>],
) -> f64 {
    let n = points.len();
    let pairs = (n * (n - 1) / 2).max(1) as f64;
    let dim = points.first().map_or(0, |p| p.len());
    let mut gx = vec![0.0; dim];
    let mut gy = vec![0.0; dim];
    let mut loss = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dg = dist.get(i, j) as f64;
            let (db, ok) = ball.distance_with_grads(&points[i], &points[j], &mut gx, &mut gy);
            let ratio = (db - dg) / dg;
            loss += ratio * ratio;
            if !ok {
                continue;
            }
            let coef = 2.0 * ratio / (dg * pairs);
            for k in 0..dim {
                grads[i][k] += coef * gx[k];
                grads[j][k] += coef * gy[k];
            }
        }
    }
    loss / pairs
}

/// Norm-balancing loss: per level, the squared deviation of each node's
/// Poincare norm from the level mean, averaged over all nodes. Levels with a
/// single node (e.g. the root) contribute nothing.
pub fn norm_loss(emb: &EmbeddingSet, h: &Hierarchy) -> Result<(f64, Vec<Vec<f64>>)> {
    if emb.len() != h.len() {
        return Err(Error::DimensionMismatch {
            left: emb.len(),
            right: h.len(),
        });
    }
    let ball = Ball::new(emb.curvature());
    let levels = level_members(h);
    let mut grads = vec![vec![0.0; emb.dim()]; emb.len()];
    let loss = norm_loss_raw(&ball, emb.points(), &levels, &mut grads, 1.0);
    Ok((loss, grads))
}

fn level_members(h: &Hierarchy) -> Vec<Vec<usize>> {
    let mut levels = vec![Vec::new(); h.max_level() as usize + 1];
    for idx in 0..h.len() {
        levels[h.level(idx) as usize].push(idx);
    }
    levels
}

/// Adds `weight` times the norm-loss gradient into `grads` and returns the
/// (unweighted) loss value.
fn norm_loss_raw(
    ball: &Ball,
    points: &[Vec<f64>],
    levels: &[Vec<usize>],
    grads: &mut [Vec<f64>],
    weight: f64,
) -> f64 {
    let n = points.len() as f64;
    let c = ball.c();
    let mut loss = 0.0;
    let mut norms: Vec<f64> = Vec::new();
    for members in levels {
        if members.len() < 2 {
            continue;
        }
        norms.clear();
        norms.extend(members.iter().map(|&i| ball.poincare_norm(&points[i])));
        let mean = norms.iter().sum::<f64>() / members.len() as f64;
        for (&i, &norm) in members.iter().zip(&norms) {
            let dev = norm - mean;
            loss += dev * dev;
            if weight == 0.0 {
                continue;
            }
            let r2 = sq_norm(&points[i]);
            let r = r2.sqrt();
            if r < 1e-12 {
                continue;
            }
            // d||p||_B/dp = 2/(1 - c r^2) * p / r
            let scale = weight * (2.0 / n) * dev * 2.0 / ((1.0 - c * r2) * r);
            for k in 0..points[i].len() {
                grads[i][k] += scale * points[i][k];
            }
        }
    }
    loss / n
}

/// Runs the balanced embedding optimization and returns the final embedding
/// together with the per-epoch training trace.
pub fn train_balanced(
    h: &Hierarchy,
    dist: &GraphDistances,
    cfg: &EmbedConfig,
) -> Result<(EmbeddingSet, Vec<TraceRow>)> {
    cfg.validate()?;
    if h.len() != dist.len() {
        return Err(Error::DimensionMismatch {
            left: h.len(),
            right: dist.len(),
        });
    }
    let mut emb = init_embeddings(h, cfg)?;
    let e = cfg.total_epochs;
    if e == 0 {
        return Ok((emb, Vec::new()));
    }

    let ball = Ball::new(cfg.curvature);
    let tau = cfg.resolved_tau(h);
    let levels = level_members(h);
    let warmup = (e / 100).max(1);
    let n = h.len();
    let mut grads = vec![vec![0.0; cfg.dim]; n];
    let mut trace = Vec::with_capacity(e);

    for epoch in 1..=e {
        let lr = cfg.learning_rate * ((epoch as f64 / warmup as f64).min(1.0));
        let w = norm_weight(epoch, e, tau);

        for g in grads.iter_mut() {
            g.fill(0.0);
        }
        let l_d = distortion_loss_raw(&ball, &emb.points, dist, &mut grads);
        let l_n = norm_loss_raw(&ball, &emb.points, &levels, &mut grads, w);
        let total = l_d + w * l_n;
        if !total.is_finite() {
            let worst = (0..n)
                .max_by(|&a, &b| {
                    let ga = grads[a].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let gb = grads[b].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    ga.partial_cmp(&gb).unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            return Err(Error::Diverged {
                epoch,
                detail: format!(
                    "non-finite loss (l_d={l_d}, l_n={l_n}); worst node '{}'",
                    h.name(worst)
                ),
            });
        }

        for (point, grad) in emb.points.iter_mut().zip(grads.iter_mut()) {
            ball.riemannian_rescale(grad, point);
            for k in 0..point.len() {
                point[k] -= lr * grad[k];
            }
            ball.project_in_place(point, BALL_EPS);
        }
        trace.push(TraceRow {
            epoch,
            distortion_loss: l_d,
            norm_loss: l_n,
            total,
        });
    }

    emb.epochs_trained = e;
    Ok((emb, trace))
}
