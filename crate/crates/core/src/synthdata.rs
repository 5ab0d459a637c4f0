//! Deterministic hierarchy-aligned synthetic feature datasets.
//!
//! Class centers are laid out recursively: the root center sits at the
//! origin and each child center adds a random unit direction scaled by a
//! per-level step that halves with depth, so feature-space separation grows
//! with graph distance. Samples add isotropic Gaussian noise. A fraction of
//! leaves is held out as the OOD classes; they never appear in the training
//! or ID test splits.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::sq_norm;
use crate::hierarchy::Hierarchy;
use crate::protohead::LabeledFeatures;

/// Generator settings; fully deterministic under `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Levels below the root.
    pub depth: usize,
    /// Children per node at each level (`branching.len() == depth`).
    pub branching: Vec<usize>,
    /// Fraction of non-root nodes to drop (whole subtrees) to introduce
    /// imbalance; 0 keeps the full tree.
    pub removal_fraction: f64,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Isotropic within-class noise scale.
    pub sigma_within: f64,
    /// Fraction of leaves held out as OOD classes, in (0, 1).
    pub holdout_fraction: f64,
    /// Center offset of level-1 nodes; halves per level.
    pub center_step: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The `synth-100` benchmark: two levels of 10-way branching
    /// (100 leaves), 64-dimensional features, 200 train / 50 test rows per
    /// class, sigma 0.3, 20% of leaves held out.
    pub fn synth100(seed: u64) -> Self {
        SynthSpec {
            depth: 2,
            branching: vec![10, 10],
            removal_fraction: 0.0,
            feature_dim: 64,
            train_per_class: 200,
            test_per_class: 50,
            sigma_within: 0.3,
            holdout_fraction: 0.2,
            center_step: 3.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.branching.len() != self.depth {
            return Err(Error::Config(format!(
                "branching must list one factor per level ({} levels, {} factors)",
                self.depth,
                self.branching.len()
            )));
        }
        if self.branching.iter().any(|&b| b == 0) {
            return Err(Error::Config("branching factors must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        if !(self.sigma_within >= 0.0 && self.sigma_within.is_finite()) {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.removal_fraction) {
            return Err(Error::Config(format!(
                "removal fraction {} outside [0, 1)",
                self.removal_fraction
            )));
        }
        if self.feature_dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "feature dim and per-class sample counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the balanced tree: root `root`, level-1 nodes `n{i}`, deeper
/// nodes `parent.{i}`.
pub fn build_tree(depth: usize, branching: &[usize]) -> Result<Hierarchy> {
    if depth == 0 || branching.len() != depth {
        return Err(Error::Config(
            "branching must list one factor per level".into(),
        ));
    }
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut frontier = vec!["root".to_string()];
    for (level, &fan) in branching.iter().enumerate() {
        let mut next = Vec::with_capacity(frontier.len() * fan);
        for parent in &frontier {
            for i in 0..fan {
                let child = if level == 0 {
                    format!("n{i}")
                } else {
                    format!("{parent}.{i}")
                };
                edges.push((parent.clone(), child.clone()));
                next.push(child);
            }
        }
        frontier = next;
    }
    Hierarchy::from_edges(&edges)
}

/// Removes whole subtrees rooted at randomly chosen non-root nodes until at
/// least `fraction` of the non-root nodes are gone, keeping at least one
/// child of the root. Deterministic under `seed`.
pub fn remove_random_subtrees(h: &Hierarchy, fraction: f64, seed: u64) -> Result<Hierarchy> {
    if fraction == 0.0 {
        return Ok(h.clone());
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "removal fraction {fraction} outside [0, 1)"
        )));
    }
    let n = h.len();
    let target = ((n - 1) as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).filter(|&i| i != h.root()).collect();
    order.shuffle(&mut rng);

    let mut removed = vec![false; n];
    let mut removed_count = 0usize;
    for &candidate in &order {
        if removed_count >= target {
            break;
        }
        if removed[candidate] {
            continue;
        }
        // keep the tree non-degenerate: the root must keep a child
        if h.parent(candidate) == Some(h.root()) {
            let root_children_left = h
                .children(h.root())
                .iter()
                .filter(|&&c| !removed[c])
                .count();
            if root_children_left <= 1 {
                continue;
            }
        }
        let mut stack = vec![candidate];
        while let Some(u) = stack.pop() {
            if removed[u] {
                continue;
            }
            removed[u] = true;
            removed_count += 1;
            stack.extend(h.children(u).iter().copied());
        }
    }

    let edges: Vec<(String, String)> = h
        .edges()
        .into_iter()
        .filter(|&(p, c)| !removed[p] && !removed[c])
        .map(|(p, c)| (h.name(p).to_string(), h.name(c).to_string()))
        .collect();
    Hierarchy::from_edges(&edges)
}

/// A generated benchmark: hierarchy plus train / ID-test / OOD-test splits.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub hierarchy: Hierarchy,
    pub train: LabeledFeatures,
    pub test_id: LabeledFeatures,
    pub test_ood: LabeledFeatures,
    pub id_classes: Vec<String>,
    pub ood_classes: Vec<String>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let full = build_tree(spec.depth, &spec.branching)?;
    let hierarchy = remove_random_subtrees(&full, spec.removal_fraction, spec.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.feature_dim;

    // Class centers in node order; parents precede children.
    let mut centers: Vec<Vec<f64>> = vec![Vec::new(); hierarchy.len()];
    centers[hierarchy.root()] = vec![0.0; m];
    for idx in 0..hierarchy.len() {
        if idx == hierarchy.root() {
            continue;
        }
        let parent = hierarchy.parent(idx).expect("non-root has a parent");
        let level = hierarchy.level(idx);
        let step = spec.center_step * 0.5f64.powi(level as i32 - 1);
        let dir = random_unit(&mut rng, m);
        centers[idx] = hierarchy_center(&centers[parent], &dir, step);
    }

    // Leaf holdout.
    let leaves: Vec<usize> = hierarchy.leaves().to_vec();
    let n_leaves = leaves.len();
    let n_ood = ((n_leaves as f64 * spec.holdout_fraction).round() as usize).max(1);
    if n_ood >= n_leaves {
        return Err(Error::Config(format!(
            "holdout {} leaves of {n_leaves} leaves no ID classes",
            n_ood
        )));
    }
    let mut shuffled = leaves.clone();
    shuffled.shuffle(&mut rng);
    let mut ood_set: Vec<usize> = shuffled[..n_ood].to_vec();
    ood_set.sort_unstable();
    let id_set: Vec<usize> = leaves
        .iter()
        .copied()
        .filter(|i| !ood_set.contains(i))
        .collect();

    let mut make_split = |classes: &[usize], per_class: usize, split: &str| -> Result<LabeledFeatures> {
        let mut rows = Vec::with_capacity(classes.len() * per_class * m);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for &leaf in classes {
            for _ in 0..per_class {
                for k in 0..m {
                    rows.push(centers[leaf][k] + spec.sigma_within * normal(&mut rng));
                }
                labels.push(hierarchy.name(leaf).to_string());
            }
        }
        LabeledFeatures::new(m, rows, labels, split)
    };

    let train = make_split(&id_set, spec.train_per_class, "train")?;
    let test_id = make_split(&id_set, spec.test_per_class, "test_id")?;
    let test_ood = make_split(&ood_set, spec.test_per_class, "test_ood")?;

    Ok(SynthDataset {
        id_classes: id_set
            .iter()
            .map(|&i| hierarchy.name(i).to_string())
            .collect(),
        ood_classes: ood_set
            .iter()
            .map(|&i| hierarchy.name(i).to_string())
            .collect(),
        hierarchy,
        train,
        test_id,
        test_ood,
    })
}

fn hierarchy_center(parent: &[f64], dir: &[f64], step: f64) -> Vec<f64> {
    parent
        .iter()
        .zip(dir)
        .map(|(p, d)| p + step * d)
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let n = sq_norm(&v).sqrt().max(1e-30);
    v.into_iter().map(|x| x / n).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
