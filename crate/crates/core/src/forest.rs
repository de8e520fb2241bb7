//! Bagged regression forest of CART trees with per-node random feature
//! subsets and mean-decrease-in-impurity feature importances.
//!
//! Trees are multi-target: a leaf stores the mean target vector and split
//! quality is the summed per-target reduction in squared error.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Stream};

pub const FOREST_FORMAT: &str = "adaloc-forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features tried at each split; `None` means `ceil(n_features / 3)`.
    pub n_features_per_split: Option<usize>,
    pub rng_seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            n_features_per_split: None,
            rng_seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn features_per_split(&self, n_features: usize) -> usize {
        self.n_features_per_split
            .unwrap_or_else(|| n_features.div_ceil(3))
            .clamp(1, n_features.max(1))
    }

    pub fn validate(&self, n_features: Option<usize>) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Parameter("n_trees must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Parameter("min_samples_leaf must be >= 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Parameter("max_depth must be >= 1 when set".into()));
        }
        match (self.n_features_per_split, n_features) {
            (Some(0), _) => Err(Error::Parameter("n_features_per_split must be >= 1".into())),
            (Some(m), Some(n)) if m > n => Err(Error::Parameter(format!(
                "n_features_per_split ({m}) exceeds the number of features ({n})"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f64>,
    },
}

/// Nodes stored flat; the root is node 0 and samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format: String,
    pub version: u32,
    pub config: ForestConfig,
    pub n_features: usize,
    pub n_targets: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_names: Vec<String>,
    pub importances: Vec<f64>,
    pub trees: Vec<Tree>,
}

struct TreeBuilder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    rng: Stream,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn mean_target(&self, idx: &[usize]) -> Vec<f64> {
        let n = idx.len() as f64;
        (0..self.y.ncols())
            .map(|t| idx.iter().map(|&i| self.y[(i, t)]).sum::<f64>() / n)
            .collect()
    }

    fn constant_target(&self, idx: &[usize]) -> bool {
        let first = idx[0];
        idx.iter()
            .all(|&i| (0..self.y.ncols()).all(|t| self.y[(i, t)] == self.y[(first, t)]))
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.mean_target(idx),
        });
        if depth >= self.max_depth
            || idx.len() < 2 * self.min_leaf
            || self.constant_target(idx)
        {
            return id;
        }
        let Some(best) = self.best_split(idx) else {
            return id;
        };
        self.importance[best.feature] += best.gain;
        let x = self.x;
        idx.sort_by(|&a, &b| {
            let la = x[(a, best.feature)] <= best.threshold;
            let lb = x[(b, best.feature)] <= best.threshold;
            lb.cmp(&la).then(a.cmp(&b))
        });
        let n_left = idx
            .iter()
            .take_while(|&&i| x[(i, best.feature)] <= best.threshold)
            .count();
        let (l, r) = idx.split_at_mut(n_left);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<BestSplit> {
        let n = idx.len();
        let n_targets = self.y.ncols();
        let mut total = vec![0.0; n_targets];
        let mut total_sq = 0.0;
        for &i in idx {
            for t in 0..n_targets {
                let v = self.y[(i, t)];
                total[t] += v;
                total_sq += v * v;
            }
        }
        let sse = |sum: &[f64], sq: f64, count: f64| {
            sq - sum.iter().map(|s| s * s).sum::<f64>() / count
        };
        let parent_sse = sse(&total, total_sq, n as f64);

        let features = sample(&mut self.rng, self.x.ncols(), self.mtry).into_vec();
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        let mut left = vec![0.0; n_targets];
        let mut right = vec![0.0; n_targets];
        for f in features {
            let col = self.x.column(f);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            left.iter_mut().for_each(|v| *v = 0.0);
            let mut left_sq = 0.0;
            for p in 1..n {
                let i = order[p - 1];
                for t in 0..n_targets {
                    let v = self.y[(i, t)];
                    left[t] += v;
                    left_sq += v * v;
                }
                if p < self.min_leaf || n - p < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (col[order[p - 1]], col[order[p]]);
                if lo >= hi {
                    continue;
                }
                for t in 0..n_targets {
                    right[t] = total[t] - left[t];
                }
                let child = sse(&left, left_sq, p as f64)
                    + sse(&right, total_sq - left_sq, (n - p) as f64);
                let gain = parent_sse - child;
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = 0.5 * (lo + hi);
                    // adjacent floats: the midpoint can round up onto `hi`
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn check_training_data(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: x.nrows(),
        });
    }
    if y.nrows() != x.nrows() {
        return Err(Error::dim("target rows", x.nrows(), y.nrows()));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::Parameter("need at least one feature and one target".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("training data must be finite".into()));
    }
    Ok(())
}

impl Forest {
    /// Fit on `x` (`n_samples x n_features`) and `y` (`n_samples x n_targets`).
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &ForestConfig) -> Result<Forest> {
        check_training_data(x, y)?;
        cfg.validate(Some(x.ncols()))?;
        let n = x.nrows();
        let n_features = x.ncols();
        let mtry = cfg.features_per_split(n_features);

        let grown: Vec<(Tree, Vec<f64>)> = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(cfg.rng_seed, &[tag::FOREST, t as u64]);
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut builder = TreeBuilder {
                    x,
                    y,
                    max_depth: cfg.max_depth.unwrap_or(usize::MAX),
                    min_leaf: cfg.min_samples_leaf,
                    mtry,
                    rng,
                    nodes: Vec::new(),
                    importance: vec![0.0; n_features],
                };
                builder.build(&mut idx, 0);
                (
                    Tree {
                        nodes: builder.nodes,
                    },
                    builder.importance,
                )
            })
            .collect();

        let mut importances = vec![0.0; n_features];
        for (_, imp) in &grown {
            for (acc, v) in importances.iter_mut().zip(imp) {
                *acc += v;
            }
        }
        let total: f64 = importances.iter().sum();
        if total > 0.0 {
            importances.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Forest {
            format: FOREST_FORMAT.into(),
            version: FOREST_FORMAT_VERSION,
            config: *cfg,
            n_features,
            n_targets: y.ncols(),
            feature_names: Vec::new(),
            importances,
            trees: grown.into_iter().map(|(t, _)| t).collect(),
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(Error::dim("feature names", self.n_features, names.len()));
        }
        self.feature_names = names;
        Ok(self)
    }

    /// Mean of the leaf values reached in every tree.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::dim("feature vector", self.n_features, x.len()));
        }
        let mut out = vec![0.0; self.n_targets];
        for tree in &self.trees {
            for (o, v) in out.iter_mut().zip(tree.predict(x)) {
                *o += v;
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Ok(out)
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.n_targets);
        for r in 0..x.nrows() {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let p = self.predict(&row)?;
            out.row_mut(r).copy_from_slice(&p);
        }
        Ok(out)
    }

    pub fn feature_importances(&self) -> &[f64] {
        &self.importances
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Forest> {
        let forest: Forest = serde_json::from_str(text)?;
        forest.validate()?;
        Ok(forest)
    }

    /// Structural checks applied to deserialized forests.
    pub fn validate(&self) -> Result<()> {
        if self.format != FOREST_FORMAT {
            return Err(Error::Parse(format!("not a forest document: `{}`", self.format)));
        }
        if self.version != FOREST_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported forest version {}", self.version)));
        }
        if self.trees.is_empty() {
            return Err(Error::Parse("forest has no trees".into()));
        }
        if self.importances.len() != self.n_features {
            return Err(Error::dim("importances", self.n_features, self.importances.len()));
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != self.n_features {
            return Err(Error::dim("feature names", self.n_features, self.feature_names.len()));
        }
        for tree in &self.trees {
            if tree.nodes.is_empty() {
                return Err(Error::Parse("empty tree".into()));
            }
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        if *feature >= self.n_features
                            || !threshold.is_finite()
                            || *left >= tree.nodes.len()
                            || *right >= tree.nodes.len()
                        {
                            return Err(Error::Parse("malformed split node".into()));
                        }
                    }
                    Node::Leaf { value } => {
                        if value.len() != self.n_targets || value.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Parse("malformed leaf node".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
