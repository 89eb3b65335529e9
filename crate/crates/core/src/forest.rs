//! Regression random forest with full bootstrap bookkeeping.
//!
//! Every tree records the bootstrap multiplicity `c_j(t)` of each training
//! point, the multiset of bagged points in each leaf and the leaf every
//! training point routes to. That is enough to evaluate the Breiman,
//! out-of-bag and GAP proximities exactly, and to express each out-of-bag
//! prediction as a GAP-weighted average of training targets.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{QcmlError, Result};
use crate::proximity::{ProximityMatrix, ProximityMetric, Role};
use crate::seed;

const FOREST_MAGIC: &[u8] = b"QRF";
const FOREST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Fraction(f64),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        let m = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().floor() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Fraction(f) => (f * n_features as f64).floor() as usize,
        };
        m.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub criterion: Criterion,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 50,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            criterion: Criterion::Mse,
            seed: 0,
        }
    }
}

impl ForestConfig {
    /// Hyperparameters tuned for the high-yield bond holdings.
    pub fn hyg() -> Self {
        Self {
            n_trees: 1000,
            max_depth: 50,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            criterion: Criterion::Mae,
            seed: 0,
        }
    }

    /// Hyperparameters tuned for the investment-grade bond holdings.
    pub fn igsb() -> Self {
        Self {
            n_trees: 200,
            criterion: Criterion::Mse,
            ..Self::hyg()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "hyg" => Some(Self::hyg()),
            "igsb" => Some(Self::igsb()),
            "default" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(QcmlError::config("forest.n_trees", "must be at least 1"));
        }
        if self.min_samples_leaf < 1 {
            return Err(QcmlError::config("forest.min_samples_leaf", "must be at least 1"));
        }
        if let MaxFeatures::Fraction(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return Err(QcmlError::config("forest.max_features", "fraction must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Mean target over the leaf's bagged multiset.
        value: f64,
        /// Distinct bagged training indices with their multiplicities, ascending by index.
        members: Vec<(u32, u32)>,
        /// `|M|`: size of the bagged multiset.
        bag_size: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    inbag: Vec<u32>,
    train_leaf: Vec<u32>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Bootstrap multiplicity `c_j` of every training point.
    pub fn inbag(&self) -> &[u32] {
        &self.inbag
    }

    /// Node index of the leaf each training point falls in.
    pub fn train_leaf(&self) -> &[u32] {
        &self.train_leaf
    }

    pub fn is_oob(&self, j: usize) -> bool {
        self.inbag[j] == 0
    }

    pub fn leaf_of(&self, x: &[f64]) -> u32 {
        let mut at = 0u32;
        loop {
            match &self.nodes[at as usize] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
                Node::Leaf { .. } => return at,
            }
        }
    }

    pub fn leaf_value(&self, leaf: u32) -> f64 {
        match &self.nodes[leaf as usize] {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!("node {leaf} is not a leaf"),
        }
    }

    fn leaf_members(&self, leaf: u32) -> (&[(u32, u32)], u32) {
        match &self.nodes[leaf as usize] {
            Node::Leaf {
                members, bag_size, ..
            } => (members, *bag_size),
            Node::Split { .. } => unreachable!("node {leaf} is not a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, *left as usize).max(go(nodes, *right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }

    /// Training points grouped by the leaf they route to.
    fn leaf_population(&self) -> Vec<Vec<u32>> {
        let mut pop = vec![Vec::new(); self.nodes.len()];
        for (j, &l) in self.train_leaf.iter().enumerate() {
            pop[l as usize].push(j as u32);
        }
        pop
    }
}

/// Rows of a forest proximity matrix: training points by index, or new points.
#[derive(Debug, Clone, Copy)]
pub enum ProxRows<'a> {
    Train(&'a [usize]),
    Query(&'a [Vec<f64>]),
}

impl ProxRows<'_> {
    fn len(&self) -> usize {
        match self {
            ProxRows::Train(ix) => ix.len(),
            ProxRows::Query(xs) => xs.len(),
        }
    }

    fn role(&self) -> Role {
        match self {
            ProxRows::Train(_) => Role::Train,
            ProxRows::Query(_) => Role::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    pub config: ForestConfig,
    n_features: usize,
    y_train: Vec<f64>,
}

pub fn fit_forest(config: &ForestConfig, x: &[Vec<f64>], y: &[f64]) -> Result<Forest> {
    config.validate()?;
    if x.is_empty() {
        return Err(QcmlError::usage("training set is empty"));
    }
    if x.len() != y.len() {
        return Err(QcmlError::schema("features and targets differ in length"));
    }
    let k = x[0].len();
    if k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(QcmlError::schema("training rows must share a nonzero width"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(QcmlError::schema("training data contains non-finite values"));
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::stream(config.seed, t as u64);
            build_tree(config, x, y, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        config: config.clone(),
        n_features: k,
        y_train: y.to_vec(),
    })
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn y_train(&self) -> &[f64] {
        &self.y_train
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(QcmlError::schema(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(())
    }

    /// Mean over trees of the leaf value reached by `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x)?;
        let s: f64 = self.trees.iter().map(|t| t.leaf_value(t.leaf_of(x))).sum();
        Ok(s / self.trees.len() as f64)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// `S_i`: trees for which training point `i` is out of bag.
    pub fn oob_trees(&self, i: usize) -> Vec<usize> {
        (0..self.trees.len()).filter(|&t| self.trees[t].is_oob(i)).collect()
    }

    /// Prediction for training point `i` from the trees where it is out of bag.
    pub fn oob_predict(&self, i: usize) -> Result<f64> {
        self.check_train_index(i)?;
        let s_i = self.oob_trees(i);
        if s_i.is_empty() {
            return Err(QcmlError::NoOobCover { index: i });
        }
        let sum: f64 = s_i
            .iter()
            .map(|&t| {
                let tree = &self.trees[t];
                tree.leaf_value(tree.train_leaf[i])
            })
            .sum();
        Ok(sum / s_i.len() as f64)
    }

    /// Out-of-bag R² over training points with OOB cover, with the cover count.
    pub fn oob_r2(&self) -> (f64, usize) {
        let pairs: Vec<(f64, f64)> = (0..self.n_train())
            .filter_map(|i| self.oob_predict(i).ok().map(|p| (p, self.y_train[i])))
            .collect();
        let n = pairs.len() as f64;
        let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let ss_res: f64 = pairs.iter().map(|(p, y)| (p - y).powi(2)).sum();
        let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - mean).powi(2)).sum();
        (1.0 - ss_res / ss_tot, pairs.len())
    }

    fn check_train_index(&self, i: usize) -> Result<()> {
        if i >= self.n_train() {
            return Err(QcmlError::usage(format!(
                "train index {i} out of range ({} points)",
                self.n_train()
            )));
        }
        Ok(())
    }

    fn row_leaves(&self, rows: ProxRows<'_>, r: usize) -> Vec<u32> {
        match rows {
            ProxRows::Train(ix) => self.trees.iter().map(|t| t.train_leaf[ix[r]]).collect(),
            ProxRows::Query(xs) => self.trees.iter().map(|t| t.leaf_of(&xs[r])).collect(),
        }
    }

    /// Trees counted for a row: `S_i` for training rows, every tree for new points.
    fn row_trees(&self, rows: ProxRows<'_>, r: usize) -> Vec<usize> {
        match rows {
            ProxRows::Train(ix) => self.oob_trees(ix[r]),
            ProxRows::Query(_) => (0..self.trees.len()).collect(),
        }
    }

    fn check_rows(&self, rows: ProxRows<'_>) -> Result<()> {
        match rows {
            ProxRows::Train(ix) => ix.iter().try_for_each(|&i| self.check_train_index(i)),
            ProxRows::Query(xs) => xs.iter().try_for_each(|x| self.check_width(x)),
        }
    }

    /// `(1/M) Σ_T I[j ∈ L_i^T] / N_i^T`, with `N_i^T` the number of training
    /// points in the leaf of row `i`.
    pub fn prox_breiman(&self, rows: ProxRows<'_>) -> Result<ProximityMatrix> {
        self.check_rows(rows)?;
        let n = self.n_train();
        let populations: Vec<Vec<Vec<u32>>> =
            self.trees.par_iter().map(Tree::leaf_population).collect();
        let inv_m = 1.0 / self.trees.len() as f64;
        let mut values = vec![0.0; rows.len() * n];
        values
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out)| {
                let leaves = self.row_leaves(rows, r);
                for (pop, &leaf) in populations.iter().zip(&leaves) {
                    let members = &pop[leaf as usize];
                    if members.is_empty() {
                        continue;
                    }
                    let w = inv_m / members.len() as f64;
                    for &j in members {
                        out[j as usize] += w;
                    }
                }
            });
        ProximityMatrix::new(
            rows.len(),
            n,
            values,
            ProximityMetric::RfBreiman,
            rows.role(),
            Role::Train,
        )
    }

    /// Out-of-bag proximity between training points `i` and `j`; 0 when
    /// the two are never out of bag together.
    pub fn prox_oob(&self, i: usize, j: usize) -> Result<f64> {
        self.check_train_index(i)?;
        self.check_train_index(j)?;
        let mut num = 0usize;
        let mut den = 0usize;
        for t in self.oob_trees(i) {
            let tree = &self.trees[t];
            if tree.is_oob(j) {
                den += 1;
                if tree.train_leaf[j] == tree.train_leaf[i] {
                    num += 1;
                }
            }
        }
        Ok(if den == 0 { 0.0 } else { num as f64 / den as f64 })
    }

    pub fn prox_oob_matrix(&self, rows: ProxRows<'_>) -> Result<ProximityMatrix> {
        self.check_rows(rows)?;
        let n = self.n_train();
        let mut values = vec![0.0; rows.len() * n];
        values
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out)| {
                let leaves = self.row_leaves(rows, r);
                let mut num = vec![0u32; n];
                let mut den = vec![0u32; n];
                for t in self.row_trees(rows, r) {
                    let tree = &self.trees[t];
                    let leaf = leaves[t];
                    for j in 0..n {
                        if tree.inbag[j] == 0 {
                            den[j] += 1;
                            if tree.train_leaf[j] == leaf {
                                num[j] += 1;
                            }
                        }
                    }
                }
                for j in 0..n {
                    out[j] = if den[j] == 0 {
                        0.0
                    } else {
                        num[j] as f64 / den[j] as f64
                    };
                }
            });
        ProximityMatrix::new(
            rows.len(),
            n,
            values,
            ProximityMetric::RfOob,
            rows.role(),
            Role::Train,
        )
    }

    /// GAP proximity: `(1/|S_i|) Σ_{t∈S_i} c_j(t) I[j ∈ J_i(t)] / |M_i(t)|`.
    /// New points count as out of bag in every tree.
    pub fn prox_gap(&self, rows: ProxRows<'_>) -> Result<ProximityMatrix> {
        self.check_rows(rows)?;
        if let ProxRows::Train(ix) = rows {
            if let Some(&i) = ix.iter().find(|&&i| self.trees.iter().all(|t| !t.is_oob(i))) {
                return Err(QcmlError::NoOobCover { index: i });
            }
        }
        let n = self.n_train();
        let mut values = vec![0.0; rows.len() * n];
        values
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out)| {
                let leaves = self.row_leaves(rows, r);
                let s_i = self.row_trees(rows, r);
                let inv = 1.0 / s_i.len() as f64;
                for t in s_i {
                    let (members, bag_size) = self.trees[t].leaf_members(leaves[t]);
                    let w = inv / bag_size as f64;
                    for &(j, c) in members {
                        out[j as usize] += c as f64 * w;
                    }
                }
            });
        ProximityMatrix::new(
            rows.len(),
            n,
            values,
            ProximityMetric::RfGap,
            rows.role(),
            Role::Train,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.magic(FOREST_MAGIC);
        enc.u32(FOREST_VERSION);
        let c = &self.config;
        enc.u64(c.n_trees as u64);
        enc.u64(c.max_depth as u64);
        enc.u64(c.min_samples_leaf as u64);
        match c.max_features {
            MaxFeatures::Sqrt => enc.u8(0),
            MaxFeatures::All => enc.u8(1),
            MaxFeatures::Fraction(f) => {
                enc.u8(2);
                enc.f64(f);
            }
        }
        enc.u8(match c.criterion {
            Criterion::Mse => 0,
            Criterion::Mae => 1,
        });
        enc.u64(c.seed);
        enc.u64(self.n_features as u64);
        enc.f64s(&self.y_train);
        for tree in &self.trees {
            enc.u32s(&tree.inbag);
            enc.u32s(&tree.train_leaf);
            enc.u64(tree.nodes.len() as u64);
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        enc.u8(0);
                        enc.u32(*feature);
                        enc.f64(*threshold);
                        enc.u32(*left);
                        enc.u32(*right);
                    }
                    Node::Leaf {
                        value,
                        members,
                        bag_size,
                    } => {
                        enc.u8(1);
                        enc.f64(*value);
                        enc.u32(*bag_size);
                        enc.u64(members.len() as u64);
                        for &(j, m) in members {
                            enc.u32(j);
                            enc.u32(m);
                        }
                    }
                }
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(FOREST_MAGIC)?;
        let version = dec.u32()?;
        if version != FOREST_VERSION {
            return Err(QcmlError::Format(format!("unsupported forest version {version}")));
        }
        let n_trees = dec.u64()? as usize;
        let max_depth = dec.u64()? as usize;
        let min_samples_leaf = dec.u64()? as usize;
        let max_features = match dec.u8()? {
            0 => MaxFeatures::Sqrt,
            1 => MaxFeatures::All,
            2 => MaxFeatures::Fraction(dec.f64()?),
            c => return Err(QcmlError::Format(format!("unknown max_features code {c}"))),
        };
        let criterion = match dec.u8()? {
            0 => Criterion::Mse,
            1 => Criterion::Mae,
            c => return Err(QcmlError::Format(format!("unknown criterion code {c}"))),
        };
        let seed = dec.u64()?;
        let n_features = dec.u64()? as usize;
        let y_train = dec.f64s()?;
        let n = y_train.len();
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let inbag = dec.u32s()?;
            let train_leaf = dec.u32s()?;
            let n_nodes = dec.len()?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(match dec.u8()? {
                    0 => Node::Split {
                        feature: dec.u32()?,
                        threshold: dec.f64()?,
                        left: dec.u32()?,
                        right: dec.u32()?,
                    },
                    1 => {
                        let value = dec.f64()?;
                        let bag_size = dec.u32()?;
                        let m = dec.len()?;
                        let members = (0..m)
                            .map(|_| Ok((dec.u32()?, dec.u32()?)))
                            .collect::<Result<Vec<_>>>()?;
                        Node::Leaf {
                            value,
                            members,
                            bag_size,
                        }
                    }
                    c => return Err(QcmlError::Format(format!("unknown node tag {c}"))),
                });
            }
            if inbag.len() != n || train_leaf.len() != n {
                return Err(QcmlError::Format("tree bookkeeping length mismatch".into()));
            }
            let valid_ref = |ix: u32| (ix as usize) < nodes.len();
            let refs_ok = nodes.iter().all(|nd| match nd {
                Node::Split { feature, left, right, .. } => {
                    (*feature as usize) < n_features && valid_ref(*left) && valid_ref(*right)
                }
                Node::Leaf { members, .. } => members.iter().all(|&(j, _)| (j as usize) < n),
            }) && train_leaf.iter().all(|&l| valid_ref(l));
            if nodes.is_empty() || !refs_ok {
                return Err(QcmlError::Format("tree has dangling references".into()));
            }
            trees.push(Tree {
                nodes,
                inbag,
                train_leaf,
            });
        }
        dec.finish()?;
        Ok(Forest {
            trees,
            config: ForestConfig {
                n_trees,
                max_depth,
                min_samples_leaf,
                max_features,
                criterion,
                seed,
            },
            n_features,
            y_train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn build_tree(config: &ForestConfig, x: &[Vec<f64>], y: &[f64], rng: &mut ChaCha8Rng) -> Tree {
    let n = x.len();
    let mut inbag = vec![0u32; n];
    let mut bag: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    for &j in &bag {
        inbag[j] += 1;
    }
    bag.sort_unstable();

    let mut builder = TreeBuilder {
        config,
        x,
        y,
        mtry: config.max_features.resolve(x[0].len()),
        nodes: Vec::new(),
    };
    builder.grow(&mut bag, 0, rng);
    let nodes = builder.nodes;
    let mut tree = Tree {
        nodes,
        inbag,
        train_leaf: Vec::new(),
    };
    tree.train_leaf = x.iter().map(|xi| tree.leaf_of(xi)).collect();
    tree
}

struct TreeBuilder<'a> {
    config: &'a ForestConfig,
    x: &'a [Vec<f64>],
    y: &'a [f64],
    mtry: usize,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

impl SplitChoice {
    /// Lower impurity wins; ties go to the lower feature index, then the lower threshold.
    fn better_than(&self, other: &SplitChoice) -> bool {
        match self.impurity.total_cmp(&other.impurity) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => {
                self.feature < other.feature
                    || (self.feature == other.feature && self.threshold < other.threshold)
            }
        }
    }
}

impl TreeBuilder<'_> {
    fn grow(&mut self, samples: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            value: 0.0,
            members: Vec::new(),
            bag_size: 0,
        });
        let y0 = self.y[samples[0]];
        let pure = samples.iter().all(|&i| self.y[i] == y0);
        let can_split = depth < self.config.max_depth
            && samples.len() >= 2 * self.config.min_samples_leaf
            && !pure;
        let choice = if can_split { self.best_split(samples, rng) } else { None };

        match choice {
            None => {
                self.nodes[id as usize] = self.leaf(samples);
            }
            Some(c) => {
                let (mut left, mut right): (Vec<usize>, Vec<usize>) =
                    samples.iter().partition(|&&i| self.x[i][c.feature] <= c.threshold);
                let l = self.grow(&mut left, depth + 1, rng);
                let r = self.grow(&mut right, depth + 1, rng);
                self.nodes[id as usize] = Node::Split {
                    feature: c.feature as u32,
                    threshold: c.threshold,
                    left: l,
                    right: r,
                };
            }
        }
        id
    }

    fn leaf(&self, samples: &[usize]) -> Node {
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let mut members: Vec<(u32, u32)> = Vec::new();
        for &i in &sorted {
            match members.last_mut() {
                Some((j, c)) if *j as usize == i => *c += 1,
                _ => members.push((i as u32, 1)),
            }
        }
        let value = samples.iter().map(|&i| self.y[i]).sum::<f64>() / samples.len() as f64;
        Node::Leaf {
            value,
            members,
            bag_size: samples.len() as u32,
        }
    }

    fn best_split(&self, samples: &[usize], rng: &mut ChaCha8Rng) -> Option<SplitChoice> {
        let n_features = self.x[0].len();
        let candidates = index::sample(rng, n_features, self.mtry);
        let mut best: Option<SplitChoice> = None;
        let mut order = samples.to_vec();
        for f in candidates.iter() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            if let Some(c) = self.best_split_on(&order, f) {
                if best.as_ref().is_none_or(|b| c.better_than(b)) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_split_on(&self, order: &[usize], f: usize) -> Option<SplitChoice> {
        let m = order.len();
        let min_leaf = self.config.min_samples_leaf;
        let ys: Vec<f64> = order.iter().map(|&i| self.y[i]).collect();
        let (left_cost, right_cost) = match self.config.criterion {
            Criterion::Mse => (prefix_sse(&ys), suffix(&ys, prefix_sse)),
            Criterion::Mae => (prefix_sad(&ys), suffix(&ys, prefix_sad)),
        };
        let mut best: Option<SplitChoice> = None;
        // split position p: left = order[..p], right = order[p..]
        for p in min_leaf.max(1)..=(m - min_leaf) {
            let a = self.x[order[p - 1]][f];
            let b = self.x[order[p]][f];
            if a >= b {
                continue;
            }
            let impurity = left_cost[p] + right_cost[p];
            let mut threshold = 0.5 * (a + b);
            if threshold >= b {
                threshold = a;
            }
            let c = SplitChoice {
                impurity,
                feature: f,
                threshold,
            };
            if best.as_ref().is_none_or(|bst| c.better_than(bst)) {
                best = Some(c);
            }
        }
        best
    }
}

/// `out[p]` = sum of squared deviations of `ys[..p]` about their mean.
fn prefix_sse(ys: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ys.len() + 1);
    out.push(0.0);
    let (mut s, mut s2) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        s += y;
        s2 += y * y;
        out.push((s2 - s * s / (i + 1) as f64).max(0.0));
    }
    out
}

/// `out[p]` = sum of absolute deviations of `ys[..p]` about their median,
/// maintained with a two-heap running median.
fn prefix_sad(ys: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ys.len() + 1);
    out.push(0.0);
    let mut lower: BinaryHeap<OrdF64> = BinaryHeap::new();
    let mut upper: BinaryHeap<Reverse<OrdF64>> = BinaryHeap::new();
    let (mut sum_lo, mut sum_hi) = (0.0, 0.0);
    for &y in ys {
        if lower.peek().is_none_or(|top| y <= top.0) {
            lower.push(OrdF64(y));
            sum_lo += y;
        } else {
            upper.push(Reverse(OrdF64(y)));
            sum_hi += y;
        }
        if lower.len() > upper.len() + 1 {
            let v = lower.pop().unwrap().0;
            sum_lo -= v;
            upper.push(Reverse(OrdF64(v)));
            sum_hi += v;
        } else if upper.len() > lower.len() {
            let v = upper.pop().unwrap().0 .0;
            sum_hi -= v;
            lower.push(OrdF64(v));
            sum_lo += v;
        }
        let med = lower.peek().unwrap().0;
        let sad = (sum_hi - med * upper.len() as f64) + (med * lower.len() as f64 - sum_lo);
        out.push(sad.max(0.0));
    }
    out
}

/// Re-indexes a prefix cost so that `out[p]` is the cost of `ys[p..]`.
fn suffix(ys: &[f64], prefix: fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let rev: Vec<f64> = ys.iter().rev().copied().collect();
    let pre = prefix(&rev);
    let m = ys.len();
    (0..=m).map(|p| pre[m - p]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_data(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = x
            .iter()
            .map(|r| 2.0 * r[0] - r[1 % k] + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    fn cfg(n_trees: usize, depth: usize) -> ForestConfig {
        ForestConfig {
            n_trees,
            max_depth: depth,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn sad_matches_brute_force() {
        let ys = [3.0, -1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let pre = prefix_sad(&ys);
        for p in 0..=ys.len() {
            let mut s = ys[..p].to_vec();
            s.sort_by(f64::total_cmp);
            let brute = if p == 0 {
                0.0
            } else {
                let med = s[(p - 1) / 2];
                s.iter().map(|v| (v - med).abs()).sum()
            };
            assert!((pre[p] - brute).abs() < 1e-12, "p={p}");
        }
        let suf = suffix(&ys, prefix_sad);
        assert_eq!(suf[ys.len()], 0.0);
        assert!((suf[0] - pre[ys.len()]).abs() < 1e-12);
    }

    #[test]
    fn single_point_forest() {
        let f = fit_forest(&cfg(5, 10), &[vec![1.0, 2.0]], &[7.5]).unwrap();
        for t in f.trees() {
            assert_eq!(t.nodes().len(), 1);
        }
        assert_eq!(f.predict(&[0.0, 0.0]).unwrap(), 7.5);
    }

    #[test]
    fn separable_binary_feature_is_exact() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { -3.0 } else { 5.0 }).collect();
        let f = fit_forest(&cfg(10, 1), &x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(f.predict(xi).unwrap(), *yi);
        }
    }

    #[test]
    fn constant_targets_give_single_leaves() {
        let (x, _) = toy_data(30, 3, 1);
        let f = fit_forest(&cfg(4, 10), &x, &vec![2.0; 30]).unwrap();
        assert!(f.trees().iter().all(|t| t.nodes().len() == 1));
    }

    #[test]
    fn bootstrap_and_leaf_invariants() {
        let (x, y) = toy_data(60, 4, 2);
        let f = fit_forest(&cfg(8, 4), &x, &y).unwrap();
        for t in f.trees() {
            assert_eq!(t.inbag().iter().sum::<u32>() as usize, 60);
            assert!(t.depth() <= 4);
            for node in t.nodes() {
                if let Node::Leaf { members, bag_size, .. } = node {
                    assert!(!members.is_empty());
                    assert_eq!(members.iter().map(|m| m.1).sum::<u32>(), *bag_size);
                }
            }
        }
    }

    #[test]
    fn parallel_fit_is_deterministic() {
        let (x, y) = toy_data(50, 3, 3);
        let a = fit_forest(&cfg(6, 6), &x, &y).unwrap();
        let b = fit_forest(&cfg(6, 6), &x, &y).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn mae_criterion_fits() {
        let (x, y) = toy_data(80, 3, 4);
        let c = ForestConfig {
            criterion: Criterion::Mae,
            ..cfg(20, 8)
        };
        let f = fit_forest(&c, &x, &y).unwrap();
        let (r2, _) = f.oob_r2();
        assert!(r2 > 0.5, "oob r2 {r2}");
    }

    #[test]
    fn two_tree_average() {
        let (x, y) = toy_data(40, 2, 5);
        let f = fit_forest(&cfg(2, 3), &x, &y).unwrap();
        let q = [0.3, -0.2];
        let a = f.trees()[0].leaf_value(f.trees()[0].leaf_of(&q));
        let b = f.trees()[1].leaf_value(f.trees()[1].leaf_of(&q));
        assert!((f.predict(&q).unwrap() - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_equals_gap_weights_at_new_points() {
        let (x, y) = toy_data(50, 3, 6);
        let f = fit_forest(&cfg(15, 6), &x, &y).unwrap();
        let (q, _) = toy_data(10, 3, 60);
        let gap = f.prox_gap(ProxRows::Query(&q)).unwrap();
        for (r, qx) in q.iter().enumerate() {
            let recon: f64 = gap.row(r).iter().zip(&y).map(|(p, y)| p * y).sum();
            assert!((recon - f.predict(qx).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn single_leaf_breiman_is_uniform() {
        let (x, _) = toy_data(7, 2, 7);
        let f = fit_forest(&cfg(3, 5), &x, &[1.0; 7]).unwrap();
        let p = f.prox_breiman(ProxRows::Train(&(0..7).collect::<Vec<_>>())).unwrap();
        assert!(p.values().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn isolated_points_give_identity_breiman() {
        // depth-unlimited trees on distinct targets isolate every training point
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let c = ForestConfig {
            max_features: MaxFeatures::All,
            ..cfg(4, 50)
        };
        let f = fit_forest(&c, &x, &y).unwrap();
        // only points routed alone in every tree are isolated; check those
        let rows: Vec<usize> = (0..6).collect();
        let p = f.prox_breiman(ProxRows::Train(&rows)).unwrap();
        for i in 0..6 {
            let alone = f.trees().iter().all(|t| {
                t.train_leaf().iter().filter(|&&l| l == t.train_leaf()[i]).count() == 1
            });
            if alone {
                assert!((p.get(i, i) - 1.0).abs() < 1e-15);
                assert!((0..6).filter(|&j| j != i).all(|j| p.get(i, j) == 0.0));
            }
        }
    }

    #[test]
    fn oob_zero_when_never_jointly_oob() {
        let (x, y) = toy_data(30, 2, 8);
        let f = fit_forest(&cfg(5, 4), &x, &y).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let joint = f.trees().iter().any(|t| t.is_oob(i) && t.is_oob(j));
                if !joint {
                    assert_eq!(f.prox_oob(i, j).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn gap_single_tree_worked_example() {
        // hand-built tree: one leaf holding bag members {0, 0} and {2}; point 1 out of bag
        let tree = Tree {
            nodes: vec![Node::Leaf {
                value: (2.0 * 1.0 + 4.0) / 3.0,
                members: vec![(0, 2), (2, 1)],
                bag_size: 3,
            }],
            inbag: vec![2, 0, 1],
            train_leaf: vec![0, 0, 0],
        };
        let f = Forest {
            trees: vec![tree],
            config: cfg(1, 1),
            n_features: 1,
            y_train: vec![1.0, 9.0, 4.0],
        };
        let p = f.prox_gap(ProxRows::Train(&[1])).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.get(0, 1), 0.0);
        assert!((p.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((f.oob_predict(1).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(f.oob_predict(0), Err(QcmlError::NoOobCover { index: 0 })));
        assert!(matches!(
            f.prox_gap(ProxRows::Train(&[0])),
            Err(QcmlError::NoOobCover { index: 0 })
        ));
    }

    #[test]
    fn forest_bytes_round_trip() {
        let (x, y) = toy_data(25, 3, 9);
        let c = ForestConfig {
            max_features: MaxFeatures::Fraction(0.5),
            criterion: Criterion::Mae,
            ..cfg(3, 5)
        };
        let f = fit_forest(&c, &x, &y).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(Forest::from_bytes(&bytes).unwrap(), f);
        assert!(Forest::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ForestConfig { n_trees: 0, ..ForestConfig::default() }.validate().is_err());
        assert!(ForestConfig { min_samples_leaf: 0, ..ForestConfig::default() }.validate().is_err());
        let hyg = ForestConfig::preset("hyg").unwrap();
        assert_eq!((hyg.n_trees, hyg.max_depth, hyg.min_samples_leaf), (1000, 50, 1));
        assert_eq!(hyg.criterion, Criterion::Mae);
        assert_eq!(ForestConfig::igsb().n_trees, 200);
    }
}
