//! Bagged CART trees with Gini impurity.
//!
//! Bootstrap weights are Poisson(1) draws keyed by a hash of the row's label and
//! per-feature ranks, so the fitted forest depends only on the multiset of
//! training rows and on the ordering of each feature. Row permutations and
//! strictly increasing per-feature transforms therefore leave predictions
//! unchanged.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { counts: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Class index voted by this tree. Ties go to the lowest class index.
    pub fn vote(&self, x: ArrayView1<f64>) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { counts } => {
                    let mut best = 0;
                    for (c, &n) in counts.iter().enumerate() {
                        if n > counts[best] {
                            best = c;
                        }
                    }
                    return best;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
}

impl Forest {
    pub fn predict_proba_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut p = vec![0.0; self.n_classes];
        for t in &self.trees {
            p[t.vote(x)] += 1.0;
        }
        let n = self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        p
    }
}

pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn poisson1(h: u64) -> u32 {
    let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let mut k = 0u32;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    while u > cdf && k < 20 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}

/// Per-row keys built from the label and the dense rank of every feature value.
fn row_keys(x: ArrayView2<f64>, y: &[usize]) -> Vec<u64> {
    let (n, d) = x.dim();
    let mut keys: Vec<u64> = y.iter().map(|&c| mix(c as u64 ^ 0xA5A5)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for f in 0..d {
        let col = x.column(f);
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
        let mut rank = 0u64;
        for (pos, &i) in order.iter().enumerate() {
            if pos > 0 && col[i] != col[order[pos - 1]] {
                rank += 1;
            }
            keys[i] = mix(keys[i] ^ rank.wrapping_mul(0x100_0000_01B3) ^ (f as u64) << 40);
        }
    }
    keys
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    w: Vec<u32>,
    n_classes: usize,
    mtry: usize,
    max_depth: Option<usize>,
    seed: u64,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.y[i]] += self.w[i];
        }
        c
    }

    fn best_split(&self, idx: &[usize], node_id: u64) -> Option<(usize, f64, f64)> {
        let d = self.x.ncols();
        let k = self.n_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(node_id)));
        let feats = sample(&mut rng, d, self.mtry.min(d));
        let total: Vec<u64> = self.counts(idx).iter().map(|&v| v as u64).collect();
        let w_total: u64 = total.iter().sum();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut vals: Vec<(f64, u32, u32)> = Vec::with_capacity(idx.len());
        let mut left = vec![0u64; k];
        for f in feats.iter() {
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.x[[i, f]], self.y[i] as u32, self.w[i])));
            vals.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|v| *v = 0);
            let mut w_left = 0u64;
            for p in 0..vals.len() - 1 {
                let (a, c, w) = vals[p];
                left[c as usize] += w as u64;
                w_left += w as u64;
                if a == vals[p + 1].0 {
                    continue;
                }
                // Sum of squared class counts over each side's total; larger is purer.
                let w_right = w_total - w_left;
                let (mut sl, mut sr) = (0u64, 0u64);
                for (t, l) in total.iter().zip(&left) {
                    sl += l * l;
                    sr += (t - l) * (t - l);
                }
                let score = sl as f64 / w_left as f64 + sr as f64 / w_right as f64;
                if best.is_none_or(|(_, _, s)| score > s) {
                    best = Some((f, a, score));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, node_id: u64) -> usize {
        let counts = self.counts(&idx);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: counts.clone() });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || self.max_depth.is_some_and(|m| depth >= m) {
            return me;
        }
        let Some((feature, threshold, _)) = self.best_split(&idx, node_id) else {
            return me;
        };
        let col = self.x.column(feature);
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= threshold);
        let left = self.grow(l, depth + 1, mix(node_id.wrapping_mul(2)));
        let right = self.grow(r, depth + 1, mix(node_id.wrapping_mul(2) + 1));
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
}

pub fn fit(
    x: ArrayView2<f64>,
    y: &[usize],
    n_classes: usize,
    n_estimators: usize,
    max_depth: Option<usize>,
    seed: u64,
) -> Forest {
    let d = x.ncols();
    let mtry = ((d as f64).sqrt().floor() as usize).max(1);
    let keys = row_keys(x, y);
    let trees = (0..n_estimators)
        .into_par_iter()
        .map(|t| {
            let tree_seed = mix(seed ^ mix(t as u64 + 1));
            let w: Vec<u32> = keys.iter().map(|&k| poisson1(mix(k ^ tree_seed))).collect();
            let idx: Vec<usize> = (0..y.len()).filter(|&i| w[i] > 0).collect();
            let mut b = Builder { x, y, w, n_classes, mtry, max_depth, seed: tree_seed, nodes: Vec::new() };
            if idx.is_empty() {
                // Degenerate bootstrap: fall back to unit weights.
                b.w = vec![1; y.len()];
                b.grow((0..y.len()).collect(), 0, 1);
            } else {
                b.grow(idx, 0, 1);
            }
            Tree { nodes: b.nodes }
        })
        .collect();
    Forest { trees, n_classes }
}
