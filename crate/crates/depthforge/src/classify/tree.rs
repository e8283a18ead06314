//! CART decision trees (Gini impurity, midpoint thresholds) and the
//! bootstrap-bagged random forest built on them.

use super::LabeledFeatures;
use crate::dataio::{EmotionLabel, NUM_CLASSES};
use crate::{derive_seed, Error, Result};
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Class distribution, sums to 1.
        distribution: [f64; NUM_CLASSES],
        n: usize,
        gini: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl TreeModel {
    pub fn predict(&self, x: &[f32]) -> EmotionLabel {
        let dist = self.predict_dist(x);
        argmax_class(&dist)
    }

    pub fn predict_dist(&self, x: &[f32]) -> [f64; NUM_CLASSES] {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { distribution, .. } => return *distribution,
            }
        }
    }

    /// (leaf gini, parent gini) pairs for every leaf below a split node.
    pub fn leaf_parent_ginis(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        // Recompute parent impurity from its children (leaf info carries n and gini).
        fn node_stats(nodes: &[TreeNode], idx: usize) -> ([f64; NUM_CLASSES], usize) {
            match &nodes[idx] {
                TreeNode::Leaf { distribution, n, .. } => {
                    let mut counts = [0.0; NUM_CLASSES];
                    for (c, d) in counts.iter_mut().zip(distribution.iter()) {
                        *c = d * *n as f64;
                    }
                    (counts, *n)
                }
                TreeNode::Split { left, right, .. } => {
                    let (lc, ln) = node_stats(nodes, *left);
                    let (rc, rn) = node_stats(nodes, *right);
                    let mut counts = [0.0; NUM_CLASSES];
                    for i in 0..NUM_CLASSES {
                        counts[i] = lc[i] + rc[i];
                    }
                    (counts, ln + rn)
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let TreeNode::Split { left, right, .. } = node {
                let (counts, n) = node_stats(&self.nodes, idx);
                let parent_gini = gini_from_counts(&counts, n as f64);
                for child in [*left, *right] {
                    if let TreeNode::Leaf { gini, .. } = &self.nodes[child] {
                        out.push((*gini, parent_gini));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DtParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for DtParams {
    fn default() -> Self {
        DtParams {
            max_depth: 12,
            min_leaf: 2,
        }
    }
}

fn argmax_class(dist: &[f64; NUM_CLASSES]) -> EmotionLabel {
    let mut best = 0usize;
    for c in 1..NUM_CLASSES {
        if dist[c] > dist[best] {
            best = c;
        }
    }
    EmotionLabel::from_index(best).expect("class in range")
}

fn gini_from_counts(counts: &[f64; NUM_CLASSES], n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let mut acc = 1.0;
    for &c in counts {
        let p = c / n;
        acc -= p * p;
    }
    acc
}

struct BestSplit {
    feature: usize,
    threshold: f32,
    weighted_gini: f64,
}

/// Exhaustive Gini split search over `candidates` for the samples in `idx`.
/// Thresholds are midpoints between consecutive distinct values; ties are
/// broken by lowest feature index, then lowest threshold.
fn best_split(
    data: &LabeledFeatures,
    idx: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let n = idx.len() as f64;
    let mut best: Option<BestSplit> = None;
    let mut sortable: Vec<(f32, usize)> = Vec::with_capacity(idx.len());
    for &f in candidates {
        sortable.clear();
        for &i in idx {
            sortable.push((data.row(i)[f], data.labels[i].index()));
        }
        sortable.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN features"));

        let mut total = [0.0f64; NUM_CLASSES];
        for &(_, l) in sortable.iter() {
            total[l] += 1.0;
        }
        let mut left = [0.0f64; NUM_CLASSES];
        let mut n_left = 0.0f64;
        for w in 0..sortable.len() - 1 {
            left[sortable[w].1] += 1.0;
            n_left += 1.0;
            if sortable[w].0 == sortable[w + 1].0 {
                continue;
            }
            let n_right = n - n_left;
            if (n_left as usize) < min_leaf || (n_right as usize) < min_leaf {
                continue;
            }
            let mut right = [0.0f64; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                right[c] = total[c] - left[c];
            }
            let weighted = (n_left * gini_from_counts(&left, n_left)
                + n_right * gini_from_counts(&right, n_right))
                / n;
            let better = match &best {
                None => true,
                Some(b) => weighted < b.weighted_gini - 1e-12,
            };
            if better {
                let threshold = (sortable[w].0 + sortable[w + 1].0) / 2.0;
                best = Some(BestSplit {
                    feature: f,
                    threshold,
                    weighted_gini: weighted,
                });
            }
        }
    }
    best
}

fn grow(
    data: &LabeledFeatures,
    idx: Vec<usize>,
    depth: usize,
    params: &DtParams,
    mtry: Option<usize>,
    rng: &mut Option<StdRng>,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let n = idx.len();
    let mut counts = [0.0f64; NUM_CLASSES];
    for &i in &idx {
        counts[data.labels[i].index()] += 1.0;
    }
    let impurity = gini_from_counts(&counts, n as f64);

    let make_leaf = |nodes: &mut Vec<TreeNode>| {
        let mut distribution = [0.0f64; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            distribution[c] = counts[c] / n as f64;
        }
        nodes.push(TreeNode::Leaf {
            distribution,
            n,
            gini: impurity,
        });
        nodes.len() - 1
    };

    if depth >= params.max_depth || impurity == 0.0 || n < 2 * params.min_leaf {
        return make_leaf(nodes);
    }

    // Candidate features: all of them, or a per-split random subset.
    let candidates: Vec<usize> = match (mtry, rng.as_mut()) {
        (Some(m), Some(r)) if m < data.d => {
            let mut all: Vec<usize> = (0..data.d).collect();
            // partial Fisher–Yates for the first m entries
            for i in 0..m {
                let j = r.gen_range(i..all.len());
                all.swap(i, j);
            }
            let mut chosen = all[..m].to_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..data.d).collect(),
    };

    let split = match best_split(data, &idx, &candidates, params.min_leaf) {
        Some(s) if s.weighted_gini < impurity - 1e-12 => s,
        _ => return make_leaf(nodes),
    };

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| data.row(i)[split.feature] <= split.threshold);

    let placeholder = nodes.len();
    nodes.push(TreeNode::Leaf {
        distribution: [0.0; NUM_CLASSES],
        n: 0,
        gini: 0.0,
    });
    let left = grow(data, left_idx, depth + 1, params, mtry, rng, nodes);
    let right = grow(data, right_idx, depth + 1, params, mtry, rng, nodes);
    nodes[placeholder] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    placeholder
}

/// CART with Gini impurity over all features.
pub fn dt_train(data: &LabeledFeatures, params: DtParams) -> Result<TreeModel> {
    if data.n < params.min_leaf.max(1) {
        return Err(Error::Data(format!(
            "dt_train needs at least {} samples, got {}",
            params.min_leaf.max(1),
            data.n
        )));
    }
    let mut nodes = Vec::new();
    let idx: Vec<usize> = (0..data.n).collect();
    grow(data, idx, 0, &params, None, &mut None, &mut nodes);
    Ok(TreeModel {
        nodes,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RfParams {
    pub n_trees: usize,
    /// Features per split; defaults to floor(sqrt(d)).
    pub mtry: Option<usize>,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams {
            n_trees: 100,
            mtry: None,
            max_depth: 12,
            min_leaf: 2,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub seed: u64,
}

impl ForestModel {
    /// Majority vote over trees; ties go to the lowest class index.
    pub fn predict(&self, x: &[f32]) -> EmotionLabel {
        let mut votes = [0usize; NUM_CLASSES];
        for t in &self.trees {
            votes[t.predict(x).index()] += 1;
        }
        let mut best = 0usize;
        for c in 1..NUM_CLASSES {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        EmotionLabel::from_index(best).expect("class in range")
    }
}

/// Bootstrap-bagged CART trees with per-split feature subsampling, one seeded
/// RNG stream per tree.
pub fn rf_train(data: &LabeledFeatures, params: RfParams) -> Result<ForestModel> {
    if data.n < 2 {
        return Err(Error::Data(format!("rf_train needs >= 2 samples, got {}", data.n)));
    }
    let mtry = params
        .mtry
        .unwrap_or_else(|| (data.d as f64).sqrt().floor().max(1.0) as usize);
    let dt = DtParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    };
    let trees: Vec<TreeModel> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = StdRng::seed_from_u64(derive_seed(params.seed, 0x7F00 + t as u64));
            let idx: Vec<usize> = if params.bootstrap {
                (0..data.n).map(|_| rng.gen_range(0..data.n)).collect()
            } else {
                (0..data.n).collect()
            };
            let mut nodes = Vec::new();
            let mut tree_rng = Some(rng);
            grow(data, idx, 0, &dt, Some(mtry), &mut tree_rng, &mut nodes);
            TreeModel {
                nodes,
                max_depth: dt.max_depth,
                min_leaf: dt.min_leaf,
            }
        })
        .collect();
    Ok(ForestModel {
        trees,
        seed: params.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(i: usize) -> EmotionLabel {
        EmotionLabel::from_index(i).unwrap()
    }

    fn sign_dataset() -> LabeledFeatures {
        let values: Vec<f32> = vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let labels = vec![lab(0), lab(0), lab(0), lab(1), lab(1), lab(1)];
        LabeledFeatures::new(values, 1, labels).unwrap()
    }

    #[test]
    fn sign_data_gets_depth_one_tree() {
        let data = sign_dataset();
        let model = dt_train(&data, DtParams::default()).unwrap();
        // root split + two leaves
        assert_eq!(model.nodes.len(), 3);
        for i in 0..data.n {
            assert_eq!(model.predict(data.row(i)), data.labels[i]);
        }
    }

    #[test]
    fn pure_labels_single_leaf() {
        let values: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0];
        let labels = vec![lab(2); 4];
        let data = LabeledFeatures::new(values, 1, labels).unwrap();
        let model = dt_train(&data, DtParams::default()).unwrap();
        assert_eq!(model.nodes.len(), 1);
        match &model.nodes[0] {
            TreeNode::Leaf { gini, distribution, .. } => {
                assert_eq!(*gini, 0.0);
                assert!((distribution[2] - 1.0).abs() < 1e-12);
            }
            _ => panic!("expected single leaf"),
        }
    }

    #[test]
    fn six_point_split_matches_brute_force() {
        // 2 features; only feature 1 separates cleanly.
        let rows = [
            ([1.0f32, 0.1], 0),
            ([2.0, 0.2], 0),
            ([1.5, 0.3], 0),
            ([1.2, 0.8], 1),
            ([2.2, 0.9], 1),
            ([1.8, 0.7], 1),
        ];
        let values: Vec<f32> = rows.iter().flat_map(|(r, _)| r.to_vec()).collect();
        let labels: Vec<EmotionLabel> = rows.iter().map(|&(_, l)| lab(l)).collect();
        let data = LabeledFeatures::new(values, 2, labels).unwrap();

        // Brute force: every feature, every midpoint threshold.
        let mut best = (f64::INFINITY, 0usize, 0.0f32);
        for f in 0..2 {
            let mut vals: Vec<(f32, usize)> =
                (0..6).map(|i| (data.row(i)[f], data.labels[i].index())).collect();
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in 0..5 {
                if vals[w].0 == vals[w + 1].0 {
                    continue;
                }
                let thr = (vals[w].0 + vals[w + 1].0) / 2.0;
                let mut lc = [0.0f64; NUM_CLASSES];
                let mut rc = [0.0f64; NUM_CLASSES];
                let mut nl = 0.0;
                let mut nr = 0.0;
                for i in 0..6 {
                    if data.row(i)[f] <= thr {
                        lc[data.labels[i].index()] += 1.0;
                        nl += 1.0;
                    } else {
                        rc[data.labels[i].index()] += 1.0;
                        nr += 1.0;
                    }
                }
                let weighted =
                    (nl * gini_from_counts(&lc, nl) + nr * gini_from_counts(&rc, nr)) / 6.0;
                if weighted < best.0 - 1e-12 {
                    best = (weighted, f, thr);
                }
            }
        }

        let model = dt_train(
            &data,
            DtParams {
                max_depth: 1,
                min_leaf: 1,
            },
        )
        .unwrap();
        match &model.nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, best.1);
                assert!((threshold - best.2).abs() < 1e-6);
            }
            _ => panic!("expected a split at the root"),
        }
    }

    #[test]
    fn degenerate_forest_equals_single_tree() {
        let data = sign_dataset();
        let forest = rf_train(
            &data,
            RfParams {
                n_trees: 1,
                mtry: Some(1),
                bootstrap: false,
                ..Default::default()
            },
        )
        .unwrap();
        let tree = dt_train(&data, DtParams::default()).unwrap();
        for i in 0..data.n {
            assert_eq!(forest.predict(data.row(i)), tree.predict(data.row(i)));
        }
    }

    #[test]
    fn forest_deterministic_per_seed() {
        let data = sign_dataset();
        let params = RfParams {
            n_trees: 7,
            seed: 9,
            ..Default::default()
        };
        let f1 = rf_train(&data, params).unwrap();
        let f2 = rf_train(&data, params).unwrap();
        let s1 = serde_json::to_string(&f1).unwrap();
        let s2 = serde_json::to_string(&f2).unwrap();
        assert_eq!(s1, s2);
    }
}
