//! Softmax multiclass gradient boosting: per round, one regression tree per
//! class is fit to the cross-entropy residuals. Plain first-order boosting,
//! no Hessian weighting or column sampling.

use super::LabeledFeatures;
use crate::dataio::{EmotionLabel, NUM_CLASSES};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy)]
pub struct GbtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            rounds: 200,
            learning_rate: 0.1,
            max_depth: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RegNode {
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegTree {
    pub nodes: Vec<RegNode>,
}

impl RegTree {
    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x[*feature] <= *threshold { *left } else { *right },
                RegNode::Leaf { value } => return *value,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    /// Initial raw score per class: log of the class prior.
    pub base_scores: [f64; NUM_CLASSES],
    /// trees[round][class]
    pub trees: Vec<Vec<RegTree>>,
    pub learning_rate: f64,
    /// Training cross-entropy after each round (diagnostic).
    pub train_ce: Vec<f64>,
}

impl GbtModel {
    pub fn raw_scores(&self, x: &[f32]) -> [f64; NUM_CLASSES] {
        let mut f = self.base_scores;
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                f[c] += self.learning_rate * tree.predict(x);
            }
        }
        f
    }

    pub fn class_probs(&self, x: &[f32]) -> [f64; NUM_CLASSES] {
        softmax(&self.raw_scores(x))
    }

    pub fn predict(&self, x: &[f32]) -> EmotionLabel {
        let p = self.class_probs(x);
        let mut best = 0usize;
        for c in 1..NUM_CLASSES {
            if p[c] > p[best] {
                best = c;
            }
        }
        EmotionLabel::from_index(best).expect("class in range")
    }
}

fn softmax(f: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for c in 0..NUM_CLASSES {
        e[c] = (f[c] - m).exp();
        sum += e[c];
    }
    for v in e.iter_mut() {
        *v /= sum;
    }
    e
}

/// Presorted feature orders: for each feature, sample indices sorted by value.
struct Presorted {
    order: Vec<Vec<u32>>,
}

impl Presorted {
    fn build(data: &LabeledFeatures) -> Presorted {
        let order: Vec<Vec<u32>> = (0..data.d)
            .into_par_iter()
            .map(|f| {
                let mut idx: Vec<u32> = (0..data.n as u32).collect();
                idx.sort_by(|&a, &b| {
                    data.row(a as usize)[f]
                        .partial_cmp(&data.row(b as usize)[f])
                        .expect("no NaN features")
                });
                idx
            })
            .collect();
        Presorted { order }
    }
}

struct LevelSplit {
    feature: usize,
    threshold: f32,
    gain: f64,
}

/// Grows one depth-limited regression tree on `residuals` with exact
/// variance-reduction splits, scanning presorted feature orders level-wise.
fn grow_reg_tree(
    data: &LabeledFeatures,
    presorted: &Presorted,
    residuals: &[f64],
    max_depth: usize,
) -> RegTree {
    // node assignment per sample; u32::MAX = inactive (none here: all start at root)
    let mut assignment: Vec<u32> = vec![0; data.n];
    let mut nodes: Vec<RegNode> = Vec::new();

    // Stats for the root.
    let total_sum: f64 = residuals.iter().sum();
    nodes.push(RegNode::Leaf {
        value: total_sum / data.n as f64,
    });
    let mut level_nodes: Vec<usize> = vec![0];
    let mut node_sum = vec![total_sum];
    let mut node_count = vec![data.n];

    for _depth in 0..max_depth {
        if level_nodes.is_empty() {
            break;
        }
        // node id -> dense slot in this level
        let slot_of: std::collections::HashMap<usize, usize> =
            level_nodes.iter().enumerate().map(|(s, &nid)| (nid, s)).collect();
        let n_slots = level_nodes.len();

        // For each feature (parallel), find the best split per slot.
        let per_feature: Vec<Vec<Option<LevelSplit>>> = (0..data.d)
            .into_par_iter()
            .map(|f| {
                let mut best: Vec<Option<LevelSplit>> = (0..n_slots).map(|_| None).collect();
                let mut run_sum = vec![0.0f64; n_slots];
                let mut run_count = vec![0usize; n_slots];
                let mut prev_value = vec![f32::NAN; n_slots];
                for &i in &presorted.order[f] {
                    let i = i as usize;
                    let nid = assignment[i] as usize;
                    let Some(&slot) = slot_of.get(&nid) else { continue };
                    let value = data.row(i)[f];
                    // Boundary between distinct values: evaluate the split
                    // accumulated so far.
                    if run_count[slot] > 0 && value != prev_value[slot] {
                        let nl = run_count[slot] as f64;
                        let nr = (node_count[slot] - run_count[slot]) as f64;
                        if nr > 0.0 {
                            let sl = run_sum[slot];
                            let sr = node_sum[slot] - sl;
                            // Variance-reduction gain (constant terms dropped).
                            let gain = sl * sl / nl + sr * sr / nr;
                            let threshold = (prev_value[slot] + value) / 2.0;
                            let better = match &best[slot] {
                                None => true,
                                Some(b) => gain > b.gain + 1e-12,
                            };
                            if better {
                                best[slot] = Some(LevelSplit {
                                    feature: f,
                                    threshold,
                                    gain,
                                });
                            }
                        }
                    }
                    run_sum[slot] += residuals[i];
                    run_count[slot] += 1;
                    prev_value[slot] = value;
                }
                best
            })
            .collect();

        // Reduce across features: lowest feature index wins ties (features
        // are scanned in ascending order, so `>` keeps the earlier one).
        let mut best_per_slot: Vec<Option<LevelSplit>> = (0..n_slots).map(|_| None).collect();
        for feature_best in per_feature {
            for (slot, cand) in feature_best.into_iter().enumerate() {
                if let Some(c) = cand {
                    let better = match &best_per_slot[slot] {
                        None => true,
                        Some(b) => c.gain > b.gain + 1e-12,
                    };
                    if better {
                        best_per_slot[slot] = Some(c);
                    }
                }
            }
        }

        // Materialize splits and reassign samples.
        let mut next_level = Vec::new();
        let mut next_sum = Vec::new();
        let mut next_count = Vec::new();
        let mut split_info: Vec<Option<(usize, f32, usize, usize)>> = vec![None; n_slots];
        for (slot, cand) in best_per_slot.into_iter().enumerate() {
            let nid = level_nodes[slot];
            let Some(c) = cand else { continue };
            // Gain must strictly beat the unsplit node's score.
            let unsplit = node_sum[slot] * node_sum[slot] / node_count[slot] as f64;
            if c.gain <= unsplit + 1e-12 {
                continue;
            }
            let left = nodes.len();
            nodes.push(RegNode::Leaf { value: 0.0 });
            let right = nodes.len();
            nodes.push(RegNode::Leaf { value: 0.0 });
            nodes[nid] = RegNode::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right,
            };
            split_info[slot] = Some((c.feature, c.threshold, left, right));
            next_level.push(left);
            next_level.push(right);
            next_sum.push(0.0);
            next_sum.push(0.0);
            next_count.push(0);
            next_count.push(0);
        }
        if next_level.is_empty() {
            break;
        }
        let next_slot_of: std::collections::HashMap<usize, usize> =
            next_level.iter().enumerate().map(|(s, &nid)| (nid, s)).collect();
        for i in 0..data.n {
            let nid = assignment[i] as usize;
            let Some(&slot) = slot_of.get(&nid) else { continue };
            if let Some((f, thr, left, right)) = split_info[slot] {
                let child = if data.row(i)[f] <= thr { left } else { right };
                assignment[i] = child as u32;
                let cs = next_slot_of[&child];
                next_sum[cs] += residuals[i];
                next_count[cs] += 1;
            }
        }
        // Set child leaf values (overwritten if they split next level).
        for (s, &nid) in next_level.iter().enumerate() {
            if let RegNode::Leaf { value } = &mut nodes[nid] {
                *value = if next_count[s] > 0 {
                    next_sum[s] / next_count[s] as f64
                } else {
                    0.0
                };
            }
        }
        level_nodes = next_level;
        node_sum = next_sum;
        node_count = next_count;
    }

    RegTree { nodes }
}

/// Softmax gradient boosting: `rounds` rounds of per-class regression trees
/// fit to cross-entropy residuals (y − p), starting from log-prior scores.
pub fn gbt_train(data: &LabeledFeatures, params: GbtParams) -> Result<GbtModel> {
    if data.n < 2 {
        return Err(Error::Data(format!("gbt_train needs >= 2 samples, got {}", data.n)));
    }
    let counts = data.class_counts();
    let mut base_scores = [0.0f64; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let prior = (counts[c] as f64 / data.n as f64).max(1e-12);
        base_scores[c] = prior.ln();
    }

    let presorted = Presorted::build(data);
    let mut scores: Vec<[f64; NUM_CLASSES]> = vec![base_scores; data.n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut train_ce = Vec::with_capacity(params.rounds);

    for _round in 0..params.rounds {
        // Residuals y − p for every class.
        let probs: Vec<[f64; NUM_CLASSES]> = scores.iter().map(softmax).collect();
        let mut round_trees = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            let residuals: Vec<f64> = (0..data.n)
                .map(|i| {
                    let y = if data.labels[i].index() == c { 1.0 } else { 0.0 };
                    y - probs[i][c]
                })
                .collect();
            let tree = grow_reg_tree(data, &presorted, &residuals, params.max_depth);
            for i in 0..data.n {
                scores[i][c] += params.learning_rate * tree.predict(data.row(i));
            }
            round_trees.push(tree);
        }
        trees.push(round_trees);

        let ce: f64 = (0..data.n)
            .map(|i| {
                let p = softmax(&scores[i]);
                -(p[data.labels[i].index()].max(1e-300)).ln()
            })
            .sum::<f64>()
            / data.n as f64;
        train_ce.push(ce);
    }

    Ok(GbtModel {
        base_scores,
        trees,
        learning_rate: params.learning_rate,
        train_ce,
    })
}
