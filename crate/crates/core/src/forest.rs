//! Random-forest push-feasibility classifier.
//!
//! Text format: a `forest <trees> <features>` header, then per tree a
//! `tree <nodes>` line followed by its nodes in preorder, each either
//! `split <feature> <threshold>` or `leaf <class>`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{ArenaConfig, ArenaError, EnvKind, StateVector};
use crate::trainer::{rollout, Controller};

pub const FEATURES: usize = StateVector::LEN;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("dataset needs at least two samples, got {0}")]
    TooSmall(usize),
    #[error("malformed forest text at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub state: [f64; FEATURES],
    pub label: u8,
}

/// Every state of a successful trajectory gets label 1, of a failed one 0.
pub fn label_trajectories<'a, I>(rollouts: I) -> Vec<LabeledSample>
where
    I: IntoIterator<Item = (&'a [StateVector], bool)>,
{
    rollouts
        .into_iter()
        .flat_map(|(states, success)| {
            states.iter().map(move |s| LabeledSample {
                state: s.0,
                label: u8::from(success),
            })
        })
        .collect()
}

/// Rolls `controller` out over flat, slope and hole arenas in turn until
/// at least `min_samples` labeled states are gathered.
pub fn collect_samples(
    controller: &Controller,
    min_samples: usize,
    config: &ArenaConfig,
    seed: u64,
) -> Result<Vec<LabeledSample>, ArenaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(min_samples);
    let mut i = 0;
    while out.len() < min_samples {
        let r = rollout(
            controller,
            EnvKind::ALL[i % EnvKind::ALL.len()],
            config,
            &mut rng,
        )?;
        out.extend(label_trajectories([(r.states.as_slice(), r.success)]));
        i += 1;
    }
    Ok(out)
}

/// Columns `s0`..`s9`, then `label`.
pub fn write_dataset_csv<W: std::io::Write>(samples: &[LabeledSample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..FEATURES).map(|i| format!("s{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.state.iter().map(|v| v.to_string()).collect();
        rec.push(s.label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: std::io::Read>(input: R) -> Result<Vec<LabeledSample>, ForestError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ForestError::Dataset(e.to_string()))?;
        let bad = |what: &str| ForestError::Dataset(format!("row {}: {what}", i + 1));
        if rec.len() != FEATURES + 1 {
            return Err(bad("expected 11 columns"));
        }
        let mut state = [0.0; FEATURES];
        for (slot, field) in state.iter_mut().zip(rec.iter()) {
            *slot = field.parse().map_err(|_| bad("non-numeric feature"))?;
        }
        let label = match &rec[FEATURES] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("label must be 0 or 1")),
        };
        out.push(LabeledSample { state, label });
    }
    Ok(out)
}

/// Shuffles with `seed` and splits off the trailing `fraction` as a
/// held-out set.
pub fn holdout_split(
    samples: &[LabeledSample],
    fraction: f64,
    seed: u64,
) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    use rand::seq::SliceRandom;
    let mut all = samples.to_vec();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((1.0 - fraction.clamp(0.0, 1.0)) * all.len() as f64).round() as usize;
    let test = all.split_off(keep);
    (all, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Features examined per split.
    pub features_per_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 10,
            features_per_split: (FEATURES as f64).sqrt().ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64 },
    Leaf { class: u8 },
}

/// A tree stored in preorder; a split's left child follows it directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> u8 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { class } => return class,
                TreeNode::Split { feature, threshold } => {
                    i = if x[feature] <= threshold {
                        i + 1
                    } else {
                        self.skip(i + 1)
                    };
                }
            }
        }
    }

    /// Index just past the subtree rooted at `i`.
    fn skip(&self, mut i: usize) -> usize {
        let mut pending = 1usize;
        while pending > 0 {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => pending -= 1,
                TreeNode::Split { .. } => pending += 1,
            }
            i += 1;
        }
        i
    }

    /// Number of splits on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> (usize, usize) {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => (0, i + 1),
                TreeNode::Split { .. } => {
                    let (l, next) = walk(t, i + 1);
                    let (r, end) = walk(t, next);
                    (1 + l.max(r), end)
                }
            }
        }
        walk(self, 0).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: u8,
    /// Fraction of trees voting 1.
    pub votes: f64,
}

fn majority(ones: usize, total: usize) -> u8 {
    u8::from(2 * ones > total)
}

fn gini(ones: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = ones as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    data: &'a [LabeledSample],
    config: ForestConfig,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) {
        let ones = idx.iter().filter(|&&i| self.data[i].label == 1).count();
        let n = idx.len();
        if ones == 0 || ones == n || depth >= self.config.max_depth || n < 2 {
            self.nodes.push(TreeNode::Leaf {
                class: majority(ones, n),
            });
            return;
        }
        // Examine a random feature subset, continuing past it only while no
        // feature has produced a valid partition.
        let mut features: Vec<usize> = (0..FEATURES).collect();
        for k in 0..FEATURES {
            let j = rng.gen_range(k..FEATURES);
            features.swap(k, j);
        }
        let wanted = self.config.features_per_split.min(FEATURES);
        let mut best: Option<(f64, usize, f64)> = None;
        for (examined, &f) in features.iter().enumerate() {
            if examined >= wanted && best.is_some() {
                break;
            }
            idx.sort_unstable_by(|&a, &b| self.data[a].state[f].total_cmp(&self.data[b].state[f]));
            let mut left_ones = 0;
            for k in 1..n {
                left_ones += usize::from(self.data[idx[k - 1]].label);
                let lo = self.data[idx[k - 1]].state[f];
                let hi = self.data[idx[k]].state[f];
                if lo == hi {
                    continue;
                }
                let score = (k as f64 * gini(left_ones, k)
                    + (n - k) as f64 * gini(ones - left_ones, n - k))
                    / n as f64;
                let threshold = lo + (hi - lo) / 2.0;
                let better = match best {
                    None => true,
                    Some((s, bf, _)) => score < s - 1e-15 || (score <= s + 1e-15 && f < bf),
                };
                if better {
                    best = Some((score, f, threshold));
                }
            }
        }
        match best {
            Some((_, feature, threshold)) => {
                self.nodes.push(TreeNode::Split { feature, threshold });
                idx.sort_unstable_by(|&a, &b| {
                    let va = self.data[a].state[feature];
                    let vb = self.data[b].state[feature];
                    va.total_cmp(&vb).then(a.cmp(&b))
                });
                let split = idx.partition_point(|&i| self.data[i].state[feature] <= threshold);
                let (left, right) = idx.split_at_mut(split);
                self.grow(left, depth + 1, rng);
                self.grow(right, depth + 1, rng);
            }
            None => self.nodes.push(TreeNode::Leaf {
                class: majority(ones, n),
            }),
        }
    }
}

fn canonical_order(a: &LabeledSample, b: &LabeledSample) -> Ordering {
    a.state
        .iter()
        .zip(&b.state)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
        .then(a.label.cmp(&b.label))
}

impl ForestModel {
    /// Fits on a canonically sorted copy of the data, so the model depends
    /// only on the multiset of samples and the seed.
    pub fn fit(
        dataset: &[LabeledSample],
        config: ForestConfig,
        seed: u64,
    ) -> Result<Self, ForestError> {
        if dataset.len() < 2 {
            return Err(ForestError::TooSmall(dataset.len()));
        }
        if config.trees == 0 || config.features_per_split == 0 {
            return Err(ForestError::Config(
                "trees and features per split must be positive".into(),
            ));
        }
        let ones = dataset.iter().filter(|s| s.label == 1).count();
        if ones == 0 || ones == dataset.len() {
            let class = u8::from(ones > 0);
            log::warn!("single-class dataset; fitting a constant model predicting {class}");
            let tree = Tree {
                nodes: vec![TreeNode::Leaf { class }],
            };
            return Ok(Self {
                trees: vec![tree; config.trees],
            });
        }
        let mut data = dataset.to_vec();
        data.sort_by(canonical_order);
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut idx: Vec<usize> = (0..data.len())
                    .map(|_| rng.gen_range(0..data.len()))
                    .collect();
                let mut b = Builder {
                    data: &data,
                    config,
                    nodes: Vec::new(),
                };
                b.grow(&mut idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    /// Majority vote; a tie predicts 0.
    pub fn predict(&self, state: &[f64]) -> Prediction {
        let ones = self.trees.iter().filter(|t| t.predict(state) == 1).count();
        let total = self.trees.len();
        Prediction {
            class: majority(ones, total),
            votes: if total == 0 {
                0.0
            } else {
                ones as f64 / total as f64
            },
        }
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict(&s.state).class == s.label)
            .count();
        hits as f64 / samples.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("forest {} {}\n", self.trees.len(), FEATURES);
        for t in &self.trees {
            let _ = writeln!(out, "tree {}", t.nodes.len());
            for n in &t.nodes {
                match n {
                    TreeNode::Split { feature, threshold } => {
                        let _ = writeln!(out, "split {feature} {threshold:?}");
                    }
                    TreeNode::Leaf { class } => {
                        let _ = writeln!(out, "leaf {class}");
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ForestError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, reason: &str| ForestError::Parse {
            line: line + 1,
            reason: reason.into(),
        };
        let (hl, header) = lines.next().ok_or_else(|| err(0, "empty input"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let count: usize = match parts.as_slice() {
            ["forest", n, f] if *f == FEATURES.to_string() => {
                n.parse().map_err(|_| err(hl, "tree count"))?
            }
            _ => return Err(err(hl, "expected `forest <trees> 10`")),
        };
        let mut trees = Vec::with_capacity(count);
        for _ in 0..count {
            let (tl, line) = lines.next().ok_or_else(|| err(hl, "missing tree"))?;
            let n: usize = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["tree", n] => n.parse().map_err(|_| err(tl, "node count"))?,
                _ => return Err(err(tl, "expected `tree <nodes>`")),
            };
            let mut nodes = Vec::with_capacity(n);
            for _ in 0..n {
                let (nl, line) = lines.next().ok_or_else(|| err(tl, "missing node"))?;
                let node = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                    ["split", f, t] => {
                        let feature: usize = f.parse().map_err(|_| err(nl, "feature index"))?;
                        if feature >= FEATURES {
                            return Err(err(nl, "feature index out of range"));
                        }
                        let threshold: f64 = t.parse().map_err(|_| err(nl, "threshold"))?;
                        TreeNode::Split { feature, threshold }
                    }
                    ["leaf", c] => match *c {
                        "0" => TreeNode::Leaf { class: 0 },
                        "1" => TreeNode::Leaf { class: 1 },
                        _ => return Err(err(nl, "leaf class must be 0 or 1")),
                    },
                    _ => return Err(err(nl, "expected `split` or `leaf`")),
                };
                nodes.push(node);
            }
            let splits = nodes
                .iter()
                .filter(|n| matches!(n, TreeNode::Split { .. }))
                .count();
            if nodes.len() != 2 * splits + 1 {
                return Err(err(tl, "node list is not a complete binary tree"));
            }
            trees.push(Tree { nodes });
        }
        Ok(Self { trees })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(a: f64, b: f64, label: u8) -> LabeledSample {
        let mut state = [0.0; FEATURES];
        state[0] = a;
        state[1] = b;
        LabeledSample { state, label }
    }

    #[test]
    fn labels_follow_outcome() {
        let ok = vec![StateVector([0.0; 10]); 5];
        let bad = vec![StateVector([1.0; 10]); 3];
        let data = label_trajectories([(ok.as_slice(), true), (bad.as_slice(), false)]);
        assert_eq!(data.iter().filter(|s| s.label == 1).count(), 5);
        assert_eq!(data.iter().filter(|s| s.label == 0).count(), 3);
        assert!(label_trajectories(std::iter::empty::<(&[StateVector], bool)>()).is_empty());
    }

    #[test]
    fn tie_vote_refuses() {
        let model = ForestModel {
            trees: vec![
                Tree {
                    nodes: vec![TreeNode::Leaf { class: 1 }],
                },
                Tree {
                    nodes: vec![TreeNode::Leaf { class: 0 }],
                },
            ],
        };
        assert_eq!(
            model.predict(&[0.0; 10]),
            Prediction {
                class: 0,
                votes: 0.5
            }
        );
    }

    #[test]
    fn single_class_gives_constant_model() {
        let data = vec![sample(0.0, 0.0, 1), sample(1.0, 2.0, 1)];
        let m = ForestModel::fit(&data, ForestConfig::default(), 1).unwrap();
        assert_eq!(m.trees.len(), 100);
        assert_eq!(
            m.predict(&[5.0; 10]),
            Prediction {
                class: 1,
                votes: 1.0
            }
        );
        assert_eq!(
            ForestModel::fit(&data[..1], ForestConfig::default(), 1),
            Err(ForestError::TooSmall(1))
        );
    }

    #[test]
    fn duplicated_positive_sample() {
        let mut data = vec![sample(0.5, 0.5, 1); 100];
        data.extend((0..20).map(|i| sample(i as f64, -3.0, 0)));
        let m = ForestModel::fit(&data, ForestConfig::default(), 4).unwrap();
        assert_eq!(m.predict(&data[0].state).class, 1);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data: Vec<LabeledSample> = (0..5)
            .map(|i| sample(i as f64 * 0.25, -1.5, (i % 2) as u8))
            .collect();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        assert_eq!(read_dataset_csv(buf.as_slice()).unwrap(), data);
        let text = String::from_utf8(buf).unwrap().replace(",1\n", ",2\n");
        assert!(read_dataset_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn holdout_partitions() {
        let data: Vec<LabeledSample> = (0..10).map(|i| sample(i as f64, 0.0, 0)).collect();
        let (train, test) = holdout_split(&data, 0.3, 1);
        assert_eq!((train.len(), test.len()), (7, 3));
        let mut seen: Vec<f64> = train.iter().chain(&test).map(|s| s.state[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn text_round_trip() {
        let data: Vec<LabeledSample> = (0..40)
            .map(|i| sample(i as f64, (i % 7) as f64, u8::from(i % 3 == 0)))
            .collect();
        let m = ForestModel::fit(
            &data,
            ForestConfig {
                trees: 7,
                ..ForestConfig::default()
            },
            2,
        )
        .unwrap();
        let back = ForestModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(ForestModel::from_text("forest 1 10\ntree 2\nleaf 0\nleaf 1\n").is_err());
        assert!(ForestModel::from_text("forest 1 10\ntree 1\nsplit 12 0.5\n").is_err());
    }
}
