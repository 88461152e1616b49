//! Random forest of CART trees: bootstrap samples, Gini splits over a random
//! subset of features per node, majority vote.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, check_training_set, Classifier, Label, LabeledDataset};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{streams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfParams {
    pub trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Candidate features per node; `None` means `floor(sqrt(d))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams {
            trees: 100,
            max_depth: None,
            min_leaf: 1,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    /// Training samples reaching the leaf, counted per class slot.
    Leaf { histogram: Vec<u32> },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    /// Root is node 0.
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    fn leaf(&self, x: &[f64]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { histogram } => return histogram,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Class slot with the most training samples at the reached leaf.
    pub fn predict_slot(&self, x: &[f64]) -> usize {
        let h = self.leaf(x);
        let mut best = 0;
        for (i, c) in h.iter().enumerate() {
            if *c > h[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForestModel {
    /// Sorted class labels; tree histograms are indexed by position here.
    pub classes: Vec<Label>,
    pub dim: usize,
    pub max_features: usize,
    pub seed: u64,
    pub trees: Vec<DecisionTree>,
}

struct Grower<'a> {
    x: &'a [&'a [f64]],
    y: &'a [usize],
    classes: usize,
    params: &'a RfParams,
    mtry: usize,
    rng: Stream,
    nodes: Vec<TreeNode>,
}

fn gini_sum(counts: &[u32], n: u32) -> f64 {
    // n * gini = n - sum(c^2) / n
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    n as f64 - sq / n as f64
}

impl Grower<'_> {
    fn histogram(&self, idx: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.classes];
        for &i in idx {
            h[self.y[i]] += 1;
        }
        h
    }

    /// Best `(weighted impurity, feature, threshold)` over one feature.
    fn best_on_feature(&self, idx: &[usize], feature: usize, total: &[u32]) -> Option<(f64, f64)> {
        let mut order: Vec<(f64, usize)> = idx.iter().map(|&i| (self.x[i][feature], self.y[i])).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = order.len();
        let min_leaf = self.params.min_leaf;
        let mut left = vec![0u32; self.classes];
        let mut right = total.to_vec();
        let mut best: Option<(f64, f64)> = None;
        for k in 0..n - 1 {
            let (v, c) = order[k];
            left[c] += 1;
            right[c] -= 1;
            let next = order[k + 1].0;
            if v == next || k + 1 < min_leaf || n - k - 1 < min_leaf {
                continue;
            }
            let score = gini_sum(&left, (k + 1) as u32) + gini_sum(&right, (n - k - 1) as u32);
            if best.is_none_or(|(s, _)| score < s) {
                let mut t = v + (next - v) / 2.0;
                if t >= next {
                    t = v;
                }
                best = Some((score, t));
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let hist = self.histogram(&idx);
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { histogram: hist.clone() });
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_done = self.params.max_depth.is_some_and(|m| depth >= m);
        if pure || depth_done || idx.len() < 2 * self.params.min_leaf {
            return at;
        }
        // Visit features in random order; the first `mtry` are the node's
        // candidates, and later ones are only consulted when none of those
        // can split the node.
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..d {
            let j = k + self.rng.below(d - k);
            features.swap(k, j);
            let f = features[k];
            if let Some((score, t)) = self.best_on_feature(&idx, f, &hist) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, t));
                }
            }
            if k + 1 >= self.mtry && best.is_some() {
                break;
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

pub fn train_rf(data: &LabeledDataset, params: &RfParams) -> Result<RandomForestModel> {
    if params.trees < 1 {
        return Err(Error::InvalidHyperparameter("a forest needs at least one tree".into()));
    }
    if params.min_leaf < 1 {
        return Err(Error::InvalidHyperparameter("min_leaf must be at least 1".into()));
    }
    if params.max_features == Some(0) {
        return Err(Error::InvalidHyperparameter("max_features must be at least 1".into()));
    }
    let classes = check_training_set(data)?;
    let d = data.dim();
    let mtry = params
        .max_features
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
        .min(d);
    let x: Vec<&[f64]> = data.samples().iter().map(|s| s.features.as_slice()).collect();
    let y: Vec<usize> = data
        .samples()
        .iter()
        .map(|s| classes.binary_search(&s.subject).unwrap())
        .collect();
    let n = x.len();
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = Stream::new(params.seed, streams::FOREST_TREE_BASE + t as u64);
            let sample: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            let mut g = Grower {
                x: &x,
                y: &y,
                classes: classes.len(),
                params,
                mtry,
                rng,
                nodes: Vec::new(),
            };
            g.grow(sample, 0);
            DecisionTree { nodes: g.nodes }
        })
        .collect();
    Ok(RandomForestModel {
        classes,
        dim: d,
        max_features: mtry,
        seed: params.seed,
        trees,
    })
}

const MAGIC: &[u8; 4] = b"RFOR";
const VERSION: u32 = 1;

impl RandomForestModel {
    /// Tree votes per class slot.
    pub fn votes(&self, x: &[f64]) -> Vec<f64> {
        let mut votes = vec![0.0; self.classes.len()];
        for t in &self.trees {
            votes[t.predict_slot(x)] += 1.0;
        }
        votes
    }

    /// Majority vote; ties go to the smaller label.
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        if x.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.classes[argmax(&self.votes(x))])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.len(self.dim);
        w.len(self.max_features);
        w.u64(self.seed);
        w.len(self.classes.len());
        for c in &self.classes {
            w.u32(*c);
        }
        w.len(self.trees.len());
        for t in &self.trees {
            w.len(t.nodes.len());
            for node in &t.nodes {
                match node {
                    TreeNode::Leaf { histogram } => {
                        w.u32(0);
                        for c in histogram {
                            w.u32(*c);
                        }
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u32(1);
                        w.len(*feature);
                        w.f64(*threshold);
                        w.len(*left);
                        w.len(*right);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "random forest")?;
        let bad = |m: &str| Error::ModelFormat(format!("random forest: {m}"));
        let dim = r.len()?;
        let max_features = r.len()?;
        let seed = r.u64()?;
        let nc = r.len()?;
        let classes = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if classes.is_empty() || classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("class labels must be sorted and distinct"));
        }
        let nt = r.len()?;
        let mut trees = Vec::new();
        for _ in 0..nt {
            let nn = r.len()?;
            if nn == 0 || nn > bytes.len() {
                return Err(bad("invalid node count"));
            }
            let mut nodes = Vec::with_capacity(nn);
            for _ in 0..nn {
                nodes.push(match r.u32()? {
                    0 => TreeNode::Leaf {
                        histogram: (0..nc).map(|_| r.u32()).collect::<Result<_>>()?,
                    },
                    1 => {
                        let feature = r.len()?;
                        let threshold = r.f64()?;
                        let (left, right) = (r.len()?, r.len()?);
                        if feature >= dim || left >= nn || right >= nn {
                            return Err(bad("split refers outside the tree"));
                        }
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        }
                    }
                    tag => return Err(bad(&format!("unknown node tag {tag}"))),
                });
            }
            // Children always follow their parent, so this also rules out cycles.
            for (i, n) in nodes.iter().enumerate() {
                if let TreeNode::Split { left, right, .. } = n {
                    if *left <= i || *right <= i {
                        return Err(bad("child precedes parent"));
                    }
                }
            }
            trees.push(DecisionTree { nodes });
        }
        r.finish()?;
        Ok(RandomForestModel {
            classes,
            dim,
            max_features,
            seed,
            trees,
        })
    }
}

impl Classifier for RandomForestModel {
    fn name(&self) -> &'static str {
        "RF"
    }

    fn predict_window(&self, window: &[&[f64]]) -> Result<Label> {
        match window {
            [x] => self.predict(x),
            _ => Err(Error::WindowShape {
                expected: 1,
                got: window.len(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Sample;

    pub(crate) fn blobs(classes: u32, per: u32, dim: usize, spread: f64, seed: u64) -> LabeledDataset {
        let mut rng = Stream::new(seed, 99);
        let centres: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.normal() * 3.0).collect())
            .collect();
        let mut v = Vec::new();
        for c in 0..classes {
            for f in 0..per {
                v.push(Sample {
                    features: centres[c as usize].iter().map(|m| m + rng.normal() * spread).collect(),
                    subject: c,
                    sequence: c,
                    frame: f,
                });
            }
        }
        LabeledDataset::new(v).unwrap()
    }

    fn accuracy(m: &RandomForestModel, d: &LabeledDataset) -> f64 {
        let ok = d.samples().iter().filter(|s| m.predict(&s.features).unwrap() == s.subject).count();
        ok as f64 / d.len() as f64
    }

    #[test]
    fn separable_two_class_is_learned() {
        let v: Vec<Sample> = (0..40)
            .map(|i| Sample {
                features: vec![(i % 2) as f64],
                subject: i % 2,
                sequence: i % 2,
                frame: i,
            })
            .collect();
        let d = LabeledDataset::new(v).unwrap();
        let m = train_rf(&d, &RfParams { trees: 10, ..Default::default() }).unwrap();
        assert_eq!(accuracy(&m, &d), 1.0);
    }

    #[test]
    fn single_sample_per_class_is_memorised() {
        let d = blobs(6, 1, 4, 0.0, 3);
        let m = train_rf(&d, &RfParams { trees: 50, ..Default::default() }).unwrap();
        // Bootstrap can drop a class from a tree, but the forest as a whole
        // must reproduce the sample it was shown.
        assert_eq!(accuracy(&m, &d), 1.0);
    }

    #[test]
    fn invariants_hold_on_every_tree() {
        let d = blobs(4, 15, 6, 1.0, 5);
        let m = train_rf(&d, &RfParams { trees: 5, ..Default::default() }).unwrap();
        for t in &m.trees {
            for n in &t.nodes {
                match n {
                    TreeNode::Leaf { histogram } => assert!(histogram.iter().sum::<u32>() > 0),
                    TreeNode::Split { left, right, .. } => assert!(left != right),
                }
            }
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let d = blobs(3, 10, 5, 1.0, 7);
        let p = RfParams { trees: 7, seed: 11, ..Default::default() };
        let a = train_rf(&d, &p).unwrap();
        let b = train_rf(&d, &p).unwrap();
        assert_eq!(a, b);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"RFOR");
        assert_eq!(RandomForestModel::from_bytes(&bytes).unwrap(), a);
        assert!(RandomForestModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let d = blobs(2, 5, 2, 1.0, 1);
        assert!(matches!(
            train_rf(&d, &RfParams { trees: 0, ..Default::default() }),
            Err(Error::InvalidHyperparameter(_))
        ));
        let one = blobs(1, 5, 2, 1.0, 1);
        assert!(train_rf(&one, &RfParams::default()).is_err());
    }
}
