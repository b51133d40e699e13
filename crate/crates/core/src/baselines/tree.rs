//! CART classification tree grown with Gini impurity.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Column-major feature matrix shared by every tree of a forest.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut columns = vec![Vec::with_capacity(rows.len()); n_cols];
        for r in rows {
            for (c, &v) in r.as_ref().iter().enumerate() {
                columns[c].push(v);
            }
        }
        FeatureMatrix {
            n_rows: rows.len(),
            n_cols,
            columns,
        }
    }

    /// Appends extra columns (used by classifier chains).
    pub fn with_extra_columns(&self, extra: &[Vec<f64>]) -> Self {
        let mut columns = self.columns.clone();
        columns.extend(extra.iter().cloned());
        FeatureMatrix {
            n_rows: self.n_rows,
            n_cols: columns.len(),
            columns,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Candidate features examined per split; `None` means all.
    pub features_per_split: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    n_classes: usize,
    n_features: usize,
    params: TreeParams,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    n_left: usize,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

impl DecisionTree {
    /// Grows a tree over `rows` (indices into `x`, repeats allowed).
    pub fn fit<R: Rng>(
        x: &FeatureMatrix,
        y: &[usize],
        n_classes: usize,
        rows: &[usize],
        params: TreeParams,
        rng: &mut R,
    ) -> Self {
        let mut tree = DecisionTree {
            nodes: Vec::new(),
            n_classes,
            n_features: x.n_cols(),
            params,
        };
        let mut rows = rows.to_vec();
        tree.grow(x, y, &mut rows, 0, rng);
        tree
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn class_counts(&self, y: &[usize], rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &r in rows {
            counts[y[r]] += 1;
        }
        counts
    }

    fn grow<R: Rng>(
        &mut self,
        x: &FeatureMatrix,
        y: &[usize],
        rows: &mut [usize],
        depth: usize,
        rng: &mut R,
    ) -> usize {
        let counts = self.class_counts(y, rows);
        let id = self.nodes.len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        let too_small = rows.len() < 2 * self.params.min_samples_leaf.max(1);
        let split = if pure || depth_capped || too_small {
            None
        } else {
            self.best_split(x, y, rows, &counts, rng)
        };
        let Some(split) = split else {
            let total = rows.len() as f64;
            self.nodes.push(Node::Leaf {
                probs: counts.iter().map(|&c| c as f64 / total).collect(),
            });
            return id;
        };
        // Placeholder, patched once children exist.
        self.nodes.push(Node::Leaf { probs: Vec::new() });
        let col = &x.columns[split.feature];
        rows.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let (left_rows, right_rows) = rows.split_at_mut(split.n_left);
        let left = self.grow(x, y, left_rows, depth + 1, rng);
        let right = self.grow(x, y, right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Examines features in random order until `features_per_split` features
    /// with at least one admissible cut have been scored.
    fn best_split<R: Rng>(
        &self,
        x: &FeatureMatrix,
        y: &[usize],
        rows: &[usize],
        counts: &[usize],
        rng: &mut R,
    ) -> Option<SplitChoice> {
        let n = rows.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        let parent = gini(counts, n);
        let budget = self
            .params
            .features_per_split
            .unwrap_or(x.n_cols())
            .clamp(1, x.n_cols());
        let mut features: Vec<usize> = (0..x.n_cols()).collect();
        features.shuffle(rng);

        let mut best: Option<(f64, SplitChoice)> = None;
        let mut scored = 0;
        let mut sorted = rows.to_vec();
        let mut left = vec![0usize; self.n_classes];
        for &f in &features {
            if scored >= budget {
                break;
            }
            let col = &x.columns[f];
            sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            if col[sorted[0]] == col[sorted[n - 1]] {
                continue;
            }
            let mut any = false;
            left.iter_mut().for_each(|c| *c = 0);
            for i in 0..n - 1 {
                left[y[sorted[i]]] += 1;
                let n_left = i + 1;
                let (lo, hi) = (col[sorted[i]], col[sorted[i + 1]]);
                if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                any = true;
                let n_right = n - n_left;
                let (mut sq_left, mut sq_right) = (0.0, 0.0);
                for (c, l) in counts.iter().zip(&left) {
                    sq_left += (*l as f64).powi(2);
                    sq_right += ((c - l) as f64).powi(2);
                }
                // n_l * gini_l + n_r * gini_r, scaled by 1/n
                let weighted = (n as f64 - sq_left / n_left as f64 - sq_right / n_right as f64)
                    / n as f64;
                if best.as_ref().is_none_or(|(b, _)| weighted < *b) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((
                        weighted,
                        SplitChoice {
                            feature: f,
                            threshold,
                            n_left,
                        },
                    ));
                }
            }
            if any {
                scored += 1;
            }
        }
        best.filter(|(w, _)| *w < parent).map(|(_, s)| s)
    }

    pub fn leaf(&self, x: &[f64]) -> &[f64] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { probs } => return probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.leaf(x).to_vec()
    }

    /// Tree consisting of a single leaf.
    pub fn constant(probs: Vec<f64>, n_features: usize, params: TreeParams) -> Self {
        DecisionTree {
            n_classes: probs.len(),
            nodes: vec![Node::Leaf { probs }],
            n_features,
            params,
        }
    }
}
