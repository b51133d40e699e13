use serde::{Deserialize, Serialize};

use super::forest::{argmax, ForestParams, RandomForest};
use super::tree::FeatureMatrix;
use crate::dataset::{Dataset, Label, LabelSet, NUM_LABELS};
use crate::error::{Error, Result};
use crate::model::MultiLabelModel;
use crate::rng;

fn check_width(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(Error::SchemaMismatch {
            expected: format!("{expected} features"),
            found: format!("{} features", x.len()),
        })
    }
}

fn label_params(params: &ForestParams, label: usize) -> ForestParams {
    params.with_seed(rng::derive_seed(params.seed, &[label as u64]))
}

fn label_column(train: &Dataset, label: usize) -> Vec<usize> {
    train
        .samples()
        .iter()
        .map(|s| usize::from(s.labels.contains_index(label)))
        .collect()
}

fn require_rows(train: &Dataset) -> Result<FeatureMatrix> {
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    Ok(FeatureMatrix::from_rows(&train.rows()))
}

/// Binary Relevance: one independent forest per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrModel {
    forests: Vec<RandomForest>,
    n_features: usize,
}

pub fn fit_br(train: &Dataset, params: &ForestParams) -> Result<BrModel> {
    let x = require_rows(train)?;
    let forests = (0..NUM_LABELS)
        .map(|k| RandomForest::fit(&x, &label_column(train, k), 2, &label_params(params, k)))
        .collect::<Result<_>>()?;
    Ok(BrModel {
        forests,
        n_features: train.n_features(),
    })
}

impl BrModel {
    pub fn forests(&self) -> &[RandomForest] {
        &self.forests
    }
}

impl MultiLabelModel for BrModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_width(self.n_features, x)?;
        Ok(self.forests.iter().map(|f| f.predict_proba(x)[1]).collect())
    }
}

/// Classifier Chains in canonical label order. Link `k` sees the features
/// followed by the bits of labels `0..k`: true bits while training, its own
/// thresholded predictions at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcModel {
    order: Vec<Label>,
    forests: Vec<RandomForest>,
    n_features: usize,
}

pub fn fit_cc(train: &Dataset, params: &ForestParams) -> Result<CcModel> {
    let x = require_rows(train)?;
    let mut forests = Vec::with_capacity(NUM_LABELS);
    let mut augmented: Vec<Vec<f64>> = Vec::new();
    for k in 0..NUM_LABELS {
        let xk = x.with_extra_columns(&augmented);
        let y = label_column(train, k);
        forests.push(RandomForest::fit(&xk, &y, 2, &label_params(params, k))?);
        augmented.push(y.iter().map(|&b| b as f64).collect());
    }
    Ok(CcModel {
        order: Label::ALL.to_vec(),
        forests,
        n_features: train.n_features(),
    })
}

impl CcModel {
    pub fn order(&self) -> &[Label] {
        &self.order
    }

    pub fn forests(&self) -> &[RandomForest] {
        &self.forests
    }
}

impl MultiLabelModel for CcModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_width(self.n_features, x)?;
        let mut input = x.to_vec();
        let mut out = Vec::with_capacity(NUM_LABELS);
        for forest in &self.forests {
            let p = forest.predict_proba(&input)[1];
            out.push(p);
            input.push(if p >= 0.5 { 1.0 } else { 0.0 });
        }
        Ok(out)
    }
}

/// Label Powerset: every training label combination is one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpModel {
    /// Class id -> combination, ascending by bit pattern.
    classes: Vec<LabelSet>,
    forest: RandomForest,
    n_features: usize,
}

pub fn fit_lp(train: &Dataset, params: &ForestParams) -> Result<LpModel> {
    let x = require_rows(train)?;
    let mut classes: Vec<LabelSet> = train.label_combinations().into_keys().collect();
    classes.sort();
    let y: Vec<usize> = train
        .samples()
        .iter()
        .map(|s| classes.binary_search(&s.labels).expect("combo is in class list"))
        .collect();
    let forest = RandomForest::fit(&x, &y, classes.len(), params)?;
    Ok(LpModel {
        classes,
        forest,
        n_features: train.n_features(),
    })
}

impl LpModel {
    pub fn classes(&self) -> &[LabelSet] {
        &self.classes
    }

    pub fn forest(&self) -> &RandomForest {
        &self.forest
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        check_width(self.n_features, x)?;
        Ok(argmax(&self.forest.predict_proba(x)))
    }
}

impl MultiLabelModel for LpModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    /// Per-label marginal: summed probability of the combinations holding it.
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_width(self.n_features, x)?;
        let class_probs = self.forest.predict_proba(x);
        let mut out = vec![0.0; NUM_LABELS];
        for (combo, p) in self.classes.iter().zip(class_probs) {
            for l in combo.iter() {
                out[l.index()] += p;
            }
        }
        Ok(out)
    }

    fn predict(&self, x: &[f64]) -> Result<LabelSet> {
        Ok(self.classes[self.predict_class(x)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureSchema, TraceSample};

    fn params() -> ForestParams {
        ForestParams {
            n_trees: 15,
            seed: 3,
            ..Default::default()
        }
    }

    /// Three features; label k present when feature k exceeds 0.5.
    fn toy(n: usize, combos: &[LabelSet]) -> Dataset {
        let schema = FeatureSchema::from_indices(&[0, 1, 2, 3]).unwrap();
        let samples = (0..n)
            .map(|i| {
                let labels = combos[i % combos.len()];
                let mut f: Vec<f64> = (0..4)
                    .map(|k| {
                        let on = Label::from_index(k).is_some_and(|l| labels.contains(l));
                        let jitter = ((i * 37 + k * 11) % 10) as f64 / 40.0;
                        if on { 0.75 + jitter } else { jitter }
                    })
                    .collect();
                f[3] = (i % 13) as f64;
                TraceSample {
                    features: f,
                    labels,
                    source_id: format!("{i}"),
                }
            })
            .collect();
        Dataset::new("toy", schema, samples).unwrap()
    }

    fn combos() -> Vec<LabelSet> {
        use Label::*;
        vec![
            LabelSet::empty().with(Backdoor),
            LabelSet::empty().with(Downloader).with(Backdoor),
            LabelSet::empty().with(Grayware),
            LabelSet::empty().with(Grayware).with(Downloader),
        ]
    }

    #[test]
    fn br_recovers_toy_labels() {
        let d = toy(80, &combos());
        let m = fit_br(&d, &params()).unwrap();
        assert_eq!(m.forests().len(), NUM_LABELS);
        for s in d.samples() {
            assert_eq!(m.predict(&s.features).unwrap(), s.labels);
        }
    }

    #[test]
    fn cc_recovers_toy_labels() {
        let d = toy(80, &combos());
        let m = fit_cc(&d, &params()).unwrap();
        assert_eq!(m.order(), &Label::ALL);
        for s in d.samples() {
            assert_eq!(m.predict(&s.features).unwrap(), s.labels);
        }
        // links later in the chain see the earlier label columns
        assert_eq!(m.forests()[9].n_features(), 4 + 9);
    }

    #[test]
    fn lp_predictions_stay_in_training_combos() {
        let d = toy(80, &combos());
        let m = fit_lp(&d, &params()).unwrap();
        assert_eq!(m.classes().len(), 4);
        for i in 0..200 {
            let probe = vec![(i % 5) as f64 / 4.0, (i % 7) as f64 / 6.0, (i % 3) as f64, i as f64];
            assert!(m.classes().contains(&m.predict(&probe).unwrap()));
            let marginals = m.predict_proba(&probe).unwrap();
            assert!(marginals.iter().all(|p| (0.0..=1.0 + 1e-12).contains(p)));
        }
    }

    #[test]
    fn br_label_forests_are_independent() {
        let d = toy(60, &combos());
        let a = fit_br(&d, &params()).unwrap();
        // remove every Grayware bit and refit
        let stripped = d.with_samples(
            "stripped",
            d.samples()
                .iter()
                .map(|s| {
                    let labels = LabelSet::from_bits(s.labels.bits() & !(1 << Label::Grayware.index())).unwrap();
                    TraceSample { labels, ..s.clone() }
                })
                .collect(),
        );
        let b = fit_br(&stripped, &params()).unwrap();
        for k in 0..NUM_LABELS {
            if k != Label::Grayware.index() {
                assert_eq!(a.forests()[k], b.forests()[k], "label {k}");
            }
        }
        assert!(b.forests()[Label::Grayware.index()].is_constant());
    }

    #[test]
    fn single_label_data_gives_ten_binary_forests() {
        let single: Vec<LabelSet> = Label::ALL.iter().map(|&l| LabelSet::empty().with(l)).collect();
        let d = toy(40, &single);
        let m = fit_br(&d, &params()).unwrap();
        assert_eq!(m.forests().len(), 10);
        assert!(m.forests().iter().all(|f| f.n_classes() == 2));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let d = toy(20, &combos());
        let m = fit_br(&d, &params()).unwrap();
        assert!(matches!(m.predict(&[0.0; 3]), Err(Error::SchemaMismatch { .. })));
    }
}
