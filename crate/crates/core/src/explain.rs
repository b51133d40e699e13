//! Shapley-value attribution with interventional coalition values.
//!
//! The value of a coalition `S` for one label is the model's mean output over
//! a background set, with the features in `S` taken from the explained sample
//! and the rest from each background row.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;

use crate::dataset::{Dataset, FeatureSchema};
use crate::error::{Error, Result};
use crate::model::MultiLabelModel;
use crate::rng;

/// Largest feature count the exact estimator will enumerate.
pub const MAX_EXACT_FEATURES: usize = 20;
const BACKGROUND_STREAM: u64 = 0xB6;
const PERM_STREAM: u64 = 0x9E2;

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("background set needs at least one row"));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("background rows differ in width"));
        }
        Ok(BackgroundSet { rows })
    }

    /// Up to `size` distinct training rows, drawn without replacement and
    /// kept in dataset order.
    pub fn sample(train: &Dataset, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("background size must be at least 1"));
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        if train.len() > size {
            let mut r = rng::stream(seed, &[BACKGROUND_STREAM]);
            idx = idx.choose_multiple(&mut r, size).copied().collect();
            idx.sort_unstable();
        }
        BackgroundSet::new(idx.iter().map(|&i| train.samples()[i].features.clone()).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub label: usize,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub model_output: f64,
    /// Local-accuracy gap before it was spread over the features (sampled
    /// estimator only; zero for the exact one).
    pub residual: f64,
}

impl Attribution {
    pub fn local_accuracy_gap(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.model_output).abs()
    }
}

fn check_inputs(model: &dyn MultiLabelModel, x: &[f64], label: usize, bg: &BackgroundSet) -> Result<()> {
    if x.len() != model.n_features() || bg.n_features() != model.n_features() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} features", model.n_features()),
            found: format!("sample {} / background {}", x.len(), bg.n_features()),
        });
    }
    if label >= model.n_labels() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    Ok(())
}

/// Mean model output for `label` over hybrids that take the features flagged
/// in `coalition` from `x` and the others from each background row.
pub fn coalition_value(
    model: &dyn MultiLabelModel,
    x: &[f64],
    coalition: &[bool],
    bg: &BackgroundSet,
    label: usize,
) -> Result<f64> {
    check_inputs(model, x, label, bg)?;
    if coalition.len() != x.len() {
        return Err(Error::invalid("coalition mask width differs from sample"));
    }
    let mut hybrid = vec![0.0; x.len()];
    let mut total = 0.0;
    for row in bg.rows() {
        for (j, h) in hybrid.iter_mut().enumerate() {
            *h = if coalition[j] { x[j] } else { row[j] };
        }
        total += model.predict_proba(&hybrid)?[label];
    }
    Ok(total / bg.len() as f64)
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn exact_shapley(model: &dyn MultiLabelModel, x: &[f64], label: usize, bg: &BackgroundSet) -> Result<Attribution> {
    check_inputs(model, x, label, bg)?;
    let n = x.len();
    if n > MAX_EXACT_FEATURES {
        return Err(Error::invalid(format!(
            "exact Shapley enumerates 2^{n} coalitions; at most {MAX_EXACT_FEATURES} features are supported, use the sampled estimator instead"
        )));
    }
    let values: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let coalition: Vec<bool> = (0..n).map(|j| mask >> j & 1 == 1).collect();
            coalition_value(model, x, &coalition, bg, label)
        })
        .collect::<Result<_>>()?;
    // weight of a coalition of size s that excludes i: s! (n-s-1)! / n!
    let weights: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s)))
        .collect();
    let mut phi = vec![0.0; n];
    for (mask, &v) in values.iter().enumerate() {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weights[size] * (values[mask | 1 << i] - v);
            }
        }
    }
    Ok(Attribution {
        label,
        phi,
        base_value: values[0],
        model_output: values[(1 << n) - 1],
        residual: 0.0,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Permutation-sampling estimator. Iteration `t` walks a random feature order
/// from background row `t mod B` to the sample, crediting each feature with
/// the output change it causes. The leftover local-accuracy gap is spread
/// evenly over the features and kept in [`Attribution::residual`].
pub fn sampled_shapley(
    model: &dyn MultiLabelModel,
    x: &[f64],
    label: usize,
    bg: &BackgroundSet,
    n_perms: usize,
    seed: u64,
) -> Result<Attribution> {
    check_inputs(model, x, label, bg)?;
    if n_perms == 0 {
        return Err(Error::invalid("n_perms must be at least 1"));
    }
    let n = x.len();
    let mut r = rng::stream(seed, &[PERM_STREAM]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    for t in 0..n_perms {
        order.shuffle(&mut r);
        let mut z = bg.rows()[t % bg.len()].clone();
        let mut prev = model.predict_proba(&z)?[label];
        for &j in &order {
            z[j] = x[j];
            let cur = model.predict_proba(&z)?[label];
            phi[j] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|p| *p /= n_perms as f64);
    let base_value = coalition_value(model, x, &vec![false; n], bg, label)?;
    let model_output = model.predict_proba(x)?[label];
    let residual = model_output - base_value - phi.iter().sum::<f64>();
    phi.iter_mut().for_each(|p| *p += residual / n as f64);
    Ok(Attribution {
        label,
        phi,
        base_value,
        model_output,
        residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Exact,
    Sampled { n_perms: usize },
}

/// Attributions for every (sample, label) pair, sample-major. Sampled runs
/// seed pair `(i, k)` from `(seed, i, k)`.
pub fn explain_all(
    model: &dyn MultiLabelModel,
    samples: &[Vec<f64>],
    labels: &[usize],
    bg: &BackgroundSet,
    estimator: Estimator,
    seed: u64,
) -> Result<Vec<Vec<Attribution>>> {
    if let (Estimator::Exact, Some(x)) = (estimator, samples.first()) {
        if x.len() > MAX_EXACT_FEATURES {
            return Err(Error::invalid(format!(
                "{} features exceed the exact estimator's limit of {MAX_EXACT_FEATURES}; use the sampled estimator",
                x.len()
            )));
        }
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            labels
                .iter()
                .map(|&k| match estimator {
                    Estimator::Exact => exact_shapley(model, x, k, bg),
                    Estimator::Sampled { n_perms } => {
                        sampled_shapley(model, x, k, bg, n_perms, rng::derive_seed(seed, &[i as u64, k as u64]))
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean absolute attribution per (label, feature).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalImportance {
    pub labels: Vec<usize>,
    /// `values[l][j]` for `labels[l]` and feature position `j`.
    pub values: Vec<Vec<f64>>,
}

pub fn global_importance(attributions: &[Vec<Attribution>]) -> Result<GlobalImportance> {
    let Some(first) = attributions.first() else {
        return Err(Error::invalid("no attributions to aggregate"));
    };
    let labels: Vec<usize> = first.iter().map(|a| a.label).collect();
    let n = first.first().map_or(0, |a| a.phi.len());
    let mut values = vec![vec![0.0; n]; labels.len()];
    for row in attributions {
        if row.len() != labels.len() || row.iter().zip(&labels).any(|(a, &l)| a.label != l || a.phi.len() != n) {
            return Err(Error::invalid("attribution rows are not aligned"));
        }
        for (acc, a) in values.iter_mut().zip(row) {
            for (v, p) in acc.iter_mut().zip(&a.phi) {
                *v += p.abs();
            }
        }
    }
    let count = attributions.len() as f64;
    values.iter_mut().flatten().for_each(|v| *v /= count);
    Ok(GlobalImportance { labels, values })
}

impl GlobalImportance {
    /// The `k` most important feature positions for `label`, descending;
    /// ties go to the lower position.
    pub fn top_k(&self, label: usize, k: usize) -> Vec<(usize, f64)> {
        let Some(l) = self.labels.iter().position(|&x| x == label) else {
            return Vec::new();
        };
        let mut ranked: Vec<(usize, f64)> = self.values[l].iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

// ---------------------------------------------------------------------------
// Plot-data exports
// ---------------------------------------------------------------------------

/// Where an export came from; copied into the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub model: String,
    pub dataset: String,
    pub estimator: String,
    pub n_perms: usize,
    pub seed: u64,
}

/// Per-sample rows of `(feature, phi, feature value)`.
pub fn summary_data<W: Write>(w: &mut W, schema: &FeatureSchema, samples: &[Vec<f64>], attrs: &[&Attribution]) -> Result<()> {
    writeln!(w, "sample,feature,phi,value").map_err(io)?;
    for (i, (x, a)) in samples.iter().zip(attrs).enumerate() {
        for (j, entry) in schema.entries().iter().enumerate() {
            writeln!(w, "{i},{},{},{}", entry.name, a.phi[j], x[j]).map_err(io)?;
        }
    }
    Ok(())
}

/// Signed contributions ordered by magnitude; the cumulative column starts
/// from the base value and ends at the model output.
pub fn force_data<W: Write>(w: &mut W, schema: &FeatureSchema, attrs: &[&Attribution]) -> Result<()> {
    writeln!(w, "sample,base_value,rank,feature,contribution,cumulative,model_output").map_err(io)?;
    for (i, a) in attrs.iter().enumerate() {
        let mut order: Vec<usize> = (0..a.phi.len()).collect();
        order.sort_by(|&p, &q| a.phi[q].abs().total_cmp(&a.phi[p].abs()).then(p.cmp(&q)));
        let mut cum = a.base_value;
        for (rank, &j) in order.iter().enumerate() {
            cum += a.phi[j];
            writeln!(
                w,
                "{i},{},{rank},{},{},{cum},{}",
                a.base_value,
                schema.entries()[j].name,
                a.phi[j],
                a.model_output
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Cumulative output path from the base value through features ranked by
/// `ranking` (most important first).
pub fn decision_data<W: Write>(w: &mut W, schema: &FeatureSchema, attrs: &[&Attribution], ranking: &[usize]) -> Result<()> {
    writeln!(w, "sample,step,feature,cumulative").map_err(io)?;
    for (i, a) in attrs.iter().enumerate() {
        let mut cum = a.base_value;
        writeln!(w, "{i},0,base_value,{cum}").map_err(io)?;
        for (step, &j) in ranking.iter().enumerate() {
            cum += a.phi[j];
            writeln!(w, "{i},{},{},{cum}", step + 1, schema.entries()[j].name).map_err(io)?;
        }
    }
    Ok(())
}

/// One row per sample: primary value, its attribution, secondary value.
pub fn dependence_data<W: Write>(
    w: &mut W,
    samples: &[Vec<f64>],
    attrs: &[&Attribution],
    primary: usize,
    secondary: usize,
) -> Result<()> {
    writeln!(w, "sample,primary_value,phi_primary,secondary_value").map_err(io)?;
    for (i, (x, a)) in samples.iter().zip(attrs).enumerate() {
        writeln!(w, "{i},{},{},{}", x[primary], a.phi[primary], x[secondary]).map_err(io)?;
    }
    Ok(())
}

fn io(e: std::io::Error) -> Error {
    Error::io("<export>", e)
}

/// Writes the four exports per label plus `manifest.csv` into `dir`.
/// Decision paths use each label's full importance ranking; dependence plots
/// pair the top feature with the runner-up. Returns the written paths.
pub fn write_exports(
    dir: &Path,
    schema: &FeatureSchema,
    label_names: &[String],
    samples: &[Vec<f64>],
    attributions: &[Vec<Attribution>],
    provenance: &Provenance,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let importance = global_importance(attributions)?;
    let mut written = Vec::new();
    let mut manifest = String::from("file,kind,label,model,dataset,estimator,n_perms,seed\n");
    for (l, &label) in importance.labels.iter().enumerate() {
        let name = label_names.get(label).cloned().unwrap_or_else(|| format!("label{label}"));
        let attrs: Vec<&Attribution> = attributions.iter().map(|row| &row[l]).collect();
        let ranking: Vec<usize> = importance.top_k(label, schema.len()).into_iter().map(|(j, _)| j).collect();
        let secondary = ranking.get(1).copied().unwrap_or(ranking[0]);
        for kind in ["summary", "force", "decision", "dependence", "importance"] {
            let file = format!("{kind}_{name}.csv");
            let path = dir.join(&file);
            let mut buf = Vec::new();
            match kind {
                "summary" => summary_data(&mut buf, schema, samples, &attrs)?,
                "force" => force_data(&mut buf, schema, &attrs)?,
                "decision" => decision_data(&mut buf, schema, &attrs, &ranking)?,
                "dependence" => dependence_data(&mut buf, samples, &attrs, ranking[0], secondary)?,
                _ => {
                    buf.extend_from_slice(b"rank,feature,mean_abs_phi\n");
                    for (rank, &j) in ranking.iter().enumerate() {
                        let _ = writeln!(buf, "{},{},{}", rank + 1, schema.entries()[j].name, importance.values[l][j]);
                    }
                }
            }
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&format!(
                "{file},{kind},{name},{},{},{},{},{}\n",
                provenance.model, provenance.dataset, provenance.estimator, provenance.n_perms, provenance.seed
            ));
            written.push(path);
        }
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = sigmoid-free weighted sum` clipped to nothing; outputs may leave
    /// [0, 1], which the estimators do not care about.
    struct Linear(Vec<f64>);

    impl MultiLabelModel for Linear {
        fn n_features(&self) -> usize {
            self.0.len()
        }
        fn n_labels(&self) -> usize {
            1
        }
        fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x.iter().zip(&self.0).map(|(a, b)| a * b).sum()])
        }
    }

    /// Product of the first two features plus a threshold on the third.
    struct Interacting;

    impl MultiLabelModel for Interacting {
        fn n_features(&self) -> usize {
            4
        }
        fn n_labels(&self) -> usize {
            2
        }
        fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
            let a = x[0] * x[1] + if x[2] > 0.5 { 0.3 } else { 0.0 };
            Ok(vec![a, x[0].max(x[1])])
        }
    }

    #[test]
    fn additive_model_closed_form() {
        let model = Linear(vec![1.0, 2.0, 0.0]);
        let bg = BackgroundSet::new(vec![vec![0.0; 3]]).unwrap();
        let a = exact_shapley(&model, &[0.7, -1.5, 9.0], 0, &bg).unwrap();
        let expected = [0.7, -3.0, 0.0];
        for (p, e) in a.phi.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!(a.local_accuracy_gap() < 1e-12);
    }

    #[test]
    fn coalition_endpoints() {
        let model = Interacting;
        let bg = BackgroundSet::new(vec![vec![0.1, 0.9, 0.0, 3.0], vec![0.5, 0.2, 1.0, 1.0]]).unwrap();
        let x = [0.8, 0.6, 0.7, 0.0];
        let all = coalition_value(&model, &x, &[true; 4], &bg, 0).unwrap();
        assert_eq!(all, model.predict_proba(&x).unwrap()[0]);
        let none = coalition_value(&model, &x, &[false; 4], &bg, 0).unwrap();
        let base = bg.rows().iter().map(|r| model.predict_proba(r).unwrap()[0]).sum::<f64>() / 2.0;
        assert!((none - base).abs() < 1e-15);
    }

    #[test]
    fn dummy_and_symmetry() {
        let model = Interacting;
        let bg = BackgroundSet::new(vec![vec![0.2, 0.2, 0.0, 5.0], vec![0.4, 0.4, 1.0, -1.0]]).unwrap();
        let a = exact_shapley(&model, &[0.9, 0.9, 0.6, 2.0], 0, &bg).unwrap();
        assert!(a.phi[3].abs() < 1e-12);
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-12);
        assert!(a.local_accuracy_gap() < 1e-9);
    }

    #[test]
    fn exact_refuses_wide_inputs() {
        let model = Linear(vec![1.0; 21]);
        let bg = BackgroundSet::new(vec![vec![0.0; 21]]).unwrap();
        let err = exact_shapley(&model, &[1.0; 21], 0, &bg).unwrap_err();
        assert!(err.to_string().contains("sampled"));
    }

    #[test]
    fn sampled_is_seeded_and_locally_accurate() {
        let model = Interacting;
        let bg = BackgroundSet::new(vec![vec![0.2, 0.1, 0.0, 5.0], vec![0.4, 0.7, 1.0, -1.0]]).unwrap();
        let x = [0.9, 0.3, 0.6, 2.0];
        let a = sampled_shapley(&model, &x, 0, &bg, 200, 4).unwrap();
        let b = sampled_shapley(&model, &x, 0, &bg, 200, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.local_accuracy_gap() < 1e-12);
        let exact = exact_shapley(&model, &x, 0, &bg).unwrap();
        for (s, e) in a.phi.iter().zip(&exact.phi) {
            assert!((s - e).abs() < 0.05, "{s} vs {e}");
        }
    }

    #[test]
    fn importance_aggregates_absolute_values() {
        let mk = |phi: Vec<f64>| Attribution {
            label: 0,
            phi,
            base_value: 0.0,
            model_output: 0.0,
            residual: 0.0,
        };
        let gi = global_importance(&[vec![mk(vec![1.0, -2.0, 0.0])], vec![mk(vec![-3.0, 0.0, 0.0])]]).unwrap();
        assert_eq!(gi.values[0], vec![2.0, 1.0, 0.0]);
        assert_eq!(gi.top_k(0, 2), vec![(0, 2.0), (1, 1.0)]);
        let single = global_importance(&[vec![mk(vec![-0.5, 0.25, 0.0])]]).unwrap();
        assert_eq!(single.values[0], vec![0.5, 0.25, 0.0]);
    }

    #[test]
    fn exports_are_consistent() {
        let model = Interacting;
        let schema = FeatureSchema::from_indices(&[0, 1, 2, 3]).unwrap();
        let bg = BackgroundSet::new(vec![vec![0.2, 0.1, 0.0, 5.0], vec![0.4, 0.7, 1.0, -1.0]]).unwrap();
        let samples = vec![vec![0.9, 0.3, 0.6, 2.0], vec![0.1, 0.8, 0.2, 0.0], vec![0.5, 0.5, 0.9, 1.0]];
        let attrs = explain_all(&model, &samples, &[0, 1], &bg, Estimator::Exact, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance {
            model: "toy".into(),
            dataset: "toy".into(),
            estimator: "exact".into(),
            n_perms: 0,
            seed: 0,
        };
        let names = vec!["A".to_string(), "B".to_string()];
        let files = write_exports(dir.path(), &schema, &names, &samples, &attrs, &prov).unwrap();
        assert_eq!(files.len(), 2 * 5 + 1);
        let force = std::fs::read_to_string(dir.path().join("force_A.csv")).unwrap();
        for i in 0..3 {
            let last = force
                .lines()
                .skip(1)
                .filter(|l| l.starts_with(&format!("{i},")))
                .last()
                .unwrap();
            let cols: Vec<f64> = last.split(',').skip(5).map(|c| c.parse().unwrap()).collect();
            assert!((cols[0] - cols[1]).abs() < 1e-9);
        }
        let dep = std::fs::read_to_string(dir.path().join("dependence_B.csv")).unwrap();
        assert_eq!(dep.lines().count(), 1 + samples.len());
        let decision = std::fs::read_to_string(dir.path().join("decision_A.csv")).unwrap();
        let first = decision.lines().nth(1).unwrap();
        assert!(first.ends_with(&attrs[0][0].base_value.to_string()));
    }
}
