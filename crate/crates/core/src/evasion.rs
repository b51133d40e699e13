//! Percentile-based evasion experiments.
//!
//! A cohort of single-class test samples is pushed through the trained models
//! three times: untouched (E1), with the two duration features replaced by
//! low Downloader percentiles (E2), and with five Ransomware features replaced
//! by the cohort's own 10th percentiles (E3). Counting positive predictions
//! per class shows how far each model leans on the edited features.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;

use crate::dataset::{percentile, Dataset, Label, LabelSet, TraceSample};
use crate::error::{Error, Result};
use crate::model::MultiLabelModel;

pub const E2_FEATURES: [usize; 2] = [183, 185];
pub const E2_PERCENTILE: f64 = 25.0;
pub const E3_FEATURES: [usize; 5] = [183, 185, 199, 17, 16];
pub const E3_PERCENTILE: f64 = 10.0;

/// Classes the experiments are run and reported on.
pub const REPORT_LABELS: [Label; 4] = [Label::Downloader, Label::Grayware, Label::Miner, Label::Ransomware];

pub fn report_label_set() -> LabelSet {
    REPORT_LABELS.iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    E1,
    E2,
    E3,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::E1, Experiment::E2, Experiment::E3];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::E1 => "E1",
            Experiment::E2 => "E2",
            Experiment::E3 => "E3",
        }
    }
}

/// Ordered feature overwrites, keyed by original feature index.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    edits: Vec<(usize, f64)>,
    pub provenance: String,
}

impl PerturbationSpec {
    pub fn new(edits: Vec<(usize, f64)>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(feature, value) in &edits {
            if !seen.insert(feature) {
                return Err(Error::invalid(format!("feature {feature} edited twice")));
            }
            if !value.is_finite() {
                return Err(Error::invalid(format!("non-finite replacement for feature {feature}")));
            }
        }
        Ok(PerturbationSpec {
            edits,
            provenance: provenance.into(),
        })
    }

    /// The identity perturbation (E1).
    pub fn identity() -> Self {
        PerturbationSpec {
            edits: Vec::new(),
            provenance: "identity".into(),
        }
    }

    pub fn edits(&self) -> &[(usize, f64)] {
        &self.edits
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }
}

/// Samples labelled exactly `{label}` (exclusive) or containing `label`.
pub fn select_cohort(data: &Dataset, label: Label, exclusive: bool) -> Result<Dataset> {
    let want = LabelSet::empty().with(label);
    let samples: Vec<TraceSample> = data
        .samples()
        .iter()
        .filter(|s| if exclusive { s.labels == want } else { s.labels.contains(label) })
        .cloned()
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("no {label} samples in {}", data.name)));
    }
    let kind = if exclusive { "only" } else { "any" };
    Ok(data.with_samples(format!("{}-{label}-{kind}", data.name), samples))
}

/// Replaces each feature with the `p`-th percentile of the cohort's values.
pub fn percentile_spec(cohort: &Dataset, features: &[usize], p: f64) -> Result<PerturbationSpec> {
    let mut edits = Vec::with_capacity(features.len());
    for &feature in features {
        let pos = cohort
            .schema()
            .position_of(feature)
            .ok_or_else(|| Error::Schema(format!("feature {feature} is not in the data schema")))?;
        let values = cohort.column(pos);
        edits.push((feature, percentile(&values, p)?));
    }
    let provenance = format!("p{p} of {} ({} samples)", cohort.name, cohort.len());
    PerturbationSpec::new(edits, provenance)
}

/// Duration features set to the Downloader cohort's 25th percentiles.
pub fn build_e2_spec(test: &Dataset, exclusive: bool) -> Result<PerturbationSpec> {
    let cohort = select_cohort(test, Label::Downloader, exclusive)?;
    percentile_spec(&cohort, &E2_FEATURES, E2_PERCENTILE)
}

/// Five Ransomware features set to that cohort's own 10th percentiles.
pub fn build_e3_spec(test: &Dataset, exclusive: bool) -> Result<PerturbationSpec> {
    let cohort = select_cohort(test, Label::Ransomware, exclusive)?;
    percentile_spec(&cohort, &E3_FEATURES, E3_PERCENTILE)
}

pub fn apply(spec: &PerturbationSpec, data: &Dataset) -> Result<Dataset> {
    let positions = spec
        .edits
        .iter()
        .map(|&(feature, value)| {
            data.schema()
                .position_of(feature)
                .map(|pos| (pos, value))
                .ok_or_else(|| Error::Schema(format!("feature {feature} is not in the data schema")))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = data
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for &(pos, value) in &positions {
                s.features[pos] = value;
            }
            s
        })
        .collect();
    Ok(data.with_samples(data.name.clone(), samples))
}

/// Positive-prediction counts per [`REPORT_LABELS`] class.
pub fn count_positive(model: &dyn MultiLabelModel, data: &Dataset) -> Result<[usize; 4]> {
    let preds = data
        .samples()
        .par_iter()
        .map(|s| model.predict(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = [0; 4];
    for p in preds {
        for (c, label) in counts.iter_mut().zip(REPORT_LABELS) {
            *c += usize::from(p.contains(label));
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCounts {
    pub model: String,
    /// Indexed by experiment, then by [`REPORT_LABELS`] position.
    pub counts: [[usize; 4]; 3],
}

impl ModelCounts {
    pub fn get(&self, experiment: Experiment, label: Label) -> usize {
        let l = REPORT_LABELS.iter().position(|&x| x == label).expect("reported label");
        self.counts[experiment as usize][l]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub cohort_size: usize,
    pub cohort_exclusive: bool,
    pub e2: PerturbationSpec,
    pub e3: PerturbationSpec,
    pub models: Vec<ModelCounts>,
}

/// Runs E1-E3 on the Ransomware cohort of `test` for every named model.
/// Models are used unchanged across experiments.
pub fn run_experiments(
    models: &[(&str, &dyn MultiLabelModel)],
    test: &Dataset,
    exclusive: bool,
) -> Result<ExperimentReport> {
    let n = test.schema().len();
    if let Some((name, _)) = models.iter().find(|(_, m)| m.n_features() != n) {
        return Err(Error::Schema(format!(
            "model {name} expects a different feature count than the {n}-feature test data"
        )));
    }
    let cohort = select_cohort(test, Label::Ransomware, exclusive)?;
    let e2 = build_e2_spec(test, exclusive)?;
    let e3 = build_e3_spec(test, exclusive)?;
    let variants = [cohort.clone(), apply(&e2, &cohort)?, apply(&e3, &cohort)?];
    let models = models
        .iter()
        .map(|(name, model)| {
            let mut counts = [[0; 4]; 3];
            for (row, data) in counts.iter_mut().zip(&variants) {
                *row = count_positive(*model, data)?;
            }
            Ok(ModelCounts {
                model: name.to_string(),
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        cohort_size: cohort.len(),
        cohort_exclusive: exclusive,
        e2,
        e3,
        models,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessDelta {
    pub model: String,
    /// Relative drop of the Ransomware count, E1 to E2 and E1 to E3; 0 when
    /// E1 has no Ransomware predictions.
    pub ransomware_drop: [f64; 2],
    /// Count change E1 to E2 and E1 to E3.
    pub downloader_rise: [i64; 2],
    pub grayware_rise: [i64; 2],
}

pub fn robustness_delta(report: &ExperimentReport) -> Vec<RobustnessDelta> {
    use Experiment::*;
    report
        .models
        .iter()
        .map(|m| {
            let drop = |e| {
                let base = m.get(E1, Label::Ransomware) as f64;
                if base == 0.0 {
                    0.0
                } else {
                    (base - m.get(e, Label::Ransomware) as f64) / base
                }
            };
            let rise = |e, l| m.get(e, l) as i64 - m.get(E1, l) as i64;
            RobustnessDelta {
                model: m.model.clone(),
                ransomware_drop: [drop(E2), drop(E3)],
                downloader_rise: [rise(E2, Label::Downloader), rise(E3, Label::Downloader)],
                grayware_rise: [rise(E2, Label::Grayware), rise(E3, Label::Grayware)],
            }
        })
        .collect()
}

/// Rows are classes; columns are `<model>_<experiment>`.
pub fn write_report_csv<W: Write>(w: &mut W, report: &ExperimentReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["class".to_string()];
    for m in &report.models {
        header.extend(Experiment::ALL.iter().map(|e| format!("{}_{}", m.model, e.name())));
    }
    csv.write_record(&header).map_err(csv_err)?;
    for label in REPORT_LABELS {
        let mut row = vec![label.name().to_string()];
        for m in &report.models {
            row.extend(Experiment::ALL.iter().map(|&e| m.get(e, label).to_string()));
        }
        csv.write_record(&row).map_err(csv_err)?;
    }
    csv.flush().map_err(|e| Error::invalid(format!("writing report: {e}")))
}

/// Key-value sidecar with cohort size and replacement values.
pub fn write_provenance<W: Write>(w: &mut W, report: &ExperimentReport) -> Result<()> {
    let mut out = format!(
        "cohort_label = Ransomware\ncohort_exclusive = {}\ncohort_size = {}\n",
        report.cohort_exclusive, report.cohort_size
    );
    for (name, spec) in [("e2", &report.e2), ("e3", &report.e3)] {
        out.push_str(&format!("{name}.source = {}\n", spec.provenance));
        for (feature, value) in spec.edits() {
            out.push_str(&format!("{name}.feature_{feature} = {value}\n"));
        }
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::invalid(format!("writing provenance: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("writing report: {e}"))
}
