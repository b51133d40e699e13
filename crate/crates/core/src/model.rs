//! The common prediction interface and the on-disk model container.
//!
//! A model file starts with a tag line `torlamp-model <version>`, followed by
//! one JSON header line (model kind, canonical label order, the input and
//! learner feature indices with their schema hashes, and the model body). Forest models keep
//! their full tree dumps in the body; LaMP keeps its config, vocabulary and
//! mask there and appends its parameter tensors as a binary block.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_br, fit_cc, fit_lp, BrModel, CcModel, ForestParams, LpModel};
use crate::dataset::{Dataset, FeatureSchema, Label, LabelSet, NUM_LABELS};
use crate::error::{Error, Result};
use crate::lamp::{fit_lamp, read_tensors, LampConfig, LampModel, ValueVocab};

/// Anything that maps a feature vector to per-label probabilities.
pub trait MultiLabelModel: Send + Sync {
    fn n_features(&self) -> usize;

    fn n_labels(&self) -> usize {
        NUM_LABELS
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Labels whose probability reaches 0.5.
    fn predict(&self, x: &[f64]) -> Result<LabelSet> {
        let p = self.predict_proba(x)?;
        Ok(LabelSet::from_bools(&p.iter().map(|&v| v >= 0.5).collect::<Vec<_>>()))
    }
}

pub const FORMAT_TAG: &str = "torlamp-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "br")]
    Br,
    #[serde(rename = "cc")]
    Cc,
    #[serde(rename = "lp")]
    Lp,
    #[serde(rename = "lamp")]
    Lamp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Br, ModelKind::Cc, ModelKind::Lp, ModelKind::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Br => "br",
            ModelKind::Cc => "cc",
            ModelKind::Lp => "lp",
            ModelKind::Lamp => "lamp",
        }
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Br => "BR",
            ModelKind::Cc => "CC",
            ModelKind::Lp => "LP",
            ModelKind::Lamp => "LaMP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}` (expected br, cc, lp or lamp)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Learner {
    Br(BrModel),
    Cc(CcModel),
    Lp(LpModel),
    Lamp(LampModel),
}

impl Learner {
    pub fn kind(&self) -> ModelKind {
        match self {
            Learner::Br(_) => ModelKind::Br,
            Learner::Cc(_) => ModelKind::Cc,
            Learner::Lp(_) => ModelKind::Lp,
            Learner::Lamp(_) => ModelKind::Lamp,
        }
    }

    pub fn as_model(&self) -> &dyn MultiLabelModel {
        match self {
            Learner::Br(m) => m,
            Learner::Cc(m) => m,
            Learner::Lp(m) => m,
            Learner::Lamp(m) => m,
        }
    }
}

/// A fitted model bound to its schemas: `input_schema` is the layout of the
/// data it was trained from, `schema` the (possibly reduced) columns the
/// learner consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    learner: Learner,
    input_schema: FeatureSchema,
    schema: FeatureSchema,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    label_order: Vec<String>,
    input_indices: Vec<usize>,
    input_schema_hash: String,
    feature_indices: Vec<usize>,
    schema_hash: String,
    body: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct LampBody {
    config: LampConfig,
    vocab: ValueVocab,
    mask: Vec<Vec<bool>>,
    /// Parameter tensors that follow the header.
    tensors: usize,
}

fn format_err(msg: impl std::fmt::Display) -> Error {
    Error::ModelFormat(msg.to_string())
}

impl TrainedModel {
    pub fn new(learner: Learner, input_schema: FeatureSchema, schema: FeatureSchema) -> Result<Self> {
        let n = learner.as_model().n_features();
        if n != schema.len() {
            return Err(Error::Schema(format!(
                "model takes {n} features but the schema has {}",
                schema.len()
            )));
        }
        if let Some(i) = schema.indices().into_iter().find(|&i| input_schema.position_of(i).is_none()) {
            return Err(Error::Schema(format!("feature {i} is not in the input schema")));
        }
        Ok(TrainedModel {
            learner,
            input_schema,
            schema,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.learner.kind()
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn input_schema(&self) -> &FeatureSchema {
        &self.input_schema
    }

    /// Hash of the input schema; data must match it exactly.
    pub fn schema_hash(&self) -> String {
        self.input_schema.hash()
    }

    pub fn as_model(&self) -> &dyn MultiLabelModel {
        self.learner.as_model()
    }

    /// Refuses data whose schema differs from the training schema.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let (expected, found) = (self.schema_hash(), schema.hash());
        if expected == found {
            Ok(())
        } else {
            Err(Error::SchemaMismatch { expected, found })
        }
    }

    /// Checks `data` against the input schema and reduces it to the
    /// learner's columns.
    pub fn prepare(&self, data: &Dataset) -> Result<Dataset> {
        self.check_schema(data.schema())?;
        data.project_to(&self.schema)
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<LabelSet>> {
        let data = self.prepare(data)?;
        let model = self.as_model();
        data.samples().iter().map(|s| model.predict(&s.features)).collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let body = match &self.learner {
            Learner::Br(m) => serde_json::to_value(m),
            Learner::Cc(m) => serde_json::to_value(m),
            Learner::Lp(m) => serde_json::to_value(m),
            Learner::Lamp(m) => serde_json::to_value(LampBody {
                config: m.config().clone(),
                vocab: m.vocab().clone(),
                mask: m.mask().to_vec(),
                tensors: m.params().len(),
            }),
        }
        .map_err(format_err)?;
        let header = Header {
            kind: self.kind(),
            label_order: Label::ALL.iter().map(|l| l.name().to_string()).collect(),
            input_indices: self.input_schema.indices(),
            input_schema_hash: self.input_schema.hash(),
            feature_indices: self.schema.indices(),
            schema_hash: self.schema.hash(),
            body,
        };
        let io = |e: std::io::Error| format_err(format!("writing model: {e}"));
        writeln!(w, "{FORMAT_TAG} {FORMAT_VERSION}").map_err(io)?;
        serde_json::to_writer(&mut *w, &header).map_err(format_err)?;
        writeln!(w).map_err(io)?;
        if let Learner::Lamp(m) = &self.learner {
            m.write_tensors(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line).map_err(format_err)?;
        let tag = line.trim_end();
        let version = tag
            .strip_prefix(FORMAT_TAG)
            .map(str::trim)
            .ok_or_else(|| format_err("not a model file"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(format_err(format!("unsupported model format version {version}")));
        }
        line.clear();
        r.read_line(&mut line).map_err(format_err)?;
        let header: Header = serde_json::from_str(&line).map_err(format_err)?;
        let canonical: Vec<&str> = Label::ALL.iter().map(|l| l.name()).collect();
        if header.label_order != canonical {
            return Err(format_err("label order differs from the canonical order"));
        }
        let input_schema = FeatureSchema::from_indices(&header.input_indices)?;
        let schema = FeatureSchema::from_indices(&header.feature_indices)?;
        if schema.hash() != header.schema_hash || input_schema.hash() != header.input_schema_hash {
            return Err(format_err("stored schema hash does not match its feature list"));
        }
        let n = schema.len();
        let learner = match header.kind {
            ModelKind::Br => Learner::Br(serde_json::from_value(header.body).map_err(format_err)?),
            ModelKind::Cc => Learner::Cc(serde_json::from_value(header.body).map_err(format_err)?),
            ModelKind::Lp => Learner::Lp(serde_json::from_value(header.body).map_err(format_err)?),
            ModelKind::Lamp => {
                let body: LampBody = serde_json::from_value(header.body).map_err(format_err)?;
                let params = read_tensors(&mut r)?;
                if params.len() != body.tensors {
                    return Err(format_err("tensor count differs from the header"));
                }
                Learner::Lamp(LampModel::from_parts(body.config, body.vocab, body.mask, n, params)?)
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(format_err)?;
        if !rest.is_empty() {
            return Err(format_err("trailing bytes after model"));
        }
        TrainedModel::new(learner, input_schema, schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        TrainedModel::read(file)
    }
}

/// Trains `kind` on `train` after dropping its all-zero columns; the
/// returned model accepts data laid out like `train`. The LaMP loss history
/// is returned alongside (empty for forests).
pub fn fit_model(
    kind: ModelKind,
    train: &Dataset,
    forest: &ForestParams,
    lamp: &LampConfig,
) -> Result<(TrainedModel, Vec<f64>)> {
    let (reduced, _) = train.drop_zero_variance();
    if reduced.n_features() == 0 {
        return Err(Error::Training("every training column is zero".into()));
    }
    let mut history = Vec::new();
    let learner = match kind {
        ModelKind::Br => Learner::Br(fit_br(&reduced, forest)?),
        ModelKind::Cc => Learner::Cc(fit_cc(&reduced, forest)?),
        ModelKind::Lp => Learner::Lp(fit_lp(&reduced, forest)?),
        ModelKind::Lamp => {
            let (model, losses) = fit_lamp(&reduced, lamp)?;
            history = losses;
            Learner::Lamp(model)
        }
    };
    let model = TrainedModel::new(learner, train.schema().clone(), reduced.schema().clone())?;
    Ok((model, history))
}
