//! Canonical data model: labels, feature schema, samples and datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_FEATURES: usize = 215;
pub const NUM_LABELS: usize = 10;
/// First host-level feature index; everything below is connection-level.
pub const FIRST_HOST_FEATURE: usize = 175;

const SPLIT_STREAM: u64 = 0x5_0117;

/// Malware classes in canonical (alphabetical) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Backdoor,
    Downloader,
    Grayware,
    Keylogger,
    Miner,
    Ransomware,
    Spyware,
    Unknown,
    Virus,
    Worm,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [
        Label::Backdoor,
        Label::Downloader,
        Label::Grayware,
        Label::Keylogger,
        Label::Miner,
        Label::Ransomware,
        Label::Spyware,
        Label::Unknown,
        Label::Virus,
        Label::Worm,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Backdoor => "Backdoor",
            Label::Downloader => "Downloader",
            Label::Grayware => "Grayware",
            Label::Keylogger => "Keylogger",
            Label::Miner => "Miner",
            Label::Ransomware => "Ransomware",
            Label::Spyware => "Spyware",
            Label::Unknown => "Unknown",
            Label::Virus => "Virus",
            Label::Worm => "Worm",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label name {s:?}")))
    }
}

/// Fixed 10-slot label bitset over the canonical order.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSet(u16);

impl LabelSet {
    const MASK: u16 = (1 << NUM_LABELS) - 1;

    pub const fn empty() -> Self {
        LabelSet(0)
    }

    pub const fn all() -> Self {
        LabelSet(Self::MASK)
    }

    pub fn from_bits(bits: u16) -> Option<Self> {
        (bits & !Self::MASK == 0).then_some(LabelSet(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut set = LabelSet::empty();
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b).take(NUM_LABELS) {
            set.0 |= 1 << i;
        }
        set
    }

    pub fn to_bools(self) -> [bool; NUM_LABELS] {
        std::array::from_fn(|i| self.0 & (1 << i) != 0)
    }

    pub fn insert(&mut self, label: Label) {
        self.0 |= 1 << label.index();
    }

    pub fn with(mut self, label: Label) -> Self {
        self.insert(label);
        self
    }

    pub fn contains(self, label: Label) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn contains_index(self, i: usize) -> bool {
        i < NUM_LABELS && self.0 & (1 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Label> {
        Label::ALL.into_iter().filter(move |l| self.contains(*l))
    }

    /// Parses a `|`-separated list of canonical label names.
    pub fn parse(cell: &str) -> Result<Self> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Err(Error::invalid("empty label cell"));
        }
        cell.split('|')
            .map(|name| name.trim().parse::<Label>())
            .try_fold(LabelSet::empty(), |acc, l| Ok(acc.with(l?)))
    }
}

impl FromIterator<Label> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Label>>(iter: I) -> Self {
        iter.into_iter().fold(LabelSet::empty(), LabelSet::with)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Label::name).collect();
        f.write_str(&names.join("|"))
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Connection,
    Host,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    /// Index in the full 215-slot layout; survives column reduction.
    pub index: usize,
    pub name: String,
    pub group: FeatureGroup,
    pub description: String,
}

/// Ordered feature columns. The full schema has all 215 indices; a reduced
/// schema keeps a strictly increasing subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    entries: Vec<FeatureDescriptor>,
}

pub fn feature_name(index: usize) -> String {
    format!("feature_{index:03}")
}

fn parse_feature_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("feature_")?;
    if digits.len() != 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&i| i < NUM_FEATURES)
}

fn describe(index: usize) -> String {
    const IAT_STATS: [&str; 4] = ["max", "mean", "std", "75th percentile"];
    const PCTS: [&str; 4] = ["25th", "50th", "75th", "100th"];
    const DIRS: [&str; 3] = ["all", "outgoing", "incoming"];
    let s = match index {
        0..=11 => format!(
            "inter-arrival time {} ({} packets)",
            IAT_STATS[index % 4],
            DIRS[index / 4]
        ),
        12..=23 => {
            let k = index - 12;
            format!("{} percentile of {} packet times", PCTS[k % 4], DIRS[k / 4])
        }
        24 => "total packet count".into(),
        25 => "outgoing packet count".into(),
        26 => "incoming packet count".into(),
        27 => "outgoing packets in first 30".into(),
        28 => "incoming packets in first 30".into(),
        29 => "outgoing packets in last 30".into(),
        30 => "incoming packets in last 30".into(),
        31 => "packet concentration std".into(),
        32 => "packet concentration mean".into(),
        33 => "packets per second mean".into(),
        34 => "packets per second std".into(),
        35 => "outgoing packet ordering mean".into(),
        36 => "incoming packet ordering mean".into(),
        37 => "outgoing packet ordering std".into(),
        38 => "incoming packet ordering std".into(),
        39 => "packet concentration median".into(),
        40 => "packets per second median".into(),
        41 => "packets per second min".into(),
        42 => "packets per second max".into(),
        43 => "packet concentration max".into(),
        44 => "percentage incoming packets".into(),
        45 => "percentage outgoing packets".into(),
        46..=116 => format!("alternative concentration slot {}", index - 46),
        117..=137 => format!("alternative packets per second slot {}", index - 117),
        138 => "sum of alternative concentration".into(),
        139 => "sum of alternative packets per second".into(),
        140 => "sum of inter-arrival features".into(),
        141 => "sum of packet time percentiles".into(),
        142 => "sum of packet count features".into(),
        143..=174 => "zero padding".into(),
        175 => "number of Tor connections".into(),
        176 => "failed or rejected Tor connection attempts (S0/REJ)".into(),
        177 => "Tor connections per second".into(),
        178 => "failed attempts per second".into(),
        179 => "unique destination ports".into(),
        180 => "most used destination port".into(),
        181 => "number of non-standard destination ports".into(),
        182 => "most frequent non-standard destination port".into(),
        183 => "average Tor connection duration (s)".into(),
        184 => "minimum Tor connection duration (s)".into(),
        185 => "maximum Tor connection duration (s)".into(),
        186 => "Tor connections lasting at most 60 s".into(),
        187 => "average gap between Tor connection starts (s)".into(),
        188..=205 => {
            const WHAT: [&str; 6] = [
                "total packets",
                "total bytes",
                "bytes sent",
                "packets sent",
                "packets received",
                "bytes received",
            ];
            const AGG: [&str; 3] = ["mean", "median", "mode"];
            let k = index - 188;
            format!("{} per connection {}", WHAT[k / 3], AGG[k % 3])
        }
        206 => "DNS NXDOMAIN responses".into(),
        207 => "DNS REFUSED responses".into(),
        208 => "DNS SERVFAIL responses".into(),
        209 => "onion domain accesses".into(),
        210 => "unique onion domains".into(),
        211 => "rejected onion domain queries".into(),
        212 => "onion domains accessed in total".into(),
        213 => "links mentioning consensus".into(),
        214 => "URLs containing the tor keyword".into(),
        _ => String::new(),
    };
    s
}

fn descriptor(index: usize) -> FeatureDescriptor {
    FeatureDescriptor {
        index,
        name: feature_name(index),
        group: if index < FIRST_HOST_FEATURE {
            FeatureGroup::Connection
        } else {
            FeatureGroup::Host
        },
        description: describe(index),
    }
}

impl FeatureSchema {
    pub fn full() -> Self {
        FeatureSchema {
            entries: (0..NUM_FEATURES).map(descriptor).collect(),
        }
    }

    /// Schema over a strictly increasing set of original feature indices.
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(
                "feature indices must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= NUM_FEATURES) {
            return Err(Error::Schema(format!("feature index {bad} out of range")));
        }
        Ok(FeatureSchema {
            entries: indices.iter().map(|&i| descriptor(i)).collect(),
        })
    }

    /// Builds a schema from CSV column names (`feature_NNN`, increasing).
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let indices = names
            .iter()
            .map(|n| {
                parse_feature_name(n.as_ref())
                    .ok_or_else(|| Error::Schema(format!("bad feature column {:?}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(&indices)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == NUM_FEATURES
    }

    pub fn entries(&self) -> &[FeatureDescriptor] {
        &self.entries
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Column position of an original feature index, if present.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.entries.binary_search_by_key(&index, |e| e.index).ok()
    }

    /// Hex SHA-256 over the ordered column names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in self.names() {
            h.update(name.as_bytes());
            h.update(b",");
        }
        hex::encode(h.finalize())
    }

    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let indices: Vec<usize> = positions
            .iter()
            .map(|&p| {
                self.entries
                    .get(p)
                    .map(|e| e.index)
                    .ok_or_else(|| Error::Schema(format!("column position {p} out of range")))
            })
            .collect::<Result<_>>()?;
        Self::from_indices(&indices)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub features: Vec<f64>,
    pub labels: LabelSet,
    pub source_id: String,
}

/// Symmetric label co-occurrence graph with an empty diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelGraph {
    adjacency: [[bool; NUM_LABELS]; NUM_LABELS],
}

impl LabelGraph {
    pub fn from_edges(edges: &[(Label, Label)]) -> Self {
        let mut g = LabelGraph::default();
        for &(a, b) in edges {
            if a != b {
                g.adjacency[a.index()][b.index()] = true;
                g.adjacency[b.index()][a.index()] = true;
            }
        }
        g
    }

    pub fn has_edge(&self, a: Label, b: Label) -> bool {
        self.adjacency[a.index()][b.index()]
    }

    pub fn adjacency(&self) -> &[[bool; NUM_LABELS]; NUM_LABELS] {
        &self.adjacency
    }

    pub fn edges(&self) -> Vec<(Label, Label)> {
        let mut out = Vec::new();
        for i in 0..NUM_LABELS {
            for j in i + 1..NUM_LABELS {
                if self.adjacency[i][j] {
                    out.push((Label::ALL[i], Label::ALL[j]));
                }
            }
        }
        out
    }

    pub fn is_isolated(&self, label: Label) -> bool {
        !self.adjacency[label.index()].iter().any(|&b| b)
    }

    /// Message mask for label-to-label passing: graph edges plus self loops.
    pub fn message_mask(&self) -> Vec<Vec<bool>> {
        (0..NUM_LABELS)
            .map(|i| (0..NUM_LABELS).map(|j| i == j || self.adjacency[i][j]).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    schema: FeatureSchema,
    samples: Vec<TraceSample>,
}

/// Linear interpolation between closest ranks over the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        schema: FeatureSchema,
        samples: Vec<TraceSample>,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            check_sample(&schema, s).map_err(|message| Error::Data { row: i + 1, message })?;
        }
        Ok(Dataset {
            name: name.into(),
            schema,
            samples,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<TraceSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn label_sets(&self) -> Vec<LabelSet> {
        self.samples.iter().map(|s| s.labels).collect()
    }

    /// Values of one column across all samples.
    pub fn column(&self, position: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.features[position]).collect()
    }

    pub fn with_samples(&self, name: impl Into<String>, samples: Vec<TraceSample>) -> Dataset {
        Dataset {
            name: name.into(),
            schema: self.schema.clone(),
            samples,
        }
    }

    /// Reads a feature CSV whose header must match `schema` plus `labels`.
    pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, Some(schema), dataset_name(path))
    }

    /// Reads a feature CSV, taking the schema from its header.
    pub fn load_csv_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, None, dataset_name(path))
    }

    pub fn read_csv<R: Read>(
        reader: R,
        schema: Option<&FeatureSchema>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        let (labels_col, feature_cols) = match cols.split_last() {
            Some((last, rest)) if *last == "labels" => (*last, rest),
            _ => return Err(Error::Schema("last column must be `labels`".into())),
        };
        debug_assert_eq!(labels_col, "labels");
        let schema = match schema {
            Some(s) => {
                let expected: Vec<&str> = s.names().collect();
                if expected != feature_cols {
                    let detail = if feature_cols.len() < expected.len() {
                        "missing columns"
                    } else if feature_cols.len() > expected.len() {
                        "extra columns"
                    } else {
                        "column names differ"
                    };
                    return Err(Error::Schema(format!(
                        "header does not match schema ({detail}: expected {} feature columns, found {})",
                        expected.len(),
                        feature_cols.len()
                    )));
                }
                s.clone()
            }
            None => FeatureSchema::from_names(feature_cols)?,
        };
        let width = schema.len() + 1;
        let mut samples = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::Data {
                row,
                message: e.to_string(),
            })?;
            if record.len() != width {
                return Err(Error::Data {
                    row,
                    message: format!("expected {width} cells, found {}", record.len()),
                });
            }
            let mut features = Vec::with_capacity(schema.len());
            for (col, cell) in record.iter().take(schema.len()).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Data {
                    row,
                    message: format!("non-numeric value {cell:?} in column {}", header[col].to_string()),
                })?;
                if !v.is_finite() {
                    return Err(Error::Data {
                        row,
                        message: format!("non-finite value in column {}", &header[col]),
                    });
                }
                features.push(v);
            }
            let labels = LabelSet::parse(&record[schema.len()]).map_err(|e| Error::Data {
                row,
                message: match e {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                },
            })?;
            if !(1..=4).contains(&labels.len()) {
                return Err(Error::Data {
                    row,
                    message: format!("{} labels; expected 1 to 4", labels.len()),
                });
            }
            samples.push(TraceSample {
                features,
                labels,
                source_id: format!("row{row}"),
            });
        }
        Ok(Dataset {
            name: name.into(),
            schema,
            samples,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.to_writer(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_writer<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut line = String::new();
        for name in self.schema.names() {
            line.push_str(name);
            line.push(',');
        }
        line.push_str("labels\n");
        w.write_all(line.as_bytes())?;
        for s in &self.samples {
            line.clear();
            for v in &s.features {
                line.push_str(&format!("{v}"));
                line.push(',');
            }
            line.push_str(&s.labels.to_string());
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Seeded shuffle followed by a prefix/suffix cut at `floor(fraction * n)`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        if self.samples.len() < 2 {
            return Err(Error::invalid("split needs at least 2 samples"));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[SPLIT_STREAM]));
        let n_train = (train_fraction * self.samples.len() as f64).floor() as usize;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].clone()).collect();
        Ok((
            self.with_samples(format!("{}-train", self.name), pick(&order[..n_train])),
            self.with_samples(format!("{}-test", self.name), pick(&order[n_train..])),
        ))
    }

    /// Removes every feature that is zero for all samples. Returns the reduced
    /// dataset and the removed original feature indices (ascending).
    pub fn drop_zero_variance(&self) -> (Dataset, Vec<usize>) {
        let mut keep = Vec::new();
        let mut removed = Vec::new();
        for (pos, entry) in self.schema.entries().iter().enumerate() {
            if self.samples.iter().all(|s| s.features[pos] == 0.0) {
                removed.push(entry.index);
            } else {
                keep.push(pos);
            }
        }
        (self.select_columns(&keep), removed)
    }

    /// Keeps the given column positions (must be strictly increasing).
    pub fn select_columns(&self, positions: &[usize]) -> Dataset {
        let schema = self
            .schema
            .select(positions)
            .expect("positions come from this schema");
        let samples = self
            .samples
            .iter()
            .map(|s| TraceSample {
                features: positions.iter().map(|&p| s.features[p]).collect(),
                labels: s.labels,
                source_id: s.source_id.clone(),
            })
            .collect();
        Dataset {
            name: self.name.clone(),
            schema,
            samples,
        }
    }

    /// Projects the dataset onto a target schema whose columns it contains.
    pub fn project_to(&self, target: &FeatureSchema) -> Result<Dataset> {
        let positions = target
            .indices()
            .into_iter()
            .map(|i| {
                self.schema.position_of(i).ok_or_else(|| {
                    Error::Schema(format!("dataset lacks column {}", feature_name(i)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&positions))
    }

    pub fn cooccurrence_graph(&self) -> LabelGraph {
        let mut g = LabelGraph::default();
        for s in &self.samples {
            let labels: Vec<usize> = s.labels.iter().map(Label::index).collect();
            for &a in &labels {
                for &b in &labels {
                    if a != b {
                        g.adjacency[a][b] = true;
                    }
                }
            }
        }
        g
    }

    pub fn class_distribution(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0; NUM_LABELS];
        for s in &self.samples {
            for l in s.labels.iter() {
                counts[l.index()] += 1;
            }
        }
        counts
    }

    /// Distinct label combinations with their sample counts.
    pub fn label_combinations(&self) -> BTreeMap<LabelSet, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.labels).or_insert(0) += 1;
        }
        out
    }

    /// Projects every label set onto `keep`, dropping samples left empty.
    pub fn filter_to_labels(&self, keep: LabelSet) -> Result<Dataset> {
        if keep.is_empty() {
            return Err(Error::invalid("label filter must keep at least one label"));
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                let labels = s.labels.intersection(keep);
                (!labels.is_empty()).then(|| TraceSample {
                    features: s.features.clone(),
                    labels,
                    source_id: s.source_id.clone(),
                })
            })
            .collect();
        Ok(self.with_samples(self.name.clone(), samples))
    }
}

fn check_sample(schema: &FeatureSchema, s: &TraceSample) -> std::result::Result<(), String> {
    if s.features.len() != schema.len() {
        return Err(format!(
            "feature vector has {} values, schema has {}",
            s.features.len(),
            schema.len()
        ));
    }
    if let Some(pos) = s.features.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value in column {}", schema.entries()[pos].name));
    }
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(features: Vec<f64>, labels: &[Label], id: &str) -> TraceSample {
        TraceSample {
            features,
            labels: labels.iter().copied().collect(),
            source_id: id.into(),
        }
    }

    fn small(schema: &FeatureSchema, n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let feats = (0..schema.len()).map(|k| (i * 7 + k) as f64).collect();
                sample(feats, &[Label::ALL[i % NUM_LABELS]], &format!("s{i:02}"))
            })
            .collect();
        Dataset::new("small", schema.clone(), samples).unwrap()
    }

    #[test]
    fn full_schema_layout() {
        let s = FeatureSchema::full();
        assert_eq!(s.len(), NUM_FEATURES);
        for (i, e) in s.entries().iter().enumerate() {
            assert_eq!(e.index, i);
            let expected = if i < 175 {
                FeatureGroup::Connection
            } else {
                FeatureGroup::Host
            };
            assert_eq!(e.group, expected);
        }
        assert_eq!(s.entries()[183].name, "feature_183");
    }

    #[test]
    fn labels_parse_from_pipe_list() {
        let set = LabelSet::parse("Downloader|Grayware").unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.contains(Label::Downloader) && set.contains(Label::Grayware));
        assert_eq!(set.to_string(), "Downloader|Grayware");
        assert!(LabelSet::parse("").is_err());
        assert!(LabelSet::parse("Trojan").is_err());
    }

    #[test]
    fn csv_reports_row_numbers() {
        let schema = FeatureSchema::from_indices(&[0, 1]).unwrap();
        let ok = "feature_000,feature_001,labels\n1,2,Worm\n3.5,4,Downloader|Grayware\n";
        let d = Dataset::read_csv(ok.as_bytes(), Some(&schema), "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(
            d.samples()[1].labels,
            LabelSet::parse("Downloader|Grayware").unwrap()
        );

        let cases = [
            ("feature_000,feature_001,labels\n1,2,Worm\n1,x,Worm\n", 2),
            ("feature_000,feature_001,labels\n1,2,Trojan\n", 1),
            ("feature_000,feature_001,labels\n1,2,\n", 1),
            ("feature_000,feature_001,labels\n1,2,Worm\n1,inf,Worm\n", 2),
            ("feature_000,feature_001,labels\n1,2,3,Worm\n", 1),
        ];
        for (text, row) in cases {
            match Dataset::read_csv(text.as_bytes(), Some(&schema), "t") {
                Err(Error::Data { row: r, .. }) => assert_eq!(r, row, "{text}"),
                other => panic!("expected data error for {text:?}, got {other:?}"),
            }
        }
        let missing = "feature_000,labels\n1,Worm\n";
        assert!(matches!(
            Dataset::read_csv(missing.as_bytes(), Some(&schema), "t"),
            Err(Error::Schema(_))
        ));
        let extra = "feature_000,feature_001,feature_002,labels\n1,2,3,Worm\n";
        assert!(matches!(
            Dataset::read_csv(extra.as_bytes(), Some(&schema), "t"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn label_cardinality_enforced_at_load() {
        let schema = FeatureSchema::from_indices(&[0]).unwrap();
        let text = "feature_000,labels\n1,Worm|Virus|Miner|Grayware|Downloader\n";
        assert!(matches!(
            Dataset::read_csv(text.as_bytes(), Some(&schema), "t"),
            Err(Error::Data { row: 1, .. })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let schema = FeatureSchema::from_indices(&[0, 1, 2]).unwrap();
        let d = small(&schema, 10);
        for seed in [0, 1, 99] {
            let (tr, te) = d.split(0.7, seed).unwrap();
            assert_eq!((tr.len(), te.len()), (7, 3));
            let (tr2, te2) = d.split(0.7, seed).unwrap();
            assert_eq!(tr, tr2);
            assert_eq!(te, te2);
            let mut union: Vec<_> = tr.samples().iter().chain(te.samples()).cloned().collect();
            union.sort_by(|a, b| a.source_id.cmp(&b.source_id));
            assert_eq!(union, d.samples());
        }
        assert!(d.split(0.0, 1).is_err());
        assert!(d.split(1.0, 1).is_err());
    }

    #[test]
    fn zero_variance_columns_removed() {
        let schema = FeatureSchema::from_indices(&[0, 1, 2, 3, 4, 5, 6]).unwrap();
        let mut d = small(&schema, 6);
        for s in &mut d.samples {
            s.features[5] = 0.0;
        }
        let (reduced, removed) = d.drop_zero_variance();
        assert_eq!(removed, vec![5]);
        assert_eq!(reduced.n_features(), 6);
        assert_eq!(reduced.schema().indices(), vec![0, 1, 2, 3, 4, 6]);

        let (same, none) = small(&schema, 6).drop_zero_variance();
        assert!(none.is_empty());
        assert_eq!(same.n_features(), 7);
    }

    #[test]
    fn cooccurrence_edges() {
        let schema = FeatureSchema::from_indices(&[0]).unwrap();
        let single = small(&schema, 20);
        assert!(single.cooccurrence_graph().edges().is_empty());

        let d = Dataset::new(
            "one",
            schema,
            vec![sample(vec![0.0], &[Label::Ransomware, Label::Downloader], "a")],
        )
        .unwrap();
        let g = d.cooccurrence_graph();
        assert_eq!(g.edges(), vec![(Label::Downloader, Label::Ransomware)]);
        assert!(g.has_edge(Label::Ransomware, Label::Downloader));
        assert!(g.is_isolated(Label::Unknown));
    }

    #[test]
    fn class_distribution_counts_every_label() {
        let schema = FeatureSchema::from_indices(&[0]).unwrap();
        let empty = Dataset::new("e", schema.clone(), vec![]).unwrap();
        assert_eq!(empty.class_distribution(), [0; NUM_LABELS]);
        let d = Dataset::new(
            "d",
            schema,
            vec![
                sample(vec![1.0], &[Label::Grayware, Label::Downloader], "a"),
                sample(vec![1.0], &[Label::Grayware], "b"),
            ],
        )
        .unwrap();
        let c = d.class_distribution();
        assert_eq!(c[Label::Grayware.index()], 2);
        assert_eq!(c[Label::Downloader.index()], 1);
        assert!(c.iter().sum::<usize>() > d.len());
    }

    #[test]
    fn label_filter_projects_and_drops() {
        let schema = FeatureSchema::from_indices(&[0]).unwrap();
        let d = Dataset::new(
            "d",
            schema,
            vec![
                sample(vec![1.0], &[Label::Spyware], "a"),
                sample(vec![2.0], &[Label::Ransomware, Label::Spyware], "b"),
            ],
        )
        .unwrap();
        assert_eq!(d.filter_to_labels(LabelSet::all()).unwrap(), d);
        let keep: LabelSet = [
            Label::Downloader,
            Label::Grayware,
            Label::Miner,
            Label::Ransomware,
        ]
        .into_iter()
        .collect();
        let f = d.filter_to_labels(keep).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.samples()[0].labels, LabelSet::empty().with(Label::Ransomware));
        assert!(d.filter_to_labels(LabelSet::empty()).is_err());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 25.0).unwrap(), 1.75);
        let v = [3.0, -1.0, 8.0, 2.5];
        assert_eq!(percentile(&v, 0.0).unwrap(), -1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 8.0);
        assert_eq!(percentile(&[5.0], 37.0).unwrap(), 5.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 100.5).is_err());
    }

    /// Reference: for each candidate rank, weight the two neighbouring order
    /// statistics explicitly.
    fn percentile_reference(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n == 1 {
            return v[0];
        }
        let rank = p / 100.0 * (n - 1) as f64;
        let mut acc = 0.0;
        for (k, x) in v.iter().enumerate() {
            let w = (1.0 - (rank - k as f64).abs()).max(0.0);
            acc += w * x;
        }
        acc
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn percentile_matches_reference(
            values in prop::collection::vec(-1e3f64..1e3, 1..40),
            p in 0.0f64..=100.0,
        ) {
            let got = percentile(&values, p).unwrap();
            let want = percentile_reference(&values, p);
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
        }

        #[test]
        fn cooccurrence_matches_pair_scan(bits in prop::collection::vec(1u16..1024, 1..30)) {
            let schema = FeatureSchema::from_indices(&[0]).unwrap();
            let samples = bits.iter().map(|&b| TraceSample {
                features: vec![0.0],
                labels: LabelSet::from_bits(b).unwrap(),
                source_id: String::new(),
            }).collect();
            let d = Dataset::new("p", schema, samples).unwrap();
            let g = d.cooccurrence_graph();
            for i in 0..NUM_LABELS {
                for j in 0..NUM_LABELS {
                    let scan = i != j && bits.iter().any(|&b| b & (1 << i) != 0 && b & (1 << j) != 0);
                    prop_assert_eq!(g.adjacency()[i][j], scan);
                }
            }
        }

        #[test]
        fn csv_round_trip(rows in prop::collection::vec(
            (prop::collection::vec(-1e6f64..1e6, 3), 1u16..1024), 1..20)
        ) {
            let schema = FeatureSchema::from_indices(&[4, 9, 200]).unwrap();
            let samples: Vec<_> = rows.iter().enumerate().map(|(i, (f, b))| {
                let mut labels = LabelSet::from_bits(*b).unwrap();
                while labels.len() > 4 {
                    labels = LabelSet::from_bits(labels.bits() & (labels.bits() - 1)).unwrap();
                }
                TraceSample { features: f.clone(), labels, source_id: format!("row{}", i + 1) }
            }).collect();
            let d = Dataset::new("rt", schema.clone(), samples).unwrap();
            let mut buf = Vec::new();
            d.to_writer(&mut buf).unwrap();
            let back = Dataset::read_csv(buf.as_slice(), Some(&schema), "rt").unwrap();
            prop_assert_eq!(back.len(), d.len());
            for (a, b) in back.samples().iter().zip(d.samples()) {
                prop_assert_eq!(a.labels, b.labels);
                for (x, y) in a.features.iter().zip(&b.features) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }
}
