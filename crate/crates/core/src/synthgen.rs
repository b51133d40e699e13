//! Synthetic corpora with a fixed label-combination structure and planted
//! class-conditional feature signals.
//!
//! Each [`ClassProfile`] owns one label combination. Its samples draw every
//! listed signal feature from `N(mean, std)` and every other feature from the
//! shared background distribution. The deviation from the mean can be snapped
//! to a grid (so each distribution keeps its own value lattice) and values can
//! be clamped at zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, FeatureSchema, Label, LabelSet, TraceSample, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::rng;

const GEN_STREAM: u64 = 0x6E_6E;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Signal {
    /// Original feature index (0-214).
    pub feature: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub combo: LabelSet,
    pub count: usize,
    pub signals: Vec<Signal>,
    pub background_mean: f64,
    pub background_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub name: String,
    pub profiles: Vec<ClassProfile>,
    pub seed: u64,
    pub schema: FeatureSchema,
    pub clamp_nonnegative: bool,
    /// Grid spacing for the random deviation from each mean, so values lie
    /// on a lattice anchored at the mean; 0 disables rounding.
    pub quantum: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::Config("at least one profile is required".into()));
        }
        if !(self.quantum >= 0.0 && self.quantum.is_finite()) {
            return Err(Error::Config(format!("invalid quantum {}", self.quantum)));
        }
        let mut seen = BTreeSet::new();
        for (i, p) in self.profiles.iter().enumerate() {
            if p.combo.is_empty() {
                return Err(Error::Config(format!("profile {i} has an empty combo")));
            }
            if !seen.insert(p.combo) {
                return Err(Error::Config(format!("duplicate combo {}", p.combo)));
            }
            if p.count == 0 {
                return Err(Error::Config(format!("profile {i} has count 0")));
            }
            if !(p.background_std >= 0.0 && p.background_mean.is_finite()) {
                return Err(Error::Config(format!("profile {i} has an invalid background")));
            }
            let mut features = BTreeSet::new();
            for s in &p.signals {
                if self.schema.position_of(s.feature).is_none() {
                    return Err(Error::Config(format!(
                        "profile {i} signals feature {} which is not in the schema",
                        s.feature
                    )));
                }
                if !(s.std >= 0.0 && s.mean.is_finite() && s.std.is_finite()) {
                    return Err(Error::Config(format!(
                        "profile {i} feature {} has invalid mean/std",
                        s.feature
                    )));
                }
                if !features.insert(s.feature) {
                    return Err(Error::Config(format!(
                        "profile {i} lists feature {} twice",
                        s.feature
                    )));
                }
            }
        }
        Ok(())
    }

    /// `key = value` serialization, one profile block per combo.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "clamp_nonnegative = {}", self.clamp_nonnegative);
        let _ = writeln!(out, "quantum = {}", self.quantum);
        let indices: Vec<String> = self.schema.indices().iter().map(|i| i.to_string()).collect();
        if !self.schema.is_full() {
            let _ = writeln!(out, "features = {}", indices.join(","));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            let _ = writeln!(out, "profile.{i}.combo = {}", p.combo);
            let _ = writeln!(out, "profile.{i}.count = {}", p.count);
            let _ = writeln!(
                out,
                "profile.{i}.background = {},{}",
                p.background_mean, p.background_std
            );
            for s in &p.signals {
                let _ = writeln!(out, "profile.{i}.signal.{} = {},{}", s.feature, s.mean, s.std);
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let schema = match get("features") {
            Some(list) => {
                let idx = list
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("features: {e}")))?;
                FeatureSchema::from_indices(&idx)?
            }
            None => FeatureSchema::full(),
        };
        let mut profiles: BTreeMap<usize, ClassProfile> = BTreeMap::new();
        for (key, value) in &pairs {
            let Some(rest) = key.strip_prefix("profile.") else {
                continue;
            };
            let mut parts = rest.splitn(2, '.');
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad key {key}")))?;
            let field = parts
                .next()
                .ok_or_else(|| Error::Config(format!("bad key {key}")))?;
            let p = profiles.entry(idx).or_insert_with(|| ClassProfile {
                combo: LabelSet::empty(),
                count: 0,
                signals: Vec::new(),
                background_mean: 0.0,
                background_std: 0.0,
            });
            match field {
                "combo" => {
                    p.combo = LabelSet::parse(value)
                        .map_err(|e| Error::Config(format!("{key}: {e}")))?
                }
                "count" => p.count = parse_num(key, value)?,
                "background" => {
                    let (m, s) = parse_pair(key, value)?;
                    p.background_mean = m;
                    p.background_std = s;
                }
                f => {
                    let feature: usize = f
                        .strip_prefix("signal.")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
                    let (mean, std) = parse_pair(key, value)?;
                    p.signals.push(Signal { feature, mean, std });
                }
            }
        }
        for p in profiles.values_mut() {
            p.signals.sort_by_key(|s| s.feature);
        }
        let config = GeneratorConfig {
            name: get("name").unwrap_or("synthetic").to_string(),
            profiles: profiles.into_values().collect(),
            seed: get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(0),
            schema,
            clamp_nonnegative: get("clamp_nonnegative")
                .map(|v| parse_num("clamp_nonnegative", v))
                .transpose()?
                .unwrap_or(true),
            quantum: get("quantum")
                .map(|v| parse_num("quantum", v))
                .transpose()?
                .unwrap_or(0.0),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `mean,std`")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

fn snap(v: f64, quantum: f64) -> f64 {
    if quantum > 0.0 {
        (v / quantum).round() * quantum
    } else {
        v
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = &config.schema;
    let mut samples = Vec::with_capacity(config.profiles.iter().map(|p| p.count).sum());
    for (pi, profile) in config.profiles.iter().enumerate() {
        let mut rng = rng::stream(config.seed, &[GEN_STREAM, pi as u64]);
        let mut dists = Vec::with_capacity(schema.len());
        for entry in schema.entries() {
            let (mean, std) = profile
                .signals
                .iter()
                .find(|s| s.feature == entry.index)
                .map_or((profile.background_mean, profile.background_std), |s| {
                    (s.mean, s.std)
                });
            dists.push((mean, Normal::new(0.0, 1.0).expect("unit normal"), std));
        }
        for k in 0..profile.count {
            let features = dists
                .iter()
                .map(|(mean, unit, std)| {
                    let z: f64 = unit.sample(&mut rng);
                    let mut v = mean + snap(std * z, config.quantum);
                    if config.clamp_nonnegative && v < 0.0 {
                        v = 0.0;
                    }
                    // -0.0 would print as "-0" and break zero-column detection.
                    v + 0.0
                })
                .collect();
            samples.push(TraceSample {
                features,
                labels: profile.combo,
                source_id: format!("p{pi:02}-{k:04}"),
            });
        }
    }
    Dataset::new(config.name.clone(), schema.clone(), samples)
}

/// Features that are constant zero in every default-profile sample.
pub fn d5_zero_features() -> Vec<usize> {
    (143..=174).chain([176, 178]).chain(206..=214).collect()
}

/// Label combinations and their sample counts for the default profile.
/// Version 1. The per-label sums reproduce the published class distribution
/// of the 2,027-instance corpus; Unknown never co-occurs.
pub const D5_COMBOS_V1: [(&[Label], usize); 22] = {
    use Label::*;
    [
        (&[Unknown], 179),
        (&[Grayware], 61),
        (&[Downloader], 101),
        (&[Ransomware], 180),
        (&[Miner], 100),
        (&[Backdoor], 20),
        (&[Virus], 25),
        (&[Spyware], 10),
        (&[Downloader, Grayware], 752),
        (&[Grayware, Miner], 120),
        (&[Downloader, Ransomware], 90),
        (&[Grayware, Ransomware], 45),
        (&[Grayware, Worm], 31),
        (&[Grayware, Spyware], 20),
        (&[Backdoor, Downloader], 30),
        (&[Virus, Worm], 14),
        (&[Keylogger, Spyware], 6),
        (&[Downloader, Grayware, Ransomware], 50),
        (&[Grayware, Miner, Worm], 30),
        (&[Downloader, Grayware, Miner], 134),
        (&[Downloader, Grayware, Virus], 20),
        (&[Backdoor, Downloader, Keylogger, Spyware], 9),
    ]
};

pub const D5_BACKGROUND: (f64, f64) = (50.0, 15.0);

/// Feature distributions that replace the shared background for profiles
/// without a signal on that feature. They sit close enough to the planted
/// magnitude signals that thresholds on a single feature stay ambiguous.
pub const D5_FEATURE_BASELINE: [(usize, f64, f64); 9] = [
    (16, 14.0, 4.0),
    (17, 24.0, 4.0),
    (183, 13.0, 4.0),
    (185, 20.0, 7.0),
    (187, 62.0, 8.0),
    (194, 32.0, 5.0),
    (196, 66.0, 6.0),
    (199, 26.0, 4.0),
    (202, 66.0, 8.0),
];

/// Per-label planted signals `(feature, mean, std)` of the default profile.
///
/// Two kinds are mixed. Magnitude signals shift a feature away from its
/// baseline; where two labels push a shared feature in opposite directions
/// their combination lands back on the baseline. Code signals keep a
/// baseline-like location but draw from a value lattice offset by a
/// label-specific fraction, standing in for protocol constants (ports, record
/// sizes) that identify a family exactly while overlapping other families in
/// magnitude.
pub fn d5_label_signals(label: Label) -> &'static [(usize, f64, f64)] {
    use Label::*;
    match label {
        Downloader => &[
            (183, 7.58, 0.5),
            (185, 13.63, 2.0),
            (196, 50.0, 6.0),
        ],
        Ransomware => &[
            (183, 21.14, 8.0),
            (185, 48.01, 24.0),
            (199, 31.0, 4.0),
            (17, 29.0, 4.0),
            (16, 19.0, 4.0),
        ],
        Grayware => &[
            (202, 78.0, 8.0),
            (196, 82.0, 6.0),
            (197, 50.25, 3.0),
            (198, 45.25, 3.0),
        ],
        Miner => &[
            (187, 78.0, 8.0),
            (194, 24.0, 5.0),
            (199, 40.0, 4.0),
            (202, 54.0, 8.0),
            (180, 50.375, 3.0),
        ],
        Backdoor => &[(201, 36.625, 1.0), (190, 81.625, 1.0)],
        Keylogger => &[(200, 61.875, 1.0), (191, 27.875, 1.0)],
        Spyware => &[(195, 44.125, 1.0), (192, 58.125, 1.0)],
        Virus => &[(203, 17.0625, 1.0), (186, 66.0625, 1.0)],
        Worm => &[(184, 29.3125, 1.0), (189, 71.3125, 1.0)],
        Unknown => &[(181, 3.0, 1.0), (182, 9.0, 1.0)],
    }
}

/// Smallest multi-label combination that carries a bundle signature.
pub const D5_BUNDLE_MIN_COUNT: usize = 30;

/// Shift of a bundle signature above the background mean, in background stds.
pub const D5_BUNDLE_SHIFT: f64 = 3.0;

/// Features carrying the bundle signature of the combination at `position`
/// in [`D5_COMBOS_V1`], or `None` when the combination has none.
///
/// Established multi-label combinations (bundled droppers, adware carrying a
/// miner) behave as one family with traffic habits of their own, beyond what
/// their individual labels explain. Each gets three dedicated
/// connection-level features shifted upwards; singletons and small bundles
/// get none.
pub fn d5_bundle_features(position: usize) -> Option<[usize; 3]> {
    let (labels, count) = D5_COMBOS_V1.get(position)?;
    (labels.len() > 1 && *count >= D5_BUNDLE_MIN_COUNT)
        .then(|| [20 + 2 * position, 21 + 2 * position, 70 + position])
}

/// Merges the signals of every label in a combo. Features signalled by more
/// than one label take the mean of the means and the largest std; features
/// no label signals fall back to the bundle signature, the feature baseline,
/// then the background.
fn combo_signals(position: usize, combo: LabelSet) -> Vec<Signal> {
    let mut merged: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for label in combo.iter() {
        for &(feature, mean, std) in d5_label_signals(label) {
            let e = merged.entry(feature).or_insert((0.0, 0.0, 0));
            e.0 += mean;
            e.1 = e.1.max(std);
            e.2 += 1;
        }
    }
    let mut signals: Vec<Signal> = merged
        .into_iter()
        .map(|(feature, (sum, std, n))| Signal {
            feature,
            mean: sum / n as f64,
            std,
        })
        .collect();
    let (bg_mean, bg_std) = D5_BACKGROUND;
    for feature in d5_bundle_features(position).into_iter().flatten() {
        if !signals.iter().any(|s| s.feature == feature) {
            signals.push(Signal {
                feature,
                mean: bg_mean + D5_BUNDLE_SHIFT * bg_std,
                std: bg_std,
            });
        }
    }
    for (feature, mean, std) in D5_FEATURE_BASELINE {
        if !signals.iter().any(|s| s.feature == feature) {
            signals.push(Signal { feature, mean, std });
        }
    }
    signals.extend(d5_zero_features().into_iter().map(|feature| Signal {
        feature,
        mean: 0.0,
        std: 0.0,
    }));
    signals.sort_by_key(|s| s.feature);
    signals
}

pub fn default_d5_profile() -> GeneratorConfig {
    default_d5_profile_seeded(0)
}

pub fn default_d5_profile_seeded(seed: u64) -> GeneratorConfig {
    let profiles = D5_COMBOS_V1
        .iter()
        .enumerate()
        .map(|(position, (labels, count))| {
            let combo: LabelSet = labels.iter().copied().collect();
            ClassProfile {
                combo,
                count: *count,
                signals: combo_signals(position, combo),
                background_mean: D5_BACKGROUND.0,
                background_std: D5_BACKGROUND.1,
            }
        })
        .collect();
    GeneratorConfig {
        name: "d5-synthetic".into(),
        profiles,
        seed,
        schema: FeatureSchema::full(),
        clamp_nonnegative: true,
        quantum: 1.0,
    }
}

const _: () = assert!(NUM_FEATURES == 215);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NUM_LABELS;

    #[test]
    fn default_profile_matches_class_totals() {
        let cfg = default_d5_profile();
        cfg.validate().unwrap();
        let total: usize = cfg.profiles.iter().map(|p| p.count).sum();
        assert_eq!(total, 2027);
        let mut per_label = [0usize; NUM_LABELS];
        for p in &cfg.profiles {
            for l in p.combo.iter() {
                per_label[l.index()] += p.count;
            }
        }
        use Label::*;
        let expected = [
            (Grayware, 1263),
            (Downloader, 1186),
            (Ransomware, 365),
            (Miner, 384),
            (Virus, 59),
            (Spyware, 45),
            (Backdoor, 59),
            (Keylogger, 15),
            (Worm, 75),
            (Unknown, 179),
        ];
        for (l, n) in expected {
            assert_eq!(per_label[l.index()], n, "{l}");
        }
        assert_eq!(cfg.profiles.len(), 22);
        assert!(cfg.profiles.iter().all(|p| p.combo.len() <= 4));
    }

    #[test]
    fn generated_d5_structure() {
        let d = generate(&default_d5_profile()).unwrap();
        assert_eq!(d.len(), 2027);
        let dist = d.class_distribution();
        assert_eq!(dist[Label::Grayware.index()], 1263);
        assert_eq!(dist[Label::Downloader.index()], 1186);
        assert_eq!(dist[Label::Ransomware.index()], 365);
        assert_eq!(d.label_combinations().len(), 22);
        assert!(d.cooccurrence_graph().is_isolated(Label::Unknown));
        let (_, removed) = d.drop_zero_variance();
        assert_eq!(removed, d5_zero_features());
        assert_eq!(removed.len(), 43);
    }

    #[test]
    fn zero_std_reproduces_means() {
        let schema = FeatureSchema::from_indices(&[0, 1, 2]).unwrap();
        let cfg = GeneratorConfig {
            name: "flat".into(),
            profiles: vec![ClassProfile {
                combo: LabelSet::empty().with(Label::Worm),
                count: 5,
                signals: vec![Signal {
                    feature: 1,
                    mean: 3.25,
                    std: 0.0,
                }],
                background_mean: 7.0,
                background_std: 0.0,
            }],
            seed: 3,
            schema,
            clamp_nonnegative: false,
            quantum: 0.0,
        };
        let d = generate(&cfg).unwrap();
        for s in d.samples() {
            assert_eq!(s.features, vec![7.0, 3.25, 7.0]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = default_d5_profile_seeded(11);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&default_d5_profile_seeded(12)).unwrap();
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn planted_ransomware_mean_within_three_standard_errors() {
        let cfg = default_d5_profile_seeded(5);
        let schema = FeatureSchema::full();
        let mut ransomware_only = cfg
            .profiles
            .iter()
            .find(|p| p.combo == LabelSet::empty().with(Label::Ransomware))
            .unwrap()
            .clone();
        ransomware_only.count = 365;
        let cfg = GeneratorConfig {
            profiles: vec![ransomware_only],
            ..cfg
        };
        let d = generate(&cfg).unwrap();
        let col = d.column(schema.position_of(183).unwrap());
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 21.14).abs() <= 3.0 * sd / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn combo_multiset_matches_config() {
        let cfg = default_d5_profile_seeded(2);
        let d = generate(&cfg).unwrap();
        let combos = d.label_combinations();
        for p in &cfg.profiles {
            assert_eq!(combos[&p.combo], p.count);
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = default_d5_profile_seeded(9);
        let back = GeneratorConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(GeneratorConfig::from_kv("seed = 1\n").is_err());
        assert!(GeneratorConfig::from_kv("profile.0.combo = Worm\nprofile.0.count = x\n").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = default_d5_profile();
        cfg.profiles[1].combo = cfg.profiles[0].combo;
        assert!(cfg.validate().is_err());
        let mut cfg = default_d5_profile();
        cfg.profiles[0].signals[0].std = -1.0;
        assert!(cfg.validate().is_err());
    }
}
