use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use torlamp_core::baselines::ForestParams;
use torlamp_core::evasion::{report_label_set, robustness_delta, run_experiments, write_provenance, write_report_csv};
use torlamp_core::explain::{explain_all, write_exports, BackgroundSet, Estimator, Provenance};
use torlamp_core::featurizer::{featurize as featurize_session, read_sessions};
use torlamp_core::lamp::{LampConfig, MaskKind};
use torlamp_core::metrics::{classwise_pr, write_classwise_csv, write_summary_csv, PredictionBatch, SummaryRow};
use torlamp_core::model::{fit_model, ModelKind, MultiLabelModel, TrainedModel};
use torlamp_core::synthgen::{default_d5_profile_seeded, generate, GeneratorConfig};
use torlamp_core::{Dataset, Error, FeatureSchema, Label, LabelSet, Result, TraceSample};

use crate::settings::Settings;
use crate::{AttackArgs, EvaluateArgs, ExplainArgs, FeaturizeArgs, GenDataArgs, ReportArgs, SplitArgs, TrainArgs};

const RUN_CONFIG: &str = "run.cfg";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `<file>.run.cfg` next to a single-file output.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn parse_labels(key: &str, cell: &str) -> Result<LabelSet> {
    LabelSet::parse(&cell.replace(',', "|")).map_err(|e| Error::Config(format!("{key}: {e}")))
}

pub fn gen_data(a: GenDataArgs, s: &mut Settings) -> Result<()> {
    let profile = s.or("profile", a.profile, "d5".to_string())?;
    let custom = match profile.as_str() {
        "d5" => false,
        "custom" => true,
        other => return Err(Error::Config(format!("unknown profile `{other}` (expected d5 or custom)"))),
    };
    let generator_key = |k: &str| {
        custom && (k.starts_with("profile.") || ["name", "clamp_nonnegative", "quantum", "features"].contains(&k))
    };
    s.check_keys(&["threads", "profile", "seed", "out"], generator_key)?;
    let config = if custom {
        let path = s
            .resolved_config_path()
            .ok_or_else(|| Error::Config("profile custom reads the generator from --config FILE".into()))?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut config = GeneratorConfig::from_kv(&text)?;
        config.seed = s.or("seed", a.seed, config.seed)?;
        config
    } else {
        default_d5_profile_seeded(s.or("seed", a.seed, 0)?)
    };
    let out = s.out_file(a.out, "data.csv")?;
    let data = generate(&config)?;
    write_file(&out, csv_bytes(|w| data.to_writer(w)))?;
    let mut run = s.render();
    if custom {
        for line in config.to_kv().lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if !s.resolved().contains_key(key) {
                run.push_str(line);
                run.push('\n');
            }
        }
    }
    write_file(&sidecar(&out, ".run.cfg"), run)?;
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

pub fn split(a: SplitArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&["threads", "data", "fraction", "seed", "keep_labels", "out"], |_| false)?;
    let path: PathBuf = s.required("data", a.data)?;
    let fraction = s.or("fraction", a.fraction, 0.7)?;
    let seed = s.or("seed", a.seed, 0)?;
    let keep = s
        .optional("keep_labels", a.keep_labels)?
        .map(|cell| parse_labels("keep_labels", &cell))
        .transpose()?;
    let out = s.out_dir(a.out)?;
    let mut data = Dataset::load_csv_any(&path)?;
    if let Some(keep) = keep {
        data = data.filter_to_labels(keep)?;
    }
    let (train, test) = data.split(fraction, seed)?;
    create_dir(&out)?;
    train.write_csv(out.join("train.csv"))?;
    test.write_csv(out.join("test.csv"))?;
    write_file(&out.join(RUN_CONFIG), s.render())?;
    eprintln!("{} train / {} test samples in {}", train.len(), test.len(), out.display());
    Ok(())
}

const TRAIN_KEYS: [&str; 18] = [
    "threads",
    "model",
    "train",
    "seed",
    "out",
    "trees",
    "max_depth",
    "min_samples_leaf",
    "features_per_split",
    "epochs",
    "lr",
    "d_model",
    "d_hidden",
    "heads",
    "rounds",
    "dropout",
    "batch_size",
    "mask",
];

pub fn train(a: TrainArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&TRAIN_KEYS, |_| false)?;
    let kind_name: String = s.required("model", a.model)?;
    let kind = ModelKind::parse(&kind_name)?;
    let path: PathBuf = s.required("train", a.train)?;
    let seed = s.or("seed", a.seed, 0)?;
    let mut forest = ForestParams::default().with_seed(seed);
    let mut lamp = LampConfig {
        seed,
        ..LampConfig::default()
    };
    if kind == ModelKind::Lamp {
        lamp.epochs = s.or("epochs", a.epochs, lamp.epochs)?;
        lamp.learning_rate = s.or("lr", a.lr, lamp.learning_rate)?;
        lamp.d_model = s.or("d_model", a.d_model, lamp.d_model)?;
        lamp.d_hidden = s.or("d_hidden", a.d_hidden, lamp.d_hidden)?;
        lamp.heads = s.or("heads", a.heads, lamp.heads)?;
        lamp.rounds = s.or("rounds", a.rounds, lamp.rounds)?;
        lamp.dropout = s.or("dropout", a.dropout, lamp.dropout)?;
        lamp.batch_size = s.or("batch_size", a.batch_size, lamp.batch_size)?;
        lamp.label_mask = match s.or("mask", a.mask, "prior".to_string())?.as_str() {
            "prior" => MaskKind::Prior,
            "full" => MaskKind::Full,
            other => return Err(Error::Config(format!("unknown mask `{other}` (expected prior or full)"))),
        };
        lamp.validate()?;
    } else {
        forest.n_trees = s.or("trees", a.trees, forest.n_trees)?;
        forest.max_depth = s.optional("max_depth", a.max_depth)?;
        forest.min_samples_leaf = s.or("min_samples_leaf", a.min_samples_leaf, forest.min_samples_leaf)?;
        forest.features_per_split = s.optional("features_per_split", a.features_per_split)?;
        if forest.n_trees == 0 || forest.min_samples_leaf == 0 {
            return Err(Error::Config("trees and min_samples_leaf must be positive".into()));
        }
    }
    let out = s.out_file(a.out, &format!("{}.model", kind.name()))?;
    let data = Dataset::load_csv_any(&path)?;
    let (model, history) = fit_model(kind, &data, &forest, &lamp)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(&out)?;
    if !history.is_empty() {
        let mut loss = String::from("epoch,loss\n");
        for (epoch, l) in history.iter().enumerate() {
            let _ = writeln!(loss, "{},{l}", epoch + 1);
        }
        write_file(&sidecar(&out, ".loss.csv"), loss)?;
    }
    write_file(&sidecar(&out, ".run.cfg"), s.render())?;
    eprintln!(
        "trained {} on {} samples ({} of {} features kept) -> {}",
        kind.label(),
        data.len(),
        model.schema().len(),
        data.n_features(),
        out.display()
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&["threads", "model", "test", "out"], |_| false)?;
    let model_path: PathBuf = s.required("model", a.model)?;
    let test_path: PathBuf = s.required("test", a.test)?;
    let out = s.out_dir(a.out)?;
    let model = TrainedModel::load(&model_path)?;
    let test = Dataset::load_csv_any(&test_path)?;
    let predicted = model.predict_dataset(&test)?;
    let truth = test.label_sets();
    let batch = PredictionBatch::from_label_sets(&truth, &predicted)?;
    let row = SummaryRow::compute(model.kind().label(), &test.name, &batch);
    create_dir(&out)?;
    write_file(&out.join("summary.csv"), csv_bytes(|w| write_summary_csv(w, std::slice::from_ref(&row))))?;
    write_file(&out.join("classwise.csv"), csv_bytes(|w| write_classwise_csv(w, &classwise_pr(&batch))))?;
    let mut preds = String::from("row,true,predicted\n");
    for (i, (t, p)) in truth.iter().zip(&predicted).enumerate() {
        let _ = writeln!(preds, "{},{t},{p}", i + 1);
    }
    write_file(&out.join("predictions.csv"), preds)?;
    write_file(&out.join(RUN_CONFIG), s.render())?;
    eprintln!(
        "{}: MAP {:.4} MAR {:.4} HL {:.4} AC {:.4}",
        row.model, row.micro_precision.value, row.micro_recall.value, row.hamming_loss, row.subset_accuracy
    );
    Ok(())
}

pub fn explain(a: ExplainArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(
        &["threads", "model", "data", "estimator", "perms", "background", "samples", "labels", "seed", "out"],
        |_| false,
    )?;
    let model_path: PathBuf = s.required("model", a.model)?;
    let data_path: PathBuf = s.required("data", a.data)?;
    let estimator_name = s.or("estimator", a.estimator, "sampled".to_string())?;
    let estimator = match estimator_name.as_str() {
        "exact" => Estimator::Exact,
        "sampled" => Estimator::Sampled {
            n_perms: s.or("perms", a.perms, 200)?,
        },
        other => return Err(Error::Config(format!("unknown estimator `{other}` (expected exact or sampled)"))),
    };
    if estimator == (Estimator::Sampled { n_perms: 0 }) {
        return Err(Error::Config("perms must be at least 1".into()));
    }
    let background = s.or("background", a.background, 50)?;
    let n_samples = s.or("samples", a.samples, 20)?;
    let labels: Vec<usize> = match s.optional("labels", a.labels)? {
        Some(cell) => parse_labels("labels", &cell)?.iter().map(Label::index).collect(),
        None => (0..Label::ALL.len()).collect(),
    };
    let seed = s.or("seed", a.seed, 0)?;
    let out = s.out_dir(a.out)?;

    let model = TrainedModel::load(&model_path)?;
    let data = model.prepare(&Dataset::load_csv_any(&data_path)?)?;
    let take = if n_samples == 0 { data.len() } else { n_samples.min(data.len()) };
    let samples: Vec<Vec<f64>> = data.samples()[..take].iter().map(|x| x.features.clone()).collect();
    let bg = BackgroundSet::sample(&data, background, seed)?;
    let attributions = explain_all(model.as_model(), &samples, &labels, &bg, estimator, seed)?;
    let label_names: Vec<String> = Label::ALL.iter().map(|l| l.name().to_string()).collect();
    let provenance = Provenance {
        model: model.kind().label().to_string(),
        dataset: data.name.clone(),
        estimator: estimator_name,
        n_perms: match estimator {
            Estimator::Sampled { n_perms } => n_perms,
            Estimator::Exact => 0,
        },
        seed,
    };
    let written = write_exports(&out, data.schema(), &label_names, &samples, &attributions, &provenance)?;
    write_file(&out.join(RUN_CONFIG), s.render())?;
    eprintln!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

pub fn attack(a: AttackArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&["threads", "models", "test", "exclusive", "out"], |_| false)?;
    let dir: PathBuf = s.required("models", a.models)?;
    let test_path: PathBuf = s.required("test", a.test)?;
    let exclusive = s.or("exclusive", a.exclusive, true)?;
    let out = s.out_dir(a.out)?;

    let mut models = Vec::new();
    for kind in ModelKind::ALL {
        let path = dir.join(format!("{}.model", kind.name()));
        if path.exists() {
            models.push(TrainedModel::load(&path)?);
        }
    }
    let Some(first) = models.first() else {
        return Err(Error::invalid(format!("no br/cc/lp/lamp .model files in {}", dir.display())));
    };
    let test = Dataset::load_csv_any(&test_path)?.filter_to_labels(report_label_set())?;
    if let Some(m) = models.iter().find(|m| m.schema() != first.schema()) {
        return Err(Error::Schema(format!(
            "{} was trained on different columns than {}",
            m.kind().label(),
            first.kind().label()
        )));
    }
    for m in &models {
        m.check_schema(test.schema())?;
    }
    let test = first.prepare(&test)?;
    let named: Vec<(&str, &dyn MultiLabelModel)> = models.iter().map(|m| (m.kind().label(), m.as_model())).collect();
    let report = run_experiments(&named, &test, exclusive)?;

    create_dir(&out)?;
    let mut table = Vec::new();
    write_report_csv(&mut table, &report)?;
    write_file(&out.join("evasion.csv"), table)?;
    let mut provenance = Vec::new();
    write_provenance(&mut provenance, &report)?;
    write_file(&out.join("evasion_provenance.cfg"), provenance)?;
    let mut deltas = String::from(
        "model,ransomware_drop_e2,ransomware_drop_e3,downloader_rise_e2,downloader_rise_e3,grayware_rise_e2,grayware_rise_e3\n",
    );
    for d in robustness_delta(&report) {
        let _ = writeln!(
            deltas,
            "{},{:.6},{:.6},{},{},{},{}",
            d.model,
            d.ransomware_drop[0],
            d.ransomware_drop[1],
            d.downloader_rise[0],
            d.downloader_rise[1],
            d.grayware_rise[0],
            d.grayware_rise[1]
        );
    }
    write_file(&out.join("robustness.csv"), deltas)?;
    write_file(&out.join(RUN_CONFIG), s.render())?;
    eprintln!("evasion on {} Ransomware samples -> {}", report.cohort_size, out.display());
    Ok(())
}

pub fn featurize(a: FeaturizeArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&["threads", "sessions", "out"], |_| false)?;
    let path: PathBuf = s.required("sessions", a.sessions)?;
    let out = s.out_file(a.out, "features.csv")?;
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let sessions = read_sessions(BufReader::new(file))?;
    let samples = sessions
        .par_iter()
        .enumerate()
        .map(|(i, session)| {
            let data_err = |message: String| Error::Data { row: i + 1, message };
            let cell = session
                .labels
                .as_deref()
                .ok_or_else(|| data_err(format!("session {} has no labels", session.host_id)))?;
            let labels = LabelSet::parse(cell).map_err(|e| data_err(e.to_string()))?;
            let features = featurize_session(session).map_err(|e| data_err(e.to_string()))?;
            Ok(TraceSample {
                features,
                labels,
                source_id: session.host_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new("features", FeatureSchema::full(), samples)?;
    write_file(&out, csv_bytes(|w| data.to_writer(w)))?;
    write_file(&sidecar(&out, ".run.cfg"), s.render())?;
    eprintln!("featurized {} sessions -> {}", data.len(), out.display());
    Ok(())
}

/// Files named `name` under `root`, in sorted path order.
fn find_files(root: &Path, name: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(root, e))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_files(&path, name, found)?;
        } else if path.file_name().is_some_and(|n| n == name) {
            found.push(path);
        }
    }
    Ok(())
}

fn run_name(root: &Path, file: &Path) -> String {
    let dir = file.parent().unwrap_or(root);
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.is_empty() {
        ".".into()
    } else {
        parts.join("/")
    }
}

fn read_table(path: &Path) -> Result<(String, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().map(str::to_string);
    let header = lines
        .next()
        .ok_or_else(|| Error::Data { row: 0, message: format!("{} is empty", path.display()) })?;
    Ok((header, lines.filter(|l| !l.is_empty()).collect()))
}

pub fn report(a: ReportArgs, s: &mut Settings) -> Result<()> {
    s.check_keys(&["threads", "runs", "out"], |_| false)?;
    let runs: PathBuf = s.required("runs", a.runs)?;
    let out = s.out_dir(a.out)?;
    let (mut summaries, mut attacks) = (Vec::new(), Vec::new());
    find_files(&runs, "summary.csv", &mut summaries)?;
    find_files(&runs, "evasion.csv", &mut attacks)?;
    // Never collate our own previous output.
    let out_abs = std::fs::canonicalize(&out).ok();
    let outside = |p: &PathBuf| out_abs.as_ref().is_none_or(|o| std::fs::canonicalize(p).map_or(true, |p| !p.starts_with(o)));
    summaries.retain(outside);
    attacks.retain(outside);
    if summaries.is_empty() && attacks.is_empty() {
        return Err(Error::invalid(format!("no summary.csv or evasion.csv under {}", runs.display())));
    }

    let mut summary = String::new();
    let mut md = String::from("# Results\n");
    for (i, path) in summaries.iter().enumerate() {
        let (header, rows) = read_table(path)?;
        if i == 0 {
            let _ = writeln!(summary, "run,{header}");
            md.push_str("\n| run | model | dataset | MAP | MAR | HL | AC |\n|---|---|---|---|---|---|---|\n");
        }
        let run = run_name(&runs, path);
        for row in rows {
            let _ = writeln!(summary, "{run},{row}");
            let c: Vec<&str> = row.split(',').collect();
            if c.len() >= 6 {
                let _ = writeln!(md, "| {run} | {} | {} | {} | {} | {} | {} |", c[0], c[1], c[2], c[3], c[4], c[5]);
            }
        }
    }
    let mut evasion = String::new();
    if !attacks.is_empty() {
        evasion.push_str("run,class,column,count\n");
        md.push_str("\n## Evasion (positive predictions on the Ransomware cohort)\n");
    }
    for path in &attacks {
        let (header, rows) = read_table(path)?;
        let run = run_name(&runs, path);
        let columns: Vec<&str> = header.split(',').skip(1).collect();
        let _ = write!(md, "\n### {run}\n\n| class | {} |\n|---|{}\n", columns.join(" | "), "---|".repeat(columns.len()));
        for row in rows {
            let cells: Vec<&str> = row.split(',').collect();
            for (col, count) in columns.iter().zip(cells.iter().skip(1)) {
                let _ = writeln!(evasion, "{run},{},{col},{count}", cells[0]);
            }
            let _ = writeln!(md, "| {} |", cells.join(" | "));
        }
    }
    create_dir(&out)?;
    if !summary.is_empty() {
        write_file(&out.join("summary.csv"), summary)?;
    }
    if !evasion.is_empty() {
        write_file(&out.join("evasion.csv"), evasion)?;
    }
    write_file(&out.join("report.md"), md)?;
    write_file(&out.join(RUN_CONFIG), s.render())?;
    eprintln!("collated {} evaluations and {} attacks -> {}", summaries.len(), attacks.len(), out.display());
    Ok(())
}
