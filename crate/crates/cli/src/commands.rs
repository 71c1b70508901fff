//! The five pipeline commands. Exit codes: 0 success, 1 usage, 2 data
//! validation, 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use detect_core::bundle::{load_bundle, save_bundle};
use detect_core::data::{
    build_window_set, load_recordings, load_window_set, save_window_set, stratified_split,
    Activity, Phase, WindowSet,
};
use detect_core::error::{BundleError, DataError, EvalError, ModelError, TrainError};
use detect_core::eval::{
    build_report, load_nrs_csv, patient_accuracy, write_report_files, MeasuredPatient, NrsPair,
    NrsPredicate,
};
use detect_core::simgen::{
    default_cohort_spec, generate_cohort, profile_defaults, CohortSpec, PatientProfile,
};
use detect_core::train::{train, train_kfold};

use crate::config::{ConfigError, RunConfig, SplitSpec};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Optim(inner) => CliError::Numerical(inner.to_string()),
            TrainError::Tensor(inner) => CliError::Numerical(inner.to_string()),
            TrainError::Data(inner) => CliError::Data(inner.to_string()),
            TrainError::Model(inner) => CliError::Data(inner.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

// ── simulate ─────────────────────────────────────────────────────────

/// Parse a cohort spec file:
///
/// ```text
/// seed=42
/// rate_hz=100
/// trial_duration_s=30
/// trials_per_condition=2
/// patient=12345 nrs_pre=5 nrs_post=1 effect=2.0 gait_freq=1.7 noise_sigma=0.8
/// ```
///
/// `gait_freq` and `noise_sigma` are optional; omitted values are derived
/// deterministically from the seed and patient position.
fn parse_cohort_spec(path: &Path, seed_override: Option<u64>) -> Result<CohortSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Data(format!("{}: {e}", path.display()))
    })?;
    let err = |line: usize, msg: String| {
        CliError::Data(format!("{}:{}: {msg}", path.display(), line))
    };

    let mut seed = 42u64;
    let mut rate_hz = 100.0;
    let mut trial_duration_s = 30.0;
    let mut trials_per_condition = 2u32;
    let mut patients: Vec<(usize, BTreeMap<String, String>, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("patient=") {
            let mut fields = rest.split_whitespace();
            let id = fields.next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(err(idx + 1, "patient line needs an id".into()));
            }
            let mut kv = BTreeMap::new();
            for field in fields {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| err(idx + 1, format!("expected key=value, got \"{field}\"")))?;
                kv.insert(k.to_string(), v.to_string());
            }
            patients.push((idx + 1, kv, id));
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(idx + 1, format!("expected key=value, got \"{line}\"")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => seed = v.parse().map_err(|_| err(idx + 1, format!("bad seed \"{v}\"")))?,
                "rate_hz" => {
                    rate_hz = v.parse().map_err(|_| err(idx + 1, format!("bad rate_hz \"{v}\"")))?;
                    if rate_hz != 50.0 && rate_hz != 100.0 {
                        return Err(err(idx + 1, format!("rate_hz {rate_hz} not 50 or 100")));
                    }
                }
                "trial_duration_s" => {
                    trial_duration_s = v
                        .parse()
                        .map_err(|_| err(idx + 1, format!("bad trial_duration_s \"{v}\"")))?;
                    if trial_duration_s <= 5.0 {
                        return Err(err(idx + 1, "trial_duration_s must exceed 5 s".into()));
                    }
                }
                "trials_per_condition" => {
                    trials_per_condition = v
                        .parse()
                        .map_err(|_| err(idx + 1, format!("bad trials_per_condition \"{v}\"")))?;
                    if trials_per_condition == 0 {
                        return Err(err(idx + 1, "trials_per_condition must be at least 1".into()));
                    }
                }
                _ => return Err(err(idx + 1, format!("unknown key \"{k}\""))),
            }
        }
    }
    if let Some(s) = seed_override {
        seed = s;
    }
    if patients.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no patient lines",
            path.display()
        )));
    }

    let mut profiles = Vec::with_capacity(patients.len());
    for (i, (line, kv, id)) in patients.into_iter().enumerate() {
        let (profile_seed, default_gait) = profile_defaults(seed, i as u64);
        let get_u8 = |key: &str| -> Result<u8, CliError> {
            let v = kv
                .get(key)
                .ok_or_else(|| err(line, format!("patient {id} missing {key}")))?;
            let n: u8 = v
                .parse()
                .map_err(|_| err(line, format!("bad {key} \"{v}\"")))?;
            if n > 10 {
                return Err(err(line, format!("{key} {n} outside 0-10")));
            }
            Ok(n)
        };
        let get_f64 = |key: &str, default: f64| -> Result<f64, CliError> {
            match kv.get(key) {
                Some(v) => v.parse().map_err(|_| err(line, format!("bad {key} \"{v}\""))),
                None => Ok(default),
            }
        };
        for key in kv.keys() {
            if !["nrs_pre", "nrs_post", "effect", "gait_freq", "noise_sigma"].contains(&key.as_str()) {
                return Err(err(line, format!("unknown patient key \"{key}\"")));
            }
        }
        let profile = PatientProfile {
            patient_id: id.clone(),
            nrs_pre: get_u8("nrs_pre")?,
            nrs_post: get_u8("nrs_post")?,
            effect_size: get_f64("effect", 0.0)?,
            gait_freq_hz: get_f64("gait_freq", default_gait)?,
            noise_sigma: get_f64("noise_sigma", 0.8)?,
            seed: profile_seed,
        };
        profiles.push(profile);
    }

    Ok(CohortSpec {
        profiles,
        activities: Activity::ALL.to_vec(),
        trials_per_condition,
        trial_duration_s,
        rate_hz,
    })
}

pub fn cmd_simulate(
    spec: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let spec = match spec {
        Some(path) => parse_cohort_spec(path, seed)?,
        None => default_cohort_spec(seed.unwrap_or(42)),
    };
    let manifest = generate_cohort(&spec, out)?;
    println!(
        "simulate patients={} files={} nrs={} manifest={} out={}",
        spec.profiles.len(),
        manifest.files.len(),
        manifest.nrs_file,
        manifest.manifest_file,
        out.display()
    );
    Ok(())
}

// ── preprocess ───────────────────────────────────────────────────────

fn load_windows_from(
    data: &Path,
    trim_s: f64,
    window: usize,
    step: usize,
) -> Result<WindowSet, CliError> {
    let meta = fs::metadata(data)
        .map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
    if meta.is_file() && data.extension().is_some_and(|e| e == "cache") {
        return Ok(load_window_set(data)?);
    }
    let recordings = load_recordings(data)?;
    let (set, notes) = build_window_set(&recordings, trim_s, window, step)?;
    for note in &notes {
        eprintln!(
            "warning: skipped {}/{}/{}/{} trial {}: {}",
            note.patient_id,
            note.phase.as_str(),
            note.activity.as_str(),
            note.placement.as_str(),
            note.trial,
            note.reason
        );
    }
    Ok(set)
}

pub fn cmd_preprocess(
    data: &Path,
    out: &Path,
    trim_s: f64,
    window: usize,
    step: usize,
) -> Result<(), CliError> {
    let set = load_windows_from(data, trim_s, window, step)?;
    if set.is_empty() {
        return Err(CliError::Data("no windows produced".into()));
    }
    save_window_set(out, &set)?;
    let counts = set.class_counts();
    println!(
        "preprocess windows={} per_class={} out={}",
        set.len(),
        counts
            .iter()
            .zip(&set.class_names)
            .map(|(c, n)| format!("{n}:{c}"))
            .collect::<Vec<_>>()
            .join(","),
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

pub fn cmd_train(
    data: &Path,
    config: &RunConfig,
    out: &Path,
) -> Result<(), CliError> {
    if config.model.seq_len != config.window {
        return Err(CliError::Data(format!(
            "window length {} does not match model seq_len {}",
            config.window, config.model.seq_len
        )));
    }
    let set = load_windows_from(data, config.trim_s, config.window, config.step)?;
    if set.window_len != config.model.seq_len {
        return Err(CliError::Data(format!(
            "window set has {}-sample windows, model expects {}",
            set.window_len, config.model.seq_len
        )));
    }
    let pre = set.filter(|w| w.source.phase == Phase::Pre);
    if pre.is_empty() {
        return Err(CliError::Data("no pre-treatment windows found".into()));
    }
    println!(
        "train windows={} (pre-treatment pool) split={} epochs={} batch={}",
        pre.len(),
        config.split,
        config.epochs,
        config.batch_size
    );

    let mut log = |line: &str| println!("{line}");
    let outcome = match config.split {
        SplitSpec::Holdout(_) => train(&pre, &config.model, &config.train_config(), &mut log)?,
        SplitSpec::KFold(k) => {
            let (first, folds) = train_kfold(&pre, &config.model, &config.train_config(), k, &mut log)?;
            for m in &folds {
                println!(
                    "fold_result fold={} val_loss={:.6} val_acc={:.2}",
                    m.fold, m.val_loss, m.val_acc
                );
            }
            let mean_acc = folds.iter().map(|m| m.val_acc).sum::<f64>() / folds.len() as f64;
            println!("kfold_mean val_acc={mean_acc:.2}");
            first
        }
    };

    save_bundle(out, &outcome.bundle)?;
    println!(
        "trained train_windows={} val_windows={} final_train_acc={:.2} val_acc={:.2} bundle={}",
        outcome.train_windows,
        outcome.val_windows,
        outcome.final_train_acc,
        outcome.val_acc,
        out.display()
    );
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

pub fn cmd_evaluate(
    bundle_path: &Path,
    data: &Path,
    nrs_path: Option<&Path>,
    out: &Path,
    config: &RunConfig,
) -> Result<(), CliError> {
    let bundle = load_bundle(bundle_path)?;
    let stats = bundle.norm_stats()?.to_vec();
    let meta = bundle.train_meta.ok_or_else(|| {
        CliError::Data("bundle carries no split metadata; retrain with this version".into())
    })?;
    if bundle.config.seq_len != config.window {
        return Err(CliError::Data(format!(
            "window length {} does not match bundle seq_len {}",
            config.window, bundle.config.seq_len
        )));
    }

    let raw = load_windows_from(data, config.trim_s, config.window, config.step)?;
    let pre = raw.filter(|w| w.source.phase == Phase::Pre);
    let post = raw.filter(|w| w.source.phase == Phase::Post);
    if pre.is_empty() || post.is_empty() {
        return Err(CliError::Data(
            "need both pre- and post-treatment recordings to evaluate".into(),
        ));
    }

    // Reconstruct the held-out pre-treatment windows exactly as training saw
    // them, then normalize everything with the bundle's frozen statistics.
    let (_, mut pre_val) = stratified_split(&pre, meta.train_frac, meta.split_seed)?;
    detect_core::data::apply_norm(&mut pre_val, &stats)?;
    let mut post = post;
    detect_core::data::apply_norm(&mut post, &stats)?;

    let default_nrs = data.join("nrs.csv");
    let nrs_path = nrs_path.unwrap_or(&default_nrs);
    let nrs_rows = load_nrs_csv(nrs_path)?;
    let nrs: BTreeMap<String, NrsPair> = nrs_rows.into_iter().collect();

    let mut patients: Vec<String> = raw
        .windows
        .iter()
        .map(|w| w.source.patient_id.clone())
        .collect();
    patients.sort();
    patients.dedup();

    for id in nrs.keys() {
        if !patients.contains(id) {
            eprintln!("warning: NRS row for unknown patient {id}");
        }
    }

    let mut rows = Vec::new();
    for id in &patients {
        let val_p = pre_val.filter(|w| &w.source.patient_id == id);
        let post_p = post.filter(|w| &w.source.patient_id == id);
        if val_p.is_empty() {
            eprintln!("warning: patient {id} has no held-out pre-treatment windows; excluded");
            continue;
        }
        if post_p.is_empty() {
            eprintln!("warning: patient {id} has no post-treatment windows; excluded");
            continue;
        }
        let acc_pre = patient_accuracy(&bundle, &val_p)?;
        let acc_post = patient_accuracy(&bundle, &post_p)?;
        rows.push(MeasuredPatient {
            patient_id: id.clone(),
            acc_pre,
            acc_post,
            nrs: nrs.get(id).copied(),
        });
    }

    let report = build_report(&rows, config.nrs_predicate)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_report_files(&report, out)?;
    println!(
        "evaluate patients={} threshold={:.2} consistency={:.2} report={}",
        report.outcomes.len(),
        report.tes_threshold,
        report.consistency_rate,
        out.join("report.csv").display()
    );
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────

const OUTCOMES_HEADER: &str = "patient_id,acc_pre,acc_post,nrs_pre,nrs_post";

/// Parse measured outcomes (accuracies injected directly, no model run):
/// `patient_id,acc_pre,acc_post,nrs_pre,nrs_post`; empty NRS fields mean the
/// patient has no self-reported scores.
fn parse_outcomes_csv(path: &Path) -> Result<Vec<MeasuredPatient>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let err =
        |line: usize, msg: String| CliError::Data(format!("{}:{}: {msg}", path.display(), line));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == OUTCOMES_HEADER => {}
        Some((n, h)) => {
            return Err(err(
                n + 1,
                format!("expected header \"{OUTCOMES_HEADER}\", got \"{h}\""),
            ))
        }
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(n + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        let acc = |s: &str, what: &str| -> Result<f64, CliError> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| err(n + 1, format!("bad {what} \"{s}\"")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(err(n + 1, format!("{what} {v} outside 0-100")));
            }
            Ok(v)
        };
        let nrs = match (fields[3].trim(), fields[4].trim()) {
            ("", "") => None,
            (pre, post) => {
                let parse = |s: &str| -> Result<u8, CliError> {
                    let v: u8 = s
                        .parse()
                        .map_err(|_| err(n + 1, format!("bad NRS value \"{s}\"")))?;
                    if v > 10 {
                        return Err(err(n + 1, format!("NRS value {v} outside 0-10")));
                    }
                    Ok(v)
                };
                Some(NrsPair {
                    pre: parse(pre)?,
                    post: parse(post)?,
                })
            }
        };
        rows.push(MeasuredPatient {
            patient_id: fields[0].trim().to_string(),
            acc_pre: acc(fields[1], "acc_pre")?,
            acc_post: acc(fields[2], "acc_post")?,
            nrs,
        });
    }
    Ok(rows)
}

pub fn cmd_report(
    outcomes: &Path,
    out: &Path,
    predicate: NrsPredicate,
) -> Result<(), CliError> {
    let rows = parse_outcomes_csv(outcomes)?;
    let report = build_report(&rows, predicate)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_report_files(&report, out)?;
    println!(
        "report patients={} threshold={:.2} consistency={:.2} out={}",
        report.outcomes.len(),
        report.tes_threshold,
        report.consistency_rate,
        out.display()
    );
    Ok(())
}
