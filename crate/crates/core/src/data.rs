//! Sensor-recording ingestion and the preprocessing chain: trim the first and
//! last seconds of each trial, segment into fixed-length overlapping windows,
//! z-score with training-split statistics, and build stratified splits.
//!
//! Recording CSV schema (UTF-8, dot decimals, LF):
//!
//! ```text
//! patient_id,phase,activity,placement,rate_hz
//! 12345,pre,walk,nondominant_hand,100
//! t,ax,ay,az,gx,gy,gz
//! 0,9.7,-0.1,2.3,0.5,0.02,-0.4
//! ...
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;

/// Channels per sample: ax, ay, az (m/s^2), gx, gy, gz (rad/s).
pub const CHANNELS: usize = 6;

pub const DEFAULT_TRIM_S: f64 = 2.5;
pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_STEP: usize = 50;

/// Fixed class order for the default activity set.
pub const CLASS_NAMES: [&str; 3] = ["sit", "walk", "stairs"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre" => Some(Self::Pre),
            "post" => Some(Self::Post),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pre => "pre",
            Self::Post => "post",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Self::Pre => 0,
            Self::Post => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Self::Pre),
            1 => Some(Self::Post),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activity {
    Sit,
    Walk,
    Stairs,
}

impl Activity {
    pub const ALL: [Activity; 3] = [Activity::Sit, Activity::Walk, Activity::Stairs];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sit" => Some(Self::Sit),
            "walk" => Some(Self::Walk),
            "stairs" => Some(Self::Stairs),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sit => "sit",
            Self::Walk => "walk",
            Self::Stairs => "stairs",
        }
    }

    /// Index into [`CLASS_NAMES`].
    pub fn class_index(&self) -> usize {
        match self {
            Self::Sit => 0,
            Self::Walk => 1,
            Self::Stairs => 2,
        }
    }

    fn tag(&self) -> u8 {
        self.class_index() as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    NondominantHand,
    PantPocket,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::NondominantHand, Placement::PantPocket];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nondominant_hand" => Some(Self::NondominantHand),
            "pant_pocket" => Some(Self::PantPocket),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NondominantHand => "nondominant_hand",
            Self::PantPocket => "pant_pocket",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Self::NondominantHand => 0,
            Self::PantPocket => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Self::NondominantHand),
            1 => Some(Self::PantPocket),
            _ => None,
        }
    }
}

/// One trial: a timestamped 6-channel IMU stream plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecording {
    pub patient_id: String,
    pub phase: Phase,
    pub activity: Activity,
    pub placement: Placement,
    pub sample_rate_hz: f64,
    pub trial: u32,
    pub samples: Vec<[f64; CHANNELS]>,
}

impl SensorRecording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Provenance of a window, used for leakage checks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowSource {
    pub patient_id: String,
    pub phase: Phase,
    pub activity: Activity,
    pub placement: Placement,
    pub trial: u32,
    pub start: usize,
}

/// Fixed-length labeled segment: `window_len` rows by 6 channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub label: usize,
    pub source: WindowSource,
}

/// Per-channel normalization statistics (population std, floored at 1e-8).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

/// A labeled window collection: the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub class_names: Vec<String>,
    pub window_len: usize,
    pub normalized: bool,
    pub norm_stats: Option<Vec<ChannelStats>>,
}

impl WindowSet {
    pub fn new(windows: Vec<Window>, class_names: Vec<String>, window_len: usize) -> Self {
        debug_assert!(windows
            .iter()
            .all(|w| w.values.len() == window_len * CHANNELS && w.label < class_names.len()));
        Self {
            windows,
            class_names,
            window_len,
            normalized: false,
            norm_stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for w in &self.windows {
            counts[w.label] += 1;
        }
        counts
    }

    /// Subset by predicate, keeping order and normalization state.
    pub fn filter(&self, keep: impl Fn(&Window) -> bool) -> WindowSet {
        WindowSet {
            windows: self.windows.iter().filter(|w| keep(w)).cloned().collect(),
            class_names: self.class_names.clone(),
            window_len: self.window_len,
            normalized: self.normalized,
            norm_stats: self.norm_stats.clone(),
        }
    }

    fn with_indices(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            class_names: self.class_names.clone(),
            window_len: self.window_len,
            normalized: self.normalized,
            norm_stats: self.norm_stats.clone(),
        }
    }
}

// ── ingestion ────────────────────────────────────────────────────────

const META_HEADER: &str = "patient_id,phase,activity,placement,rate_hz";
const DATA_HEADER: &str = "t,ax,ay,az,gx,gy,gz";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load one recording CSV or every `*.csv` in a directory (sorted by file
/// name; `nrs.csv` and `manifest.txt` are skipped). Malformed content is
/// rejected with file and line number.
pub fn load_recordings(path: &Path) -> Result<Vec<SensorRecording>, DataError> {
    let meta = fs::metadata(path).map_err(|e| io_err(path, e))?;
    if meta.is_file() {
        return Ok(vec![parse_recording_file(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "csv")
                && p.file_name().is_some_and(|n| n != "nrs.csv")
        })
        .collect();
    files.sort();
    let mut recordings = Vec::with_capacity(files.len());
    for file in &files {
        recordings.push(parse_recording_file(file)?);
    }
    Ok(recordings)
}

fn parse_recording_file(path: &Path) -> Result<SensorRecording, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();

    let (n, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header.trim_end() != META_HEADER {
        return Err(parse_err(
            path,
            n + 1,
            format!("expected header \"{META_HEADER}\""),
        ));
    }

    let (n, meta_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing metadata row"))?;
    let fields: Vec<&str> = meta_line.trim_end().split(',').collect();
    if fields.len() != 5 {
        return Err(parse_err(path, n + 1, "metadata row needs 5 fields"));
    }
    let patient_id = fields[0].trim().to_string();
    if patient_id.is_empty() {
        return Err(parse_err(path, n + 1, "empty patient_id"));
    }
    let phase = Phase::parse(fields[1].trim())
        .ok_or_else(|| parse_err(path, n + 1, format!("unknown phase \"{}\"", fields[1])))?;
    let activity = Activity::parse(fields[2].trim())
        .ok_or_else(|| parse_err(path, n + 1, format!("unknown activity \"{}\"", fields[2])))?;
    let placement = Placement::parse(fields[3].trim())
        .ok_or_else(|| parse_err(path, n + 1, format!("unknown placement \"{}\"", fields[3])))?;
    let sample_rate_hz: f64 = fields[4]
        .trim()
        .parse()
        .map_err(|_| parse_err(path, n + 1, format!("bad rate_hz \"{}\"", fields[4])))?;
    if sample_rate_hz != 50.0 && sample_rate_hz != 100.0 {
        return Err(parse_err(
            path,
            n + 1,
            format!("unsupported rate_hz {sample_rate_hz}, expected 50 or 100"),
        ));
    }

    let (n, data_header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 3, "missing column header"))?;
    if data_header.trim_end() != DATA_HEADER {
        return Err(parse_err(
            path,
            n + 1,
            format!("expected column header \"{DATA_HEADER}\""),
        ));
    }

    let mut samples = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut row = [0.0; CHANNELS];
        let mut cols = line.split(',');
        // Column 0 is the timestamp; validated numeric but not stored.
        let t = cols
            .next()
            .ok_or_else(|| parse_err(path, n + 1, "missing timestamp"))?;
        t.trim()
            .parse::<f64>()
            .map_err(|_| parse_err(path, n + 1, format!("bad timestamp \"{t}\"")))?;
        for (c, slot) in row.iter_mut().enumerate() {
            let field = cols.next().ok_or_else(|| {
                parse_err(path, n + 1, format!("missing column {} of 7", c + 2))
            })?;
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, n + 1, format!("non-numeric value \"{field}\""))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    n + 1,
                    format!("non-finite value in column {}", c + 2),
                ));
            }
            *slot = v;
        }
        if cols.next().is_some() {
            return Err(parse_err(path, n + 1, "too many columns, expected 7"));
        }
        samples.push(row);
    }
    if samples.is_empty() {
        return Err(parse_err(path, 4, "no samples"));
    }

    let trial = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('_').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    Ok(SensorRecording {
        patient_id,
        phase,
        activity,
        placement,
        sample_rate_hz,
        trial,
        samples,
    })
}

/// Write one recording in the documented CSV schema.
pub fn write_recording_csv(rec: &SensorRecording, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{META_HEADER}")?;
    writeln!(
        out,
        "{},{},{},{},{}",
        rec.patient_id,
        rec.phase.as_str(),
        rec.activity.as_str(),
        rec.placement.as_str(),
        rec.sample_rate_hz
    )?;
    writeln!(out, "{DATA_HEADER}")?;
    for (i, row) in rec.samples.iter().enumerate() {
        write!(out, "{}", i as f64 / rec.sample_rate_hz)?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ── preprocessing ────────────────────────────────────────────────────

/// Remove `round(trim_s * rate)` samples from each end of the recording.
pub fn trim(rec: &SensorRecording, trim_s: f64) -> Result<SensorRecording, DataError> {
    let n_trim = (trim_s * rec.sample_rate_hz).round() as usize;
    if rec.samples.len() <= 2 * n_trim {
        return Err(DataError::TooShort {
            samples: rec.samples.len(),
            required: 2 * n_trim,
            trim_s,
            rate: rec.sample_rate_hz,
        });
    }
    let mut out = rec.clone();
    out.samples = rec.samples[n_trim..rec.samples.len() - n_trim].to_vec();
    Ok(out)
}

/// Slide a `window`-sample window in `step`-sample increments; the trailing
/// partial window is discarded. A recording shorter than one window yields
/// zero windows (not an error).
pub fn segment(
    rec: &SensorRecording,
    window: usize,
    step: usize,
) -> Result<Vec<Window>, DataError> {
    if window == 0 || step == 0 || step > window {
        return Err(DataError::InvalidSegmentation { window, step });
    }
    let len = rec.samples.len();
    if len < window {
        return Ok(Vec::new());
    }
    let count = (len - window) / step + 1;
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * step;
        let mut values = Vec::with_capacity(window * CHANNELS);
        for row in &rec.samples[start..start + window] {
            values.extend_from_slice(row);
        }
        windows.push(Window {
            values,
            label: rec.activity.class_index(),
            source: WindowSource {
                patient_id: rec.patient_id.clone(),
                phase: rec.phase,
                activity: rec.activity,
                placement: rec.placement,
                trial: rec.trial,
                start,
            },
        });
    }
    Ok(windows)
}

/// A recording the preprocessing chain skipped, and why.
#[derive(Debug, Clone)]
pub struct SkipNote {
    pub patient_id: String,
    pub phase: Phase,
    pub activity: Activity,
    pub placement: Placement,
    pub trial: u32,
    pub reason: String,
}

/// Trim and segment every recording into one pooled window set. Recordings
/// too short to trim or to fill a single window are skipped with a note.
pub fn build_window_set(
    recordings: &[SensorRecording],
    trim_s: f64,
    window: usize,
    step: usize,
) -> Result<(WindowSet, Vec<SkipNote>), DataError> {
    let mut windows = Vec::new();
    let mut notes = Vec::new();
    for rec in recordings {
        let note = |reason: String| SkipNote {
            patient_id: rec.patient_id.clone(),
            phase: rec.phase,
            activity: rec.activity,
            placement: rec.placement,
            trial: rec.trial,
            reason,
        };
        match trim(rec, trim_s) {
            Ok(trimmed) => {
                let segs = segment(&trimmed, window, step)?;
                if segs.is_empty() {
                    notes.push(note(format!(
                        "no full window: {} samples after trim",
                        trimmed.samples.len()
                    )));
                }
                windows.extend(segs);
            }
            Err(e) => notes.push(note(e.to_string())),
        }
    }
    let class_names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    Ok((WindowSet::new(windows, class_names, window), notes))
}

/// Per-channel mean and population standard deviation over every sample of
/// every window, computed with Welford's one-pass recurrence. The std is
/// floored at [`STD_FLOOR`] so constant channels stay divisible.
pub fn fit_norm_stats(set: &WindowSet) -> Result<Vec<ChannelStats>, DataError> {
    if set.is_empty() {
        return Err(DataError::EmptySet);
    }
    if set.normalized {
        return Err(DataError::AlreadyNormalized);
    }
    let mut count = 0.0_f64;
    let mut mean = [0.0_f64; CHANNELS];
    let mut m2 = [0.0_f64; CHANNELS];
    for w in &set.windows {
        for row in w.values.chunks(CHANNELS) {
            count += 1.0;
            for c in 0..CHANNELS {
                let delta = row[c] - mean[c];
                mean[c] += delta / count;
                m2[c] += delta * (row[c] - mean[c]);
            }
        }
    }
    Ok((0..CHANNELS)
        .map(|c| ChannelStats {
            mean: mean[c],
            std: (m2[c] / count).sqrt().max(STD_FLOOR),
        })
        .collect())
}

/// Z-score every value in place with the given statistics (normally fit on
/// the training split). Normalizing twice is a contract error.
pub fn apply_norm(set: &mut WindowSet, stats: &[ChannelStats]) -> Result<(), DataError> {
    if set.normalized {
        return Err(DataError::AlreadyNormalized);
    }
    for w in &mut set.windows {
        for row in w.values.chunks_mut(CHANNELS) {
            for (v, s) in row.iter_mut().zip(stats) {
                *v = (*v - s.mean) / s.std;
            }
        }
    }
    set.normalized = true;
    set.norm_stats = Some(stats.to_vec());
    Ok(())
}

// ── splits ───────────────────────────────────────────────────────────

/// Deterministic stratified holdout split. Train takes `round(frac * count)`
/// windows of each class (clamped so both halves stay non-empty); the rest go
/// to validation. Classes with fewer than 2 windows are an error.
pub fn stratified_split(
    set: &WindowSet,
    train_frac: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet), DataError> {
    let per_class = indices_by_class(set, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for mut indices in per_class {
        indices.shuffle(&mut rng);
        let count = indices.len();
        let n_train = ((train_frac * count as f64).round() as usize).clamp(1, count - 1);
        train_idx.extend_from_slice(&indices[..n_train]);
        val_idx.extend_from_slice(&indices[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((set.with_indices(&train_idx), set.with_indices(&val_idx)))
}

/// Deterministic stratified k-fold partition: every window lands in exactly
/// one validation fold and per-class fold sizes differ by at most one.
pub fn kfold(set: &WindowSet, k: usize, seed: u64) -> Result<Vec<(WindowSet, WindowSet)>, DataError> {
    if k < 2 {
        return Err(DataError::ClassTooSmall {
            class: "(any)".into(),
            count: k,
            min: 2,
        });
    }
    let per_class = indices_by_class(set, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_val: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut indices in per_class {
        indices.shuffle(&mut rng);
        for (j, idx) in indices.into_iter().enumerate() {
            fold_val[j % k].push(idx);
        }
    }
    let mut folds = Vec::with_capacity(k);
    for val in &mut fold_val {
        val.sort_unstable();
        let in_val: std::collections::HashSet<usize> = val.iter().copied().collect();
        let train: Vec<usize> = (0..set.len()).filter(|i| !in_val.contains(i)).collect();
        folds.push((set.with_indices(&train), set.with_indices(val)));
    }
    Ok(folds)
}

fn indices_by_class(set: &WindowSet, min: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_names.len()];
    for (i, w) in set.windows.iter().enumerate() {
        per_class[w.label].push(i);
    }
    for (label, indices) in per_class.iter().enumerate() {
        if !indices.is_empty() && indices.len() < min {
            return Err(DataError::ClassTooSmall {
                class: set.class_names[label].clone(),
                count: indices.len(),
                min,
            });
        }
    }
    // Classes absent from the set simply contribute nothing.
    per_class.retain(|v| !v.is_empty());
    if per_class.is_empty() {
        return Err(DataError::EmptySet);
    }
    Ok(per_class)
}

// ── window-set cache ─────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"DTWS";
const CACHE_VERSION: u32 = 1;

/// Serialize a window set to a versioned binary cache; round-trips bit-exact.
pub fn save_window_set(path: &Path, set: &WindowSet) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| io_err(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    put_u32(&mut w, CACHE_VERSION).map_err(io)?;
    put_u32(&mut w, set.window_len as u32).map_err(io)?;
    put_u32(&mut w, CHANNELS as u32).map_err(io)?;
    put_u32(&mut w, set.class_names.len() as u32).map_err(io)?;
    for name in &set.class_names {
        put_str(&mut w, name).map_err(io)?;
    }
    w.write_all(&[set.normalized as u8]).map_err(io)?;
    match &set.norm_stats {
        Some(stats) => {
            w.write_all(&[1]).map_err(io)?;
            put_u32(&mut w, stats.len() as u32).map_err(io)?;
            for s in stats {
                put_f64(&mut w, s.mean).map_err(io)?;
                put_f64(&mut w, s.std).map_err(io)?;
            }
        }
        None => w.write_all(&[0]).map_err(io)?,
    }
    put_u64(&mut w, set.windows.len() as u64).map_err(io)?;
    for win in &set.windows {
        put_u32(&mut w, win.label as u32).map_err(io)?;
        put_str(&mut w, &win.source.patient_id).map_err(io)?;
        w.write_all(&[
            win.source.phase.tag(),
            win.source.activity.tag(),
            win.source.placement.tag(),
        ])
        .map_err(io)?;
        put_u32(&mut w, win.source.trial).map_err(io)?;
        put_u64(&mut w, win.source.start as u64).map_err(io)?;
        for v in &win.values {
            put_f64(&mut w, *v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Load a cache produced by [`save_window_set`].
pub fn load_window_set(path: &Path) -> Result<WindowSet, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |msg: &str| DataError::CorruptCache(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = get_u32(&mut r).map_err(|e| io_err(path, e))?;
    if version != CACHE_VERSION {
        return Err(DataError::CacheVersion(version));
    }
    let window_len = get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    let channels = get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    if channels != CHANNELS {
        return Err(corrupt("unexpected channel count"));
    }
    let n_classes = get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_names.push(get_str(&mut r).map_err(|e| io_err(path, e))?);
    }
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags).map_err(|e| io_err(path, e))?;
    let normalized = flags[0] == 1;
    let norm_stats = if flags[1] == 1 {
        let n = get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
        let mut stats = Vec::with_capacity(n);
        for _ in 0..n {
            stats.push(ChannelStats {
                mean: get_f64(&mut r).map_err(|e| io_err(path, e))?,
                std: get_f64(&mut r).map_err(|e| io_err(path, e))?,
            });
        }
        Some(stats)
    } else {
        None
    };
    let count = get_u64(&mut r).map_err(|e| io_err(path, e))? as usize;
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let label = get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
        if label >= class_names.len() {
            return Err(corrupt("label out of range"));
        }
        let patient_id = get_str(&mut r).map_err(|e| io_err(path, e))?;
        let mut tags = [0u8; 3];
        r.read_exact(&mut tags).map_err(|e| io_err(path, e))?;
        let phase = Phase::from_tag(tags[0]).ok_or_else(|| corrupt("bad phase tag"))?;
        let activity = Activity::from_tag(tags[1]).ok_or_else(|| corrupt("bad activity tag"))?;
        let placement = Placement::from_tag(tags[2]).ok_or_else(|| corrupt("bad placement tag"))?;
        let trial = get_u32(&mut r).map_err(|e| io_err(path, e))?;
        let start = get_u64(&mut r).map_err(|e| io_err(path, e))? as usize;
        let mut values = Vec::with_capacity(window_len * CHANNELS);
        for _ in 0..window_len * CHANNELS {
            values.push(get_f64(&mut r).map_err(|e| io_err(path, e))?);
        }
        windows.push(Window {
            values,
            label,
            source: WindowSource {
                patient_id,
                phase,
                activity,
                placement,
                trial,
                start,
            },
        });
    }
    Ok(WindowSet {
        windows,
        class_names,
        window_len,
        normalized,
        norm_stats,
    })
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn get_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
