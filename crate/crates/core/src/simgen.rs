//! Synthetic patient cohorts: deterministic 6-channel recordings for each
//! (patient, phase, activity, placement, trial) condition, plus an `nrs.csv`
//! of self-reported pain pairs.
//!
//! Signal model (invented, every constant tunable): walking is a sum of
//! sinusoids at the gait frequency and its first harmonic with Gaussian noise
//! and cycle-to-cycle amplitude jitter; stair climbing is the walk pattern
//! with larger vertical amplitude at a lower cadence; sitting is a
//! near-constant gravity-aligned signal with small noise. Post-treatment
//! recordings shrink the noise, the jitter, and the harmonic content by
//! `1/(1+effect_size)` and shift the gait frequency down proportionally to
//! `effect_size`, modeling smoother and more regular movement.
//! `effect_size = 0` leaves the pre- and post-treatment generators
//! identically distributed.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{write_recording_csv, Activity, Phase, Placement, SensorRecording};
use crate::error::DataError;

/// One simulated patient: pain scores are inputs (not derived from
/// `effect_size`), so agreement and disagreement between the self-reported
/// and measured outcomes can both be produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientProfile {
    pub patient_id: String,
    pub nrs_pre: u8,
    pub nrs_post: u8,
    /// 0 = no behavioral change after treatment.
    pub effect_size: f64,
    pub gait_freq_hz: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Collection protocol for a cohort: every profile is recorded in both
/// phases, for every activity, at both placements, `trials_per_condition`
/// times.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub profiles: Vec<PatientProfile>,
    pub activities: Vec<Activity>,
    pub trials_per_condition: u32,
    pub trial_duration_s: f64,
    pub rate_hz: f64,
}

impl CohortSpec {
    pub fn recording_count(&self) -> usize {
        self.profiles.len() * 2 * self.activities.len() * 2 * self.trials_per_condition as usize
    }
}

/// Per-patient deterministic defaults: a sub-seed and a gait frequency in
/// [1.55, 1.85] Hz, both pure functions of (cohort seed, patient position).
pub fn profile_defaults(cohort_seed: u64, index: u64) -> (u64, f64) {
    let pseed = mix_seed(cohort_seed, &[0x9A7E, index]);
    let mut rng = ChaCha8Rng::seed_from_u64(pseed);
    (pseed, 1.55 + 0.3 * rng.random::<f64>())
}

/// The eight-patient default cohort used by the command-line pipeline.
pub fn default_cohort_spec(seed: u64) -> CohortSpec {
    // (id, nrs_pre, nrs_post, effect_size)
    let rows: [(&str, u8, u8, f64); 8] = [
        ("12345", 5, 1, 2.0),
        ("21000", 6, 2, 2.0),
        ("31000", 5, 5, 0.0),
        ("41000", 7, 4, 2.0),
        ("51000", 3, 2, 0.5),
        ("61000", 5, 3, 2.0),
        ("71000", 2, 0, 0.0),
        ("91000", 4, 3, 1.0),
    ];
    let profiles = rows
        .iter()
        .enumerate()
        .map(|(i, (id, pre, post, effect))| {
            let (pseed, gait_freq_hz) = profile_defaults(seed, i as u64);
            PatientProfile {
                patient_id: id.to_string(),
                nrs_pre: *pre,
                nrs_post: *post,
                effect_size: *effect,
                gait_freq_hz,
                noise_sigma: 0.8,
                seed: pseed,
            }
        })
        .collect();
    CohortSpec {
        profiles,
        activities: Activity::ALL.to_vec(),
        trials_per_condition: 2,
        trial_duration_s: 30.0,
        rate_hz: 100.0,
    }
}

// Generator constants. None of these come from a measurement protocol; they
// are chosen so the three activities separate cleanly and the effect knob
// degrades post-treatment classification smoothly.
const JITTER: f64 = 0.35;
const FREQ_SHIFT_PER_EFFECT: f64 = 0.10;
const HARMONIC_SHRINK: bool = true;
const POCKET_YAW: f64 = 0.6;
const POCKET_TILT: f64 = 1.1;
const GRAVITY: f64 = 9.81;

struct ActivityShape {
    freq: f64,
    // [channel][component]: amplitude of sin(2*pi*comp_freq*t + phase)
    primary_amp: [f64; 6],
    harmonic_amp: [f64; 6],
    accel_noise: f64,
    gyro_noise: f64,
    jittered: bool,
}

fn shape_for(activity: Activity, gait_freq: f64, sigma: f64) -> ActivityShape {
    match activity {
        Activity::Walk => ActivityShape {
            freq: gait_freq,
            primary_amp: [1.8, 1.1, 0.5, 0.9, 0.7, 0.0],
            harmonic_amp: [0.5, 0.3, 2.2, 0.0, 0.0, 0.5],
            accel_noise: sigma,
            gyro_noise: 0.6 * sigma,
            jittered: true,
        },
        Activity::Stairs => ActivityShape {
            freq: 0.72 * gait_freq,
            primary_amp: [2.1, 1.3, 0.6, 1.1, 0.9, 0.0],
            harmonic_amp: [0.6, 0.35, 3.7, 0.0, 0.0, 0.6],
            accel_noise: sigma,
            gyro_noise: 0.6 * sigma,
            jittered: true,
        },
        Activity::Sit => ActivityShape {
            freq: 0.2,
            primary_amp: [0.03, 0.03, 0.05, 0.015, 0.015, 0.01],
            harmonic_amp: [0.0; 6],
            accel_noise: 0.075 * sigma,
            gyro_noise: 0.04 * sigma,
            jittered: false,
        },
    }
}

/// Deterministic recording for one condition. The sub-seed is a pure function
/// of (profile seed, phase, activity, placement, trial), so per-file
/// generation order never matters.
pub fn generate_recording(
    profile: &PatientProfile,
    phase: Phase,
    activity: Activity,
    placement: Placement,
    trial: u32,
    rate_hz: f64,
    duration_s: f64,
) -> SensorRecording {
    let file_seed = mix_seed(
        profile.seed,
        &[
            phase as u64 + 1,
            activity.class_index() as u64 + 11,
            placement as u64 + 101,
            trial as u64 + 1009,
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(file_seed);

    // Post-treatment: calmer, more regular movement.
    let effect = match phase {
        Phase::Pre => 0.0,
        Phase::Post => profile.effect_size,
    };
    let damp = 1.0 / (1.0 + effect);
    let mut shape = shape_for(activity, profile.gait_freq_hz, profile.noise_sigma);
    shape.accel_noise *= damp;
    shape.gyro_noise *= damp;
    if shape.jittered {
        shape.freq *= (1.0 - FREQ_SHIFT_PER_EFFECT * effect).max(0.4);
        if HARMONIC_SHRINK {
            for amp in shape.harmonic_amp.iter_mut() {
                *amp *= damp.sqrt();
            }
        }
    }
    let jitter = if shape.jittered { JITTER * damp } else { 0.0 };

    let n = (duration_s * rate_hz).round() as usize;
    let phases: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    let n_cycles = (duration_s * shape.freq).ceil() as usize + 2;
    let cycle_jitter: Vec<f64> = (0..n_cycles)
        .map(|_| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            1.0 + jitter * eta
        })
        .collect();

    let step_freq = 2.0 * shape.freq;
    let mut impulse = 0.0_f64;
    let mut prev_step_phase = 1.0_f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate_hz;
        let cycle = (t * shape.freq) as usize;
        let jit = cycle_jitter[cycle.min(n_cycles - 1)];
        let w = std::f64::consts::TAU * shape.freq * t;

        let mut ch = [0.0_f64; 6];
        for c in 0..6 {
            let base = shape.primary_amp[c] * jit * (w + phases[c]).sin()
                + shape.harmonic_amp[c] * (2.0 * w + phases[c + 6]).sin();
            let sigma = if c < 3 { shape.accel_noise } else { shape.gyro_noise };
            let eta: f64 = StandardNormal.sample(&mut rng);
            ch[c] = base + sigma * eta;
        }
        // Gravity keeps the vertical accelerometer channel offset.
        ch[2] += GRAVITY;

        if placement == Placement::PantPocket {
            rotate_pocket(&mut ch);
            let ep: f64 = StandardNormal.sample(&mut rng);
            if activity != Activity::Sit {
                let step_phase = (t * step_freq).fract();
                if i == 0 || step_phase < prev_step_phase {
                    impulse = 1.4 * shape.accel_noise * ep.abs();
                } else {
                    impulse *= 0.55;
                }
                prev_step_phase = step_phase;
            }
            let extra = 0.45 * shape.accel_noise;
            ch[0] += extra * ep + impulse;
            ch[1] += 0.7 * (extra * ep + impulse);
            ch[2] += 1.2 * (extra * ep + impulse);
        }
        samples.push(ch);
    }

    SensorRecording {
        patient_id: profile.patient_id.clone(),
        phase,
        activity,
        placement,
        sample_rate_hz: rate_hz,
        trial,
        samples,
    }
}

/// Fixed hand-to-pocket frame change applied to both sensor vectors.
fn rotate_pocket(ch: &mut [f64; 6]) {
    let (sy, cy) = POCKET_YAW.sin_cos();
    let (st, ct) = POCKET_TILT.sin_cos();
    for off in [0, 3] {
        let (x, y, z) = (ch[off], ch[off + 1], ch[off + 2]);
        // Rz(yaw)
        let (x1, y1, z1) = (cy * x - sy * y, sy * x + cy * y, z);
        // Rx(tilt)
        ch[off] = x1;
        ch[off + 1] = ct * y1 - st * z1;
        ch[off + 2] = st * y1 + ct * z1;
    }
}

/// Files written by [`generate_cohort`], in generation order.
#[derive(Debug, Clone)]
pub struct CohortManifest {
    pub files: Vec<String>,
    pub nrs_file: String,
    pub manifest_file: String,
}

/// Write every recording of the cohort as CSV plus `nrs.csv` and a
/// `manifest.txt` listing the files. Regenerating with the same spec writes
/// byte-identical files.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<CohortManifest, DataError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut files = Vec::with_capacity(spec.recording_count());
    for profile in &spec.profiles {
        for phase in [Phase::Pre, Phase::Post] {
            for activity in &spec.activities {
                for placement in Placement::ALL {
                    for trial in 1..=spec.trials_per_condition {
                        let rec = generate_recording(
                            profile,
                            phase,
                            *activity,
                            placement,
                            trial,
                            spec.rate_hz,
                            spec.trial_duration_s,
                        );
                        let name = format!(
                            "{}_{}_{}_{}_{}.csv",
                            profile.patient_id,
                            phase.as_str(),
                            activity.as_str(),
                            placement.as_str(),
                            trial
                        );
                        let path = out_dir.join(&name);
                        let mut buf = Vec::new();
                        write_recording_csv(&rec, &mut buf).map_err(|e| io_err(&path, e))?;
                        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
                        files.push(name);
                    }
                }
            }
        }
    }

    let nrs_path = out_dir.join("nrs.csv");
    let mut nrs = String::from("patient_id,nrs_pre,nrs_post\n");
    for p in &spec.profiles {
        nrs.push_str(&format!("{},{},{}\n", p.patient_id, p.nrs_pre, p.nrs_post));
    }
    fs::write(&nrs_path, nrs).map_err(|e| io_err(&nrs_path, e))?;

    let manifest_path = out_dir.join("manifest.txt");
    let mut listing = files.join("\n");
    listing.push_str("\nnrs.csv\n");
    fs::write(&manifest_path, listing).map_err(|e| io_err(&manifest_path, e))?;

    Ok(CohortManifest {
        files,
        nrs_file: "nrs.csv".into(),
        manifest_file: "manifest.txt".into(),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// splitmix64-style seed mixing; stable across runs and platforms.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for p in parts {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*p);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}
