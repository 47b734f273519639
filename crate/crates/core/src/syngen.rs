//! Class-conditional synthetic data generator. Produces datasets shaped like
//! the college-student sensing corpus: many users, dozens-to-hundreds of
//! two-week windows each, heavy Normal-class imbalance, and behavioral
//! features whose class signal can be dialed up or down.
//!
//! Knobs:
//! - `separability`: distance between class-conditional feature means, in
//!   units of each feature's std. Zero makes labels unlearnable.
//! - `user_heterogeneity`: std of per-user baseline offsets, giving each user
//!   their own behavioral fingerprint.
//! - `user_feature_saliency`: fraction of features whose class-relevance is
//!   redrawn per user, so which features matter differs across users.
//!
//! Determinism: every user's stream comes from an RNG keyed by (seed, user
//! index), so output is identical regardless of generation order or thread
//! count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    DailySensingRecord, Dataset, NUM_CLASSES, Provenance, SampleWindow, SeverityLevel,
    WINDOW_DAYS,
};
use crate::error::{GenError, ImportError};
use crate::io::{import_csv, ImportReport};
use crate::schema::FeatureSchema;

/// Class sample counts of the published dataset (Normal, Mild, Moderate,
/// Severe); their ratios are the default class proportions.
pub const REFERENCE_CLASS_COUNTS: [usize; NUM_CLASSES] = [15_477, 6_524, 1_795, 982];

/// Default class proportions derived from [`REFERENCE_CLASS_COUNTS`].
pub fn reference_proportions() -> [f64; NUM_CLASSES] {
    let total: usize = REFERENCE_CLASS_COUNTS.iter().sum();
    REFERENCE_CLASS_COUNTS.map(|c| c as f64 / total as f64)
}

/// Probability that a window keeps the previous window's severity level
/// instead of redrawing from the target proportions. The redraw may land on
/// the same level, so the chain's stationary distribution equals the target
/// proportions exactly.
pub const LABEL_STICKINESS: f64 = 0.7;

/// Lag-1 correlation of daily feature noise within a window.
const DAY_NOISE_PHI: f64 = 0.3;

/// Chance that a per-user redrawn feature is informative (vs "this user's
/// behavior carries no signal on this feature").
const SALIENT_INFORMATIVE_PROB: f64 = 0.4;

/// Hand-set population-level class loadings: sign and relative weight of how
/// each feature's mean shifts as severity rises. Unlisted features carry no
/// class signal. Values are fixtures chosen for behavioral plausibility
/// (worse severity: less sleep and activity, more phone and home time, less
/// social exposure), not estimates from real data.
const GLOBAL_LOADINGS: &[(&str, f64)] = &[
    ("sleep_duration", -1.0),
    ("sleep_start", 0.8),
    ("sleep_end", 0.6),
    ("act_still", 0.8),
    ("act_walking", -0.7),
    ("act_running", -0.5),
    ("unlock_num", 0.6),
    ("unlock_duration", 0.9),
    ("loc_home_dur", 0.8),
    ("loc_self_dorm_dur", 0.6),
    ("loc_social_dur", -0.8),
    ("loc_leisure_dur", -0.7),
    ("loc_workout_dur", -0.6),
    ("loc_study_dur", -0.4),
    ("audio_voice_prop", -0.7),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_users: usize,
    /// Inclusive (min, max) windows per user, drawn uniformly.
    pub samples_per_user: (usize, usize),
    /// Target severity proportions (Normal, Mild, Moderate, Severe).
    pub class_proportions: [f64; NUM_CLASSES],
    /// Class-mean shift between Normal and Severe, in feature-std units.
    pub separability: f64,
    /// Std of per-user baseline offsets, in feature-std units.
    pub user_heterogeneity: f64,
    /// Fraction of features whose class loading is redrawn per user.
    pub user_feature_saliency: f64,
    /// Daily noise scale, multiplying each feature's std.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_users: 215,
            samples_per_user: (61, 432),
            class_proportions: reference_proportions(),
            separability: 1.0,
            user_heterogeneity: 0.5,
            user_feature_saliency: 0.3,
            noise_std: 1.0,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: String| Err(GenError::InvalidConfig(msg));
        if self.num_users == 0 {
            return bad("num_users must be >= 1".into());
        }
        let (min, max) = self.samples_per_user;
        if min == 0 || min > max {
            return bad(format!("samples_per_user ({min}, {max}) must satisfy 1 <= min <= max"));
        }
        if self.class_proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("class proportions {:?} must lie in [0, 1]", self.class_proportions));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class proportions sum to {sum}, expected 1"));
        }
        if !self.separability.is_finite() || self.separability < 0.0 {
            return bad(format!("separability {} must be finite and >= 0", self.separability));
        }
        if !self.user_heterogeneity.is_finite() || self.user_heterogeneity < 0.0 {
            return bad(format!("user_heterogeneity {} must be finite and >= 0", self.user_heterogeneity));
        }
        if !(0.0..=1.0).contains(&self.user_feature_saliency) {
            return bad(format!("user_feature_saliency {} must lie in [0, 1]", self.user_feature_saliency));
        }
        if !self.noise_std.is_finite() || self.noise_std <= 0.0 {
            return bad(format!("noise_std {} must be finite and > 0", self.noise_std));
        }
        Ok(())
    }
}

fn user_rng(seed: u64, user_index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"syngen-user");
    h.update(seed.to_le_bytes());
    h.update(user_index.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn draw_class(rng: &mut impl Rng, proportions: &[f64; NUM_CLASSES]) -> SeverityLevel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return SeverityLevel::from_rank(c).unwrap();
        }
    }
    SeverityLevel::Severe
}

/// Uniform PHQ-4 total consistent with the level's score bracket.
fn draw_phq4(rng: &mut impl Rng, level: SeverityLevel) -> u8 {
    let (lo, hi) = match level {
        SeverityLevel::Normal => (0, 3),
        SeverityLevel::Mild => (4, 6),
        SeverityLevel::Moderate => (7, 9),
        SeverityLevel::Severe => (10, 12),
    };
    rng.random_range(lo..=hi)
}

/// Generates a dataset. Pure function of the config; users are independent
/// streams and could be produced in parallel without changing the output.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset, GenError> {
    config.validate()?;
    let schema = FeatureSchema::canonical();
    let n_feat = schema.len();

    let mut global_loadings = vec![0.0f64; n_feat];
    for (name, weight) in GLOBAL_LOADINGS {
        let pos = schema
            .position(name)
            .unwrap_or_else(|| panic!("loading references unknown feature {name}"));
        global_loadings[pos] = *weight;
    }

    let mut samples = Vec::new();
    for user_index in 0..config.num_users {
        let mut rng = user_rng(config.seed, user_index as u64);
        let user_id = format!("user_{user_index:04}");

        // Per-user baseline offsets and (possibly redrawn) class loadings.
        let baseline: Vec<f64> = (0..n_feat)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                config.user_heterogeneity * z
            })
            .collect();
        let loadings: Vec<f64> = (0..n_feat)
            .map(|f| {
                if rng.random::<f64>() < config.user_feature_saliency {
                    if rng.random::<f64>() < SALIENT_INFORMATIVE_PROB {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        sign * rng.random_range(0.5..=1.0)
                    } else {
                        0.0
                    }
                } else {
                    global_loadings[f]
                }
            })
            .collect();

        let num_windows = rng.random_range(config.samples_per_user.0..=config.samples_per_user.1);
        let mut level = draw_class(&mut rng, &config.class_proportions);
        for w in 0..num_windows {
            if w > 0 && rng.random::<f64>() >= LABEL_STICKINESS {
                level = draw_class(&mut rng, &config.class_proportions);
            }
            let start_day = (w * WINDOW_DAYS) as u32;
            let severity_frac = level.rank() as f64 / (NUM_CLASSES - 1) as f64;

            let mut days = Vec::with_capacity(WINDOW_DAYS);
            // AR(1) noise state per feature, stationary init.
            let mut noise: Vec<f64> = (0..n_feat)
                .map(|f| {
                    let z: f64 = rng.sample(StandardNormal);
                    schema.def(f).std * config.noise_std * z
                })
                .collect();
            for offset in 0..WINDOW_DAYS {
                let mut values = Vec::with_capacity(n_feat);
                for f in 0..n_feat {
                    let def = schema.def(f);
                    if offset > 0 {
                        let z: f64 = rng.sample(StandardNormal);
                        noise[f] = DAY_NOISE_PHI * noise[f]
                            + (1.0 - DAY_NOISE_PHI * DAY_NOISE_PHI).sqrt()
                                * def.std
                                * config.noise_std
                                * z;
                    }
                    let mean = def.mean
                        + def.std * baseline[f]
                        + config.separability * def.std * loadings[f] * severity_frac;
                    values.push(schema.clip(f, mean + noise[f]));
                }
                days.push(DailySensingRecord {
                    participant_id: user_id.clone(),
                    day_index: start_day + offset as u32,
                    features: values,
                });
            }
            let phq4 = draw_phq4(&mut rng, level);
            let window = SampleWindow::new(user_id.clone(), start_day, days, phq4)
                .expect("generated window satisfies window invariants");
            samples.push(window);
        }
    }

    Ok(Dataset::new(samples, Provenance::Synthetic).expect("generated windows are ordered"))
}

/// Imports a sensing-corpus CSV (the core dataset format). Incomplete windows
/// are skipped and listed in the report.
pub fn import_ces_csv(path: &std::path::Path) -> Result<ImportReport, ImportError> {
    import_csv(path)
}
