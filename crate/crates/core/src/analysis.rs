//! Dataset analyses: class-level window similarity and per-user feature
//! importance.
//!
//! Both analyses work on any dataset and feed the report stage as CSV.
//! Windows are z-normalized before cosine similarity; without that,
//! mixed-unit features (minutes vs. proportions) would let the
//! large-magnitude ones dominate every inner product.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::classical::{ClassicalKind, ClassicalSpec};
use crate::data::{Dataset, SeverityLevel, NUM_CLASSES, WINDOW_DAYS};
use crate::error::AnalysisError;
use crate::features::{
    self, fit_normalizer, CategoryMap, Dimension, FeatureConfig, Granularity, Layout,
};
use crate::schema::{FeatureSchema, NUM_FEATURES};

/// Mean pairwise cosine similarities between severity classes.
///
/// `entries[a][b]` averages over all cross pairs of class-`a` and class-`b`
/// window vectors; diagonal entries average over distinct intra-class
/// pairs. `None` marks entries with no pairs to average (absent class, or a
/// singleton class on the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: [[Option<f64>; NUM_CLASSES]; NUM_CLASSES],
    pub class_counts: [usize; NUM_CLASSES],
}

impl SimilarityMatrix {
    /// CSV with one row per class; undefined entries stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count");
        for level in SeverityLevel::ALL {
            out.push_str(&format!(",{}", level.name().to_lowercase()));
        }
        out.push('\n');
        for a in SeverityLevel::ALL {
            out.push_str(&format!("{},{}", a.name(), self.class_counts[a.rank()]));
            for b in SeverityLevel::ALL {
                match self.entries[a.rank()][b.rank()] {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine over all cross pairs; `None` when either side is empty.
fn mean_cross_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let sum: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).sum::<f64>())
        .sum();
    Some(sum / (a.len() * b.len()) as f64)
}

/// Mean cosine over distinct unordered pairs; `None` below two vectors.
fn mean_intra_cosine(a: &[Vec<f64>]) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            sum += cosine(&a[i], &a[j]);
        }
    }
    Some(sum / (a.len() * (a.len() - 1) / 2) as f64)
}

/// Computes the class similarity matrix over the given windows. Each window
/// becomes the day-major flattening of its 14 z-scored days; normalization
/// statistics are fit on the same windows.
pub fn class_similarity_matrix(
    dataset: &Dataset,
    indices: &[usize],
) -> Result<SimilarityMatrix, AnalysisError> {
    if indices.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let normalizer = fit_normalizer(dataset, indices)?;
    let config = FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Sequence);
    let map = CategoryMap::canonical();
    let mut by_class: [Vec<Vec<f64>>; NUM_CLASSES] = Default::default();
    for &i in indices {
        let sample = dataset.sample(i);
        let tensor =
            features::represent(sample, WINDOW_DAYS, &normalizer, map, config, false)?;
        by_class[sample.label.rank()].push(tensor.values);
    }
    let mut entries = [[None; NUM_CLASSES]; NUM_CLASSES];
    for a in 0..NUM_CLASSES {
        entries[a][a] = mean_intra_cosine(&by_class[a]);
        for b in a + 1..NUM_CLASSES {
            let v = mean_cross_cosine(&by_class[a], &by_class[b]);
            entries[a][b] = v;
            entries[b][a] = v;
        }
    }
    Ok(SimilarityMatrix {
        entries,
        class_counts: std::array::from_fn(|c| by_class[c].len()),
    })
}

/// Gain-based feature importances from a boosted tree ensemble fit on one
/// participant's aggregated windows, normalized to sum to 1. Requires at
/// least two distinct classes in the participant's windows.
pub fn per_user_feature_importance(
    dataset: &Dataset,
    user: &str,
) -> Result<Vec<f64>, AnalysisError> {
    let idx = dataset.user_samples(user);
    if idx.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let labels: Vec<SeverityLevel> = idx.iter().map(|&i| dataset.sample(i).label).collect();
    let distinct = {
        let mut seen = [false; NUM_CLASSES];
        for l in &labels {
            seen[l.rank()] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(AnalysisError::DegenerateUser(user.to_string()));
    }

    let normalizer = fit_normalizer(dataset, idx)?;
    let config = FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Aggregated);
    let map = CategoryMap::canonical();
    let inputs: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            features::represent(dataset.sample(i), WINDOW_DAYS, &normalizer, map, config, false)
                .map(|t| t.values)
        })
        .collect::<Result<_, _>>()?;

    let spec = ClassicalSpec::new(ClassicalKind::XgboostStyleGbdt);
    let model = crate::classical::fit(&spec, &inputs, &labels)?;
    let gains = model
        .feature_gains()
        .expect("boosted model reports gains")
        .to_vec();
    let total: f64 = gains.iter().sum();
    if total <= 0.0 {
        return Err(AnalysisError::NoSignal(user.to_string()));
    }
    Ok(gains.into_iter().map(|g| g / total).collect())
}

/// Spread of per-user feature importances across a dataset's participants.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDispersion {
    /// Feature names, schema order.
    pub features: Vec<String>,
    /// Per feature: (min, median, max) of its importance across users.
    pub stats: Vec<(f64, f64, f64)>,
    /// Participants that contributed, dataset order.
    pub users: Vec<String>,
    /// Importance vectors aligned with `users`.
    pub per_user: Vec<Vec<f64>>,
    /// Participants skipped for degenerate windows (single class, or no
    /// informative splits).
    pub skipped: Vec<String>,
}

impl ImportanceDispersion {
    /// Box-plot-ready CSV: one row per feature.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,min,median,max\n");
        for (name, (lo, med, hi)) in self.features.iter().zip(&self.stats) {
            out.push_str(&format!("{name},{lo:.6},{med:.6},{hi:.6}\n"));
        }
        out
    }

    /// One row per contributing user, one column per feature.
    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user");
        for name in &self.features {
            out.push_str(&format!(",{name}"));
        }
        out.push('\n');
        for (user, row) in self.users.iter().zip(&self.per_user) {
            out.push_str(user);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn median_of_sorted(values: &[f64]) -> f64 {
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Runs [`per_user_feature_importance`] for every participant (in parallel;
/// results are schedule-independent) and summarizes each feature's
/// importance spread. Degenerate participants are skipped and listed.
pub fn importance_dispersion(
    dataset: &Dataset,
    schema: &FeatureSchema,
) -> Result<ImportanceDispersion, AnalysisError> {
    let users: Vec<String> = dataset.users().map(str::to_string).collect();
    if users.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }

    let slots: Vec<Mutex<Option<Result<Vec<f64>, AnalysisError>>>> =
        users.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(users.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(user) = users.get(i) else { break };
                let result = per_user_feature_importance(dataset, user);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let mut kept_users = Vec::new();
    let mut per_user = Vec::new();
    let mut skipped = Vec::new();
    for (user, slot) in users.iter().zip(slots) {
        match slot.into_inner().expect("slot lock").expect("all slots filled") {
            Ok(row) => {
                kept_users.push(user.clone());
                per_user.push(row);
            }
            Err(AnalysisError::DegenerateUser(_) | AnalysisError::NoSignal(_)) => {
                skipped.push(user.clone());
            }
            Err(other) => return Err(other),
        }
    }
    if per_user.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }

    let stats = (0..NUM_FEATURES)
        .map(|f| {
            let mut col: Vec<f64> = per_user.iter().map(|row| row[f]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (col[0], median_of_sorted(&col), col[col.len() - 1])
        })
        .collect();

    Ok(ImportanceDispersion {
        features: schema.feature_names().map(str::to_string).collect(),
        stats,
        users: kept_users,
        per_user,
        skipped,
    })
}

/// Spearman rank correlation between two importance vectors. Ties get
/// average ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks; tied values share the mean of their positions.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}
