//! Feature representation: turns a window's raw 35-feature days into the
//! tensors models consume. Three orthogonal choices:
//!
//! - dimension: the 35 raw features, or 5 behavioral categories (means of
//!   z-normalized member features);
//! - granularity: daily steps, or weekly averages;
//! - layout: a (time, dim) sequence for sequential models, a time-mean
//!   vector, or a chronological day-major flattening.
//!
//! Raw features are z-normalized with train-split statistics before any
//! aggregation; categories are means of normalized members because raw units
//! (minutes vs counts vs fractions) are incommensurable.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleWindow};
use crate::error::FeatureError;
use crate::schema::FeatureSchema;

/// Number of behavioral categories in the 5-D representation.
pub const NUM_CATEGORIES: usize = 5;

/// Days per week-step when averaging to weekly granularity.
pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Leisure,
    MeTime,
    PhoneTime,
    Sleep,
    SocialTime,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Leisure,
        Category::MeTime,
        Category::PhoneTime,
        Category::Sleep,
        Category::SocialTime,
    ];

    pub fn rank(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Leisure => "leisure",
            Category::MeTime => "me_time",
            Category::PhoneTime => "phone_time",
            Category::Sleep => "sleep",
            Category::SocialTime => "social_time",
        }
    }

    /// Human-readable name for text serialization.
    pub fn display(self) -> &'static str {
        match self {
            Category::Leisure => "leisure",
            Category::MeTime => "me time",
            Category::PhoneTime => "phone time",
            Category::Sleep => "sleep",
            Category::SocialTime => "social time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    D35,
    D5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Daily,
    Weekly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Sequence,
    Aggregated,
    Flattened,
}

/// One feature-representation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dimension: Dimension,
    pub granularity: Granularity,
    pub layout: Layout,
}

impl FeatureConfig {
    pub fn new(dimension: Dimension, granularity: Granularity, layout: Layout) -> Self {
        Self {
            dimension,
            granularity,
            layout,
        }
    }

    /// Width of one time step under this config's dimension.
    pub fn step_dim(&self) -> usize {
        match self.dimension {
            Dimension::D35 => crate::schema::NUM_FEATURES,
            Dimension::D5 => NUM_CATEGORIES,
        }
    }

    /// All dimension x granularity x layout combinations.
    pub fn all() -> Vec<FeatureConfig> {
        let mut out = Vec::new();
        for dimension in [Dimension::D35, Dimension::D5] {
            for granularity in [Granularity::Daily, Granularity::Weekly] {
                for layout in [Layout::Sequence, Layout::Aggregated, Layout::Flattened] {
                    out.push(FeatureConfig::new(dimension, granularity, layout));
                }
            }
        }
        out
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dimension {
            Dimension::D35 => "d35",
            Dimension::D5 => "d5",
        };
        let g = match self.granularity {
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
        };
        let l = match self.layout {
            Layout::Sequence => "sequence",
            Layout::Aggregated => "aggregated",
            Layout::Flattened => "flattened",
        };
        write!(f, "{d}-{g}-{l}")
    }
}

/// Feature-position -> category assignment, total over the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    assignments: Vec<Category>,
    members: [Vec<usize>; NUM_CATEGORIES],
}

#[derive(Debug, Deserialize, Serialize)]
struct CategoryMapFile {
    #[serde(default)]
    description: String,
    map: BTreeMap<String, Category>,
}

static CANONICAL_MAP: LazyLock<CategoryMap> = LazyLock::new(|| {
    CategoryMap::from_json(
        include_str!("../assets/category_map.json"),
        FeatureSchema::canonical(),
    )
    .expect("embedded category map is valid")
});

impl CategoryMap {
    /// The embedded default mapping.
    pub fn canonical() -> &'static CategoryMap {
        &CANONICAL_MAP
    }

    pub fn from_json(json: &str, schema: &FeatureSchema) -> Result<CategoryMap, FeatureError> {
        let file: CategoryMapFile = serde_json::from_str(json)
            .map_err(|e| FeatureError::Shape(format!("category map parse: {e}")))?;
        Self::from_assignments(&file.map, schema)
    }

    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<CategoryMap, FeatureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeatureError::Shape(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, schema)
    }

    pub fn from_assignments(
        map: &BTreeMap<String, Category>,
        schema: &FeatureSchema,
    ) -> Result<CategoryMap, FeatureError> {
        for name in map.keys() {
            if schema.position(name).is_none() {
                return Err(FeatureError::UnknownFeature(name.clone()));
            }
        }
        let assignments: Vec<Category> = schema
            .feature_names()
            .map(|name| {
                map.get(name)
                    .copied()
                    .ok_or_else(|| FeatureError::UnmappedFeature(name.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let mut members: [Vec<usize>; NUM_CATEGORIES] = Default::default();
        for (pos, cat) in assignments.iter().enumerate() {
            members[cat.rank()].push(pos);
        }
        for cat in Category::ALL {
            if members[cat.rank()].is_empty() {
                return Err(FeatureError::EmptyCategory(cat.name().to_string()));
            }
        }
        Ok(CategoryMap {
            assignments,
            members,
        })
    }

    pub fn category_of(&self, feature_pos: usize) -> Category {
        self.assignments[feature_pos]
    }

    pub fn members(&self, cat: Category) -> &[usize] {
        &self.members[cat.rank()]
    }
}

/// Per-feature z-score transform fitted on the train split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population std; 0 marks a constant feature, which passes through
    /// centered.
    pub std: Vec<f64>,
}

/// Fits per-feature mean/std over every day of the given train windows.
pub fn fit_normalizer(dataset: &Dataset, train: &[usize]) -> Result<Normalizer, FeatureError> {
    let dim = crate::schema::NUM_FEATURES;
    let mut sum = vec![0.0f64; dim];
    let mut sum_sq = vec![0.0f64; dim];
    let mut n = 0usize;
    for &i in train {
        for day in &dataset.sample(i).days {
            for (f, &v) in day.features.iter().enumerate() {
                sum[f] += v;
                sum_sq[f] += v * v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(FeatureError::EmptyInput);
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / nf - m * m).max(0.0).sqrt())
        .collect();
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    pub fn apply_day(&self, day: &[f64]) -> Vec<f64> {
        day.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if s > 0.0 { (v - m) / s } else { v - m })
            .collect()
    }
}

/// Mean of each category's member features. Input must already be
/// z-normalized, since categories mix units.
pub fn to_5d(normalized_day: &[f64], map: &CategoryMap) -> Result<[f64; NUM_CATEGORIES], FeatureError> {
    if normalized_day.len() != map.assignments.len() {
        return Err(FeatureError::Shape(format!(
            "day vector has {} values, category map covers {}",
            normalized_day.len(),
            map.assignments.len()
        )));
    }
    let mut out = [0.0f64; NUM_CATEGORIES];
    for (slot, cat) in Category::ALL.iter().enumerate() {
        let members = map.members(*cat);
        let sum: f64 = members.iter().map(|&f| normalized_day[f]).sum();
        out[slot] = sum / members.len() as f64;
    }
    Ok(out)
}

/// Averages day-vectors into week-vectors (chunks of 7 days). A trailing
/// partial week is averaged over its actual days when `allow_partial`,
/// rejected otherwise.
pub fn to_weekly(days: &[Vec<f64>], allow_partial: bool) -> Result<Vec<Vec<f64>>, FeatureError> {
    if days.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    if !allow_partial && days.len() % DAYS_PER_WEEK != 0 {
        return Err(FeatureError::PartialWeek { len: days.len() });
    }
    let dim = days[0].len();
    let mut weeks = Vec::with_capacity(days.len().div_ceil(DAYS_PER_WEEK));
    for chunk in days.chunks(DAYS_PER_WEEK) {
        let mut week = vec![0.0f64; dim];
        for day in chunk {
            if day.len() != dim {
                return Err(FeatureError::Shape(format!(
                    "ragged day vectors: {} vs {dim}",
                    day.len()
                )));
            }
            for (w, v) in week.iter_mut().zip(day) {
                *w += v;
            }
        }
        for w in &mut week {
            *w /= chunk.len() as f64;
        }
        weeks.push(week);
    }
    Ok(weeks)
}

/// Elementwise mean over time steps.
pub fn statistical_aggregate(steps: &[Vec<f64>]) -> Result<Vec<f64>, FeatureError> {
    if steps.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let dim = steps[0].len();
    let mut out = vec![0.0f64; dim];
    for step in steps {
        if step.len() != dim {
            return Err(FeatureError::Shape(format!(
                "ragged step vectors: {} vs {dim}",
                step.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(step) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= steps.len() as f64;
    }
    Ok(out)
}

/// Concatenates time steps in chronological order, step-major.
pub fn sequential_flatten(steps: &[Vec<f64>]) -> Vec<f64> {
    steps.iter().flatten().copied().collect()
}

/// A model-ready tensor. `values` is step-major for Sequence and Flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationTensor {
    pub config: FeatureConfig,
    /// Time steps that produced the tensor (1 step after aggregation).
    pub time_steps: usize,
    /// Width of one time step.
    pub dim: usize,
    pub values: Vec<f64>,
}

impl RepresentationTensor {
    fn validated(self) -> Result<Self, FeatureError> {
        let expected = match self.config.layout {
            Layout::Sequence | Layout::Flattened => self.time_steps * self.dim,
            Layout::Aggregated => self.dim,
        };
        if self.values.len() != expected {
            return Err(FeatureError::Shape(format!(
                "{} values for layout {:?} with {} steps x {} dim",
                self.values.len(),
                self.config.layout,
                self.time_steps,
                self.dim
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(self)
    }

    /// Width seen by a flat (non-sequential) model.
    pub fn flat_width(&self) -> usize {
        self.values.len()
    }

    /// Step `t` of a Sequence tensor.
    pub fn step(&self, t: usize) -> &[f64] {
        debug_assert_eq!(self.config.layout, Layout::Sequence);
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        debug_assert_eq!(self.config.layout, Layout::Sequence);
        self.values.chunks(self.dim)
    }
}

/// Builds the representation of a window's first `t` days.
///
/// Pipeline: z-normalize each day with train statistics, optionally collapse
/// to 5 categories, optionally average weeks, then lay out as sequence /
/// time-mean / flattening. `allow_partial_week` admits a trailing short week
/// (evaluation at t not divisible by 7).
pub fn represent(
    window: &SampleWindow,
    t: usize,
    normalizer: &Normalizer,
    map: &CategoryMap,
    config: FeatureConfig,
    allow_partial_week: bool,
) -> Result<RepresentationTensor, FeatureError> {
    if t == 0 || t > window.days.len() {
        return Err(FeatureError::Shape(format!(
            "prefix length {t} outside 1..={}",
            window.days.len()
        )));
    }
    let mut steps: Vec<Vec<f64>> = window
        .prefix(t)
        .iter()
        .map(|day| normalizer.apply_day(&day.features))
        .collect();
    if config.dimension == Dimension::D5 {
        steps = steps
            .iter()
            .map(|day| to_5d(day, map).map(|v| v.to_vec()))
            .collect::<Result<_, _>>()?;
    }
    if config.granularity == Granularity::Weekly {
        steps = to_weekly(&steps, allow_partial_week)?;
    }
    let dim = config.step_dim();
    let tensor = match config.layout {
        Layout::Sequence => RepresentationTensor {
            config,
            time_steps: steps.len(),
            dim,
            values: sequential_flatten(&steps),
        },
        Layout::Aggregated => RepresentationTensor {
            config,
            time_steps: 1,
            dim,
            values: statistical_aggregate(&steps)?,
        },
        Layout::Flattened => RepresentationTensor {
            config,
            time_steps: steps.len(),
            dim,
            values: sequential_flatten(&steps),
        },
    };
    tensor.validated()
}
