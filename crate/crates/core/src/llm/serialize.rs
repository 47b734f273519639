//! Markdown rendering of behavior windows.
//!
//! A window becomes a table with one row per time step (day or week) and one
//! column per feature, headed by human-readable display names with units.
//! 35-dimension tables carry raw feature values; 5-dimension tables carry
//! category scores, which are means of z-normalized member features and so
//! need a fitted normalizer.

use crate::data::SampleWindow;
use crate::error::LlmError;
use crate::features::{
    to_5d, to_weekly, Category, CategoryMap, Dimension, FeatureConfig, Granularity, Layout,
    Normalizer,
};
use crate::schema::FeatureSchema;

/// Decimal places in rendered cell values; parse-back is exact to half a
/// unit in the last place.
pub const TABLE_DECIMALS: usize = 2;

/// Renders the first `t` days of a window as a markdown behavior table.
pub fn serialize_window(
    window: &SampleWindow,
    t: usize,
    config: FeatureConfig,
    schema: &FeatureSchema,
    map: &CategoryMap,
    normalizer: Option<&Normalizer>,
) -> Result<String, LlmError> {
    if config.layout != Layout::Sequence {
        return Err(LlmError::SequenceLayoutRequired(format!("{config}")));
    }
    let columns = column_names(config.dimension, schema)?;
    let mut steps: Vec<Vec<f64>> = match config.dimension {
        Dimension::D35 => window.prefix(t).iter().map(|d| d.features.clone()).collect(),
        Dimension::D5 => {
            let normalizer = normalizer.ok_or(LlmError::NormalizerRequired)?;
            window
                .prefix(t)
                .iter()
                .map(|d| {
                    let z = normalizer.apply_day(&d.features);
                    to_5d(&z, map).map(|v| v.to_vec())
                })
                .collect::<Result<_, _>>()?
        }
    };
    if steps.is_empty() {
        return Err(LlmError::Table("window prefix holds no days".into()));
    }
    if config.granularity == Granularity::Weekly {
        steps = to_weekly(&steps, true)?;
    }

    let period = match config.granularity {
        Granularity::Daily => "day",
        Granularity::Weekly => "week",
    };
    let mut out = String::new();
    push_row(&mut out, period, columns.iter().map(String::as_str));
    push_row(&mut out, "---", columns.iter().map(|_| "---"));
    for (i, step) in steps.iter().enumerate() {
        let label = match config.granularity {
            Granularity::Daily => format!("Day {}", i + 1),
            Granularity::Weekly => format!("Week {}", i + 1),
        };
        let cells: Vec<String> = step.iter().map(|v| format!("{v:.TABLE_DECIMALS$}")).collect();
        push_row(&mut out, &label, cells.iter().map(String::as_str));
    }
    Ok(out)
}

fn column_names(dimension: Dimension, schema: &FeatureSchema) -> Result<Vec<String>, LlmError> {
    match dimension {
        Dimension::D35 => schema
            .features
            .iter()
            .map(|f| {
                if f.display.trim().is_empty() {
                    Err(LlmError::MissingRename(f.name.clone()))
                } else {
                    Ok(clean_cell(&f.display))
                }
            })
            .collect(),
        Dimension::D5 => Ok(Category::ALL
            .iter()
            .map(|c| format!("{} (z-score)", c.display()))
            .collect()),
    }
}

/// Cell text must not break the table grid.
fn clean_cell(s: &str) -> String {
    s.replace(['|', '\n'], " ").trim().to_string()
}

fn push_row<'a>(out: &mut String, first: &str, cells: impl Iterator<Item = &'a str>) {
    out.push_str("| ");
    out.push_str(first);
    for c in cells {
        out.push_str(" | ");
        out.push_str(c);
    }
    out.push_str(" |\n");
}

/// A behavior table read back from its markdown rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTable {
    /// Feature column headers (the period column is dropped).
    pub columns: Vec<String>,
    /// Period labels, one per data row.
    pub periods: Vec<String>,
    /// Row-major cell values, `periods.len()` x `columns.len()`.
    pub values: Vec<Vec<f64>>,
}

/// Parses a markdown behavior table produced by [`serialize_window`].
pub fn parse_behavior_table(text: &str) -> Result<BehaviorTable, LlmError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();
    let header = lines
        .next()
        .ok_or_else(|| LlmError::Table("empty table".into()))?;
    let header_cells = split_row(header)?;
    if header_cells.len() < 2 {
        return Err(LlmError::Table("header has no feature columns".into()));
    }
    let columns: Vec<String> = header_cells[1..].iter().map(|s| s.to_string()).collect();

    let sep = lines
        .next()
        .ok_or_else(|| LlmError::Table("missing separator row".into()))?;
    if !split_row(sep)?.iter().all(|c| c.chars().all(|ch| ch == '-' || ch == ':')) {
        return Err(LlmError::Table("second row is not a separator".into()));
    }

    let mut periods = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        let cells = split_row(line)?;
        if cells.len() != columns.len() + 1 {
            return Err(LlmError::Table(format!(
                "row has {} cells, header has {}",
                cells.len(),
                columns.len() + 1
            )));
        }
        periods.push(cells[0].to_string());
        let row: Vec<f64> = cells[1..]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| LlmError::Table(format!("non-numeric cell {c:?}")))
            })
            .collect::<Result<_, _>>()?;
        values.push(row);
    }
    if values.is_empty() {
        return Err(LlmError::Table("no data rows".into()));
    }
    Ok(BehaviorTable {
        columns,
        periods,
        values,
    })
}

fn split_row(line: &str) -> Result<Vec<&str>, LlmError> {
    let inner = line
        .strip_prefix('|')
        .and_then(|l| l.strip_suffix('|'))
        .ok_or_else(|| LlmError::Table(format!("row not pipe-delimited: {line:?}")))?;
    Ok(inner.split('|').map(str::trim).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::fit_normalizer;
    use crate::syngen::{generate, GeneratorConfig};

    fn tiny() -> crate::data::Dataset {
        generate(&GeneratorConfig {
            num_users: 2,
            samples_per_user: (2, 2),
            seed: 9,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn cfg(d: Dimension, g: Granularity) -> FeatureConfig {
        FeatureConfig::new(d, g, Layout::Sequence)
    }

    #[test]
    fn seven_day_table_has_seven_rows_and_thirty_six_columns() {
        let ds = tiny();
        let text = serialize_window(
            ds.sample(0),
            7,
            cfg(Dimension::D35, Granularity::Daily),
            FeatureSchema::canonical(),
            CategoryMap::canonical(),
            None,
        )
        .unwrap();
        let table = parse_behavior_table(&text).unwrap();
        assert_eq!(table.values.len(), 7);
        assert_eq!(table.columns.len(), 35);
        assert_eq!(table.periods[0], "Day 1");
        assert_eq!(table.periods[6], "Day 7");
        // 36 columns counting the period label.
        let first_line = text.lines().next().unwrap();
        assert_eq!(first_line.matches('|').count(), 37);
        assert!(first_line.contains("sleep duration (minutes)"));
    }

    #[test]
    fn weekly_five_dim_fortnight_is_two_rows_by_six_columns() {
        let ds = tiny();
        let norm = fit_normalizer(&ds, &[0, 1]).unwrap();
        let text = serialize_window(
            ds.sample(0),
            14,
            cfg(Dimension::D5, Granularity::Weekly),
            FeatureSchema::canonical(),
            CategoryMap::canonical(),
            Some(&norm),
        )
        .unwrap();
        let table = parse_behavior_table(&text).unwrap();
        assert_eq!(table.values.len(), 2);
        assert_eq!(table.columns.len(), 5);
        assert_eq!(table.periods, vec!["Week 1", "Week 2"]);
        assert!(table.columns[0].contains("leisure"));
    }

    #[test]
    fn parse_back_recovers_values_within_rendering_precision() {
        let ds = tiny();
        let window = ds.sample(1);
        let text = serialize_window(
            window,
            14,
            cfg(Dimension::D35, Granularity::Daily),
            FeatureSchema::canonical(),
            CategoryMap::canonical(),
            None,
        )
        .unwrap();
        let table = parse_behavior_table(&text).unwrap();
        for (day, row) in window.days.iter().zip(&table.values) {
            for (raw, parsed) in day.features.iter().zip(row) {
                assert!(
                    (raw - parsed).abs() <= 0.005 + 1e-12,
                    "{raw} vs {parsed}"
                );
            }
        }
    }

    #[test]
    fn partial_trailing_week_gets_its_own_row() {
        let ds = tiny();
        let text = serialize_window(
            ds.sample(0),
            10,
            cfg(Dimension::D35, Granularity::Weekly),
            FeatureSchema::canonical(),
            CategoryMap::canonical(),
            None,
        )
        .unwrap();
        let table = parse_behavior_table(&text).unwrap();
        assert_eq!(table.periods, vec!["Week 1", "Week 2"]);
        // The second row is the mean of days 8..10 only.
        let window = ds.sample(0);
        let f = 0;
        let want: f64 = window.days[7..10].iter().map(|d| d.features[f]).sum::<f64>() / 3.0;
        assert!((table.values[1][f] - want).abs() <= 0.005 + 1e-12);
    }

    #[test]
    fn missing_display_rename_is_rejected() {
        let ds = tiny();
        let mut schema = FeatureSchema::canonical().clone();
        schema.features[3].display = String::new();
        let err = serialize_window(
            ds.sample(0),
            7,
            cfg(Dimension::D35, Granularity::Daily),
            &schema,
            CategoryMap::canonical(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, LlmError::MissingRename(name) if name == "act_still"));
    }

    #[test]
    fn non_sequence_layouts_are_rejected() {
        let ds = tiny();
        for layout in [Layout::Aggregated, Layout::Flattened] {
            let err = serialize_window(
                ds.sample(0),
                7,
                FeatureConfig::new(Dimension::D35, Granularity::Daily, layout),
                FeatureSchema::canonical(),
                CategoryMap::canonical(),
                None,
            )
            .unwrap_err();
            assert!(matches!(err, LlmError::SequenceLayoutRequired(_)));
        }
    }

    #[test]
    fn five_dim_without_normalizer_is_rejected() {
        let ds = tiny();
        let err = serialize_window(
            ds.sample(0),
            7,
            cfg(Dimension::D5, Granularity::Daily),
            FeatureSchema::canonical(),
            CategoryMap::canonical(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, LlmError::NormalizerRequired));
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(parse_behavior_table("").is_err());
        assert!(parse_behavior_table("| a | b |\n").is_err());
        assert!(parse_behavior_table("| a | b |\n| --- | --- |\n").is_err());
        assert!(parse_behavior_table("| a | b |\n| --- | --- |\n| Day 1 | x |\n").is_err());
        assert!(
            parse_behavior_table("| a | b |\n| --- | --- |\n| Day 1 | 1.0 | 2.0 |\n").is_err()
        );
        let ok = parse_behavior_table("| day | f |\n| --- | --- |\n| Day 1 | 1.25 |\n").unwrap();
        assert_eq!(ok.values, vec![vec![1.25]]);
    }
}
