//! Dataset persistence: one long-format CSV per dataset plus a sidecar JSON
//! manifest. Every window occupies 14 rows (`day_offset` 0..=13) repeating
//! the window's `participant_id`, `start_day`, and `phq4_score`. Floats are
//! written in Rust's shortest round-trip form, so export -> import is
//! bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DailySensingRecord, Provenance, SampleWindow, WINDOW_DAYS};
use crate::error::{ExportError, ImportError};
use crate::schema::FeatureSchema;

/// Version of the on-disk dataset format.
pub const DATASET_FORMAT_VERSION: u32 = 1;

const FIXED_COLUMNS: [&str; 3] = ["participant_id", "start_day", "day_offset"];
const LABEL_COLUMN: &str = "phq4_score";

/// Sidecar metadata written next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub feature_schema: FeatureSchema,
}

/// `data.csv` -> `data.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// A window present in the CSV but unusable as a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedWindow {
    pub participant_id: String,
    pub start_day: u32,
    pub days_present: usize,
    pub reason: String,
}

/// Import output: the usable dataset plus the windows that were dropped.
#[derive(Debug)]
pub struct ImportReport {
    pub dataset: Dataset,
    pub skipped: Vec<SkippedWindow>,
}

/// Writes the dataset CSV and its manifest. Deterministic: equal datasets
/// produce byte-identical files.
pub fn export_csv(
    dataset: &Dataset,
    schema: &FeatureSchema,
    csv_path: &Path,
) -> Result<(), ExportError> {
    let io_err = |source| ExportError::Io {
        path: csv_path.display().to_string(),
        source,
    };
    let file = File::create(csv_path).map_err(io_err)?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));

    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(schema.feature_names());
    header.push(LABEL_COLUMN);
    let write_err = |e: csv::Error| ExportError::Csv {
        path: csv_path.display().to_string(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(write_err)?;

    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for sample in dataset.samples() {
        for (offset, day) in sample.days.iter().enumerate() {
            row.clear();
            row.push(sample.participant_id.clone());
            row.push(sample.start_day.to_string());
            row.push(offset.to_string());
            row.extend(day.features.iter().map(|v| v.to_string()));
            row.push(sample.phq4_score.to_string());
            writer.write_record(&row).map_err(write_err)?;
        }
    }
    writer.flush().map_err(io_err)?;

    let manifest = DatasetManifest {
        schema_version: DATASET_FORMAT_VERSION,
        provenance: dataset.provenance(),
        feature_schema: schema.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path(csv_path), json + "\n").map_err(io_err)?;
    Ok(())
}

struct WindowAccum {
    first_line: u64,
    phq4: u8,
    /// Slot per day_offset; None until that offset's row arrives.
    days: Vec<Option<Vec<f64>>>,
}

/// Reads a dataset CSV (and its manifest, if present). Windows with missing
/// days are skipped and reported; malformed rows are hard errors naming the
/// line. Without a manifest the canonical schema and ces-import provenance
/// are assumed.
pub fn import_csv(csv_path: &Path) -> Result<ImportReport, ImportError> {
    let manifest = read_manifest(csv_path)?;
    let (schema, provenance) = match &manifest {
        Some(m) => (m.feature_schema.clone(), m.provenance),
        None => (FeatureSchema::canonical().clone(), Provenance::CesImport),
    };

    let io_err = |source| ImportError::Io {
        path: csv_path.display().to_string(),
        source,
    };
    let file = File::open(csv_path).map_err(io_err)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));

    // Header check: every schema feature present, nothing extraneous.
    let headers = reader
        .headers()
        .map_err(|e| ImportError::BadRow {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut feature_cols: Vec<Option<usize>> = vec![None; schema.len()];
    let mut fixed_cols: [Option<usize>; 3] = [None; 3];
    let mut label_col: Option<usize> = None;
    for (i, name) in headers.iter().enumerate() {
        if let Some(pos) = FIXED_COLUMNS.iter().position(|c| *c == name) {
            fixed_cols[pos] = Some(i);
        } else if name == LABEL_COLUMN {
            label_col = Some(i);
        } else if let Some(pos) = schema.position(name) {
            if feature_cols[pos].is_some() {
                return Err(ImportError::BadRow {
                    row: 1,
                    message: format!("duplicate column {name}"),
                });
            }
            feature_cols[pos] = Some(i);
        } else {
            return Err(ImportError::UnknownColumn {
                column: name.to_string(),
            });
        }
    }
    for (pos, col) in fixed_cols.iter().enumerate() {
        if col.is_none() {
            return Err(ImportError::MissingColumn {
                column: FIXED_COLUMNS[pos].to_string(),
            });
        }
    }
    let label_col = label_col.ok_or_else(|| ImportError::MissingColumn {
        column: LABEL_COLUMN.to_string(),
    })?;
    let feature_cols: Vec<usize> = feature_cols
        .iter()
        .enumerate()
        .map(|(pos, col)| {
            col.ok_or_else(|| ImportError::MissingColumn {
                column: schema.def(pos).name.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    let fixed_cols = fixed_cols.map(Option::unwrap);

    // Accumulate windows in first-encounter order so import(export(ds))
    // reproduces the original sample order.
    let mut order: Vec<(String, u32)> = Vec::new();
    let mut accums: HashMap<(String, u32), WindowAccum> = HashMap::new();

    for (rec_idx, record) in reader.records().enumerate() {
        let line = (rec_idx + 2) as u64;
        let record = record.map_err(|e| ImportError::BadRow {
            row: line as usize,
            message: e.to_string(),
        })?;
        let bad = |message: String| ImportError::BadRow {
            row: line as usize,
            message,
        };

        let participant = record.get(fixed_cols[0]).unwrap_or("").to_string();
        if participant.is_empty() {
            return Err(bad("empty participant_id".into()));
        }
        let start_day: u32 = record
            .get(fixed_cols[1])
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("bad start_day: {e}")))?;
        let day_offset: usize = record
            .get(fixed_cols[2])
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("bad day_offset: {e}")))?;
        if day_offset >= WINDOW_DAYS {
            return Err(bad(format!(
                "day_offset {day_offset} out of range 0..={}",
                WINDOW_DAYS - 1
            )));
        }
        let phq4: u8 = record
            .get(label_col)
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("bad phq4_score: {e}")))?;

        let mut features = Vec::with_capacity(schema.len());
        for (pos, &col) in feature_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.parse().map_err(|e| {
                bad(format!("bad value for {}: {e}", schema.def(pos).name))
            })?;
            features.push(v);
        }
        schema
            .validate_values(&features)
            .map_err(|e| bad(e.to_string()))?;

        let key = (participant.clone(), start_day);
        let accum = accums.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            WindowAccum {
                first_line: line,
                phq4,
                days: vec![None; WINDOW_DAYS],
            }
        });
        if accum.phq4 != phq4 {
            return Err(bad(format!(
                "phq4_score {phq4} disagrees with {} for the same window",
                accum.phq4
            )));
        }
        if accum.days[day_offset].is_some() {
            return Err(bad(format!("duplicate day_offset {day_offset}")));
        }
        accum.days[day_offset] = Some(features);
    }

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for key in order {
        let accum = accums.remove(&key).expect("accumulated");
        let (participant, start_day) = key;
        let present = accum.days.iter().filter(|d| d.is_some()).count();
        if present < WINDOW_DAYS {
            log::warn!(
                "skipping window {participant}@{start_day}: {present}/{WINDOW_DAYS} days present"
            );
            skipped.push(SkippedWindow {
                participant_id: participant,
                start_day,
                days_present: present,
                reason: format!("{present}/{WINDOW_DAYS} days present"),
            });
            continue;
        }
        let days: Vec<DailySensingRecord> = accum
            .days
            .into_iter()
            .enumerate()
            .map(|(offset, values)| DailySensingRecord {
                participant_id: participant.clone(),
                day_index: start_day + offset as u32,
                features: values.expect("window is complete"),
            })
            .collect();
        let window = SampleWindow::new(participant, start_day, days, accum.phq4)
            .map_err(|e| ImportError::BadRow {
                row: accum.first_line as usize,
                message: e.to_string(),
            })?;
        samples.push(window);
    }

    let dataset = Dataset::new(samples, provenance)?;
    Ok(ImportReport { dataset, skipped })
}

fn read_manifest(csv_path: &Path) -> Result<Option<DatasetManifest>, ImportError> {
    let path = manifest_path(csv_path);
    let mut text = String::new();
    match File::open(&path) {
        Ok(mut f) => {
            f.read_to_string(&mut text).map_err(|source| ImportError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(ImportError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    }
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| ImportError::Manifest(e.to_string()))?;
    if manifest.schema_version != DATASET_FORMAT_VERSION {
        return Err(ImportError::Manifest(format!(
            "unsupported dataset format version {}",
            manifest.schema_version
        )));
    }
    // Re-validate the embedded schema (rebuilds the name index serde skips).
    manifest.feature_schema =
        FeatureSchema::from_json(&serde_json::to_string(&manifest.feature_schema).unwrap())
            .map_err(|e| ImportError::Manifest(e.to_string()))?;
    Ok(Some(manifest))
}

/// Convenience for writing any text report next to other artifacts.
pub fn write_text(path: &Path, text: &str) -> Result<(), ExportError> {
    let mut f = File::create(path).map_err(|source| ExportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| ExportError::Io {
        path: path.display().to_string(),
        source,
    })
}
