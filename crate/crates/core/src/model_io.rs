//! Model and prediction files. Every write goes to a temporary sibling first
//! and is renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::conformal::SetValuedModel;
use crate::error::{GpsError, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = format!(".{name}.tmp-{}", std::process::id());
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(tmp),
        _ => PathBuf::from(tmp),
    }
}

/// Write `bytes` to `path` so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn model_to_string(model: &SetValuedModel) -> Result<String> {
    let mut s = serde_json::to_string_pretty(model).map_err(|e| GpsError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_str(text: &str) -> Result<SetValuedModel> {
    let model: SetValuedModel = serde_json::from_str(text).map_err(|e| GpsError::parse(e.line(), e.to_string()))?;
    if model.format_version != MODEL_FORMAT_VERSION {
        return Err(GpsError::input(format!(
            "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
            model.format_version
        )));
    }
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &SetValuedModel, path: &Path) -> Result<()> {
    write_atomic(path, model_to_string(model)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<SetValuedModel> {
    model_from_str(&std::fs::read_to_string(path)?)
}

pub const PREDICTIONS_HEADER: &str = "labels";

/// One row per point: the comma-joined names of the predicted classes, or an
/// empty field when the point is flagged as an outlier.
pub fn predictions_to_string(sets: &[Vec<usize>], classes: &[String]) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record([PREDICTIONS_HEADER]).map_err(std::io::Error::from)?;
    for set in sets {
        let names: Vec<&str> = set.iter().map(|&k| classes[k].as_str()).collect();
        wtr.write_record([names.join(",")]).map_err(std::io::Error::from)?;
    }
    let bytes = wtr.into_inner().map_err(|e| GpsError::Internal(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn save_predictions(path: &Path, sets: &[Vec<usize>], classes: &[String]) -> Result<()> {
    write_atomic(path, predictions_to_string(sets, classes)?.as_bytes())
}

pub fn read_predictions<R: std::io::Read>(reader: R, classes: &[String]) -> Result<Vec<Vec<usize>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| GpsError::parse(1, e.to_string()))?;
    if header.len() != 1 || &header[0] != PREDICTIONS_HEADER {
        return Err(GpsError::parse(1, format!("expected header `{PREDICTIONS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| GpsError::parse(line, e.to_string()))?;
        if rec.len() != 1 {
            return Err(GpsError::parse(line, "expected a single field"));
        }
        let field = rec[0].trim();
        let mut set = Vec::new();
        if !field.is_empty() {
            for name in field.split(',') {
                let k = classes
                    .iter()
                    .position(|c| c == name.trim())
                    .ok_or_else(|| GpsError::parse(line, format!("unknown class `{name}`")))?;
                set.push(k);
            }
        }
        set.sort_unstable();
        set.dedup();
        out.push(set);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, classes: &[String]) -> Result<Vec<Vec<usize>>> {
    read_predictions(std::fs::File::open(path)?, classes)
}
