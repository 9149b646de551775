//! Field-level helpers for the JSON artifacts, so parse failures name the
//! offending key.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub(crate) fn parse_object(text: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Parse {
            field: "<root>".into(),
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(Error::Parse {
            field: "<root>".into(),
            message: e.to_string(),
        }),
    }
}

fn missing(field: &str) -> Error {
    Error::Parse {
        field: field.into(),
        message: "missing".into(),
    }
}

fn wrong_type(field: &str, expected: &str) -> Error {
    Error::Parse {
        field: field.into(),
        message: format!("expected {expected}"),
    }
}

pub(crate) fn get<'a>(obj: &'a Map<String, Value>, field: &str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| missing(field))
}

pub(crate) fn f64_field(obj: &Map<String, Value>, field: &str) -> Result<f64> {
    get(obj, field)?
        .as_f64()
        .ok_or_else(|| wrong_type(field, "a number"))
}

pub(crate) fn u64_field(obj: &Map<String, Value>, field: &str) -> Result<u64> {
    get(obj, field)?
        .as_u64()
        .ok_or_else(|| wrong_type(field, "a non-negative integer"))
}

pub(crate) fn f64_array(obj: &Map<String, Value>, field: &str) -> Result<Vec<f64>> {
    let arr = get(obj, field)?
        .as_array()
        .ok_or_else(|| wrong_type(field, "an array of numbers"))?;
    arr.iter()
        .map(|v| v.as_f64().ok_or_else(|| wrong_type(field, "an array of numbers")))
        .collect()
}

pub(crate) fn object_field<'a>(
    obj: &'a Map<String, Value>,
    field: &str,
) -> Result<&'a Map<String, Value>> {
    get(obj, field)?
        .as_object()
        .ok_or_else(|| wrong_type(field, "an object"))
}

/// Writes `bytes` next to `path` and renames into place, so a failed run
/// never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
