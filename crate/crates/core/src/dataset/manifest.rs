//! JSON manifest: `{ "version": 1, "cases": [...] }`.
//!
//! Loading is strict: one malformed or inconsistent record rejects the
//! whole file. Feature files are not touched here; a dangling path only
//! surfaces when the bag is loaded.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{CaseRecord, DatasetError, Label, Result, SlideRecord};

pub const MANIFEST_VERSION: u64 = 1;

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<CaseRecord>> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| DatasetError::Format(format!("manifest is not valid JSON: {e}")))?;
    let root = root
        .as_object()
        .ok_or_else(|| DatasetError::Format("manifest root must be an object".into()))?;
    match root.get("version").and_then(Value::as_u64) {
        Some(MANIFEST_VERSION) => {}
        Some(v) => return Err(DatasetError::Format(format!("unsupported manifest version {v}"))),
        None => return Err(DatasetError::Format("manifest `version` missing or not an integer".into())),
    }
    let cases = root
        .get("cases")
        .and_then(Value::as_array)
        .ok_or_else(|| DatasetError::Format("manifest `cases` missing or not an array".into()))?;

    let mut records = Vec::with_capacity(cases.len());
    for (i, raw) in cases.iter().enumerate() {
        records.push(parse_case(i, raw)?);
    }
    validate_cases(&records)?;
    Ok(records)
}

fn parse_case(index: usize, raw: &Value) -> Result<CaseRecord> {
    let placeholder = format!("#{index}");
    let obj = raw.as_object().ok_or_else(|| DatasetError::Parse {
        case_id: placeholder.clone(),
        field: "<record>".into(),
        message: "case record must be an object".into(),
    })?;
    let case_id: String = field(obj, &placeholder, "case_id")?;
    let patient_id: String = field(obj, &case_id, "patient_id")?;
    let label: String = field(obj, &case_id, "label")?;
    let label = Label::parse(&label).filter(|_| label == "low" || label == "high").ok_or_else(|| {
        DatasetError::Parse {
            case_id: case_id.clone(),
            field: "label".into(),
            message: format!("expected \"low\" or \"high\", found {label:?}"),
        }
    })?;
    let tags: BTreeSet<String> = field(obj, &case_id, "tags")?;
    let slides: Vec<SlideRecord> = field(obj, &case_id, "slides")?;
    Ok(CaseRecord { case_id, patient_id, label, tags, slides })
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, case_id: &str, name: &str) -> Result<T> {
    let value = obj.get(name).ok_or_else(|| DatasetError::Parse {
        case_id: case_id.to_string(),
        field: name.to_string(),
        message: "missing".into(),
    })?;
    serde_json::from_value(value.clone()).map_err(|e| DatasetError::Parse {
        case_id: case_id.to_string(),
        field: name.to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn validate_cases(cases: &[CaseRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    for case in cases {
        if case.case_id.is_empty() {
            return Err(DatasetError::Validation("empty case_id".into()));
        }
        if !ids.insert(case.case_id.as_str()) {
            return Err(DatasetError::Validation(format!("duplicate case_id {}", case.case_id)));
        }
        if case.slides.is_empty() {
            return Err(DatasetError::Validation(format!("case {} has no slides", case.case_id)));
        }
        for slide in &case.slides {
            let mut sections = HashSet::new();
            let mut indices = HashSet::new();
            for section in &slide.sections {
                if !sections.insert(section.section_id) {
                    return Err(DatasetError::Validation(format!(
                        "case {}: duplicate section {} on slide {}",
                        case.case_id, section.section_id, slide.slide_id
                    )));
                }
                for &idx in &section.tile_indices {
                    if !indices.insert(idx) {
                        return Err(DatasetError::Validation(format!(
                            "case {}: tile index {idx} listed in more than one section of slide {}",
                            case.case_id, slide.slide_id
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ManifestDoc<'a> {
    version: u64,
    cases: &'a [CaseRecord],
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<&'a Value>,
}

/// Pretty JSON with a trailing newline; byte-stable for equal inputs.
pub fn render_manifest(cases: &[CaseRecord], run_config: Option<&Value>) -> Result<String> {
    validate_cases(cases)?;
    let doc = ManifestDoc { version: MANIFEST_VERSION, cases, run_config };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| DatasetError::Format(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_manifest(path: impl AsRef<Path>, cases: &[CaseRecord], run_config: Option<&Value>) -> Result<()> {
    let path = path.as_ref();
    let text = render_manifest(cases, run_config)?;
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}
