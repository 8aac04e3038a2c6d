//! Named run configurations shipped as TOML files under `presets/`.
//!
//! A preset holds a [`RunConfig`] at the top level plus a `[preset]` table
//! naming the dataset and split. Overrides use dotted keys into the same
//! document (`lr=0.01`, `model.dropout=0.3`, `preset.split=10/5/5`), and
//! `model.gcn_layers=K` rebuilds the layer widths for depth `K`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::gcn_dims_for_depth;
use crate::trainer::RunConfig;

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../presets/", $name, ".toml")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = presets![
    "cora-1d",
    "cora-2d",
    "cora-gcn",
    "cora-nfc-only",
    "cora-mean5-only",
    "citeseer-1d",
    "citeseer-2d",
    "citeseer-gcn",
    "citeseer-nfc-only",
    "citeseer-mean5-only",
    "pubmed-1d",
    "pubmed-2d",
    "pubmed-gcn",
    "pubmed-nfc-only",
    "pubmed-mean5-only",
];

/// Hidden width used when `model.gcn_layers` grows a single-layer model.
const DEFAULT_HIDDEN: usize = 16;

pub fn preset_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetMeta {
    #[serde(default)]
    pub description: String,
    pub dataset: String,
    /// Split preset name or `train/val/test` counts.
    pub split: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub meta: PresetMeta,
    pub run: RunConfig,
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not key=value"))),
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn get_path<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Applies overrides to a parsed preset document. Giving one key twice with
/// different values, or both `model.gcn_layers` and `model.gcn_dims`, is a
/// conflict.
pub fn apply_overrides(doc: &mut Table, overrides: &[(String, String)]) -> Result<()> {
    let mut seen: Vec<(&str, Value)> = Vec::new();
    for (k, raw) in overrides {
        let v = override_value(raw);
        if let Some((_, prev)) = seen.iter().find(|(s, _)| s == k) {
            if *prev != v {
                return Err(Error::Config(format!(
                    "conflicting overrides for `{k}`: {prev} vs {v}"
                )));
            }
            continue;
        }
        seen.push((k, v));
    }
    let has = |key: &str| seen.iter().any(|(k, _)| *k == key);
    if has("model.gcn_layers") && has("model.gcn_dims") {
        return Err(Error::Config(
            "`model.gcn_layers` and `model.gcn_dims` conflict".into(),
        ));
    }
    let mut depth = None;
    for (k, v) in &seen {
        if *k == "model.gcn_layers" {
            let d = v
                .as_integer()
                .and_then(|d| usize::try_from(d).ok())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "`model.gcn_layers` must be a non-negative integer, not {v}"
                    ))
                })?;
            depth = Some(d);
        } else {
            set_path(doc, k, v.clone())?;
        }
    }
    if let Some(depth) = depth {
        let dims: Vec<usize> = get_path(doc, "model.gcn_dims")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_integer())
                    .map(|v| v as usize)
                    .collect()
            })
            .unwrap_or_default();
        let classes = get_path(doc, "model.num_classes")
            .and_then(Value::as_integer)
            .ok_or_else(|| Error::Config("preset has no `model.num_classes`".into()))?
            as usize;
        let hidden = if dims.len() >= 2 {
            dims[0]
        } else {
            DEFAULT_HIDDEN
        };
        let new: Vec<Value> = gcn_dims_for_depth(depth, hidden, classes)
            .into_iter()
            .map(|d| Value::Integer(d as i64))
            .collect();
        set_path(doc, "model.gcn_dims", Value::Array(new))?;
    }
    Ok(())
}

fn from_document(name: &str, mut doc: Table) -> Result<Preset> {
    let meta = doc
        .remove("preset")
        .ok_or_else(|| Error::Config(format!("preset `{name}` has no [preset] table")))?;
    let meta: PresetMeta = meta
        .try_into()
        .map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
    let run: RunConfig = Value::Table(doc)
        .try_into()
        .map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
    Ok(Preset {
        name: name.to_string(),
        meta,
        run,
    })
}

fn parse_document(name: &str, text: &str) -> Result<Table> {
    toml::from_str(text).map_err(|e| Error::Config(format!("preset `{name}`: {e}")))
}

/// A built-in preset by name, or a preset file when `name` ends in `.toml`.
pub fn load_preset(name: &str, overrides: &[(String, String)]) -> Result<Preset> {
    let (label, text) = if name.ends_with(".toml") {
        let path = Path::new(name);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name)
            .to_string();
        (label, text)
    } else {
        let text = preset_source(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset `{name}`; available: {}",
                preset_names().join(", ")
            ))
        })?;
        (name.to_string(), text.to_string())
    };
    let mut doc = parse_document(&label, &text)?;
    apply_overrides(&mut doc, overrides)?;
    from_document(&label, doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::ops::ConvMode;

    fn ov(pairs: &[&str]) -> Vec<(String, String)> {
        pairs.iter().map(|p| parse_override(p).unwrap()).collect()
    }

    #[test]
    fn every_builtin_parses_and_validates() {
        let dims = [("cora", 1433), ("citeseer", 3703), ("pubmed", 500)];
        for name in preset_names() {
            let p = load_preset(name, &[]).unwrap();
            let d = dims.iter().find(|(n, _)| *n == p.meta.dataset).unwrap().1;
            p.run.validate(d).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn cora_1d_values() {
        let p = load_preset("cora-1d", &[]).unwrap();
        let r = &p.run;
        assert_eq!(
            (r.lr, r.l2, r.max_epochs, r.model.dropout),
            (0.002, 1e-4, 200, 0.5)
        );
        let c = r.model.conv.unwrap();
        assert_eq!(
            (c.mode, c.kernel, c.stride, c.filters),
            (ConvMode::Conv1d, 32, 16, 64)
        );
        assert_eq!(
            (r.model.bandwidth, r.model.gcn_dims.clone()),
            (6, vec![16, 7])
        );
        assert_eq!(p.meta.split, "cora-fastgcn");
        let two = load_preset("cora-2d", &[]).unwrap().run.model.conv.unwrap();
        assert_eq!((two.mode, two.width), (ConvMode::Conv2d, 3));
    }

    #[test]
    fn overrides_apply() {
        let p = load_preset(
            "cora-1d",
            &ov(&["lr=0.01", "model.dropout=0.25", "preset.split=10/5/5"]),
        )
        .unwrap();
        assert_eq!(p.run.lr, 0.01);
        assert_eq!(p.run.model.dropout, 0.25);
        assert_eq!(p.meta.split, "10/5/5");
    }

    #[test]
    fn depth_override() {
        let p = load_preset("cora-1d", &ov(&["model.gcn_layers=5"])).unwrap();
        assert_eq!(p.run.model.gcn_dims, vec![16, 16, 16, 16, 7]);
        let p = load_preset("cora-1d", &ov(&["model.gcn_layers=1"])).unwrap();
        assert_eq!(p.run.model.gcn_dims, vec![7]);
        let p = load_preset("pubmed-gcn", &ov(&["model.gcn_layers=3"])).unwrap();
        assert_eq!(p.run.model.gcn_dims, vec![16, 16, 3]);
        assert_eq!(p.run.model.variant, Variant::GcnBaseline);
    }

    #[test]
    fn conflicts_and_unknowns_are_config_errors() {
        assert!(matches!(
            load_preset("cora-1d", &ov(&["lr=0.1", "lr=0.2"])),
            Err(Error::Config(_))
        ));
        assert!(load_preset("cora-1d", &ov(&["lr=0.1", "lr=0.1"])).is_ok());
        assert!(matches!(
            load_preset(
                "cora-1d",
                &ov(&["model.gcn_layers=2", "model.gcn_dims=[4, 7]"])
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_preset("cora-1d", &ov(&["model.nonsense=1"])),
            Err(Error::Config(_))
        ));
        let err = load_preset("cora-9d", &[]).unwrap_err().to_string();
        assert!(err.contains("cora-1d"), "{err}");
        assert!(parse_override("novalue").is_err());
    }
}
