//! Line-oriented checkpoint format, fields separated by tabs:
//!
//! ```text
//! nfcgcn-checkpoint  1
//! spec  {json ModelSpec}
//! feature_dim  D
//! meta  {json}
//! tensor  <name>  <d0,d1,...>  <v0>  <v1>  ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::{ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "nfcgcn-checkpoint";
const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub feature_dim: usize,
    /// Free-form run metadata (sampling seed, configuration echo).
    pub meta: Value,
    pub params: ModelParams<T>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    ckpt.params.validate(&ckpt.spec, ckpt.feature_dim)?;
    let spec = serde_json::to_string(&ckpt.spec).map_err(|e| Error::Other(e.to_string()))?;
    let mut out = format!(
        "{MAGIC}\t{VERSION}\nspec\t{spec}\nfeature_dim\t{}\nmeta\t{}\n",
        ckpt.feature_dim, ckpt.meta
    );
    for p in ckpt.params.iter() {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        write!(out, "tensor\t{}\t{}", p.name, dims.join(",")).expect("writing to a String");
        for v in p.value.iter() {
            write!(out, "\t{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = |key: &str| -> Result<(usize, String)> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| perr(0, format!("missing `{key}` line")))?;
        match line.split_once('\t') {
            Some((k, rest)) if k == key => Ok((no, rest.to_string())),
            _ => Err(perr(no, format!("expected `{key}` line"))),
        }
    };
    let (no, version) = header(MAGIC)?;
    if version != VERSION {
        return Err(perr(
            no,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let (no, spec) = header("spec")?;
    let spec: ModelSpec = serde_json::from_str(&spec).map_err(|e| perr(no, e.to_string()))?;
    let (no, d) = header("feature_dim")?;
    let feature_dim: usize = d
        .parse()
        .map_err(|_| perr(no, format!("bad feature dimension `{d}`")))?;
    let (no, meta) = header("meta")?;
    let meta: Value = serde_json::from_str(&meta).map_err(|e| perr(no, e.to_string()))?;

    // Shapes come from the `ModelSpec`; the file must supply every tensor exactly once.
    let mut params = ModelParams::<T>::init(&spec, feature_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut seen = vec![false; params.iter().count()];
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        if fields.next() != Some("tensor") {
            return Err(perr(no, "expected a `tensor` line".into()));
        }
        let name = fields
            .next()
            .ok_or_else(|| perr(no, "missing tensor name".into()))?;
        let dims = fields
            .next()
            .ok_or_else(|| perr(no, "missing tensor shape".into()))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| perr(no, format!("bad dimension `{s}`")))
            })
            .collect::<Result<_>>()?;
        let values: Vec<T> = fields
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| perr(no, format!("bad value `{s}`")))
            })
            .collect::<Result<_>>()?;
        let (idx, slot) = params
            .iter_mut()
            .enumerate()
            .find(|(_, p)| p.name == name)
            .ok_or_else(|| perr(no, format!("tensor `{name}` does not belong to this model")))?;
        if seen[idx] {
            return Err(perr(no, format!("tensor `{name}` appears twice")));
        }
        if slot.shape() != dims.as_slice() {
            return Err(Error::shape(
                name,
                format!(
                    "checkpoint tensor is {dims:?}, model expects {:?}",
                    slot.shape()
                ),
            ));
        }
        slot.value = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|_| perr(no, format!("value count does not match shape {dims:?}")))?;
        seen[idx] = true;
    }
    if let Some(missing) = params.iter().zip(&seen).find(|(_, &s)| !s) {
        return Err(perr(0, format!("tensor `{}` is missing", missing.0.name)));
    }
    params.validate(&spec, feature_dim)?;
    Ok(Checkpoint {
        spec,
        feature_dim,
        meta,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormalizationForm;
    use crate::model::Variant;
    use crate::ops::ConvSpec;

    fn spec() -> ModelSpec {
        ModelSpec {
            variant: Variant::NfcGcn,
            conv: Some(ConvSpec::conv1d(3, 2, 2)),
            gcn_dims: vec![4, 3],
            num_classes: 3,
            dropout: 0.5,
            bandwidth: 3,
            aggregation: NormalizationForm::RowMeanSelfLoop,
            classifier_affine: true,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params =
            ModelParams::<f64>::init(&spec(), 9, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ckpt = Checkpoint {
            spec: spec(),
            feature_dim: 9,
            meta: serde_json::json!({"sampling_seed": 7}),
            params,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params =
            ModelParams::<f64>::init(&spec(), 9, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ckpt = Checkpoint {
            spec: spec(),
            feature_dim: 9,
            meta: Value::Null,
            params,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("gcn.1.weight\t4,3", "gcn.1.weight\t3,4");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("gcn.1.weight"), "{err}");
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, "nfcgcn-checkpoint\t1\n").unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Parse { .. })
        ));
    }
}
