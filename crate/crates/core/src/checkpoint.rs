//! Named-tensor archives with string metadata, stored as safetensors files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use tch::{nn, Kind, Tensor};

use crate::error::{Error, Result};

/// Value of the `format` metadata key written by this crate.
pub const FORMAT_TAG: &str = "imprint-ckpt/1";

#[derive(Debug, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.detach().contiguous().view([-1]);
    Ok(match t.kind() {
        Kind::Double => (
            Dtype::F64,
            Vec::<f64>::try_from(&flat)?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        Kind::Int64 => (
            Dtype::I64,
            Vec::<i64>::try_from(&flat)?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        _ => (
            Dtype::F32,
            Vec::<f32>::try_from(&flat.to_kind(Kind::Float))?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape: Vec<i64> = view.shape().iter().map(|&d| d as i64).collect();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        Dtype::I64 => {
            let v: Vec<i64> = data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t.view(shape.as_slice()))
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        let mut a = Self::default();
        a.metadata.insert("format".into(), FORMAT_TAG.into());
        a.metadata.insert("kind".into(), kind.into());
        a
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found {other:?}"
            ))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    /// Adds every variable of `vs` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, vs: &nn::VarStore) {
        for (name, t) in vs.variables() {
            self.tensors.insert(format!("{prefix}{name}"), t.detach().copy());
        }
    }

    pub fn add(&mut self, entries: impl IntoIterator<Item = (String, Tensor)>) {
        for (k, t) in entries {
            self.tensors.insert(k, t.detach().copy());
        }
    }

    /// Copies tensors stored under `prefix` into the variables of `vs`.
    pub fn load_store(&self, prefix: &str, vs: &nn::VarStore) -> Result<()> {
        tch::no_grad(|| {
            for (name, mut var) in vs.variables() {
                let key = format!("{prefix}{name}");
                let src = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if src.size() != var.size() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {key}: file {:?}, model {:?}",
                        src.size(),
                        var.size()
                    )));
                }
                var.copy_(&src.to_kind(var.kind()));
            }
            Ok(())
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut buffers = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let (dtype, bytes) = to_bytes(t)?;
            let shape: Vec<usize> = t.size().iter().map(|&d| d as usize).collect();
            buffers.push((name.clone(), dtype, shape, bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, d, s, b)| {
                TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        // Write to a sibling file first so a crash never leaves a torn archive.
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(views, &Some(meta), &tmp).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(Error::Checkpoint(format!(
                "{} is not an {FORMAT_TAG} archive",
                path.display()
            )));
        }
        let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, from_view(&view)?);
        }
        Ok(Self { metadata, tensors })
    }
}
