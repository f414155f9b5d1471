//! Named parameter sets and the on-disk weight container.
//!
//! Container layout: an 8-byte little-endian header length, a JSON header
//! listing every tensor (`name`, `shape`, `dtype: "f64"`) plus a free-form
//! `metadata` object, then the raw little-endian `f64` payloads in header
//! order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor onto `g`; `trainable` decides whether they
    /// collect gradients.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound(vars)
    }

    /// Gradients of the attached tensors after `g.backward`, zero where a
    /// tensor was unreachable from the loss.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    /// Replaces the tensor values, keeping names. Shapes must match.
    pub fn assign(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim("assign", &[self.tensors.len()], &[tensors.len()]));
        }
        for (dst, src) in self.tensors.iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("assign", dst.shape(), src.shape()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(metadata)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        let header = ContainerHeader {
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
            metadata,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + self.numel() * 8);
        out.write_all(&(json.len() as u64).to_le_bytes()).expect("vec write");
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<(Self, serde_json::Value)> {
        let bad = |m: &str| Error::Parse {
            path: origin.to_string(),
            message: m.to_string(),
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ContainerHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut off = 8 + hlen;
        let mut set = ParamSet::new();
        for entry in header.tensors {
            if entry.dtype != "f64" {
                return Err(bad(&format!("tensor `{}` has unsupported dtype `{}`", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad(&format!("payload of `{}` is truncated", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            set.add(entry.name, Tensor::new(entry.shape, data)?);
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after the last payload"));
        }
        Ok((set, header.metadata))
    }
}

/// Graph handles for an attached [`ParamSet`], indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles that are already on a graph, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}
