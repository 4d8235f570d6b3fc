//! Named parameters, SGD with momentum and weight decay, and the binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "ZIPC" | version: u32 | count: u32
//! count × { name_len: u32 | name: UTF-8 | shape: 4 × u32 | data: f32 × Π shape }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZIPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub momentum_buffer: Vec<T>,
    /// Buffers such as batch-norm running statistics are stored and
    /// checkpointed alongside weights but never stepped by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            momentum_buffer: vec![T::zero(); tensor.len()],
            tensor,
            trainable,
        });
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor, false)
    }

    /// Kernel of shape (c_out, c_in, k, k) with std = sqrt(2 / fan_in).
    pub fn add_kernel<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut R,
    ) -> ParamId {
        let fan_in = (c_in * k * k) as f64;
        let t = Tensor::randn([c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    momentum_buffer: p.momentum_buffer.iter().map(|v| U::of(v.f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Fills every parameter slot from a checkpoint, matching by name.
    pub fn load_from(&mut self, records: &[(String, Shape, Vec<f32>)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, data) in records {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {shape:?}, model {:?}",
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(*shape, data.iter().map(|&v| T::of(v as f64)).collect())?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` missing from checkpoint",
                self.params[i].name
            )));
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            for d in p.tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.tensor.data() {
                out.write_all(&(v.f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let records = read_checkpoint(&mut bytes.as_slice())?;
        self.load_from(&records)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a checkpoint into (name, shape, data) records.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Shape, Vec<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = read_u32(r)? as usize;
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, shape, data));
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// One momentum-SGD update over every trainable parameter:
/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`, then grads
/// are cleared. Fails, without touching any parameter, if a trainable
/// parameter has no gradient.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, cfg: &SgdConfig) -> Result<()> {
    if let Some(p) = store
        .params
        .iter()
        .find(|p| p.trainable && p.tensor.grad.is_none())
    {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let (lr, mom, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for p in store.params.iter_mut().filter(|p| p.trainable) {
        let grad = p.tensor.grad.take().expect("checked above");
        let data = p.tensor.data_mut();
        for ((v, g), w) in p.momentum_buffer.iter_mut().zip(&grad).zip(data.iter_mut()) {
            *v = mom * *v + *g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}
