//! MSCK checkpoints: named rank-4 tensors, Adam moments as
//! `{name}.adam_m` / `{name}.adam_v`, and two meta tensors: `meta.step`
//! (iteration count as exact `[low 16 bits, high bits]` floats) and
//! `meta.config` (the UTF-8 config echo, one byte per float).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::stack::Model;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u32 = 1;
const STEP: &str = "meta.step";
const CONFIG: &str = "meta.config";

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Parameters and moments in file order.
    pub tensors: Vec<(String, Tensor)>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Config echo written at save time.
    pub config: String,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &Adam, config: &str) -> Self {
        let mut tensors = Vec::with_capacity(3 * model.params.len());
        for p in model.params.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for p in model.params.iter() {
            tensors.push((format!("{}.adam_m", p.name), p.first_moment.clone()));
            tensors.push((format!("{}.adam_v", p.name), p.second_moment.clone()));
        }
        Checkpoint {
            tensors,
            step: optimizer.step,
            config: config.to_string(),
        }
    }

    /// Names of the stored parameter tensors (moments and meta excluded).
    pub fn parameter_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !n.ends_with(".adam_m") && !n.ends_with(".adam_v"))
            .collect()
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies values and moments into `model` and the step count into
    /// `optimizer`. Every model tensor must be present with its exact shape,
    /// and every stored tensor must belong to the model.
    pub fn restore(&self, model: &mut Model, optimizer: &mut Adam) -> Result<()> {
        let mut expected = std::collections::HashSet::new();
        for p in model.params.iter() {
            for name in [p.name.clone(), format!("{}.adam_m", p.name), format!("{}.adam_v", p.name)] {
                expected.insert(name);
            }
        }
        if let Some((name, _)) = self.tensors.iter().find(|(n, _)| !expected.contains(n)) {
            return Err(Error::format(format!("checkpoint tensor `{name}` is unknown to this model")));
        }
        for p in model.params.iter_mut() {
            let fetch = |name: String| -> Result<Tensor> {
                let t = self
                    .get(&name)
                    .ok_or_else(|| Error::format(format!("checkpoint lacks tensor `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(format!(
                        "shape mismatch for tensor `{name}`: checkpoint {} vs model {}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                Ok(t.clone())
            };
            let value = fetch(p.name.clone())?;
            let m = fetch(format!("{}.adam_m", p.name))?;
            let v = fetch(format!("{}.adam_v", p.name))?;
            p.value = value;
            p.first_moment = m;
            p.second_moment = v;
            p.zero_grad();
        }
        optimizer.step = self.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.step >= 1 << 40 {
            return Err(Error::format("step count too large to store exactly"));
        }
        let step = Tensor::from_vec([1, 1, 1, 2], vec![(self.step & 0xFFFF) as f32, (self.step >> 16) as f32])?;
        let bytes = self.config.as_bytes();
        let config = Tensor::from_vec([1, 1, 1, bytes.len().max(1)], {
            let mut v: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
            if v.is_empty() {
                // zero-length extents are not representable; a lone NUL marks "empty"
                v.push(0.0);
            }
            v
        })?;
        let entries: Vec<(&str, &Tensor)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain([(STEP, &step), (CONFIG, &config)])
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(format!("checkpoint truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        fn u32_of(b: &[u8]) -> u32 {
            u32::from_le_bytes(b.try_into().unwrap())
        }
        if take(4)? != MAGIC {
            return Err(Error::format("checkpoint: bad magic"));
        }
        let version = u32_of(take(4)?);
        if version != VERSION {
            return Err(Error::format(format!("checkpoint: unsupported version {version}")));
        }
        let count = u32_of(take(4)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let (mut step, mut config) = (None, None);
        for _ in 0..count {
            let len = u32_of(take(4)?) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint: tensor name is not UTF-8"))?;
            let rank = u32_of(take(4)?);
            if rank != 4 {
                return Err(Error::format(format!("checkpoint: tensor `{name}` has rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u32_of(take(4)?) as usize;
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(format!("checkpoint: tensor `{name}` is too large")))?;
            let data = take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(Shape::from(dims), data)
                .map_err(|e| Error::format(format!("checkpoint: tensor `{name}`: {e}")))?;
            match name.as_str() {
                STEP => step = Some(t),
                CONFIG => config = Some(t),
                _ => tensors.push((name, t)),
            }
        }
        if pos != bytes.len() {
            return Err(Error::format(format!("checkpoint: {} trailing bytes", bytes.len() - pos)));
        }
        let step = step.ok_or_else(|| Error::format("checkpoint lacks `meta.step`"))?;
        let step = match step.data() {
            [lo, hi] => *lo as u64 | (*hi as u64) << 16,
            _ => return Err(Error::format("checkpoint: malformed `meta.step`")),
        };
        let config = config.ok_or_else(|| Error::format("checkpoint lacks `meta.config`"))?;
        let config: Vec<u8> = config.data().iter().map(|&v| v as u8).filter(|&b| b != 0).collect();
        let config = String::from_utf8(config).map_err(|_| Error::format("checkpoint: config echo is not UTF-8"))?;
        Ok(Checkpoint { tensors, step, config })
    }
}

pub fn checkpoint_save(path: &Path, model: &Model, optimizer: &Adam, config: &str) -> Result<()> {
    fs::write(path, Checkpoint::capture(model, optimizer, config).to_bytes()?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
