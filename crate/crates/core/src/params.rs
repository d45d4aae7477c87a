//! Named learnable parameters, their layout, initialization and the
//! `DCVW` checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{Conv2dSpec, Conv3dSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCVW";
const VERSION: u32 = 1;

/// What a parameter is, which fixes its initialization and whether weight
/// decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weights, Kaiming-scaled by `fan_in`.
    Weight {
        fan_in: usize,
    },
    Bias,
    NormGain,
    NormShift,
}

impl ParamKind {
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Weight { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Ordered list of every parameter the model expects.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    slots: Vec<ParamSlot>,
}

impl Layout {
    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.slots.push(ParamSlot { name, shape, kind });
    }

    pub(crate) fn conv2d(&mut self, name: &str, spec: &Conv2dSpec) {
        let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
        self.push(
            format!("{name}.w"),
            spec.weight_shape(),
            ParamKind::Weight { fan_in },
        );
        self.push(
            format!("{name}.b"),
            vec![spec.out_channels],
            ParamKind::Bias,
        );
    }

    pub(crate) fn conv3d(&mut self, name: &str, spec: &Conv3dSpec) {
        let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
        self.push(
            format!("{name}.w"),
            spec.weight_shape(),
            ParamKind::Weight { fan_in },
        );
        self.push(
            format!("{name}.b"),
            vec![spec.out_channels],
            ParamKind::Bias,
        );
    }

    /// Transposed conv sharing `spec`'s weight layout; its outputs have
    /// `spec.in_channels` channels, each fed by roughly
    /// `out_channels * k^3 / stride^3` inputs.
    pub(crate) fn conv_transpose3d(&mut self, name: &str, spec: &Conv3dSpec) {
        let taps: usize = spec.kernel.iter().product();
        let stride: usize = spec.stride.iter().product();
        let fan_in = (spec.out_channels * taps / stride).max(1);
        self.push(
            format!("{name}.w"),
            spec.weight_shape(),
            ParamKind::Weight { fan_in },
        );
        self.push(format!("{name}.b"), vec![spec.in_channels], ParamKind::Bias);
    }

    pub(crate) fn norm(&mut self, name: &str, channels: usize) {
        self.push(format!("{name}.gain"), vec![channels], ParamKind::NormGain);
        self.push(
            format!("{name}.shift"),
            vec![channels],
            ParamKind::NormShift,
        );
    }
}

/// Every learnable tensor of the model, addressed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelParams {
    /// Kaiming fan-in normal weights, zero biases, unit gains, zero shifts.
    pub fn init(seed: u64) -> Self {
        Self::init_layout(&crate::decoder::model_layout(), seed)
    }

    pub fn init_layout(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .slots()
            .iter()
            .map(|s| {
                let t = match s.kind {
                    ParamKind::Weight { fan_in } => {
                        Tensor::normal(&s.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                    }
                    ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&s.shape),
                    ParamKind::NormGain => Tensor::full(&s.shape, 1.0),
                };
                (s.name.clone(), Arc::new(t))
            })
            .collect();
        Self { tensors }
    }

    /// Wraps an explicit map, checking it against `layout`.
    pub fn from_map(layout: &Layout, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let p = Self {
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        };
        p.validate(layout)?;
        Ok(p)
    }

    /// Every expected name must exist with the expected shape, and nothing
    /// else may be present.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        for s in layout.slots() {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| layout.get(k).is_none()) {
            return Err(Error::invalid(
                "ModelParams",
                format!("unexpected parameter {extra:?}"),
            ));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replaces one tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != value.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: old.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        self.tensors.insert(name.to_string(), Arc::new(value));
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.scalar_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and validates it against `layout`.
    pub fn from_bytes(bytes: &[u8], layout: &Layout, path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, expected DCVW"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format(path, "shape overflow"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(path, format!("duplicate parameter {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last parameter"));
        }
        Self::from_map(layout, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint of the full model.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &crate::decoder::model_layout(), path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
