//! Named parameter storage.
//!
//! Every learnable tensor is a [`Var`] registered under a dotted name such as
//! `backbone.stages.0.blocks.0.attn.qkv.weight`. Initialization draws from a
//! seeded ChaCha stream so that two models built from the same seed are
//! bitwise identical.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct BuilderState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Hands out parameters under a name prefix while a model is being built.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut st = self.state.borrow_mut();
        if st.vars.contains_key(&full) {
            return Err(Error::config(format!("parameter {full} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut st.rng);
                    std * z
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        st.vars.insert(full, var);
        Ok(out)
    }

    /// Consumes the builder's registry. Call once, after the model is built.
    pub fn finish(self) -> ParamStore {
        let st = self.state.borrow();
        ParamStore {
            vars: st.vars.clone(),
        }
    }
}

/// Which of the three parameter partitions a name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    /// Shared image encoder.
    Backbone,
    /// Caption decoder.
    Decoder,
    /// FPN, RPN and RoI head.
    Detection,
}

impl Partition {
    pub fn of(name: &str) -> Option<Partition> {
        let head = name.split('.').next().unwrap_or("");
        match head {
            "backbone" => Some(Partition::Backbone),
            "decoder" => Some(Partition::Decoder),
            "fpn" | "rpn" | "roi" => Some(Partition::Detection),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Partition::Backbone => "theta",
            Partition::Decoder => "phi",
            Partition::Detection => "psi",
        }
    }

    pub const ALL: [Partition; 3] = [
        Partition::Backbone,
        Partition::Decoder,
        Partition::Detection,
    ];
}

/// All learnable tensors of a model, keyed by dotted name (sorted).
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn in_partition(&self, part: Partition) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(move |(name, _)| Partition::of(name) == Some(part))
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened f64 copy of one partition, in name order.
    pub fn snapshot(&self, part: Partition) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (_, v) in self.in_partition(part) {
            out.extend(
                v.as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }

    /// Overwrites the value of `name` (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: model {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }
}
