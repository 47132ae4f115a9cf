//! Named parameter store with gradients, optimizer state, and a binary
//! checkpoint format (JSON manifest + little-endian f32 payload).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone)]
pub struct Param<R: Real> {
    pub value: Arc<Array2<R>>,
    pub grad: Array2<R>,
    /// Adam first/second moment estimates, allocated on first Adam step.
    pub adam_m: Option<Array2<R>>,
    pub adam_v: Option<Array2<R>>,
    /// SGD momentum buffer, allocated on first SGD step.
    pub momentum: Option<Array2<R>>,
}

impl<R: Real> Param<R> {
    fn new(value: Array2<R>) -> Self {
        let grad = Array2::zeros(value.dim());
        Param {
            value: Arc::new(value),
            grad,
            adam_m: None,
            adam_v: None,
            momentum: None,
        }
    }
}

/// Parameters bound onto a tape during one forward pass, so that gradients
/// can be harvested back into the store after `backward`.
#[derive(Default)]
pub struct Bindings {
    tracked: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.tracked.iter()
    }
}

#[derive(Clone, Default)]
pub struct ParamStore<R: Real> {
    map: BTreeMap<String, Param<R>>,
    /// Global Adam step counter (bias correction).
    pub adam_t: u64,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<R>) {
        assert!(
            !self.map.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.map.insert(name.to_string(), Param::new(value));
    }

    /// Dense layer parameters: `{prefix}.w` with uniform fan-in init
    /// (+/- 1/sqrt(fan_in)) and `{prefix}.b` zeros.
    pub fn insert_dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(&format!("{prefix}.w"), uniform_init(fan_in, fan_out, bound, rng));
        self.insert(&format!("{prefix}.b"), Array2::zeros((1, fan_out)));
    }

    pub fn insert_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) {
        self.insert(name, uniform_init(rows, cols, bound, rng));
    }

    pub fn get(&self, name: &str) -> &Param<R> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<R> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<R>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    /// Put a parameter's current value on a tape and remember the binding.
    pub fn bind(&self, tape: &mut Tape<R>, name: &str, bindings: &mut Bindings) -> Var {
        let v = tape.leaf(Arc::clone(&self.get(name).value));
        bindings.tracked.push((name.to_string(), v));
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.fill(R::zero());
        }
    }

    /// Accumulate `scale * grad` for every bound parameter.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Grads<R>, scale: R) {
        for (name, var) in &bindings.tracked {
            if let Some(g) = grads.get(*var) {
                let p = self.get_mut(name);
                p.grad.zip_mut_with(g, |a, &b| *a = *a + b * scale);
            }
        }
    }

    /// Overwrite a parameter value (e.g. test constructions).
    pub fn set_value(&mut self, name: &str, value: Array2<R>) {
        let p = self.get_mut(name);
        assert_eq!(p.value.dim(), value.dim(), "set_value shape for {name}");
        p.value = Arc::new(value);
    }
}

fn uniform_init<R: Real>(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<R> {
    // draw at f64 so init is bit-identical across element types
    Array2::from_shape_fn((rows, cols), |_| R::of(rng.gen_range(-bound..bound)))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    role: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    adam_t: u64,
    tensors: Vec<ManifestEntry>,
}

impl<R: Real> ParamStore<R> {
    /// Write the store (values + optimizer state) as a checkpoint archive:
    /// `[u64 manifest_len][manifest JSON][payload f32 LE]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let push = |name: &str, role: &str, arr: &Array2<R>, payload: &mut Vec<f32>, entries: &mut Vec<ManifestEntry>| {
            entries.push(ManifestEntry {
                name: name.to_string(),
                role: role.to_string(),
                shape: [arr.nrows(), arr.ncols()],
                offset: payload.len(),
            });
            payload.extend(arr.iter().map(|v| v.as_f64() as f32));
        };
        for (name, p) in &self.map {
            push(name, "param", &p.value, &mut payload, &mut entries);
            if let Some(m) = &p.adam_m {
                push(name, "adam_m", m, &mut payload, &mut entries);
            }
            if let Some(v) = &p.adam_v {
                push(name, "adam_v", v, &mut payload, &mut entries);
            }
            if let Some(m) = &p.momentum {
                push(name, "sgd_momentum", m, &mut payload, &mut entries);
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            adam_t: self.adam_t,
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        for v in payload {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore<R>> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len8 = [0u8; 8];
        file.read_exact(&mut len8)?;
        let mlen = u64::from_le_bytes(len8) as usize;
        let mut mbytes = vec![0u8; mlen];
        file.read_exact(&mut mbytes)?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload not a multiple of 4 bytes".into()));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut store = ParamStore::new();
        store.adam_t = manifest.adam_t;
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            if e.offset + n > floats.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} overruns payload",
                    e.name
                )));
            }
            let data: Vec<R> = floats[e.offset..e.offset + n]
                .iter()
                .map(|&v| R::of(f64::from(v)))
                .collect();
            let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), data)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            match e.role.as_str() {
                "param" => store.insert(&e.name, arr),
                "adam_m" => store.get_mut(&e.name).adam_m = Some(arr),
                "adam_v" => store.get_mut(&e.name).adam_v = Some(arr),
                "sgd_momentum" => store.get_mut(&e.name).momentum = Some(arr),
                other => {
                    return Err(Error::Checkpoint(format!("unknown tensor role {other}")));
                }
            }
        }
        Ok(store)
    }
}
