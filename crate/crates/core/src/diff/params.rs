//! Flat named parameter storage with matching gradient buffers and a binary
//! checkpoint format.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::io::{decode_f32, read_container, write_container};
use crate::scalar::Scalar;

pub const CKPT_MAGIC: &[u8; 4] = b"NNCK";
pub const CKPT_VERSION: u32 = 1;

/// Handle to one array in a [`ParamStore`]. Every array is stored as a
/// row-major matrix; vectors have one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub index: usize,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// `I` on the leading square block.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    refs: Vec<ParamRef>,
    values: Vec<T>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            refs: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a `rows x cols` array. Panics on a duplicate name: names are
    /// generated by model constructors, so a clash is a programming error.
    pub fn add<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> ParamRef {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let r = ParamRef {
            index: self.entries.len(),
            offset: self.values.len(),
            rows,
            cols,
        };
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        for i in 0..rows {
            for j in 0..cols {
                let v = match init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Const(c) => c,
                    Init::Glorot => rng.gen_range(-limit..limit),
                    Init::Identity => {
                        if i == j {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                self.values.push(T::of(v));
            }
        }
        let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            trainable,
        });
        self.refs.push(r);
        self.by_name.insert(name.to_string(), r.index);
        r
    }

    pub fn get(&self, name: &str) -> Option<ParamRef> {
        self.by_name.get(name).map(|&i| self.refs[i])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn refs(&self) -> &[ParamRef] {
        &self.refs
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.index].name
    }

    pub fn is_trainable(&self, r: ParamRef) -> bool {
        self.entries[r.index].trainable
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-scalar trainability, aligned with [`values`](Self::values).
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.values.len()];
        for (e, r) in self.entries.iter().zip(&self.refs) {
            if e.trainable {
                m[r.range()].fill(true);
            }
        }
        m
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .zip(&self.refs)
            .filter(|(e, _)| e.trainable)
            .map(|(_, r)| r.len())
            .sum()
    }

    /// `Σ|θ|` over trainable arrays.
    pub fn l1_norm(&self) -> f64 {
        self.entries
            .iter()
            .zip(&self.refs)
            .filter(|(e, _)| e.trainable)
            .map(|(_, r)| {
                self.values[r.range()]
                    .iter()
                    .map(|v| v.f64().abs())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Fraction of trainable scalars with `|θ| < threshold`.
    pub fn sparsity(&self, threshold: f64) -> f64 {
        let mask = self.trainable_mask();
        let (n, z) = self
            .values
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0usize, 0usize), |(n, z), (v, _)| {
                (n + 1, z + usize::from(v.f64().abs() < threshold))
            });
        if n == 0 {
            0.0
        } else {
            z as f64 / n as f64
        }
    }

    pub fn mat(&self, r: ParamRef) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((r.rows, r.cols), &self.values[r.range()]).unwrap()
    }

    pub fn mat_mut(&mut self, r: ParamRef) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((r.rows, r.cols), &mut self.values[r.range()]).unwrap()
    }

    pub fn vec(&self, r: ParamRef) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.values[r.range()])
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            refs: self.refs.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values from `other`, which must have an identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries != other.entries {
            return Err(NnnError::Shape("parameter layouts differ".into()));
        }
        self.values.copy_from_slice(&other.values);
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.entries)?;
        let payload = self.values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN));
        write_container(w, CKPT_MAGIC, CKPT_VERSION, &header, payload)
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_container(bytes, CKPT_MAGIC, CKPT_VERSION)?;
        let entries: Vec<ParamEntry> = serde_json::from_slice(header)
            .map_err(|e| NnnError::Format(format!("checkpoint header: {e}")))?;
        let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let values = decode_f32(payload, total)?;
        let mut store = Self::new();
        let mut offset = 0;
        for e in entries {
            let (rows, cols) = match e.shape.as_slice() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                other => {
                    return Err(NnnError::Format(format!(
                        "parameter `{}` has unsupported rank {}",
                        e.name,
                        other.len()
                    )))
                }
            };
            let r = ParamRef {
                index: store.entries.len(),
                offset,
                rows,
                cols,
            };
            offset += r.len();
            store.by_name.insert(e.name.clone(), r.index);
            store.entries.push(e);
            store.refs.push(r);
        }
        store.values = values.into_iter().map(|v| T::of(v as f64)).collect();
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&std::fs::read(path)?)
    }
}

/// Gradient buffer laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    values: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: vec![T::zero(); store.len()],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn mat(&self, r: ParamRef) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((r.rows, r.cols), &self.values[r.range()]).unwrap()
    }

    pub fn mat_mut(&mut self, r: ParamRef) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((r.rows, r.cols), &mut self.values[r.range()]).unwrap()
    }

    pub fn vec_mut(&mut self, r: ParamRef) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(&mut self.values[r.range()])
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| {
                let v = v.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn fill_zero(&mut self) {
        self.values.fill(T::zero());
    }
}
