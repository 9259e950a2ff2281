//! Minimal CPU network substrate: tensors, layers with hand-written
//! backward passes, the backbone families and the checkpoint archive.
//!
//! Parameters of one network live in a single flat [`ParamSet`]; layers hold
//! offsets into it. Gradients are a flat vector of the same length, which
//! keeps SGD, finite differences and checkpointing trivial.

mod archive;
mod backbone;
mod layers;

pub(crate) use backbone::softmax2;
pub use archive::{read_archive, write_archive, ArchiveGroup};
pub use backbone::{
    BackboneFamily, BackboneSpec, BinaryNet, BinaryNetCache, BinaryNetOutput, PretrainedSource,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `channels x height x width` array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored with its
/// dimensions swapped.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub slots: Vec<ParamSlot>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.values[s.range()])
    }

    /// Mask with `true` at every trainable coordinate.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for s in self.slots.iter().filter(|s| s.trainable) {
            mask[s.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Copies values for every slot whose name and shape match. Returns the
    /// number of slots copied.
    pub fn load_matching(&mut self, slots: &[ParamSlot], values: &[f64]) -> Result<usize> {
        let mut copied = 0;
        for src in slots {
            if let Some(dst) = self.slots.iter().find(|s| s.name == src.name) {
                if dst.shape != src.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, weights carry {:?}",
                        src.name, dst.shape, src.shape
                    )));
                }
                let r = dst.range();
                self.values[r].copy_from_slice(&values[src.range()]);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Accumulates slots while a network is being assembled.
pub(crate) struct ParamBuilder<'a, R: Rng> {
    set: ParamSet,
    prefix: Vec<String>,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        ParamBuilder {
            set: ParamSet {
                slots: Vec::new(),
                values: Vec::new(),
            },
            prefix: Vec::new(),
            rng,
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn alloc(&mut self, name: &str, shape: Vec<usize>, trainable: bool, init: Init) -> usize {
        let offset = self.set.values.len();
        let len: usize = shape.iter().product();
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix.join("."))
        };
        match init {
            Init::Const(v) => self.set.values.extend(std::iter::repeat_n(v, len)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                for _ in 0..len {
                    let v = dist.sample(&mut *self.rng);
                    self.set.values.push(v);
                }
            }
        }
        self.set.slots.push(ParamSlot {
            name: full,
            shape,
            offset,
            trainable,
        });
        offset
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Const(f64),
    Normal(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
