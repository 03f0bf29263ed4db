//! Minibatches of variable-size sets.
//!
//! [`SetBatch`] is the padded form (`batch × max_len × dim` plus a validity
//! mask). Layers compute on [`PackedSets`], which concatenates only the valid
//! rows and remembers where each instance starts.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    batch: usize,
    max_len: usize,
    dim: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    sizes: Vec<usize>,
}

impl SetBatch {
    /// Pads `sets` (each `nᵢ × dim`) to the largest set size in the batch.
    pub fn build(sets: &[Matrix]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Construction("a batch needs at least one set".into()))?;
        let dim = first.cols();
        if dim == 0 {
            return Err(Error::Construction("points must have at least one coordinate".into()));
        }
        for (i, s) in sets.iter().enumerate() {
            if s.rows() == 0 {
                return Err(Error::Construction(format!("set {i} is empty")));
            }
            if s.cols() != dim {
                return Err(Error::Construction(format!(
                    "set {i} has {}-dimensional points, expected {dim}",
                    s.cols()
                )));
            }
        }
        let max_len = sets.iter().map(Matrix::rows).max().unwrap_or(0);
        let batch = sets.len();
        let mut values = vec![0.0; batch * max_len * dim];
        let mut mask = vec![false; batch * max_len];
        let sizes = sets.iter().map(Matrix::rows).collect();
        for (b, s) in sets.iter().enumerate() {
            let base = b * max_len * dim;
            values[base..base + s.rows() * dim].copy_from_slice(s.as_slice());
            mask[b * max_len..b * max_len + s.rows()].fill(true);
        }
        Ok(SetBatch {
            batch,
            max_len,
            dim,
            values,
            mask,
            sizes,
        })
    }

    /// Convenience wrapper over [`SetBatch::build`] for nested point lists.
    pub fn from_point_lists(sets: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mats = sets
            .iter()
            .enumerate()
            .map(|(i, pts)| {
                if pts.is_empty() {
                    return Err(Error::Construction(format!("set {i} is empty")));
                }
                Matrix::from_rows(pts)
                    .map_err(|_| Error::Construction(format!("set {i} has ragged points")))
            })
            .collect::<Result<Vec<_>>>()?;
        SetBatch::build(&mats)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn is_valid(&self, instance: usize, element: usize) -> bool {
        self.mask[instance * self.max_len + element]
    }

    pub fn point(&self, instance: usize, element: usize) -> &[f64] {
        let start = (instance * self.max_len + element) * self.dim;
        &self.values[start..start + self.dim]
    }

    fn point_mut(&mut self, instance: usize, element: usize) -> &mut [f64] {
        let start = (instance * self.max_len + element) * self.dim;
        &mut self.values[start..start + self.dim]
    }

    /// Raw padded values, `batch × max_len × dim` row-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Valid elements of one instance as an `nᵢ × dim` matrix.
    pub fn instance(&self, i: usize) -> Matrix {
        let start = i * self.max_len * self.dim;
        let n = self.sizes[i];
        Matrix::from_vec(n, self.dim, self.values[start..start + n * self.dim].to_vec())
            .expect("instance slice matches its size")
    }

    pub fn instances(&self) -> Vec<Matrix> {
        (0..self.batch).map(|i| self.instance(i)).collect()
    }

    /// Reorders the valid elements of `instance` so that new element `j` is
    /// old element `p[j]`.
    pub fn permute_elements(&self, instance: usize, p: &Permutation) -> Result<SetBatch> {
        if instance >= self.batch {
            return Err(Error::Domain(format!(
                "instance {instance} out of range for batch of {}",
                self.batch
            )));
        }
        let n = self.sizes[instance];
        if p.len() != n {
            return Err(Error::shape(format!(
                "permutation of {} elements applied to a set of {n}",
                p.len()
            )));
        }
        let mut out = self.clone();
        for (j, &src) in p.mapping().iter().enumerate() {
            out.point_mut(instance, j)
                .copy_from_slice(self.point(instance, src));
        }
        Ok(out)
    }

    /// Subtracts each instance's mean over its valid elements.
    pub fn center(&self) -> SetBatch {
        let mut out = self.clone();
        for i in 0..self.batch {
            let n = self.sizes[i];
            let mut mean = vec![0.0; self.dim];
            for j in 0..n {
                for (m, v) in mean.iter_mut().zip(self.point(i, j)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for j in 0..n {
                for (v, m) in out.point_mut(i, j).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
        }
        out
    }

    pub fn pack(&self) -> PackedSets {
        let total: usize = self.sizes.iter().sum();
        let mut data = Vec::with_capacity(total * self.dim);
        let mut offsets = Vec::with_capacity(self.batch + 1);
        offsets.push(0);
        for i in 0..self.batch {
            let start = i * self.max_len * self.dim;
            data.extend_from_slice(&self.values[start..start + self.sizes[i] * self.dim]);
            offsets.push(offsets[i] + self.sizes[i]);
        }
        PackedSets {
            rows: Matrix::from_vec(total, self.dim, data).expect("packed length"),
            offsets,
        }
    }
}

/// Valid set elements stacked row-wise; instance `i` owns rows
/// `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSets {
    pub rows: Matrix,
    pub offsets: Vec<usize>,
}

impl PackedSets {
    pub fn new(rows: Matrix, offsets: Vec<usize>) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&rows.rows())
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Construction(format!(
                "offsets {offsets:?} do not partition {} rows into nonempty sets",
                rows.rows()
            )));
        }
        Ok(PackedSets { rows, offsets })
    }

    /// A single set as a one-instance pack.
    pub fn single(set: Matrix) -> Result<Self> {
        let n = set.rows();
        PackedSets::new(set, vec![0, n])
    }

    pub fn batch(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn segment(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Same segmentation, different row contents (e.g. a layer's output).
    pub fn with_rows(&self, rows: Matrix) -> PackedSets {
        debug_assert_eq!(rows.rows(), self.rows.rows());
        PackedSets {
            rows,
            offsets: self.offsets.clone(),
        }
    }

    pub fn to_batch(&self) -> SetBatch {
        let sets: Vec<Matrix> = (0..self.batch())
            .map(|i| {
                let r = self.segment(i);
                self.rows.slice_rows(r.start, r.end)
            })
            .collect();
        SetBatch::build(&sets).expect("packed sets are nonempty")
    }
}

/// A bijection on `0..n`; applying it puts old element `mapping[j]` at `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Construction(format!(
                    "{mapping:?} is not a permutation"
                )));
            }
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn random(rng: &mut Rng, n: usize) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut mapping);
        Permutation { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (j, &m) in self.mapping.iter().enumerate() {
            inv[m] = j;
        }
        Permutation { mapping: inv }
    }

    /// Row `j` of the result is row `mapping[j]` of `m`.
    pub fn apply_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.len() {
            return Err(Error::shape(format!(
                "permutation of {} rows applied to {}x{}",
                self.len(),
                m.rows(),
                m.cols()
            )));
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for (j, &src) in self.mapping.iter().enumerate() {
            out.row_mut(j).copy_from_slice(m.row(src));
        }
        Ok(out)
    }
}
