use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights take the L2 penalty; biases do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Named parameter matrices with a gradient slot of identical shape per entry.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name);
        self.kinds.push(kind);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect();
        let w = Matrix::from_vec(rows, cols, data).expect("weight shape");
        self.add(name, w, ParamKind::Weight)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.add(name, Matrix::zeros(1, width), ParamKind::Bias)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name} is {}x{}, got {}x{}",
                slot.rows(),
                slot.cols(),
                value.rows(),
                value.cols()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn grads(&self) -> &[Matrix] {
        &self.grads
    }

    /// Parameter values alongside mutable gradient slots, for backward passes.
    pub fn split_mut(&mut self) -> (&[Matrix], &mut [Matrix]) {
        (&self.values, &mut self.grads)
    }

    /// Parameter values and gradients, both mutable, for optimizer steps.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Matrix], &[Matrix]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Sum of squared entries over weight matrices.
    pub fn weight_sq_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == ParamKind::Weight)
            .map(|(v, _)| v.sum_squares())
            .sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut at = 0;
        for v in &mut self.values {
            let n = v.as_slice().len();
            v.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Matrix> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Matrix]) {
        assert_eq!(snapshot.len(), self.values.len());
        self.values.clone_from_slice(snapshot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_mirror_values() {
        let mut rng = Rng::new(0);
        let mut s = ParamStore::new();
        let w = s.add_weight("w", 3, 4, &mut rng);
        let b = s.add_bias("b", 4);
        assert_eq!(s.grad(w).shape(), (3, 4));
        assert_eq!(s.grad(b).shape(), (1, 4));
        assert_eq!(s.scalar_count(), 16);
        assert_eq!(s.kind(b), ParamKind::Bias);
        let flat = s.flat_values();
        s.load_flat(&[0.5; 16]).unwrap();
        assert_eq!(s.value(b).as_slice(), &[0.5; 4]);
        s.load_flat(&flat).unwrap();
        assert_eq!(s.flat_values(), flat);
        assert!(s.set("w", Matrix::zeros(2, 2)).is_err());
        assert!(s.set("nope", Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::new();
        let w = s.add_weight("w", 10, 20, &mut rng);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(s.value(w).as_slice().iter().all(|v| v.abs() <= limit));
        assert_eq!(s.weight_sq_norm(), s.value(w).sum_squares());
    }
}
