use crate::numkit::{Matrix, Rng};

/// Inverted-dropout multipliers: each entry is `0` or `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    scale: Matrix,
}

impl DropoutMask {
    /// Independent mask for every entry of a `rows × cols` activation.
    pub fn independent(rng: &mut Rng, rows: usize, cols: usize, rate: f64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let data = (0..rows * cols)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        DropoutMask {
            scale: Matrix::from_vec(rows, cols, data).expect("mask shape"),
        }
    }

    /// One draw per (set, feature), shared by every element of the set.
    pub fn per_set(rng: &mut Rng, offsets: &[usize], cols: usize, rate: f64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let rows = *offsets.last().unwrap_or(&0);
        let mut scale = Matrix::zeros(rows, cols);
        for w in offsets.windows(2) {
            let draw: Vec<f64> = (0..cols)
                .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                .collect();
            for r in w[0]..w[1] {
                scale.row_mut(r).copy_from_slice(&draw);
            }
        }
        DropoutMask { scale }
    }

    pub fn scale(&self) -> &Matrix {
        &self.scale
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.hadamard(&self.scale).expect("dropout mask shape")
    }
}
