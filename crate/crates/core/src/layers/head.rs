use super::dense::{Dense, Unit, UnitCache};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// `unit(x) + shortcut(x)`; the shortcut is the identity when widths agree
/// and a learned affine projection otherwise.
#[derive(Clone, Debug)]
pub struct Residual {
    pub unit: Unit,
    pub shortcut: Option<Dense>,
}

#[derive(Clone, Debug)]
pub struct ResidualCache {
    x: Matrix,
    unit: UnitCache,
}

impl ResidualCache {
    pub fn margin(&self) -> f64 {
        self.unit.margin()
    }
}

impl Residual {
    pub fn output(&self) -> usize {
        self.unit.output()
    }

    pub fn forward(&self, p: &[Matrix], x: &Matrix) -> Result<(Matrix, ResidualCache)> {
        let (mut y, unit) = self.unit.forward(p, x)?;
        match &self.shortcut {
            Some(proj) => y.add_assign(&proj.forward(p, x)?)?,
            None => y.add_assign(x).map_err(|_| {
                Error::shape(format!(
                    "identity shortcut needs width {}, input has {}",
                    y.cols(),
                    x.cols()
                ))
            })?,
        }
        Ok((y, ResidualCache { x: x.clone(), unit }))
    }

    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], cache: &ResidualCache, dy: &Matrix) -> Matrix {
        let mut dx = self.unit.backward(p, g, &cache.unit, dy);
        match &self.shortcut {
            Some(proj) => {
                let d = proj.backward(p, g, &cache.x, dy);
                dx.add_assign(&d).expect("shortcut grad shape");
            }
            None => dx.add_assign(dy).expect("identity grad shape"),
        }
        dx
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. Labels are zero-based class indices.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for {batch} logit rows",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    let mut dlogits = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Domain(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &v) in dlogits.row_mut(i).iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        loss += z.ln() - (row[label] - max);
        let drow = dlogits.row_mut(i);
        for d in drow.iter_mut() {
            *d /= z * batch as f64;
        }
        drow[label] -= 1.0 / batch as f64;
    }
    Ok((loss / batch as f64, dlogits))
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Logistic function with the argument clamped so `exp` cannot overflow.
pub fn sigmoid(a: f64) -> f64 {
    let a = a.clamp(-500.0, 500.0);
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 - s)
}
