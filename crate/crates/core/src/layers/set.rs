//! Layers that see whole sets: pooling, the max-centered equivariant layer
//! and the pairwise-averaging layer.

use serde::{Deserialize, Serialize};

use super::dense::{stack_backward, stack_forward, Unit, UnitCache};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::params::ParamStore;
use crate::setbatch::{PackedSets, SetBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Average,
    Max,
}

impl PoolMode {
    pub const ALL: [PoolMode; 3] = [PoolMode::Sum, PoolMode::Average, PoolMode::Max];

    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Sum => "sum",
            PoolMode::Average => "average",
            PoolMode::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(PoolMode::Sum),
            "average" | "avg" | "mean" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            _ => Err(Error::Config(format!("unknown pooling mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    mode: PoolMode,
    offsets: Vec<usize>,
    /// For max pooling, the winning global row per (instance, column).
    argmax: Vec<usize>,
    margin: f64,
}

impl PoolCache {
    pub fn margin(&self) -> f64 {
        self.margin
    }
}

fn check_offsets(rows: &Matrix, offsets: &[usize]) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&rows.rows()) {
        return Err(Error::shape(format!(
            "offsets {offsets:?} do not cover {} rows",
            rows.rows()
        )));
    }
    if let Some(i) = offsets.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!("instance {i} has no valid elements")));
    }
    Ok(())
}

/// Masked reduction over each instance's rows, producing `batch × m`.
pub fn pool_forward(rows: &Matrix, offsets: &[usize], mode: PoolMode) -> Result<(Matrix, PoolCache)> {
    check_offsets(rows, offsets)?;
    let batch = offsets.len() - 1;
    let m = rows.cols();
    let mut out = Matrix::zeros(batch, m);
    let mut argmax = Vec::new();
    let mut margin = f64::INFINITY;
    if mode == PoolMode::Max {
        argmax = vec![0; batch * m];
    }
    for b in 0..batch {
        let (start, end) = (offsets[b], offsets[b + 1]);
        let acc = out.row_mut(b);
        match mode {
            PoolMode::Sum | PoolMode::Average => {
                for r in start..end {
                    for (a, v) in acc.iter_mut().zip(rows.row(r)) {
                        *a += v;
                    }
                }
                if mode == PoolMode::Average {
                    let n = (end - start) as f64;
                    acc.iter_mut().for_each(|a| *a /= n);
                }
            }
            PoolMode::Max => {
                for c in 0..m {
                    let mut best = rows[(start, c)];
                    let mut at = start;
                    let mut second = f64::NEG_INFINITY;
                    for r in start + 1..end {
                        let v = rows[(r, c)];
                        if v > best {
                            second = best;
                            best = v;
                            at = r;
                        } else if v > second {
                            second = v;
                        }
                    }
                    acc[c] = best;
                    argmax[b * m + c] = at;
                    margin = margin.min(best - second);
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            mode,
            offsets: offsets.to_vec(),
            argmax,
            margin,
        },
    ))
}

pub fn pool_backward(cache: &PoolCache, dy: &Matrix) -> Matrix {
    let offsets = &cache.offsets;
    let batch = offsets.len() - 1;
    let m = dy.cols();
    let mut dx = Matrix::zeros(offsets[batch], m);
    for b in 0..batch {
        let (start, end) = (offsets[b], offsets[b + 1]);
        match cache.mode {
            PoolMode::Sum | PoolMode::Average => {
                let scale = if cache.mode == PoolMode::Average {
                    1.0 / (end - start) as f64
                } else {
                    1.0
                };
                for r in start..end {
                    for (d, g) in dx.row_mut(r).iter_mut().zip(dy.row(b)) {
                        *d = g * scale;
                    }
                }
            }
            PoolMode::Max => {
                for c in 0..m {
                    dx[(cache.argmax[b * m + c], c)] += dy[(b, c)];
                }
            }
        }
    }
    dx
}

/// Pools the valid elements of a padded batch; padding never contributes.
pub fn pool(b: &SetBatch, mode: PoolMode) -> Result<Matrix> {
    let packed = b.pack();
    pool_forward(&packed.rows, &packed.offsets, mode).map(|(y, _)| y)
}

/// Applies the per-element stack to every valid element independently.
pub fn embed_set(store: &ParamStore, b: &SetBatch, stack: &[Unit]) -> Result<SetBatch> {
    if let Some(first) = stack.first() {
        if first.input() != b.dim() {
            return Err(Error::shape(format!(
                "embedding expects {}-dimensional elements, batch has {}",
                first.input(),
                b.dim()
            )));
        }
    }
    let packed = b.pack();
    let (y, _) = stack_forward(store.values(), stack, &packed.rows)?;
    Ok(packed.with_rows(y).to_batch())
}

/// Per-set column maxima with lowest-row tie-break; returns `batch × d` and
/// the global winning row for every entry.
fn set_maxima(x: &PackedSets) -> (Matrix, Vec<usize>, f64) {
    let d = x.rows.cols();
    let (maxima, cache) = pool_forward(&x.rows, &x.offsets, PoolMode::Max).expect("packed sets are valid");
    debug_assert_eq!(maxima.cols(), d);
    (maxima, cache.argmax, cache.margin)
}

/// Evaluates `σ(1ₙβᵀ + (x − 1ₙ x_maxᵀ)Γ)` on one unpadded set.
pub fn equivariant_forward(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    activation: impl Fn(f64) -> f64,
) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::Domain("equivariant layer on an empty set".into()));
    }
    let xmax = x.reduce(crate::numkit::Axis::Col, crate::numkit::Reduction::Max)?;
    let mut centered = x.clone();
    centered.add_row_broadcast(&xmax.scale(-1.0))?;
    let pre = super::dense::dense_forward(&centered, gamma, beta)?;
    Ok(pre.map(activation))
}

/// Permutation-equivariant layer: each element is replaced by its deviation
/// from the set's column-wise maximum, then mapped by a shared unit.
#[derive(Clone, Debug)]
pub struct Equivariant {
    pub unit: Unit,
}

#[derive(Clone, Debug)]
pub struct EquivariantCache {
    argmax: Vec<usize>,
    offsets: Vec<usize>,
    unit: UnitCache,
    max_margin: f64,
}

impl EquivariantCache {
    pub fn margin(&self) -> f64 {
        self.max_margin.min(self.unit.margin())
    }
}

impl Equivariant {
    pub fn forward(&self, p: &[Matrix], x: &PackedSets) -> Result<(Matrix, EquivariantCache)> {
        let (maxima, argmax, max_margin) = set_maxima(x);
        let mut centered = x.rows.clone();
        for b in 0..x.batch() {
            for r in x.segment(b) {
                for (v, m) in centered.row_mut(r).iter_mut().zip(maxima.row(b)) {
                    *v -= m;
                }
            }
        }
        let (y, unit) = self.unit.forward(p, &centered)?;
        Ok((
            y,
            EquivariantCache {
                argmax,
                offsets: x.offsets.clone(),
                unit,
                max_margin,
            },
        ))
    }

    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], cache: &EquivariantCache, dy: &Matrix) -> Matrix {
        let mut dx = self.unit.backward(p, g, &cache.unit, dy);
        let d = dx.cols();
        for b in 0..cache.offsets.len() - 1 {
            for c in 0..d {
                let total: f64 = (cache.offsets[b]..cache.offsets[b + 1]).map(|r| dx[(r, c)]).sum();
                dx[(cache.argmax[b * d + c], c)] -= total;
            }
        }
        dx
    }
}

/// Reference evaluation of `y_j = (1/n) Σᵢ f(xᵢ, xⱼ)` on one unpadded set.
pub fn pairwise_forward(x: &Matrix, pair_fn: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Result<Matrix> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Domain("pairwise layer on an empty set".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc: Option<Vec<f64>> = None;
        for i in 0..n {
            let v = pair_fn(x.row(i), x.row(j));
            match acc.as_mut() {
                None => acc = Some(v),
                Some(a) => {
                    if a.len() != v.len() {
                        return Err(Error::shape("pair function output width changed".to_string()));
                    }
                    a.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                }
            }
        }
        let mut a = acc.expect("n >= 1");
        a.iter_mut().for_each(|v| *v /= n as f64);
        rows.push(a);
    }
    Matrix::from_rows(&rows)
}

/// Pairwise layer: a learned stack on the concatenation `[xᵢ; xⱼ]`,
/// averaged over `i` for every output element `j`.
#[derive(Clone, Debug)]
pub struct Pairwise {
    pub pair_fn: Vec<Unit>,
}

#[derive(Clone, Debug)]
pub struct PairwiseCache {
    offsets: Vec<usize>,
    dim: usize,
    stack: Vec<UnitCache>,
}

impl PairwiseCache {
    pub fn margin(&self) -> f64 {
        self.stack.iter().map(UnitCache::margin).fold(f64::INFINITY, f64::min)
    }
}

impl Pairwise {
    pub fn forward(&self, p: &[Matrix], x: &PackedSets) -> Result<(Matrix, PairwiseCache)> {
        let d = x.rows.cols();
        if let Some(first) = self.pair_fn.first() {
            if first.input() != 2 * d {
                return Err(Error::shape(format!(
                    "pair function takes {} inputs, elements have {d} (need {})",
                    first.input(),
                    2 * d
                )));
            }
        }
        let total: usize = (0..x.batch()).map(|b| x.size(b).pow(2)).sum();
        let mut pairs = Matrix::zeros(total, 2 * d);
        let mut at = 0;
        for b in 0..x.batch() {
            let seg = x.segment(b);
            for j in seg.clone() {
                for i in seg.clone() {
                    let row = pairs.row_mut(at);
                    row[..d].copy_from_slice(x.rows.row(i));
                    row[d..].copy_from_slice(x.rows.row(j));
                    at += 1;
                }
            }
        }
        let (f, stack) = stack_forward(p, &self.pair_fn, &pairs)?;
        let m = f.cols();
        let mut y = Matrix::zeros(x.rows.rows(), m);
        let mut at = 0;
        for b in 0..x.batch() {
            let n = x.size(b);
            for j in x.segment(b) {
                let out = y.row_mut(j);
                for _ in 0..n {
                    for (o, v) in out.iter_mut().zip(f.row(at)) {
                        *o += v;
                    }
                    at += 1;
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
            }
        }
        Ok((
            y,
            PairwiseCache {
                offsets: x.offsets.clone(),
                dim: d,
                stack,
            },
        ))
    }

    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], cache: &PairwiseCache, dy: &Matrix) -> Matrix {
        let offsets = &cache.offsets;
        let d = cache.dim;
        let total: usize = offsets.windows(2).map(|w| (w[1] - w[0]).pow(2)).sum();
        let m = dy.cols();
        let mut dpair_out = Matrix::zeros(total, m);
        let mut at = 0;
        for b in 0..offsets.len() - 1 {
            let n = offsets[b + 1] - offsets[b];
            for j in offsets[b]..offsets[b + 1] {
                for _ in 0..n {
                    for (o, v) in dpair_out.row_mut(at).iter_mut().zip(dy.row(j)) {
                        *o = v / n as f64;
                    }
                    at += 1;
                }
            }
        }
        let dpairs = stack_backward(p, g, &self.pair_fn, &cache.stack, &dpair_out);
        let mut dx = Matrix::zeros(offsets[offsets.len() - 1], d);
        let mut at = 0;
        for b in 0..offsets.len() - 1 {
            for j in offsets[b]..offsets[b + 1] {
                for i in offsets[b]..offsets[b + 1] {
                    let row = dpairs.row(at);
                    for (o, v) in dx.row_mut(i).iter_mut().zip(&row[..d]) {
                        *o += v;
                    }
                    for (o, v) in dx.row_mut(j).iter_mut().zip(&row[d..]) {
                        *o += v;
                    }
                    at += 1;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::dense::{Dense, Maxout};
    use crate::numkit::Rng;
    use crate::setbatch::Permutation;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn pooling_hand_values() {
        let b = SetBatch::build(&[m(&[&[1.0, 2.0], &[3.0, 4.0]])]).unwrap();
        assert_eq!(pool(&b, PoolMode::Sum).unwrap(), m(&[&[4.0, 6.0]]));
        assert_eq!(pool(&b, PoolMode::Average).unwrap(), m(&[&[2.0, 3.0]]));
        assert_eq!(pool(&b, PoolMode::Max).unwrap(), m(&[&[3.0, 4.0]]));
    }

    #[test]
    fn max_pool_ignores_padding() {
        let b = SetBatch::build(&[m(&[&[-5.0, -5.0]]), m(&[&[1.0, 1.0], &[2.0, 2.0]])]).unwrap();
        assert_eq!(b.point(0, 1), &[0.0, 0.0]);
        let y = pool(&b, PoolMode::Max).unwrap();
        assert_eq!(y.row(0), &[-5.0, -5.0]);
    }

    #[test]
    fn empty_instance_is_domain_error() {
        let x = Matrix::zeros(2, 1);
        assert!(matches!(
            pool_forward(&x, &[0, 0, 2], PoolMode::Sum),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sum_pool_backward_skips_padding() {
        let x = m(&[&[1.0], &[2.0], &[3.0]]);
        let (_, cache) = pool_forward(&x, &[0, 1, 3], PoolMode::Sum).unwrap();
        let dx = pool_backward(&cache, &m(&[&[10.0], &[20.0]]));
        assert_eq!(dx, m(&[&[10.0], &[20.0], &[20.0]]));
    }

    #[test]
    fn equivariant_hand_value() {
        let y = equivariant_forward(&m(&[&[1.0], &[3.0]]), &m(&[&[2.0]]), &m(&[&[0.0]]), |a| a).unwrap();
        assert_eq!(y, m(&[&[-4.0], &[0.0]]));
    }

    #[test]
    fn equivariant_constant_rows() {
        let x = m(&[&[2.0, 7.0], &[2.0, 7.0], &[2.0, 7.0]]);
        let beta = m(&[&[0.25, -1.0, 3.0]]);
        let gamma = m(&[&[1.0, 2.0, 3.0], &[-4.0, 5.0, 6.0]]);
        let y = equivariant_forward(&x, &gamma, &beta, f64::tanh).unwrap();
        for r in y.iter_rows() {
            assert_eq!(r, beta.map(f64::tanh).as_slice());
        }
    }

    #[test]
    fn equivariant_layer_matches_reference() {
        let mut rng = Rng::new(4);
        let mut s = ParamStore::new();
        let d = Dense::new(&mut s, "eq", 3, 4, &mut rng);
        let layer = Equivariant { unit: Unit::Linear(d.clone()) };
        let sets = [
            Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap(),
            Matrix::from_vec(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap(),
        ];
        let packed = SetBatch::build(&sets).unwrap().pack();
        let (y, _) = layer.forward(s.values(), &packed).unwrap();
        for (b, set) in sets.iter().enumerate() {
            let want = equivariant_forward(set, s.value(d.w), s.value(d.b), |a| a).unwrap();
            let r = packed.segment(b);
            assert_eq!(y.slice_rows(r.start, r.end), want);
        }
    }

    #[test]
    fn equivariance_is_exact() {
        let mut rng = Rng::new(6);
        let mut s = ParamStore::new();
        let layer = Equivariant {
            unit: Unit::Maxout(Maxout::new(&mut s, "eq", 3, 5, 2, &mut rng)),
        };
        for _ in 0..50 {
            let n = rng.range_inclusive(1, 12);
            let x = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.normal()).collect()).unwrap();
            let p = Permutation::random(&mut rng, n);
            let (y, _) = layer.forward(s.values(), &PackedSets::single(x.clone()).unwrap()).unwrap();
            let (yp, _) = layer
                .forward(s.values(), &PackedSets::single(p.apply_rows(&x).unwrap()).unwrap())
                .unwrap();
            assert_eq!(yp, p.apply_rows(&y).unwrap());
        }
    }

    #[test]
    fn pairwise_hand_values() {
        let x = m(&[&[1.0], &[2.0], &[3.0]]);
        let y = pairwise_forward(&x, |a, b| vec![a[0] + b[0]]).unwrap();
        assert_eq!(y, m(&[&[3.0], &[4.0], &[5.0]]));
        let single = pairwise_forward(&m(&[&[1.5, -2.0]]), |a, b| vec![a[0] * b[1], a[1] - b[0]]).unwrap();
        assert_eq!(single, m(&[&[-3.0, -3.5]]));
    }

    #[test]
    fn pairwise_layer_matches_reference_and_permutes() {
        let mut rng = Rng::new(8);
        let mut s = ParamStore::new();
        let layer = Pairwise {
            pair_fn: vec![Unit::Maxout(Maxout::new(&mut s, "pw", 4, 3, 2, &mut rng))],
        };
        let sets = [
            Matrix::from_vec(5, 2, (0..10).map(|_| rng.normal()).collect()).unwrap(),
            Matrix::from_vec(1, 2, (0..2).map(|_| rng.normal()).collect()).unwrap(),
        ];
        let packed = SetBatch::build(&sets).unwrap().pack();
        let (y, _) = layer.forward(s.values(), &packed).unwrap();
        for (b, set) in sets.iter().enumerate() {
            let want = pairwise_forward(set, |a, c| {
                let cat = Matrix::row_vector(&[a, c].concat());
                let (o, _) = layer.pair_fn[0].forward(s.values(), &cat).unwrap();
                o.into_vec()
            })
            .unwrap();
            let r = packed.segment(b);
            assert!(y.slice_rows(r.start, r.end).max_abs_diff(&want).unwrap() < 1e-12);
        }
        let p = Permutation::random(&mut rng, 5);
        let (y0, _) = layer.forward(s.values(), &PackedSets::single(sets[0].clone()).unwrap()).unwrap();
        let (y1, _) = layer
            .forward(s.values(), &PackedSets::single(p.apply_rows(&sets[0]).unwrap()).unwrap())
            .unwrap();
        assert!(y1.max_abs_diff(&p.apply_rows(&y0).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn embed_set_matches_point_loop() {
        let mut rng = Rng::new(10);
        let mut s = ParamStore::new();
        let stack = vec![
            Unit::Maxout(Maxout::new(&mut s, "e0", 11, 11, 2, &mut rng)),
            Unit::Maxout(Maxout::new(&mut s, "e1", 11, 11, 2, &mut rng)),
        ];
        let sets: Vec<Matrix> = [3usize, 7, 1]
            .iter()
            .map(|&n| Matrix::from_vec(n, 11, (0..11 * n).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let b = SetBatch::build(&sets).unwrap();
        let e = embed_set(&s, &b, &stack).unwrap();
        assert_eq!(e.sizes(), b.sizes());
        assert_eq!(e.dim(), 11);
        for (i, set) in sets.iter().enumerate() {
            for (j, pt) in set.iter_rows().enumerate() {
                let (one, _) = stack_forward(s.values(), &stack, &Matrix::row_vector(pt)).unwrap();
                assert!(Matrix::row_vector(e.point(i, j)).max_abs_diff(&one).unwrap() < 1e-12);
            }
            for j in set.rows()..e.max_len() {
                assert!(e.point(i, j).iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(embed_set(&s, &b, &[]).unwrap(), b);
        let narrow = SetBatch::build(&[Matrix::zeros(2, 3)]).unwrap();
        assert!(embed_set(&s, &narrow, &stack).is_err());
    }
}
