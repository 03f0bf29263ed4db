//! Point sets that pooling cannot tell apart.
//!
//! Two sets with the same convex hull and the same coordinate sums have
//! identical sums, averages and maxima, and any linear map of their
//! elements also has identical maxima (a linear function peaks at a hull
//! vertex). A nonlinear per-element embedding can still separate them.

use crate::error::{Error, Result};
use crate::layers::sigmoid;
use crate::numkit::{Matrix, Rng};

/// Offsets of the sigmoid boundaries used by [`sigmoid_embedding`].
pub const AMBIGUITY_EPS: (f64, f64) = (0.1, 0.1);

/// A fixed 4-point pair with equal coordinate sums `(-8, -8)` and equal
/// coordinate maxima `(0, 0)`.
pub fn canonical_pair() -> (Matrix, Matrix) {
    let a = Matrix::from_rows(&[[0.0, 0.0], [-4.0, 0.0], [0.0, -4.0], [-4.0, -4.0]]).expect("4x2");
    let b = Matrix::from_rows(&[[0.0, -4.0], [-4.0, 0.0], [-2.0, -2.0], [-2.0, -2.0]]).expect("4x2");
    (a, b)
}

/// Per-point embedding `(σ(x + ε₁), σ(y + ε₂))`.
pub fn sigmoid_embedding(points: &Matrix, eps: (f64, f64)) -> Result<Matrix> {
    if points.cols() != 2 {
        return Err(Error::shape(format!(
            "sigmoid embedding takes planar points, got {} columns",
            points.cols()
        )));
    }
    let rows: Vec<[f64; 2]> = points
        .iter_rows()
        .map(|p| [sigmoid(p[0] + eps.0), sigmoid(p[1] + eps.1)])
        .collect();
    Matrix::from_rows(&rows)
}

fn cross(o: [i64; 2], a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn strictly_inside(poly: &[[i64; 2]], p: [i64; 2]) -> bool {
    (0..poly.len()).all(|i| cross(poly[i], poly[(i + 1) % poly.len()], p) > 0)
}

fn to_matrix(points: &[[i64; 2]]) -> Matrix {
    let rows: Vec<[f64; 2]> = points.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
    Matrix::from_rows(&rows).expect("n x 2")
}

fn small_vector(rng: &mut Rng, bound: i64) -> [i64; 2] {
    loop {
        let v = [
            rng.below(2 * bound as usize + 1) as i64 - bound,
            rng.below(2 * bound as usize + 1) as i64 - bound,
        ];
        if v != [0, 0] {
            return v;
        }
    }
}

/// Two distinct `n`-point planar sets sharing their convex hull and their
/// coordinate sums, with integer coordinates so every equality is exact.
///
/// For `n >= 5` the sets share `n - 2` strictly convex hull vertices and
/// differ in an interior pair `c ± u` versus `c ± v`. For `n = 4` the hull is
/// a segment. Three points cannot work: a shared hull then fixes every point.
pub fn gen_ambiguous_pair(rng: &mut Rng, n: usize) -> Result<(Matrix, Matrix)> {
    if n < 4 {
        return Err(Error::Domain(format!(
            "ambiguous pairs need at least 4 points, asked for {n}"
        )));
    }
    if n == 4 {
        let e = small_vector(rng, 5);
        let c = [rng.below(201) as i64 - 100, rng.below(201) as i64 - 100];
        let at = |t: i64| [c[0] + t * e[0], c[1] + t * e[1]];
        let s = rng.range_inclusive(1, 3) as i64;
        let t = loop {
            let t = rng.range_inclusive(1, 3) as i64;
            if t != s {
                break t;
            }
        };
        let a = [at(-4), at(4), at(-s), at(s)];
        let b = [at(-4), at(4), at(-t), at(t)];
        return Ok((to_matrix(&a), to_matrix(&b)));
    }
    const RADIUS: f64 = 1000.0;
    let k = n - 2;
    loop {
        let offset = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let hull: Vec<[i64; 2]> = (0..k)
            .map(|i| {
                let a = offset + 2.0 * std::f64::consts::PI * (i as f64 + 0.6 * rng.uniform()) / k as f64;
                [(RADIUS * a.cos()).round() as i64, (RADIUS * a.sin()).round() as i64]
            })
            .collect();
        let convex = (0..k).all(|i| cross(hull[i], hull[(i + 1) % k], hull[(i + 2) % k]) > 0);
        if !convex {
            continue;
        }
        let c = [
            (hull.iter().map(|p| p[0]).sum::<i64>() as f64 / k as f64).round() as i64,
            (hull.iter().map(|p| p[1]).sum::<i64>() as f64 / k as f64).round() as i64,
        ];
        let bound = (RADIUS / 8.0) as i64;
        let u = small_vector(rng, bound);
        let v = small_vector(rng, bound);
        if u == v || u == [-v[0], -v[1]] {
            continue;
        }
        let interior = |w: [i64; 2]| [[c[0] + w[0], c[1] + w[1]], [c[0] - w[0], c[1] - w[1]]];
        let (ia, ib) = (interior(u), interior(v));
        if !ia.iter().chain(&ib).all(|&p| strictly_inside(&hull, p)) {
            continue;
        }
        let mut a = hull.clone();
        a.extend(ia);
        let mut b = hull;
        b.extend(ib);
        return Ok((to_matrix(&a), to_matrix(&b)));
    }
}

/// Indices of the convex hull vertices of planar points (monotone chain,
/// collinear points dropped).
pub fn convex_hull_2d(points: &Matrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.rows()).collect();
    idx.sort_by(|&i, &j| {
        points
            .row(i)
            .partial_cmp(points.row(j))
            .expect("finite coordinates")
    });
    idx.dedup_by(|a, b| points.row(*a) == points.row(*b));
    if idx.len() < 3 {
        return idx;
    }
    let cr = |o: usize, a: usize, b: usize| {
        let (o, a, b) = (points.row(o), points.row(a), points.row(b));
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cr(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}
