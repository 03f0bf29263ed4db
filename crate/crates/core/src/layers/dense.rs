use crate::error::{Error, Result};
use crate::numkit::{Axis, Matrix, Reduction, Rng};
use crate::params::{ParamId, ParamStore};

/// Row-wise affine map `x W + b`, with `W` stored `d × m` and `b` as `1 × m`.
pub fn dense_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.shape() != (1, w.cols()) {
        return Err(Error::shape(format!(
            "bias {}x{} for weights {}x{}",
            b.rows(),
            b.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Dense {
            w: store.add_weight(format!("{name}.w"), input, output, rng),
            b: store.add_bias(format!("{name}.b"), output),
            input,
            output,
        }
    }

    pub fn forward(&self, p: &[Matrix], x: &Matrix) -> Result<Matrix> {
        dense_forward(x, &p[self.w.0], &p[self.b.0])
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], x: &Matrix, dy: &Matrix) -> Matrix {
        let dw = x.t_matmul(dy).expect("dense backward shapes");
        g[self.w.0].add_assign(&dw).expect("dw shape");
        let db = dy.reduce(Axis::Col, Reduction::Sum);
        if let Ok(db) = db {
            g[self.b.0].add_assign(&db).expect("db shape");
        }
        dy.matmul_t(&p[self.w.0]).expect("dense backward shapes")
    }
}

/// Elementwise maximum over affine pieces. Ties go to the lowest piece index.
#[derive(Clone, Debug)]
pub struct Maxout {
    pub pieces: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MaxoutCache {
    x: Matrix,
    winner: Vec<u8>,
    /// Smallest gap between the winning piece and the runner-up.
    margin: f64,
}

impl Maxout {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        pieces: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!((1..=u8::MAX as usize).contains(&pieces));
        Maxout {
            pieces: (0..pieces)
                .map(|k| Dense::new(store, &format!("{name}.piece{k}"), input, output, rng))
                .collect(),
        }
    }

    pub fn output(&self) -> usize {
        self.pieces[0].output
    }

    pub fn forward(&self, p: &[Matrix], x: &Matrix) -> Result<(Matrix, MaxoutCache)> {
        let outs = self
            .pieces
            .iter()
            .map(|d| d.forward(p, x))
            .collect::<Result<Vec<_>>>()?;
        let (y, winner, margin) = select_max(&outs)?;
        Ok((
            y,
            MaxoutCache {
                x: x.clone(),
                winner,
                margin,
            },
        ))
    }

    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], cache: &MaxoutCache, dy: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
        for (k, piece) in self.pieces.iter().enumerate() {
            let mut routed = dy.clone();
            for (v, &w) in routed.as_mut_slice().iter_mut().zip(&cache.winner) {
                if w as usize != k {
                    *v = 0.0;
                }
            }
            let d = piece.backward(p, g, &cache.x, &routed);
            dx.add_assign(&d).expect("dx shape");
        }
        dx
    }
}

/// Elementwise max of equally shaped matrices with lowest-index tie-break.
pub fn maxout_forward(pieces: &[Matrix]) -> Result<Matrix> {
    select_max(pieces).map(|(y, _, _)| y)
}

fn select_max(outs: &[Matrix]) -> Result<(Matrix, Vec<u8>, f64)> {
    let first = outs
        .first()
        .ok_or_else(|| Error::Domain("maxout needs at least one piece".into()))?;
    for o in &outs[1..] {
        if o.shape() != first.shape() {
            return Err(Error::shape(format!(
                "maxout pieces {}x{} and {}x{}",
                first.rows(),
                first.cols(),
                o.rows(),
                o.cols()
            )));
        }
    }
    let mut y = first.clone();
    let mut winner = vec![0u8; y.as_slice().len()];
    let mut runner_up = vec![f64::NEG_INFINITY; winner.len()];
    for (k, o) in outs.iter().enumerate().skip(1) {
        for (i, &v) in o.as_slice().iter().enumerate() {
            let best = y.as_slice()[i];
            if v > best {
                runner_up[i] = best;
                y.as_mut_slice()[i] = v;
                winner[i] = k as u8;
            } else if v > runner_up[i] {
                runner_up[i] = v;
            }
        }
    }
    let margin = y
        .as_slice()
        .iter()
        .zip(&runner_up)
        .map(|(b, r)| b - r)
        .fold(f64::INFINITY, f64::min);
    Ok((y, winner, margin))
}

/// One per-element layer: affine without activation, or maxout.
#[derive(Clone, Debug)]
pub enum Unit {
    Linear(Dense),
    Maxout(Maxout),
}

#[derive(Clone, Debug)]
pub enum UnitCache {
    Linear(Matrix),
    Maxout(MaxoutCache),
}

impl UnitCache {
    pub fn margin(&self) -> f64 {
        match self {
            UnitCache::Linear(_) => f64::INFINITY,
            UnitCache::Maxout(c) => c.margin,
        }
    }
}

impl Unit {
    pub fn output(&self) -> usize {
        match self {
            Unit::Linear(d) => d.output,
            Unit::Maxout(m) => m.output(),
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Unit::Linear(d) => d.input,
            Unit::Maxout(m) => m.pieces[0].input,
        }
    }

    pub fn forward(&self, p: &[Matrix], x: &Matrix) -> Result<(Matrix, UnitCache)> {
        match self {
            Unit::Linear(d) => Ok((d.forward(p, x)?, UnitCache::Linear(x.clone()))),
            Unit::Maxout(m) => m.forward(p, x).map(|(y, c)| (y, UnitCache::Maxout(c))),
        }
    }

    pub fn backward(&self, p: &[Matrix], g: &mut [Matrix], cache: &UnitCache, dy: &Matrix) -> Matrix {
        match (self, cache) {
            (Unit::Linear(d), UnitCache::Linear(x)) => d.backward(p, g, x, dy),
            (Unit::Maxout(m), UnitCache::Maxout(c)) => m.backward(p, g, c, dy),
            _ => panic!("cache does not belong to this unit"),
        }
    }
}

/// Applies `units` in sequence, returning the output and one cache per unit.
pub fn stack_forward(p: &[Matrix], units: &[Unit], x: &Matrix) -> Result<(Matrix, Vec<UnitCache>)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(units.len());
    for u in units {
        let (y, c) = u.forward(p, &h)?;
        caches.push(c);
        h = y;
    }
    Ok((h, caches))
}

pub fn stack_backward(
    p: &[Matrix],
    g: &mut [Matrix],
    units: &[Unit],
    caches: &[UnitCache],
    dy: &Matrix,
) -> Matrix {
    let mut d = dy.clone();
    for (u, c) in units.iter().zip(caches).rev() {
        d = u.backward(p, g, c, &d);
    }
    d
}
