//! Property suites run by the CLI and the acceptance tests: gradient checks,
//! permutation invariance, linear collapse and the pooling ambiguity demo.

use std::fmt;

use crate::data::{canonical_pair, gen_ambiguous_pair, sigmoid_embedding, AMBIGUITY_EPS};
use crate::error::{Error, Result};
use crate::layers::{
    pool_backward, pool_forward, softmax_xent, stack_backward, stack_forward, Dense, Equivariant, Maxout, Pairwise,
    PoolMode, Residual, Unit,
};
use crate::model::{EmbeddingKind, Family, Mode, Model, ModelConfig};
use crate::numkit::{grad_check, Matrix, Rng};
use crate::params::ParamStore;
use crate::setbatch::{PackedSets, Permutation, SetBatch};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const INVARIANCE_TOLERANCE: f64 = 1e-9;
pub const COLLAPSE_TOLERANCE: f64 = 1e-9;
pub const AMBIGUITY_TOLERANCE: f64 = 1e-9;
/// Samples whose max/maxout winners are closer than this are redrawn, so a
/// finite-difference probe cannot cross a kink.
pub const MIN_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            threshold,
            pass: value > threshold,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<32} {:>12.3e}  (threshold {:.0e})  {}",
            self.name,
            self.value,
            self.threshold,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

pub fn write_results_csv<W: std::io::Write>(mut w: W, results: &[CheckResult]) -> std::io::Result<()> {
    writeln!(w, "check,value,threshold,pass")?;
    for r in results {
        writeln!(w, "{},{:e},{:e},{}", r.name, r.value, r.threshold, r.pass)?;
    }
    Ok(())
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("sized")
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn unflatten(template: &[Matrix], flat: &[f64]) -> Vec<Matrix> {
    let mut at = 0;
    template
        .iter()
        .map(|m| {
            let n = m.rows() * m.cols();
            let out = Matrix::from_vec(m.rows(), m.cols(), flat[at..at + n].to_vec()).expect("sized");
            at += n;
            out
        })
        .collect()
}

type Forward<'a> = dyn Fn(&[Matrix], &Matrix) -> Result<(Matrix, f64)> + 'a;
type Backward<'a> = dyn Fn(&[Matrix], &mut [Matrix], &Matrix, &Matrix) -> Result<Matrix> + 'a;

/// Checks parameter and input gradients of a layer through the scalar probe
/// `Σ y ⊙ R` for a fixed random `R`. Inputs are redrawn until every max
/// decision has at least [`MIN_MARGIN`] of slack.
fn check_layer(
    name: &str,
    rng: &mut Rng,
    store: &ParamStore,
    mut draw: impl FnMut(&mut Rng) -> Matrix,
    fwd: &Forward<'_>,
    bwd: &Backward<'_>,
) -> Result<CheckResult> {
    let p = store.values();
    let mut x = draw(rng);
    let mut draws = 1;
    let y = loop {
        let (y, margin) = fwd(p, &x)?;
        if margin >= MIN_MARGIN {
            break y;
        }
        if draws == MAX_DRAWS {
            return Err(Error::Numeric(format!("{name}: no tie-free sample in {MAX_DRAWS} draws")));
        }
        x = draw(rng);
        draws += 1;
    };
    let r = random_matrix(rng, y.rows(), y.cols(), 1.0);
    let mut g: Vec<Matrix> = p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let dx = bwd(p, &mut g, &x, &r)?;
    let analytic: Vec<f64> = g.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let point: Vec<f64> = p.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let mut worst = 0.0f64;
    if !point.is_empty() {
        worst = grad_check(
            |flat| {
                let q = unflatten(p, flat);
                fwd(&q, &x).map_or(f64::NAN, |(y, _)| dot(&y, &r))
            },
            &analytic,
            &point,
            GRAD_STEP,
        )?;
    }
    let input_err = grad_check(
        |flat| {
            let xs = Matrix::from_vec(x.rows(), x.cols(), flat.to_vec()).expect("sized");
            fwd(p, &xs).map_or(f64::NAN, |(y, _)| dot(&y, &r))
        },
        dx.as_slice(),
        x.as_slice(),
        GRAD_STEP,
    )?;
    Ok(CheckResult::at_most(name, worst.max(input_err), GRAD_TOLERANCE))
}

fn unit_layer(name: &str, rng: &mut Rng, store: &mut ParamStore, input: usize, output: usize) -> Unit {
    Unit::Maxout(Maxout::new(store, name, input, output, 2, rng))
}

fn randomize_biases(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == crate::params::ParamKind::Bias).collect();
    for id in ids {
        let (r, c) = store.value(id).shape();
        let name = store.name(id).to_string();
        store.set(&name, random_matrix(rng, r, c, 0.5)).expect("same shape");
    }
}

const OFFSETS: [usize; 4] = [0, 3, 7, 8];

/// Finite-difference checks of every layer and of whole models.
pub fn gradcheck_all(seed: u64) -> Result<Vec<CheckResult>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    let rows = *OFFSETS.last().unwrap();

    {
        let mut rng = root.fork(&[0]);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "dense", 4, 3, &mut rng);
        randomize_biases(&mut store, &mut rng);
        out.push(check_layer(
            "dense",
            &mut rng,
            &store,
            |r| random_matrix(r, 5, 4, 1.0),
            &|p, x| Ok((d.forward(p, x)?, f64::INFINITY)),
            &|p, g, x, dy| Ok(d.backward(p, g, x, dy)),
        )?);
    }
    {
        let mut rng = root.fork(&[1]);
        let mut store = ParamStore::new();
        let u = unit_layer("maxout", &mut rng, &mut store, 4, 3);
        randomize_biases(&mut store, &mut rng);
        out.push(check_layer(
            "maxout",
            &mut rng,
            &store,
            |r| random_matrix(r, 6, 4, 1.0),
            &|p, x| u.forward(p, x).map(|(y, c)| (y, c.margin())),
            &|p, g, x, dy| {
                let (_, c) = u.forward(p, x)?;
                Ok(u.backward(p, g, &c, dy))
            },
        )?);
    }
    {
        let mut rng = root.fork(&[2]);
        let mut store = ParamStore::new();
        let stack = vec![
            unit_layer("embed0", &mut rng, &mut store, 3, 6),
            unit_layer("embed1", &mut rng, &mut store, 6, 4),
        ];
        randomize_biases(&mut store, &mut rng);
        let margin = |c: &[crate::layers::UnitCache]| c.iter().map(|c| c.margin()).fold(f64::INFINITY, f64::min);
        out.push(check_layer(
            "embed_set",
            &mut rng,
            &store,
            |r| random_matrix(r, rows, 3, 1.0),
            &|p, x| stack_forward(p, &stack, x).map(|(y, c)| (y, margin(&c))),
            &|p, g, x, dy| {
                let (_, c) = stack_forward(p, &stack, x)?;
                Ok(stack_backward(p, g, &stack, &c, dy))
            },
        )?);
    }
    for (k, mode) in PoolMode::ALL.into_iter().enumerate() {
        let mut rng = root.fork(&[3, k as u64]);
        let store = ParamStore::new();
        out.push(check_layer(
            &format!("pool_{}", mode.name()),
            &mut rng,
            &store,
            |r| random_matrix(r, rows, 4, 1.0),
            &|_, x| pool_forward(x, &OFFSETS, mode).map(|(y, c)| (y, c.margin())),
            &|_, _, x, dy| {
                let (_, c) = pool_forward(x, &OFFSETS, mode)?;
                Ok(pool_backward(&c, dy))
            },
        )?);
    }
    {
        let mut rng = root.fork(&[4]);
        let mut store = ParamStore::new();
        let eq = Equivariant {
            unit: unit_layer("equivariant", &mut rng, &mut store, 3, 4),
        };
        randomize_biases(&mut store, &mut rng);
        let packed = |x: &Matrix| PackedSets::new(x.clone(), OFFSETS.to_vec());
        out.push(check_layer(
            "equivariant",
            &mut rng,
            &store,
            |r| random_matrix(r, rows, 3, 1.0),
            &|p, x| eq.forward(p, &packed(x)?).map(|(y, c)| (y, c.margin())),
            &|p, g, x, dy| {
                let (_, c) = eq.forward(p, &packed(x)?)?;
                Ok(eq.backward(p, g, &c, dy))
            },
        )?);
    }
    {
        let mut rng = root.fork(&[5]);
        let mut store = ParamStore::new();
        let pw = Pairwise {
            pair_fn: vec![unit_layer("pairwise", &mut rng, &mut store, 6, 4)],
        };
        randomize_biases(&mut store, &mut rng);
        let packed = |x: &Matrix| PackedSets::new(x.clone(), OFFSETS.to_vec());
        out.push(check_layer(
            "pairwise",
            &mut rng,
            &store,
            |r| random_matrix(r, rows, 3, 1.0),
            &|p, x| pw.forward(p, &packed(x)?).map(|(y, c)| (y, c.margin())),
            &|p, g, x, dy| {
                let (_, c) = pw.forward(p, &packed(x)?)?;
                Ok(pw.backward(p, g, &c, dy))
            },
        )?);
    }
    for (k, (label, input, output)) in [("residual_identity", 5, 5), ("residual_projection", 5, 4)]
        .into_iter()
        .enumerate()
    {
        let mut rng = root.fork(&[6, k as u64]);
        let mut store = ParamStore::new();
        let unit = unit_layer("head.unit", &mut rng, &mut store, input, output);
        let shortcut = (input != output).then(|| Dense::new(&mut store, "head.shortcut", input, output, &mut rng));
        let res = Residual { unit, shortcut };
        randomize_biases(&mut store, &mut rng);
        out.push(check_layer(
            label,
            &mut rng,
            &store,
            |r| random_matrix(r, 4, input, 1.0),
            &|p, x| res.forward(p, x).map(|(y, c)| (y, c.margin())),
            &|p, g, x, dy| {
                let (_, c) = res.forward(p, x)?;
                Ok(res.backward(p, g, &c, dy))
            },
        )?);
    }
    {
        let mut rng = root.fork(&[7]);
        let logits = random_matrix(&mut rng, 4, 5, 2.0);
        let labels = [0, 3, 4, 1];
        let (_, grad) = softmax_xent(&logits, &labels)?;
        let err = grad_check(
            |flat| {
                let l = Matrix::from_vec(4, 5, flat.to_vec()).expect("sized");
                softmax_xent(&l, &labels).map_or(f64::NAN, |(v, _)| v)
            },
            grad.as_slice(),
            logits.as_slice(),
            GRAD_STEP,
        )?;
        out.push(CheckResult::at_most("softmax_xent", err, GRAD_TOLERANCE));
    }
    for (k, family) in [Family::Cdan, Family::Pdan, Family::Pcdan].into_iter().enumerate() {
        for (j, pooling) in PoolMode::ALL.into_iter().enumerate() {
            let mut rng = root.fork(&[8, k as u64, j as u64]);
            out.push(check_model(family, pooling, &mut rng)?);
        }
    }
    Ok(out)
}

/// Whole-model check of the regularized training loss (noise and dropout
/// off, L2 on) with respect to every parameter.
fn check_model(family: Family, pooling: PoolMode, rng: &mut Rng) -> Result<CheckResult> {
    let cfg = ModelConfig {
        l2: 0.01,
        ..ModelConfig::family(family, 5, pooling).unregularized()
    };
    let mut model = Model::build(&cfg, 3, rng)?;
    randomize_biases(model.params_mut(), rng);
    let labels = [1, 3, 0];
    let mut draws = 0;
    let batch = loop {
        let sets: Vec<Matrix> = OFFSETS[..labels.len() + 1]
            .windows(2)
            .map(|w| random_matrix(rng, w[1] - w[0], 3, 1.0))
            .collect();
        let b = SetBatch::build(&sets)?;
        let (_, tape) = model.forward_tape(&b, rng)?;
        if tape.min_margin() >= MIN_MARGIN {
            break b;
        }
        draws += 1;
        if draws == MAX_DRAWS {
            return Err(Error::Numeric(format!("{}: no tie-free sample", cfg.label())));
        }
    };
    model.loss_and_grads(&batch, &labels, rng)?;
    let analytic = model.params().flat_grads();
    let point = model.params().flat_values();
    let mut probe = model.clone();
    let mut scratch = Rng::new(0);
    let err = grad_check(
        |flat| {
            probe.params_mut().load_flat(flat).expect("same size");
            probe.loss_and_grads(&batch, &labels, &mut scratch).map_or(f64::NAN, |r| r.loss)
        },
        &analytic,
        &point,
        GRAD_STEP,
    )?;
    Ok(CheckResult::at_most(
        format!("model_{}_{}", family.name(), pooling.name()),
        err,
        GRAD_TOLERANCE,
    ))
}

fn random_set(rng: &mut Rng, dim: usize, scale: f64) -> Matrix {
    let n = rng.range_inclusive(3, 12);
    random_matrix(rng, n, dim, scale)
}

/// Eval-mode logit drift under element permutations, for every family and
/// pooling mode, plus row-equivariance of the two set layers.
pub fn invariance_audit(seed: u64, inputs: usize, permutations: usize) -> Result<Vec<CheckResult>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (k, family) in [Family::Cdan, Family::Pdan, Family::Pcdan].into_iter().enumerate() {
        for (j, pooling) in PoolMode::ALL.into_iter().enumerate() {
            let mut rng = root.fork(&[0, k as u64, j as u64]);
            let cfg = ModelConfig::family(family, 11, pooling);
            let mut model = Model::build(&cfg, 3, &mut rng)?;
            randomize_biases(model.params_mut(), &mut rng);
            model.set_mode(Mode::Eval);
            let mut worst = 0.0f64;
            for _ in 0..inputs {
                let set = random_set(&mut rng, 3, 50.0);
                let base = model.eval_logits(&SetBatch::build(std::slice::from_ref(&set))?)?;
                for _ in 0..permutations {
                    let perm = Permutation::random(&mut rng, set.rows());
                    let moved = perm.apply_rows(&set)?;
                    let logits = model.eval_logits(&SetBatch::build(&[moved])?)?;
                    worst = worst.max(base.max_abs_diff(&logits).expect("same shape"));
                }
            }
            out.push(CheckResult::at_most(
                format!("invariance_{}_{}", family.name(), pooling.name()),
                worst,
                INVARIANCE_TOLERANCE,
            ));
        }
    }
    let mut rng = root.fork(&[1]);
    let mut store = ParamStore::new();
    let eq = Equivariant {
        unit: unit_layer("eq", &mut rng, &mut store, 3, 5),
    };
    let pw = Pairwise {
        pair_fn: vec![unit_layer("pw", &mut rng, &mut store, 6, 5)],
    };
    let p = store.values();
    let (mut worst_eq, mut worst_pw) = (0.0f64, 0.0f64);
    for _ in 0..inputs {
        let set = random_set(&mut rng, 3, 50.0);
        let eq_base = eq.forward(p, &PackedSets::single(set.clone())?)?.0;
        let pw_base = pw.forward(p, &PackedSets::single(set.clone())?)?.0;
        for _ in 0..permutations {
            let perm = Permutation::random(&mut rng, set.rows());
            let moved = PackedSets::single(perm.apply_rows(&set)?)?;
            let diff = |y: Matrix, base: &Matrix| perm.apply_rows(base).map(|want| y.max_abs_diff(&want).expect("same shape"));
            worst_eq = worst_eq.max(diff(eq.forward(p, &moved)?.0, &eq_base)?);
            worst_pw = worst_pw.max(diff(pw.forward(p, &moved)?.0, &pw_base)?);
        }
    }
    out.push(CheckResult::at_most("equivariance_equivariant", worst_eq, 0.0));
    out.push(CheckResult::at_most("equivariance_pairwise", worst_pw, INVARIANCE_TOLERANCE));
    Ok(out)
}

fn random_batch(rng: &mut Rng, count: usize, dim: usize, scale: f64) -> Result<SetBatch> {
    let sets: Vec<Matrix> = (0..count).map(|_| random_set(rng, dim, scale)).collect();
    SetBatch::build(&sets)
}

/// Linear embedding + average pooling against the merged-weight model, and
/// the per-set sum identity `Σᵢ(xᵢW + b) = (Σᵢxᵢ)W + n·b`.
pub fn collapse_check(seed: u64, batches: usize) -> Result<Vec<CheckResult>> {
    let root = Rng::new(seed);
    let mut rng = root.fork(&[0]);
    let (mut worst_avg, mut worst_sum) = (0.0f64, 0.0f64);
    for size in [3usize, 11, 100].into_iter().cycle().take(batches) {
        let cfg = ModelConfig::cdan(EmbeddingKind::Linear, size, PoolMode::Average);
        let mut model = Model::build(&cfg, 3, &mut rng)?;
        randomize_biases(model.params_mut(), &mut rng);
        model.set_mode(Mode::Eval);
        let merged = model.collapse_linear_embedding()?;
        let b = random_batch(&mut rng, 8, 3, 50.0)?;
        let (a, m) = (model.eval_logits(&b)?, merged.eval_logits(&b)?);
        worst_avg = worst_avg.max(a.max_abs_diff(&m).expect("same shape"));

        let w = model.params().get("embed.w").expect("linear embedding").clone();
        let bias = model.params().get("embed.b").expect("linear embedding").clone();
        let packed = b.pack();
        let embedded = crate::layers::dense_forward(&packed.rows, &w, &bias)?;
        let (lhs, _) = pool_forward(&embedded, &packed.offsets, PoolMode::Sum)?;
        let (sums, _) = pool_forward(&packed.rows, &packed.offsets, PoolMode::Sum)?;
        let mut rhs = sums.matmul(&w)?;
        for (i, row) in (0..rhs.rows()).zip(b.sizes()) {
            rhs.row_mut(i).iter_mut().zip(bias.row(0)).for_each(|(v, bv)| *v += *row as f64 * bv);
        }
        worst_sum = worst_sum.max(lhs.max_abs_diff(&rhs).expect("same shape"));
    }
    Ok(vec![
        CheckResult::at_most("collapse_average_model", worst_avg, COLLAPSE_TOLERANCE),
        CheckResult::at_most("collapse_sum_identity", worst_sum, COLLAPSE_TOLERANCE),
    ])
}

/// Numbers reported by the ambiguity demo.
#[derive(Clone, Debug)]
pub struct AmbiguityReport {
    pub checks: Vec<CheckResult>,
    pub example: (Matrix, Matrix),
    pub canonical_sum_margin: f64,
    pub canonical_average_margin: f64,
}

/// Pinned sum-pooled ∞-norm gap of the canonical pair under the sigmoid
/// embedding, from an arbitrary-precision evaluation.
pub const CANONICAL_SUM_MARGIN: f64 = 0.284_602_544_487_021_8;

fn pooled_gap(a: &Matrix, b: &Matrix, mode: PoolMode) -> Result<f64> {
    let pa = pool_forward(a, &[0, a.rows()], mode)?.0;
    let pb = pool_forward(b, &[0, b.rows()], mode)?.0;
    Ok(pa.max_abs_diff(&pb).expect("same width"))
}

pub fn ambiguity_check(seed: u64, pairs: usize, maps: usize) -> Result<AmbiguityReport> {
    let mut rng = Rng::new(seed);
    let mut raw = [0.0f64; 3];
    let mut linear_max = 0.0f64;
    let mut example = None;
    for k in 0..pairs {
        let n = 4 + k % 9;
        let (a, b) = gen_ambiguous_pair(&mut rng, n)?;
        for (slot, mode) in raw.iter_mut().zip(PoolMode::ALL) {
            *slot = slot.max(pooled_gap(&a, &b, mode)?);
        }
        for _ in 0..maps {
            let w = random_matrix(&mut rng, 2, 5, 1.0);
            let bias = random_matrix(&mut rng, 1, 5, 1.0);
            let ea = crate::layers::dense_forward(&a, &w, &bias)?;
            let eb = crate::layers::dense_forward(&b, &w, &bias)?;
            linear_max = linear_max.max(pooled_gap(&ea, &eb, PoolMode::Max)?);
        }
        example.get_or_insert((a, b));
    }
    let (ca, cb) = canonical_pair();
    let sa = sigmoid_embedding(&ca, AMBIGUITY_EPS)?;
    let sb = sigmoid_embedding(&cb, AMBIGUITY_EPS)?;
    let sum_margin = pooled_gap(&sa, &sb, PoolMode::Sum)?;
    let avg_margin = pooled_gap(&sa, &sb, PoolMode::Average)?;
    let canonical_raw = PoolMode::ALL
        .into_iter()
        .map(|m| pooled_gap(&ca, &cb, m))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mut checks: Vec<CheckResult> = PoolMode::ALL
        .into_iter()
        .zip(raw)
        .map(|(m, v)| CheckResult::at_most(format!("raw_{}_gap", m.name()), v, 0.0))
        .collect();
    checks.push(CheckResult::at_most("linear_max_gap", linear_max, AMBIGUITY_TOLERANCE));
    checks.push(CheckResult::at_most("canonical_raw_gap", canonical_raw, 0.0));
    checks.push(CheckResult::above("sigmoid_sum_margin", sum_margin, 0.0));
    checks.push(CheckResult::at_most(
        "sigmoid_sum_margin_drift",
        (sum_margin - CANONICAL_SUM_MARGIN).abs(),
        1e-12,
    ));
    Ok(AmbiguityReport {
        checks,
        example: example.ok_or_else(|| Error::Domain("at least one pair is needed".into()))?,
        canonical_sum_margin: sum_margin,
        canonical_average_margin: avg_margin,
    })
}
