//! Whole networks: per-set stages, pooling, a residual head and a softmax
//! output, assembled from a declarative [`ModelConfig`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    pool_backward, pool_forward, softmax_xent, Dense, DropoutMask, Equivariant, EquivariantCache,
    Maxout, Pairwise, PairwiseCache, PoolCache, PoolMode, Residual, ResidualCache, Unit, UnitCache,
};
use crate::numkit::{Matrix, Rng};
use crate::params::{ParamKind, ParamStore};
use crate::setbatch::{PackedSets, SetBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Independent per-element embedding.
    Cdan,
    /// Max-centered equivariant layers.
    Pdan,
    /// Pairwise-averaging layers.
    Pcdan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    None,
    Linear,
    Nonlinear,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Cdan => "cdan",
            Family::Pdan => "pdan",
            Family::Pcdan => "pcdan",
        }
    }
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::None => "none",
            EmbeddingKind::Linear => "linear",
            EmbeddingKind::Nonlinear => "nonlinear",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cdan" => Ok(Family::Cdan),
            "pdan" => Ok(Family::Pdan),
            "pcdan" => Ok(Family::Pcdan),
            _ => Err(Error::Config(format!("unknown family {s:?}"))),
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(EmbeddingKind::None),
            "linear" => Ok(EmbeddingKind::Linear),
            "nonlinear" => Ok(EmbeddingKind::Nonlinear),
            _ => Err(Error::Config(format!("unknown embedding {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub embedding: EmbeddingKind,
    pub embedding_size: usize,
    pub special_layers: usize,
    pub pooling: PoolMode,
    /// Standard deviation of Gaussian input noise, in input units (mm).
    pub noise_std: f64,
    pub dropout: f64,
    /// Share dropout masks across the elements of a set. Defaults to on for
    /// the equivariant family only.
    pub simultaneous_dropout: Option<bool>,
    pub l2: f64,
    pub classes: usize,
    pub head_width: usize,
    pub maxout_pieces: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Cdan,
            embedding: EmbeddingKind::Nonlinear,
            embedding_size: 11,
            special_layers: 2,
            pooling: PoolMode::Sum,
            noise_std: 20.0,
            dropout: 0.1,
            simultaneous_dropout: None,
            l2: 0.001,
            classes: 5,
            head_width: 11,
            maxout_pieces: 2,
        }
    }
}

impl ModelConfig {
    pub fn cdan(embedding: EmbeddingKind, embedding_size: usize, pooling: PoolMode) -> Self {
        ModelConfig {
            embedding,
            embedding_size,
            pooling,
            ..Default::default()
        }
    }

    pub fn family(family: Family, embedding_size: usize, pooling: PoolMode) -> Self {
        ModelConfig {
            family,
            embedding_size,
            pooling,
            ..Default::default()
        }
    }

    /// Turns off input noise, dropout and the weight penalty.
    pub fn unregularized(mut self) -> Self {
        self.noise_std = 0.0;
        self.dropout = 0.0;
        self.l2 = 0.0;
        self
    }

    pub fn simultaneous(&self) -> bool {
        self.simultaneous_dropout.unwrap_or(self.family == Family::Pdan)
    }

    /// Width of the pooled vector for a given input dimensionality.
    pub fn pooled_width(&self, input_dim: usize) -> usize {
        match self.embedding {
            EmbeddingKind::None => input_dim,
            _ => self.embedding_size,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if input_dim == 0 {
            return fail("input dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return fail(format!("l2 {} is negative", self.l2));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return fail(format!("noise_std {} is negative", self.noise_std));
        }
        if self.classes < 2 {
            return fail("need at least two classes".into());
        }
        if self.head_width == 0 || self.maxout_pieces == 0 || self.maxout_pieces > 255 {
            return fail("head_width and maxout_pieces must be positive".into());
        }
        match (self.family, self.embedding) {
            (Family::Cdan, EmbeddingKind::None) => {
                if self.embedding_size != input_dim {
                    return fail(format!(
                        "identity embedding keeps the input width {input_dim}, but embedding_size is {}",
                        self.embedding_size
                    ));
                }
            }
            (Family::Cdan, EmbeddingKind::Linear) => {
                if self.embedding_size == 0 {
                    return fail("embedding_size must be positive".into());
                }
            }
            (_, EmbeddingKind::Nonlinear) => {
                if self.embedding_size == 0 || self.special_layers == 0 {
                    return fail("nonlinear embeddings need positive width and depth".into());
                }
            }
            (f, e) => {
                return fail(format!(
                    "family {} requires a nonlinear embedding, got {}",
                    f.name(),
                    e.name()
                ))
            }
        }
        Ok(())
    }

    /// Short label such as `cdan/nonlinear/11/sum`.
    pub fn label(&self) -> String {
        let size = match self.embedding {
            EmbeddingKind::None => "na".to_string(),
            _ => self.embedding_size.to_string(),
        };
        format!(
            "{}/{}/{}/{}",
            self.family.name(),
            self.embedding.name(),
            size,
            self.pooling.name()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Stage {
    Element(Unit),
    Equivariant(Equivariant),
    Pairwise(Pairwise),
}

#[derive(Clone, Debug)]
enum StageCache {
    Element(UnitCache),
    Equivariant(EquivariantCache),
    Pairwise(PairwiseCache),
}

impl StageCache {
    fn margin(&self) -> f64 {
        match self {
            StageCache::Element(c) => c.margin(),
            StageCache::Equivariant(c) => c.margin(),
            StageCache::Pairwise(c) => c.margin(),
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    stages: Vec<(StageCache, Option<DropoutMask>)>,
    pool: PoolCache,
    head: ResidualCache,
    head_dropout: Option<DropoutMask>,
    head_out: Matrix,
}

impl Tape {
    /// Smallest gap between a selected maximum and its runner-up anywhere in
    /// the pass; small values mean a parameter nudge could flip a winner.
    pub fn min_margin(&self) -> f64 {
        self.stages
            .iter()
            .map(|(c, _)| c.margin())
            .chain([self.pool.margin(), self.head.margin()])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    /// Cross-entropy plus the weight penalty.
    pub loss: f64,
    /// Cross-entropy alone.
    pub data_loss: f64,
    pub logits: Matrix,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    input_dim: usize,
    params: ParamStore,
    stages: Vec<Stage>,
    head: Residual,
    output: Dense,
    mode: Mode,
}

impl Model {
    pub fn build(config: &ModelConfig, input_dim: usize, rng: &mut Rng) -> Result<Model> {
        Model::assemble(config, input_dim, false, rng)
    }

    fn assemble(config: &ModelConfig, input_dim: usize, force_projection: bool, rng: &mut Rng) -> Result<Model> {
        config.validate(input_dim)?;
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let m = config.embedding_size;
        let k = config.maxout_pieces;
        match (config.family, config.embedding) {
            (Family::Cdan, EmbeddingKind::None) => {}
            (Family::Cdan, EmbeddingKind::Linear) => {
                stages.push(Stage::Element(Unit::Linear(Dense::new(
                    &mut params,
                    "embed",
                    input_dim,
                    m,
                    rng,
                ))));
            }
            (family, _) => {
                for i in 0..config.special_layers {
                    let width_in = if i == 0 { input_dim } else { m };
                    let name = format!("stage{i}");
                    stages.push(match family {
                        Family::Cdan => {
                            Stage::Element(Unit::Maxout(Maxout::new(&mut params, &name, width_in, m, k, rng)))
                        }
                        Family::Pdan => Stage::Equivariant(Equivariant {
                            unit: Unit::Maxout(Maxout::new(&mut params, &name, width_in, m, k, rng)),
                        }),
                        Family::Pcdan => Stage::Pairwise(Pairwise {
                            pair_fn: vec![Unit::Maxout(Maxout::new(
                                &mut params,
                                &name,
                                2 * width_in,
                                m,
                                k,
                                rng,
                            ))],
                        }),
                    });
                }
            }
        }
        let pooled = config.pooled_width(input_dim);
        let h = config.head_width;
        let unit = Unit::Maxout(Maxout::new(&mut params, "head.unit", pooled, h, k, rng));
        let shortcut = (pooled != h || force_projection)
            .then(|| Dense::new(&mut params, "head.shortcut", pooled, h, rng));
        let output = Dense::new(&mut params, "out", h, config.classes, rng);
        Ok(Model {
            config: config.clone(),
            input_dim,
            params,
            stages,
            head: Residual { unit, shortcut },
            output,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Number of scalar parameters in the per-set stages (before pooling).
    pub fn embedding_param_count(&self) -> usize {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.starts_with("stage") || n.starts_with("embed")
            })
            .map(|id| self.params.value(id).as_slice().len())
            .sum()
    }

    fn check_batch(&self, b: &SetBatch) -> Result<()> {
        if b.dim() != self.input_dim {
            return Err(Error::shape(format!(
                "model takes {}-dimensional elements, batch has {}",
                self.input_dim,
                b.dim()
            )));
        }
        Ok(())
    }

    /// Logits for every instance; regularization follows the current mode.
    pub fn forward(&self, b: &SetBatch, rng: &mut Rng) -> Result<Matrix> {
        self.forward_tape(b, rng).map(|(y, _)| y)
    }

    /// Deterministic logits regardless of the current mode.
    pub fn eval_logits(&self, b: &SetBatch) -> Result<Matrix> {
        self.check_batch(b)?;
        let mut unused = Rng::new(0);
        self.run(b.pack(), Mode::Eval, &mut unused).map(|(y, _)| y)
    }

    pub fn predict(&self, b: &SetBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.eval_logits(b)?))
    }

    pub fn forward_tape(&self, b: &SetBatch, rng: &mut Rng) -> Result<(Matrix, Tape)> {
        self.check_batch(b)?;
        self.run(b.pack(), self.mode, rng)
    }

    fn run(&self, mut x: PackedSets, mode: Mode, rng: &mut Rng) -> Result<(Matrix, Tape)> {
        let p = self.params.values();
        let cfg = &self.config;
        let train = mode == Mode::Train;
        if train && cfg.noise_std > 0.0 {
            for v in x.rows.as_mut_slice() {
                *v += cfg.noise_std * rng.normal();
            }
        }
        let drop = train && cfg.dropout > 0.0;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            let (y, cache) = match stage {
                Stage::Element(u) => u.forward(p, &h.rows).map(|(y, c)| (y, StageCache::Element(c)))?,
                Stage::Equivariant(e) => e.forward(p, &h).map(|(y, c)| (y, StageCache::Equivariant(c)))?,
                Stage::Pairwise(pw) => pw.forward(p, &h).map(|(y, c)| (y, StageCache::Pairwise(c)))?,
            };
            let (y, mask) = if drop {
                let mask = if cfg.simultaneous() {
                    DropoutMask::per_set(rng, &h.offsets, y.cols(), cfg.dropout)
                } else {
                    DropoutMask::independent(rng, y.rows(), y.cols(), cfg.dropout)
                };
                (mask.apply(&y), Some(mask))
            } else {
                (y, None)
            };
            caches.push((cache, mask));
            h = h.with_rows(y);
        }
        let (pooled, pool) = pool_forward(&h.rows, &h.offsets, cfg.pooling)?;
        let (head_y, head) = self.head.forward(p, &pooled)?;
        let (head_out, head_dropout) = if drop {
            let mask = DropoutMask::independent(rng, head_y.rows(), head_y.cols(), cfg.dropout);
            (mask.apply(&head_y), Some(mask))
        } else {
            (head_y, None)
        };
        let logits = self.output.forward(p, &head_out)?;
        Ok((
            logits,
            Tape {
                stages: caches,
                pool,
                head,
                head_dropout,
                head_out,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits` and returns the gradient
    /// with respect to the packed input rows.
    pub fn backward(&mut self, tape: &Tape, dlogits: &Matrix) -> Matrix {
        let (p, g) = self.params.split_mut();
        let mut d = self.output.backward(p, g, &tape.head_out, dlogits);
        if let Some(mask) = &tape.head_dropout {
            d = mask.apply(&d);
        }
        let dpooled = self.head.backward(p, g, &tape.head, &d);
        let mut d = pool_backward(&tape.pool, &dpooled);
        for (stage, (cache, mask)) in self.stages.iter().zip(&tape.stages).rev() {
            if let Some(mask) = mask {
                d = mask.apply(&d);
            }
            d = match (stage, cache) {
                (Stage::Element(u), StageCache::Element(c)) => u.backward(p, g, c, &d),
                (Stage::Equivariant(e), StageCache::Equivariant(c)) => e.backward(p, g, c, &d),
                (Stage::Pairwise(pw), StageCache::Pairwise(c)) => pw.backward(p, g, c, &d),
                _ => unreachable!("tape recorded by a different model"),
            };
        }
        d
    }

    /// Mean cross-entropy plus `l2 · Σ‖W‖²`, with gradients left in the
    /// parameter store.
    pub fn loss_and_grads(&mut self, b: &SetBatch, labels: &[usize], rng: &mut Rng) -> Result<LossReport> {
        if labels.len() != b.batch() {
            return Err(Error::shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                b.batch()
            )));
        }
        let (logits, tape) = self.forward_tape(b, rng)?;
        let (data_loss, dlogits) = softmax_xent(&logits, labels)?;
        self.params.zero_grads();
        self.backward(&tape, &dlogits);
        let l2 = self.config.l2;
        let mut penalty = 0.0;
        if l2 > 0.0 {
            let ids: Vec<_> = self.params.ids().filter(|&id| self.params.kind(id) == ParamKind::Weight).collect();
            let (p, g) = self.params.split_mut();
            for id in ids {
                penalty += p[id.index()].sum_squares();
                g[id.index()].axpy(2.0 * l2, &p[id.index()])?;
            }
        }
        Ok(LossReport {
            loss: data_loss + l2 * penalty,
            data_loss,
            logits,
        })
    }

    /// Eval-mode mean cross-entropy (no weight penalty).
    pub fn data_loss(&self, b: &SetBatch, labels: &[usize]) -> Result<f64> {
        let logits = self.eval_logits(b)?;
        softmax_xent(&logits, labels).map(|(l, _)| l)
    }

    /// The equivalent model with a linear embedding folded into the head.
    ///
    /// Only defined for a per-element linear embedding under average
    /// pooling, where `avg(xW + b) = avg(x)W + b` lets the head weights `V`,
    /// `c` become `WV`, `bV + c`.
    pub fn collapse_linear_embedding(&self) -> Result<Model> {
        let cfg = &self.config;
        if cfg.family != Family::Cdan || cfg.embedding != EmbeddingKind::Linear || cfg.pooling != PoolMode::Average {
            return Err(Error::Config(format!(
                "only cdan/linear/average models collapse, got {}",
                cfg.label()
            )));
        }
        let w = self.params.get("embed.w").expect("linear embedding weights");
        let b = self.params.get("embed.b").expect("linear embedding bias");
        let merged_cfg = ModelConfig {
            embedding: EmbeddingKind::None,
            embedding_size: self.input_dim,
            ..cfg.clone()
        };
        let mut merged = Model::assemble(&merged_cfg, self.input_dim, true, &mut Rng::new(0))?;
        let mut updates = Vec::new();
        for k in 0..cfg.maxout_pieces {
            let v = self.params.get(&format!("head.unit.piece{k}.w")).expect("head weights");
            let c = self.params.get(&format!("head.unit.piece{k}.b")).expect("head bias");
            updates.push((format!("head.unit.piece{k}.w"), w.matmul(v)?));
            updates.push((format!("head.unit.piece{k}.b"), b.matmul(v)?.add(c)?));
        }
        match (self.params.get("head.shortcut.w"), self.params.get("head.shortcut.b")) {
            (Some(pw), Some(pb)) => {
                updates.push(("head.shortcut.w".into(), w.matmul(pw)?));
                updates.push(("head.shortcut.b".into(), b.matmul(pw)?.add(pb)?));
            }
            _ => {
                updates.push(("head.shortcut.w".into(), w.clone()));
                updates.push(("head.shortcut.b".into(), b.clone()));
            }
        }
        for name in ["out.w", "out.b"] {
            updates.push((name.into(), self.params.get(name).expect("output layer").clone()));
        }
        for (name, value) in updates {
            merged.params.set(&name, value)?;
        }
        merged.mode = self.mode;
        Ok(merged)
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} inputs, {} parameters)",
            self.config.label(),
            self.input_dim,
            self.params.scalar_count()
        )
    }
}

/// Index of the largest entry per row, first index on ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use crate::setbatch::Permutation;

    fn random_sets(rng: &mut Rng, count: usize, dim: usize, scale: f64) -> Vec<Matrix> {
        (0..count)
            .map(|_| {
                let n = rng.range_inclusive(3, 12);
                Matrix::from_vec(n, dim, (0..n * dim).map(|_| scale * rng.normal()).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn parameter_count_by_hand() {
        let mut rng = Rng::new(1);
        let m = Model::build(&ModelConfig::default(), 3, &mut rng).unwrap();
        let embedding = 2 * (3 * 11 + 11) + 2 * (11 * 11 + 11);
        let head = 2 * (11 * 11 + 11);
        let softmax = 11 * 5 + 5;
        assert_eq!(m.params().scalar_count(), embedding + head + softmax);
        assert_eq!(m.embedding_param_count(), embedding);
    }

    #[test]
    fn identity_embedding_has_no_stage_params() {
        let mut rng = Rng::new(2);
        let cfg = ModelConfig::cdan(EmbeddingKind::None, 3, PoolMode::Sum);
        let m = Model::build(&cfg, 3, &mut rng).unwrap();
        assert_eq!(m.embedding_param_count(), 0);
        // pooled width 3 != 11, so the head carries a projection shortcut
        assert!(m.params().get("head.shortcut.w").is_some());
        let bad = ModelConfig::cdan(EmbeddingKind::None, 11, PoolMode::Sum);
        assert!(Model::build(&bad, 3, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut rng = Rng::new(3);
        let mut cfg = ModelConfig::family(Family::Pdan, 11, PoolMode::Max);
        cfg.embedding = EmbeddingKind::Linear;
        assert!(Model::build(&cfg, 3, &mut rng).is_err());
        let cfg = ModelConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(Model::build(&cfg, 3, &mut rng).is_err());
        let cfg = ModelConfig {
            l2: -1.0,
            ..Default::default()
        };
        assert!(Model::build(&cfg, 3, &mut rng).is_err());
    }

    #[test]
    fn config_json_roundtrip_and_unknown_fields() {
        let cfg = ModelConfig::family(Family::Pcdan, 100, PoolMode::Average);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
        let partial: ModelConfig = serde_json::from_str(r#"{"family":"pdan"}"#).unwrap();
        assert_eq!(partial.embedding_size, 11);
        assert!(partial.simultaneous());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn pdan_dropout_is_shared_across_elements() {
        let mut rng = Rng::new(4);
        let cfg = ModelConfig {
            dropout: 0.5,
            ..ModelConfig::family(Family::Pdan, 11, PoolMode::Sum)
        };
        let model = Model::build(&cfg, 3, &mut rng).unwrap();
        let b = SetBatch::build(&random_sets(&mut rng, 4, 3, 10.0)).unwrap();
        let (_, tape) = model.forward_tape(&b, &mut rng).unwrap();
        let offsets = b.pack().offsets;
        for (_, mask) in &tape.stages {
            let scale = mask.as_ref().unwrap().scale();
            for w in offsets.windows(2) {
                for r in w[0] + 1..w[1] {
                    assert_eq!(scale.row(r), scale.row(w[0]));
                }
            }
        }
    }

    #[test]
    fn train_equals_eval_without_regularization() {
        let mut rng = Rng::new(5);
        for family in [Family::Cdan, Family::Pdan, Family::Pcdan] {
            let cfg = ModelConfig::family(family, 11, PoolMode::Sum).unregularized();
            let model = Model::build(&cfg, 3, &mut rng).unwrap();
            let b = SetBatch::build(&random_sets(&mut rng, 5, 3, 30.0)).unwrap();
            let train = model.forward(&b, &mut rng).unwrap();
            assert_eq!(train, model.eval_logits(&b).unwrap());
        }
    }

    #[test]
    fn duplicate_instances_share_logits() {
        let mut rng = Rng::new(6);
        let sets = random_sets(&mut rng, 3, 3, 30.0);
        for family in [Family::Cdan, Family::Pdan, Family::Pcdan] {
            let model = Model::build(&ModelConfig::family(family, 11, PoolMode::Max), 3, &mut rng).unwrap();
            let b = SetBatch::build(&[sets[0].clone(), sets[1].clone(), sets[0].clone()]).unwrap();
            let y = model.eval_logits(&b).unwrap();
            assert_eq!(y.row(0), y.row(2));
        }
    }

    #[test]
    fn eval_is_permutation_invariant() {
        let mut rng = Rng::new(7);
        for family in [Family::Cdan, Family::Pdan, Family::Pcdan] {
            for pooling in PoolMode::ALL {
                let model = Model::build(&ModelConfig::family(family, 11, pooling), 3, &mut rng).unwrap();
                let sets = random_sets(&mut rng, 1, 3, 30.0);
                let b = SetBatch::build(&sets).unwrap();
                let y = model.eval_logits(&b).unwrap();
                for _ in 0..10 {
                    let p = Permutation::random(&mut rng, b.sizes()[0]);
                    let yp = model.eval_logits(&b.permute_elements(0, &p).unwrap()).unwrap();
                    assert!(y.max_abs_diff(&yp).unwrap() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn l2_penalty_is_additive() {
        let mut rng = Rng::new(8);
        let base = ModelConfig::default().unregularized();
        let mut a = Model::build(&base, 3, &mut Rng::new(9)).unwrap();
        let mut b = Model::build(&ModelConfig { l2: 0.001, ..base }, 3, &mut Rng::new(9)).unwrap();
        let batch = SetBatch::build(&random_sets(&mut rng, 4, 3, 1.0)).unwrap();
        let labels = [0, 1, 2, 3];
        let la = a.loss_and_grads(&batch, &labels, &mut rng).unwrap();
        let lb = b.loss_and_grads(&batch, &labels, &mut rng).unwrap();
        let penalty = 0.001 * a.params().weight_sq_norm();
        assert!((lb.loss - la.loss - penalty).abs() < 1e-12);
        assert_eq!(la.data_loss, lb.data_loss);
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_loss() {
        let mut rng = Rng::new(10);
        let mut model = Model::build(&ModelConfig::default().unregularized(), 3, &mut rng).unwrap();
        model.params_mut().set("out.w", Matrix::zeros(11, 5)).unwrap();
        let b = SetBatch::build(&random_sets(&mut rng, 6, 3, 20.0)).unwrap();
        let r = model.loss_and_grads(&b, &[0, 1, 2, 3, 4, 0], &mut rng).unwrap();
        assert!((r.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn whole_model_gradient() {
        let mut rng = Rng::new(11);
        for family in [Family::Cdan, Family::Pdan, Family::Pcdan] {
            let cfg = ModelConfig {
                l2: 0.01,
                ..ModelConfig::family(family, 5, PoolMode::Sum).unregularized()
            };
            let mut model = Model::build(&cfg, 3, &mut rng).unwrap();
            let b = SetBatch::build(&random_sets(&mut rng, 2, 3, 1.0)).unwrap();
            let labels = [1, 3];
            model.loss_and_grads(&b, &labels, &mut rng).unwrap();
            let analytic = model.params().flat_grads();
            let point = model.params().flat_values();
            let mut probe = model.clone();
            let err = grad_check(
                |theta| {
                    probe.params_mut().load_flat(theta).unwrap();
                    probe.loss_and_grads(&b, &labels, &mut Rng::new(0)).unwrap().loss
                },
                &analytic,
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{family:?}: {err}");
        }
    }

    #[test]
    fn collapse_matches_original() {
        let mut rng = Rng::new(12);
        let cfg = ModelConfig::cdan(EmbeddingKind::Linear, 11, PoolMode::Average);
        let mut model = Model::build(&cfg, 3, &mut rng).unwrap();
        let bias = Matrix::from_vec(1, 11, (0..11).map(|_| rng.normal()).collect()).unwrap();
        model.params_mut().set("embed.b", bias).unwrap();
        let merged = model.collapse_linear_embedding().unwrap();
        let b = SetBatch::build(&random_sets(&mut rng, 8, 3, 1.0)).unwrap();
        let d = model.eval_logits(&b).unwrap().max_abs_diff(&merged.eval_logits(&b).unwrap()).unwrap();
        assert!(d <= 1e-9, "{d}");
        let sum_model = Model::build(&ModelConfig::cdan(EmbeddingKind::Linear, 11, PoolMode::Sum), 3, &mut rng).unwrap();
        assert!(sum_model.collapse_linear_embedding().is_err());
    }
}
