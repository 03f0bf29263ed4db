//! Minibatch training with early stopping, and the leave-one-user-out
//! evaluation protocol built on top of it.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{class_count, make_louo_splits_with, Instance, SplitData, PER_CLASS};
use crate::error::{Error, Result};
use crate::layers::softmax_xent;
use crate::model::{argmax_rows, Mode, Model, ModelConfig};
use crate::numkit::{derive_seed, Matrix, Rng};
use crate::optim::RmsProp;
use crate::setbatch::SetBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs without a strictly lower validation loss before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            patience: 40,
            max_epochs: 1000,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, patience and max_epochs must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

/// Tracks the best validation loss; any strictly lower loss counts.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            Verdict::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Waiting
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Validation data loss (no weight penalty) of the restored parameters.
    pub best_val_loss: f64,
    pub test_accuracy: f64,
    pub wall_time: Duration,
}

impl RunReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,train_accuracy,val_loss,val_accuracy")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            )?;
        }
        Ok(())
    }
}

fn labels_of(instances: &[Instance]) -> Vec<usize> {
    instances.iter().map(Instance::class_index).collect()
}

/// Centered padded batch of the given instances.
pub fn make_batch(instances: &[&Instance]) -> Result<SetBatch> {
    let sets: Vec<Matrix> = instances.iter().map(|i| i.points.clone()).collect();
    Ok(SetBatch::build(&sets)?.center())
}

/// Eval-mode mean data loss and accuracy.
pub fn evaluate(model: &Model, instances: &[Instance]) -> Result<(f64, f64)> {
    if instances.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in instances.chunks(256) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let labels = labels_of(chunk);
        let logits = model.eval_logits(&make_batch(&refs)?)?;
        let (l, _) = softmax_xent(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = instances.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains until validation loss stalls for `patience` epochs, restores the
/// best parameters and measures test accuracy once.
pub fn fit(model: &mut Model, opt: &mut RmsProp, data: &SplitData, tc: &TrainConfig) -> Result<RunReport> {
    tc.validate()?;
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::Domain(format!(
            "degenerate split: {} train / {} validation / {} test",
            data.train.len(),
            data.validation.len(),
            data.test.len()
        )));
    }
    let started = Instant::now();
    let root = Rng::new(tc.seed);
    let mut order_rng = root.fork(&[0]);
    let mut noise_rng = root.fork(&[1]);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = model.params().snapshot();
    let mut epochs = Vec::new();
    for epoch in 1..=tc.max_epochs {
        model.set_mode(Mode::Train);
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let insts: Vec<&Instance> = chunk.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = insts.iter().map(|i| i.class_index()).collect();
            let batch = make_batch(&insts)?;
            let r = model.loss_and_grads(&batch, &labels, &mut noise_rng)?;
            if !r.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {} at epoch {epoch}, batch {bi}",
                    r.loss
                )));
            }
            opt.step(model.params_mut())?;
            loss_sum += r.data_loss * chunk.len() as f64;
            correct += argmax_rows(&r.logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        model.set_mode(Mode::Eval);
        let (val_loss, val_accuracy) = evaluate(model, &data.validation)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        let n = data.train.len() as f64;
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(val_loss) {
            Verdict::Improved => best = model.params().snapshot(),
            Verdict::Waiting => {}
            Verdict::Stop => break,
        }
    }
    model.params_mut().restore(&best);
    model.set_mode(Mode::Eval);
    let (_, test_accuracy) = evaluate(model, &data.test)?;
    Ok(RunReport {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best(),
        test_accuracy,
        wall_time: started.elapsed(),
    })
}

/// Builds a fresh model and optimizer from configs and trains it.
pub fn train_once(config: &ModelConfig, data: &SplitData, tc: &TrainConfig, init_seed: u64) -> Result<(Model, RunReport)> {
    let dim = data
        .train
        .first()
        .map(|i| i.points.cols())
        .ok_or_else(|| Error::Domain("empty training split".into()))?;
    let mut model = Model::build(config, dim, &mut Rng::new(init_seed))?;
    let mut opt = RmsProp::new(tc.learning_rate, 0.9, 1e-8);
    let report = fit(&mut model, &mut opt, data, tc)?;
    Ok((model, report))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct LouoOptions {
    /// Users to leave out in turn; `None` means every user in the corpus.
    pub users: Option<Vec<u32>>,
    pub repetitions: usize,
    pub per_class: usize,
    /// Worker threads for independent runs; `None` lets rayon decide.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for LouoOptions {
    fn default() -> Self {
        LouoOptions {
            users: None,
            repetitions: 5,
            per_class: PER_CLASS,
            threads: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LouoRun {
    pub user: u32,
    pub repetition: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSummary {
    pub user: u32,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LouoSummary {
    pub config: String,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<LouoRun>,
    pub per_user: Vec<UserSummary>,
}

impl LouoSummary {
    pub fn write_runs_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,repetition,seed,test_accuracy,epochs,best_val_loss")?;
        for r in &self.runs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.user, r.repetition, r.seed, r.test_accuracy, r.epochs, r.best_val_loss
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "config,scope,mean,std,runs")?;
        writeln!(w, "{},all,{},{},{}", self.config, self.mean, self.std, self.runs.len())?;
        for u in &self.per_user {
            let n = self.runs.iter().filter(|r| r.user == u.user).count();
            writeln!(w, "{},user{},{},{},{}", self.config, u.user, u.mean, u.std, n)?;
        }
        Ok(())
    }
}

/// Seed for one (user, repetition) run and one purpose within it.
pub fn run_seed(base: u64, user: u32, repetition: usize, purpose: u64) -> u64 {
    derive_seed(base, &[user as u64, repetition as u64, purpose])
}

/// One leave-one-user-out run: split, train, test.
pub fn louo_run(
    config: &ModelConfig,
    corpus: &[Instance],
    tc: &TrainConfig,
    user: u32,
    repetition: usize,
    base_seed: u64,
    per_class: usize,
) -> Result<(LouoRun, RunReport)> {
    let seed = run_seed(base_seed, user, repetition, 0);
    let plan = make_louo_splits_with(corpus, user, seed, per_class)?;
    let data = SplitData::from_plan(corpus, &plan)?;
    let tc = TrainConfig {
        seed: run_seed(base_seed, user, repetition, 1),
        ..tc.clone()
    };
    let (_, report) = train_once(config, &data, &tc, run_seed(base_seed, user, repetition, 2))?;
    Ok((
        LouoRun {
            user,
            repetition,
            seed,
            test_accuracy: report.test_accuracy,
            epochs: report.epochs_run(),
            best_val_loss: report.best_val_loss,
        },
        report,
    ))
}

/// Leaves each user out in turn, `repetitions` times each, and aggregates
/// test accuracy.
pub fn evaluate_louo(config: &ModelConfig, corpus: &[Instance], tc: &TrainConfig, opts: &LouoOptions) -> Result<LouoSummary> {
    if corpus.is_empty() {
        return Err(Error::Domain("empty corpus".into()));
    }
    if class_count(corpus) > config.classes {
        return Err(Error::Config(format!(
            "corpus has labels up to {}, model has {} classes",
            class_count(corpus),
            config.classes
        )));
    }
    let users = match &opts.users {
        Some(u) => u.clone(),
        None => {
            let mut u: Vec<u32> = corpus.iter().map(|i| i.user_id).collect();
            u.sort_unstable();
            u.dedup();
            u
        }
    };
    let jobs: Vec<(u32, usize)> = users
        .iter()
        .flat_map(|&u| (0..opts.repetitions).map(move |r| (u, r)))
        .collect();
    let work = || -> Result<Vec<LouoRun>> {
        jobs.par_iter()
            .map(|&(u, r)| louo_run(config, corpus, tc, u, r, opts.seed, opts.per_class).map(|(run, _)| run))
            .collect()
    };
    let runs = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let per_user = users
        .iter()
        .map(|&u| {
            let a: Vec<f64> = runs.iter().filter(|r| r.user == u).map(|r| r.test_accuracy).collect();
            let (mean, std) = mean_std(&a);
            UserSummary { user: u, mean, std }
        })
        .collect();
    Ok(LouoSummary {
        config: config.label(),
        mean,
        std,
        runs,
        per_user,
    })
}
