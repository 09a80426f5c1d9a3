//! Stochastic gradient methods for the empirical and the diametrical risk.
//!
//! * [`sgd_erm_run`]: plain SGD, gradient at `w^t`.
//! * [`simple_sgd_drm_run`]: every iteration draws `r` sphere perturbations,
//!   keeps the one with the largest batch risk and steps along the gradient
//!   at `w^t + u*` (Simple-SGD-DRM).
//! * [`sgd_drm_run`]: as above but sampling happens only on scheduled
//!   iterations; selected perturbations go to a FIFO queue of capacity `q`
//!   and every iteration steps at the worst queue entry (SGD-DRM).
//!
//! All runs share batch order (one shuffle per epoch derived from the seed)
//! and project onto the feasible set after every update.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrmError, Result};
use crate::losses::{LossModel, Sample};
use crate::output::{csv_string, fmt_f64, fmt_opt};
use crate::param::{FeasibleSet, NormKind, ParamVector};
use crate::risk::{argmax_perturbed_risk, diametrical_risk_sampled, draw_perturbations, empirical_risk, refs};
use crate::rng::{stream_rng, DrmRng, STREAM_BATCH_BASE, STREAM_COIN, STREAM_EVAL, STREAM_PERTURB};

/// When SGD-DRM draws fresh perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingSchedule {
    /// After each iteration, sample again with this probability.
    Probability(f64),
    /// Sample on iterations `0, k, 2k, ...`.
    EveryK(usize),
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule::EveryK(5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    /// First iteration no longer covered by this phase.
    pub until: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrmConfig {
    /// Diametrical radius.
    pub gamma: f64,
    /// Perturbations drawn per sampling event.
    pub draws: usize,
    /// Capacity of the perturbation queue.
    pub queue_capacity: usize,
    #[serde(default)]
    pub sampling: SamplingSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    /// Piecewise-constant learning rate by iteration.
    pub lr_schedule: Vec<LrPhase>,
    pub norm_kind: NormKind,
    #[serde(default = "unbounded")]
    pub feasible: FeasibleSet,
    pub seed: u64,
    /// Draws for the per-epoch sampled diametrical risk on the training set;
    /// zero disables it.
    #[serde(default)]
    pub eval_draws: usize,
}

fn unbounded() -> FeasibleSet {
    FeasibleSet::Unbounded
}

impl DrmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DrmError::InvalidConfig(msg));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.draws == 0 {
            return bad("draws (r) must be >= 1".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity (q) must be >= 1".into());
        }
        match self.sampling {
            SamplingSchedule::Probability(p) if !(0.0..=1.0).contains(&p) => {
                return bad(format!("sampling probability must be in [0,1], got {p}"));
            }
            SamplingSchedule::EveryK(0) => return bad("sampling period must be >= 1".into()),
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.lr_schedule.is_empty() {
            return bad("lr_schedule is empty".into());
        }
        let mut prev = 0;
        for phase in &self.lr_schedule {
            if !(phase.rate > 0.0 && phase.rate.is_finite()) {
                return bad(format!("learning rates must be > 0, got {}", phase.rate));
            }
            if phase.until <= prev {
                return bad("lr_schedule phases must have increasing `until`".into());
            }
            prev = phase.until;
        }
        if prev < self.iterations {
            return bad(format!(
                "lr_schedule ends at iteration {prev} but the run has {} iterations",
                self.iterations
            ));
        }
        self.feasible.validate()
    }

    pub fn learning_rate(&self, t: usize) -> f64 {
        self.lr_schedule
            .iter()
            .find(|p| t < p.until)
            .or(self.lr_schedule.last())
            .map(|p| p.rate)
            .expect("validated schedule is nonempty")
    }

    /// Constant-rate convenience constructor.
    pub fn constant_lr(iterations: usize, rate: f64) -> Vec<LrPhase> {
        vec![LrPhase {
            until: iterations.max(1),
            rate,
        }]
    }
}

/// FIFO store of previously selected perturbations.
#[derive(Debug, Clone)]
pub struct PerturbQueue {
    entries: VecDeque<(usize, ParamVector)>,
    capacity: usize,
}

impl PerturbQueue {
    pub fn new(capacity: usize) -> Self {
        PerturbQueue {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    /// Append `v` (tagged with the iteration that produced it) and return
    /// the evicted oldest entry if the capacity was exceeded.
    pub fn push(&mut self, iteration: usize, v: ParamVector) -> Option<ParamVector> {
        self.entries.push_back((iteration, v));
        if self.entries.len() > self.capacity {
            self.entries.pop_front().map(|(_, v)| v)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries oldest first.
    pub fn entries(&self) -> Vec<ParamVector> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Iterations at which the current entries were inserted, oldest first.
    pub fn births(&self) -> Vec<usize> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_risk: f64,
    pub test_acc: Option<f64>,
    pub diam_risk_est: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    /// Fresh perturbations were drawn this iteration.
    pub sampled: bool,
    pub lr: f64,
    /// Batch risk at `w^t`.
    pub batch_risk: f64,
    /// Batch risk at the point where the gradient was taken.
    pub perturbed_batch_risk: f64,
    /// Filled on the last iteration of each epoch, after the update.
    pub epoch_metrics: Option<EpochMetrics>,
    /// Insertion iterations of the queue entries after this iteration.
    pub queue_births: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub records: Vec<IterRecord>,
    /// SHA-256 of the initial parameters.
    pub init_digest: String,
    /// SHA-256 of every batch index sequence used.
    pub batch_digest: String,
}

pub const TRACE_HEADER: [&str; 9] = [
    "iter",
    "epoch",
    "event",
    "lr",
    "batch_risk",
    "perturbed_batch_risk",
    "train_risk",
    "test_acc",
    "diam_risk_est",
];

impl RunTrace {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochMetrics> + '_ {
        self.records.iter().filter_map(|r| r.epoch_metrics.as_ref())
    }

    pub fn last_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs().last()
    }

    /// CSV with header `iter,epoch,event,lr,batch_risk,perturbed_batch_risk,
    /// train_risk,test_acc,diam_risk_est`; epoch columns are empty except on
    /// the last iteration of an epoch.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &TRACE_HEADER,
            self.records.iter().map(|r| {
                let m = r.epoch_metrics.as_ref();
                vec![
                    r.iter.to_string(),
                    r.epoch.to_string(),
                    u8::from(r.sampled).to_string(),
                    fmt_f64(r.lr),
                    fmt_f64(r.batch_risk),
                    fmt_f64(r.perturbed_batch_risk),
                    fmt_opt(m.map(|m| m.train_risk)),
                    fmt_opt(m.and_then(|m| m.test_acc)),
                    fmt_opt(m.and_then(|m| m.diam_risk_est)),
                ]
            }),
        )
    }
}

fn digest_params(w: &ParamVector) -> String {
    let mut h = Sha256::new();
    for l in w.layers() {
        h.update(l.name().as_bytes());
        for x in l.values() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Batches for one epoch: a uniform shuffle of `0..n` cut into chunks of
/// `batch_size` (the last one may be short), each chunk sorted ascending.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, STREAM_BATCH_BASE + epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Worst candidate perturbation on the batch; ties go to the lowest index.
pub fn select_worst<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &[&Sample],
    candidates: &[ParamVector],
) -> Result<(usize, ParamVector, f64)> {
    let (i, risk) = argmax_perturbed_risk(model, w, batch, candidates)?;
    Ok((i, candidates[i].clone(), risk))
}

/// `prj_W(w - lr * grad R_B(w + u))`, with `u = 0` when `None`. Returns the
/// new point and the batch risk at the gradient point.
pub fn perturbed_step<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &[&Sample],
    perturbation: Option<&ParamVector>,
    lr: f64,
    feasible: &FeasibleSet,
) -> Result<(ParamVector, f64)> {
    let (loss, grad) = match perturbation {
        Some(u) => model.batch_loss_and_grad(&w.add(u)?, batch)?,
        None => model.batch_loss_and_grad(w, batch)?,
    };
    let next = feasible.project(&w.axpy(-lr, &grad)?)?;
    Ok((next, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub params: ParamVector,
    /// Index of `u*` among the fresh draws.
    pub selected: usize,
    /// Batch risk at `w^t + u*`.
    pub selected_risk: f64,
}

/// One Simple-SGD-DRM iteration at learning rate `lr`.
pub fn simple_sgd_drm_step<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &[&Sample],
    cfg: &DrmConfig,
    lr: f64,
    rng: &mut DrmRng,
) -> Result<StepOutcome> {
    let draws = draw_perturbations(w, cfg.gamma, cfg.norm_kind, cfg.draws, rng)?;
    let (selected, u, _) = select_worst(model, w, batch, &draws)?;
    let (params, selected_risk) = perturbed_step(model, w, batch, Some(&u), lr, &cfg.feasible)?;
    Ok(StepOutcome {
        params,
        selected,
        selected_risk,
    })
}

/// Iteration bookkeeping shared by the three methods: batch order, epoch
/// boundaries and end-of-epoch evaluation.
struct Schedule<'a, M: LossModel + ?Sized> {
    model: &'a M,
    data: &'a [Sample],
    test: &'a [Sample],
    cfg: &'a DrmConfig,
    batches: Vec<Vec<usize>>,
    digest: Sha256,
    eval_rng: DrmRng,
}

impl<'a, M: LossModel + ?Sized> Schedule<'a, M> {
    fn new(model: &'a M, w0: &ParamVector, data: &'a [Sample], test: &'a [Sample], cfg: &'a DrmConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(DrmError::Empty("training set"));
        }
        model.template().check_compatible(w0)?;
        if !cfg.feasible.contains(w0) {
            return Err(DrmError::InvalidConfig("initial parameters lie outside the feasible set".into()));
        }
        Ok(Schedule {
            model,
            data,
            test,
            cfg,
            batches: Vec::new(),
            digest: Sha256::new(),
            eval_rng: stream_rng(cfg.seed, STREAM_EVAL),
        })
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    fn epoch(&self, t: usize) -> usize {
        t / self.batches_per_epoch()
    }

    fn batch(&mut self, t: usize) -> Vec<&'a Sample> {
        let nb = self.batches_per_epoch();
        if t % nb == 0 {
            self.batches = make_batches(self.data.len(), self.cfg.batch_size, self.cfg.seed, t / nb);
        }
        let idx = &self.batches[t % nb];
        for i in idx {
            self.digest.update((*i as u64).to_le_bytes());
        }
        self.digest.update(u64::MAX.to_le_bytes());
        let data = self.data;
        idx.iter().map(|&i| &data[i]).collect()
    }

    /// Metrics at `w` (the post-update iterate) if `t` closes an epoch.
    fn epoch_metrics(&mut self, t: usize, w: &ParamVector) -> Result<Option<EpochMetrics>> {
        let nb = self.batches_per_epoch();
        if (t + 1) % nb != 0 && t + 1 != self.cfg.iterations {
            return Ok(None);
        }
        let train_risk = empirical_risk(self.model, w, self.data)?;
        let test_acc = if self.test.is_empty() {
            None
        } else {
            self.model.accuracy(w, self.test).transpose()?
        };
        let diam_risk_est = if self.cfg.eval_draws > 0 {
            Some(
                diametrical_risk_sampled(
                    self.model,
                    w,
                    self.cfg.gamma,
                    self.cfg.norm_kind,
                    self.cfg.eval_draws,
                    &refs(self.data),
                    &mut self.eval_rng,
                )?
                .value,
            )
        } else {
            None
        };
        Ok(Some(EpochMetrics {
            epoch: self.epoch(t),
            train_risk,
            test_acc,
            diam_risk_est,
        }))
    }

    fn finish(self, w0: &ParamVector, records: Vec<IterRecord>) -> RunTrace {
        RunTrace {
            records,
            init_digest: digest_params(w0),
            batch_digest: hex::encode(self.digest.finalize()),
        }
    }
}

fn ensure_finite(t: usize, w: &ParamVector) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(DrmError::Diverged { iteration: t })
    }
}

/// Plain SGD on the empirical risk.
pub fn sgd_erm_run<M: LossModel + ?Sized>(
    model: &M,
    w0: &ParamVector,
    data: &[Sample],
    test: &[Sample],
    cfg: &DrmConfig,
) -> Result<(ParamVector, RunTrace)> {
    let mut sched = Schedule::new(model, w0, data, test, cfg)?;
    let mut w = w0.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let batch = sched.batch(t);
        let lr = cfg.learning_rate(t);
        let (next, loss) = perturbed_step(model, &w, &batch, None, lr, &cfg.feasible)?;
        ensure_finite(t, &next)?;
        w = next;
        records.push(IterRecord {
            iter: t,
            epoch: sched.epoch(t),
            sampled: false,
            lr,
            batch_risk: loss,
            perturbed_batch_risk: loss,
            epoch_metrics: sched.epoch_metrics(t, &w)?,
            queue_births: Vec::new(),
        });
    }
    Ok((w, sched.finish(w0, records)))
}

/// Simple-SGD-DRM: fresh perturbations every iteration, no queue.
pub fn simple_sgd_drm_run<M: LossModel + ?Sized>(
    model: &M,
    w0: &ParamVector,
    data: &[Sample],
    test: &[Sample],
    cfg: &DrmConfig,
) -> Result<(ParamVector, RunTrace)> {
    let mut sched = Schedule::new(model, w0, data, test, cfg)?;
    let mut perturb_rng = stream_rng(cfg.seed, STREAM_PERTURB);
    let mut w = w0.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let batch = sched.batch(t);
        let lr = cfg.learning_rate(t);
        let batch_risk = model.batch_loss(&w, &batch)?;
        let step = simple_sgd_drm_step(model, &w, &batch, cfg, lr, &mut perturb_rng)?;
        ensure_finite(t, &step.params)?;
        w = step.params;
        records.push(IterRecord {
            iter: t,
            epoch: sched.epoch(t),
            sampled: true,
            lr,
            batch_risk,
            perturbed_batch_risk: step.selected_risk,
            epoch_metrics: sched.epoch_metrics(t, &w)?,
            queue_births: vec![t],
        });
    }
    Ok((w, sched.finish(w0, records)))
}

/// SGD-DRM with a perturbation queue and intermittent sampling.
///
/// With `gamma == 0` the neighborhood is the single point `w`, so nothing is
/// ever sampled and the run coincides with [`sgd_erm_run`].
pub fn sgd_drm_run<M: LossModel + ?Sized>(
    model: &M,
    w0: &ParamVector,
    data: &[Sample],
    test: &[Sample],
    cfg: &DrmConfig,
) -> Result<(ParamVector, RunTrace)> {
    let mut sched = Schedule::new(model, w0, data, test, cfg)?;
    let mut perturb_rng = stream_rng(cfg.seed, STREAM_PERTURB);
    let mut coin_rng = stream_rng(cfg.seed, STREAM_COIN);
    let mut queue = PerturbQueue::new(cfg.queue_capacity);
    let mut w = w0.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let batch = sched.batch(t);
        let lr = cfg.learning_rate(t);
        let scheduled = match cfg.sampling {
            SamplingSchedule::EveryK(k) => t % k == 0,
            // Iteration 0 always samples; afterwards the coin decides.
            SamplingSchedule::Probability(p) => t == 0 || coin_rng.random::<f64>() < p,
        };
        let sampled = scheduled && cfg.gamma > 0.0;
        if sampled {
            let draws = draw_perturbations(&w, cfg.gamma, cfg.norm_kind, cfg.draws, &mut perturb_rng)?;
            let (_, u, _) = select_worst(model, &w, &batch, &draws)?;
            queue.push(t, u);
        }
        let (next, batch_risk, perturbed_batch_risk) = if queue.is_empty() {
            let (next, loss) = perturbed_step(model, &w, &batch, None, lr, &cfg.feasible)?;
            (next, loss, loss)
        } else {
            let entries = queue.entries();
            let (_, v, _) = select_worst(model, &w, &batch, &entries)?;
            let batch_risk = model.batch_loss(&w, &batch)?;
            let (next, loss) = perturbed_step(model, &w, &batch, Some(&v), lr, &cfg.feasible)?;
            (next, batch_risk, loss)
        };
        ensure_finite(t, &next)?;
        w = next;
        records.push(IterRecord {
            iter: t,
            epoch: sched.epoch(t),
            sampled,
            lr,
            batch_risk,
            perturbed_batch_risk,
            epoch_metrics: sched.epoch_metrics(t, &w)?,
            queue_births: queue.births(),
        });
    }
    Ok((w, sched.finish(w0, records)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ConstantLoss, QuadraticLoss, TentLoss};
    use crate::mlp::{Mlp, MlpSpec};
    use crate::risk::diametrical_risk_grid_1d;

    fn quad_cfg(gamma: f64, iterations: usize, lr: f64) -> DrmConfig {
        DrmConfig {
            gamma,
            draws: 4,
            queue_capacity: 1,
            sampling: SamplingSchedule::EveryK(1),
            iterations,
            batch_size: 100,
            lr_schedule: DrmConfig::constant_lr(iterations, lr),
            norm_kind: NormKind::Euclidean,
            feasible: FeasibleSet::Unbounded,
            seed: 1,
            eval_draws: 0,
        }
    }

    fn regression_data(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample::regression(vec![1.0 + 0.1 * (i % 3) as f64], 0.5 * (i % 5) as f64))
            .collect()
    }

    #[test]
    fn config_validation() {
        let good = quad_cfg(0.5, 10, 0.1);
        assert!(good.validate().is_ok());
        let mut c = good.clone();
        c.draws = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.queue_capacity = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.sampling = SamplingSchedule::Probability(1.5);
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.lr_schedule = DrmConfig::constant_lr(5, 0.1);
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.lr_schedule[0].rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = good;
        c.gamma = -1.0;
        let q = QuadraticLoss::new(1);
        assert!(matches!(
            sgd_drm_run(&q, &ParamVector::scalar(0.0), &regression_data(3), &[], &c),
            Err(DrmError::InvalidConfig(_))
        ));
    }

    #[test]
    fn learning_rate_schedule_is_piecewise_constant() {
        let mut c = quad_cfg(0.0, 10, 0.1);
        c.lr_schedule = vec![LrPhase { until: 6, rate: 0.01 }, LrPhase { until: 10, rate: 0.001 }];
        let rates: Vec<f64> = (0..10).map(|t| c.learning_rate(t)).collect();
        assert_eq!(&rates[..6], &[0.01; 6]);
        assert_eq!(&rates[6..], &[0.001; 4]);
    }

    #[test]
    fn batches_partition_the_data() {
        let b = make_batches(10, 20, 3, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0], (0..10).collect::<Vec<_>>());

        let b = make_batches(23, 5, 3, 4);
        assert_eq!(b.len(), 5);
        assert_eq!(b.last().unwrap().len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(b, make_batches(23, 5, 3, 4));
        assert_ne!(b, make_batches(23, 5, 3, 5));
    }

    #[test]
    fn select_worst_examples() {
        let q = QuadraticLoss::new(1);
        let z = [Sample::regression(vec![1.0], 0.0)];
        let batch: Vec<&Sample> = z.iter().collect();
        let w = ParamVector::scalar(0.0);
        let one = [ParamVector::scalar(0.3)];
        assert_eq!(select_worst(&q, &w, &batch, &one).unwrap().0, 0);
        let cands = [ParamVector::scalar(-1.0), ParamVector::scalar(0.5)];
        let (i, u, r) = select_worst(&q, &w, &batch, &cands).unwrap();
        assert_eq!((i, u.first(), r), (0, -1.0, 0.5));

        let c = ConstantLoss::new(2.0, ParamVector::scalar(0.0));
        let five: Vec<ParamVector> = (0..5).map(|i| ParamVector::scalar(i as f64)).collect();
        assert_eq!(select_worst(&c, &w, &batch, &five).unwrap().0, 0);
        assert!(select_worst(&c, &w, &batch, &[]).is_err());
    }

    #[test]
    fn single_step_examples() {
        let q = QuadraticLoss::new(1);
        let z = [Sample::regression(vec![1.0], 0.0)];
        let batch: Vec<&Sample> = z.iter().collect();
        let w = ParamVector::scalar(1.0);

        // Forced u* = +0.5: gradient at 1.5 is 1.5.
        let (next, _) = perturbed_step(&q, &w, &batch, Some(&ParamVector::scalar(0.5)), 0.1, &FeasibleSet::Unbounded).unwrap();
        assert!((next.first() - 0.85).abs() < 1e-15);

        // In 1-D the sphere is {-0.5, +0.5}; +0.5 has the larger risk.
        let mut cfg = quad_cfg(0.5, 1, 0.1);
        cfg.draws = 16;
        let out = simple_sgd_drm_step(&q, &w, &batch, &cfg, 0.1, &mut stream_rng(4, 0)).unwrap();
        assert!((out.params.first() - 0.85).abs() < 1e-15);
        assert_eq!(out.selected_risk, 0.5 * 1.5 * 1.5);

        // gamma = 0 is a plain SGD step.
        let cfg0 = quad_cfg(0.0, 1, 0.1);
        let out = simple_sgd_drm_step(&q, &w, &batch, &cfg0, 0.1, &mut stream_rng(4, 0)).unwrap();
        let (sgd, _) = perturbed_step(&q, &w, &batch, None, 0.1, &FeasibleSet::Unbounded).unwrap();
        assert_eq!(out.params, sgd);

        let c = ConstantLoss::new(3.0, ParamVector::scalar(0.0));
        let out = simple_sgd_drm_step(&c, &w, &batch, &cfg, 0.1, &mut stream_rng(4, 0)).unwrap();
        assert_eq!(out.params, w);
    }

    #[test]
    fn erm_matches_closed_form_recursion() {
        let q = QuadraticLoss::new(1);
        let data = vec![Sample::regression(vec![2.0], 3.0)];
        let (lr, a, b) = (0.05, 2.0, 3.0);
        let cfg = quad_cfg(0.0, 40, lr);
        let (w, trace) = sgd_erm_run(&q, &ParamVector::scalar(-1.0), &data, &[], &cfg).unwrap();
        let mut expect = -1.0f64;
        for _ in 0..40 {
            expect = (1.0 - lr * a * a) * expect + lr * a * b;
        }
        assert!((w.first() - expect).abs() < 1e-12);
        assert_eq!(trace.records.len(), 40);

        let c = ConstantLoss::new(1.0, ParamVector::scalar(0.0));
        let (w, _) = sgd_erm_run(&c, &ParamVector::scalar(0.7), &data, &[], &cfg).unwrap();
        assert_eq!(w.first(), 0.7);
    }

    #[test]
    fn iterates_stay_feasible() {
        let q = QuadraticLoss::new(2);
        let data: Vec<Sample> = (0..20)
            .map(|i| Sample::regression(vec![1.0, -(i as f64) / 10.0], 5.0))
            .collect();
        let sets = [
            FeasibleSet::Box { lo: -0.5, hi: 0.5 },
            FeasibleSet::EuclideanBall {
                center: ParamVector::from_flat(vec![0.1, 0.2]),
                radius: 0.3,
            },
        ];
        for set in sets {
            let mut cfg = quad_cfg(0.4, 60, 0.3);
            cfg.batch_size = 7;
            cfg.feasible = set.clone();
            cfg.sampling = SamplingSchedule::Probability(0.3);
            let w0 = ParamVector::from_flat(vec![0.1, 0.2]);
            for run in [sgd_erm_run, simple_sgd_drm_run, sgd_drm_run] {
                let (wf, trace) = run(&q, &w0, &data, &[], &cfg).unwrap();
                assert!(set.contains(&wf));
                assert_eq!(trace.records.len(), 60);
            }
        }
        let mut cfg = quad_cfg(0.4, 5, 0.3);
        cfg.feasible = FeasibleSet::Box { lo: 1.0, hi: 2.0 };
        assert!(sgd_drm_run(&q, &ParamVector::from_flat(vec![0.0, 0.0]), &data, &[], &cfg).is_err());
    }

    #[test]
    fn queue_is_bounded_fifo() {
        let mut q = PerturbQueue::new(2);
        assert!(q.push(0, ParamVector::scalar(0.0)).is_none());
        assert!(q.push(1, ParamVector::scalar(1.0)).is_none());
        assert_eq!(q.push(2, ParamVector::scalar(2.0)).unwrap().first(), 0.0);
        assert_eq!(q.births(), vec![1, 2]);
        assert_eq!(q.len(), 2);
    }

    fn tiny_mlp_problem() -> (Mlp, ParamVector, Vec<Sample>, Vec<Sample>) {
        let spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![5],
            num_classes: 3,
            seed: 9,
        };
        let model = Mlp::new(spec).unwrap();
        let w0 = model.init();
        let mut rng = stream_rng(2, 0);
        let mut gen = |n: usize| -> Vec<Sample> {
            (0..n)
                .map(|i| {
                    Sample::classified(
                        (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        i % 3,
                    )
                })
                .collect()
        };
        let train = gen(40);
        let test = gen(15);
        (model, w0, train, test)
    }

    fn mlp_cfg() -> DrmConfig {
        DrmConfig {
            gamma: 0.3,
            draws: 5,
            queue_capacity: 3,
            sampling: SamplingSchedule::EveryK(4),
            iterations: 200,
            batch_size: 7,
            lr_schedule: vec![LrPhase { until: 150, rate: 0.05 }, LrPhase { until: 200, rate: 0.01 }],
            norm_kind: NormKind::LayerwiseFrobenius,
            feasible: FeasibleSet::Unbounded,
            seed: 77,
            eval_draws: 3,
        }
    }

    #[test]
    fn queue_law_holds_during_a_run() {
        let (model, w0, train, test) = tiny_mlp_problem();
        let cfg = mlp_cfg();
        let (_, trace) = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
        assert_eq!(trace.records.len(), 200);
        let mut prev: Vec<usize> = Vec::new();
        for r in &trace.records {
            assert!(r.queue_births.len() <= 3);
            assert!(r.queue_births.windows(2).all(|p| p[0] < p[1]));
            assert_eq!(r.sampled, r.iter % 4 == 0);
            if r.sampled {
                // New entry appended; oldest dropped only when full.
                let mut expect = prev.clone();
                expect.push(r.iter);
                if expect.len() > 3 {
                    expect.remove(0);
                }
                assert_eq!(r.queue_births, expect);
            } else {
                assert_eq!(r.queue_births, prev);
            }
            prev = r.queue_births.clone();
        }
        assert!(trace.epochs().count() >= 30);
    }

    #[test]
    fn zero_radius_reduces_to_erm() {
        let (model, w0, train, test) = tiny_mlp_problem();
        let mut cfg = mlp_cfg();
        cfg.gamma = 0.0;
        for sampling in [SamplingSchedule::EveryK(3), SamplingSchedule::Probability(0.4)] {
            cfg.sampling = sampling;
            let (we, te) = sgd_erm_run(&model, &w0, &train, &test, &cfg).unwrap();
            let (wd, td) = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
            assert_eq!(we, wd);
            assert_eq!(te.to_csv().unwrap(), td.to_csv().unwrap());
        }
    }

    #[test]
    fn unit_queue_with_full_sampling_reduces_to_simple() {
        let (model, w0, train, test) = tiny_mlp_problem();
        let mut cfg = mlp_cfg();
        cfg.queue_capacity = 1;
        for sampling in [SamplingSchedule::EveryK(1), SamplingSchedule::Probability(1.0)] {
            cfg.sampling = sampling;
            let (ws, ts) = simple_sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
            let (wd, td) = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
            assert_eq!(ws, wd);
            assert_eq!(ts.to_csv().unwrap(), td.to_csv().unwrap());
            assert_eq!(ts.batch_digest, td.batch_digest);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (model, w0, train, test) = tiny_mlp_problem();
        let mut cfg = mlp_cfg();
        cfg.sampling = SamplingSchedule::Probability(0.3);
        let a = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
        let b = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_csv_layout() {
        let (model, w0, train, test) = tiny_mlp_problem();
        let mut cfg = mlp_cfg();
        cfg.iterations = 12;
        cfg.lr_schedule = DrmConfig::constant_lr(12, 0.1);
        let (_, trace) = sgd_drm_run(&model, &w0, &train, &test, &cfg).unwrap();
        let csv = trace.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,epoch,event,lr,batch_risk,perturbed_batch_risk,train_risk,test_acc,diam_risk_est");
        assert_eq!(lines.len(), 13);
        // 40 samples in batches of 7: six batches per epoch.
        let row5: Vec<&str> = lines[6].split(',').collect();
        assert_eq!(row5[..3], ["5", "0", "0"]);
        assert!(row5[6..].iter().all(|f| !f.is_empty()));
        let row4: Vec<&str> = lines[5].split(',').collect();
        assert_eq!(row4[2], "1");
        assert!(row4[6..].iter().all(|f| f.is_empty()));
    }

    #[test]
    fn drm_approaches_the_diametrical_minimizer_of_a_quadratic() {
        let q = QuadraticLoss::new(1);
        let data = regression_data(10);
        let gamma = 0.25;
        let mut cfg = quad_cfg(gamma, 2000, 0.01);
        cfg.batch_size = data.len();
        let (w, _) = simple_sgd_drm_run(&q, &ParamVector::scalar(4.0), &data, &[], &cfg).unwrap();
        let diam = |x: f64| diametrical_risk_grid_1d(&q, x, gamma, &data, 101).unwrap().value;
        let best = (0..=4000).map(|k| diam(-1.0 + k as f64 * 1e-3)).fold(f64::INFINITY, f64::min);
        assert!(diam(w.first()) <= best + 1e-3, "{} vs {best}", diam(w.first()));
        assert!(diam(4.0) > best + 1.0);
    }

    #[test]
    fn tent_drm_run_is_finite() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let data: Vec<Sample> = (0..9).map(|i| Sample::label_only(i % 2)).collect();
        let mut cfg = quad_cfg(0.5, 30, 0.01);
        cfg.feasible = FeasibleSet::Box { lo: -1.0, hi: 1.0 };
        let (w, _) = sgd_drm_run(&t, &ParamVector::scalar(0.1), &data, &[], &cfg).unwrap();
        assert!(w.is_finite());
    }

    #[test]
    fn divergence_is_an_error() {
        let q = QuadraticLoss::new(1);
        let data = regression_data(10);
        let cfg = quad_cfg(0.5, 500, 1e3);
        for run in [sgd_erm_run::<QuadraticLoss>, simple_sgd_drm_run, sgd_drm_run] {
            let err = run(&q, &ParamVector::scalar(1.0), &data, &[], &cfg).unwrap_err();
            assert!(matches!(err, DrmError::Diverged { iteration } if iteration < 500));
            assert!(!err.is_config_error());
        }
    }
}
