//! Empirical, true and diametrical risk.
//!
//! The diametrical risk of `w` is the largest empirical risk over the closed
//! neighborhood `||v|| <= gamma`. Two estimators are provided: an exact 1-D
//! grid (uniform grid plus the loss breakpoints, exact for piecewise-linear
//! losses) and a sampled lower bound that maximizes over random points on the
//! sphere `||u|| = gamma`.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{DrmError, Result};
use crate::losses::{LossModel, Sample, SampleSource};
use crate::param::{sample_sphere, NormKind, ParamVector};
use crate::rng::DrmRng;

#[derive(Debug, Clone, PartialEq)]
pub enum RiskMethod {
    Exact,
    Grid { points: usize },
    Sampled { draws: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub value: f64,
    pub method: RiskMethod,
    pub gamma: f64,
    /// Maximizing perturbation, for sampled estimates.
    pub argmax: Option<ParamVector>,
}

pub(crate) fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

/// Mean loss over `samples`, summed in index order.
pub fn empirical_risk<M: LossModel + ?Sized>(model: &M, w: &ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(DrmError::Empty("dataset"));
    }
    model.batch_loss(w, &refs(samples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueRisk {
    pub value: f64,
    /// Standard error of a Monte-Carlo estimate; `None` when analytic.
    pub std_error: Option<f64>,
}

/// Sampling setup for a Monte-Carlo true risk.
pub struct MonteCarlo<'a> {
    pub n: usize,
    pub source: &'a dyn SampleSource,
    pub rng: &'a mut DrmRng,
}

/// Analytic true risk when the model has one, else the Monte-Carlo mean.
pub fn true_risk<M: LossModel + ?Sized>(model: &M, w: &ParamVector, mc: Option<MonteCarlo<'_>>) -> Result<TrueRisk> {
    if let Some(value) = model.true_risk(w) {
        return Ok(TrueRisk {
            value,
            std_error: None,
        });
    }
    match mc {
        Some(mc) => monte_carlo_risk(model, w, mc),
        None => Err(DrmError::TrueRiskUnavailable),
    }
}

/// Sample mean of `n` fresh losses and its standard error.
pub fn monte_carlo_risk<M: LossModel + ?Sized>(model: &M, w: &ParamVector, mc: MonteCarlo<'_>) -> Result<TrueRisk> {
    if mc.n < 2 {
        return Err(DrmError::InvalidConfig("Monte-Carlo risk needs n >= 2".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..mc.n {
        let z = mc.source.draw(mc.rng);
        let l = model.eval(w, &z)?;
        sum += l;
        sum_sq += l * l;
    }
    let n = mc.n as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(TrueRisk {
        value: mean,
        std_error: Some((var / n).sqrt()),
    })
}

/// Exact-by-enumeration diametrical risk of a scalar model at `w`: the
/// maximum of the empirical risk over `grid_points` uniform points on
/// `[w - gamma, w + gamma]` and every loss breakpoint inside that interval.
pub fn diametrical_risk_grid_1d<M: LossModel + ?Sized>(
    model: &M,
    w: f64,
    gamma: f64,
    samples: &[Sample],
    grid_points: usize,
) -> Result<RiskEstimate> {
    if model.template().num_params() != 1 {
        return Err(DrmError::ShapeMismatch("grid diametrical risk needs a scalar model".into()));
    }
    if grid_points < 3 {
        return Err(DrmError::InvalidConfig(format!("grid needs >= 3 points, got {grid_points}")));
    }
    if !(gamma >= 0.0) {
        return Err(DrmError::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(RiskEstimate {
            value: empirical_risk(model, &ParamVector::scalar(w), samples)?,
            method: RiskMethod::Exact,
            gamma,
            argmax: None,
        });
    }
    let (lo, hi) = (w - gamma, w + gamma);
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut points: Vec<f64> = (0..grid_points).map(|k| lo + k as f64 * step).collect();
    points[grid_points - 1] = hi;
    points.extend(model.breakpoints().into_iter().filter(|b| (lo..=hi).contains(b)));
    let mut best = f64::NEG_INFINITY;
    for x in points {
        best = best.max(empirical_risk(model, &ParamVector::scalar(x), samples)?);
    }
    Ok(RiskEstimate {
        value: best,
        method: RiskMethod::Grid { points: grid_points },
        gamma,
        argmax: None,
    })
}

/// Index and value of the largest batch risk at `w + u` over `candidates`;
/// ties go to the lowest index. Evaluations may run in parallel; the result
/// does not depend on scheduling.
pub fn argmax_perturbed_risk<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &[&Sample],
    candidates: &[ParamVector],
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(DrmError::Empty("candidate set"));
    }
    let risks = candidates
        .par_iter()
        .map(|u| model.batch_loss(&w.add(u)?, batch))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &r) in risks.iter().enumerate() {
        if r > risks[best] {
            best = i;
        }
    }
    Ok((best, risks[best]))
}

/// Draw `r` sphere perturbations in sequence from `rng`.
pub fn draw_perturbations<R: Rng + ?Sized>(
    template: &ParamVector,
    gamma: f64,
    kind: NormKind,
    r: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    (0..r).map(|_| sample_sphere(template, gamma, kind, rng)).collect()
}

/// Lower estimate of the diametrical risk: the largest batch risk over `r`
/// random points on the `gamma`-sphere around `w`.
pub fn diametrical_risk_sampled<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    gamma: f64,
    kind: NormKind,
    r: usize,
    batch: &[&Sample],
    rng: &mut DrmRng,
) -> Result<RiskEstimate> {
    if r == 0 {
        return Err(DrmError::InvalidConfig("need at least one draw".into()));
    }
    let draws = draw_perturbations(w, gamma, kind, r, rng)?;
    let (i, value) = argmax_perturbed_risk(model, w, batch, &draws)?;
    Ok(RiskEstimate {
        value,
        method: RiskMethod::Sampled { draws: r },
        gamma,
        argmax: draws.into_iter().nth(i),
    })
}

/// Distinct samples with multiplicities, in order of first appearance.
/// Lets the 1-D studies evaluate the empirical risk in O(#distinct).
#[derive(Debug, Clone)]
pub struct WeightedSamples {
    groups: Vec<(Sample, usize)>,
    total: usize,
}

impl WeightedSamples {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(DrmError::Empty("dataset"));
        }
        let mut index: HashMap<(usize, u64, Vec<u64>), usize> = HashMap::new();
        let mut groups: Vec<(Sample, usize)> = Vec::new();
        for z in samples {
            let key = (
                z.label,
                z.target.to_bits(),
                z.features.iter().map(|f| f.to_bits()).collect(),
            );
            match index.get(&key) {
                Some(&g) => groups[g].1 += 1,
                None => {
                    index.insert(key, groups.len());
                    groups.push((z.clone(), 1));
                }
            }
        }
        Ok(WeightedSamples {
            groups,
            total: samples.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn groups(&self) -> &[(Sample, usize)] {
        &self.groups
    }

    pub fn empirical_risk<M: LossModel + ?Sized>(&self, model: &M, w: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for (z, c) in &self.groups {
            total += *c as f64 * model.eval(w, z)?;
        }
        Ok(total / self.total as f64)
    }
}

/// Empirical and diametrical risk of a scalar model over an interval grid.
#[derive(Debug, Clone)]
pub struct RiskProfile1d {
    /// Grid over the parameter interval, `lo + j * step`.
    pub w: Vec<f64>,
    pub step: f64,
    pub empirical: Vec<f64>,
    pub diametrical: Vec<f64>,
}

/// Grid spacing used by [`diametrical_profile_1d`]: close to
/// `1 / points_per_unit`, adjusted so `gamma` is a whole number of cells.
pub fn profile_step(gamma: f64, points_per_unit: usize) -> (f64, usize) {
    let base = 1.0 / points_per_unit as f64;
    if gamma == 0.0 {
        return (base, 0);
    }
    let cells = (gamma * points_per_unit as f64).ceil().max(1.0) as usize;
    (gamma / cells as f64, cells)
}

/// Empirical and exact diametrical risk at every grid point of `[lo, hi]`.
///
/// The empirical risk is evaluated once on the grid extended by `gamma` on
/// both sides; the diametrical risk at `w_j` is the sliding-window maximum
/// over `[w_j - gamma, w_j + gamma]` together with any loss breakpoints in
/// that window. Grid points are `lo + j * step` up to and including `hi`
/// when `hi - lo` is a multiple of the step.
pub fn diametrical_profile_1d<M: LossModel + ?Sized>(
    model: &M,
    data: &WeightedSamples,
    lo: f64,
    hi: f64,
    gamma: f64,
    points_per_unit: usize,
) -> Result<RiskProfile1d> {
    if model.template().num_params() != 1 {
        return Err(DrmError::ShapeMismatch("profile needs a scalar model".into()));
    }
    if !(lo <= hi) || !(gamma >= 0.0) || points_per_unit == 0 {
        return Err(DrmError::InvalidConfig(format!(
            "bad profile setup: [{lo}, {hi}], gamma {gamma}, {points_per_unit} points/unit"
        )));
    }
    let (step, cells) = profile_step(gamma, points_per_unit);
    let n_w = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let n_ext = n_w + 2 * cells;
    let ext: Vec<f64> = (0..n_ext)
        .map(|i| lo + (i as f64 - cells as f64) * step)
        .collect();
    let ext_risk = ext
        .par_iter()
        .map(|&x| data.empirical_risk(model, &ParamVector::scalar(x)))
        .collect::<Result<Vec<f64>>>()?;
    let breaks: Vec<(f64, f64)> = model
        .breakpoints()
        .into_iter()
        .map(|b| Ok((b, data.empirical_risk(model, &ParamVector::scalar(b))?)))
        .collect::<Result<_>>()?;

    let window = 2 * cells + 1;
    let mut diametrical = Vec::with_capacity(n_w);
    let mut deque: VecDeque<usize> = VecDeque::new();
    for (i, &v) in ext_risk.iter().enumerate() {
        while deque.back().is_some_and(|&b| ext_risk[b] <= v) {
            deque.pop_back();
        }
        deque.push_back(i);
        if i + 1 >= window {
            let start = i + 1 - window;
            while deque.front().is_some_and(|&f| f < start) {
                deque.pop_front();
            }
            let mut best = ext_risk[*deque.front().expect("window nonempty")];
            let (a, b) = (ext[start], ext[i]);
            for &(bp, r) in &breaks {
                if a <= bp && bp <= b {
                    best = best.max(r);
                }
            }
            diametrical.push(best);
        }
    }
    Ok(RiskProfile1d {
        w: ext[cells..cells + n_w].to_vec(),
        step,
        empirical: ext_risk[cells..cells + n_w].to_vec(),
        diametrical,
    })
}
