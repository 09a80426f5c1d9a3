//! Empirical checks of the generalization behavior of the diametrical risk
//! and landscape diagnostics around trained solutions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::losses::{rho_m, LossModel, Sample, SampleSource};
use crate::output::{csv_string, fmt_f64};
use crate::param::{sample_sphere, NormKind, ParamVector};
use crate::risk::{diametrical_profile_1d, empirical_risk, RiskProfile1d, WeightedSamples};
use crate::rng::{stream_rng, trial_stream, DrmRng, STREAM_DIRECTION_BASE};

/// Default grid resolution for the 1-D studies.
pub const DEFAULT_POINTS_PER_UNIT: usize = 4096;
/// Floor applied to quantiles before taking logs in the slope fit.
pub const EPS_FLOOR: f64 = 1e-12;
pub const MIN_TRIALS: usize = 30;

/// A reproducible set of sphere directions. Direction `i` is drawn from its
/// own stream, so any subset can be regenerated without storing the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub seed: u64,
    pub count: usize,
    pub gamma: f64,
    pub kind: NormKind,
}

impl DirectionSet {
    pub fn new(seed: u64, count: usize, gamma: f64, kind: NormKind) -> Self {
        DirectionSet {
            seed,
            count,
            gamma,
            kind,
        }
    }

    /// A fresh set whose seed is taken from `rng`.
    pub fn fresh(count: usize, gamma: f64, kind: NormKind, rng: &mut DrmRng) -> Self {
        use rand::Rng;
        Self::new(rng.random(), count, gamma, kind)
    }

    pub fn direction(&self, template: &ParamVector, i: usize) -> Result<ParamVector> {
        let mut rng = stream_rng(self.seed, STREAM_DIRECTION_BASE + i as u64);
        sample_sphere(template, self.gamma, self.kind, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `R_m(w + u_i)` in direction order.
    pub values: Vec<f64>,
    /// `counts.len() + 1` edges; bin `k` is `[edges[k], edges[k+1])`, the
    /// last bin closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `R_m(w)` at the center.
    pub reference: f64,
    pub directions: DirectionSet,
}

impl Histogram {
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest risk over the sampled directions and the center itself.
    pub fn max_with_reference(&self) -> f64 {
        self.max_value().max(self.reference)
    }

    /// Metadata rows prefixed `#`, a `value` header, then one value per line.
    pub fn to_csv(&self) -> Result<String> {
        let d = &self.directions;
        let mut out = String::new();
        out.push_str(&format!("# reference,{}\n", fmt_f64(self.reference)));
        out.push_str(&format!("# gamma,{}\n", fmt_f64(d.gamma)));
        out.push_str(&format!("# norm,{}\n", serde_json::to_value(d.kind)?.as_str().unwrap_or("")));
        out.push_str(&format!("# direction_seed,{}\n", d.seed));
        out.push_str(&format!("# count,{}\n", d.count));
        out.push_str(&format!(
            "# edges,{}\n",
            self.edges.iter().map(|e| fmt_f64(*e)).collect::<Vec<_>>().join(";")
        ));
        out.push_str(&format!(
            "# counts,{}\n",
            self.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
        ));
        out.push_str(&csv_string(&["value"], self.values.iter().map(|v| vec![fmt_f64(*v)]))?);
        Ok(out)
    }
}

/// Equal-width bins between the smallest and largest value.
pub fn bin_values(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(lo < hi) || bins <= 1 {
        return (vec![lo, hi], vec![values.len()]);
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|k| lo + k as f64 * width).collect();
    edges.push(hi);
    let mut counts = vec![0; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        // Guard against rounding putting v just outside its bin.
        let k = if v < edges[k] { k - 1 } else if k + 1 < bins && v >= edges[k + 1] { k + 1 } else { k };
        counts[k] += 1;
    }
    (edges, counts)
}

/// Empirical risk at `w + u_i` for every direction of `dirs`.
pub fn landscape_histogram<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    data: &[Sample],
    dirs: &DirectionSet,
    bins: usize,
) -> Result<Histogram> {
    if dirs.count == 0 {
        return Err(DrmError::InvalidConfig("landscape needs at least one direction".into()));
    }
    model.template().check_compatible(w)?;
    let reference = empirical_risk(model, w, data)?;
    let values = (0..dirs.count)
        .into_par_iter()
        .map(|i| empirical_risk(model, &w.add(&dirs.direction(w, i)?)?, data))
        .collect::<Result<Vec<f64>>>()?;
    let (edges, counts) = bin_values(&values, bins);
    Ok(Histogram {
        values,
        edges,
        counts,
        reference,
        directions: *dirs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub reference: f64,
    pub max_risk: f64,
    pub gap: f64,
}

impl Flatness {
    fn of(h: &Histogram) -> Self {
        let max_risk = h.max_value();
        Flatness {
            reference: h.reference,
            max_risk,
            gap: max_risk - h.reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flatter {
    Erm,
    Drm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub erm: Flatness,
    pub drm: Flatness,
    /// Which solution has the strictly smaller gap, if either.
    pub flatter: Option<Flatter>,
}

pub fn flatness_report(erm: &Histogram, drm: &Histogram) -> Result<FlatnessReport> {
    if erm.directions != drm.directions {
        return Err(DrmError::DirectionMismatch);
    }
    let (e, d) = (Flatness::of(erm), Flatness::of(drm));
    let flatter = if d.gap < e.gap {
        Some(Flatter::Drm)
    } else if e.gap < d.gap {
        Some(Flatter::Erm)
    } else {
        None
    };
    Ok(FlatnessReport {
        erm: e,
        drm: d,
        flatter,
    })
}

/// `sup_{a in A} inf_{b in B} ||a - b||`; zero for empty `A`, infinite for
/// nonempty `A` and empty `B`. Layerwise norms use the largest layer.
pub fn excess(a: &[ParamVector], b: &[ParamVector], kind: NormKind) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    if b.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0.0f64;
    for x in a {
        let mut nearest = f64::INFINITY;
        for y in b {
            nearest = nearest.min(x.sub(y)?.norm(kind).max());
        }
        worst = worst.max(nearest);
    }
    Ok(worst)
}

/// [`excess`] for scalars with `b` sorted ascending.
pub fn excess_1d(a: &[f64], b_sorted: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if b_sorted.is_empty() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for &x in a {
        let i = b_sorted.partition_point(|&y| y < x);
        let mut nearest = f64::INFINITY;
        if i < b_sorted.len() {
            nearest = b_sorted[i] - x;
        }
        if i > 0 {
            nearest = nearest.min(x - b_sorted[i - 1]);
        }
        worst = worst.max(nearest);
    }
    worst
}

/// Order statistic `ceil(p * n)` (1-based) of the sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// A closed interval of admissible scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(DrmError::InvalidConfig(format!("bad interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn diameter(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Radius used at sample size `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Fixed(f64),
    /// `gamma = c / m`.
    InverseM(f64),
}

impl GammaMode {
    pub fn at(&self, m: usize) -> f64 {
        match *self {
            GammaMode::Fixed(g) => g,
            GammaMode::InverseM(c) => c / m as f64,
        }
    }
}

fn true_risk_1d<M: LossModel + ?Sized>(model: &M, w: &[f64]) -> Result<Vec<f64>> {
    w.iter()
        .map(|&x| model.true_risk(&ParamVector::scalar(x)).ok_or(DrmError::TrueRiskUnavailable))
        .collect()
}

fn check_scalar<M: LossModel + ?Sized>(model: &M) -> Result<()> {
    if model.template().num_params() != 1 {
        return Err(DrmError::ShapeMismatch("1-D study needs a scalar model".into()));
    }
    model.true_risk(model.template()).ok_or(DrmError::TrueRiskUnavailable)?;
    Ok(())
}

fn draw_dataset<S: SampleSource + ?Sized>(source: &S, m: usize, seed: u64, trial: usize) -> Vec<Sample> {
    let mut rng = stream_rng(seed, trial_stream(m, trial));
    (0..m).map(|_| source.draw(&mut rng)).collect()
}

/// Profile of one drawn dataset of size `m` over `w_set`.
fn trial_profile<M: LossModel + ?Sized, S: SampleSource + ?Sized>(
    model: &M,
    source: &S,
    w_set: Interval,
    gamma: f64,
    m: usize,
    points_per_unit: usize,
    seed: u64,
    trial: usize,
) -> Result<(Vec<Sample>, RiskProfile1d)> {
    let data = draw_dataset(source, m, seed, trial);
    let weighted = WeightedSamples::new(&data)?;
    let profile = diametrical_profile_1d(model, &weighted, w_set.lo, w_set.hi, gamma, points_per_unit)?;
    Ok((data, profile))
}

/// Index of the smallest value, lowest index on ties.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `max_j { R(w_j) - R_m^gamma(w_j) }` over the grid.
fn sup_gap(truth: &[f64], profile: &RiskProfile1d) -> f64 {
    truth
        .iter()
        .zip(&profile.diametrical)
        .map(|(r, d)| r - d)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub m: usize,
    pub trials: usize,
    pub gamma: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    /// `(1 - alpha)`-quantile of the sup-gap.
    pub q_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub alpha: f64,
    pub records: Vec<RateRecord>,
    /// Least-squares slope of `log max(q_alpha, EPS_FLOOR)` on `log m` over
    /// records with `q_alpha > 0`; `None` with fewer than two such records.
    pub slope: Option<f64>,
    /// Every quantile was `<= 0`: the gap never became positive.
    pub all_nonpositive: bool,
}

impl RateStudyResult {
    /// Fitted coefficient `beta` in `q_m ~ beta * m^slope`, from the largest m.
    pub fn beta(&self) -> Option<f64> {
        let last = self.records.iter().rev().find(|r| r.q_alpha > 0.0)?;
        Some(last.q_alpha * (last.m as f64).powf(-self.slope?))
    }

    /// Columns `m,trials,q05,q50,q95,slope` after `#` metadata rows.
    pub fn to_csv(&self) -> Result<String> {
        let slope = self.slope.map(fmt_f64).unwrap_or_default();
        let mut out = format!(
            "# alpha,{}\n# eps_floor,{}\n# beta,{}\n# note,beta is the fitted quantile coefficient and stands in for the constants of both the rate and the confidence-region bounds\n",
            fmt_f64(self.alpha),
            fmt_f64(EPS_FLOOR),
            self.beta().map(fmt_f64).unwrap_or_default(),
        );
        out.push_str(&csv_string(
            &["m", "trials", "q05", "q50", "q95", "slope"],
            self.records.iter().map(|r| {
                vec![
                    r.m.to_string(),
                    r.trials.to_string(),
                    fmt_f64(r.q05),
                    fmt_f64(r.q50),
                    fmt_f64(r.q95),
                    slope.clone(),
                ]
            }),
        )?);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub w_set: Interval,
    pub gamma: GammaMode,
    pub m_list: Vec<usize>,
    pub trials: usize,
    pub alpha: f64,
    pub points_per_unit: usize,
    pub seed: u64,
}

impl RateStudy {
    fn validate(&self) -> Result<()> {
        if self.trials < MIN_TRIALS {
            return Err(DrmError::InvalidConfig(format!(
                "rate study needs at least {MIN_TRIALS} trials, got {}",
                self.trials
            )));
        }
        if self.m_list.is_empty() || self.m_list.windows(2).any(|p| p[0] >= p[1]) || self.m_list[0] == 0 {
            return Err(DrmError::InvalidConfig("m_list must be nonempty, positive and strictly increasing".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DrmError::InvalidConfig(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Sup-gaps `G_m` of every trial, in trial order.
pub fn sup_gaps<M: LossModel + ?Sized, S: SampleSource + ?Sized>(
    model: &M,
    source: &S,
    w_set: Interval,
    gamma: f64,
    m: usize,
    trials: usize,
    points_per_unit: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_scalar(model)?;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let (_, profile) = trial_profile(model, source, w_set, gamma, m, points_per_unit, seed, t)?;
            Ok(sup_gap(&true_risk_1d(model, &profile.w)?, &profile))
        })
        .collect()
}

/// Monte-Carlo quantiles of `G_m = max_w { R(w) - R_m^gamma(w) }` over
/// independent datasets for each `m`, and their log-log decay rate.
pub fn rate_study<M: LossModel + ?Sized, S: SampleSource + ?Sized>(
    model: &M,
    source: &S,
    study: &RateStudy,
) -> Result<RateStudyResult> {
    study.validate()?;
    let mut records = Vec::with_capacity(study.m_list.len());
    for &m in &study.m_list {
        let gamma = study.gamma.at(m);
        let mut gaps = sup_gaps(model, source, study.w_set, gamma, m, study.trials, study.points_per_unit, study.seed)?;
        gaps.sort_by(f64::total_cmp);
        records.push(RateRecord {
            m,
            trials: study.trials,
            gamma,
            q05: quantile(&gaps, 0.05),
            q50: quantile(&gaps, 0.5),
            q95: quantile(&gaps, 0.95),
            q_alpha: quantile(&gaps, 1.0 - study.alpha),
        });
    }
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.q_alpha > 0.0)
        .map(|r| ((r.m as f64).ln(), r.q_alpha.max(EPS_FLOOR).ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    let all_nonpositive = records.iter().all(|r| r.q_alpha <= 0.0);
    Ok(RateStudyResult {
        alpha: study.alpha,
        records,
        slope,
        all_nonpositive,
    })
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStudy {
    pub w_set: Interval,
    pub gamma: f64,
    /// Level `delta` of the true-risk level set.
    pub delta: f64,
    pub m: usize,
    pub trials: usize,
    pub points_per_unit: usize,
    pub seed: u64,
    /// Slack values to test, ascending.
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePoint {
    pub epsilon: f64,
    /// Both excesses within `gamma` plus one grid cell.
    pub pass_rate: f64,
    pub level_pass_rate: f64,
    pub argmin_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceResult {
    pub points: Vec<ConfidencePoint>,
    /// Trials in which a right-hand level set was empty while the left one
    /// was not, summed over all epsilons.
    pub empty_level_sets: usize,
    /// The true-risk level set `{R <= delta}` is empty on the grid.
    pub empty_true_level_set: bool,
    pub grid_step: f64,
}

impl ConfidenceResult {
    /// Columns `epsilon,pass_rate`.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["epsilon", "pass_rate"],
            self.points.iter().map(|p| vec![fmt_f64(p.epsilon), fmt_f64(p.pass_rate)]),
        )
    }
}

/// The two excesses for one dataset at slack `eps`:
/// `exs({R <= delta}; {R_m <= delta + eps})` and
/// `exs(argmin R; {R_m <= min R_m^gamma + 2 eps})`, all sets on the grid.
pub fn confidence_excesses(
    w: &[f64],
    truth: &[f64],
    profile: &RiskProfile1d,
    delta: f64,
    eps: f64,
) -> (f64, f64) {
    let level: Vec<f64> = select(w, truth, |r| r <= delta);
    let level_m: Vec<f64> = select(w, &profile.empirical, |r| r <= delta + eps);
    let min_truth = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin_truth: Vec<f64> = select(w, truth, |r| r <= min_truth + 1e-12 * (1.0 + min_truth.abs()));
    let min_diam = profile.diametrical.iter().copied().fold(f64::INFINITY, f64::min);
    let near_opt: Vec<f64> = select(w, &profile.empirical, |r| r <= min_diam + 2.0 * eps);
    (excess_1d(&level, &level_m), excess_1d(&argmin_truth, &near_opt))
}

fn select(w: &[f64], values: &[f64], keep: impl Fn(f64) -> bool) -> Vec<f64> {
    w.iter().zip(values).filter(|(_, &v)| keep(v)).map(|(&x, _)| x).collect()
}

/// Fraction of trials in which both confidence-region excesses are at most
/// `gamma` (plus one grid cell), for each slack value. All slacks share the
/// same datasets.
pub fn confidence_region_check<M: LossModel + ?Sized, S: SampleSource + ?Sized>(
    model: &M,
    source: &S,
    study: &ConfidenceStudy,
) -> Result<ConfidenceResult> {
    check_scalar(model)?;
    if study.trials == 0 || study.epsilons.is_empty() {
        return Err(DrmError::InvalidConfig("need at least one trial and one epsilon".into()));
    }
    if !(study.gamma > 0.0) {
        return Err(DrmError::InvalidConfig("confidence check needs gamma > 0".into()));
    }
    let per_trial = (0..study.trials)
        .into_par_iter()
        .map(|t| {
            let (_, profile) =
                trial_profile(model, source, study.w_set, study.gamma, study.m, study.points_per_unit, study.seed, t)?;
            let truth = true_risk_1d(model, &profile.w)?;
            let tol = study.gamma + profile.step * (1.0 + 1e-9);
            let level_empty = truth.iter().all(|&r| r > study.delta);
            let mut out = Vec::with_capacity(study.epsilons.len());
            for &eps in &study.epsilons {
                let (e1, e2) = confidence_excesses(&profile.w, &truth, &profile, study.delta, eps);
                out.push((e1 <= tol, e2 <= tol, e1.is_infinite() || e2.is_infinite()));
            }
            Ok((out, level_empty, profile.step))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = study.trials as f64;
    let points = study
        .epsilons
        .iter()
        .enumerate()
        .map(|(k, &epsilon)| {
            let count = |f: &dyn Fn(&(bool, bool, bool)) -> bool| per_trial.iter().filter(|(o, _, _)| f(&o[k])).count() as f64;
            ConfidencePoint {
                epsilon,
                pass_rate: count(&|o| o.0 && o.1) / n,
                level_pass_rate: count(&|o| o.0) / n,
                argmin_pass_rate: count(&|o| o.1) / n,
            }
        })
        .collect();
    let empty_level_sets = per_trial.iter().map(|(o, _, _)| o.iter().filter(|x| x.2).count()).sum();
    Ok(ConfidenceResult {
        points,
        empty_level_sets,
        empty_true_level_set: per_trial.first().is_some_and(|p| p.1),
        grid_step: per_trial.first().map_or(0.0, |p| p.2),
    })
}

/// ERM and DRM grid minimizers of one dataset and their generalization gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub trial: usize,
    pub rho: i64,
    pub erm_w: f64,
    /// `R(w_erm) - R_m(w_erm)`.
    pub erm_gap: f64,
    pub drm_w: f64,
    /// `R(w_drm) - R_m^gamma(w_drm)`.
    pub drm_gap: f64,
}

/// Grid minimizers of `R_m` and `R_m^gamma` over `w_set` for `trials`
/// datasets of size `m` (binary labels), with their gaps to the true risk.
pub fn gap_table<M: LossModel + ?Sized, S: SampleSource + ?Sized>(
    model: &M,
    source: &S,
    w_set: Interval,
    gamma: f64,
    m: usize,
    trials: usize,
    points_per_unit: usize,
    seed: u64,
) -> Result<Vec<GapRow>> {
    check_scalar(model)?;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let (data, p) = trial_profile(model, source, w_set, gamma, m, points_per_unit, seed, t)?;
            let truth = true_risk_1d(model, &p.w)?;
            let (ie, id) = (argmin(&p.empirical), argmin(&p.diametrical));
            Ok(GapRow {
                trial: t,
                rho: rho_m(data.iter().map(|z| z.label)),
                erm_w: p.w[ie],
                erm_gap: truth[ie] - p.empirical[ie],
                drm_w: p.w[id],
                drm_gap: truth[id] - p.diametrical[id],
            })
        })
        .collect()
}

/// Smallest empirical risk over the given points, with its location.
pub fn grid_minimum<M: LossModel + ?Sized>(model: &M, data: &[Sample], points: &[f64]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(DrmError::Empty("grid"));
    }
    let weighted = WeightedSamples::new(data)?;
    let risks = points
        .iter()
        .map(|&x| weighted.empirical_risk(model, &ParamVector::scalar(x)))
        .collect::<Result<Vec<f64>>>()?;
    let i = argmin(&risks);
    Ok((points[i], risks[i]))
}

/// Draw the dataset used by trial `trial` of a 1-D study at size `m`.
pub fn study_dataset<S: SampleSource + ?Sized>(source: &S, m: usize, seed: u64, trial: usize) -> Vec<Sample> {
    draw_dataset(source, m, seed, trial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ConstantLoss, FairCoin, QuadraticLoss, ReciprocalLoss, TentLoss};
    use crate::risk::diametrical_risk_grid_1d;
    use proptest::prelude::*;

    fn pts(xs: &[f64]) -> Vec<ParamVector> {
        xs.iter().map(|&x| ParamVector::scalar(x)).collect()
    }

    #[test]
    fn excess_examples() {
        let a = pts(&[0.0, 5.0]);
        assert_eq!(excess(&a, &a, NormKind::Euclidean).unwrap(), 0.0);
        assert_eq!(excess(&pts(&[0.0]), &[], NormKind::Euclidean).unwrap(), f64::INFINITY);
        assert_eq!(excess(&[], &pts(&[1.0]), NormKind::Euclidean).unwrap(), 0.0);
        assert_eq!(excess(&[], &[], NormKind::Euclidean).unwrap(), 0.0);
        assert_eq!(excess(&a, &pts(&[3.0]), NormKind::Euclidean).unwrap(), 3.0);
        assert_eq!(excess_1d(&[0.0, 5.0], &[3.0]), 3.0);
        assert_eq!(excess_1d(&[0.0], &[]), f64::INFINITY);
        let p = [ParamVector::from_flat(vec![0.0, 0.0])];
        let q = [ParamVector::from_flat(vec![3.0, 4.0])];
        assert_eq!(excess(&p, &q, NormKind::Euclidean).unwrap(), 5.0);
        assert_eq!(excess(&p, &q, NormKind::Sup).unwrap(), 4.0);
        assert!(excess(&p, &pts(&[1.0]), NormKind::Euclidean).is_err());
    }

    fn point_set(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), 1..8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn excess_triangle(a in point_set(2), b in point_set(2), c in point_set(2)) {
            let to = |s: &Vec<Vec<f64>>| s.iter().map(|v| ParamVector::from_flat(v.clone())).collect::<Vec<_>>();
            let (a, b, c) = (to(&a), to(&b), to(&c));
            let ab = excess(&a, &b, NormKind::Euclidean).unwrap();
            let ac = excess(&a, &c, NormKind::Euclidean).unwrap();
            let cb = excess(&c, &b, NormKind::Euclidean).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn fast_excess_matches_double_loop(
            a in prop::collection::vec(-5.0..5.0f64, 0..20),
            b in prop::collection::vec(-5.0..5.0f64, 0..20),
        ) {
            let mut sorted = b.clone();
            sorted.sort_by(f64::total_cmp);
            let slow = excess(&pts(&a), &pts(&b), NormKind::Euclidean).unwrap();
            prop_assert_eq!(excess_1d(&a, &sorted), slow);
        }
    }

    #[test]
    fn histogram_examples() {
        let w = ParamVector::from_flat(vec![0.3, -1.0]);
        let c = ConstantLoss::new(1.25, w.zeros_like());
        let data = [Sample::label_only(0)];
        let dirs = DirectionSet::new(3, 10_000, 0.7, NormKind::Euclidean);
        let h = landscape_histogram(&c, &w, &data, &dirs, 50).unwrap();
        assert!(h.values.iter().all(|&v| v == 1.25));
        assert_eq!(h.reference, 1.25);
        assert_eq!(h.counts.iter().sum::<usize>(), 10_000);

        let q = QuadraticLoss::new(1);
        let data = [Sample::regression(vec![1.0], 0.0)];
        let w0 = ParamVector::scalar(0.0);
        let h = landscape_histogram(&q, &w0, &data, &DirectionSet::new(5, 200, 1.0, NormKind::Euclidean), 10).unwrap();
        assert!(h.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let grid = diametrical_risk_grid_1d(&q, 0.0, 1.0, &data, 101).unwrap().value;
        assert!((h.max_value() - grid).abs() < 1e-15);
        assert_eq!(h.reference, 0.0);
    }

    #[test]
    fn histogram_bins_cover_all_values() {
        let mut rng = stream_rng(8, 0);
        use rand::Rng;
        let values: Vec<f64> = (0..5000).map(|_| rng.random_range(-3.0..7.0)).collect();
        let (edges, counts) = bin_values(&values, 37);
        assert_eq!(edges.len(), 38);
        assert_eq!(counts.iter().sum::<usize>(), 5000);
        for (k, &n) in counts.iter().enumerate() {
            let last = k == counts.len() - 1;
            let inside = values
                .iter()
                .filter(|&&v| v >= edges[k] && (v < edges[k + 1] || (last && v <= edges[k + 1])))
                .count();
            assert_eq!(inside, n);
        }
    }

    #[test]
    fn shared_directions_reproduce_draws() {
        let w = ParamVector::from_flat(vec![0.0; 4]);
        let d = DirectionSet::new(11, 5, 2.0, NormKind::Euclidean);
        assert_eq!(d.direction(&w, 3).unwrap(), d.direction(&w, 3).unwrap());
        assert_ne!(d.direction(&w, 3).unwrap(), d.direction(&w, 4).unwrap());
        assert!((d.direction(&w, 0).unwrap().euclidean_norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flatness_examples() {
        let w = ParamVector::scalar(0.0);
        let q = QuadraticLoss::new(1);
        let data = [Sample::regression(vec![1.0], 0.2)];
        let dirs = DirectionSet::new(1, 100, 0.5, NormKind::Euclidean);
        let h = landscape_histogram(&q, &w, &data, &dirs, 10).unwrap();
        let r = flatness_report(&h, &h).unwrap();
        assert_eq!(r.erm, r.drm);
        assert_eq!(r.flatter, None);

        let c = ConstantLoss::new(2.0, w.clone());
        let hc = landscape_histogram(&c, &w, &data, &dirs, 10).unwrap();
        let r = flatness_report(&h, &hc).unwrap();
        assert_eq!(r.drm.gap, 0.0);
        assert_eq!(r.flatter, Some(Flatter::Drm));
        assert!(h.max_with_reference() >= h.reference);

        let other = landscape_histogram(&q, &w, &data, &DirectionSet::new(2, 100, 0.5, NormKind::Euclidean), 10).unwrap();
        assert!(matches!(flatness_report(&h, &other), Err(DrmError::DirectionMismatch)));
    }

    #[test]
    fn quantile_is_an_order_statistic() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.95), 19.0);
        assert_eq!(quantile(&v, 0.05), 1.0);
        assert_eq!(quantile(&v, 0.5), 10.0);
        assert_eq!(quantile(&v, 1.0), 20.0);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [10.0f64, 100.0, 1000.0].iter().map(|&m| (m.ln(), (3.0 * m.powf(-0.5)).ln())).collect();
        assert!((least_squares_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(least_squares_slope(&pts[..1]), None);
    }

    fn study(w_set: Interval, gamma: f64, m_list: Vec<usize>, trials: usize) -> RateStudy {
        RateStudy {
            w_set,
            gamma: GammaMode::Fixed(gamma),
            m_list,
            trials,
            alpha: 0.05,
            points_per_unit: 512,
            seed: 21,
        }
    }

    #[test]
    fn tent_gap_is_never_positive_when_gamma_covers_the_tent() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let w_set = Interval::new(-1.0, 1.0).unwrap();
        for gamma in [0.5, 0.75] {
            let gaps = sup_gaps(&t, &FairCoin, w_set, gamma, 101, 60, 512, 4).unwrap();
            assert!(gaps.iter().all(|&g| g <= 0.0));
        }
        let res = rate_study(&t, &FairCoin, &study(w_set, 0.5, vec![50, 200], 40)).unwrap();
        assert!(res.all_nonpositive);
        assert_eq!(res.slope, None);
        for r in &res.records {
            assert!(r.q05 <= r.q50 && r.q50 <= r.q95);
        }
    }

    #[test]
    fn tent_gap_matches_closed_form() {
        // With gamma < gamma_loss the sup-gap is |rho| kappa (1 - gamma/gamma_loss) / m
        // when rho < 0 and zero otherwise.
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let w_set = Interval::new(-1.0, 1.0).unwrap();
        let gaps = sup_gaps(&t, &FairCoin, w_set, 0.25, 200, 40, 1024, 6).unwrap();
        for (trial, g) in gaps.iter().enumerate() {
            let rho = rho_m(study_dataset(&FairCoin, 200, 6, trial).iter().map(|z| z.label));
            let expect = (-rho).max(0) as f64 * 2.0 * 0.5 / 200.0;
            assert!((g - expect).abs() < 1e-12, "trial {trial}: {g} vs {expect}");
        }
    }

    #[test]
    fn reciprocal_quantiles_decrease() {
        let r = ReciprocalLoss::new();
        let res = rate_study(&r, &FairCoin, &study(Interval::new(0.5, 2.0).unwrap(), 0.5, vec![100, 400, 1600], 200)).unwrap();
        let q: Vec<f64> = res.records.iter().map(|r| r.q95).collect();
        assert!(q.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!(q.windows(2).all(|p| p[1] < p[0]), "{q:?}");
        assert!(res.beta().unwrap() > 0.0);
        let csv = res.to_csv().unwrap();
        assert!(csv.lines().any(|l| l == "m,trials,q05,q50,q95,slope"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }

    #[test]
    fn rate_study_rejects_few_trials() {
        let r = ReciprocalLoss::new();
        let err = rate_study(&r, &FairCoin, &study(Interval::new(0.5, 2.0).unwrap(), 0.5, vec![100], 10));
        assert!(matches!(err, Err(DrmError::InvalidConfig(_))));
        let err = rate_study(&r, &FairCoin, &study(Interval::new(0.5, 2.0).unwrap(), 0.5, vec![100, 100], 40));
        assert!(err.is_err());
        let q = QuadraticLoss::new(1);
        assert!(matches!(
            sup_gaps(&q, &FairCoin, Interval::new(0.0, 1.0).unwrap(), 0.1, 10, 30, 64, 0),
            Err(DrmError::TrueRiskUnavailable)
        ));
    }

    #[test]
    fn inverse_m_gamma_mode() {
        assert_eq!(GammaMode::InverseM(50.0).at(100), 0.5);
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let mut s = study(Interval::new(-1.0, 1.0).unwrap(), 0.0, vec![100, 200], 30);
        s.gamma = GammaMode::InverseM(50.0);
        let res = rate_study(&t, &FairCoin, &s).unwrap();
        assert_eq!(res.records[1].gamma, 0.25);
    }

    fn conf(gamma: f64, delta: f64, epsilons: Vec<f64>) -> ConfidenceStudy {
        ConfidenceStudy {
            w_set: Interval::new(-1.0, 1.0).unwrap(),
            gamma,
            delta,
            m: 200,
            trials: 40,
            points_per_unit: 512,
            seed: 13,
            epsilons,
        }
    }

    #[test]
    fn confidence_trivial_cases() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let res = confidence_region_check(&t, &FairCoin, &conf(0.25, 10.0, vec![0.0, 0.01])).unwrap();
        assert!(res.points.iter().all(|p| p.level_pass_rate == 1.0));
        let res = confidence_region_check(&t, &FairCoin, &conf(2.0, 0.0, vec![0.0, 0.01])).unwrap();
        assert!(res.points.iter().all(|p| p.pass_rate == 1.0));
        assert!(!res.empty_true_level_set);
        let res = confidence_region_check(&t, &FairCoin, &conf(0.25, -1.0, vec![0.0])).unwrap();
        assert!(res.empty_true_level_set);
        assert_eq!(res.points[0].level_pass_rate, 1.0);
    }

    #[test]
    fn confidence_pass_rate_is_monotone_in_epsilon() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let eps: Vec<f64> = (0..12).map(|k| k as f64 * 0.02).collect();
        let res = confidence_region_check(&t, &FairCoin, &conf(0.25, 0.0, eps)).unwrap();
        let rates: Vec<f64> = res.points.iter().map(|p| p.pass_rate).collect();
        assert!(rates.windows(2).all(|p| p[0] <= p[1]), "{rates:?}");
        assert!(rates[0] < 1.0 && *rates.last().unwrap() == 1.0, "{rates:?}");
        let csv = res.to_csv().unwrap();
        assert_eq!(csv.lines().next(), Some("epsilon,pass_rate"));
    }

    #[test]
    fn confidence_excesses_match_generic_excess() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let data = study_dataset(&FairCoin, 51, 2, 0);
        let p = diametrical_profile_1d(&t, &WeightedSamples::new(&data).unwrap(), -1.0, 1.0, 0.25, 64).unwrap();
        let truth = true_risk_1d(&t, &p.w).unwrap();
        for eps in [0.0, 0.01, 0.03] {
            let (e1, e2) = confidence_excesses(&p.w, &truth, &p, 0.0, eps);
            let a = pts(&p.w);
            let b: Vec<ParamVector> = p.w.iter().zip(&p.empirical).filter(|(_, &r)| r <= eps).map(|(&x, _)| ParamVector::scalar(x)).collect();
            assert_eq!(e1, excess(&a, &b, NormKind::Euclidean).unwrap());
            let dmin = p.diametrical.iter().copied().fold(f64::INFINITY, f64::min);
            let b2: Vec<ParamVector> = p.w.iter().zip(&p.empirical).filter(|(_, &r)| r <= dmin + 2.0 * eps).map(|(&x, _)| ParamVector::scalar(x)).collect();
            assert_eq!(e2, excess(&a, &b2, NormKind::Euclidean).unwrap());
        }
    }

    #[test]
    fn level_sets_nest_under_the_quantile_slack() {
        // {R_m^gamma <= delta} lies in {R <= delta + q} whenever G_m <= q.
        let r = ReciprocalLoss::new();
        let w_set = Interval::new(0.5, 2.0).unwrap();
        let (m, trials) = (300, 100);
        let mut gaps = sup_gaps(&r, &FairCoin, w_set, 0.5, m, trials, 256, 17).unwrap();
        gaps.sort_by(f64::total_cmp);
        let q = quantile(&gaps, 0.95);
        let mut held = 0;
        for t in 0..trials {
            let data = study_dataset(&FairCoin, m, 17, t);
            let p = diametrical_profile_1d(&r, &WeightedSamples::new(&data).unwrap(), 0.5, 2.0, 0.5, 256).unwrap();
            let ok = [-0.01, 0.0, 0.01].iter().all(|&delta| {
                p.diametrical.iter().all(|&d| d > delta || 0.0 <= delta + q)
            });
            held += usize::from(ok);
        }
        assert!(held as f64 >= 0.95 * trials as f64);
    }

    #[test]
    fn gap_table_tent_examples() {
        let t = TentLoss::new(2.0, 0.5).unwrap();
        let rows = gap_table(&t, &FairCoin, Interval::new(-1.0, 1.0).unwrap(), 0.5, 100, 50, 512, 3).unwrap();
        for row in &rows {
            assert!(row.drm_gap <= 0.0);
            let expect = (-row.rho).max(0) as f64 * 2.0 / 100.0;
            assert!((row.erm_gap - expect).abs() < 1e-12);
            if row.rho < 0 {
                assert_eq!(row.erm_w, 0.0);
            }
        }
        assert!(rows.iter().any(|r| r.erm_gap > 0.0));
    }

    #[test]
    fn reciprocal_minimum_is_unbounded() {
        let r = ReciprocalLoss::new();
        let data: Vec<Sample> = [1, 1, 0].iter().map(|&z| Sample::label_only(z)).collect();
        let grid: Vec<f64> = (0..10).map(|k| 10f64.powi(-k)).collect();
        let (w, v) = grid_minimum(&r, &data, &grid).unwrap();
        assert_eq!(w, 1e-9);
        assert!(v < -1e8);
    }
}
