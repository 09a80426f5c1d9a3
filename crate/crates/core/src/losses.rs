//! Pointwise losses and the [`LossModel`] interface used by every risk and
//! optimizer routine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::param::ParamVector;
use crate::rng::DrmRng;

/// One data point `z`. Scalar fixtures use only `label`; regression fixtures
/// use `features` and `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(default)]
    pub target: f64,
}

impl Sample {
    pub fn label_only(label: usize) -> Self {
        Sample {
            features: Vec::new(),
            label,
            target: 0.0,
        }
    }

    pub fn regression(features: Vec<f64>, target: f64) -> Self {
        Sample {
            features,
            label: 0,
            target,
        }
    }

    pub fn classified(features: Vec<f64>, label: usize) -> Self {
        Sample {
            features,
            label,
            target: 0.0,
        }
    }
}

/// A loss `l(w, z)` together with its gradient in `w`.
///
/// The batch methods compute means in the order of `batch`; implementors
/// that override them must keep `batch_loss` and the loss returned by
/// `batch_loss_and_grad` bitwise identical.
pub trait LossModel: Sync {
    /// Parameter layout accepted by `eval` and `grad`.
    fn template(&self) -> &ParamVector;

    fn eval(&self, w: &ParamVector, z: &Sample) -> Result<f64>;

    fn grad(&self, w: &ParamVector, z: &Sample) -> Result<ParamVector>;

    /// Analytic true risk `E_z[l(w, z)]`, when known.
    fn true_risk(&self, _w: &ParamVector) -> Option<f64> {
        None
    }

    /// For scalar losses: points in `w` where the piecewise definition
    /// changes. The 1-D grid routines always evaluate these.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Whether `(w, z)` sits on a kink where `grad` is a one-sided choice.
    fn is_kink(&self, _w: &ParamVector, _z: &Sample) -> bool {
        false
    }

    fn batch_loss(&self, w: &ParamVector, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(DrmError::Empty("batch"));
        }
        let mut total = 0.0;
        for z in batch {
            total += self.eval(w, z)?;
        }
        Ok(total / batch.len() as f64)
    }

    fn batch_loss_and_grad(&self, w: &ParamVector, batch: &[&Sample]) -> Result<(f64, ParamVector)> {
        let loss = self.batch_loss(w, batch)?;
        let mut g = w.zeros_like();
        for z in batch {
            g.axpy_in_place(1.0, &self.grad(w, z)?)?;
        }
        Ok((loss, g.scale(1.0 / batch.len() as f64)))
    }

    /// Classification accuracy, for models that make class predictions.
    fn accuracy(&self, _w: &ParamVector, _data: &[Sample]) -> Option<Result<f64>> {
        None
    }
}

/// A distribution over samples, used for Monte-Carlo true risk and for
/// drawing datasets in the analysis studies.
pub trait SampleSource: Sync {
    fn draw(&self, rng: &mut DrmRng) -> Sample;
}

/// Labels 0 and 1 with probability one half each, no features.
#[derive(Debug, Clone, Copy, Default)]
pub struct FairCoin;

impl SampleSource for FairCoin {
    fn draw(&self, rng: &mut DrmRng) -> Sample {
        Sample::label_only(usize::from(rng.random::<bool>()))
    }
}

fn scalar_arg(template: &ParamVector, w: &ParamVector) -> Result<f64> {
    template.check_compatible(w)?;
    Ok(w.first())
}

/// Piecewise-linear "tent" loss with slope `kappa / gamma_loss`. Its true
/// risk is zero under a fair coin, while the empirical risk dips to
/// `rho_m * kappa / m` at the origin.
pub fn tent_eval(w: f64, z: usize, kappa: f64, gamma_loss: f64) -> f64 {
    let g = gamma_loss;
    if (-g..0.0).contains(&w) {
        match z {
            0 => kappa * w / g + kappa,
            1 => -kappa * w / g - kappa,
            _ => 0.0,
        }
    } else if (0.0..g).contains(&w) {
        match z {
            0 => -kappa * w / g + kappa,
            1 => kappa * w / g - kappa,
            _ => 0.0,
        }
    } else {
        0.0
    }
}

/// Right-hand derivative of [`tent_eval`] in `w`.
pub fn tent_slope(w: f64, z: usize, kappa: f64, gamma_loss: f64) -> f64 {
    let s = kappa / gamma_loss;
    let sign = match z {
        0 => 1.0,
        1 => -1.0,
        _ => return 0.0,
    };
    if (-gamma_loss..0.0).contains(&w) {
        sign * s
    } else if (0.0..gamma_loss).contains(&w) {
        -sign * s
    } else {
        0.0
    }
}

/// True risk of the tent loss under a fair coin: identically zero.
pub fn tent_true_risk(_w: f64) -> f64 {
    0.0
}

/// `1/w` for label 0 and `-1/w` for label 1 on `w > 0`, zero elsewhere.
pub fn reciprocal_eval(w: f64, z: usize) -> f64 {
    if w > 0.0 {
        match z {
            0 => 1.0 / w,
            1 => -1.0 / w,
            _ => 0.0,
        }
    } else {
        0.0
    }
}

pub fn reciprocal_slope(w: f64, z: usize) -> f64 {
    if w > 0.0 {
        match z {
            0 => -1.0 / (w * w),
            1 => 1.0 / (w * w),
            _ => 0.0,
        }
    } else {
        0.0
    }
}

/// Number of zero labels minus number of one labels.
pub fn rho_m<I>(labels: I) -> i64
where
    I: IntoIterator<Item = usize>,
{
    labels
        .into_iter()
        .map(|z| match z {
            0 => 1,
            1 => -1,
            _ => 0,
        })
        .sum()
}

/// `0.5 * (<a, w> - b)^2` with `a = z.features`, `b = z.target`.
pub fn quadratic_eval(w: &ParamVector, z: &Sample) -> Result<f64> {
    let r = quadratic_residual(w, z)?;
    Ok(0.5 * r * r)
}

fn quadratic_residual(w: &ParamVector, z: &Sample) -> Result<f64> {
    if z.features.len() != w.num_params() {
        return Err(DrmError::ShapeMismatch(format!(
            "feature length {} vs {} parameters",
            z.features.len(),
            w.num_params()
        )));
    }
    Ok(w.iter().zip(&z.features).map(|(a, b)| a * b).sum::<f64>() - z.target)
}

#[derive(Debug, Clone)]
pub struct TentLoss {
    kappa: f64,
    gamma_loss: f64,
    template: ParamVector,
}

impl TentLoss {
    pub fn new(kappa: f64, gamma_loss: f64) -> Result<Self> {
        if !(kappa > 1.0 && kappa.is_finite()) {
            return Err(DrmError::InvalidConfig(format!("tent loss needs kappa > 1, got {kappa}")));
        }
        if !(gamma_loss > 0.0 && gamma_loss < 1.0) {
            return Err(DrmError::InvalidConfig(format!(
                "tent loss needs gamma_loss in (0,1), got {gamma_loss}"
            )));
        }
        Ok(TentLoss {
            kappa,
            gamma_loss,
            template: ParamVector::scalar(0.0),
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn gamma_loss(&self) -> f64 {
        self.gamma_loss
    }

    /// Closed-form empirical risk `(rho_m/m) * (kappa - kappa|w|/gamma_loss)`
    /// on `[-gamma_loss, gamma_loss)`, zero elsewhere.
    pub fn empirical_risk_closed_form(&self, w: f64, rho: i64, m: usize) -> f64 {
        if (-self.gamma_loss..self.gamma_loss).contains(&w) {
            rho as f64 / m as f64 * (-self.kappa * w.abs() / self.gamma_loss + self.kappa)
        } else {
            0.0
        }
    }
}

impl LossModel for TentLoss {
    fn template(&self) -> &ParamVector {
        &self.template
    }

    fn eval(&self, w: &ParamVector, z: &Sample) -> Result<f64> {
        Ok(tent_eval(scalar_arg(&self.template, w)?, z.label, self.kappa, self.gamma_loss))
    }

    fn grad(&self, w: &ParamVector, z: &Sample) -> Result<ParamVector> {
        let x = scalar_arg(&self.template, w)?;
        Ok(ParamVector::scalar(tent_slope(x, z.label, self.kappa, self.gamma_loss)))
    }

    fn true_risk(&self, w: &ParamVector) -> Option<f64> {
        Some(tent_true_risk(w.first()))
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![-self.gamma_loss, 0.0, self.gamma_loss]
    }

    fn is_kink(&self, w: &ParamVector, _z: &Sample) -> bool {
        self.breakpoints().contains(&w.first())
    }
}

#[derive(Debug, Clone)]
pub struct ReciprocalLoss {
    template: ParamVector,
}

impl Default for ReciprocalLoss {
    fn default() -> Self {
        ReciprocalLoss {
            template: ParamVector::scalar(0.0),
        }
    }
}

impl ReciprocalLoss {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(rho_m/m) / w` for `w > 0`, zero elsewhere.
    pub fn empirical_risk_closed_form(&self, w: f64, rho: i64, m: usize) -> f64 {
        if w > 0.0 {
            rho as f64 / m as f64 / w
        } else {
            0.0
        }
    }
}

impl LossModel for ReciprocalLoss {
    fn template(&self) -> &ParamVector {
        &self.template
    }

    fn eval(&self, w: &ParamVector, z: &Sample) -> Result<f64> {
        Ok(reciprocal_eval(scalar_arg(&self.template, w)?, z.label))
    }

    fn grad(&self, w: &ParamVector, z: &Sample) -> Result<ParamVector> {
        Ok(ParamVector::scalar(reciprocal_slope(scalar_arg(&self.template, w)?, z.label)))
    }

    fn true_risk(&self, _w: &ParamVector) -> Option<f64> {
        Some(0.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn is_kink(&self, w: &ParamVector, _z: &Sample) -> bool {
        w.first() == 0.0
    }
}

/// Least-squares loss `0.5 * (<a, w> - b)^2`, convex in `w`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    template: ParamVector,
}

impl QuadraticLoss {
    pub fn new(dim: usize) -> Self {
        QuadraticLoss {
            template: ParamVector::from_flat(vec![0.0; dim]),
        }
    }
}

impl LossModel for QuadraticLoss {
    fn template(&self) -> &ParamVector {
        &self.template
    }

    fn eval(&self, w: &ParamVector, z: &Sample) -> Result<f64> {
        self.template.check_compatible(w)?;
        quadratic_eval(w, z)
    }

    fn grad(&self, w: &ParamVector, z: &Sample) -> Result<ParamVector> {
        self.template.check_compatible(w)?;
        let r = quadratic_residual(w, z)?;
        Ok(ParamVector::from_flat(z.features.iter().map(|a| r * a).collect()))
    }
}

/// A loss that ignores its arguments.
#[derive(Debug, Clone)]
pub struct ConstantLoss {
    value: f64,
    template: ParamVector,
}

impl ConstantLoss {
    pub fn new(value: f64, template: ParamVector) -> Self {
        ConstantLoss { value, template }
    }
}

impl LossModel for ConstantLoss {
    fn template(&self) -> &ParamVector {
        &self.template
    }

    fn eval(&self, w: &ParamVector, _z: &Sample) -> Result<f64> {
        self.template.check_compatible(w)?;
        Ok(self.value)
    }

    fn grad(&self, w: &ParamVector, _z: &Sample) -> Result<ParamVector> {
        self.template.check_compatible(w)?;
        Ok(w.zeros_like())
    }

    fn true_risk(&self, _w: &ParamVector) -> Option<f64> {
        Some(self.value)
    }
}

/// Largest relative error between `grad` and a central finite difference of
/// `eval`, over all coordinates. The denominator is floored at 1 so that
/// near-zero derivatives are compared absolutely.
pub fn finite_difference_error<M: LossModel + ?Sized>(
    model: &M,
    w: &ParamVector,
    z: &Sample,
    step: f64,
) -> Result<f64> {
    let g = model.grad(w, z)?.to_flat();
    let mut worst = 0.0f64;
    let n = w.num_params();
    for (i, gi) in g.iter().enumerate().take(n) {
        let mut plus = w.clone();
        let mut minus = w.clone();
        *plus.iter_mut().nth(i).unwrap() += step;
        *minus.iter_mut().nth(i).unwrap() -= step;
        let fd = (model.eval(&plus, z)? - model.eval(&minus, z)?) / (2.0 * step);
        worst = worst.max((fd - gi).abs() / fd.abs().max(gi.abs()).max(1.0));
    }
    Ok(worst)
}
