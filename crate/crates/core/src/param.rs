//! Layered parameter vectors, norms, sphere sampling and projection onto the
//! feasible set.
//!
//! A [`ParamVector`] is an ordered list of named real arrays. Whenever a
//! coordinate-indexed view is needed ("flattened" vector) the order is layer
//! order, then row-major within each layer.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DrmError, Result};

/// Maximum number of consecutive all-zero Gaussian draws tolerated by
/// [`sample_sphere`] before giving up.
pub const MAX_SPHERE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(DrmError::ShapeMismatch(format!(
                "layer `{name}` has shape {shape:?} ({expected} entries) but {} values",
                values.len()
            )));
        }
        Ok(Layer {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Layer {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn frobenius(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Model parameters (or a perturbation of them) as an ordered set of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Euclidean norm of the flattened vector.
    Euclidean,
    /// Max-abs norm of the flattened vector.
    Sup,
    /// Frobenius norm of each layer separately.
    LayerwiseFrobenius,
}

/// Result of [`ParamVector::norm`]: a single number, or one number per layer
/// for [`NormKind::LayerwiseFrobenius`].
#[derive(Debug, Clone, PartialEq)]
pub enum NormValue {
    Scalar(f64),
    PerLayer(Vec<f64>),
}

impl NormValue {
    /// Largest component; for a scalar norm this is the norm itself.
    pub fn max(&self) -> f64 {
        match self {
            NormValue::Scalar(v) => *v,
            NormValue::PerLayer(v) => v.iter().copied().fold(0.0, f64::max),
        }
    }
}

impl ParamVector {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(DrmError::ShapeMismatch(format!(
                    "duplicate layer name `{}`",
                    l.name
                )));
            }
        }
        Ok(ParamVector { layers })
    }

    /// One-layer vector named `w` holding `values` as a 1-D array.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let n = values.len();
        ParamVector {
            layers: vec![Layer {
                name: "w".into(),
                shape: vec![n],
                values,
            }],
        }
    }

    /// One-dimensional parameter used by the scalar loss fixtures.
    pub fn scalar(w: f64) -> Self {
        Self::from_flat(vec![w])
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.name.clone(), l.shape.clone()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.values.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// First coordinate; convenient for the scalar fixtures.
    pub fn first(&self) -> f64 {
        self.iter().next().copied().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&x| x == 0.0)
    }

    /// Errors unless `other` has the same layer names and shapes, in order.
    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(DrmError::ShapeMismatch(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.shape != b.shape {
                return Err(DrmError::ShapeMismatch(format!(
                    "layer `{}` {:?} vs layer `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// `self + alpha * d`.
    pub fn axpy(&self, alpha: f64, d: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy_in_place(alpha, d)?;
        Ok(out)
    }

    pub fn axpy_in_place(&mut self, alpha: f64, d: &ParamVector) -> Result<()> {
        self.check_compatible(d)?;
        for (x, y) in self.iter_mut().zip(d.iter()) {
            *x += alpha * y;
        }
        Ok(())
    }

    pub fn add(&self, d: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(d)?;
        let mut out = self.clone();
        for (x, y) in out.iter_mut().zip(d.iter()) {
            *x += y;
        }
        Ok(out)
    }

    pub fn sub(&self, d: &ParamVector) -> Result<ParamVector> {
        self.axpy(-1.0, d)
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.iter_mut().for_each(|x| *x *= alpha);
        out
    }

    pub fn norm(&self, kind: NormKind) -> NormValue {
        match kind {
            NormKind::Euclidean => NormValue::Scalar(self.euclidean_norm()),
            NormKind::Sup => NormValue::Scalar(self.iter().fold(0.0, |m, x| f64::max(m, x.abs()))),
            NormKind::LayerwiseFrobenius => {
                NormValue::PerLayer(self.layers.iter().map(Layer::frobenius).collect())
            }
        }
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn euclidean_distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Draw a perturbation with the shape of `template` and norm exactly `gamma`
/// (each layer has Frobenius norm `gamma` for [`NormKind::LayerwiseFrobenius`]).
///
/// Components are standard normal and then rescaled; a one-coordinate
/// sphere yields exactly `±gamma`. `gamma == 0` returns the
/// zero vector without consuming randomness.
pub fn sample_sphere<R: Rng + ?Sized>(
    template: &ParamVector,
    gamma: f64,
    kind: NormKind,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(DrmError::InvalidConfig(format!(
            "sphere radius must be finite and >= 0, got {gamma}"
        )));
    }
    let mut out = template.zeros_like();
    if gamma == 0.0 || out.num_params() == 0 {
        return Ok(out);
    }
    for _ in 0..MAX_SPHERE_ATTEMPTS {
        out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        match kind {
            NormKind::Euclidean | NormKind::Sup => {
                let n = out.norm(kind).max();
                if n > 0.0 {
                    out.iter_mut().for_each(|x| *x = gamma * (*x / n));
                    return Ok(out);
                }
            }
            NormKind::LayerwiseFrobenius => {
                let norms = match out.norm(kind) {
                    NormValue::PerLayer(v) => v,
                    NormValue::Scalar(_) => unreachable!(),
                };
                if norms.iter().all(|&n| n > 0.0) {
                    for (layer, n) in out.layers.iter_mut().zip(norms) {
                        layer.values.iter_mut().for_each(|x| *x = gamma * (*x / n));
                    }
                    return Ok(out);
                }
            }
        }
    }
    Err(DrmError::DegenerateDraw {
        attempts: MAX_SPHERE_ATTEMPTS,
    })
}

/// The set W of permissible parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeasibleSet {
    Unbounded,
    /// Every flattened coordinate in `[lo, hi]`.
    Box { lo: f64, hi: f64 },
    EuclideanBall { center: ParamVector, radius: f64 },
}

impl FeasibleSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Unbounded => Ok(()),
            FeasibleSet::Box { lo, hi } => {
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    Err(DrmError::InvalidConfig(format!(
                        "box requires lo <= hi, got [{lo}, {hi}]"
                    )))
                } else {
                    Ok(())
                }
            }
            FeasibleSet::EuclideanBall { radius, .. } => {
                if *radius >= 0.0 && radius.is_finite() {
                    Ok(())
                } else {
                    Err(DrmError::InvalidConfig(format!(
                        "ball radius must be finite and >= 0, got {radius}"
                    )))
                }
            }
        }
    }

    /// Exact membership test (no tolerance).
    pub fn contains(&self, w: &ParamVector) -> bool {
        match self {
            FeasibleSet::Unbounded => true,
            FeasibleSet::Box { lo, hi } => w.iter().all(|x| lo <= x && x <= hi),
            FeasibleSet::EuclideanBall { center, radius } => w
                .euclidean_distance(center)
                .map(|d| d <= *radius)
                .unwrap_or(false),
        }
    }

    /// Euclidean projection onto the set. Points already inside are returned
    /// unchanged, which makes the projection idempotent.
    pub fn project(&self, w: &ParamVector) -> Result<ParamVector> {
        match self {
            FeasibleSet::Unbounded => Ok(w.clone()),
            FeasibleSet::Box { lo, hi } => {
                let mut out = w.clone();
                out.iter_mut().for_each(|x| *x = x.clamp(*lo, *hi));
                Ok(out)
            }
            FeasibleSet::EuclideanBall { center, radius } => {
                let dist = w.euclidean_distance(center)?;
                if dist <= *radius {
                    return Ok(w.clone());
                }
                let offset = w.sub(center)?;
                let mut scale = radius / dist;
                // Rounding can leave the rescaled point a few ulps outside.
                loop {
                    let candidate = center.axpy(scale, &offset)?;
                    if self.contains(&candidate) {
                        return Ok(candidate);
                    }
                    scale *= 1.0 - 4.0 * f64::EPSILON;
                }
            }
        }
    }

    /// Euclidean diameter of the set restricted to vectors shaped like
    /// `template`; infinite when unbounded.
    pub fn diameter(&self, template: &ParamVector) -> f64 {
        match self {
            FeasibleSet::Unbounded => f64::INFINITY,
            FeasibleSet::Box { lo, hi } => (hi - lo) * (template.num_params() as f64).sqrt(),
            FeasibleSet::EuclideanBall { radius, .. } => 2.0 * radius,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for ParamVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let map: IndexMap<&str, LayerJson> = self
            .layers
            .iter()
            .map(|l| {
                (
                    l.name.as_str(),
                    LayerJson {
                        shape: l.shape.clone(),
                        data: l.values.clone(),
                    },
                )
            })
            .collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let map = IndexMap::<String, LayerJson>::deserialize(deserializer)?;
        let layers = map
            .into_iter()
            .map(|(name, l)| Layer::new(name, l.shape, l.data))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        if layers.iter().flat_map(|l| l.values.iter()).any(|x| !x.is_finite()) {
            return Err(serde::de::Error::custom("non-finite parameter value"));
        }
        ParamVector::new(layers).map_err(serde::de::Error::custom)
    }
}

impl ParamVector {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| DrmError::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| DrmError::io(path, e))?;
        Self::from_json(&s)
    }
}
