//! End-to-end label-noise comparison of SGD-ERM and SGD-DRM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{flatness_report, landscape_histogram, DirectionSet, FlatnessReport, Histogram};
use crate::data::{flip_labels, gen_gaussian_blobs_on, Dataset};
use crate::error::{DrmError, Result};
use crate::mlp::{Mlp, MlpSpec};
use crate::optimizer::{sgd_drm_run, sgd_erm_run, DrmConfig, LrPhase, RunTrace, SamplingSchedule};
use crate::output::write_file;
use crate::param::{FeasibleSet, NormKind, ParamVector};
use crate::risk::empirical_risk;
use crate::rng::{stream_rng, STREAM_DATA_TEST, STREAM_DATA_TRAIN, STREAM_NOISE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Only `gaussian_blobs` is available.
    pub generator: String,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    pub noise_frac: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub directions: usize,
    pub gamma: f64,
    pub kind: NormKind,
    pub bins: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: MlpSpec,
    pub optimizer: DrmConfig,
    pub landscape: LandscapeConfig,
}

impl ExperimentConfig {
    /// Three Gaussian blobs with half of the training labels flipped.
    pub fn label_noise_default() -> Self {
        let epochs = 2000;
        let n_train = 300;
        let batch_size = 30;
        let iterations = epochs * n_train / batch_size;
        let drop = iterations - iterations / 6;
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig {
                generator: "gaussian_blobs".into(),
                n_train,
                n_test: 1000,
                input_dim: 3,
                num_classes: 3,
                separation: 4.0,
                noise_frac: 0.5,
                seed: 0,
            },
            model: MlpSpec {
                input_dim: 3,
                hidden_dims: vec![64, 64, 32],
                num_classes: 3,
                seed: 0,
            },
            optimizer: DrmConfig {
                gamma: 2.0,
                draws: 20,
                queue_capacity: 1,
                sampling: SamplingSchedule::EveryK(5),
                iterations,
                batch_size,
                lr_schedule: vec![
                    LrPhase { until: drop, rate: 0.1 },
                    LrPhase {
                        until: iterations,
                        rate: 0.01,
                    },
                ],
                norm_kind: NormKind::LayerwiseFrobenius,
                feasible: FeasibleSet::Unbounded,
                seed: 0,
                eval_draws: 0,
            },
            landscape: LandscapeConfig {
                directions: 2000,
                gamma: 2.0,
                kind: NormKind::LayerwiseFrobenius,
                bins: 50,
                seed: 0,
            },
        }
    }

    /// Set every seed of the experiment from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.optimizer.seed = seed;
        self.landscape.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DrmError::InvalidConfig(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let d = &self.dataset;
        if d.generator != "gaussian_blobs" {
            return bad(format!("unknown dataset generator `{}`", d.generator));
        }
        if d.n_train == 0 || d.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if d.input_dim != self.model.input_dim || d.num_classes != self.model.num_classes {
            return bad("dataset and model disagree on input_dim or num_classes".into());
        }
        if self.landscape.directions == 0 || self.landscape.bins == 0 {
            return bad("landscape needs directions >= 1 and bins >= 1".into());
        }
        if !(self.landscape.gamma >= 0.0) {
            return bad("landscape gamma must be >= 0".into());
        }
        self.model.validate()?;
        self.optimizer.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| DrmError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Training data (with flipped labels) and clean test data.
pub fn make_data(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    let clean = gen_gaussian_blobs_on(
        cfg.num_classes,
        cfg.n_train,
        cfg.input_dim,
        cfg.separation,
        &mut stream_rng(cfg.seed, STREAM_DATA_TRAIN),
    )?;
    let train = flip_labels(&clean, cfg.noise_frac, &mut stream_rng(cfg.seed, STREAM_NOISE))?;
    let test = gen_gaussian_blobs_on(
        cfg.num_classes,
        cfg.n_test,
        cfg.input_dim,
        cfg.separation,
        &mut stream_rng(cfg.seed, STREAM_DATA_TEST),
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Empirical risk on the (noisy) training labels at the final iterate.
    pub final_train_risk: f64,
    pub min_train_risk: f64,
    pub final_test_acc: f64,
    pub peak_test_acc: f64,
    pub peak_epoch: usize,
    /// Training accuracy against the noisy and the original labels.
    pub train_acc_noisy: f64,
    pub train_acc_clean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub erm: MethodSummary,
    pub drm: MethodSummary,
    pub flatness: FlatnessReport,
    pub init_digest: String,
    pub batch_digest: String,
    pub noise_count: usize,
}

pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub erm_trace: RunTrace,
    pub drm_trace: RunTrace,
    pub erm_params: ParamVector,
    pub drm_params: ParamVector,
    pub hist_erm: Histogram,
    pub hist_drm: Histogram,
}

fn summarize(model: &Mlp, w: &ParamVector, trace: &RunTrace, train: &Dataset) -> Result<MethodSummary> {
    let epochs: Vec<_> = trace.epochs().collect();
    let last = epochs.last().ok_or(DrmError::Empty("training run"))?;
    let mut peak = (0, f64::NEG_INFINITY);
    for e in &epochs {
        let acc = e.test_acc.unwrap_or(f64::NAN);
        if acc > peak.1 {
            peak = (e.epoch, acc);
        }
    }
    let spec = model.spec();
    Ok(MethodSummary {
        final_train_risk: empirical_risk(model, w, &train.samples)?,
        min_train_risk: epochs.iter().map(|e| e.train_risk).fold(f64::INFINITY, f64::min),
        final_test_acc: last.test_acc.unwrap_or(f64::NAN),
        peak_test_acc: peak.1,
        peak_epoch: peak.0,
        train_acc_noisy: crate::mlp::accuracy(spec, w, &train.samples)?,
        train_acc_clean: crate::mlp::accuracy(spec, w, &train.with_original_labels().samples)?,
    })
}

/// Train SGD-ERM and SGD-DRM from the same initialization and batch order,
/// then compare their neighborhoods along shared directions.
pub fn run_label_noise_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, test) = make_data(&cfg.dataset)?;
    let model = Mlp::new(cfg.model.clone())?;
    let w0 = model.init();
    let (erm_params, erm_trace) = sgd_erm_run(&model, &w0, &train.samples, &test.samples, &cfg.optimizer)?;
    let (drm_params, drm_trace) = sgd_drm_run(&model, &w0, &train.samples, &test.samples, &cfg.optimizer)?;
    assert_eq!(erm_trace.init_digest, drm_trace.init_digest, "runs must share w0");
    assert_eq!(erm_trace.batch_digest, drm_trace.batch_digest, "runs must share batches");

    let l = &cfg.landscape;
    let dirs = DirectionSet::new(l.seed, l.directions, l.gamma, l.kind);
    let hist_erm = landscape_histogram(&model, &erm_params, &train.samples, &dirs, l.bins)?;
    let hist_drm = landscape_histogram(&model, &drm_params, &train.samples, &dirs, l.bins)?;
    let flatness = flatness_report(&hist_erm, &hist_drm)?;

    let summary = ExperimentSummary {
        erm: summarize(&model, &erm_params, &erm_trace, &train)?,
        drm: summarize(&model, &drm_params, &drm_trace, &train)?,
        flatness,
        init_digest: erm_trace.init_digest.clone(),
        batch_digest: erm_trace.batch_digest.clone(),
        noise_count: train.noise_count(),
    };
    Ok(ExperimentOutcome {
        summary,
        erm_trace,
        drm_trace,
        erm_params,
        drm_params,
        hist_erm,
        hist_drm,
    })
}

impl ExperimentOutcome {
    /// Traces, checkpoints, histograms, the config and `summary.json`.
    pub fn write(&self, cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_file(dir.join("config.json"), cfg.to_json()?)?;
        write_file(dir.join("erm_trace.csv"), self.erm_trace.to_csv()?)?;
        write_file(dir.join("drm_trace.csv"), self.drm_trace.to_csv()?)?;
        self.erm_params.save(dir.join("erm_final.json"))?;
        self.drm_params.save(dir.join("drm_final.json"))?;
        write_file(dir.join("hist_erm.csv"), self.hist_erm.to_csv()?)?;
        write_file(dir.join("hist_drm.csv"), self.hist_drm.to_csv()?)?;
        write_file(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)
    }
}
