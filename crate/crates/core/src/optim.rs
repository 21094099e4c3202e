//! Adam and the per-pair registration driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{gradient, GradientMode, RegistrationProblem};
use crate::error::{Error, Result};
use crate::flow::{face_mask, FlowConfig, Retention};
use crate::grid::{make_identity_grid, warp, Image, Shape, VoxelCloud};
use crate::objective::{LossConfig, LossReport};
use crate::smoothing::GaussianKernel;
use crate::velocity::{NeuralFieldSpec, TimeMode, VelocityModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam moments must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Neural,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub iterations: usize,
    /// Defaults to 1e-3 for neural fields and 1e-1 for tensor fields.
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gradient: GradientMode,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 250,
            learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gradient: GradientMode::Adjoint,
            seed: 0,
        }
    }
}

/// Everything that determines one registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub field: FieldType,
    pub network: NeuralFieldSpec,
    pub time_mode: TimeMode,
    pub flow: FlowConfig,
    pub kernel_radius: usize,
    pub kernel_sigma: f64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub fix_boundary: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            field: FieldType::Neural,
            network: NeuralFieldSpec::default(),
            time_mode: TimeMode::TimeInjected,
            flow: FlowConfig::default(),
            kernel_radius: 2,
            kernel_sigma: 1.0,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            fix_boundary: false,
        }
    }
}

impl RegistrationConfig {
    pub fn learning_rate(&self) -> f64 {
        self.optim.learning_rate.unwrap_or(match self.field {
            FieldType::Neural => 1e-3,
            FieldType::Tensor => 1e-1,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate(),
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.loss.validate()?;
        self.adam().validate()?;
        if self.optim.iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        Ok(())
    }

    pub fn kernel(&self, ndim: usize) -> Result<GaussianKernel> {
        GaussianKernel::new(self.kernel_radius, self.kernel_sigma, ndim)
    }

    /// Untrained model for `shape`. A time-dependent tensor field holds one
    /// block per integration step.
    pub fn build_model(&self, shape: &Shape) -> Result<VelocityModel> {
        match self.field {
            FieldType::Neural => {
                VelocityModel::neural(shape, self.network.clone(), self.time_mode, self.flow.horizon)
            }
            FieldType::Tensor => {
                let blocks = match self.time_mode {
                    TimeMode::Autonomous => 1,
                    TimeMode::TimeInjected => self.flow.steps,
                };
                VelocityModel::tensor(shape, blocks, self.flow.horizon)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Trained model holding `θ*`.
    pub model: VelocityModel,
    pub deformation: VoxelCloud,
    pub warped: Image,
    /// Loss before each update, then one record for `θ*`.
    pub log: Vec<IterationRecord>,
}

impl RegistrationResult {
    pub fn params(&self) -> &[f64] {
        self.model.params()
    }

    pub fn final_report(&self) -> &LossReport {
        &self.log.last().expect("log is never empty").report
    }
}

/// Warps `moving` onto `fixed` by optimizing the velocity model with Adam.
pub fn register(fixed: &Image, moving: &Image, config: &RegistrationConfig) -> Result<RegistrationResult> {
    register_with(fixed, moving, config, |_| {})
}

/// [`register`], calling `observe` with each log record as it is produced.
pub fn register_with(
    fixed: &Image,
    moving: &Image,
    config: &RegistrationConfig,
    mut observe: impl FnMut(&IterationRecord),
) -> Result<RegistrationResult> {
    if fixed.shape() != moving.shape() {
        return Err(Error::mismatch(fixed.shape(), moving.shape()));
    }
    config.validate()?;
    let shape = fixed.shape();
    let kernel = config.kernel(shape.ndim())?;
    let mut model = config.build_model(shape)?;
    let mut params = model.init_params(config.optim.seed);
    let q0 = make_identity_grid(shape);
    let mask = config.fix_boundary.then(|| face_mask(shape));
    let flow = FlowConfig {
        retention: Retention::Full,
        ..config.flow
    };
    let mut adam = Adam::new(config.adam(), params.len());
    let mut log = Vec::with_capacity(config.optim.iterations + 1);
    let start = Instant::now();

    let mut record = |iter: usize, report: LossReport, log: &mut Vec<IterationRecord>| {
        let r = IterationRecord {
            iter,
            report,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observe(&r);
        log.push(r);
    };

    for iter in 0..config.optim.iterations {
        model.set_params(params.clone())?;
        let problem = RegistrationProblem {
            model: &model,
            kernel: &kernel,
            q0: &q0,
            flow: &flow,
            fixed,
            moving,
            loss: &config.loss,
            mask: mask.as_deref(),
        };
        let diverged = |_| Error::OptimizationDiverged {
            iteration: iter,
            last_finite: params.clone(),
        };
        let (grad, report) = gradient(&problem, config.optim.gradient).map_err(|e| match e {
            Error::Divergence { .. } | Error::NonFinite(_) => diverged(()),
            other => other,
        })?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(()));
        }
        record(iter, report, &mut log);
        let mut next = params.clone();
        adam.step(&mut next, &grad);
        if next.iter().any(|p| !p.is_finite()) {
            return Err(diverged(()));
        }
        params = next;
    }

    model.set_params(params.clone())?;
    let problem = RegistrationProblem {
        model: &model,
        kernel: &kernel,
        q0: &q0,
        flow: &flow,
        fixed,
        moving,
        loss: &config.loss,
        mask: mask.as_deref(),
    };
    let iterations = config.optim.iterations;
    let failed = |e: Error| match e {
        Error::Divergence { .. } => Error::OptimizationDiverged {
            iteration: iterations,
            last_finite: params.clone(),
        },
        other => other,
    };
    let report = problem.loss_report().map_err(failed)?;
    let deformation = problem.deformation().map_err(failed)?;
    record(iterations, report, &mut log);
    let warped = warp(moving, &deformation)?;
    Ok(RegistrationResult {
        model,
        deformation,
        warped,
        log,
    })
}
