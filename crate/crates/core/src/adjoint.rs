//! Parameter gradients by a backward adjoint sweep, and an exact reverse-mode
//! oracle through the stored discrete trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{all_finite, axpy, integrate, Dynamics, FlowConfig, MemoryProbe, Retention, Scheme, SmoothedField, Tracked, Trajectory};
use crate::grid::{Image, VoxelCloud};
use crate::objective::{grad_wrt_final_cloud, total_loss, LossConfig, LossReport};
use crate::smoothing::GaussianKernel;
use crate::velocity::VelocityModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Adjoint,
    Discrete,
}

/// Where the backward sweep gets the states `q(t_k)` from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointMemory {
    /// Reuse every forward checkpoint.
    #[default]
    Checkpointed,
    /// Keep only the endpoint and integrate the state backward alongside λ.
    Reintegrate,
}

/// Adjoint variable at `t = 0` and the accumulated `dL/dθ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub lambda: Vec<f64>,
    pub grad: Vec<f64>,
}

const REVERSE_MAX_ITERS: usize = 100;

fn add_scaled(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn check_terminal<D: Dynamics + ?Sized>(dynamics: &D, traj: &Trajectory, terminal: &[f64]) -> Result<()> {
    if terminal.len() != dynamics.state_len() || traj.final_state().len() != dynamics.state_len() {
        return Err(Error::mismatch(dynamics.state_len(), terminal.len()));
    }
    if !all_finite(terminal) {
        return Err(Error::Divergence { step: traj.steps(), phase: "adjoint" });
    }
    Ok(())
}

/// Recovers `q_k` from `q_{k+1} = q_k + h f(q_k, t_k)` by fixed-point iteration.
fn invert_euler_step<D: Dynamics + ?Sized>(dynamics: &D, cfg: &FlowConfig, k: usize, next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = cfg.step_size();
    let t = cfg.time(k);
    let mut f = dynamics.velocity(next, t, t)?;
    let mut q = axpy(next, -h, &f);
    let scale = next.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for _ in 0..REVERSE_MAX_ITERS {
        f = dynamics.velocity(&q, t, t)?;
        let candidate = axpy(next, -h, &f);
        let change = candidate.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = candidate;
        if !change.is_finite() {
            break;
        }
        if change <= 1e-13 * scale {
            let f = dynamics.velocity(&q, t, t)?;
            return Ok((q, f));
        }
    }
    Err(Error::Divergence { step: k, phase: "reverse reconstruction" })
}

/// Backward sweep of the continuous adjoint equation from `λ(s) = terminal`.
///
/// `mag_weight` is the coefficient `c` of a running cost `Σ_k c h ‖f(q_k, t_k)‖²`,
/// whose contributions enter both λ and the parameter gradient. With Euler and
/// checkpoints the sweep reproduces the discrete gradient exactly; with RK4 it
/// integrates the augmented system backward with the same step grid.
pub fn adjoint_sweep<D: Dynamics + ?Sized>(
    dynamics: &D,
    traj: &Trajectory,
    terminal: &[f64],
    mag_weight: f64,
    memory: AdjointMemory,
    probe: Option<&MemoryProbe>,
) -> Result<AdjointState> {
    check_terminal(dynamics, traj, terminal)?;
    let cfg = *traj.config();
    if memory == AdjointMemory::Checkpointed && cfg.retention != Retention::Full {
        return Err(Error::Config("checkpointed adjoint needs a fully retained trajectory".into()));
    }
    let h = cfg.step_size();
    let mut lambda = Tracked::new(terminal.to_vec(), probe);
    let mut state = Tracked::new(traj.final_state().to_vec(), probe);
    let mut grad = vec![0.0; dynamics.param_len()];

    for k in (0..cfg.steps).rev() {
        let tk = cfg.time(k);
        // f(q_k, t_k) for the running cost, and q_k itself
        let mut fk: Option<Tracked> = None;
        match cfg.scheme {
            Scheme::Euler => {
                let qk = match memory {
                    AdjointMemory::Checkpointed => {
                        if mag_weight != 0.0 {
                            fk = traj.velocity(k).map(|f| Tracked::new(f.to_vec(), probe));
                        }
                        traj.checkpoint(k).expect("retained").to_vec()
                    }
                    AdjointMemory::Reintegrate => {
                        let (q, f) = invert_euler_step(dynamics, &cfg, k, &state)?;
                        fk = Some(Tracked::new(f, probe));
                        q
                    }
                };
                let mut cot: Vec<f64> = lambda.iter().map(|l| h * l).collect();
                if let Some(f) = fk.as_deref().filter(|_| mag_weight != 0.0) {
                    add_scaled(&mut cot, 2.0 * mag_weight * h, f);
                }
                let (_, gq, gp) = dynamics.velocity_and_vjp(&qk, tk, tk, &cot)?;
                add_scaled(lambda.as_mut_slice(), 1.0, &gq);
                add_scaled(&mut grad, 1.0, &gp);
                state.set(qk);
            }
            Scheme::Rk4 => {
                let anchor: Vec<f64> = match memory {
                    AdjointMemory::Checkpointed => traj.checkpoint(k + 1).expect("retained").to_vec(),
                    AdjointMemory::Reintegrate => state.to_vec(),
                };
                let t1 = cfg.time(k + 1);
                let tm = tk + 0.5 * h;
                let a = lambda.to_vec();
                let (f1, a1, g1) = dynamics.velocity_and_vjp(&anchor, t1, tk, &a)?;
                let (f2, a2, g2) =
                    dynamics.velocity_and_vjp(&axpy(&anchor, -0.5 * h, &f1), tm, tk, &axpy(&a, 0.5 * h, &a1))?;
                let (f3, a3, g3) =
                    dynamics.velocity_and_vjp(&axpy(&anchor, -0.5 * h, &f2), tm, tk, &axpy(&a, 0.5 * h, &a2))?;
                let (f4, a4, g4) =
                    dynamics.velocity_and_vjp(&axpy(&anchor, -h, &f3), tk, tk, &axpy(&a, h, &a3))?;
                let lam = lambda.as_mut_slice();
                for i in 0..lam.len() {
                    lam[i] += h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
                }
                for i in 0..grad.len() {
                    grad[i] += h / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]);
                }
                let qk: Vec<f64> = match memory {
                    AdjointMemory::Checkpointed => traj.checkpoint(k).expect("retained").to_vec(),
                    AdjointMemory::Reintegrate => (0..anchor.len())
                        .map(|i| anchor[i] - h / 6.0 * (f1[i] + 2.0 * f2[i] + 2.0 * f3[i] + f4[i]))
                        .collect(),
                };
                if mag_weight != 0.0 {
                    let f = match traj.velocity(k) {
                        Some(f) => f.to_vec(),
                        None => dynamics.velocity(&qk, tk, tk)?,
                    };
                    let cot: Vec<f64> = f.iter().map(|x| 2.0 * mag_weight * h * x).collect();
                    fk = Some(Tracked::new(f, probe));
                    let (_, gq, gp) = dynamics.velocity_and_vjp(&qk, tk, tk, &cot)?;
                    add_scaled(lambda.as_mut_slice(), 1.0, &gq);
                    add_scaled(&mut grad, 1.0, &gp);
                }
                state.set(qk);
            }
        }
        drop(fk);
        if !all_finite(&lambda) || !all_finite(&grad) {
            return Err(Error::Divergence { step: k, phase: "adjoint" });
        }
    }
    Ok(AdjointState {
        lambda: lambda.into_inner(),
        grad,
    })
}

/// Exact reverse-mode differentiation of the recorded Euler or RK4 steps.
pub fn discrete_sweep<D: Dynamics + ?Sized>(
    dynamics: &D,
    traj: &Trajectory,
    terminal: &[f64],
    mag_weight: f64,
    probe: Option<&MemoryProbe>,
) -> Result<AdjointState> {
    check_terminal(dynamics, traj, terminal)?;
    let cfg = *traj.config();
    if cfg.retention != Retention::Full {
        return Err(Error::Config("discrete backpropagation needs a fully retained trajectory".into()));
    }
    let h = cfg.step_size();
    let mut adj = Tracked::new(terminal.to_vec(), probe);
    let mut grad = vec![0.0; dynamics.param_len()];
    for k in (0..cfg.steps).rev() {
        let q = traj.checkpoint(k).expect("retained");
        let f1 = traj.velocity(k).expect("retained");
        let tk = cfg.time(k);
        let mut dq = adj.to_vec();
        let dk1: Vec<f64> = match cfg.scheme {
            Scheme::Euler => adj.iter().map(|a| h * a).collect(),
            Scheme::Rk4 => {
                let tm = tk + 0.5 * h;
                let z2 = Tracked::new(axpy(q, 0.5 * h, f1), probe);
                let f2 = dynamics.velocity(&z2, tm, tk)?;
                let z3 = Tracked::new(axpy(q, 0.5 * h, &f2), probe);
                let f3 = dynamics.velocity(&z3, tm, tk)?;
                let z4 = Tracked::new(axpy(q, h, &f3), probe);
                let w = |c: f64| adj.iter().map(|a| c * h * a).collect::<Vec<f64>>();

                let (_, gz4, gp) = dynamics.velocity_and_vjp(&z4, cfg.time(k + 1), tk, &w(1.0 / 6.0))?;
                add_scaled(&mut grad, 1.0, &gp);
                add_scaled(&mut dq, 1.0, &gz4);
                let mut dk3 = w(1.0 / 3.0);
                add_scaled(&mut dk3, h, &gz4);

                let (_, gz3, gp) = dynamics.velocity_and_vjp(&z3, tm, tk, &dk3)?;
                add_scaled(&mut grad, 1.0, &gp);
                add_scaled(&mut dq, 1.0, &gz3);
                let mut dk2 = w(1.0 / 3.0);
                add_scaled(&mut dk2, 0.5 * h, &gz3);

                let (_, gz2, gp) = dynamics.velocity_and_vjp(&z2, tm, tk, &dk2)?;
                add_scaled(&mut grad, 1.0, &gp);
                add_scaled(&mut dq, 1.0, &gz2);
                let mut dk1 = w(1.0 / 6.0);
                add_scaled(&mut dk1, 0.5 * h, &gz2);
                dk1
            }
        };
        let mut dk1 = dk1;
        if mag_weight != 0.0 {
            add_scaled(&mut dk1, 2.0 * mag_weight * h, f1);
        }
        let (_, gq, gp) = dynamics.velocity_and_vjp(q, tk, tk, &dk1)?;
        add_scaled(&mut grad, 1.0, &gp);
        add_scaled(&mut dq, 1.0, &gq);
        adj.set(dq);
        if !all_finite(&adj) || !all_finite(&grad) {
            return Err(Error::Divergence { step: k, phase: "backpropagation" });
        }
    }
    Ok(AdjointState {
        lambda: adj.into_inner(),
        grad,
    })
}

/// Everything needed to evaluate the registration loss and its gradient for
/// one parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct RegistrationProblem<'a> {
    pub model: &'a VelocityModel,
    pub kernel: &'a GaussianKernel,
    pub q0: &'a VoxelCloud,
    pub flow: &'a FlowConfig,
    pub fixed: &'a Image,
    pub moving: &'a Image,
    pub loss: &'a LossConfig,
    pub mask: Option<&'a [f64]>,
}

impl<'a> RegistrationProblem<'a> {
    fn field(&self) -> Result<SmoothedField<'a>> {
        if self.q0.shape() != self.model.shape() {
            return Err(Error::mismatch(self.model.shape(), self.q0.shape()));
        }
        SmoothedField::new(self.model, self.kernel, self.mask)
    }

    fn forward(&self, retention: Retention, probe: Option<&MemoryProbe>) -> Result<(Trajectory, LossReport, Vec<f64>)> {
        self.loss.validate()?;
        let field = self.field()?;
        let cfg = FlowConfig { retention, ..*self.flow };
        let traj = integrate(&field, self.q0.coords(), &cfg, probe)?;
        let report = total_loss(self.fixed, self.moving, &traj, self.loss)?;
        let cloud = traj.final_cloud(self.q0.shape())?;
        let terminal = grad_wrt_final_cloud(self.fixed, self.moving, &cloud, self.loss)?;
        Ok((traj, report, terminal))
    }

    fn mag_weight(&self) -> f64 {
        self.loss.lambda_mag / self.q0.shape().len() as f64
    }

    /// Loss only, with endpoint retention.
    pub fn loss_report(&self) -> Result<LossReport> {
        let field = self.field()?;
        let cfg = FlowConfig { retention: Retention::Endpoints, ..*self.flow };
        let traj = integrate(&field, self.q0.coords(), &cfg, None)?;
        total_loss(self.fixed, self.moving, &traj, self.loss)
    }

    /// Final cloud `ψ` of the forward flow.
    pub fn deformation(&self) -> Result<VoxelCloud> {
        let field = self.field()?;
        let cfg = FlowConfig { retention: Retention::Endpoints, ..*self.flow };
        integrate(&field, self.q0.coords(), &cfg, None)?.final_cloud(self.q0.shape())
    }
}

/// `dL/dθ` by the adjoint method, with the loss evaluated on the way.
pub fn adjoint_gradient(
    problem: &RegistrationProblem,
    memory: AdjointMemory,
    probe: Option<&MemoryProbe>,
) -> Result<(Vec<f64>, LossReport)> {
    let retention = match memory {
        AdjointMemory::Checkpointed => Retention::Full,
        AdjointMemory::Reintegrate => Retention::Endpoints,
    };
    let (traj, report, terminal) = problem.forward(retention, probe)?;
    let field = problem.field()?;
    let state = adjoint_sweep(&field, &traj, &terminal, problem.mag_weight(), memory, probe)?;
    Ok((state.grad, report))
}

/// `dL/dθ` by reverse-mode differentiation of the discrete forward pass.
pub fn discrete_gradient(problem: &RegistrationProblem, probe: Option<&MemoryProbe>) -> Result<(Vec<f64>, LossReport)> {
    let (traj, report, terminal) = problem.forward(Retention::Full, probe)?;
    let field = problem.field()?;
    let state = discrete_sweep(&field, &traj, &terminal, problem.mag_weight(), probe)?;
    Ok((state.grad, report))
}

/// Gradient by the chosen mode. The adjoint mode reuses checkpoints.
pub fn gradient(problem: &RegistrationProblem, mode: GradientMode) -> Result<(Vec<f64>, LossReport)> {
    match mode {
        GradientMode::Adjoint => adjoint_gradient(problem, AdjointMemory::Checkpointed, None),
        GradientMode::Discrete => discrete_gradient(problem, None),
    }
}
