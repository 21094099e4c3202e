//! Fixed-step integration of `dq/dt = M ⊙ K v(q, t)` over the voxel cloud.

use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Shape, VoxelCloud};
use crate::smoothing::GaussianKernel;
use crate::velocity::VelocityModel;

/// Right-hand side of a first-order ODE with parameters, plus the
/// vector-Jacobian products the adjoint sweeps need.
///
/// `t_step` is the start of the integration step containing `t`; fields that
/// are piecewise constant in time use it to pick their active piece.
pub trait Dynamics {
    fn state_len(&self) -> usize;

    fn param_len(&self) -> usize;

    fn velocity(&self, state: &[f64], t: f64, t_step: f64) -> Result<Vec<f64>>;

    /// Returns `(f, cotᵀ ∂f/∂state, cotᵀ ∂f/∂θ)` at one point.
    fn velocity_and_vjp(
        &self,
        state: &[f64],
        t: f64,
        t_step: f64,
        cot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// What an integration keeps around for later use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Every checkpoint `q(t_k)` and every step velocity.
    Full,
    /// Only `q0`, `q(s)` and the squared velocity norm of each step.
    Endpoints,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub horizon: f64,
    pub steps: usize,
    pub scheme: Scheme,
    pub retention: Retention,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            horizon: 1.0,
            steps: 1,
            scheme: Scheme::Euler,
            retention: Retention::Full,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("at least one integration step is required".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_k`, exact at both ends.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }
}

/// Counts live cloud-sized buffers and remembers the peak.
#[derive(Clone, Debug, Default)]
pub struct MemoryProbe(Arc<ProbeCounters>);

#[derive(Debug, Default)]
struct ProbeCounters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.0.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.0.peak.load(Ordering::SeqCst)
    }

    fn acquire(&self) -> BufferGuard {
        let live = self.0.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.0.peak.fetch_max(live, Ordering::SeqCst);
        BufferGuard(self.clone())
    }
}

#[derive(Debug)]
struct BufferGuard(MemoryProbe);

impl Drop for BufferGuard {
    fn drop(&mut self) {
        self.0 .0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A state-sized buffer that registers itself with an optional probe.
#[derive(Debug)]
pub(crate) struct Tracked {
    data: Vec<f64>,
    _guard: Option<BufferGuard>,
}

impl Tracked {
    pub fn new(data: Vec<f64>, probe: Option<&MemoryProbe>) -> Self {
        Tracked {
            data,
            _guard: probe.map(MemoryProbe::acquire),
        }
    }

    pub fn set(&mut self, data: Vec<f64>) {
        self.data = data;
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }
}

impl Deref for Tracked {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl Clone for Tracked {
    fn clone(&self) -> Self {
        Tracked {
            data: self.data.clone(),
            _guard: self._guard.as_ref().map(|g| g.0.acquire()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    config: FlowConfig,
    states: Vec<Tracked>,
    velocities: Vec<Tracked>,
    velocity_sq_norms: Vec<f64>,
}

impl Trajectory {
    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.config.steps).map(|k| self.config.time(k)).collect()
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has a final state")
    }

    /// `q(t_k)`, if it was retained.
    pub fn checkpoint(&self, k: usize) -> Option<&[f64]> {
        match self.config.retention {
            Retention::Full => self.states.get(k).map(|s| &s[..]),
            Retention::Endpoints if k == 0 => Some(&self.states[0]),
            Retention::Endpoints if k == self.config.steps => Some(&self.states[1]),
            Retention::Endpoints => None,
        }
    }

    /// Effective velocity `M ⊙ K v(q_k, t_k)` of step `k`, if retained.
    pub fn velocity(&self, k: usize) -> Option<&[f64]> {
        self.velocities.get(k).map(|v| &v[..])
    }

    /// `‖M ⊙ K v(q_k, t_k)‖²` for every step.
    pub fn velocity_sq_norms(&self) -> &[f64] {
        &self.velocity_sq_norms
    }

    pub fn final_cloud(&self, shape: &Shape) -> Result<VoxelCloud> {
        VoxelCloud::new(shape.clone(), self.final_state().to_vec())
    }

    /// Builds a trajectory record from parts; used to test consumers.
    pub fn from_parts(
        config: FlowConfig,
        states: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
        velocity_sq_norms: Vec<f64>,
    ) -> Self {
        Trajectory {
            config,
            states: states.into_iter().map(|s| Tracked::new(s, None)).collect(),
            velocities: velocities.into_iter().map(|s| Tracked::new(s, None)).collect(),
            velocity_sq_norms,
        }
    }
}

pub(crate) fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One step of the configured scheme from `(q, t_k)`. Returns the new state and
/// the stage-one velocity `f(q, t_k)`.
pub(crate) fn step<D: Dynamics + ?Sized>(
    dynamics: &D,
    config: &FlowConfig,
    q: &[f64],
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = config.step_size();
    let t = config.time(k);
    let f1 = dynamics.velocity(q, t, t)?;
    let next = match config.scheme {
        Scheme::Euler => axpy(q, h, &f1),
        Scheme::Rk4 => {
            let tm = t + 0.5 * h;
            let f2 = dynamics.velocity(&axpy(q, 0.5 * h, &f1), tm, t)?;
            let f3 = dynamics.velocity(&axpy(q, 0.5 * h, &f2), tm, t)?;
            let f4 = dynamics.velocity(&axpy(q, h, &f3), config.time(k + 1), t)?;
            q.iter()
                .enumerate()
                .map(|(i, q)| q + h / 6.0 * (f1[i] + 2.0 * f2[i] + 2.0 * f3[i] + f4[i]))
                .collect()
        }
    };
    Ok((next, f1))
}

/// Integrates the dynamics from `q0` over `[0, horizon]`.
pub fn integrate<D: Dynamics + ?Sized>(
    dynamics: &D,
    q0: &[f64],
    config: &FlowConfig,
    probe: Option<&MemoryProbe>,
) -> Result<Trajectory> {
    config.validate()?;
    if q0.len() != dynamics.state_len() {
        return Err(Error::mismatch(dynamics.state_len(), q0.len()));
    }
    if !all_finite(q0) {
        return Err(Error::Divergence { step: 0, phase: "initial state" });
    }
    let full = config.retention == Retention::Full;
    let mut states = vec![Tracked::new(q0.to_vec(), probe)];
    let mut velocities = Vec::new();
    let mut norms = Vec::with_capacity(config.steps);
    let mut current = Tracked::new(q0.to_vec(), probe);
    for k in 0..config.steps {
        let (next, f) = step(dynamics, config, &current, k)?;
        if !all_finite(&next) {
            return Err(Error::Divergence { step: k, phase: "forward" });
        }
        norms.push(f.iter().map(|x| x * x).sum());
        if full {
            states.push(Tracked::new(next.clone(), probe));
            velocities.push(Tracked::new(f, probe));
        }
        current.set(next);
    }
    if !full {
        states.push(current);
    }
    Ok(Trajectory {
        config: *config,
        states,
        velocities,
        velocity_sq_norms: norms,
    })
}

/// Max-norm difference between the endpoints computed with `n` and `2n` steps.
pub fn compose_check<D: Dynamics + ?Sized>(dynamics: &D, q0: &[f64], config: &FlowConfig) -> Result<f64> {
    let coarse = FlowConfig {
        retention: Retention::Endpoints,
        ..*config
    };
    let fine = FlowConfig {
        steps: 2 * config.steps,
        ..coarse
    };
    let a = integrate(dynamics, q0, &coarse, None)?;
    let b = integrate(dynamics, q0, &fine, None)?;
    Ok(a.final_state()
        .iter()
        .zip(b.final_state())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Mask that is zero on every face voxel and one elsewhere.
pub fn face_mask(shape: &Shape) -> Vec<f64> {
    (0..shape.len())
        .map(|v| if shape.on_face(v) { 0.0 } else { 1.0 })
        .collect()
}

/// The registration dynamics: a velocity model smoothed by `K` and optionally
/// masked so constrained voxels never move.
#[derive(Clone, Copy, Debug)]
pub struct SmoothedField<'a> {
    pub model: &'a VelocityModel,
    pub kernel: &'a GaussianKernel,
    pub mask: Option<&'a [f64]>,
}

impl<'a> SmoothedField<'a> {
    pub fn new(model: &'a VelocityModel, kernel: &'a GaussianKernel, mask: Option<&'a [f64]>) -> Result<Self> {
        let shape = model.shape();
        if kernel.dim() != shape.ndim() {
            return Err(Error::mismatch(shape.ndim(), kernel.dim()));
        }
        if let Some(m) = mask {
            if m.len() != shape.len() {
                return Err(Error::mismatch(shape.len(), m.len()));
            }
        }
        Ok(SmoothedField { model, kernel, mask })
    }

    fn apply_mask(&self, field: &mut [f64]) {
        if let Some(mask) = self.mask {
            for chunk in field.chunks_mut(mask.len()) {
                chunk.iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
            }
        }
    }
}

impl Dynamics for SmoothedField<'_> {
    fn state_len(&self) -> usize {
        self.model.shape().ndim() * self.model.shape().len()
    }

    fn param_len(&self) -> usize {
        self.model.param_count()
    }

    fn velocity(&self, state: &[f64], t: f64, t_step: f64) -> Result<Vec<f64>> {
        let v = self.model.eval_coords(state, t, t_step)?;
        let mut f = self.kernel.apply(self.model.shape(), &v)?;
        self.apply_mask(&mut f);
        Ok(f)
    }

    fn velocity_and_vjp(
        &self,
        state: &[f64],
        t: f64,
        t_step: f64,
        cot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let shape = self.model.shape();
        let mut c = cot.to_vec();
        self.apply_mask(&mut c);
        let c = self.kernel.apply_transpose(shape, &c)?;
        let (v, gq, gp) = self.model.eval_and_vjp_coords(state, t, t_step, &c)?;
        let mut f = self.kernel.apply(shape, &v)?;
        self.apply_mask(&mut f);
        Ok((f, gq, gp))
    }
}

/// Integrates the smoothed, optionally masked velocity model from `q0`.
pub fn integrate_field(
    model: &VelocityModel,
    kernel: &GaussianKernel,
    q0: &VoxelCloud,
    config: &FlowConfig,
    mask: Option<&[f64]>,
) -> Result<Trajectory> {
    if q0.shape() != model.shape() {
        return Err(Error::mismatch(model.shape(), q0.shape()));
    }
    let field = SmoothedField::new(model, kernel, mask)?;
    integrate(&field, q0.coords(), config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_identity_grid;
    use crate::velocity::{NeuralFieldSpec, TimeMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// dq/dt = a (q - anchor), component-wise.
    struct Linear {
        a: f64,
        anchor: Vec<f64>,
    }

    impl Dynamics for Linear {
        fn state_len(&self) -> usize {
            self.anchor.len()
        }
        fn param_len(&self) -> usize {
            0
        }
        fn velocity(&self, q: &[f64], _: f64, _: f64) -> Result<Vec<f64>> {
            Ok(q.iter().zip(&self.anchor).map(|(q, c)| self.a * (q - c)).collect())
        }
        fn velocity_and_vjp(&self, q: &[f64], t: f64, ts: f64, cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            Ok((self.velocity(q, t, ts)?, cot.iter().map(|c| self.a * c).collect(), vec![]))
        }
    }

    fn euler(steps: usize) -> FlowConfig {
        FlowConfig {
            steps,
            ..FlowConfig::default()
        }
    }

    fn random_model(shape: &Shape, seed: u64, scale: f64) -> VelocityModel {
        let spec = NeuralFieldSpec {
            widths: vec![4, 8],
            bottleneck_depth: 1,
            kernel: 3,
        };
        let m = VelocityModel::neural(shape, spec, TimeMode::TimeInjected, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..m.param_count()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        m.with_params(p).unwrap()
    }

    #[test]
    fn zero_model_keeps_every_checkpoint_at_identity() {
        let shape = Shape::new(&[6, 5]).unwrap();
        let m = VelocityModel::neural(&shape, NeuralFieldSpec::default(), TimeMode::TimeInjected, 1.0).unwrap();
        let id = make_identity_grid(&shape);
        let k = GaussianKernel::new(2, 1.0, 2).unwrap();
        let traj = integrate_field(&m, &k, &id, &euler(3), None).unwrap();
        for s in 0..=3 {
            assert_eq!(traj.checkpoint(s).unwrap(), id.coords());
        }
        assert_eq!(traj.times(), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let shape = Shape::new(&[4, 4]).unwrap();
        let c: Vec<f64> = (0..32).map(|i| 0.1 * i as f64 - 1.0).collect();
        let m = VelocityModel::tensor(&shape, 1, 1.0).unwrap().with_params(c.clone()).unwrap();
        let id = make_identity_grid(&shape);
        let k = GaussianKernel::identity(2);
        let traj = integrate_field(&m, &k, &id, &euler(4), None).unwrap();
        for ((q, q0), c) in traj.final_state().iter().zip(id.coords()).zip(&c) {
            assert!((q - (q0 + c)).abs() < 1e-12);
        }
        let field = SmoothedField::new(&m, &k, None).unwrap();
        assert!(compose_check(&field, id.coords(), &euler(4)).unwrap() < 1e-12);
    }

    #[test]
    fn euler_converges_to_exponential_growth() {
        // the displacement from the anchor grows like e^{a t}
        let anchor = vec![1.0, -2.0, 0.5];
        let d0 = [0.3, 0.7, -0.4];
        let q0: Vec<f64> = anchor.iter().zip(d0).map(|(c, d)| c + d).collect();
        let sys = Linear { a: 0.5, anchor: anchor.clone() };
        let mut last = f64::INFINITY;
        for n in [128, 256, 512] {
            let traj = integrate(&sys, &q0, &euler(n), None).unwrap();
            let err = traj
                .final_state()
                .iter()
                .zip(&anchor)
                .zip(d0)
                .map(|((q, c), d)| ((q - c) - d * 0.5f64.exp()).abs() / (d * 0.5f64.exp()).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-2);
            if last.is_finite() {
                let ratio = last / err;
                assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
            }
            last = err;
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let anchor = vec![0.0];
        let sys = Linear { a: 1.0, anchor };
        let cfg = |n| FlowConfig { steps: n, scheme: Scheme::Rk4, ..FlowConfig::default() };
        let e8 = (integrate(&sys, &[1.0], &cfg(8), None).unwrap().final_state()[0] - 1f64.exp()).abs();
        let e16 = (integrate(&sys, &[1.0], &cfg(16), None).unwrap().final_state()[0] - 1f64.exp()).abs();
        assert!(e8 / e16 > 14.0 && e8 / e16 < 18.0);
    }

    #[test]
    fn masked_faces_never_move() {
        let shape = Shape::new(&[10, 9]).unwrap();
        let m = random_model(&shape, 3, 0.5);
        let mask = face_mask(&shape);
        let id = make_identity_grid(&shape);
        let k = GaussianKernel::new(2, 1.0, 2).unwrap();
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let cfg = FlowConfig { steps: 4, scheme, ..FlowConfig::default() };
            let traj = integrate_field(&m, &k, &id, &cfg, Some(&mask)).unwrap();
            let n = shape.len();
            for s in 0..=4 {
                let q = traj.checkpoint(s).unwrap();
                for v in (0..n).filter(|&v| shape.on_face(v)) {
                    assert_eq!(q[v], id.coords()[v]);
                    assert_eq!(q[n + v], id.coords()[n + v]);
                }
            }
            assert!(traj.final_state() != id.coords());
        }
    }

    #[test]
    fn euler_self_convergence_is_first_order() {
        let shape = Shape::new(&[12, 12]).unwrap();
        let m = random_model(&shape, 8, 0.3);
        let k = GaussianKernel::new(2, 1.0, 2).unwrap();
        let field = SmoothedField::new(&m, &k, None).unwrap();
        let q0 = make_identity_grid(&shape);
        let d8 = compose_check(&field, q0.coords(), &euler(8)).unwrap();
        let d16 = compose_check(&field, q0.coords(), &euler(16)).unwrap();
        let d32 = compose_check(&field, q0.coords(), &euler(32)).unwrap();
        assert!(d8 >= d16 && d16 >= d32);
        for ratio in [d8 / d16, d16 / d32] {
            assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn endpoint_retention_matches_full() {
        let shape = Shape::new(&[8, 7]).unwrap();
        let m = random_model(&shape, 4, 0.3);
        let k = GaussianKernel::new(1, 1.0, 2).unwrap();
        let q0 = make_identity_grid(&shape);
        let full = integrate_field(&m, &k, &q0, &euler(5), None).unwrap();
        let cfg = FlowConfig { retention: Retention::Endpoints, ..euler(5) };
        let ends = integrate_field(&m, &k, &q0, &cfg, None).unwrap();
        assert_eq!(full.final_state(), ends.final_state());
        assert_eq!(full.velocity_sq_norms(), ends.velocity_sq_norms());
        assert!(ends.checkpoint(2).is_none() && ends.velocity(0).is_none());
        assert_eq!(ends.checkpoint(5).unwrap(), full.final_state());
    }

    #[test]
    fn trajectories_are_deterministic() {
        let shape = Shape::new(&[9, 11]).unwrap();
        let m = random_model(&shape, 5, 0.4);
        let k = GaussianKernel::new(2, 1.0, 2).unwrap();
        let q0 = make_identity_grid(&shape);
        let cfg = FlowConfig { steps: 3, scheme: Scheme::Rk4, ..FlowConfig::default() };
        let a = integrate_field(&m, &k, &q0, &cfg, None).unwrap();
        let b = integrate_field(&m, &k, &q0, &cfg, None).unwrap();
        for s in 0..=3 {
            assert_eq!(a.checkpoint(s), b.checkpoint(s));
        }
    }

    #[test]
    fn divergence_names_the_step() {
        struct Blowup;
        impl Dynamics for Blowup {
            fn state_len(&self) -> usize { 1 }
            fn param_len(&self) -> usize { 0 }
            fn velocity(&self, q: &[f64], _: f64, _: f64) -> Result<Vec<f64>> {
                Ok(vec![if q[0] > 10.0 { f64::INFINITY } else { 100.0 }])
            }
            fn velocity_and_vjp(&self, _: &[f64], _: f64, _: f64, _: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
                unreachable!()
            }
        }
        let err = integrate(&Blowup, &[0.0], &euler(4), None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let sys = Linear { a: 1.0, anchor: vec![0.0] };
        assert!(matches!(integrate(&sys, &[1.0], &euler(0), None), Err(Error::Config(_))));
        let bad = FlowConfig { horizon: 0.0, ..FlowConfig::default() };
        assert!(integrate(&sys, &[1.0], &bad, None).is_err());
        assert!(integrate(&sys, &[1.0, 2.0], &euler(1), None).is_err());
    }
}
