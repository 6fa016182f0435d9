//! Parameter identification: the one-step prediction loss, phase gradients,
//! the three-phase trainer, steady-state wrench extraction, OLS coefficient
//! fits with binned goodness-of-fit diagnostics, and switching-threshold
//! selection.
//!
//! Gradients use central finite differences over the active parameter block
//! as the reference method; the mixer phase chains a per-step finite
//! difference in λ with the network's analytic backprop. Parameter counts
//! are small enough (13 + 12 physical, 641 mixer) that this is both exact
//! enough and fast enough, and the finite-difference contract test keeps any
//! future fast path honest.

use crate::aero::AcmCoeffs;
use crate::dataio::{
    RegionPools, StepSample, TrajectoryRecord, DEFAULT_ALPHA_MAX, DEFAULT_ANCHORS, DEFAULT_GRID,
    DEFAULT_V_MAX,
};
use crate::dynamics::{
    classify_regime, lambda_for, step_with_lambda, DynamicsError, MassFactor, MixingMode, Regime,
    RegimePartition, StateVector,
};
use crate::mathcore::{flow_state, FlowState, Vec3, Vec6};
use crate::mixer::{regularizer_grad, MixerError, MixerParams, MonoSign, RegGrids, PARAM_COUNT};
use crate::rigidbody::{
    added_mass_terms, control_wrench, coriolis_matrix, gondola_reaction, gravity_buoyancy,
    mass_matrix, ControlInput, PhysicalParams, Wrench,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("prediction/measurement length mismatch: {pred} vs {meas}")]
    LengthMismatch { pred: usize, meas: usize },
    #[error("non-finite gradient component {index} in {phase:?}")]
    NonFiniteGradient { phase: Phase, index: usize },
    #[error("no training data in the {0:?} region")]
    EmptyRegion(Regime),
    #[error("regressor matrix rank {rank} below the {needed} coefficients")]
    RankDeficient { rank: usize, needed: usize },
    #[error("{axis} axis has {nonempty} populated bins, need at least {needed}")]
    InsufficientCoverage { axis: &'static str, nonempty: usize, needed: usize },
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Everything the trainer needs besides the data: the state weighting,
/// regularizer grids, batch size, learning rates, and epoch counts.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Diagonal state weighting, one entry per state component.
    pub w: [f64; 12],
    pub reg: RegGrids,
    pub batch_size: usize,
    /// Learning rate for the two physical phases.
    pub lr_12: f64,
    /// Learning rate for the mixer phase.
    pub lr_3: f64,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub seed: u64,
    pub optimizer: OptimKind,
}

impl LossConfig {
    pub fn defaults(part: &RegimePartition) -> Self {
        Self {
            w: [1.0; 12],
            reg: RegGrids::build(
                part,
                DEFAULT_ALPHA_MAX,
                DEFAULT_V_MAX,
                DEFAULT_ANCHORS,
                DEFAULT_GRID,
                (1.0, 1.0, 0.1),
                MonoSign::default(),
            ),
            batch_size: 256,
            lr_12: 1e-3,
            lr_3: 1e-2,
            n1: 10,
            n2: 10,
            n3: 10,
            seed: 0,
            optimizer: OptimKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<(), IdentError> {
        if self.w.iter().any(|&w| !(w >= 0.0)) {
            return Err(IdentError::BadConfig("state weights must be >= 0".into()));
        }
        if !(self.lr_12 > 0.0) || !(self.lr_3 > 0.0) {
            return Err(IdentError::BadConfig("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(IdentError::BadConfig("batch size must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean over samples of the per-sample weighted squared error
/// (1/n)‖W(x_p − x)‖² with n = 12.
pub fn model_loss(
    pred: &[StateVector],
    meas: &[StateVector],
    w: &[f64; 12],
) -> Result<f64, IdentError> {
    if pred.len() != meas.len() {
        return Err(IdentError::LengthMismatch { pred: pred.len(), meas: meas.len() });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(meas)
        .map(|(p, m)| weighted_sq_error(p, m, w))
        .sum();
    Ok(total / pred.len() as f64)
}

fn weighted_sq_error(pred: &StateVector, meas: &StateVector, w: &[f64; 12]) -> f64 {
    let d = pred.svector() - meas.svector();
    let sum: f64 = (0..12).map(|i| (w[i] * d[i]).powi(2)).sum();
    sum / 12.0
}

/// The three stages of the identification schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// λ ≡ 0 on pure-ACM data; only ACM coefficients move.
    AcmFit,
    /// λ ≡ 1 on pure-GDM data; only GDM coefficients move.
    GdmFit,
    /// Neural λ on transition data; physical parameters frozen.
    MixerFit,
}

/// Factorizations keyed by gondola position. The rigid-body mass matrix does
/// not depend on the aerodynamic coefficient blocks, so one factorization per
/// distinct r̄ serves every parameter perturbation in a phase.
struct FactorCache {
    entries: Vec<(Vec3, MassFactor)>,
}

impl FactorCache {
    fn build(phi: &PhysicalParams, batch: &[StepSample]) -> Result<Self, DynamicsError> {
        let mut entries: Vec<(Vec3, MassFactor)> = Vec::new();
        for step in batch {
            if !entries.iter().any(|(r, _)| *r == step.input.r_bar) {
                entries.push((step.input.r_bar, MassFactor::new(phi, &step.input)?));
            }
        }
        Ok(Self { entries })
    }

    fn get(&self, u: &ControlInput) -> &MassFactor {
        &self
            .entries
            .iter()
            .find(|(r, _)| *r == u.r_bar)
            .expect("factor cache covers the batch")
            .1
    }
}

fn phase_lambda(
    phase: Phase,
    xi: Option<&MixerParams>,
    flow: &FlowState,
) -> Result<f64, IdentError> {
    Ok(match phase {
        Phase::AcmFit => 0.0,
        Phase::GdmFit => 1.0,
        Phase::MixerFit => xi.ok_or(DynamicsError::MissingMixer)?.eval_flow(flow),
    })
}

fn step_loss(
    phi: &PhysicalParams,
    step: &StepSample,
    factor: &MassFactor,
    lam: f64,
    w: &[f64; 12],
) -> Result<f64, DynamicsError> {
    let pred = step_with_lambda(&step.state, &step.input, phi, factor, lam, step.dt)?;
    Ok(weighted_sq_error(&pred, &step.next, w))
}

/// Mean one-step prediction loss of a batch under the phase's λ rule.
/// Does not include the mixer regularizers.
pub fn prediction_loss(
    phase: Phase,
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    batch: &[StepSample],
    w: &[f64; 12],
) -> Result<f64, IdentError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let cache = FactorCache::build(phi, batch)?;
    let losses: Result<Vec<f64>, IdentError> = batch
        .par_iter()
        .map(|step| {
            let lam = phase_lambda(phase, xi, &step.state.flow())?;
            Ok(step_loss(phi, step, cache.get(&step.input), lam, w)?)
        })
        .collect();
    Ok(losses?.iter().sum::<f64>() / batch.len() as f64)
}

/// Full phase loss: prediction loss, plus the weighted regularizers in the
/// mixer phase.
pub fn phase_loss(
    phase: Phase,
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    batch: &[StepSample],
    cfg: &LossConfig,
) -> Result<f64, IdentError> {
    let pred = prediction_loss(phase, phi, xi, batch, &cfg.w)?;
    if phase == Phase::MixerFit {
        let xi = xi.ok_or(DynamicsError::MissingMixer)?;
        let (report, _) = regularizer_grad(xi, &cfg.reg)?;
        Ok(pred + report.weighted_total(&cfg.reg))
    } else {
        Ok(pred)
    }
}

/// Gradient of the phase loss, one block per parameter family. Blocks
/// outside the active phase are zero: the phase loss does not read them, so
/// their true partials vanish identically.
#[derive(Debug, Clone)]
pub struct PhaseGradient {
    pub acm: Vec<f64>,
    pub gdm: Vec<f64>,
    pub mixer: Vec<f64>,
}

impl PhaseGradient {
    pub fn active(&self, phase: Phase) -> &[f64] {
        match phase {
            Phase::AcmFit => &self.acm,
            Phase::GdmFit => &self.gdm,
            Phase::MixerFit => &self.mixer,
        }
    }
}

fn fd_epsilon(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

fn check_finite(phase: Phase, grad: &[f64]) -> Result<(), IdentError> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(IdentError::NonFiniteGradient { phase, index }),
        None => Ok(()),
    }
}

/// Central finite differences of the prediction loss over one physical
/// coefficient block.
fn physical_block_grad(
    phase: Phase,
    phi: &PhysicalParams,
    batch: &[StepSample],
    w: &[f64; 12],
) -> Result<Vec<f64>, IdentError> {
    let theta = match phase {
        Phase::AcmFit => phi.acm.params(),
        Phase::GdmFit => phi.gdm.params(),
        Phase::MixerFit => unreachable!("mixer phase has no physical block gradient"),
    };
    let mut work = phi.clone();
    let eval = |values: &[f64], work: &mut PhysicalParams| -> Result<f64, IdentError> {
        match phase {
            Phase::AcmFit => work.acm.set_params(values),
            Phase::GdmFit => work.gdm.set_params(values),
            Phase::MixerFit => unreachable!(),
        }
        prediction_loss(phase, work, None, batch, w)
    };
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let eps = fd_epsilon(theta[i]);
        probe[i] = theta[i] + eps;
        let hi = eval(&probe, &mut work)?;
        probe[i] = theta[i] - eps;
        let lo = eval(&probe, &mut work)?;
        probe[i] = theta[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    check_finite(phase, &grad)?;
    Ok(grad)
}

/// Per-step finite difference in λ chained with the network's analytic
/// parameter gradient, plus the analytic regularizer gradient.
fn mixer_block_grad(
    phi: &PhysicalParams,
    xi: &MixerParams,
    batch: &[StepSample],
    cfg: &LossConfig,
) -> Result<Vec<f64>, IdentError> {
    const EPS_LAMBDA: f64 = 1e-6;
    let cache = FactorCache::build(phi, batch)?;
    let per_step: Result<Vec<(f64, Vec<f64>)>, IdentError> = batch
        .par_iter()
        .map(|step| {
            let f = step.state.flow();
            let (lam, dlam_dtheta) = xi.eval_with_param_grad(f.alpha, f.speed);
            let factor = cache.get(&step.input);
            let hi = step_loss(phi, step, factor, lam + EPS_LAMBDA, &cfg.w)?;
            let lo = step_loss(phi, step, factor, lam - EPS_LAMBDA, &cfg.w)?;
            let dloss_dlam = (hi - lo) / (2.0 * EPS_LAMBDA);
            Ok((dloss_dlam, dlam_dtheta))
        })
        .collect();
    let per_step = per_step?;
    let mut grad = vec![0.0; PARAM_COUNT];
    let scale = 1.0 / batch.len().max(1) as f64;
    for (dloss_dlam, dlam_dtheta) in &per_step {
        for (g, d) in grad.iter_mut().zip(dlam_dtheta) {
            *g += scale * dloss_dlam * d;
        }
    }
    let (_, reg_grad) = regularizer_grad(xi, &cfg.reg)?;
    for (g, r) in grad.iter_mut().zip(&reg_grad) {
        *g += r;
    }
    check_finite(Phase::MixerFit, &grad)?;
    Ok(grad)
}

/// Gradient of the phase loss with respect to all parameter blocks.
pub fn loss_gradient(
    phase: Phase,
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    batch: &[StepSample],
    cfg: &LossConfig,
) -> Result<PhaseGradient, IdentError> {
    let mut out = PhaseGradient {
        acm: vec![0.0; phi.acm.param_count()],
        gdm: vec![0.0; phi.gdm.param_count()],
        mixer: vec![0.0; PARAM_COUNT],
    };
    match phase {
        Phase::AcmFit => out.acm = physical_block_grad(phase, phi, batch, &cfg.w)?,
        Phase::GdmFit => out.gdm = physical_block_grad(phase, phi, batch, &cfg.w)?,
        Phase::MixerFit => {
            let xi = xi.ok_or(DynamicsError::MissingMixer)?;
            out.mixer = mixer_block_grad(phi, xi, batch, cfg)?;
        }
    }
    Ok(out)
}

struct Optimizer {
    kind: OptimKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimKind, lr: f64, n: usize) -> Self {
        Self { kind, lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimKind::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= self.lr * g;
                }
            }
            OptimKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..theta.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// One parameter's value before and after identification.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub name: String,
    pub before: f64,
    pub after: f64,
}

/// Per-region one-step RMSE for one mixing mode; a region absent from the
/// data reports None, not zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeRmse {
    pub mode: MixingMode,
    pub acm: Option<f64>,
    pub transition: Option<f64>,
    pub gdm: Option<f64>,
    pub total: Option<f64>,
}

/// Mean per-step loss for one actuation configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub mode: MixingMode,
    pub level_sum: u8,
    pub dr_x_cm: i8,
    pub n: usize,
    pub loss: f64,
}

/// Cumulative free-rollout RMSE over the first k steps, one curve entry per
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    pub id: String,
    pub mode: MixingMode,
    pub rmse: Vec<f64>,
}

/// Training curves, parameter estimates, and evaluation tables.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    /// Full-pool phase loss after every epoch, one curve per phase.
    pub loss_curves: [Vec<f64>; 3],
    pub params: Vec<ParamEstimate>,
    pub region_rmse: Vec<ModeRmse>,
    pub heatmap: Vec<HeatCell>,
    pub cumulative: Vec<CumulativeCurve>,
}

impl FitReport {
    /// Region RMSE table as CSV.
    pub fn rmse_csv(&self) -> String {
        let mut out = String::from("mode,acm,transition,gdm,total\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for r in &self.region_rmse {
            let _ = writeln!(
                out,
                "{:?},{},{},{},{}",
                r.mode,
                fmt(r.acm),
                fmt(r.transition),
                fmt(r.gdm),
                fmt(r.total)
            );
        }
        out
    }

    /// Per-configuration loss table as CSV.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("mode,level_sum,dr_x_cm,n,loss\n");
        for c in &self.heatmap {
            let _ = writeln!(
                out,
                "{:?},{},{},{},{}",
                c.mode, c.level_sum, c.dr_x_cm, c.n, c.loss
            );
        }
        out
    }

    /// Parameter estimates as CSV.
    pub fn params_csv(&self) -> String {
        let mut out = String::from("name,before,after\n");
        for p in &self.params {
            let _ = writeln!(out, "{},{},{}", p.name, p.before, p.after);
        }
        out
    }

    /// Per-phase loss curves as CSV.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("phase,epoch,loss\n");
        for (k, curve) in self.loss_curves.iter().enumerate() {
            for (e, loss) in curve.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", k + 1, e + 1, loss);
            }
        }
        out
    }
}

const PHASE_SALTS: [u64; 3] = [0x741f_3a02, 0x9b1c_55e7, 0x2d60_c1a9];

fn run_phase(
    phase: Phase,
    pool: &[StepSample],
    phi: &mut PhysicalParams,
    xi: &mut MixerParams,
    cfg: &LossConfig,
    epochs: usize,
    lr: f64,
    salt: u64,
) -> Result<Vec<f64>, IdentError> {
    let n_params = match phase {
        Phase::AcmFit => phi.acm.param_count(),
        Phase::GdmFit => phi.gdm.param_count(),
        Phase::MixerFit => PARAM_COUNT,
    };
    let mut opt = Optimizer::new(cfg.optimizer, lr, n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pool[i]));
            let grad = loss_gradient(phase, phi, Some(xi), &batch, cfg)?;
            match phase {
                Phase::AcmFit => {
                    let mut theta = phi.acm.params();
                    opt.step(&mut theta, &grad.acm);
                    phi.acm.set_params(&theta);
                }
                Phase::GdmFit => {
                    let mut theta = phi.gdm.params();
                    opt.step(&mut theta, &grad.gdm);
                    // Drag coefficients are physically nonnegative; project
                    // after every update.
                    for t in &mut theta {
                        *t = t.max(0.0);
                    }
                    phi.gdm.set_params(&theta);
                }
                Phase::MixerFit => {
                    let mut theta = xi.params();
                    opt.step(&mut theta, &grad.mixer);
                    xi.set_params(&theta);
                }
            }
        }
        curve.push(phase_loss(phase, phi, Some(xi), pool, cfg)?);
    }
    Ok(curve)
}

/// The identification schedule: ACM coefficients on pure-ACM steps with
/// λ ≡ 0, GDM coefficients on pure-GDM steps with λ ≡ 1, then the mixer on
/// transition steps with the physical parameters frozen.
pub fn three_phase_train(
    pools: &RegionPools,
    phi0: &PhysicalParams,
    xi0: &MixerParams,
    cfg: &LossConfig,
) -> Result<(PhysicalParams, MixerParams, FitReport), IdentError> {
    cfg.validate()?;
    for (regime, pool) in [
        (Regime::Acm, &pools.acm),
        (Regime::Gdm, &pools.gdm),
        (Regime::Transition, &pools.transition),
    ] {
        if pool.is_empty() {
            return Err(IdentError::EmptyRegion(regime));
        }
    }
    let mut phi = phi0.clone();
    let mut xi = xi0.clone();
    let before: Vec<f64> = phi0
        .acm
        .params()
        .into_iter()
        .chain(phi0.gdm.params())
        .collect();

    let c1 = run_phase(
        Phase::AcmFit,
        &pools.acm,
        &mut phi,
        &mut xi,
        cfg,
        cfg.n1,
        cfg.lr_12,
        PHASE_SALTS[0],
    )?;
    let c2 = run_phase(
        Phase::GdmFit,
        &pools.gdm,
        &mut phi,
        &mut xi,
        cfg,
        cfg.n2,
        cfg.lr_12,
        PHASE_SALTS[1],
    )?;
    let c3 = run_phase(
        Phase::MixerFit,
        &pools.transition,
        &mut phi,
        &mut xi,
        cfg,
        cfg.n3,
        cfg.lr_3,
        PHASE_SALTS[2],
    )?;

    let names: Vec<String> = phi
        .acm
        .param_names()
        .into_iter()
        .chain(phi.gdm.param_names())
        .collect();
    let after: Vec<f64> = phi.acm.params().into_iter().chain(phi.gdm.params()).collect();
    let params = names
        .into_iter()
        .zip(before)
        .zip(after)
        .map(|((name, before), after)| ParamEstimate { name, before, after })
        .collect();
    let report = FitReport { loss_curves: [c1, c2, c3], params, ..FitReport::default() };
    Ok((phi, xi, report))
}

/// Loss-increase ratio per physical parameter under a ±`rel` perturbation,
/// evaluated on that parameter's phase pool. A ratio near 1 means the data
/// does not constrain the parameter.
pub fn parameter_sensitivity(
    phi: &PhysicalParams,
    pools: &RegionPools,
    cfg: &LossConfig,
    rel: f64,
) -> Result<Vec<(String, f64)>, IdentError> {
    let mut out = Vec::new();
    for (phase, pool, names) in [
        (Phase::AcmFit, &pools.acm, phi.acm.param_names()),
        (Phase::GdmFit, &pools.gdm, phi.gdm.param_names()),
    ] {
        let base = prediction_loss(phase, phi, None, pool, &cfg.w)?;
        let theta = match phase {
            Phase::AcmFit => phi.acm.params(),
            _ => phi.gdm.params(),
        };
        let mut work = phi.clone();
        for (i, name) in names.into_iter().enumerate() {
            let mut worst: f64 = 0.0;
            for sign in [1.0, -1.0] {
                let mut probe = theta.clone();
                let delta = rel * theta[i].abs().max(1e-3);
                probe[i] = theta[i] + sign * delta;
                match phase {
                    Phase::AcmFit => work.acm.set_params(&probe),
                    _ => work.gdm.set_params(&probe),
                }
                let loss = prediction_loss(phase, &work, None, pool, &cfg.w)?;
                worst = worst.max(loss / base.max(1e-300));
            }
            out.push((name, worst));
        }
    }
    Ok(out)
}

/// Directional-derivative check of [`loss_gradient`] against an independent
/// central finite difference of the full phase loss.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub phase: Phase,
    pub points: usize,
    pub failures: usize,
    /// |g·d − fd| / (1e-4·|fd| + 1e-7), worst case; ≤ 1 passes.
    pub max_violation: f64,
}

pub fn gradient_check(
    phase: Phase,
    phi: &PhysicalParams,
    xi: &MixerParams,
    batch: &[StepSample],
    cfg: &LossConfig,
    points: usize,
    seed: u64,
) -> Result<GradCheckReport, IdentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut max_violation: f64 = 0.0;
    for _ in 0..points {
        let mut phi_p = phi.clone();
        let mut xi_p = xi.clone();
        // Jitter the active block so each point probes a different parameter
        // neighborhood.
        match phase {
            Phase::AcmFit => {
                let theta: Vec<f64> = phi
                    .acm
                    .params()
                    .iter()
                    .map(|t| t * (1.0 + rng.random_range(-0.1..0.1)) + rng.random_range(-0.01..0.01))
                    .collect();
                phi_p.acm.set_params(&theta);
            }
            Phase::GdmFit => {
                let theta: Vec<f64> = phi
                    .gdm
                    .params()
                    .iter()
                    .map(|t| (t * (1.0 + rng.random_range(-0.1..0.1))).max(0.0))
                    .collect();
                phi_p.gdm.set_params(&theta);
            }
            Phase::MixerFit => {
                let theta: Vec<f64> = xi
                    .params()
                    .iter()
                    .map(|t| t + rng.random_range(-0.05..0.05))
                    .collect();
                xi_p.set_params(&theta);
            }
        }
        let grad = loss_gradient(phase, &phi_p, Some(&xi_p), batch, cfg)?;
        let active = grad.active(phase);
        let mut d: Vec<f64> = (0..active.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut d {
            *x /= norm;
        }
        let dirder: f64 = active.iter().zip(&d).map(|(g, d)| g * d).sum();

        let theta0 = match phase {
            Phase::AcmFit => phi_p.acm.params(),
            Phase::GdmFit => phi_p.gdm.params(),
            Phase::MixerFit => xi_p.params(),
        };
        let scale = theta0.iter().fold(1.0f64, |a, t| a.max(t.abs()));
        let eps = 1e-5 * scale;
        let eval = |offset: f64| -> Result<f64, IdentError> {
            let probe: Vec<f64> =
                theta0.iter().zip(&d).map(|(t, d)| t + offset * d).collect();
            let mut phi_e = phi_p.clone();
            let mut xi_e = xi_p.clone();
            match phase {
                Phase::AcmFit => phi_e.acm.set_params(&probe),
                Phase::GdmFit => phi_e.gdm.set_params(&probe),
                Phase::MixerFit => xi_e.set_params(&probe),
            }
            phase_loss(phase, &phi_e, Some(&xi_e), batch, cfg)
        };
        // The mixer regularizer is C1 but not C2 at the monotonicity hinges;
        // a probe that straddles a hinge inflates the truncation error, so
        // shrink the step until the difference is in its convergence plateau.
        let mut violation = f64::INFINITY;
        let mut h = eps;
        for _ in 0..3 {
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            violation = violation.min((dirder - fd).abs() / (1e-4 * fd.abs() + 1e-7));
            if violation <= 1.0 {
                break;
            }
            h /= 8.0;
        }
        if violation > 1.0 {
            failures += 1;
        }
        max_violation = max_violation.max(violation);
    }
    Ok(GradCheckReport { phase, points, failures, max_violation })
}

/// Aerodynamic wrench implied by the measured state on a quasi-steady
/// segment: the dynamics residual with the acceleration term dropped.
pub fn steady_wrench(x: &StateVector, u: &ControlInput, phi: &PhysicalParams) -> Wrench {
    let (_, c_a) = added_mass_terms(phi, &x.nu);
    let c = coriolis_matrix(phi, u, &x.nu) + c_a;
    let v = c * x.nu + gravity_buoyancy(phi, u, &x.euler()).vector()
        - control_wrench(phi, u).vector()
        - gondola_reaction(phi, u, &x.nu).vector();
    Wrench::from_vector(&v)
}

/// One extracted steady-flight point: flow coordinates, the wrench estimate,
/// and the per-model OLS regressor rows at that state.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadySample {
    pub flow: FlowState,
    pub nu: Vec6,
    pub wrench: Wrench,
    /// 6 × n_acm: wrench rows per ACM coefficient.
    pub acm_regressors: DMatrix<f64>,
    /// 6 × 12: wrench rows per GDM coefficient.
    pub gdm_regressors: DMatrix<f64>,
}

impl SteadySample {
    pub fn new(nu: &Vec6, wrench: Wrench, acm: &AcmCoeffs) -> Self {
        Self {
            flow: flow_state(&Vec3::new(nu[0], nu[1], nu[2])),
            nu: *nu,
            wrench,
            acm_regressors: acm_regressors(acm, nu),
            gdm_regressors: gdm_regressors(nu),
        }
    }

    /// Left-right mirrored copy for symmetry augmentation.
    pub fn mirrored(&self, acm: &AcmCoeffs) -> Self {
        let m = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let nu_m = Vec6::from_fn(|i, _| m[i] * self.nu[i]);
        Self::new(&nu_m, crate::dataio::mirror_wrench(&self.wrench), acm)
    }
}

/// Wrench rows of the ACM model as a linear map of its coefficient vector:
/// `acm_regressors(c, ν) · c.params() == acm_wrench(c, ν).vector()`.
pub fn acm_regressors(c: &AcmCoeffs, nu: &Vec6) -> DMatrix<f64> {
    let fs = flow_state(&Vec3::new(nu[0], nu[1], nu[2]));
    let q = 0.5 * c.rho * fs.speed * fs.speed * c.area;
    let r = crate::mathcore::rotation_velocity_to_body(&fs);
    let mut cols: Vec<Vec6> = Vec::with_capacity(c.param_count());
    // Surface order matches AcmCoeffs::params: cd, cs, cl, cm1, cm2, cm3.
    // Load axis and sign per surface: drag −x, side +y, lift −z in the
    // velocity frame; moments follow the velocity-frame axes directly.
    let surfaces: [(&crate::aero::PolySurface, usize, f64, bool); 6] = [
        (&c.cd, 0, -1.0, false),
        (&c.cs, 1, 1.0, false),
        (&c.cl, 2, -1.0, false),
        (&c.cm1, 0, 1.0, true),
        (&c.cm2, 1, 1.0, true),
        (&c.cm3, 2, 1.0, true),
    ];
    for (surface, axis, sign, is_moment) in surfaces {
        for b in surface.basis_values(fs.alpha, fs.beta) {
            let body = r * (sign * q * b * Vec3::ith_axis(axis).into_inner());
            let mut col = Vec6::zeros();
            for k in 0..3 {
                col[if is_moment { 3 + k } else { k }] = body[k];
            }
            cols.push(col);
        }
    }
    // Rotational damping K1..K3 joins the moment triple before the same
    // velocity-frame rotation as the coefficient surfaces.
    for k in 0..3 {
        let body = r * (nu[3 + k] * Vec3::ith_axis(k).into_inner());
        let mut col = Vec6::zeros();
        for i in 0..3 {
            col[3 + i] = body[i];
        }
        cols.push(col);
    }
    DMatrix::from_fn(6, cols.len(), |i, j| cols[j][i])
}

/// Wrench rows of the GDM as a linear map of [dl, dq]:
/// `gdm_regressors(ν) · θ == gdm_wrench(θ, ν).vector()`.
pub fn gdm_regressors(nu: &Vec6) -> DMatrix<f64> {
    DMatrix::from_fn(6, 12, |i, j| {
        if j == i {
            -nu[i]
        } else if j == i + 6 {
            -nu[i].abs() * nu[i]
        } else {
            0.0
        }
    })
}

pub const STEADY_WINDOW_S: f64 = 1.0;
pub const STEADY_ACCEL_FRAC: f64 = 0.05;
pub const STEADY_YAW_FRAC: f64 = 0.05;
pub const STEADY_YAW_FLOOR: f64 = 0.05;

/// Steady samples from non-overlapping one-second windows. A window
/// qualifies when the finite-differenced acceleration stays below
/// `STEADY_ACCEL_FRAC` of the mean speed per second and the yaw rate varies
/// by less than `STEADY_YAW_FRAC` of its mean (with a floor for
/// near-straight flight). The window-center sample is evaluated.
pub fn extract_steady_samples(
    records: &[TrajectoryRecord],
    phi: &PhysicalParams,
) -> Vec<SteadySample> {
    let mut out = Vec::new();
    for rec in records {
        let dt = rec.dt();
        let w = (rec.rate * STEADY_WINDOW_S).round() as usize;
        if w < 3 || rec.samples.len() < w {
            continue;
        }
        let nu_dot = |i: usize| -> Vec6 {
            if i == 0 {
                (rec.samples[1].nu - rec.samples[0].nu) / dt
            } else if i == rec.samples.len() - 1 {
                (rec.samples[i].nu - rec.samples[i - 1].nu) / dt
            } else {
                (rec.samples[i + 1].nu - rec.samples[i - 1].nu) / (2.0 * dt)
            }
        };
        for start in (0..=rec.samples.len() - w).step_by(w) {
            let window = &rec.samples[start..start + w];
            let mean_speed =
                window.iter().map(|s| s.nu.norm()).sum::<f64>() / w as f64;
            let max_accel = (start..start + w)
                .map(|i| nu_dot(i).norm())
                .fold(0.0f64, f64::max);
            if max_accel >= STEADY_ACCEL_FRAC * mean_speed {
                continue;
            }
            let mean_r = window.iter().map(|s| s.nu[5]).sum::<f64>() / w as f64;
            let max_dev = window
                .iter()
                .map(|s| (s.nu[5] - mean_r).abs())
                .fold(0.0f64, f64::max);
            if max_dev > STEADY_YAW_FRAC * mean_r.abs().max(STEADY_YAW_FLOOR) {
                continue;
            }
            let center = &window[w / 2];
            let wrench = steady_wrench(&center.state(), &center.input(), phi);
            out.push(SteadySample::new(&center.nu, wrench, &phi.acm));
        }
    }
    out
}

/// Diagonal added-mass estimate from the motion-onset prefix of each record:
/// per axis, OLS of the inertial residual on the measured acceleration over
/// the first 0.25 s, where aerodynamic and Coriolis terms are second order.
/// Axes without acceleration content keep their prior value; results are
/// clamped nonnegative.
pub fn fit_added_mass(records: &[TrajectoryRecord], phi: &PhysicalParams) -> [f64; 6] {
    let mut num = [0.0f64; 6];
    let mut den = [0.0f64; 6];
    for rec in records {
        let dt = rec.dt();
        let n_prefix = ((0.25 * rec.rate).round() as usize).min(rec.samples.len());
        for i in 1..n_prefix.saturating_sub(1) {
            let nu_dot = (rec.samples[i + 1].nu - rec.samples[i - 1].nu) / (2.0 * dt);
            let s = &rec.samples[i];
            let u = s.input();
            let e = s.state().euler();
            let rhs = control_wrench(phi, &u).vector()
                + gondola_reaction(phi, &u, &s.nu).vector()
                - coriolis_matrix(phi, &u, &s.nu) * s.nu
                - gravity_buoyancy(phi, &u, &e).vector();
            let y = rhs - mass_matrix(phi, &u) * nu_dot;
            for k in 0..6 {
                num[k] += nu_dot[k] * y[k];
                den[k] += nu_dot[k] * nu_dot[k];
            }
        }
    }
    std::array::from_fn(|k| {
        if den[k] > 1e-12 {
            (num[k] / den[k]).max(0.0)
        } else {
            phi.added_mass[k]
        }
    })
}

/// Which linear basis an OLS fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Acm,
    Gdm,
}

fn regressors_of(s: &SteadySample, kind: BasisKind) -> &DMatrix<f64> {
    match kind {
        BasisKind::Acm => &s.acm_regressors,
        BasisKind::Gdm => &s.gdm_regressors,
    }
}

/// Goodness of fit inside one (α, V) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub n: usize,
    pub r_squared: f64,
}

/// OLS result: coefficients, global fit quality, and per-cell diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub kind: BasisKind,
    pub coeffs: Vec<f64>,
    pub residual_rms: f64,
    pub r_squared: f64,
    pub cells: Vec<CellStat>,
}

const RANK_TOL: f64 = 1e-10;
const OLS_CELL_GRID: usize = 6;

pub(crate) fn ols_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>, IdentError> {
    let needed = x.ncols();
    if x.nrows() < needed {
        return Err(IdentError::RankDeficient { rank: x.nrows(), needed });
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax.max(1e-300)).count();
    if rank < needed && smax > 0.0 {
        return Err(IdentError::RankDeficient { rank, needed });
    }
    // An all-zero regressor matrix only happens with all-zero targets
    // (rest samples); the zero solution is exact there.
    if smax == 0.0 {
        if y.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; needed]);
        }
        return Err(IdentError::RankDeficient { rank: 0, needed });
    }
    let beta = svd
        .solve(y, RANK_TOL * smax)
        .map_err(|_| IdentError::RankDeficient { rank, needed })?;
    Ok(beta.iter().copied().collect())
}

fn residual_sq(s: &SteadySample, kind: BasisKind, beta: &DVector<f64>) -> f64 {
    let pred = regressors_of(s, kind) * beta;
    (s.wrench.vector() - Vec6::from_iterator(pred.iter().copied())).norm_squared()
}

fn group_r_squared(members: &[&SteadySample], kind: BasisKind, beta: &DVector<f64>) -> f64 {
    let n = members.len() as f64;
    let mean = members.iter().fold(Vec6::zeros(), |a, s| a + s.wrench.vector()) / n;
    let ss_tot: f64 = members
        .iter()
        .map(|s| (s.wrench.vector() - mean).norm_squared())
        .sum();
    let ss_res: f64 = members.iter().map(|s| residual_sq(s, kind, beta)).sum();
    1.0 - ss_res / ss_tot.max(1e-300)
}

/// Least squares over the stacked 6-row wrench systems of every sample, with
/// R² binned over an (α, V) grid spanning the data.
pub fn ols_fit(samples: &[SteadySample], kind: BasisKind) -> Result<OlsFit, IdentError> {
    let needed = match kind {
        BasisKind::Acm => samples
            .first()
            .map_or(0, |s| s.acm_regressors.ncols()),
        BasisKind::Gdm => 12,
    };
    if samples.is_empty() {
        return Err(IdentError::RankDeficient { rank: 0, needed });
    }
    let mut x = DMatrix::zeros(6 * samples.len(), needed);
    let mut y = DVector::zeros(6 * samples.len());
    for (si, s) in samples.iter().enumerate() {
        x.view_mut((6 * si, 0), (6, needed))
            .copy_from(regressors_of(s, kind));
        for k in 0..6 {
            y[6 * si + k] = s.wrench.vector()[k];
        }
    }
    let coeffs = ols_solve(&x, &y)?;
    let beta = DVector::from_column_slice(&coeffs);
    let all: Vec<&SteadySample> = samples.iter().collect();
    let r_squared = group_r_squared(&all, kind, &beta);
    let ss_res: f64 = samples.iter().map(|s| residual_sq(s, kind, &beta)).sum();
    let residual_rms = (ss_res / (6.0 * samples.len() as f64)).sqrt();

    let (a_lo, a_hi) = extent(samples.iter().map(|s| s.flow.alpha));
    let (v_lo, v_hi) = extent(samples.iter().map(|s| s.flow.speed));
    let g = OLS_CELL_GRID;
    let mut cells = Vec::new();
    for i in 0..g {
        for j in 0..g {
            let cell_a = (
                a_lo + (a_hi - a_lo) * i as f64 / g as f64,
                a_lo + (a_hi - a_lo) * (i + 1) as f64 / g as f64,
            );
            let cell_v = (
                v_lo + (v_hi - v_lo) * j as f64 / g as f64,
                v_lo + (v_hi - v_lo) * (j + 1) as f64 / g as f64,
            );
            let members: Vec<&SteadySample> = samples
                .iter()
                .filter(|s| {
                    in_bin(s.flow.alpha, cell_a, i + 1 == g)
                        && in_bin(s.flow.speed, cell_v, j + 1 == g)
                })
                .collect();
            let r2 = if members.len() >= 2 {
                group_r_squared(&members, kind, &beta)
            } else {
                f64::NAN
            };
            cells.push(CellStat {
                alpha_lo: cell_a.0,
                alpha_hi: cell_a.1,
                v_lo: cell_v.0,
                v_hi: cell_v.1,
                n: members.len(),
                r_squared: r2,
            });
        }
    }
    Ok(OlsFit { kind, coeffs, residual_rms, r_squared, cells })
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn in_bin(v: f64, (lo, hi): (f64, f64), last: bool) -> bool {
    v >= lo && (v < hi || (last && v <= hi))
}

/// Goodness of fit along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub r_squared: f64,
}

/// Axis-binned R² of a fixed coefficient vector, the input to threshold
/// selection. Each axis is conditioned on the other so the L-shaped
/// transition region cannot contaminate both scans: the α sweep uses
/// high-speed samples, the V sweep low-α samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub alpha_bins: Vec<AxisBin>,
    pub v_bins: Vec<AxisBin>,
}

pub const MIN_BIN_SAMPLES: usize = 4;
pub const MIN_AXIS_BINS: usize = 4;
pub const PLATEAU_DROP: f64 = 0.8;

fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() as f64 * q) as usize).min(values.len() - 1);
    values[idx]
}

fn axis_bins(
    samples: &[&SteadySample],
    key: impl Fn(&SteadySample) -> f64,
    kind: BasisKind,
    beta: &DVector<f64>,
    bins: usize,
) -> Vec<AxisBin> {
    let (lo, hi) = extent(samples.iter().map(|s| key(*s)));
    (0..bins)
        .map(|i| {
            let b_lo = lo + (hi - lo) * i as f64 / bins as f64;
            let b_hi = lo + (hi - lo) * (i + 1) as f64 / bins as f64;
            let members: Vec<&SteadySample> = samples
                .iter()
                .filter(|s| in_bin(key(**s), (b_lo, b_hi), i + 1 == bins))
                .copied()
                .collect();
            let r2 = if members.len() >= 2 {
                group_r_squared(&members, kind, beta)
            } else {
                f64::NAN
            };
            AxisBin { lo: b_lo, hi: b_hi, n: members.len(), r_squared: r2 }
        })
        .collect()
}

pub fn binned_diagnostics(
    samples: &[SteadySample],
    fit: &OlsFit,
    bins: usize,
) -> FitDiagnostics {
    let beta = DVector::from_column_slice(&fit.coeffs);
    let lo_alpha = quantile(samples.iter().map(|s| s.flow.alpha).collect(), 0.4);
    let hi_v = quantile(samples.iter().map(|s| s.flow.speed).collect(), 0.6);
    let high_speed: Vec<&SteadySample> =
        samples.iter().filter(|s| s.flow.speed >= hi_v).collect();
    let low_alpha: Vec<&SteadySample> =
        samples.iter().filter(|s| s.flow.alpha <= lo_alpha).collect();
    FitDiagnostics {
        alpha_bins: axis_bins(&high_speed, |s| s.flow.alpha, fit.kind, &beta, bins),
        v_bins: axis_bins(&low_alpha, |s| s.flow.speed, fit.kind, &beta, bins),
    }
}

/// Scan one axis outward from its plateau end for the first bin whose R²
/// falls below `PLATEAU_DROP` times the plateau level. Returns the inner
/// edge of that bin. `bins` must already be in scan order.
fn scan_axis(bins: Vec<&AxisBin>, axis: &'static str, inner_edge: impl Fn(&AxisBin) -> f64, outer_edge: impl Fn(&AxisBin) -> f64) -> Result<f64, IdentError> {
    let populated: Vec<&AxisBin> =
        bins.into_iter().filter(|b| b.n >= MIN_BIN_SAMPLES).collect();
    if populated.len() < MIN_AXIS_BINS {
        return Err(IdentError::InsufficientCoverage {
            axis,
            nonempty: populated.len(),
            needed: MIN_AXIS_BINS,
        });
    }
    let k = (populated.len() / 4).max(2);
    let plateau = populated[..k].iter().map(|b| b.r_squared).sum::<f64>() / k as f64;
    for bin in &populated[k..] {
        if bin.r_squared < PLATEAU_DROP * plateau {
            return Ok(inner_edge(bin));
        }
    }
    let last = populated.last().unwrap();
    log::warn!(
        "no goodness-of-fit drop along the {axis} axis; \
         placing the switching point at the data edge"
    );
    let edge = outer_edge(last);
    // A star at zero would degenerate the partition; fall back to the
    // outermost bin's midpoint.
    Ok(if edge > 0.0 { edge } else { 0.5 * (last.lo + last.hi) })
}

/// Switching points from fit-degradation diagnostics: the star on each axis
/// sits where binned R² first drops below 0.8× its pure-region plateau, and
/// the band edges are ±20% around the stars.
pub fn select_thresholds(diag: &FitDiagnostics) -> Result<RegimePartition, IdentError> {
    let alpha_star = scan_axis(
        diag.alpha_bins.iter().collect(),
        "alpha",
        |b| b.lo,
        |b| b.hi,
    )?;
    let v_star = scan_axis(
        diag.v_bins.iter().rev().collect(),
        "V",
        |b| b.hi,
        |b| b.lo,
    )?;
    let part = RegimePartition::from_stars(alpha_star, v_star);
    part.validate()?;
    Ok(part)
}

/// The full threshold pipeline: fit the ACM basis on the small-α/high-V
/// corner of the data, bin R² along both axes, and scan for the drop.
pub fn threshold_scan(
    samples: &[SteadySample],
    bins: usize,
) -> Result<(RegimePartition, OlsFit, FitDiagnostics), IdentError> {
    let lo_alpha = quantile(samples.iter().map(|s| s.flow.alpha).collect(), 0.4);
    let hi_v = quantile(samples.iter().map(|s| s.flow.speed).collect(), 0.6);
    let corner: Vec<SteadySample> = samples
        .iter()
        .filter(|s| s.flow.alpha <= lo_alpha && s.flow.speed >= hi_v)
        .cloned()
        .collect();
    let needed = samples.first().map_or(13, |s| s.acm_regressors.ncols());
    let fit = if corner.len() * 6 >= 2 * needed {
        ols_fit(&corner, BasisKind::Acm)?
    } else {
        ols_fit(samples, BasisKind::Acm)?
    };
    let diag = binned_diagnostics(samples, &fit, bins);
    let part = select_thresholds(&diag)?;
    Ok((part, fit, diag))
}

/// Reynolds number ρVL/μ.
pub fn reynolds(v: f64, l: f64, rho: f64, mu: f64) -> f64 {
    assert!(mu > 0.0, "viscosity must be positive");
    rho * v * l / mu
}

/// Mean |λ̂ − λ_ref| over a grid restricted to the transition band.
pub fn lambda_mae(
    xi: &MixerParams,
    reference: &dyn Fn(f64, f64) -> f64,
    part: &RegimePartition,
    alpha_max: f64,
    v_max: f64,
    n: usize,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let alpha = alpha_max * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let speed = v_max * j as f64 / (n - 1) as f64;
            let f = FlowState { alpha, beta: 0.0, speed };
            if classify_regime(part, &f) == Regime::Transition {
                total += (xi.eval(alpha, speed) - reference(alpha, speed)).abs();
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

/// Evaluation horizon: anchor each prediction at the measured state, or let
/// the model roll freely from the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    OneStep,
    Free,
}

struct Accum {
    sum: f64,
    n: usize,
}

impl Accum {
    fn new() -> Self {
        Self { sum: 0.0, n: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn rmse(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sum / self.n as f64).sqrt())
    }

    fn mean(&self) -> f64 {
        self.sum / self.n.max(1) as f64
    }
}

/// Per-region and total prediction RMSE per mode, a per-configuration loss
/// table, and a cumulative RMSE curve for the longest trajectory.
pub fn evaluate(
    records: &[TrajectoryRecord],
    modes: &[MixingMode],
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    part: &RegimePartition,
    w: &[f64; 12],
    horizon: Horizon,
) -> Result<FitReport, IdentError> {
    let mut report = FitReport::default();
    let longest = records.iter().max_by_key(|r| r.samples.len());
    for &mode in modes {
        let mut acm = Accum::new();
        let mut transition = Accum::new();
        let mut gdm = Accum::new();
        let mut total = Accum::new();
        let mut heat: BTreeMap<(u8, i8), Accum> = BTreeMap::new();
        for rec in records {
            let steps = rec.steps();
            let errors = step_errors(&steps, mode, phi, xi, part, w, horizon)?;
            let key = (rec.level_l + rec.level_r, rec.dr_x_cm);
            for (step, err) in steps.iter().zip(&errors) {
                let Some(err) = *err else { continue };
                match classify_regime(part, &step.state.flow()) {
                    Regime::Acm => acm.push(err),
                    Regime::Transition => transition.push(err),
                    Regime::Gdm => gdm.push(err),
                }
                total.push(err);
                heat.entry(key).or_insert_with(Accum::new).push(err);
            }
        }
        report.region_rmse.push(ModeRmse {
            mode,
            acm: acm.rmse(),
            transition: transition.rmse(),
            gdm: gdm.rmse(),
            total: total.rmse(),
        });
        for ((level_sum, dr_x_cm), a) in &heat {
            report.heatmap.push(HeatCell {
                mode,
                level_sum: *level_sum,
                dr_x_cm: *dr_x_cm,
                n: a.n,
                loss: a.mean(),
            });
        }
        if let Some(rec) = longest {
            report.cumulative.push(CumulativeCurve {
                id: rec.id.clone(),
                mode,
                rmse: cumulative_rmse(rec, mode, phi, xi, part, w)?,
            });
        }
    }
    Ok(report)
}

/// Per-step weighted squared errors for one record under one mode. One-step
/// errors re-anchor at the measurement; free errors follow the model's own
/// trajectory and stop early if it diverges.
fn step_errors(
    steps: &[StepSample],
    mode: MixingMode,
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    part: &RegimePartition,
    w: &[f64; 12],
    horizon: Horizon,
) -> Result<Vec<Option<f64>>, IdentError> {
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let cache = FactorCache::build(phi, steps)?;
    match horizon {
        Horizon::OneStep => steps
            .par_iter()
            .map(|step| {
                let lam = lambda_for(mode, xi, Some(part), &step.state.flow())?;
                let pred =
                    step_with_lambda(&step.state, &step.input, phi, cache.get(&step.input), lam, step.dt)?;
                Ok(Some(weighted_sq_error(&pred, &step.next, w)))
            })
            .collect(),
        Horizon::Free => {
            let mut out = vec![None; steps.len()];
            let mut x = steps[0].state;
            for (i, step) in steps.iter().enumerate() {
                let lam = match lambda_for(mode, xi, Some(part), &x.flow()) {
                    Ok(lam) => lam,
                    Err(DynamicsError::MissingMixer) => {
                        return Err(DynamicsError::MissingMixer.into())
                    }
                    Err(_) => break,
                };
                match step_with_lambda(&x, &step.input, phi, cache.get(&step.input), lam, step.dt)
                {
                    Ok(next) if next.is_finite() => {
                        out[i] = Some(weighted_sq_error(&next, &step.next, w));
                        x = next;
                    }
                    _ => break,
                }
            }
            Ok(out)
        }
    }
}

/// Cumulative RMSE of a free rollout against the record, entry k covering
/// steps 0..=k. Truncated if the rollout diverges.
pub fn cumulative_rmse(
    rec: &TrajectoryRecord,
    mode: MixingMode,
    phi: &PhysicalParams,
    xi: Option<&MixerParams>,
    part: &RegimePartition,
    w: &[f64; 12],
) -> Result<Vec<f64>, IdentError> {
    let steps = rec.steps();
    let errors = step_errors(&steps, mode, phi, xi, part, w, Horizon::Free)?;
    let mut out = Vec::new();
    let mut sum = 0.0;
    for (k, err) in errors.iter().enumerate() {
        let Some(err) = *err else { break };
        sum += err;
        out.push((sum / (k + 1) as f64).sqrt());
    }
    Ok(out)
}
