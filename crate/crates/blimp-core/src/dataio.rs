//! Dataset plumbing: the trajectory CSV format, left-right mirroring,
//! regime-pool partitioning, train/test splitting, thrust tables, and the
//! TOML run configuration.
//!
//! Canonical trajectory file: optional `# key=value ...` metadata line, then
//! the header `t,x,y,z,phi,theta,psi,u,v,w,p,q,r,Fl_gf,Fr_gf,rbar_x,rbar_y,
//! rbar_z`, one row per sample. Everything is SI except the thrust columns
//! (gram-force, the unit thrust benches report). The six velocity columns may
//! be omitted together, in which case ν is reconstructed from the pose by
//! central differences.

use crate::dynamics::{classify_regime, Regime, RegimePartition, StateVector};
use crate::ident::LossConfig;
use crate::mathcore::{euler_rate_map, rotation_body_to_inertial, MathError, Vec3, Vec6};
use crate::mixer::{MixerError, MonoSign, RegGrids};
use crate::rigidbody::{ControlInput, PhysicalParams, Wrench, GF_TO_N};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: timestep {got_dt:.6} s deviates from nominal {expected_dt:.6} s")]
    Rate { line: usize, expected_dt: f64, got_dt: f64 },
    #[error("invalid record: {0}")]
    BadRecord(String),
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("velocity reconstruction failed at sample {index}: {source}")]
    Reconstruction { index: usize, source: MathError },
    #[error(transparent)]
    Mixer(#[from] MixerError),
}

/// One motion-capture sample: time, pose, body velocity, and actuation.
/// Thrusts are stored in newtons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub eta: Vec6,
    pub nu: Vec6,
    pub fl: f64,
    pub fr: f64,
    pub r_bar: Vec3,
}

impl TrajectorySample {
    pub fn state(&self) -> StateVector {
        StateVector::new(self.eta, self.nu)
    }

    /// Static-gondola control input for this sample.
    pub fn input(&self) -> ControlInput {
        ControlInput::steady(self.fl, self.fr, self.r_bar)
    }
}

/// One recorded trial: a configuration key (thrust levels, gondola shift),
/// sample rate, and the sample sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub id: String,
    /// Left/right thruster PWM level, 0..=8.
    pub level_l: u8,
    pub level_r: u8,
    /// Gondola x-shift from neutral, whole centimeters in −5..=+5.
    pub dr_x_cm: i8,
    /// Sample rate [Hz].
    pub rate: f64,
    pub samples: Vec<TrajectorySample>,
}

impl TrajectoryRecord {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn config_key(&self) -> (u8, u8, i8) {
        (self.level_l, self.level_r, self.dr_x_cm)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.len() < 2 {
            return Err(DataError::BadRecord(format!(
                "{}: need at least 2 samples, got {}",
                self.id,
                self.samples.len()
            )));
        }
        if self.level_l > 8 || self.level_r > 8 {
            return Err(DataError::BadRecord(format!(
                "{}: thrust level out of 0..=8",
                self.id
            )));
        }
        if !(-5..=5).contains(&self.dr_x_cm) {
            return Err(DataError::BadRecord(format!(
                "{}: dr_x_cm {} out of -5..=5",
                self.id, self.dr_x_cm
            )));
        }
        if !(self.rate > 0.0) {
            return Err(DataError::BadRecord(format!("{}: rate must be positive", self.id)));
        }
        let dt = self.dt();
        for (i, pair) in self.samples.windows(2).enumerate() {
            let got = pair[1].t - pair[0].t;
            if !((got - dt).abs() <= 0.01 * dt) {
                return Err(DataError::Rate { line: i + 2, expected_dt: dt, got_dt: got });
            }
        }
        Ok(())
    }

    /// One-step prediction tuples (state, input, next state).
    pub fn steps(&self) -> Vec<StepSample> {
        let dt = self.dt();
        self.samples
            .windows(2)
            .map(|pair| StepSample {
                state: pair[0].state(),
                input: pair[0].input(),
                next: pair[1].state(),
                dt,
            })
            .collect()
    }
}

/// A single supervised prediction pair: integrate `state` under `input` for
/// `dt` and compare against `next`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    pub state: StateVector,
    pub input: ControlInput,
    pub next: StateVector,
    pub dt: f64,
}

const HEADER: &str = "t,x,y,z,phi,theta,psi,u,v,w,p,q,r,Fl_gf,Fr_gf,rbar_x,rbar_y,rbar_z";

fn parse_field(token: &str, line: usize, name: &str) -> Result<f64, DataError> {
    token.trim().parse::<f64>().map_err(|e| DataError::Parse {
        line,
        message: format!("column {name}: {e} (got {token:?})"),
    })
}

/// Parse the canonical CSV format. `default_id` is used when the metadata
/// line does not carry an id (typically the file stem).
pub fn parse_trajectory(text: &str, default_id: &str) -> Result<TrajectoryRecord, DataError> {
    let mut id = default_id.to_string();
    let mut level_l = 0u8;
    let mut level_r = 0u8;
    let mut dr_x_cm = 0i8;
    let mut rate: Option<f64> = None;

    let mut lines = text.lines().enumerate().peekable();
    if let Some((line, raw)) = lines.peek().copied() {
        if raw.trim_start().starts_with('#') {
            for kv in raw.trim_start_matches(['#', ' ']).split_whitespace() {
                let Some((key, value)) = kv.split_once('=') else {
                    return Err(DataError::Parse {
                        line: line + 1,
                        message: format!("metadata token {kv:?} is not key=value"),
                    });
                };
                let bad = |e: &dyn std::fmt::Display| DataError::Parse {
                    line: line + 1,
                    message: format!("metadata {key}: {e}"),
                };
                match key {
                    "id" => id = value.to_string(),
                    "level_l" => level_l = value.parse().map_err(|e| bad(&e))?,
                    "level_r" => level_r = value.parse().map_err(|e| bad(&e))?,
                    "dr_x_cm" => dr_x_cm = value.parse().map_err(|e| bad(&e))?,
                    "rate_hz" => rate = Some(value.parse().map_err(|e| bad(&e))?),
                    other => {
                        return Err(DataError::Parse {
                            line: line + 1,
                            message: format!("unknown metadata key {other:?}"),
                        })
                    }
                }
            }
            lines.next();
        }
    }

    let Some((hline, header)) = lines.next() else {
        return Err(DataError::Parse { line: 1, message: "empty file".into() });
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| cols.iter().position(|c| *c == name);
    let required = [
        "t", "x", "y", "z", "phi", "theta", "psi", "Fl_gf", "Fr_gf", "rbar_x", "rbar_y",
        "rbar_z",
    ];
    for name in required {
        if col(name).is_none() {
            return Err(DataError::Parse {
                line: hline + 1,
                message: format!("missing required column {name:?}"),
            });
        }
    }
    let vel_names = ["u", "v", "w", "p", "q", "r"];
    let vel_present = vel_names.iter().filter(|n| col(n).is_some()).count();
    if vel_present != 0 && vel_present != vel_names.len() {
        return Err(DataError::Parse {
            line: hline + 1,
            message: "velocity columns must be all present or all absent".into(),
        });
    }
    let has_velocity = vel_present == vel_names.len();

    let mut samples = Vec::new();
    for (lineno, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let line = lineno + 1;
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != cols.len() {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let get = |name: &str| parse_field(fields[col(name).unwrap()], line, name);
        let eta = Vec6::new(
            get("x")?,
            get("y")?,
            get("z")?,
            get("phi")?,
            get("theta")?,
            get("psi")?,
        );
        let nu = if has_velocity {
            Vec6::new(get("u")?, get("v")?, get("w")?, get("p")?, get("q")?, get("r")?)
        } else {
            Vec6::zeros()
        };
        samples.push(TrajectorySample {
            t: get("t")?,
            eta,
            nu,
            fl: get("Fl_gf")? * GF_TO_N,
            fr: get("Fr_gf")? * GF_TO_N,
            r_bar: Vec3::new(get("rbar_x")?, get("rbar_y")?, get("rbar_z")?),
        });
    }
    if samples.len() < 2 {
        return Err(DataError::Parse {
            line: text.lines().count(),
            message: format!("need at least 2 samples, got {}", samples.len()),
        });
    }
    let rate = rate.unwrap_or_else(|| {
        let dt = (samples[samples.len() - 1].t - samples[0].t) / (samples.len() - 1) as f64;
        1.0 / dt
    });
    let mut rec = TrajectoryRecord { id, level_l, level_r, dr_x_cm, rate, samples };
    rec.validate()?;
    if !has_velocity {
        reconstruct_velocities(&mut rec)?;
    }
    Ok(rec)
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryRecord, DataError> {
    let text = std::fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
    parse_trajectory(&text, stem)
}

pub fn format_trajectory(rec: &TrajectoryRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# id={} level_l={} level_r={} dr_x_cm={} rate_hz={}",
        rec.id, rec.level_l, rec.level_r, rec.dr_x_cm, rec.rate
    );
    out.push_str(HEADER);
    out.push('\n');
    for s in &rec.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t,
            s.eta[0],
            s.eta[1],
            s.eta[2],
            s.eta[3],
            s.eta[4],
            s.eta[5],
            s.nu[0],
            s.nu[1],
            s.nu[2],
            s.nu[3],
            s.nu[4],
            s.nu[5],
            s.fl / GF_TO_N,
            s.fr / GF_TO_N,
            s.r_bar[0],
            s.r_bar[1],
            s.r_bar[2],
        );
    }
    out
}

pub fn save_trajectory(path: &Path, rec: &TrajectoryRecord) -> Result<(), DataError> {
    std::fs::write(path, format_trajectory(rec))?;
    Ok(())
}

/// Load every `*.csv` under a directory as a trajectory.
pub fn load_dir(dir: &Path) -> Result<Vec<TrajectoryRecord>, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_trajectory(p)).collect()
}

fn unwrap_angles(series: &mut [f64]) {
    for i in 1..series.len() {
        let mut d = series[i] - series[i - 1];
        while d > PI {
            series[i] -= 2.0 * PI;
            d = series[i] - series[i - 1];
        }
        while d < -PI {
            series[i] += 2.0 * PI;
            d = series[i] - series[i - 1];
        }
    }
}

/// Fill ν from the pose sequence: central differences of (unwrapped) η, the
/// linear part rotated into the body frame, the angular part mapped through
/// the inverse Euler-rate matrix. Endpoints use one-sided differences.
pub fn reconstruct_velocities(rec: &mut TrajectoryRecord) -> Result<(), DataError> {
    let n = rec.samples.len();
    let dt = rec.dt();
    let mut angles: [Vec<f64>; 3] =
        std::array::from_fn(|k| rec.samples.iter().map(|s| s.eta[3 + k]).collect());
    for series in &mut angles {
        unwrap_angles(series);
    }
    let eta_at = |i: usize, angles: &[Vec<f64>; 3]| {
        let s = &rec.samples[i];
        Vec6::new(s.eta[0], s.eta[1], s.eta[2], angles[0][i], angles[1][i], angles[2][i])
    };
    let mut nus = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi, span) = if i == 0 {
            (0, 1, dt)
        } else if i == n - 1 {
            (n - 2, n - 1, dt)
        } else {
            (i - 1, i + 1, 2.0 * dt)
        };
        let eta_dot = (eta_at(hi, &angles) - eta_at(lo, &angles)) / span;
        let e = rec.samples[i].state().euler();
        let rot = rotation_body_to_inertial(&e);
        let v = rot.transpose() * Vec3::new(eta_dot[0], eta_dot[1], eta_dot[2]);
        let map = euler_rate_map(&e)
            .map_err(|source| DataError::Reconstruction { index: i, source })?;
        let omega = map
            .try_inverse()
            .ok_or(DataError::Reconstruction {
                index: i,
                source: MathError::GimbalSingularity { pitch: e.pitch },
            })?
            * Vec3::new(eta_dot[3], eta_dot[4], eta_dot[5]);
        nus.push(Vec6::new(v[0], v[1], v[2], omega[0], omega[1], omega[2]));
    }
    for (s, nu) in rec.samples.iter_mut().zip(nus) {
        s.nu = nu;
    }
    Ok(())
}

/// Flip a state across the body x-z plane: negate y, φ, ψ, v, p, r.
pub fn mirror_state(x: &StateVector) -> StateVector {
    let m = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
    StateVector::new(
        Vec6::from_fn(|i, _| m[i] * x.eta[i]),
        Vec6::from_fn(|i, _| m[i] * x.nu[i]),
    )
}

/// Mirror an input: swap the thrusters, negate lateral gondola coordinates.
pub fn mirror_input(u: &ControlInput) -> ControlInput {
    let flip = |v: &Vec3| Vec3::new(v[0], -v[1], v[2]);
    ControlInput {
        fl: u.fr,
        fr: u.fl,
        r_bar: flip(&u.r_bar),
        r_bar_dot: flip(&u.r_bar_dot),
        r_bar_ddot: flip(&u.r_bar_ddot),
    }
}

/// Mirror a wrench: negate lateral force and the roll/yaw moments.
pub fn mirror_wrench(w: &Wrench) -> Wrench {
    Wrench {
        force: Vec3::new(w.force[0], -w.force[1], w.force[2]),
        moment: Vec3::new(-w.moment[0], w.moment[1], -w.moment[2]),
    }
}

/// Left-right symmetry augmentation. Involution: mirroring twice restores
/// the original record, including the id.
pub fn mirror_trajectory(rec: &TrajectoryRecord) -> TrajectoryRecord {
    const SUFFIX: &str = ".mirror";
    let id = match rec.id.strip_suffix(SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{}{SUFFIX}", rec.id),
    };
    TrajectoryRecord {
        id,
        level_l: rec.level_r,
        level_r: rec.level_l,
        dr_x_cm: rec.dr_x_cm,
        rate: rec.rate,
        samples: rec
            .samples
            .iter()
            .map(|s| {
                let x = mirror_state(&s.state());
                let u = mirror_input(&s.input());
                TrajectorySample {
                    t: s.t,
                    eta: x.eta,
                    nu: x.nu,
                    fl: u.fl,
                    fr: u.fr,
                    r_bar: u.r_bar,
                }
            })
            .collect(),
    }
}

/// Step tuples bucketed by the regime of their start state.
#[derive(Debug, Clone, Default)]
pub struct RegionPools {
    pub acm: Vec<StepSample>,
    pub transition: Vec<StepSample>,
    pub gdm: Vec<StepSample>,
}

impl RegionPools {
    pub fn total(&self) -> usize {
        self.acm.len() + self.transition.len() + self.gdm.len()
    }

    pub fn pool(&self, regime: Regime) -> &[StepSample] {
        match regime {
            Regime::Acm => &self.acm,
            Regime::Transition => &self.transition,
            Regime::Gdm => &self.gdm,
        }
    }

    /// All steps regardless of regime, ACM then transition then GDM.
    pub fn all(&self) -> Vec<StepSample> {
        let mut out = Vec::with_capacity(self.total());
        out.extend_from_slice(&self.acm);
        out.extend_from_slice(&self.transition);
        out.extend_from_slice(&self.gdm);
        out
    }
}

/// Assign every step of every record to the pool of its start-state regime.
pub fn partition_dataset(records: &[TrajectoryRecord], part: &RegimePartition) -> RegionPools {
    let mut pools = RegionPools::default();
    for rec in records {
        for step in rec.steps() {
            match classify_regime(part, &step.state.flow()) {
                Regime::Acm => pools.acm.push(step),
                Regime::Transition => pools.transition.push(step),
                Regime::Gdm => pools.gdm.push(step),
            }
        }
    }
    pools
}

/// Train/test split policy.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_parts: u32,
    pub test_parts: u32,
    /// Assign per configuration so the config distribution is preserved.
    pub stratify: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_parts: 3, test_parts: 1, stratify: true, seed: 0 }
    }
}

/// Index-based split result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// False when stratification was requested but some configuration had
    /// too few repeats and the split fell back to a global one.
    pub stratified: bool,
}

fn split_group(indices: &mut Vec<usize>, spec: &SplitSpec, rng: &mut ChaCha8Rng) -> usize {
    indices.shuffle(rng);
    let n = indices.len();
    let parts = (spec.train_parts + spec.test_parts) as usize;
    ((n * spec.test_parts as usize) / parts).max(usize::from(n >= 2))
}

/// Deterministic train/test split, per-configuration when every config has
/// at least train+test repeats, otherwise global with a warning.
pub fn split(records: &[TrajectoryRecord], spec: &SplitSpec) -> Result<SplitOutcome, DataError> {
    if spec.train_parts == 0 || spec.test_parts == 0 {
        return Err(DataError::Schema("split ratio parts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_needed = (spec.train_parts + spec.test_parts) as usize;
    let mut groups: BTreeMap<(u8, u8, i8), Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        groups.entry(rec.config_key()).or_default().push(i);
    }
    let stratified = spec.stratify && groups.values().all(|g| g.len() >= min_needed);
    if spec.stratify && !stratified {
        let worst = groups.values().map(Vec::len).min().unwrap_or(0);
        log::warn!(
            "stratified split requested but a configuration has only {worst} repeats \
             (need {min_needed}); falling back to a global split"
        );
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    if stratified {
        for group in groups.values_mut() {
            let n_test = split_group(group, spec, &mut rng);
            test.extend_from_slice(&group[..n_test]);
            train.extend_from_slice(&group[n_test..]);
        }
    } else {
        let mut all: Vec<usize> = (0..records.len()).collect();
        let n_test = split_group(&mut all, spec, &mut rng);
        test.extend_from_slice(&all[..n_test]);
        train.extend_from_slice(&all[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitOutcome { train, test, stratified })
}

/// PWM level to static thrust, one value per level 0..=8, gram-force.
#[derive(Debug, Clone, PartialEq)]
pub struct ThrustMap {
    pub gf: [f64; 9],
}

impl Default for ThrustMap {
    /// Bench values for levels 1–6 extended linearly to 8; level 0 is off.
    fn default() -> Self {
        Self { gf: [0.0, 1.13, 2.06, 3.24, 4.59, 6.05, 7.57, 9.09, 10.61] }
    }
}

impl ThrustMap {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.gf[0] != 0.0 {
            return Err(DataError::Schema("thrust level 0 must map to 0".into()));
        }
        if self.gf.windows(2).any(|w| w[1] < w[0]) {
            return Err(DataError::Schema("thrust map must be non-decreasing".into()));
        }
        Ok(())
    }

    /// Thrust for a level, in newtons.
    pub fn newtons(&self, level: u8) -> f64 {
        self.gf[level as usize] * GF_TO_N
    }
}

/// Build a record from a simulated rollout (states from [`crate::dynamics::rollout`],
/// one input per step). The final sample repeats the last input.
pub fn record_from_rollout(
    id: &str,
    rate: f64,
    traj: &[StateVector],
    inputs: &[ControlInput],
) -> TrajectoryRecord {
    assert_eq!(traj.len(), inputs.len() + 1, "rollout shape");
    let samples = traj
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let u = inputs[i.min(inputs.len() - 1)];
            TrajectorySample {
                t: i as f64 / rate,
                eta: x.eta,
                nu: x.nu,
                fl: u.fl,
                fr: u.fr,
                r_bar: u.r_bar,
            }
        })
        .collect();
    TrajectoryRecord {
        id: id.to_string(),
        level_l: 0,
        level_r: 0,
        dr_x_cm: 0,
        rate,
        samples,
    }
}

/// λ-surface CSV: `alpha,V,lambda`, one row per grid node.
pub fn format_lambda_surface(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("alpha,V,lambda\n");
    for (a, v, lam) in rows {
        let _ = writeln!(out, "{a},{v},{lam}");
    }
    out
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub physical: PhysicalParams,
    pub loss: LossConfig,
    pub partition: RegimePartition,
    pub thrust: ThrustMap,
}

impl Default for Config {
    fn default() -> Self {
        let partition = RegimePartition::from_stars(0.40, 0.45);
        Self {
            physical: PhysicalParams::default_vehicle(),
            loss: LossConfig::defaults(&partition),
            partition,
            thrust: ThrustMap::default(),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    physical: PhysicalDto,
    loss: LossDto,
    partition: PartitionDto,
    thrust_map: ThrustDto,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct PhysicalDto {
    m0: Option<f64>,
    m_bar: Option<f64>,
    /// Principal moments of inertia (diagonal I0).
    i0: Option<[f64; 3]>,
    r0: Option<[f64; 3]>,
    buoyancy: Option<f64>,
    gravity: Option<f64>,
    thruster_offset: Option<f64>,
    added_mass: Option<[f64; 6]>,
    acm: AcmDto,
    gdm: GdmDto,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct AcmDto {
    rho: Option<f64>,
    area: Option<f64>,
    cd: Option<Vec<f64>>,
    cs: Option<Vec<f64>>,
    cl: Option<Vec<f64>>,
    cm1: Option<Vec<f64>>,
    cm2: Option<Vec<f64>>,
    cm3: Option<Vec<f64>>,
    k: Option<[f64; 3]>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct GdmDto {
    dl: Option<[f64; 6]>,
    dq: Option<[f64; 6]>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct LossDto {
    w: Option<[f64; 12]>,
    batch_size: Option<usize>,
    lr_12: Option<f64>,
    lr_3: Option<f64>,
    n1: Option<usize>,
    n2: Option<usize>,
    n3: Option<usize>,
    seed: Option<u64>,
    optimizer: Option<String>,
    reg: RegDto,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RegDto {
    w_anchor: Option<f64>,
    w_mono: Option<f64>,
    w_smooth: Option<f64>,
    anchors_per_region: Option<usize>,
    grid: Option<[usize; 2]>,
    alpha_max: Option<f64>,
    v_max: Option<f64>,
    mono_sign: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct PartitionDto {
    alpha_star: Option<f64>,
    v_star: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ThrustDto {
    gf: Option<Vec<f64>>,
}

fn apply_surface(
    surface: &mut crate::aero::PolySurface,
    values: &Option<Vec<f64>>,
    key: &str,
) -> Result<(), DataError> {
    if let Some(values) = values {
        if values.len() != surface.terms.len() {
            return Err(DataError::Schema(format!(
                "physical.acm.{key} needs {} coefficients, got {}",
                surface.terms.len(),
                values.len()
            )));
        }
        for (term, &v) in surface.terms.iter_mut().zip(values) {
            term.coeff = v;
        }
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<Config, DataError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
    let mut cfg = Config::default();

    let d = &file.partition;
    let alpha_star = d.alpha_star.unwrap_or(cfg.partition.alpha_star);
    let v_star = d.v_star.unwrap_or(cfg.partition.v_star);
    cfg.partition = RegimePartition::from_stars(alpha_star, v_star);
    cfg.partition
        .validate()
        .map_err(|e| DataError::Schema(e.to_string()))?;

    let p = &file.physical;
    let phys = &mut cfg.physical;
    if let Some(v) = p.m0 {
        phys.m0 = v;
    }
    if let Some(v) = p.m_bar {
        phys.m_bar = v;
    }
    if let Some(v) = p.i0 {
        phys.i0 = crate::mathcore::Mat3::from_diagonal(&Vec3::new(v[0], v[1], v[2]));
    }
    if let Some(v) = p.r0 {
        phys.r0 = Vec3::new(v[0], v[1], v[2]);
    }
    if let Some(v) = p.buoyancy {
        phys.buoyancy = v;
    }
    if let Some(v) = p.gravity {
        phys.gravity = v;
    }
    if let Some(v) = p.thruster_offset {
        phys.thruster_offset = v;
    }
    if let Some(v) = p.added_mass {
        phys.added_mass = v;
    }
    if let Some(v) = p.acm.rho {
        phys.acm.rho = v;
    }
    if let Some(v) = p.acm.area {
        phys.acm.area = v;
    }
    apply_surface(&mut phys.acm.cd, &p.acm.cd, "cd")?;
    apply_surface(&mut phys.acm.cs, &p.acm.cs, "cs")?;
    apply_surface(&mut phys.acm.cl, &p.acm.cl, "cl")?;
    apply_surface(&mut phys.acm.cm1, &p.acm.cm1, "cm1")?;
    apply_surface(&mut phys.acm.cm2, &p.acm.cm2, "cm2")?;
    apply_surface(&mut phys.acm.cm3, &p.acm.cm3, "cm3")?;
    if let Some(v) = p.acm.k {
        phys.acm.k = v;
    }
    if let Some(v) = p.gdm.dl {
        phys.gdm.dl = v;
    }
    if let Some(v) = p.gdm.dq {
        phys.gdm.dq = v;
    }
    phys.validate().map_err(|e| DataError::Schema(e.to_string()))?;

    let l = &file.loss;
    cfg.loss = LossConfig::defaults(&cfg.partition);
    if let Some(v) = l.w {
        cfg.loss.w = v;
    }
    if let Some(v) = l.batch_size {
        cfg.loss.batch_size = v;
    }
    if let Some(v) = l.lr_12 {
        cfg.loss.lr_12 = v;
    }
    if let Some(v) = l.lr_3 {
        cfg.loss.lr_3 = v;
    }
    if let Some(v) = l.n1 {
        cfg.loss.n1 = v;
    }
    if let Some(v) = l.n2 {
        cfg.loss.n2 = v;
    }
    if let Some(v) = l.n3 {
        cfg.loss.n3 = v;
    }
    if let Some(v) = l.seed {
        cfg.loss.seed = v;
    }
    if let Some(name) = &l.optimizer {
        cfg.loss.optimizer = match name.as_str() {
            "adam" => crate::ident::OptimKind::Adam,
            "sgd" => crate::ident::OptimKind::Sgd,
            other => {
                return Err(DataError::Schema(format!(
                    "loss.optimizer must be \"adam\" or \"sgd\", got {other:?}"
                )))
            }
        };
    }
    let r = &l.reg;
    let mono_sign = match r.mono_sign.as_deref() {
        None => MonoSign::default(),
        Some("prose") => MonoSign::Prose,
        Some("printed") => MonoSign::Printed,
        Some(other) => {
            return Err(DataError::Schema(format!(
                "loss.reg.mono_sign must be \"prose\" or \"printed\", got {other:?}"
            )))
        }
    };
    cfg.loss.reg = RegGrids::build(
        &cfg.partition,
        r.alpha_max.unwrap_or(DEFAULT_ALPHA_MAX),
        r.v_max.unwrap_or(DEFAULT_V_MAX),
        r.anchors_per_region.unwrap_or(DEFAULT_ANCHORS),
        r.grid.map_or(DEFAULT_GRID, |g| (g[0], g[1])),
        (
            r.w_anchor.unwrap_or(cfg.loss.reg.w_anchor),
            r.w_mono.unwrap_or(cfg.loss.reg.w_mono),
            r.w_smooth.unwrap_or(cfg.loss.reg.w_smooth),
        ),
        mono_sign,
    );

    if let Some(gf) = &file.thrust_map.gf {
        if gf.len() != 9 {
            return Err(DataError::Schema(format!(
                "thrust_map.gf needs 9 entries (levels 0..=8), got {}",
                gf.len()
            )));
        }
        cfg.thrust.gf.copy_from_slice(gf);
    }
    cfg.thrust.validate()?;
    Ok(cfg)
}

pub const DEFAULT_ALPHA_MAX: f64 = 0.9;
pub const DEFAULT_V_MAX: f64 = 1.2;
pub const DEFAULT_ANCHORS: usize = 64;
pub const DEFAULT_GRID: (usize, usize) = (21, 21);

pub fn load_config(path: &Path) -> Result<Config, DataError> {
    parse_config(&std::fs::read_to_string(path)?)
}
