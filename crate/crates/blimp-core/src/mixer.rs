//! The learned mixing function λ(α, V; ξ) and its physics regularizers.
//!
//! λ weights the GDM contribution in the hybrid wrench: 0 means pure ACM,
//! 1 pure GDM. The network is a small MLP (2 → 32 → 16 → 1, ReLU hidden,
//! sigmoid output). Besides prediction loss, training shapes the surface with
//! three grid-based regularizers: anchors pin λ near 0/1 deep inside the pure
//! regions, a monotonicity penalty enforces the expected trend in α and V,
//! and a smoothness penalty suppresses oscillations.

use crate::dynamics::RegimePartition;
use crate::mathcore::FlowState;
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const HIDDEN1: usize = 32;
pub const HIDDEN2: usize = 16;
/// Total trainable parameter count of the 2 → 32 → 16 → 1 network.
pub const PARAM_COUNT: usize = HIDDEN1 * 2 + HIDDEN1 + HIDDEN2 * HIDDEN1 + HIDDEN2 + HIDDEN2 + 1;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("anchor set {which} is empty")]
    EmptyAnchorSet { which: &'static str },
    #[error("mixer file layer {layer} has shape {got}, expected {expected}")]
    BadShape { layer: usize, expected: String, got: String },
    #[error("mixer file version {0} not supported")]
    BadVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Network weights plus the fixed input normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub w1: SMatrix<f64, HIDDEN1, 2>,
    pub b1: SVector<f64, HIDDEN1>,
    pub w2: SMatrix<f64, HIDDEN2, HIDDEN1>,
    pub b2: SVector<f64, HIDDEN2>,
    pub w3: SMatrix<f64, 1, HIDDEN2>,
    pub b3: f64,
    /// α is divided by this before the first layer (typically α₂).
    pub alpha_scale: f64,
    /// V is divided by this before the first layer (typically V₂).
    pub v_scale: f64,
}

struct Forward {
    z: SVector<f64, 2>,
    a1: SVector<f64, HIDDEN1>,
    h1: SVector<f64, HIDDEN1>,
    a2: SVector<f64, HIDDEN2>,
    h2: SVector<f64, HIDDEN2>,
    lam: f64,
}

impl MixerParams {
    /// Uniform init in ±1/√fan_in per layer, reproducible from the seed.
    pub fn init(seed: u64, alpha_scale: f64, v_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |bound: f64, rng: &mut ChaCha8Rng| rng.random_range(-bound..bound);
        let bound1 = 1.0 / (2.0f64).sqrt();
        let bound2 = 1.0 / (HIDDEN1 as f64).sqrt();
        let bound3 = 1.0 / (HIDDEN2 as f64).sqrt();
        let w1 = SMatrix::from_fn(|_, _| sample(bound1, &mut rng));
        let b1 = SVector::from_fn(|_, _| sample(bound1, &mut rng));
        let w2 = SMatrix::from_fn(|_, _| sample(bound2, &mut rng));
        let b2 = SVector::from_fn(|_, _| sample(bound2, &mut rng));
        let w3 = SMatrix::from_fn(|_, _| sample(bound3, &mut rng));
        let b3 = sample(bound3, &mut rng);
        Self { w1, b1, w2, b2, w3, b3, alpha_scale, v_scale }
    }

    /// All-zero weights with the given output logit: λ ≡ sigmoid(logit)
    /// everywhere. Used for saturated endpoints and fixtures.
    pub fn constant(logit: f64, alpha_scale: f64, v_scale: f64) -> Self {
        Self {
            w1: SMatrix::zeros(),
            b1: SVector::zeros(),
            w2: SMatrix::zeros(),
            b2: SVector::zeros(),
            w3: SMatrix::zeros(),
            b3: logit,
            alpha_scale,
            v_scale,
        }
    }

    fn forward(&self, alpha: f64, speed: f64) -> Forward {
        let z = SVector::<f64, 2>::new(alpha / self.alpha_scale, speed / self.v_scale);
        let a1 = self.w1 * z + self.b1;
        let h1 = a1.map(|x| x.max(0.0));
        let a2 = self.w2 * h1 + self.b2;
        let h2 = a2.map(|x| x.max(0.0));
        let a3 = (self.w3 * h2)[0] + self.b3;
        Forward { z, a1, h1, a2, h2, lam: sigmoid(a3) }
    }

    /// λ(α, V): forward pass through the normalized inputs.
    pub fn eval(&self, alpha: f64, speed: f64) -> f64 {
        self.forward(alpha, speed).lam
    }

    pub fn eval_flow(&self, f: &FlowState) -> f64 {
        self.eval(f.alpha, f.speed)
    }

    /// λ and its gradient with respect to every trainable parameter, in
    /// [`Self::params`] order. Plain backprop through the three layers.
    pub fn eval_with_param_grad(&self, alpha: f64, speed: f64) -> (f64, Vec<f64>) {
        let f = self.forward(alpha, speed);
        let g3 = f.lam * (1.0 - f.lam);
        let delta2 = SVector::<f64, HIDDEN2>::from_fn(|i, _| {
            if f.a2[i] > 0.0 { g3 * self.w3[(0, i)] } else { 0.0 }
        });
        let delta1 = {
            let back = self.w2.transpose() * delta2;
            SVector::<f64, HIDDEN1>::from_fn(|i, _| if f.a1[i] > 0.0 { back[i] } else { 0.0 })
        };
        let mut grad = Vec::with_capacity(PARAM_COUNT);
        for i in 0..HIDDEN1 {
            for j in 0..2 {
                grad.push(delta1[i] * f.z[j]);
            }
        }
        grad.extend(delta1.iter());
        for i in 0..HIDDEN2 {
            for j in 0..HIDDEN1 {
                grad.push(delta2[i] * f.h1[j]);
            }
        }
        grad.extend(delta2.iter());
        for j in 0..HIDDEN2 {
            grad.push(g3 * f.h2[j]);
        }
        grad.push(g3);
        (f.lam, grad)
    }

    /// λ and its partials with respect to the raw (unnormalized) α and V.
    pub fn eval_with_input_grad(&self, alpha: f64, speed: f64) -> (f64, f64, f64) {
        let f = self.forward(alpha, speed);
        let g3 = f.lam * (1.0 - f.lam);
        let delta2 = SVector::<f64, HIDDEN2>::from_fn(|i, _| {
            if f.a2[i] > 0.0 { g3 * self.w3[(0, i)] } else { 0.0 }
        });
        let delta1 = {
            let back = self.w2.transpose() * delta2;
            SVector::<f64, HIDDEN1>::from_fn(|i, _| if f.a1[i] > 0.0 { back[i] } else { 0.0 })
        };
        let dz = self.w1.transpose() * delta1;
        (f.lam, dz[0] / self.alpha_scale, dz[1] / self.v_scale)
    }

    pub fn param_count(&self) -> usize {
        PARAM_COUNT
    }

    /// Flat parameter vector: w1 rows, b1, w2 rows, b2, w3, b3. The
    /// normalization constants are not trainable and not included.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(PARAM_COUNT);
        for i in 0..HIDDEN1 {
            for j in 0..2 {
                out.push(self.w1[(i, j)]);
            }
        }
        out.extend(self.b1.iter());
        for i in 0..HIDDEN2 {
            for j in 0..HIDDEN1 {
                out.push(self.w2[(i, j)]);
            }
        }
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.push(self.b3);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), PARAM_COUNT, "mixer parameter length");
        let mut it = values.iter().copied();
        for i in 0..HIDDEN1 {
            for j in 0..2 {
                self.w1[(i, j)] = it.next().unwrap();
            }
        }
        for i in 0..HIDDEN1 {
            self.b1[i] = it.next().unwrap();
        }
        for i in 0..HIDDEN2 {
            for j in 0..HIDDEN1 {
                self.w2[(i, j)] = it.next().unwrap();
            }
        }
        for i in 0..HIDDEN2 {
            self.b2[i] = it.next().unwrap();
        }
        for j in 0..HIDDEN2 {
            self.w3[(0, j)] = it.next().unwrap();
        }
        self.b3 = it.next().unwrap();
    }

    pub fn save(&self, path: &Path) -> Result<(), MixerError> {
        let file = MixerFile::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MixerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MixerError> {
        let file: MixerFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// On-disk mixer schema: versioned nested arrays, no binary blobs.
#[derive(Serialize, Deserialize)]
struct MixerFile {
    version: u32,
    alpha_scale: f64,
    v_scale: f64,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<&MixerParams> for MixerFile {
    fn from(p: &MixerParams) -> Self {
        let layer = |rows: usize, cols: usize, get: &dyn Fn(usize, usize) -> f64,
                     bias: &dyn Fn(usize) -> f64| LayerFile {
            weights: (0..rows).map(|i| (0..cols).map(|j| get(i, j)).collect()).collect(),
            bias: (0..rows).map(bias).collect(),
        };
        MixerFile {
            version: 1,
            alpha_scale: p.alpha_scale,
            v_scale: p.v_scale,
            layers: vec![
                layer(HIDDEN1, 2, &|i, j| p.w1[(i, j)], &|i| p.b1[i]),
                layer(HIDDEN2, HIDDEN1, &|i, j| p.w2[(i, j)], &|i| p.b2[i]),
                layer(1, HIDDEN2, &|_, j| p.w3[(0, j)], &|_| p.b3),
            ],
        }
    }
}

impl TryFrom<MixerFile> for MixerParams {
    type Error = MixerError;

    fn try_from(f: MixerFile) -> Result<Self, MixerError> {
        if f.version != 1 {
            return Err(MixerError::BadVersion(f.version));
        }
        let expect = [(HIDDEN1, 2usize), (HIDDEN2, HIDDEN1), (1, HIDDEN2)];
        if f.layers.len() != 3 {
            return Err(MixerError::BadShape {
                layer: f.layers.len(),
                expected: "3 layers".into(),
                got: format!("{} layers", f.layers.len()),
            });
        }
        for (idx, (layer, (rows, cols))) in f.layers.iter().zip(expect).enumerate() {
            let ok = layer.weights.len() == rows
                && layer.weights.iter().all(|r| r.len() == cols)
                && layer.bias.len() == rows;
            if !ok {
                return Err(MixerError::BadShape {
                    layer: idx,
                    expected: format!("{rows}x{cols} + bias {rows}"),
                    got: format!(
                        "{}x{} + bias {}",
                        layer.weights.len(),
                        layer.weights.first().map_or(0, |r| r.len()),
                        layer.bias.len()
                    ),
                });
            }
        }
        let mut p = MixerParams::constant(0.0, f.alpha_scale, f.v_scale);
        for i in 0..HIDDEN1 {
            for j in 0..2 {
                p.w1[(i, j)] = f.layers[0].weights[i][j];
            }
            p.b1[i] = f.layers[0].bias[i];
        }
        for i in 0..HIDDEN2 {
            for j in 0..HIDDEN1 {
                p.w2[(i, j)] = f.layers[1].weights[i][j];
            }
            p.b2[i] = f.layers[1].bias[i];
        }
        for j in 0..HIDDEN2 {
            p.w3[(0, j)] = f.layers[2].weights[0][j];
        }
        p.b3 = f.layers[2].bias[0];
        Ok(p)
    }
}

/// Sign convention of the monotonicity penalty. `Prose` penalizes λ
/// decreasing in α or increasing in V (the physically expected trend for a
/// GDM weight); `Printed` penalizes the opposite pair, reproducing the
/// formula as published.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MonoSign {
    #[default]
    Prose,
    Printed,
}

/// Anchor sets, the finite-difference lattice, and regularizer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RegGrids {
    /// (α, V) points deep in the ACM region where λ should be ≈ 0.
    pub acm_anchors: Vec<(f64, f64)>,
    /// (α, V) points strictly in the GDM region where λ should be ≈ 1.
    pub gdm_anchors: Vec<(f64, f64)>,
    /// Lattice axis values, ascending; partials are taken at points interior
    /// in both axes by central differences.
    pub alphas: Vec<f64>,
    pub speeds: Vec<f64>,
    pub w_anchor: f64,
    pub w_mono: f64,
    pub w_smooth: f64,
    pub mono_sign: MonoSign,
}

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl RegGrids {
    /// Quasi-random anchors inside each pure region plus a regular lattice
    /// over [0, α_max]×[0, V_max]. The domain is extended past the outer band
    /// edges when the data does not reach them, so both anchor boxes are
    /// always non-degenerate.
    pub fn build(
        part: &RegimePartition,
        alpha_max: f64,
        v_max: f64,
        anchors_per_region: usize,
        grid: (usize, usize),
        weights: (f64, f64, f64),
        mono_sign: MonoSign,
    ) -> Self {
        let alpha_max = alpha_max.max(1.3 * part.alpha2);
        let v_max = v_max.max(1.3 * part.v2);
        let mut acm_anchors = Vec::with_capacity(anchors_per_region);
        let mut gdm_anchors = Vec::with_capacity(anchors_per_region);
        for i in 1..=anchors_per_region {
            acm_anchors.push((
                halton(i, 2) * part.alpha1,
                part.v2 + halton(i, 3) * (v_max - part.v2),
            ));
        }
        // GDM region is L-shaped; split anchors between its two arms.
        for i in 1..=anchors_per_region {
            if i % 2 == 0 {
                gdm_anchors.push((
                    part.alpha2 + halton(i, 2) * (alpha_max - part.alpha2),
                    halton(i, 3) * v_max,
                ));
            } else {
                gdm_anchors.push((halton(i, 2) * alpha_max, halton(i, 3) * part.v1));
            }
        }
        Self {
            acm_anchors,
            gdm_anchors,
            alphas: linspace(0.0, alpha_max, grid.0),
            speeds: linspace(0.0, v_max, grid.1),
            w_anchor: weights.0,
            w_mono: weights.1,
            w_smooth: weights.2,
            mono_sign,
        }
    }
}

/// Anchor regularizer: Σ λ² over ACM anchors + Σ (λ−1)² over GDM anchors.
pub fn anchor_loss(xi: &MixerParams, grids: &RegGrids) -> Result<f64, MixerError> {
    anchor_loss_of(&|a, v| xi.eval(a, v), grids)
}

fn anchor_loss_of(f: &dyn Fn(f64, f64) -> f64, grids: &RegGrids) -> Result<f64, MixerError> {
    if grids.acm_anchors.is_empty() {
        return Err(MixerError::EmptyAnchorSet { which: "ACM" });
    }
    if grids.gdm_anchors.is_empty() {
        return Err(MixerError::EmptyAnchorSet { which: "GDM" });
    }
    let acm: f64 = grids.acm_anchors.iter().map(|&(a, v)| f(a, v).powi(2)).sum();
    let gdm: f64 = grids.gdm_anchors.iter().map(|&(a, v)| (f(a, v) - 1.0).powi(2)).sum();
    Ok(acm + gdm)
}

/// Central-difference partials at every lattice point interior in both axes.
fn fd_partials(
    f: &dyn Fn(f64, f64) -> f64,
    grids: &RegGrids,
) -> Vec<(usize, usize, f64, f64)> {
    let lam: Vec<Vec<f64>> = grids
        .alphas
        .iter()
        .map(|&a| grids.speeds.iter().map(|&v| f(a, v)).collect())
        .collect();
    let mut out = Vec::new();
    for i in 1..grids.alphas.len().saturating_sub(1) {
        let da = grids.alphas[i + 1] - grids.alphas[i - 1];
        for j in 1..grids.speeds.len().saturating_sub(1) {
            let dv = grids.speeds[j + 1] - grids.speeds[j - 1];
            let pa = (lam[i + 1][j] - lam[i - 1][j]) / da;
            let pv = (lam[i][j + 1] - lam[i][j - 1]) / dv;
            out.push((i, j, pa, pv));
        }
    }
    out
}

fn mono_of(f: &dyn Fn(f64, f64) -> f64, grids: &RegGrids) -> f64 {
    fd_partials(f, grids)
        .iter()
        .map(|&(_, _, pa, pv)| match grids.mono_sign {
            MonoSign::Prose => (-pa).max(0.0).powi(2) + pv.max(0.0).powi(2),
            MonoSign::Printed => pa.max(0.0).powi(2) + (-pv).max(0.0).powi(2),
        })
        .sum()
}

fn smooth_of(f: &dyn Fn(f64, f64) -> f64, grids: &RegGrids) -> f64 {
    fd_partials(f, grids).iter().map(|&(_, _, pa, pv)| pa * pa + pv * pv).sum()
}

/// Monotonicity penalty over the lattice, finite-difference partials,
/// sign convention per `grids.mono_sign`.
pub fn mono_loss(xi: &MixerParams, grids: &RegGrids) -> f64 {
    mono_of(&|a, v| xi.eval(a, v), grids)
}

/// Smoothness penalty: Σ (∂αλ)² + (∂Vλ)² over the lattice.
pub fn smooth_loss(xi: &MixerParams, grids: &RegGrids) -> f64 {
    smooth_of(&|a, v| xi.eval(a, v), grids)
}

/// Values of the three regularizers (unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegReport {
    pub anchor: f64,
    pub mono: f64,
    pub smooth: f64,
}

impl RegReport {
    pub fn weighted_total(&self, grids: &RegGrids) -> f64 {
        grids.w_anchor * self.anchor + grids.w_mono * self.mono + grids.w_smooth * self.smooth
    }
}

/// Regularizer values plus the gradient of their weighted sum with respect
/// to ξ. One backprop per lattice point and anchor.
pub fn regularizer_grad(
    xi: &MixerParams,
    grids: &RegGrids,
) -> Result<(RegReport, Vec<f64>), MixerError> {
    if grids.acm_anchors.is_empty() {
        return Err(MixerError::EmptyAnchorSet { which: "ACM" });
    }
    if grids.gdm_anchors.is_empty() {
        return Err(MixerError::EmptyAnchorSet { which: "GDM" });
    }
    let mut grad = vec![0.0; PARAM_COUNT];
    let axpy = |c: f64, g: &[f64], grad: &mut Vec<f64>| {
        if c != 0.0 {
            for (dst, src) in grad.iter_mut().zip(g) {
                *dst += c * src;
            }
        }
    };

    let mut anchor = 0.0;
    for &(a, v) in &grids.acm_anchors {
        let (lam, g) = xi.eval_with_param_grad(a, v);
        anchor += lam * lam;
        axpy(grids.w_anchor * 2.0 * lam, &g, &mut grad);
    }
    for &(a, v) in &grids.gdm_anchors {
        let (lam, g) = xi.eval_with_param_grad(a, v);
        anchor += (lam - 1.0).powi(2);
        axpy(grids.w_anchor * 2.0 * (lam - 1.0), &g, &mut grad);
    }

    let na = grids.alphas.len();
    let nv = grids.speeds.len();
    let mut lam = vec![vec![0.0; nv]; na];
    let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(na);
    for (i, &a) in grids.alphas.iter().enumerate() {
        let mut row = Vec::with_capacity(nv);
        for (j, &v) in grids.speeds.iter().enumerate() {
            let (l, g) = xi.eval_with_param_grad(a, v);
            lam[i][j] = l;
            row.push(g);
        }
        grads.push(row);
    }
    let mut mono = 0.0;
    let mut smooth = 0.0;
    for i in 1..na.saturating_sub(1) {
        let da = grids.alphas[i + 1] - grids.alphas[i - 1];
        for j in 1..nv.saturating_sub(1) {
            let dv = grids.speeds[j + 1] - grids.speeds[j - 1];
            let pa = (lam[i + 1][j] - lam[i - 1][j]) / da;
            let pv = (lam[i][j + 1] - lam[i][j - 1]) / dv;
            smooth += pa * pa + pv * pv;
            let cs_a = grids.w_smooth * 2.0 * pa / da;
            axpy(cs_a, &grads[i + 1][j], &mut grad);
            axpy(-cs_a, &grads[i - 1][j], &mut grad);
            let cs_v = grids.w_smooth * 2.0 * pv / dv;
            axpy(cs_v, &grads[i][j + 1], &mut grad);
            axpy(-cs_v, &grads[i][j - 1], &mut grad);
            let (alpha_active, v_active) = match grids.mono_sign {
                MonoSign::Prose => (pa < 0.0, pv > 0.0),
                MonoSign::Printed => (pa > 0.0, pv < 0.0),
            };
            if alpha_active {
                mono += pa * pa;
                let c = grids.w_mono * 2.0 * pa / da;
                axpy(c, &grads[i + 1][j], &mut grad);
                axpy(-c, &grads[i - 1][j], &mut grad);
            }
            if v_active {
                mono += pv * pv;
                let c = grids.w_mono * 2.0 * pv / dv;
                axpy(c, &grads[i][j + 1], &mut grad);
                axpy(-c, &grads[i][j - 1], &mut grad);
            }
        }
    }
    Ok((RegReport { anchor, mono, smooth }, grad))
}

/// Dense λ samples for plotting: one (α, V, λ) row per grid node.
pub fn lambda_surface(
    xi: &MixerParams,
    alpha_range: (f64, f64),
    v_range: (f64, f64),
    na: usize,
    nv: usize,
) -> Vec<(f64, f64, f64)> {
    let mut rows = Vec::with_capacity(na * nv);
    for a in linspace(alpha_range.0, alpha_range.1, na.max(2)).into_iter().take(na) {
        for v in linspace(v_range.0, v_range.1, nv.max(2)).iter().take(nv) {
            rows.push((a, *v, xi.eval(a, *v)));
        }
    }
    rows
}

/// Mean λ over the anchor sets: the regularization-efficacy summary
/// (ACM mean should approach 0 after training, GDM mean 1).
pub fn anchor_means(xi: &MixerParams, grids: &RegGrids) -> (f64, f64) {
    let mean = |pts: &[(f64, f64)]| {
        if pts.is_empty() {
            f64::NAN
        } else {
            pts.iter().map(|&(a, v)| xi.eval(a, v)).sum::<f64>() / pts.len() as f64
        }
    };
    (mean(&grids.acm_anchors), mean(&grids.gdm_anchors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{classify_regime, Regime};
    use approx::assert_relative_eq;

    fn part() -> RegimePartition {
        RegimePartition::from_stars(0.40, 0.45)
    }

    fn grids() -> RegGrids {
        RegGrids::build(&part(), 0.9, 1.0, 16, (9, 9), (1.0, 1.0, 0.1), MonoSign::Prose)
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let xi = MixerParams::init(42, 0.48, 0.54);
        for i in 0..50 {
            for j in 0..50 {
                let lam = xi.eval(i as f64 * 0.02, j as f64 * 0.03);
                assert!(lam > 0.0 && lam < 1.0, "lambda {lam} out of range");
            }
        }
    }

    #[test]
    fn large_output_bias_saturates_towards_one() {
        let xi = MixerParams::constant(50.0, 0.48, 0.54);
        assert!(xi.eval(0.3, 0.5) >= 1.0 - 1e-20);
        let xi = MixerParams::constant(-50.0, 0.48, 0.54);
        assert!(xi.eval(0.3, 0.5) < 1e-20);
    }

    #[test]
    fn eval_is_deterministic_and_init_is_seeded() {
        let a = MixerParams::init(7, 0.48, 0.54);
        let b = MixerParams::init(7, 0.48, 0.54);
        assert_eq!(a, b);
        assert_eq!(a.eval(0.3, 0.4).to_bits(), b.eval(0.3, 0.4).to_bits());
        assert_ne!(a, MixerParams::init(8, 0.48, 0.54));
    }

    #[test]
    fn param_vector_round_trips() {
        let xi = MixerParams::init(3, 0.48, 0.54);
        assert_eq!(xi.param_count(), 641);
        let p = xi.params();
        assert_eq!(p.len(), 641);
        let mut xi2 = MixerParams::constant(0.0, 0.48, 0.54);
        xi2.set_params(&p);
        assert_eq!(xi, xi2);
    }

    #[test]
    fn param_gradient_matches_central_differences() {
        let xi = MixerParams::init(11, 0.48, 0.54);
        let (alpha, speed) = (0.37, 0.52);
        let (_, grad) = xi.eval_with_param_grad(alpha, speed);
        let p0 = xi.params();
        // Spot-check a spread of coordinates across all layers.
        for idx in (0..PARAM_COUNT).step_by(37) {
            let mut p = p0.clone();
            let eps = 1e-6;
            p[idx] = p0[idx] + eps;
            let mut hi = xi.clone();
            hi.set_params(&p);
            p[idx] = p0[idx] - eps;
            let mut lo = xi.clone();
            lo.set_params(&p);
            let fd = (hi.eval(alpha, speed) - lo.eval(alpha, speed)) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() <= 1e-7 + 1e-5 * fd.abs().max(grad[idx].abs()),
                "param {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn input_gradient_converges_at_second_order() {
        let xi = MixerParams::init(19, 0.48, 0.54);
        let (alpha, speed) = (0.41, 0.47);
        let (_, ga, gv) = xi.eval_with_input_grad(alpha, speed);
        let fd = |h: f64| {
            let da = (xi.eval(alpha + h, speed) - xi.eval(alpha - h, speed)) / (2.0 * h);
            let dv = (xi.eval(alpha, speed + h) - xi.eval(alpha, speed - h)) / (2.0 * h);
            (da, dv)
        };
        let (da_h, dv_h) = fd(1e-3);
        let (da_h2, dv_h2) = fd(5e-4);
        // Central differences are second order: halving h quarters the error.
        let ratio_a = (da_h - ga).abs() / (da_h2 - ga).abs();
        let ratio_v = (dv_h - gv).abs() / (dv_h2 - gv).abs();
        assert!((3.0..5.0).contains(&ratio_a), "alpha ratio {ratio_a}");
        assert!((3.0..5.0).contains(&ratio_v), "V ratio {ratio_v}");
    }

    #[test]
    fn anchor_loss_counts_squared_errors() {
        // Constant λ = 0.5 exactly: every anchor contributes 0.25.
        let xi = MixerParams::constant(0.0, 0.48, 0.54);
        let mut g = grids();
        g.acm_anchors = vec![(0.1, 0.8)];
        g.gdm_anchors = vec![(0.7, 0.2)];
        assert_relative_eq!(anchor_loss(&xi, &g).unwrap(), 0.5, epsilon = 1e-15);
        g.gdm_anchors = vec![(0.7, 0.2), (0.6, 0.1), (0.8, 0.3)];
        assert_relative_eq!(anchor_loss(&xi, &g).unwrap(), 0.25 + 3.0 * 0.25, epsilon = 1e-15);
        g.acm_anchors.clear();
        assert!(matches!(
            anchor_loss(&xi, &g),
            Err(MixerError::EmptyAnchorSet { which: "ACM" })
        ));
    }

    #[test]
    fn constant_surface_has_zero_penalties() {
        let xi = MixerParams::constant(0.3, 0.48, 0.54);
        let g = grids();
        assert_eq!(mono_loss(&xi, &g), 0.0);
        assert_eq!(smooth_loss(&xi, &g), 0.0);
    }

    #[test]
    fn mono_loss_sign_conventions_on_linear_surface() {
        // λ = 0.4 + 0.3α + 0.1V; central differences of a linear function are
        // exact, and a 3×3 lattice has a single interior point.
        let f = |a: f64, v: f64| 0.4 + 0.3 * a + 0.1 * v;
        let mut g = grids();
        g.alphas = vec![0.0, 0.1, 0.2];
        g.speeds = vec![0.0, 0.1, 0.2];
        g.mono_sign = MonoSign::Printed;
        assert_relative_eq!(mono_of(&f, &g), 0.09, epsilon = 1e-12);
        g.mono_sign = MonoSign::Prose;
        assert_relative_eq!(mono_of(&f, &g), 0.01, epsilon = 1e-12);
        // Decreasing in α, increasing in V: zero under the printed formula.
        let h = |a: f64, v: f64| 0.5 - 0.2 * a + 0.4 * v;
        g.mono_sign = MonoSign::Printed;
        assert_eq!(mono_of(&h, &g), 0.0);
        g.mono_sign = MonoSign::Prose;
        assert!(mono_of(&h, &g) > 0.0);
    }

    #[test]
    fn smooth_loss_of_linear_surface_counts_interior_points() {
        let s = 0.25;
        let f = move |a: f64, _v: f64| s * a;
        let mut g = grids();
        g.alphas = linspace(0.0, 1.0, 7);
        g.speeds = linspace(0.0, 1.0, 5);
        let interior = (7 - 2) * (5 - 2);
        assert_relative_eq!(smooth_of(&f, &g), interior as f64 * s * s, epsilon = 1e-12);
    }

    #[test]
    fn smooth_loss_invariant_under_complement() {
        // 1 − λ(ξ) is realized exactly by negating the output layer.
        let xi = MixerParams::init(23, 0.48, 0.54);
        let mut flipped = xi.clone();
        flipped.w3 = -xi.w3;
        flipped.b3 = -xi.b3;
        let g = grids();
        assert_relative_eq!(
            smooth_loss(&xi, &g),
            smooth_loss(&flipped, &g),
            epsilon = 1e-12
        );
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let xi = MixerParams::init(31, 0.48, 0.54);
        let mut g = grids();
        g.alphas = linspace(0.0, 0.9, 5);
        g.speeds = linspace(0.0, 1.0, 5);
        g.acm_anchors.truncate(4);
        g.gdm_anchors.truncate(4);
        let (report, grad) = regularizer_grad(&xi, &g).unwrap();
        let total = |x: &MixerParams| {
            g.w_anchor * anchor_loss(x, &g).unwrap()
                + g.w_mono * mono_loss(x, &g)
                + g.w_smooth * smooth_loss(x, &g)
        };
        assert_relative_eq!(
            report.weighted_total(&g),
            total(&xi),
            epsilon = 1e-12
        );
        let p0 = xi.params();
        for idx in (0..PARAM_COUNT).step_by(53) {
            let eps = 1e-6;
            let mut p = p0.clone();
            p[idx] += eps;
            let mut hi = xi.clone();
            hi.set_params(&p);
            p[idx] = p0[idx] - eps;
            let mut lo = xi.clone();
            lo.set_params(&p);
            let fd = (total(&hi) - total(&lo)) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() <= 1e-6 + 1e-4 * fd.abs().max(grad[idx].abs()),
                "param {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn anchors_lie_in_their_regions() {
        let p = part();
        let g = RegGrids::build(&p, 0.9, 1.0, 64, (21, 21), (1.0, 1.0, 0.1), MonoSign::Prose);
        assert_eq!(g.acm_anchors.len(), 64);
        assert_eq!(g.gdm_anchors.len(), 64);
        for &(a, v) in &g.acm_anchors {
            assert!(a < p.alpha1 && v > p.v2, "ACM anchor ({a},{v})");
            assert_eq!(
                classify_regime(&p, &FlowState { alpha: a, beta: 0.0, speed: v }),
                Regime::Acm
            );
        }
        for &(a, v) in &g.gdm_anchors {
            assert_eq!(
                classify_regime(&p, &FlowState { alpha: a, beta: 0.0, speed: v }),
                Regime::Gdm,
                "GDM anchor ({a},{v})"
            );
        }
    }

    #[test]
    fn surface_export_covers_grid() {
        let xi = MixerParams::init(5, 0.48, 0.54);
        let rows = lambda_surface(&xi, (0.0, 0.9), (0.0, 1.0), 2, 2);
        assert_eq!(rows.len(), 4);
        for &(_, _, lam) in &rows {
            assert!(lam > 0.0 && lam < 1.0);
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixer.json");
        let xi = MixerParams::init(97, 0.48, 0.54);
        xi.save(&path).unwrap();
        let back = MixerParams::load(&path).unwrap();
        assert_eq!(xi, back);
        // Corrupt a layer shape and expect a named failure.
        let mut file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file["layers"][1]["bias"] = serde_json::json!([1.0, 2.0]);
        std::fs::write(&path, file.to_string()).unwrap();
        assert!(matches!(
            MixerParams::load(&path),
            Err(MixerError::BadShape { layer: 1, .. })
        ));
    }
}
