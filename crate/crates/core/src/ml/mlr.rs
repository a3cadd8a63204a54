//! Multinomial logistic regression with an optional elastic-net penalty.
//!
//! Scores are linear in the features with Other as the reference class, whose
//! coefficients are fixed at zero. Fitting minimizes the mean negative
//! log-likelihood plus `lambda * ((1 - delta) * sum(b^2) + delta * sum(|b|))`
//! over the non-intercept coefficients, using accelerated proximal gradient
//! (FISTA) with backtracking on internally standardized features.
//!
//! Parameter vectors passed to [`objective`] and [`gradient`] hold the four
//! free classes row by row, each row being `[intercept, b_1, ..., b_d]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_layout, LabelledMatrix};
use crate::bisg::PosteriorDistribution;
use crate::error::{Error, Result};
use crate::method::Method;
use crate::race::{RaceVector, NUM_RACES};
use crate::tables::{FeatureVector, Layout};

/// Index of the reference category (Other).
pub const REFERENCE: usize = NUM_RACES - 1;
const FREE: usize = NUM_RACES - 1;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetConfig {
    pub lambda: f64,
    pub delta: f64,
}

impl Default for ElasticNetConfig {
    fn default() -> Self {
        ElasticNetConfig {
            lambda: 1e-3,
            delta: 0.5,
        }
    }
}

impl ElasticNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "elastic net needs lambda >= 0 and delta in [0, 1], got {} and {}",
                self.lambda, self.delta
            )));
        }
        Ok(())
    }

    fn ridge(&self) -> f64 {
        self.lambda * (1.0 - self.delta)
    }

    fn lasso(&self) -> f64 {
        self.lambda * self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Initial step size; halved by backtracking as needed.
    pub step_size: f64,
    pub max_epochs: usize,
    /// Stop when no standardized coefficient moves more than this.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1.0,
            max_epochs: 1000,
            tolerance: 1e-6,
        }
    }
}

/// Fitted multinomial logit. `coef[r]` is `[intercept, b_1, ..., b_d]` on
/// the raw feature scale; `coef[REFERENCE]` is all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub layout: Layout,
    pub method: Method,
    pub coef: Vec<Vec<f64>>,
}

impl MlrModel {
    /// All-zero model, which predicts the uniform distribution.
    pub fn zeros(layout: Layout) -> Self {
        MlrModel {
            layout,
            method: Method::Mlr,
            coef: vec![vec![0.0; layout.dim() + 1]; NUM_RACES],
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> RaceVector {
        let mut eta = [0.0; NUM_RACES];
        for (r, e) in eta.iter_mut().enumerate() {
            let c = &self.coef[r];
            *e = c[0] + c[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        }
        softmax(eta)
    }
}

fn softmax(eta: RaceVector) -> RaceVector {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = eta.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

pub fn predict_mlr(m: &MlrModel, x: &FeatureVector) -> Result<PosteriorDistribution> {
    check_layout(m.layout, x)?;
    Ok(PosteriorDistribution::new(
        m.predict_row(&x.values),
        m.method,
    ))
}

/// Training result.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrFit {
    pub model: MlrModel,
    /// Penalized objective at the solution, on the standardized scale.
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mean NLL and its gradient for features transformed as `(x - shift) / scale`.
struct Problem<'a> {
    data: &'a LabelledMatrix,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Problem<'_> {
    fn width(&self) -> usize {
        self.data.dim() + 1
    }

    fn nll(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.data.dim();
        let w = d + 1;
        let n = self.data.len();
        let partials: Vec<(f64, Vec<f64>)> = self
            .data
            .values()
            .par_chunks(CHUNK * d)
            .zip(self.data.labels().par_chunks(CHUNK))
            .map(|(xs, ys)| {
                let mut loss = 0.0;
                let mut grad = if want_grad {
                    vec![0.0; FREE * w]
                } else {
                    Vec::new()
                };
                let mut z = vec![0.0; d];
                for (row, &y) in xs.chunks_exact(d).zip(ys) {
                    for j in 0..d {
                        z[j] = (row[j] - self.shift[j]) / self.scale[j];
                    }
                    let mut eta = [0.0; NUM_RACES];
                    for k in 0..FREE {
                        let t = &theta[k * w..(k + 1) * w];
                        eta[k] = t[0] + t[1..].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e = eta.map(|v| (v - m).exp());
                    let s: f64 = e.iter().sum();
                    loss += m + s.ln() - eta[y];
                    if want_grad {
                        for k in 0..FREE {
                            let r = e[k] / s - if k == y { 1.0 } else { 0.0 };
                            let g = &mut grad[k * w..(k + 1) * w];
                            g[0] += r;
                            for j in 0..d {
                                g[j + 1] += r * z[j];
                            }
                        }
                    }
                }
                (loss, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; if want_grad { FREE * w } else { 0 }];
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let inv = 1.0 / n as f64;
        (loss * inv, grad.into_iter().map(|g| g * inv).collect())
    }

    /// Smooth part: NLL plus the ridge term.
    fn smooth(&self, theta: &[f64], ridge: f64, want_grad: bool) -> (f64, Vec<f64>) {
        let (mut f, mut g) = self.nll(theta, want_grad);
        let w = self.width();
        for (i, t) in theta.iter().enumerate() {
            if i % w != 0 {
                f += ridge * t * t;
                if want_grad {
                    g[i] += 2.0 * ridge * t;
                }
            }
        }
        (f, g)
    }
}

fn l1(theta: &[f64], w: usize) -> f64 {
    theta
        .iter()
        .enumerate()
        .filter(|(i, _)| i % w != 0)
        .map(|(_, t)| t.abs())
        .sum()
}

fn identity_problem(data: &LabelledMatrix) -> Problem<'_> {
    Problem {
        data,
        shift: vec![0.0; data.dim()],
        scale: vec![1.0; data.dim()],
    }
}

/// Penalized objective on raw features for a parameter vector of
/// `4 * (d + 1)` entries (see the module docs for the layout).
pub fn objective(data: &LabelledMatrix, reg: Option<ElasticNetConfig>, theta: &[f64]) -> f64 {
    let p = identity_problem(data);
    let reg = reg.unwrap_or(ElasticNetConfig {
        lambda: 0.0,
        delta: 0.0,
    });
    p.smooth(theta, reg.ridge(), false).0 + reg.lasso() * l1(theta, p.width())
}

/// Gradient of [`objective`]; the absolute-value term contributes
/// `lambda * delta * sign(b)`, which is exact away from zero.
pub fn gradient(data: &LabelledMatrix, reg: Option<ElasticNetConfig>, theta: &[f64]) -> Vec<f64> {
    let p = identity_problem(data);
    let reg = reg.unwrap_or(ElasticNetConfig {
        lambda: 0.0,
        delta: 0.0,
    });
    let w = p.width();
    let mut g = p.smooth(theta, reg.ridge(), true).1;
    for (i, t) in theta.iter().enumerate() {
        if i % w != 0 && *t != 0.0 {
            g[i] += reg.lasso() * t.signum();
        }
    }
    g
}

fn soft_threshold(theta: &mut [f64], w: usize, t: f64) {
    if t == 0.0 {
        return;
    }
    for (i, v) in theta.iter_mut().enumerate() {
        if i % w != 0 {
            *v = v.signum() * (v.abs() - t).max(0.0);
        }
    }
}

fn standardization(data: &LabelledMatrix) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for row in data.values().chunks_exact(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in data.values().chunks_exact(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Fit by FISTA with backtracking and function-value restarts. The seed is
/// recorded for reproducibility; the full-batch schedule uses no randomness.
pub fn train_mlr(
    data: &LabelledMatrix,
    reg: Option<ElasticNetConfig>,
    opt: &OptimizerConfig,
    _seed: u64,
) -> Result<MlrFit> {
    if let Some(r) = &reg {
        r.validate()?;
    }
    let distinct = data.class_counts().iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::Data("MLR needs at least two distinct labels".into()));
    }
    if !(opt.step_size > 0.0) || opt.max_epochs == 0 {
        return Err(Error::Config(
            "step size and epoch budget must be positive".into(),
        ));
    }
    let (shift, scale) = standardization(data);
    let problem = Problem { data, shift, scale };
    let w = problem.width();
    let ridge = reg.map_or(0.0, |r| r.ridge());
    let lasso = reg.map_or(0.0, |r| r.lasso());
    let diverged =
        |step: f64| Error::Divergence(format!("MLR loss became non-finite (step size {step})"));

    let mut x = vec![0.0; FREE * w];
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut step = opt.step_size;
    let mut f_x = problem.smooth(&x, ridge, false).0 + lasso * l1(&x, w);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opt.max_epochs {
        iterations += 1;
        let (f_y, g_y) = problem.smooth(&y, ridge, true);
        if !f_y.is_finite() {
            return Err(diverged(step));
        }
        let (x_new, f_new) = loop {
            let mut cand: Vec<f64> = y.iter().zip(&g_y).map(|(a, g)| a - step * g).collect();
            soft_threshold(&mut cand, w, step * lasso);
            let f_c = problem.smooth(&cand, ridge, false).0;
            let mut lin = 0.0;
            let mut sq = 0.0;
            for i in 0..cand.len() {
                let dlt = cand[i] - y[i];
                lin += g_y[i] * dlt;
                sq += dlt * dlt;
            }
            if f_c.is_finite() && f_c <= f_y + lin + sq / (2.0 * step) + 1e-15 * f_y.abs() {
                let f_full = f_c + lasso * l1(&cand, w);
                break (cand, f_full);
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(diverged(step));
            }
        };
        let moved = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if f_new > f_x {
            // Restart momentum when the objective goes up.
            t = 1.0;
            y = x_new.clone();
        } else {
            let t_new = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_new;
            y = x_new
                .iter()
                .zip(&x)
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            t = t_new;
        }
        x = x_new;
        f_x = f_new;
        if !f_x.is_finite() {
            return Err(diverged(step));
        }
        if moved < opt.tolerance {
            converged = true;
            break;
        }
    }

    // Map back to the raw feature scale.
    let d = data.dim();
    let mut coef = vec![vec![0.0; w]; NUM_RACES];
    for k in 0..FREE {
        let t = &x[k * w..(k + 1) * w];
        let mut intercept = t[0];
        for j in 0..d {
            let b = t[j + 1] / problem.scale[j];
            coef[k][j + 1] = b;
            intercept -= b * problem.shift[j];
        }
        coef[k][0] = intercept;
    }
    if coef.iter().flatten().any(|v| !v.is_finite()) {
        return Err(diverged(step));
    }
    Ok(MlrFit {
        model: MlrModel {
            layout: data.layout(),
            method: if reg.is_some() {
                Method::Elnet
            } else {
                Method::Mlr
            },
            coef,
        },
        final_loss: f_x,
        iterations,
        converged,
    })
}
