//! Rotary position embedding and the frequency-remapping interpolation schemes.
//!
//! Every scheme is expressed as a transformed per-pair frequency table plus an
//! attention-logit multiplier, so position indices stay integral and a single
//! rotation kernel serves all of them.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Frequencies `base^(-2j/d)` for `j in 0..d/2`.
pub fn theta_table(head_dim: usize, base: f64) -> Result<Vec<f64>> {
    if head_dim < 2 || !head_dim.is_multiple_of(2) {
        return Err(Error::config(format!("head_dim must be even and >= 2, got {head_dim}")));
    }
    if !(base > 1.0 && base.is_finite()) {
        return Err(Error::config(format!("rope base must be finite and > 1, got {base}")));
    }
    let d = head_dim as f64;
    Ok((0..head_dim / 2)
        .map(|j| base.powf(-2.0 * j as f64 / d))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    pub theta: Vec<f64>,
    pub attn_scale: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        Ok(Self {
            head_dim,
            base,
            theta: theta_table(head_dim, base)?,
            attn_scale: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim < 2 || !self.head_dim.is_multiple_of(2) || self.theta.len() != self.head_dim / 2 {
            return Err(Error::config("rope table does not match head_dim"));
        }
        if !(self.attn_scale > 0.0) {
            return Err(Error::config("attn_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationKind {
    #[default]
    None,
    Linear,
    Ntk,
    Yarn,
}

impl std::str::FromStr for InterpolationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "linear" => Ok(Self::Linear),
            "ntk" => Ok(Self::Ntk),
            "yarn" => Ok(Self::Yarn),
            other => Err(Error::config(format!("unknown interpolation `{other}`"))),
        }
    }
}

fn default_r_low() -> f64 {
    1.0
}

fn default_r_high() -> f64 {
    32.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationStrategy {
    pub kind: InterpolationKind,
    /// Scaling factor `L_t / L_c`.
    pub alpha: f64,
    /// Rotation count below which a pair is fully interpolated (YaRN).
    #[serde(default = "default_r_low")]
    pub yarn_r_low: f64,
    /// Rotation count above which a pair is left untouched (YaRN).
    #[serde(default = "default_r_high")]
    pub yarn_r_high: f64,
}

impl Default for InterpolationStrategy {
    fn default() -> Self {
        Self::none()
    }
}

impl InterpolationStrategy {
    pub fn none() -> Self {
        Self::new(InterpolationKind::None, 1.0)
    }

    pub fn new(kind: InterpolationKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            yarn_r_low: default_r_low(),
            yarn_r_high: default_r_high(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("scaling factor must be >= 1, got {}", self.alpha)));
        }
        if !(self.yarn_r_low < self.yarn_r_high) {
            return Err(Error::config("yarn_r_low must be below yarn_r_high"));
        }
        Ok(())
    }

    /// YaRN logit multiplier `(0.1 ln α + 1)^2`.
    pub fn yarn_logit_multiplier(&self) -> f64 {
        let t = 0.1 * self.alpha.ln() + 1.0;
        t * t
    }
}

/// Applies an interpolation strategy to a frequency table.
///
/// `original_len` is the pre-extension window `L_c`, used by YaRN to turn each
/// frequency into a rotation count over the original window.
pub fn effective_rope(
    strategy: &InterpolationStrategy,
    params: &RopeParams,
    original_len: usize,
) -> Result<RopeParams> {
    strategy.validate()?;
    params.validate()?;
    let alpha = strategy.alpha;
    if strategy.kind == InterpolationKind::None || alpha == 1.0 {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    match strategy.kind {
        InterpolationKind::None => unreachable!(),
        InterpolationKind::Linear => {
            out.theta.iter_mut().for_each(|t| *t /= alpha);
        }
        InterpolationKind::Ntk => {
            if params.head_dim < 4 {
                return Err(Error::config("NTK interpolation needs head_dim >= 4"));
            }
            let d = params.head_dim as f64;
            let log_base = params.base.ln() + d / (d - 2.0) * alpha.ln();
            out.theta = (0..params.head_dim / 2)
                .map(|j| (-2.0 * j as f64 / d * log_base).exp())
                .collect();
        }
        InterpolationKind::Yarn => {
            let span = strategy.yarn_r_high - strategy.yarn_r_low;
            for t in out.theta.iter_mut() {
                let rotations = original_len as f64 * *t / (2.0 * PI);
                let gamma = ((rotations - strategy.yarn_r_low) / span).clamp(0.0, 1.0);
                *t = (1.0 - gamma) * *t / alpha + gamma * *t;
            }
            out.attn_scale *= strategy.yarn_logit_multiplier();
        }
    }
    Ok(out)
}

fn check_len(h: &[f64], params: &RopeParams) -> Result<()> {
    if h.len() != params.head_dim {
        return Err(Error::Shape {
            expected: format!("vector of length {}", params.head_dim),
            got: h.len().to_string(),
        });
    }
    Ok(())
}

/// Rotates each pair `(h[2j], h[2j+1])` by `m * theta[j]`.
pub fn apply_rope(h: &[f64], position: f64, params: &RopeParams) -> Result<Vec<f64>> {
    check_len(h, params)?;
    let mut out = h.to_vec();
    for (j, &t) in params.theta.iter().enumerate() {
        let (s, c) = (position * t).sin_cos();
        let (x, y) = (h[2 * j], h[2 * j + 1]);
        out[2 * j] = x * c - y * s;
        out[2 * j + 1] = x * s + y * c;
    }
    Ok(out)
}

/// `attn_scale * <f(q, m), f(k, n)>`.
pub fn attention_score(q: &[f64], k: &[f64], m: usize, n: usize, params: &RopeParams) -> Result<f64> {
    let fq = apply_rope(q, m as f64, params)?;
    let fk = apply_rope(k, n as f64, params)?;
    check_len(k, params)?;
    Ok(params.attn_scale * fq.iter().zip(&fk).map(|(a, b)| a * b).sum::<f64>())
}

/// Outcome of one invariant check in [`run_invariant_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

fn random_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Shift invariance of the score: worst `|g(m,n) - g(m+s,n+s)| / max(1,|g|)`.
pub fn shift_invariance_error<R: Rng + ?Sized>(trials: usize, dims: &[usize], rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let d = dims[t % dims.len()];
        let params = RopeParams::new(d, DEFAULT_BASE)?;
        let (q, k) = (random_vec(d, rng), random_vec(d, rng));
        let m = rng.random_range(0..1_000_000usize);
        let n = rng.random_range(0..1_000_000usize);
        let s = rng.random_range(0..1_000_000usize);
        let g = attention_score(&q, &k, m, n, &params)?;
        let gs = attention_score(&q, &k, m + s, n + s, &params)?;
        worst = worst.max((g - gs).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}

/// Worst relative error of `theta'_{d/2-1} * alpha = theta_{d/2-1}` under NTK.
pub fn ntk_endpoint_error(dims: &[usize], alphas: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &d in dims {
        let params = RopeParams::new(d, DEFAULT_BASE)?;
        for &alpha in alphas {
            let eff = effective_rope(
                &InterpolationStrategy::new(InterpolationKind::Ntk, alpha),
                &params,
                2048,
            )?;
            let last = d / 2 - 1;
            let err = (eff.theta[last] * alpha - params.theta[last]).abs() / params.theta[last];
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// True when every strategy leaves the table and scale bit-identical at `alpha = 1`.
pub fn identity_at_unit_alpha(dims: &[usize]) -> Result<bool> {
    for &d in dims {
        let params = RopeParams::new(d, DEFAULT_BASE)?;
        for kind in [InterpolationKind::Linear, InterpolationKind::Ntk, InterpolationKind::Yarn] {
            let eff = effective_rope(&InterpolationStrategy::new(kind, 1.0), &params, 2048)?;
            if eff.theta != params.theta || eff.attn_scale != 1.0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Worst relative norm change of `apply_rope` over random inputs.
pub fn isometry_error<R: Rng + ?Sized>(trials: usize, dims: &[usize], rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let d = dims[t % dims.len()];
        let params = RopeParams::new(d, DEFAULT_BASE)?;
        let h = random_vec(d, rng);
        let m = rng.random_range(0..(1usize << 31)) as f64;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let before = norm(&h);
        let after = norm(&apply_rope(&h, m, &params)?);
        worst = worst.max((after - before).abs() / before);
    }
    Ok(worst)
}

/// Worst violation of `theta/alpha <= theta' <= theta` for the YaRN blend.
pub fn yarn_convexity_violation(dims: &[usize], alphas: &[f64], original_len: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for &d in dims {
        let params = RopeParams::new(d, DEFAULT_BASE)?;
        for &alpha in alphas {
            let eff = effective_rope(
                &InterpolationStrategy::new(InterpolationKind::Yarn, alpha),
                &params,
                original_len,
            )?;
            for (t, e) in params.theta.iter().zip(&eff.theta) {
                let lo = t / alpha;
                let v = (lo - e).max(e - t).max(0.0) / t;
                worst = worst.max(v);
            }
        }
    }
    Ok(worst)
}

/// The invariant suite printed by `rope-check`.
pub fn run_invariant_suite<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<CheckOutcome>> {
    let dims = [2usize, 8, 64, 128];
    let outcome = |name: &str, err: f64, tol: f64| CheckOutcome {
        name: name.to_string(),
        passed: err <= tol,
        max_error: err,
        tolerance: tol,
    };
    let shift = shift_invariance_error(1000, &dims, rng)?;
    let iso = isometry_error(1000, &dims, rng)?;
    let ntk = ntk_endpoint_error(&[4, 64, 128], &[2.0, 4.0, 8.0, 16.0, 64.0])?;
    let ident = identity_at_unit_alpha(&[2, 4, 64, 128])?;
    let yarn = yarn_convexity_violation(&[4, 64, 128], &[2.0, 4.0, 8.0, 16.0, 64.0], 2048)?;
    Ok(vec![
        outcome("shift-invariance", shift, 1e-9),
        outcome("isometry", iso, 1e-9),
        outcome("ntk-endpoint", ntk, 1e-12),
        CheckOutcome {
            name: "identity-at-alpha-1".into(),
            passed: ident,
            max_error: if ident { 0.0 } else { f64::INFINITY },
            tolerance: 0.0,
        },
        outcome("yarn-convexity", yarn, 1e-15),
    ])
}
