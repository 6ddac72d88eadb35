//! Sensitivity of the combined posterior to the context probability.
//!
//! With the context known, the posterior is the binary normalization of
//! `a * h / p` against `(1 - a) * (1 - h) / (1 - p)`, where `a` is the
//! detector probability, `h` the context probability and `p` the prior.
//! As a function of `h` this is a Möbius map with a closed-form inverse
//! and derivative, which drive the gating decisions below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Context probabilities are kept this far away from 0 and 1.
pub const H_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub detector_prob: f64,
    pub prior: f64,
}

impl CurveParams {
    pub fn new(detector_prob: f64, prior: f64) -> Result<Self> {
        let params = Self { detector_prob, prior };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::invalid(format!(
                "prior must lie strictly inside (0, 1), got {}",
                self.prior
            )));
        }
        if !(0.0..=1.0).contains(&self.detector_prob) {
            return Err(Error::invalid(format!(
                "detector probability must lie in [0, 1], got {}",
                self.detector_prob
            )));
        }
        Ok(())
    }

    /// `(a / p, (1 - a) / (1 - p))`
    fn slopes(&self) -> (f64, f64) {
        (
            self.detector_prob / self.prior,
            (1.0 - self.detector_prob) / (1.0 - self.prior),
        )
    }
}

pub fn clamp_context(h: f64) -> f64 {
    h.clamp(H_CLAMP, 1.0 - H_CLAMP)
}

/// Normalized combination of detector probability and context probability.
pub fn posterior_at(params: CurveParams, h: f64) -> Result<f64> {
    params.validate()?;
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::invalid(format!("context probability {h} outside [0, 1]")));
    }
    let h = clamp_context(h);
    let CurveParams {
        detector_prob: a,
        prior: p,
    } = params;
    // The ratio terms cancel exactly in these two cases.
    if h == p {
        return Ok(a);
    }
    if a == p {
        return Ok(h);
    }
    Ok(normalize(a * (h / p), (1.0 - a) * ((1.0 - h) / (1.0 - p))))
}

/// Binary normalization of unnormalized True/False masses.
pub(crate) fn normalize(t: f64, f: f64) -> f64 {
    let z = t + f;
    if z > 0.0 {
        t / z
    } else {
        0.0
    }
}

/// `d posterior / d h = u v / (u h + v (1 - h))^2`.
pub fn posterior_derivative(params: CurveParams, h: f64) -> Result<f64> {
    params.validate()?;
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::invalid(format!("context probability {h} outside [0, 1]")));
    }
    let h = clamp_context(h);
    let (u, v) = params.slopes();
    let d = u * h + v * (1.0 - h);
    Ok(u * v / (d * d))
}

/// Context probability at which the posterior equals `q`.
pub fn invert_posterior(params: CurveParams, q: f64) -> Result<f64> {
    params.validate()?;
    let a = params.detector_prob;
    if a == 0.0 || a == 1.0 {
        return Err(Error::NotInvertible(a));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("target posterior {q} outside [0, 1]")));
    }
    let (u, v) = params.slopes();
    Ok(v * q / (u * (1.0 - q) + v * q))
}

/// Largest measurement error on `h` that keeps the posterior within
/// `epsilon` of its value at `h_star`.
///
/// A side whose target posterior `p* ± epsilon` leaves `[0, 1]` cannot be
/// violated and is dropped; if both sides drop, the result is infinite.
pub fn epsilon_h(params: CurveParams, h_star: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let a = params.detector_prob;
    if a == 0.0 || a == 1.0 {
        return Err(Error::NotInvertible(a));
    }
    let p_star = posterior_at(params, h_star)?;
    let h_star = clamp_context(h_star);
    let mut best = f64::INFINITY;
    for q in [p_star - epsilon, p_star + epsilon] {
        if (0.0..=1.0).contains(&q) {
            let h = invert_posterior(params, q)?;
            best = best.min((h_star - h).abs());
        }
    }
    Ok(best)
}

/// Hoeffding sample bound `ceil(ln(2 / delta) / (2 eps_h^2))`.
pub fn required_samples(eps_h: f64, delta: f64) -> Result<u64> {
    if !(eps_h > 0.0) {
        return Err(Error::invalid(format!("eps_h must be positive, got {eps_h}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let m = (2.0 / delta).ln() / (2.0 * eps_h * eps_h);
    Ok(m.ceil() as u64)
}

/// Thresholds shared by all gating policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub derivative_threshold: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for GatingParams {
    fn default() -> Self {
        Self {
            derivative_threshold: 10.0,
            delta: 0.1,
            epsilon: 0.1,
        }
    }
}

/// Decides whether a measured context probability is too unreliable to use.
/// When it returns true the caller replaces `h` by the prior.
pub trait GatingPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn should_gate(&self, params: CurveParams, h: f64, observed: u64, cfg: &GatingParams) -> bool;
}

/// Applies `policy` and returns the context probability to use plus whether
/// the gate fired. A fired gate substitutes the prior.
pub fn gated_context(
    policy: &dyn GatingPolicy,
    params: CurveParams,
    h: f64,
    observed: u64,
    cfg: &GatingParams,
) -> (f64, bool) {
    if policy.should_gate(params, h, observed, cfg) {
        (params.prior, true)
    } else {
        (h, false)
    }
}

/// Never gates.
#[derive(Debug, Default)]
pub struct NoGating;

impl GatingPolicy for NoGating {
    fn name(&self) -> &'static str {
        "none"
    }

    fn should_gate(&self, _: CurveParams, _: f64, _: u64, _: &GatingParams) -> bool {
        false
    }
}

#[derive(Debug, Default)]
pub struct DerivativeGating;

impl DerivativeGating {
    fn fires(params: CurveParams, h: f64, cfg: &GatingParams) -> bool {
        posterior_derivative(params, h).is_ok_and(|d| d > cfg.derivative_threshold)
    }
}

impl GatingPolicy for DerivativeGating {
    fn name(&self) -> &'static str {
        "derivative"
    }

    fn should_gate(&self, params: CurveParams, h: f64, _: u64, cfg: &GatingParams) -> bool {
        Self::fires(params, h, cfg)
    }
}

#[derive(Debug, Default)]
pub struct SampleCountGating;

impl SampleCountGating {
    fn fires(params: CurveParams, h: f64, observed: u64, cfg: &GatingParams) -> bool {
        // a in {0, 1} makes the posterior independent of h: nothing to protect.
        match epsilon_h(params, h, cfg.epsilon).and_then(|e| required_samples(e, cfg.delta)) {
            Ok(m) => observed < m,
            Err(_) => false,
        }
    }
}

impl GatingPolicy for SampleCountGating {
    fn name(&self) -> &'static str {
        "sample-count"
    }

    fn should_gate(&self, params: CurveParams, h: f64, observed: u64, cfg: &GatingParams) -> bool {
        Self::fires(params, h, observed, cfg)
    }
}

#[derive(Debug, Default)]
pub struct CombinedGating;

impl GatingPolicy for CombinedGating {
    fn name(&self) -> &'static str {
        "both"
    }

    fn should_gate(&self, params: CurveParams, h: f64, observed: u64, cfg: &GatingParams) -> bool {
        DerivativeGating::fires(params, h, cfg) || SampleCountGating::fires(params, h, observed, cfg)
    }
}
