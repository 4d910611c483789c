//! Tabular and log-linear conditional policies, sampling, divergences, and
//! the exponential-tilt closed form.
//!
//! All probability arithmetic goes through log-space with max shifting so
//! that small temperatures and large rewards cannot overflow.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::FeatureMap;
use crate::num::{log_sum_exp, Real};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("prompt {prompt} out of range (|X| = {size})")]
    PromptOutOfRange { prompt: usize, size: usize },
    #[error("response {response} out of range (|Y| = {size})")]
    ResponseOutOfRange { response: usize, size: usize },
    #[error("unsupported response {response} for prompt {prompt} (zero probability)")]
    UnsupportedResponse { prompt: usize, response: usize },
    #[error("support violation at prompt {prompt}, response {response}")]
    SupportViolation { prompt: usize, response: usize },
    #[error("overflow while normalizing prompt {prompt} at beta = {beta}")]
    Overflow { prompt: usize, beta: f64 },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("policies have mismatched shapes: {0}")]
    ShapeMismatch(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
}

fn row_tolerance<R: Real>() -> R {
    let eps_based = R::epsilon() * R::of(64.0);
    let floor = R::of(1e-12);
    if eps_based > floor {
        eps_based
    } else {
        floor
    }
}

/// Conditional distribution over responses given a prompt.
pub trait Policy<R: Real> {
    fn num_prompts(&self) -> usize;
    fn num_responses(&self) -> usize;

    /// Probability vector over responses; nonnegative, sums to one.
    fn action_distribution(&self, prompt: usize) -> Result<Vec<R>, PolicyError>;

    /// Log probability of a single response. Zero-probability entries are an
    /// explicit error rather than negative infinity.
    fn log_prob(&self, prompt: usize, response: usize) -> Result<R, PolicyError>;

    /// Probability of a single response; zero is a legal value here.
    fn prob(&self, prompt: usize, response: usize) -> Result<R, PolicyError> {
        let row = self.action_distribution(prompt)?;
        row.get(response).copied().ok_or(PolicyError::ResponseOutOfRange {
            response,
            size: self.num_responses(),
        })
    }
}

fn check_prompt<R: Real, P: Policy<R> + ?Sized>(p: &P, prompt: usize) -> Result<(), PolicyError> {
    if prompt >= p.num_prompts() {
        Err(PolicyError::PromptOutOfRange {
            prompt,
            size: p.num_prompts(),
        })
    } else {
        Ok(())
    }
}

/// Explicit probability table, one row per prompt. The universal output type
/// of the closed-form operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy<R> {
    probs: Vec<Vec<R>>,
}

impl<R: Real> TabularPolicy<R> {
    pub fn new(probs: Vec<Vec<R>>) -> Result<Self, PolicyError> {
        if probs.is_empty() {
            return Err(PolicyError::Invalid("no prompts".into()));
        }
        let ny = probs[0].len();
        let tol = row_tolerance::<R>();
        for (x, row) in probs.iter().enumerate() {
            if row.len() != ny {
                return Err(PolicyError::Invalid(format!(
                    "row {x} has {} entries, expected {ny}",
                    row.len()
                )));
            }
            if row.is_empty() {
                return Err(PolicyError::Invalid("empty response space".into()));
            }
            let mut sum = R::zero();
            for (y, &p) in row.iter().enumerate() {
                if !(p >= R::zero()) || !p.is_finite() {
                    return Err(PolicyError::Invalid(format!(
                        "entry ({x}, {y}) = {p} is not a finite nonnegative probability"
                    )));
                }
                sum = sum + p;
            }
            if (sum - R::one()).abs() > tol {
                return Err(PolicyError::Invalid(format!(
                    "row {x} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(num_prompts: usize, num_responses: usize) -> Self {
        let p = R::one() / R::of_usize(num_responses);
        TabularPolicy {
            probs: vec![vec![p; num_responses]; num_prompts],
        }
    }

    pub fn rows(&self) -> &[Vec<R>] {
        &self.probs
    }
}

impl<R: Real> Policy<R> for TabularPolicy<R> {
    fn num_prompts(&self) -> usize {
        self.probs.len()
    }

    fn num_responses(&self) -> usize {
        self.probs[0].len()
    }

    fn action_distribution(&self, prompt: usize) -> Result<Vec<R>, PolicyError> {
        check_prompt(self, prompt)?;
        Ok(self.probs[prompt].clone())
    }

    fn log_prob(&self, prompt: usize, response: usize) -> Result<R, PolicyError> {
        check_prompt(self, prompt)?;
        let p = *self.probs[prompt]
            .get(response)
            .ok_or(PolicyError::ResponseOutOfRange {
                response,
                size: self.num_responses(),
            })?;
        if p <= R::zero() {
            return Err(PolicyError::UnsupportedResponse { prompt, response });
        }
        Ok(p.ln())
    }

    fn prob(&self, prompt: usize, response: usize) -> Result<R, PolicyError> {
        check_prompt(self, prompt)?;
        self.probs[prompt]
            .get(response)
            .copied()
            .ok_or(PolicyError::ResponseOutOfRange {
                response,
                size: self.num_responses(),
            })
    }
}

/// Softmax policy pi_theta(y|x) proportional to exp(<phi(x,y), theta>/beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearPolicy<R> {
    pub theta: Vec<R>,
    pub beta: R,
    pub features: FeatureMap<R>,
}

impl<R: Real> LogLinearPolicy<R> {
    pub fn new(theta: Vec<R>, beta: R, features: FeatureMap<R>) -> Result<Self, PolicyError> {
        if !(beta > R::zero()) {
            return Err(PolicyError::Invalid(format!("beta = {beta} must be > 0")));
        }
        if theta.len() != features.dim {
            return Err(PolicyError::Invalid(format!(
                "theta has {} entries, feature dim is {}",
                theta.len(),
                features.dim
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(PolicyError::Invalid("non-finite theta entry".into()));
        }
        Ok(LogLinearPolicy {
            theta,
            beta,
            features,
        })
    }

    pub fn zeros(beta: R, features: FeatureMap<R>) -> Result<Self, PolicyError> {
        let dim = features.dim;
        Self::new(vec![R::zero(); dim], beta, features)
    }

    fn logits(&self, prompt: usize) -> Vec<R> {
        (0..self.features.num_responses)
            .map(|y| {
                let phi = self.features.phi(prompt, y);
                let dot: R = phi
                    .iter()
                    .zip(&self.theta)
                    .map(|(&a, &b)| a * b)
                    .sum();
                dot / self.beta
            })
            .collect()
    }

    /// Log-probability row computed in log-sum-exp form.
    pub fn log_distribution(&self, prompt: usize) -> Result<Vec<R>, PolicyError> {
        check_prompt(self, prompt)?;
        let logits = self.logits(prompt);
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(PolicyError::Overflow {
                prompt,
                beta: self.beta.to_f64_lossy(),
            });
        }
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }

    /// Snapshot of the policy as an explicit probability table.
    pub fn to_tabular(&self) -> Result<TabularPolicy<R>, PolicyError> {
        let rows = (0..self.num_prompts())
            .map(|x| self.action_distribution(x))
            .collect::<Result<Vec<_>, _>>()?;
        TabularPolicy::new(rows)
    }
}

impl<R: Real> Policy<R> for LogLinearPolicy<R> {
    fn num_prompts(&self) -> usize {
        self.features.num_prompts
    }

    fn num_responses(&self) -> usize {
        self.features.num_responses
    }

    fn action_distribution(&self, prompt: usize) -> Result<Vec<R>, PolicyError> {
        // Max-shifted exponentials, renormalized to absorb rounding.
        let log_row = self.log_distribution(prompt)?;
        let probs: Vec<R> = log_row.iter().map(|&l| l.exp()).collect();
        let sum: R = probs.iter().copied().sum();
        Ok(probs.into_iter().map(|p| p / sum).collect())
    }

    fn log_prob(&self, prompt: usize, response: usize) -> Result<R, PolicyError> {
        let row = self.log_distribution(prompt)?;
        row.get(response)
            .copied()
            .ok_or(PolicyError::ResponseOutOfRange {
                response,
                size: self.num_responses(),
            })
    }
}

/// Point-wise reward table r(x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFunction<R> {
    values: Vec<Vec<R>>,
}

impl<R: Real> RewardFunction<R> {
    pub fn new(values: Vec<Vec<R>>) -> Result<Self, PolicyError> {
        if values.is_empty() || values[0].is_empty() {
            return Err(PolicyError::InvalidReward("empty reward table".into()));
        }
        let ny = values[0].len();
        for row in &values {
            if row.len() != ny {
                return Err(PolicyError::InvalidReward("ragged reward table".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::InvalidReward("non-finite reward".into()));
            }
        }
        Ok(RewardFunction { values })
    }

    pub fn constant(num_prompts: usize, num_responses: usize, value: R) -> Self {
        RewardFunction {
            values: vec![vec![value; num_responses]; num_prompts],
        }
    }

    /// Materialize the implicit reward beta * (log pi - log pi_ref).
    pub fn implicit(
        policy: &dyn Policy<R>,
        reference: &dyn Policy<R>,
        beta: R,
    ) -> Result<Self, PolicyError> {
        let mut values = Vec::with_capacity(policy.num_prompts());
        for x in 0..policy.num_prompts() {
            let mut row = Vec::with_capacity(policy.num_responses());
            for y in 0..policy.num_responses() {
                row.push(beta * (policy.log_prob(x, y)? - reference.log_prob(x, y)?));
            }
            values.push(row);
        }
        Ok(RewardFunction { values })
    }

    pub fn get(&self, prompt: usize, response: usize) -> R {
        self.values[prompt][response]
    }

    pub fn num_prompts(&self) -> usize {
        self.values.len()
    }

    pub fn num_responses(&self) -> usize {
        self.values[0].len()
    }

    pub fn rows(&self) -> &[Vec<R>] {
        &self.values
    }

    pub fn negated(&self) -> Self {
        RewardFunction {
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|&v| -v).collect())
                .collect(),
        }
    }

    pub fn min_max(&self) -> (R, R) {
        let mut lo = R::infinity();
        let mut hi = R::neg_infinity();
        for row in &self.values {
            for &v in row {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
        }
        (lo, hi)
    }
}

/// Draw one response index from the policy's conditional distribution using
/// inverse-CDF sampling on the caller's private rng stream.
pub fn sample_response<R: Real>(
    policy: &dyn Policy<R>,
    prompt: usize,
    rng: &mut impl Rng,
) -> Result<usize, PolicyError> {
    let row = policy.action_distribution(prompt)?;
    let u = R::of(rng.random::<f64>());
    let mut acc = R::zero();
    for (y, &p) in row.iter().enumerate() {
        acc = acc + p;
        if u < acc {
            return Ok(y);
        }
    }
    // Guard against accumulated rounding at u close to 1: return the last
    // supported response.
    Ok(row
        .iter()
        .rposition(|&p| p > R::zero())
        .unwrap_or(row.len() - 1))
}

/// Expected KL divergence sum_x w(x) KL(p(.|x) || q(.|x)).
pub fn kl_divergence<R: Real>(
    p: &dyn Policy<R>,
    q: &dyn Policy<R>,
    prompt_weights: &[R],
) -> Result<R, PolicyError> {
    if prompt_weights.len() != p.num_prompts() || p.num_prompts() != q.num_prompts() {
        return Err(PolicyError::ShapeMismatch(format!(
            "weights {} vs |X| {} and {}",
            prompt_weights.len(),
            p.num_prompts(),
            q.num_prompts()
        )));
    }
    let mut total = R::zero();
    for (x, &w) in prompt_weights.iter().enumerate() {
        if w <= R::zero() {
            continue;
        }
        let prow = p.action_distribution(x)?;
        let qrow = q.action_distribution(x)?;
        let mut kl = R::zero();
        for y in 0..prow.len() {
            if prow[y] > R::zero() {
                if qrow[y] <= R::zero() {
                    return Err(PolicyError::SupportViolation {
                        prompt: x,
                        response: y,
                    });
                }
                kl = kl + prow[y] * (prow[y].ln() - qrow[y].ln());
            }
        }
        total = total + w * kl;
    }
    Ok(total)
}

/// Closed-form maximizer of the KL-regularized expected reward:
/// pi(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x), normalized in log-space.
pub fn exponential_tilt<R: Real>(
    reference: &dyn Policy<R>,
    reward: &RewardFunction<R>,
    beta: R,
) -> Result<TabularPolicy<R>, PolicyError> {
    if !(beta > R::zero()) {
        return Err(PolicyError::Invalid(format!("beta = {beta} must be > 0")));
    }
    if reward.num_prompts() != reference.num_prompts()
        || reward.num_responses() != reference.num_responses()
    {
        return Err(PolicyError::ShapeMismatch(
            "reward table does not match policy shape".into(),
        ));
    }
    let mut rows = Vec::with_capacity(reference.num_prompts());
    for x in 0..reference.num_prompts() {
        let ref_row = reference.action_distribution(x)?;
        let log_terms: Vec<(usize, R)> = ref_row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > R::zero())
            .map(|(y, &p)| (y, p.ln() + reward.get(x, y) / beta))
            .collect();
        let logs: Vec<R> = log_terms.iter().map(|&(_, l)| l).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(PolicyError::Overflow {
                prompt: x,
                beta: beta.to_f64_lossy(),
            });
        }
        let mut row = vec![R::zero(); ref_row.len()];
        let mut sum = R::zero();
        for &(y, l) in &log_terms {
            let p = (l - lse).exp();
            row[y] = p;
            sum = sum + p;
        }
        for p in row.iter_mut() {
            *p = *p / sum;
        }
        rows.push(row);
    }
    TabularPolicy::new(rows)
}

/// Per-prompt normalizers Z(x) = sum_y pi_ref(y|x) exp(r(x,y)/beta) of the
/// tilt, computed directly (not in log-space) for diagnostic use.
pub fn tilt_normalizers<R: Real>(
    reference: &dyn Policy<R>,
    reward: &RewardFunction<R>,
    beta: R,
) -> Result<Vec<R>, PolicyError> {
    let mut zs = Vec::with_capacity(reference.num_prompts());
    for x in 0..reference.num_prompts() {
        let ref_row = reference.action_distribution(x)?;
        let z: R = ref_row
            .iter()
            .enumerate()
            .map(|(y, &p)| p * (reward.get(x, y) / beta).exp())
            .sum();
        zs.push(z);
    }
    Ok(zs)
}

/// Empirical bound max over (x, y) of |log pi(y|x) - log pi_ref(y|x)|.
pub fn log_ratio_bound<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
) -> Result<R, PolicyError> {
    if policy.num_prompts() != reference.num_prompts()
        || policy.num_responses() != reference.num_responses()
    {
        return Err(PolicyError::ShapeMismatch("policy vs reference".into()));
    }
    let mut bound = R::zero();
    for x in 0..policy.num_prompts() {
        let prow = policy.action_distribution(x)?;
        let qrow = reference.action_distribution(x)?;
        for y in 0..prow.len() {
            match (prow[y] > R::zero(), qrow[y] > R::zero()) {
                (true, true) => {
                    let d = (prow[y].ln() - qrow[y].ln()).abs();
                    if d > bound {
                        bound = d;
                    }
                }
                (false, false) => {}
                _ => {
                    return Err(PolicyError::SupportViolation {
                        prompt: x,
                        response: y,
                    })
                }
            }
        }
    }
    Ok(bound)
}

/// Serializable policy document: {"kind": "tabular" | "loglinear", ...}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyDocument<R> {
    Tabular { probs: Vec<Vec<R>> },
    LogLinear {
        beta: R,
        theta: Vec<R>,
        feature_map: FeatureMap<R>,
    },
}

impl<R: Real + Serialize + for<'a> Deserialize<'a>> PolicyDocument<R> {
    pub fn from_tabular(p: &TabularPolicy<R>) -> Self {
        PolicyDocument::Tabular {
            probs: p.rows().to_vec(),
        }
    }

    pub fn from_log_linear(p: &LogLinearPolicy<R>) -> Self {
        PolicyDocument::LogLinear {
            beta: p.beta,
            theta: p.theta.clone(),
            feature_map: p.features.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialization")
    }

    /// Parse and revalidate the policy invariants.
    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let doc: PolicyDocument<R> = serde_json::from_str(json)
            .map_err(|e| PolicyError::Invalid(format!("parse error: {e}")))?;
        match &doc {
            PolicyDocument::Tabular { probs } => {
                TabularPolicy::new(probs.clone())?;
            }
            PolicyDocument::LogLinear {
                beta,
                theta,
                feature_map,
            } => {
                LogLinearPolicy::new(theta.clone(), *beta, feature_map.clone())?;
            }
        }
        Ok(doc)
    }
}
