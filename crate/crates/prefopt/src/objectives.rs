//! Losses, objective values, and analytic gradients, plus the brute-force
//! and finite-difference oracles used to verify them.
//!
//! Everything here is exact enumeration over finite spaces; sampling only
//! enters through explicitly recorded sample lists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DomainError, FeatureMap, Item, PreferenceDataset, PreferenceTriple, Record,
};
use crate::num::{log_sum_exp, sigmoid, Real};
use crate::policy::{
    exponential_tilt, kl_divergence, LogLinearPolicy, Policy, PolicyError, RewardFunction,
    TabularPolicy,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no prompts / samples to average over")]
    EmptySamples,
    #[error("recorded-samples mode requires a sample list")]
    MissingSamples,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("support violation for triple {id:?}")]
    TripleSupport { id: String },
    #[error("|Y| = {ny} too large for brute-force search (max 5)")]
    DimensionTooLarge { ny: usize },
    #[error("grid resolution {0} too small (min 100)")]
    ResolutionTooSmall(usize),
    #[error("prompt weights have length {got}, expected {expected}")]
    WeightMismatch { got: usize, expected: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// How expectations over responses are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    ExactTabular,
    RecordedSamples,
}

/// Weights of the loss terms.
///
/// `alpha_scales_beta` selects between the two multiplier conventions for
/// the optimism term: alpha * beta (default) or plain alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig<R> {
    pub beta: R,
    pub alpha: R,
    pub expectation_mode: ExpectationMode,
    pub alpha_scales_beta: bool,
}

impl<R: Real> ObjectiveConfig<R> {
    pub fn new(beta: R, alpha: R) -> Result<Self, ObjectiveError> {
        if !(beta > R::zero()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta = {beta} must be > 0"
            )));
        }
        if !(alpha >= R::zero()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "alpha = {alpha} must be >= 0"
            )));
        }
        Ok(ObjectiveConfig {
            beta,
            alpha,
            expectation_mode: ExpectationMode::ExactTabular,
            alpha_scales_beta: true,
        })
    }

    pub fn with_mode(mut self, mode: ExpectationMode) -> Self {
        self.expectation_mode = mode;
        self
    }

    /// Multiplier applied to the expected-log-prob optimism term.
    pub fn optimism_multiplier(&self) -> R {
        if self.alpha_scales_beta {
            self.alpha * self.beta
        } else {
            self.alpha
        }
    }
}

/// Comparison of an analytic gradient against its finite-difference oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub h: f64,
}

impl GradientReport {
    pub fn new(analytic: Vec<f64>, numeric: Vec<f64>, h: f64) -> Self {
        let max_rel_err = max_rel_err(&analytic, &numeric);
        GradientReport {
            analytic,
            numeric,
            max_rel_err,
            h,
        }
    }
}

/// max_i |a_i - b_i| / max(1, |a_i|, |b_i|).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / 1.0f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Bradley-Terry win probability sigma(r_w - r_l).
pub fn bt_preference_prob<R: Real>(r_w: R, r_l: R) -> Result<R, ObjectiveError> {
    if !r_w.is_finite() || !r_l.is_finite() {
        return Err(ObjectiveError::NonFinite("bt_preference_prob input".into()));
    }
    Ok(sigmoid(r_w - r_l))
}

fn triple_indices(triple: &PreferenceTriple) -> Result<(usize, usize, usize), ObjectiveError> {
    Ok((
        triple.prompt.as_index("prompt")?,
        triple.chosen.as_index("chosen")?,
        triple.rejected.as_index("rejected")?,
    ))
}

/// Mean negative log-likelihood of the dataset under a point-wise reward.
pub fn reward_nll<R: Real>(
    reward: &RewardFunction<R>,
    dataset: &PreferenceDataset,
) -> Result<R, ObjectiveError> {
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut total = R::zero();
    for record in &dataset.records {
        let (x, yw, yl) = triple_indices(record.triple())?;
        let margin = reward.get(x, yw) - reward.get(x, yl);
        total = total - sigmoid(margin).ln();
    }
    Ok(total / R::of_usize(dataset.len()))
}

/// Implicit reward beta * (log pi(y|x) - log pi_ref(y|x)).
pub fn implicit_reward<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    beta: R,
    prompt: usize,
    response: usize,
) -> Result<R, ObjectiveError> {
    Ok(beta * (policy.log_prob(prompt, response)? - reference.log_prob(prompt, response)?))
}

/// Mean DPO loss -log sigma(r_hat(x, y_w) - r_hat(x, y_l)) over the dataset.
pub fn dpo_loss<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    config: &ObjectiveConfig<R>,
    dataset: &PreferenceDataset,
) -> Result<R, ObjectiveError> {
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut total = R::zero();
    for record in &dataset.records {
        let (x, yw, yl) = triple_indices(record.triple())?;
        let margin = implicit_reward(policy, reference, config.beta, x, yw).map_err(|_| {
            ObjectiveError::TripleSupport {
                id: record.id().to_string(),
            }
        })? - implicit_reward(policy, reference, config.beta, x, yl).map_err(|_| {
            ObjectiveError::TripleSupport {
                id: record.id().to_string(),
            }
        })?;
        total = total - sigmoid(margin).ln();
    }
    Ok(total / R::of_usize(dataset.len()))
}

/// Expectation source for E_{x, y ~ pi_ref}[log pi_theta(y|x)].
#[derive(Debug, Clone, Copy)]
pub enum RefExpectation<'a> {
    /// Enumerate the reference distribution exactly for each listed prompt
    /// (prompts may repeat; the mean weighs them by multiplicity).
    ExactTabular(&'a [usize]),
    /// Average over recorded (prompt, response) pairs drawn from pi_ref.
    RecordedSamples(&'a [(usize, usize)]),
}

/// E_{x, y ~ pi_ref}[log pi_theta(y|x)]; always <= 0.
pub fn reference_expected_logprob<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    expectation: RefExpectation<'_>,
) -> Result<R, ObjectiveError> {
    match expectation {
        RefExpectation::ExactTabular(prompts) => {
            if prompts.is_empty() {
                return Err(ObjectiveError::EmptySamples);
            }
            let mut total = R::zero();
            for &x in prompts {
                let ref_row = reference.action_distribution(x)?;
                for (y, &p) in ref_row.iter().enumerate() {
                    if p > R::zero() {
                        total = total + p * policy.log_prob(x, y)?;
                    }
                }
            }
            Ok(total / R::of_usize(prompts.len()))
        }
        RefExpectation::RecordedSamples(samples) => {
            if samples.is_empty() {
                return Err(ObjectiveError::EmptySamples);
            }
            let mut total = R::zero();
            for &(x, y) in samples {
                total = total + policy.log_prob(x, y)?;
            }
            Ok(total / R::of_usize(samples.len()))
        }
    }
}

fn dataset_prompts(dataset: &PreferenceDataset) -> Result<Vec<usize>, ObjectiveError> {
    dataset
        .records
        .iter()
        .map(|r| Ok(r.triple().prompt.as_index("prompt")?))
        .collect()
}

/// Self-exploration loss: dpo_loss + alpha * beta * E_{x, y ~ pi_ref}[log pi_theta].
///
/// With alpha = 0 this returns the DPO loss bit-for-bit.
pub fn selm_loss<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    config: &ObjectiveConfig<R>,
    dataset: &PreferenceDataset,
    ref_samples: Option<&[(usize, usize)]>,
) -> Result<R, ObjectiveError> {
    let dpo = dpo_loss(policy, reference, config, dataset)?;
    if config.alpha == R::zero() {
        return Ok(dpo);
    }
    let prompts;
    let expectation = match config.expectation_mode {
        ExpectationMode::ExactTabular => {
            prompts = dataset_prompts(dataset)?;
            RefExpectation::ExactTabular(&prompts)
        }
        ExpectationMode::RecordedSamples => {
            RefExpectation::RecordedSamples(ref_samples.ok_or(ObjectiveError::MissingSamples)?)
        }
    };
    let expected = reference_expected_logprob(policy, reference, expectation)?;
    Ok(dpo + config.optimism_multiplier() * expected)
}

/// Gradient of log pi_theta(y|x) for a log-linear policy:
/// (phi(x, y) - E_{y' ~ pi_theta}[phi(x, y')]) / beta.
pub fn grad_log_prob<R: Real>(
    policy: &LogLinearPolicy<R>,
    prompt: usize,
    response: usize,
) -> Result<Vec<R>, ObjectiveError> {
    let probs = policy.action_distribution(prompt)?;
    let d = policy.features.dim;
    let mut mean_phi = vec![R::zero(); d];
    for (y, &p) in probs.iter().enumerate() {
        let phi = policy.features.phi(prompt, y);
        for i in 0..d {
            mean_phi[i] = mean_phi[i] + p * phi[i];
        }
    }
    let phi = policy.features.phi(prompt, response);
    Ok((0..d)
        .map(|i| (phi[i] - mean_phi[i]) / policy.beta)
        .collect())
}

fn axpy<R: Real>(acc: &mut [R], scale: R, v: &[R]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + scale * b;
    }
}

/// Analytic gradient of [`dpo_loss`] with respect to theta.
pub fn dpo_gradient<R: Real>(
    policy: &LogLinearPolicy<R>,
    reference: &dyn Policy<R>,
    config: &ObjectiveConfig<R>,
    dataset: &PreferenceDataset,
) -> Result<Vec<R>, ObjectiveError> {
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let d = policy.features.dim;
    let mut grad = vec![R::zero(); d];
    let inv_n = R::one() / R::of_usize(dataset.len());
    for record in &dataset.records {
        let (x, yw, yl) = triple_indices(record.triple())?;
        let r_w = implicit_reward(policy, reference, config.beta, x, yw)?;
        let r_l = implicit_reward(policy, reference, config.beta, x, yl)?;
        let weight = sigmoid(r_l - r_w);
        let g_w = grad_log_prob(policy, x, yw)?;
        let g_l = grad_log_prob(policy, x, yl)?;
        let scale = -config.beta * weight * inv_n;
        axpy(&mut grad, scale, &g_w);
        axpy(&mut grad, -scale, &g_l);
    }
    Ok(grad)
}

/// Gradient of the optimism loss term evaluated over recorded reference
/// samples: multiplier * mean grad log pi_theta(y|x). This is the exact
/// gradient of the recorded-sample form of the loss.
pub fn ref_sample_logprob_gradient<R: Real>(
    policy: &LogLinearPolicy<R>,
    samples: &[(usize, usize)],
    multiplier: R,
) -> Result<Vec<R>, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptySamples);
    }
    let d = policy.features.dim;
    let mut grad = vec![R::zero(); d];
    let scale = multiplier / R::of_usize(samples.len());
    for &(x, y) in samples {
        let g = grad_log_prob(policy, x, y)?;
        axpy(&mut grad, scale, &g);
    }
    Ok(grad)
}

/// Analytic gradient of [`selm_loss`].
///
/// Exact mode enumerates the reference expectation directly; sample mode
/// uses responses drawn from the current policy with importance weight
/// exp(-r_hat/beta), the score-function form of the same expectation.
pub fn selm_gradient<R: Real>(
    policy: &LogLinearPolicy<R>,
    reference: &dyn Policy<R>,
    config: &ObjectiveConfig<R>,
    dataset: &PreferenceDataset,
    policy_samples: Option<&[(usize, usize)]>,
) -> Result<Vec<R>, ObjectiveError> {
    let grad = dpo_gradient(policy, reference, config, dataset)?;
    if config.alpha == R::zero() {
        return Ok(grad);
    }
    let mut grad = grad;
    let mult = config.optimism_multiplier();
    match config.expectation_mode {
        ExpectationMode::ExactTabular => {
            let prompts = dataset_prompts(dataset)?;
            let scale = mult / R::of_usize(prompts.len());
            for &x in &prompts {
                let ref_row = reference.action_distribution(x)?;
                for (y, &p) in ref_row.iter().enumerate() {
                    if p > R::zero() {
                        let g = grad_log_prob(policy, x, y)?;
                        axpy(&mut grad, scale * p, &g);
                    }
                }
            }
        }
        ExpectationMode::RecordedSamples => {
            let samples = policy_samples.ok_or(ObjectiveError::MissingSamples)?;
            if samples.is_empty() {
                return Err(ObjectiveError::EmptySamples);
            }
            let scale = mult / R::of_usize(samples.len());
            for &(x, y) in samples {
                let r_hat = implicit_reward(policy, reference, config.beta, x, y)?;
                let weight = (-r_hat / config.beta).exp();
                let g = grad_log_prob(policy, x, y)?;
                axpy(&mut grad, scale * weight, &g);
            }
        }
    }
    Ok(grad)
}

fn check_weights<R: Real>(weights: &[R], expected: usize) -> Result<(), ObjectiveError> {
    if weights.len() != expected {
        return Err(ObjectiveError::WeightMismatch {
            got: weights.len(),
            expected,
        });
    }
    Ok(())
}

/// KL-regularized objective J(pi) = E[r] - beta * KL(pi || pi_ref), exactly
/// enumerated.
pub fn rlhf_objective<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    beta: R,
    reward: &RewardFunction<R>,
    prompt_weights: &[R],
) -> Result<R, ObjectiveError> {
    check_weights(prompt_weights, policy.num_prompts())?;
    let mut expected_reward = R::zero();
    for (x, &w) in prompt_weights.iter().enumerate() {
        if w <= R::zero() {
            continue;
        }
        let row = policy.action_distribution(x)?;
        for (y, &p) in row.iter().enumerate() {
            expected_reward = expected_reward + w * p * reward.get(x, y);
        }
    }
    let kl = kl_divergence(policy, reference, prompt_weights)?;
    Ok(expected_reward - beta * kl)
}

/// Inner objective F(pi; r) = E_{y~pi, y'~ref}[r(y) - r(y')] - beta * KL(pi || ref).
pub fn inner_value<R: Real>(
    policy: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    beta: R,
    reward: &RewardFunction<R>,
    prompt_weights: &[R],
) -> Result<R, ObjectiveError> {
    let j = rlhf_objective(policy, reference, beta, reward, prompt_weights)?;
    let mut ref_reward = R::zero();
    for (x, &w) in prompt_weights.iter().enumerate() {
        if w <= R::zero() {
            continue;
        }
        let row = reference.action_distribution(x)?;
        for (y, &p) in row.iter().enumerate() {
            ref_reward = ref_reward + w * p * reward.get(x, y);
        }
    }
    Ok(j - ref_reward)
}

/// Closed-form max of F over pi:
/// E_x[beta log E_{y~ref} exp(r/beta)] - E_{x, y'~ref}[r].
pub fn inner_value_closed_form<R: Real>(
    reference: &dyn Policy<R>,
    beta: R,
    reward: &RewardFunction<R>,
    prompt_weights: &[R],
) -> Result<R, ObjectiveError> {
    check_weights(prompt_weights, reference.num_prompts())?;
    let mut total = R::zero();
    for (x, &w) in prompt_weights.iter().enumerate() {
        if w <= R::zero() {
            continue;
        }
        let row = reference.action_distribution(x)?;
        let logs: Vec<R> = row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > R::zero())
            .map(|(y, &p)| p.ln() + reward.get(x, y) / beta)
            .collect();
        let log_mgf = log_sum_exp(&logs);
        if !log_mgf.is_finite() {
            return Err(ObjectiveError::NonFinite(format!(
                "log-partition at prompt {x}"
            )));
        }
        let mut ref_reward = R::zero();
        for (y, &p) in row.iter().enumerate() {
            ref_reward = ref_reward + p * reward.get(x, y);
        }
        total = total + w * (beta * log_mgf - ref_reward);
    }
    Ok(total)
}

/// Policy minimizing E_{y~pi}[r_hat_rho] + beta KL(pi || pi_rho): the tilt of
/// pi_rho by the negated implicit reward. By the normalizer identity this
/// equals pi_ref exactly.
pub fn min_reward_policy<R: Real>(
    rho: &dyn Policy<R>,
    reference: &dyn Policy<R>,
    beta: R,
) -> Result<TabularPolicy<R>, ObjectiveError> {
    let r_hat = RewardFunction::implicit(rho, reference, beta)?;
    Ok(exponential_tilt(rho, &r_hat.negated(), beta)?)
}

/// Central-difference gradient oracle.
pub fn finite_diff_gradient<R, F, E>(
    mut loss: F,
    theta: &[R],
    h: R,
) -> Result<Vec<R>, ObjectiveError>
where
    R: Real,
    E: Into<ObjectiveError>,
    F: FnMut(&[R]) -> Result<R, E>,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = loss(&point).map_err(Into::into)?;
        point[i] = theta[i] - h;
        let minus = loss(&point).map_err(Into::into)?;
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(ObjectiveError::NonFinite(format!(
                "loss evaluation at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (h + h));
    }
    Ok(grad)
}

fn simplex_value<R: Real>(
    point: &[R],
    ref_row: &[R],
    reward_row: &[R],
    beta: R,
) -> R {
    // Per-prompt F contribution; -inf outside the reference support.
    let mut value = R::zero();
    for y in 0..point.len() {
        let p = point[y];
        if p > R::zero() {
            if ref_row[y] <= R::zero() {
                return R::neg_infinity();
            }
            value = value + p * reward_row[y] - beta * p * (p.ln() - ref_row[y].ln());
        }
        value = value - ref_row[y] * reward_row[y];
    }
    value
}

fn enumerate_compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut impl FnMut(&[usize])) {
    if parts == 1 {
        prefix.push(total);
        out(prefix);
        prefix.pop();
        return;
    }
    for first in 0..=total {
        prefix.push(first);
        enumerate_compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Independent maximizer of F over a per-prompt simplex grid with local
/// hill-climb refinement. Deliberately avoids the closed form.
pub fn brute_force_inner_max<R: Real>(
    reference: &dyn Policy<R>,
    beta: R,
    reward: &RewardFunction<R>,
    prompt_weights: &[R],
    grid_resolution: usize,
) -> Result<(TabularPolicy<R>, R), ObjectiveError> {
    let ny = reference.num_responses();
    if ny > 5 {
        return Err(ObjectiveError::DimensionTooLarge { ny });
    }
    if grid_resolution < 100 {
        return Err(ObjectiveError::ResolutionTooSmall(grid_resolution));
    }
    check_weights(prompt_weights, reference.num_prompts())?;

    let mut rows = Vec::with_capacity(reference.num_prompts());
    let mut total = R::zero();
    for x in 0..reference.num_prompts() {
        let ref_row = reference.action_distribution(x)?;
        let reward_row: Vec<R> = (0..ny).map(|y| reward.get(x, y)).collect();

        let mut best_point = ref_row.clone();
        let mut best_value = simplex_value(&best_point, &ref_row, &reward_row, beta);
        let res = R::of_usize(grid_resolution);
        let mut prefix = Vec::with_capacity(ny);
        enumerate_compositions(grid_resolution, ny, &mut prefix, &mut |counts| {
            let point: Vec<R> = counts.iter().map(|&c| R::of_usize(c) / res).collect();
            let value = simplex_value(&point, &ref_row, &reward_row, beta);
            if value > best_value {
                best_value = value;
                best_point = point;
            }
        });

        // Hill-climb along simplex edge directions with shrinking steps.
        // Sweeps per step size are capped: near the optimum each sweep only
        // gains O(delta^2), so unbounded sweeping at tiny steps would crawl.
        let mut delta = R::one() / res;
        for _ in 0..30 {
            let mut improved = true;
            let mut sweeps = 0;
            while improved && sweeps < 200 {
                improved = false;
                sweeps += 1;
                for i in 0..ny {
                    for j in 0..ny {
                        if i == j || best_point[j] < delta {
                            continue;
                        }
                        let mut cand = best_point.clone();
                        cand[i] = cand[i] + delta;
                        cand[j] = cand[j] - delta;
                        let value = simplex_value(&cand, &ref_row, &reward_row, beta);
                        if value > best_value {
                            best_value = value;
                            best_point = cand;
                            improved = true;
                        }
                    }
                }
            }
            delta = delta / (R::one() + R::one());
        }

        total = total + prompt_weights[x] * best_value;
        let sum: R = best_point.iter().copied().sum();
        rows.push(best_point.into_iter().map(|p| p / sum).collect());
    }
    Ok((TabularPolicy::new(rows)?, total))
}

/// Seeded random problem instance for gradient and identity checks.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub policy: LogLinearPolicy<f64>,
    pub reference: TabularPolicy<f64>,
    pub config: ObjectiveConfig<f64>,
    pub dataset: PreferenceDataset,
    pub prompt_weights: Vec<f64>,
}

/// Generate a small random instance: d <= 16, |X|, |Y| <= 6,
/// beta in {0.1, 1}, alpha in {0, 0.01, 1}.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = rng.random_range(1..=6);
    let ny = rng.random_range(2..=6);
    let d = rng.random_range(2..=16);
    let beta = *[0.1, 1.0].iter().nth(rng.random_range(0..2)).unwrap();
    let alpha = *[0.0, 0.01, 1.0].iter().nth(rng.random_range(0..3)).unwrap();

    let features = FeatureMap::<f64>::random_gaussian(nx, ny, d, rng.random());
    let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let policy = LogLinearPolicy::new(theta, beta, features).unwrap();

    let rows: Vec<Vec<f64>> = (0..nx)
        .map(|_| {
            let raw: Vec<f64> = (0..ny).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    let reference = TabularPolicy::new(rows).unwrap();

    let n_triples = rng.random_range(1..=8);
    let records = (0..n_triples)
        .map(|i| {
            let x = rng.random_range(0..nx);
            let yw = rng.random_range(0..ny);
            let yl = (yw + rng.random_range(1..ny)) % ny;
            Record::Plain(PreferenceTriple {
                id: format!("r{i}"),
                prompt: Item::Index(x),
                chosen: Item::Index(yw),
                rejected: Item::Index(yl),
            })
        })
        .collect();
    let dataset = PreferenceDataset::from_records(records);

    let raw: Vec<f64> = (0..nx).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let prompt_weights = raw.into_iter().map(|v| v / sum).collect();

    RandomInstance {
        policy,
        reference,
        config: ObjectiveConfig::new(beta, alpha).unwrap(),
        dataset,
        prompt_weights,
    }
}

/// Run one finite-difference check of the DPO and SELM gradients on a
/// random instance; returns (dpo report, selm report).
pub fn gradcheck_instance(seed: u64, h: f64) -> Result<(GradientReport, GradientReport), ObjectiveError> {
    let inst = random_instance(seed);
    let RandomInstance {
        policy,
        reference,
        config,
        dataset,
        ..
    } = inst;

    let dpo_analytic = dpo_gradient(&policy, &reference, &config, &dataset)?;
    let dpo_numeric = finite_diff_gradient(
        |theta: &[f64]| -> Result<f64, ObjectiveError> {
            let p = LogLinearPolicy::new(theta.to_vec(), policy.beta, policy.features.clone())?;
            dpo_loss(&p, &reference, &config, &dataset)
        },
        &policy.theta,
        h,
    )?;
    let dpo_report = GradientReport::new(dpo_analytic, dpo_numeric, h);

    let selm_analytic = selm_gradient(&policy, &reference, &config, &dataset, None)?;
    let selm_numeric = finite_diff_gradient(
        |theta: &[f64]| -> Result<f64, ObjectiveError> {
            let p = LogLinearPolicy::new(theta.to_vec(), policy.beta, policy.features.clone())?;
            selm_loss(&p, &reference, &config, &dataset, None)
        },
        &policy.theta,
        h,
    )?;
    let selm_report = GradientReport::new(selm_analytic, selm_numeric, h);

    Ok((dpo_report, selm_report))
}
