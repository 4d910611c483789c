//! Training driver, the iterative algorithms, regret accounting, and the
//! comparison reports.
//!
//! A run is fully determined by (config, seed): dataset synthesis, response
//! sampling, and ranking each draw from their own seeded streams, so equal
//! inputs reproduce bit-identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    partition_dataset, DatasetSchema, DomainError, FeatureMap, Item, PreferenceDataset,
    PreferenceTriple, Record, ScoredPair,
};
use crate::objectives::{
    dpo_gradient, implicit_reward, ref_sample_logprob_gradient, rlhf_objective, selm_gradient,
    selm_loss, ExpectationMode, ObjectiveConfig, ObjectiveError,
};
use crate::oracle::{Environment, OracleError};
use crate::policy::{
    exponential_tilt, sample_response, LogLinearPolicy, Policy, PolicyError,
    TabularPolicy,
};
use crate::reward_augment::{augment_dataset, AugmentError, GoalEncoding, TiePolicy};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}, step {step}")]
    NonFiniteLoss { iteration: usize, step: usize },
    #[error("regret increment {increment} below -1e-12 at iteration {iteration}")]
    RegretViolation { iteration: usize, increment: f64 },
    #[error("runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("could not draw distinct responses after {0} attempts")]
    DegenerateSampling(usize),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    DpoOffline,
    DpoIterative,
    Selm,
    SelmTheoretical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps_per_iteration: usize,
    /// Per-iteration multiplier on the learning rate.
    #[serde(default = "one")]
    pub lr_decay: f64,
    /// Reset theta to the reference snapshot at the start of each iteration.
    /// With the reference reassigned to the current policy every iteration
    /// this coincides with continuing from the previous theta; the flag is
    /// kept for configs that pin the reference.
    #[serde(default)]
    pub restart_from_ref: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FeatureSpec {
    OneHot,
    RandomGaussian {
        dim: usize,
        /// Omit to derive the feature seed from the run seed, giving each
        /// seed in a sweep its own random instance.
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnvSpec {
    /// Load a serialized environment from a JSON file.
    File { path: String },
    /// I.i.d. standard-normal rewards. Omitting the seed derives it from
    /// the run seed, giving each seed in a sweep its own random instance.
    RandomGaussian {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        ranker_noise: f64,
        #[serde(default = "default_g_max")]
        g_max: u32,
    },
    /// Reward linear in the run's feature map: r*(x,y) = <phi(x,y), theta*>,
    /// theta* drawn N(0, scale^2) from the seed. The optimal policy is then
    /// representable in the log-linear class.
    LinearFeatures {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        ranker_noise: f64,
        #[serde(default = "default_g_max")]
        g_max: u32,
    },
}

fn default_g_max() -> u32 {
    crate::oracle::DEFAULT_JUDGE_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    File {
        path: String,
        #[serde(default = "plain_schema")]
        schema: DatasetSchema,
    },
    /// Pairs drawn from the environment: x ~ nu, two distinct uniform
    /// responses, labeled by the Bradley-Terry sampler.
    Synthetic { num_pairs: usize },
}

fn plain_schema() -> DatasetSchema {
    DatasetSchema::Plain
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Number of online iterations T.
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub num_prompts: usize,
    pub num_responses: usize,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerConfig,
    pub features: FeatureSpec,
    pub environment: EnvSpec,
    pub dataset: DatasetSpec,
    /// Keep the theoretical loop's reference fixed at the initial policy and
    /// sample y1 from the current policy (the appendix's alternate listing).
    #[serde(default)]
    pub theoretical_fixed_ref: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.iterations < 1 {
            return Err(LoopError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(LoopError::InvalidConfig(
                "optimizer.learning_rate must be > 0".into(),
            ));
        }
        if self.optimizer.steps_per_iteration < 1 {
            return Err(LoopError::InvalidConfig(
                "optimizer.steps_per_iteration must be >= 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(LoopError::InvalidConfig("seeds must be nonempty".into()));
        }
        if !(self.beta > 0.0) {
            return Err(LoopError::InvalidConfig("beta must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(LoopError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.num_prompts == 0 || self.num_responses < 2 {
            return Err(LoopError::InvalidConfig(
                "need at least 1 prompt and 2 responses".into(),
            ));
        }
        Ok(())
    }

    /// Content hash over the full config; runs sharing a hash and seed are
    /// reproductions of each other.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)
    }

    pub fn build_features(&self, run_seed: u64) -> FeatureMap<f64> {
        match &self.features {
            FeatureSpec::OneHot => FeatureMap::one_hot(self.num_prompts, self.num_responses),
            FeatureSpec::RandomGaussian { dim, seed } => {
                let seed = seed.unwrap_or_else(|| sub_seed(run_seed, FEATURE_SEED_STREAM));
                FeatureMap::random_gaussian(self.num_prompts, self.num_responses, *dim, seed)
            }
        }
    }

    pub fn build_environment(
        &self,
        features: &FeatureMap<f64>,
        run_seed: u64,
    ) -> Result<Environment<f64>, LoopError> {
        let env = match &self.environment {
            EnvSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|source| LoopError::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str::<Environment<f64>>(&text)
                    .map_err(|e| LoopError::InvalidConfig(format!("environment file: {e}")))?
            }
            EnvSpec::RandomGaussian {
                seed,
                ranker_noise,
                g_max,
            } => Environment::random_gaussian(
                self.num_prompts,
                self.num_responses,
                seed.unwrap_or_else(|| sub_seed(run_seed, ENV_SEED_STREAM)),
                *ranker_noise,
                *g_max,
            )?,
            EnvSpec::LinearFeatures {
                seed,
                scale,
                ranker_noise,
                g_max,
            } => {
                let seed = seed.unwrap_or_else(|| sub_seed(run_seed, ENV_SEED_STREAM));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, *scale).map_err(|e| {
                    LoopError::InvalidConfig(format!("environment scale: {e}"))
                })?;
                let theta_star: Vec<f64> =
                    (0..features.dim).map(|_| normal.sample(&mut rng)).collect();
                Environment::from_linear_reward(features, &theta_star, *ranker_noise, *g_max)?
            }
        };
        if env.num_prompts() != self.num_prompts || env.num_responses() != self.num_responses {
            return Err(LoopError::InvalidConfig(format!(
                "environment is {}x{} but config declares {}x{}",
                env.num_prompts(),
                env.num_responses(),
                self.num_prompts,
                self.num_responses
            )));
        }
        Ok(env)
    }

    pub fn build_dataset(
        &self,
        env: &Environment<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<PreferenceDataset, LoopError> {
        match &self.dataset {
            DatasetSpec::File { path, schema } => {
                Ok(crate::domain::load_dataset(path, *schema)?)
            }
            DatasetSpec::Synthetic { num_pairs } => synthesize_dataset(env, *num_pairs, rng),
        }
    }
}

/// Inverse-CDF draw from a probability vector.
fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draw `num_pairs` BT-labeled pairs from the environment.
pub fn synthesize_dataset(
    env: &Environment<f64>,
    num_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PreferenceDataset, LoopError> {
    let ny = env.num_responses();
    let mut records = Vec::with_capacity(num_pairs);
    for i in 0..num_pairs {
        let x = sample_index(&env.prompt_weights, rng);
        let y1 = rng.random_range(0..ny);
        let y2 = (y1 + rng.random_range(1..ny)) % ny;
        let mut triple = env.sample_preference(x, y1, y2, rng)?;
        triple.id = format!("syn{i}");
        records.push(Record::Plain(triple));
    }
    Ok(PreferenceDataset::from_records(records))
}

/// One snapshot of the run after an iteration's training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub policy: Option<TabularPolicy<f64>>,
    #[serde(skip)]
    pub dataset: Option<PreferenceDataset>,
    /// Candidate sets handed to the ranker, parallel to the dataset records.
    pub candidate_sets: Vec<Vec<usize>>,
    pub loss_trace: Vec<f64>,
    pub j_value: f64,
    pub r_max_diag: f64,
    pub mean_implicit_reward: f64,
    pub greedy_histogram: Vec<f64>,
    pub mean_true_reward_greedy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub seed: u64,
    pub beta: f64,
    pub alpha: f64,
    #[serde(skip)]
    pub initial_reference: Option<TabularPolicy<f64>>,
    pub iterations: Vec<IterationRecord>,
    /// Partial sums of J(pi*) - J(pi_t); nondecreasing.
    pub regret: Vec<f64>,
}

impl RunResult {
    pub fn initial_reference(&self) -> &TabularPolicy<f64> {
        self.initial_reference
            .as_ref()
            .expect("run result missing reference snapshot")
    }

    pub fn final_policy(&self) -> &TabularPolicy<f64> {
        self.iterations
            .last()
            .and_then(|it| it.policy.as_ref())
            .expect("run result has no iterations")
    }
}

const HISTOGRAM_BINS: usize = 10;

/// Seed streams for config components that derive their seed from the run
/// seed when none is pinned in the spec.
const FEATURE_SEED_STREAM: u64 = 20;
const ENV_SEED_STREAM: u64 = 21;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Lowest-index argmax of a probability row.
fn greedy_response(row: &[f64]) -> usize {
    let mut best = 0;
    for (y, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = y;
        }
    }
    best
}

/// Full-batch gradient descent on the configured loss.
///
/// The loss is recorded at the start of every step, so `trace[0]` is the
/// pre-training loss and the post-update loss of step k is `trace[k+1]`
/// (or unrecorded for the final step).
pub fn train(
    policy: LogLinearPolicy<f64>,
    reference: &dyn Policy<f64>,
    dataset: &PreferenceDataset,
    objective: &ObjectiveConfig<f64>,
    steps: usize,
    learning_rate: f64,
    ref_samples: Option<&[(usize, usize)]>,
    iteration: usize,
) -> Result<(LogLinearPolicy<f64>, Vec<f64>), LoopError> {
    if steps < 1 {
        return Err(LoopError::InvalidConfig("steps must be >= 1".into()));
    }
    let mut policy = policy;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = selm_loss(&policy, reference, objective, dataset, ref_samples)?;
        if !loss.is_finite() {
            return Err(LoopError::NonFiniteLoss { iteration, step });
        }
        trace.push(loss);
        let grad = match (objective.alpha != 0.0, ref_samples) {
            (true, Some(samples)) => {
                // Exact gradient of the recorded-sample loss.
                let mut g = dpo_gradient(&policy, reference, objective, dataset)?;
                let opt = ref_sample_logprob_gradient(
                    &policy,
                    samples,
                    objective.optimism_multiplier(),
                )?;
                for (a, b) in g.iter_mut().zip(&opt) {
                    *a += b;
                }
                g
            }
            (true, None) => selm_gradient(&policy, reference, objective, dataset, None)?,
            (false, _) => dpo_gradient(&policy, reference, objective, dataset)?,
        };
        let theta: Vec<f64> = policy
            .theta
            .iter()
            .zip(&grad)
            .map(|(&t, &g)| t - learning_rate * g)
            .collect();
        policy = LogLinearPolicy::new(theta, policy.beta, policy.features.clone())?;
    }
    Ok((policy, trace))
}

struct MetricsContext<'a> {
    env: &'a Environment<f64>,
    initial_reference: &'a TabularPolicy<f64>,
    reward_lo: f64,
    reward_hi: f64,
}

impl<'a> MetricsContext<'a> {
    fn new(env: &'a Environment<f64>, initial_reference: &'a TabularPolicy<f64>) -> Self {
        let (reward_lo, reward_hi) = env.true_reward.min_max();
        MetricsContext {
            env,
            initial_reference,
            reward_lo,
            reward_hi,
        }
    }

    fn record(
        &self,
        iteration: usize,
        policy: &LogLinearPolicy<f64>,
        reference: &dyn Policy<f64>,
        dataset: PreferenceDataset,
        candidate_sets: Vec<Vec<usize>>,
        loss_trace: Vec<f64>,
        beta: f64,
    ) -> Result<IterationRecord, LoopError> {
        let snapshot = policy.to_tabular()?;
        let j_value = rlhf_objective(
            &snapshot,
            self.initial_reference,
            beta,
            &self.env.true_reward,
            &self.env.prompt_weights,
        )?;
        // R_max diagnostic from the log-space distribution: the tabular
        // snapshot can underflow to exact zeros at small beta.
        let mut r_max_diag = 0.0f64;
        for x in 0..policy.num_prompts() {
            let log_row = policy.log_distribution(x)?;
            for (y, &lp) in log_row.iter().enumerate() {
                let d = (lp - self.initial_reference.log_prob(x, y)?).abs();
                if d > r_max_diag {
                    r_max_diag = d;
                }
            }
        }

        let mut histogram = vec![0.0; HISTOGRAM_BINS];
        let mut mean_true_reward_greedy = 0.0;
        for (x, &w) in self.env.prompt_weights.iter().enumerate() {
            let row = snapshot.action_distribution(x)?;
            let y = greedy_response(&row);
            let r = self.env.true_reward.get(x, y);
            mean_true_reward_greedy += w * r;
            let bin = if self.reward_hi > self.reward_lo {
                let frac = (r - self.reward_lo) / (self.reward_hi - self.reward_lo);
                ((frac * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                HISTOGRAM_BINS - 1
            };
            histogram[bin] += w;
        }

        let mut mean_implicit_reward = 0.0;
        if !dataset.is_empty() {
            for r in &dataset.records {
                let x = r.triple().prompt.as_index("prompt")?;
                let y = r.triple().chosen.as_index("chosen")?;
                mean_implicit_reward += implicit_reward(policy, reference, beta, x, y)?;
            }
            mean_implicit_reward /= dataset.len() as f64;
        }

        Ok(IterationRecord {
            iteration,
            theta: policy.theta.clone(),
            policy: Some(snapshot),
            dataset: Some(dataset),
            candidate_sets,
            loss_trace,
            j_value,
            r_max_diag,
            mean_implicit_reward,
            greedy_histogram: histogram,
            mean_true_reward_greedy,
        })
    }
}

/// Execute the configured algorithm for one seed.
pub fn run(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    config.validate()?;
    match config.algorithm {
        Algorithm::Selm => run_practical(config, seed, config.alpha),
        Algorithm::DpoIterative => run_practical(config, seed, 0.0),
        Algorithm::DpoOffline => run_offline(config, seed),
        Algorithm::SelmTheoretical => run_theoretical(config, seed),
    }
}

/// Iterative DPO: the practical loop with the optimism term disabled.
pub fn run_iterative_dpo(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    config.validate()?;
    run_practical(config, seed, 0.0)
}

/// The practical self-exploration loop: per iteration, sample a fresh
/// response from the reference for every prompt, rank {y, y_w, y_l}, train
/// on the (best, worst) pairs, then reassign the reference.
pub fn run_selm(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    config.validate()?;
    run_practical(config, seed, config.alpha)
}

fn run_practical(config: &RunConfig, seed: u64, alpha: f64) -> Result<RunResult, LoopError> {
    let features = config.build_features(seed);
    let env = config.build_environment(&features, seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let dataset = config.build_dataset(&env, &mut data_rng)?;
    let parts = partition_dataset(&dataset, config.iterations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));

    let mut policy = LogLinearPolicy::zeros(config.beta, features)?;
    let initial_reference = policy.to_tabular()?;
    let metrics = MetricsContext::new(&env, &initial_reference);
    let objective =
        ObjectiveConfig::new(config.beta, alpha)?.with_mode(ExpectationMode::RecordedSamples);

    let mut iterations = Vec::with_capacity(config.iterations);
    let mut lr = config.optimizer.learning_rate;
    for t in 0..config.iterations {
        // Reference snapshot of the current policy, kept in log-space so
        // sharp policies at small beta don't underflow its support.
        let reference = policy.clone();
        let mut records = Vec::with_capacity(parts[t].len());
        let mut candidate_sets = Vec::with_capacity(parts[t].len());
        let mut ref_samples = Vec::with_capacity(parts[t].len());
        for record in &parts[t].records {
            let triple = record.triple();
            let x = triple.prompt.as_index("prompt")?;
            let yw = triple.chosen.as_index("chosen")?;
            let yl = triple.rejected.as_index("rejected")?;
            let y = sample_response(&reference, x, &mut rng)?;
            ref_samples.push((x, y));
            let candidates = vec![y, yw, yl];
            let (best, worst) = env.rank_candidates(x, &candidates, &mut rng)?;
            records.push(Record::Plain(PreferenceTriple {
                id: triple.id.clone(),
                prompt: Item::Index(x),
                chosen: Item::Index(candidates[best]),
                rejected: Item::Index(candidates[worst]),
            }));
            candidate_sets.push(candidates);
        }
        let d_t = PreferenceDataset::from_records(records);

        let (next, trace) = train(
            policy,
            &reference,
            &d_t,
            &objective,
            config.optimizer.steps_per_iteration,
            lr,
            Some(&ref_samples),
            t,
        )?;
        policy = next;
        lr *= config.optimizer.lr_decay;

        iterations.push(metrics.record(
            t,
            &policy,
            &reference,
            d_t,
            candidate_sets,
            trace,
            config.beta,
        )?);
    }

    finish_run(config, seed, alpha, initial_reference, iterations, &env)
}

/// Offline DPO: T passes over the full dataset against the fixed initial
/// reference, no oracle interaction.
fn run_offline(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    let features = config.build_features(seed);
    let env = config.build_environment(&features, seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let dataset = config.build_dataset(&env, &mut data_rng)?;

    let mut policy = LogLinearPolicy::zeros(config.beta, features)?;
    let initial_reference = policy.to_tabular()?;
    let metrics = MetricsContext::new(&env, &initial_reference);
    let objective = ObjectiveConfig::new(config.beta, 0.0)?;

    let mut iterations = Vec::with_capacity(config.iterations);
    let mut lr = config.optimizer.learning_rate;
    for t in 0..config.iterations {
        let (next, trace) = train(
            policy,
            &initial_reference,
            &dataset,
            &objective,
            config.optimizer.steps_per_iteration,
            lr,
            None,
            t,
        )?;
        policy = next;
        lr *= config.optimizer.lr_decay;
        iterations.push(metrics.record(
            t,
            &policy,
            &initial_reference,
            dataset.clone(),
            vec![],
            trace,
            config.beta,
        )?);
    }
    finish_run(config, seed, 0.0, initial_reference, iterations, &env)
}

/// The theoretical loop: one BT-labeled pair per iteration appended to a
/// cumulative dataset; by default the reference follows the current policy.
pub fn run_selm_theoretical(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    config.validate()?;
    run_theoretical(config, seed)
}

fn run_theoretical(config: &RunConfig, seed: u64) -> Result<RunResult, LoopError> {
    let features = config.build_features(seed);
    let env = config.build_environment(&features, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));

    let mut policy = LogLinearPolicy::zeros(config.beta, features)?;
    let initial_reference = policy.to_tabular()?;
    let metrics = MetricsContext::new(&env, &initial_reference);
    let objective = ObjectiveConfig::new(config.beta, config.alpha)?;

    let mut cumulative: Vec<Record> = Vec::with_capacity(config.iterations);
    let mut iterations = Vec::with_capacity(config.iterations);
    let mut lr = config.optimizer.learning_rate;
    const MAX_DRAWS: usize = 100;
    for t in 0..config.iterations {
        let current = policy.clone();
        let reference: &dyn Policy<f64> = if config.theoretical_fixed_ref {
            &initial_reference
        } else {
            &current
        };
        let x = sample_index(&env.prompt_weights, &mut rng);
        // Redraw until the two candidates differ; identical responses carry
        // no preference signal and the BT sampler rejects them.
        let mut pair = None;
        for _ in 0..MAX_DRAWS {
            let y1 = sample_response(&current, x, &mut rng)?;
            let y2 = sample_response(reference, x, &mut rng)?;
            if y1 != y2 {
                pair = Some((y1, y2));
                break;
            }
        }
        let (y1, y2) = pair.ok_or(LoopError::DegenerateSampling(MAX_DRAWS))?;
        let mut triple = env.sample_preference(x, y1, y2, &mut rng)?;
        triple.id = format!("t{t}");
        cumulative.push(Record::Plain(triple));
        let d_t = PreferenceDataset::from_records(cumulative.clone());

        let (next, trace) = train(
            policy,
            reference,
            &d_t,
            &objective,
            config.optimizer.steps_per_iteration,
            lr,
            None,
            t,
        )?;
        policy = next;
        lr *= config.optimizer.lr_decay;
        iterations.push(metrics.record(
            t,
            &policy,
            reference,
            d_t,
            vec![],
            trace,
            config.beta,
        )?);
    }
    finish_run(config, seed, config.alpha, initial_reference, iterations, &env)
}

fn finish_run(
    config: &RunConfig,
    seed: u64,
    alpha: f64,
    initial_reference: TabularPolicy<f64>,
    iterations: Vec<IterationRecord>,
    env: &Environment<f64>,
) -> Result<RunResult, LoopError> {
    let mut result = RunResult {
        algorithm: config.algorithm,
        config_hash: config.hash(),
        seed,
        beta: config.beta,
        alpha,
        initial_reference: Some(initial_reference),
        iterations,
        regret: vec![],
    };
    result.regret = cumulative_regret(&result, env)?;
    Ok(result)
}

/// Cumulative regret sum_t [J(pi*) - J(pi_t)] with pi* the exponential tilt
/// of the run's initial reference by r*, held fixed across iterations.
/// Increments in [-1e-12, 0] are clamped to 0; anything lower is an error.
pub fn cumulative_regret(
    run: &RunResult,
    env: &Environment<f64>,
) -> Result<Vec<f64>, LoopError> {
    let reference = run.initial_reference();
    let pi_star = exponential_tilt(reference, &env.true_reward, run.beta)?;
    let j_star = rlhf_objective(
        &pi_star,
        reference,
        run.beta,
        &env.true_reward,
        &env.prompt_weights,
    )?;
    let mut series = Vec::with_capacity(run.iterations.len());
    let mut total = 0.0;
    for it in &run.iterations {
        let increment = j_star - it.j_value;
        if increment < -1e-12 {
            return Err(LoopError::RegretViolation {
                iteration: it.iteration,
                increment,
            });
        }
        total += increment.max(0.0);
        series.push(total);
    }
    Ok(series)
}

/// One row of the implicit-reward comparison: difference of the two runs'
/// implicit rewards on the same (prompt, response).
#[derive(Debug, Clone, Serialize)]
pub struct ImplicitDiffRow {
    pub prompt: usize,
    pub response: usize,
    pub kind: &'static str,
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    /// r_hat_A - r_hat_B rows, sorted nonincreasing by diff.
    pub implicit_diffs: Vec<ImplicitDiffRow>,
    /// Per iteration: greedy-reward histograms of both runs (fractions).
    pub histograms: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// Per iteration: mean greedy true reward of both runs.
    pub mean_true_reward: Vec<(usize, f64, f64)>,
}

/// Compare two runs over the same environment: implicit-reward differences
/// on chosen, rejected, and freshly sampled responses, plus the per-iteration
/// greedy-reward summaries.
pub fn analyze_runs(
    run_a: &RunResult,
    run_b: &RunResult,
    env: &Environment<f64>,
) -> Result<Report, LoopError> {
    let pol_a = run_a.final_policy();
    let pol_b = run_b.final_policy();
    if pol_a.num_prompts() != env.num_prompts()
        || pol_b.num_prompts() != env.num_prompts()
        || pol_a.num_responses() != env.num_responses()
        || pol_b.num_responses() != env.num_responses()
    {
        return Err(LoopError::MismatchedRuns(format!(
            "policies {}x{} and {}x{} vs environment {}x{}",
            pol_a.num_prompts(),
            pol_a.num_responses(),
            pol_b.num_prompts(),
            pol_b.num_responses(),
            env.num_prompts(),
            env.num_responses()
        )));
    }
    if run_a.iterations.len() != run_b.iterations.len() {
        return Err(LoopError::MismatchedRuns(format!(
            "iteration counts {} vs {}",
            run_a.iterations.len(),
            run_b.iterations.len()
        )));
    }

    let diff_at = |x: usize, y: usize| -> Result<f64, LoopError> {
        let a = implicit_reward(pol_a, run_a.initial_reference(), run_a.beta, x, y)?;
        let b = implicit_reward(pol_b, run_b.initial_reference(), run_b.beta, x, y)?;
        Ok(a - b)
    };

    let mut rows = Vec::new();
    let last_a = run_a.iterations.last().expect("nonempty run");
    if let Some(dataset) = &last_a.dataset {
        for record in &dataset.records {
            let t = record.triple();
            let x = t.prompt.as_index("prompt")?;
            let chosen = t.chosen.as_index("chosen")?;
            let rejected = t.rejected.as_index("rejected")?;
            rows.push(ImplicitDiffRow {
                prompt: x,
                response: chosen,
                kind: "chosen",
                diff: diff_at(x, chosen)?,
            });
            rows.push(ImplicitDiffRow {
                prompt: x,
                response: rejected,
                kind: "rejected",
                diff: diff_at(x, rejected)?,
            });
        }
    }
    // Fresh responses: one deterministic draw per prompt from the initial
    // reference.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for x in 0..env.num_prompts() {
        let y = sample_response(run_a.initial_reference(), x, &mut rng)?;
        rows.push(ImplicitDiffRow {
            prompt: x,
            response: y,
            kind: "sampled",
            diff: diff_at(x, y)?,
        });
    }
    rows.sort_by(|a, b| b.diff.partial_cmp(&a.diff).expect("finite diffs"));

    let histograms = run_a
        .iterations
        .iter()
        .zip(&run_b.iterations)
        .map(|(a, b)| (a.iteration, a.greedy_histogram.clone(), b.greedy_histogram.clone()))
        .collect();
    let mean_true_reward = run_a
        .iterations
        .iter()
        .zip(&run_b.iterations)
        .map(|(a, b)| (a.iteration, a.mean_true_reward_greedy, b.mean_true_reward_greedy))
        .collect();

    Ok(Report {
        implicit_diffs: rows,
        histograms,
        mean_true_reward,
    })
}

/// Outcome of the goal-conditioning efficacy experiment: mean true reward
/// of the conditioned policy at the top and bottom goals.
#[derive(Debug, Clone, Serialize)]
pub struct GoalConditioningOutcome {
    pub reward_top_goal: f64,
    pub reward_bottom_goal: f64,
}

/// Train DPO on a goal-augmented tabular dataset (5 base prompts, judge
/// scale 10) and evaluate the policy conditioned on g = 10 vs g = 1.
pub fn goal_conditioning_experiment(seed: u64) -> Result<GoalConditioningOutcome, LoopError> {
    const NX: usize = 5;
    const NY: usize = 6;
    const G_MAX: u32 = 10;
    const NUM_PAIRS: usize = 300;

    let env = Environment::<f64>::random_gaussian(NX, NY, sub_seed(seed, 10), 0.0, G_MAX)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 11));
    let mut records = Vec::with_capacity(NUM_PAIRS);
    for i in 0..NUM_PAIRS {
        let x = rng.random_range(0..NX);
        let y1 = rng.random_range(0..NY);
        let y2 = (y1 + rng.random_range(1..NY)) % NY;
        let mut triple = env.sample_preference(x, y1, y2, &mut rng)?;
        triple.id = format!("gc{i}");
        let chosen_score = env.judge_score(x, triple.chosen.as_index("chosen")?)? as i64;
        let rejected_score = env.judge_score(x, triple.rejected.as_index("rejected")?)? as i64;
        records.push(Record::Scored(ScoredPair {
            triple,
            chosen_score,
            rejected_score,
        }));
    }
    let scored = PreferenceDataset::from_records(records);
    let encoding = GoalEncoding::Tabular { g_max: G_MAX };
    let augmented = augment_dataset(&scored, TiePolicy::Drop, &encoding)?;

    // The conditioned policy lives over the extended prompt space.
    let extended_prompts = NX * G_MAX as usize;
    let features = FeatureMap::one_hot(extended_prompts, NY);
    let policy = LogLinearPolicy::zeros(1.0, features)?;
    let reference = policy.to_tabular()?;
    let objective = ObjectiveConfig::new(1.0, 0.0)?;
    let (policy, _) = train(policy, &reference, &augmented, &objective, 200, 1.0, None, 0)?;
    let trained = policy.to_tabular()?;

    let mean_reward_at_goal = |g: i64| -> Result<f64, LoopError> {
        let mut total = 0.0;
        for x in 0..NX {
            let extended = x * G_MAX as usize + (g as usize - 1);
            let row = trained.action_distribution(extended)?;
            for (y, &p) in row.iter().enumerate() {
                total += p * env.true_reward.get(x, y);
            }
        }
        Ok(total / NX as f64)
    };
    Ok(GoalConditioningOutcome {
        reward_top_goal: mean_reward_at_goal(i64::from(G_MAX))?,
        reward_bottom_goal: mean_reward_at_goal(1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::dpo_loss;
    use crate::policy::RewardFunction;

    fn small_config(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            iterations: 4,
            alpha: 0.01,
            beta: 0.5,
            num_prompts: 3,
            num_responses: 4,
            seeds: vec![0],
            optimizer: OptimizerConfig {
                learning_rate: 0.3,
                steps_per_iteration: 10,
                lr_decay: 1.0,
                restart_from_ref: false,
            },
            features: FeatureSpec::RandomGaussian {
                dim: 6,
                seed: Some(11),
            },
            environment: EnvSpec::RandomGaussian {
                seed: Some(5),
                ranker_noise: 0.0,
                g_max: 10,
            },
            dataset: DatasetSpec::Synthetic { num_pairs: 20 },
            theoretical_fixed_ref: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(Algorithm::Selm);
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = small_config(Algorithm::Selm);
        c.optimizer.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config(Algorithm::Selm);
        c.seeds.clear();
        assert!(c.validate().is_err());
        assert!(small_config(Algorithm::Selm).validate().is_ok());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = small_config(Algorithm::Selm);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.alpha += 0.001;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn one_step_is_exactly_one_gradient_update() {
        let features = FeatureMap::random_gaussian(2, 3, 4, 3);
        let policy = LogLinearPolicy::<f64>::zeros(1.0, features.clone()).unwrap();
        let reference = policy.to_tabular().unwrap();
        let env = Environment::<f64>::random_gaussian(2, 3, 1, 0.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dataset = synthesize_dataset(&env, 6, &mut rng).unwrap();
        let objective = ObjectiveConfig::new(1.0, 0.0).unwrap();
        let grad = dpo_gradient(&policy, &reference, &objective, &dataset).unwrap();
        let lr = 0.17;
        let (after, trace) =
            train(policy, &reference, &dataset, &objective, 1, lr, None, 0).unwrap();
        assert_eq!(trace.len(), 1);
        for (i, g) in grad.iter().enumerate() {
            assert_eq!(after.theta[i], -lr * g);
        }
    }

    #[test]
    fn descent_raises_chosen_probability() {
        // single-pair instance: training must push pi(y0|x0) above uniform
        let features = FeatureMap::one_hot(1, 2);
        let policy = LogLinearPolicy::<f64>::zeros(1.0, features).unwrap();
        let reference = policy.to_tabular().unwrap();
        let dataset = PreferenceDataset::from_records(vec![Record::Plain(PreferenceTriple {
            id: "e1".into(),
            prompt: Item::Index(0),
            chosen: Item::Index(0),
            rejected: Item::Index(1),
        })]);
        let objective = ObjectiveConfig::new(1.0, 0.0).unwrap();
        let before = dpo_loss(&policy, &reference, &objective, &dataset).unwrap();
        let (after, trace) =
            train(policy, &reference, &dataset, &objective, 50, 0.5, None, 0).unwrap();
        let trained = after.to_tabular().unwrap();
        assert!(trained.prob(0, 0).unwrap() > 0.5);
        assert!(*trace.last().unwrap() < before);
    }

    #[test]
    fn selm_alpha_zero_matches_iterative_dpo_bitwise() {
        let mut selm = small_config(Algorithm::Selm);
        selm.alpha = 0.0;
        let dpo = small_config(Algorithm::DpoIterative);
        let a = run(&selm, 3).unwrap();
        let b = run(&dpo, 3).unwrap();
        for (x, y) in a.iterations.iter().zip(&b.iterations) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.loss_trace, y.loss_trace);
            assert_eq!(x.j_value, y.j_value);
        }
        assert_eq!(a.regret, b.regret);
    }

    #[test]
    fn runs_are_deterministic() {
        let config = small_config(Algorithm::Selm);
        let a = run(&config, 7).unwrap();
        let b = run(&config, 7).unwrap();
        for (x, y) in a.iterations.iter().zip(&b.iterations) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.loss_trace, y.loss_trace);
        }
        assert_eq!(a.regret, b.regret);
        let c = run(&config, 8).unwrap();
        assert_ne!(a.iterations[0].theta, c.iterations[0].theta);
    }

    #[test]
    fn selm_pairs_come_from_the_ranker() {
        let config = small_config(Algorithm::Selm);
        let features = config.build_features(5);
        let env = config.build_environment(&features, 5).unwrap();
        let result = run(&config, 5).unwrap();
        for it in &result.iterations {
            let dataset = it.dataset.as_ref().unwrap();
            assert_eq!(dataset.len(), it.candidate_sets.len());
            let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: noise is 0
            for (record, candidates) in dataset.records.iter().zip(&it.candidate_sets) {
                let t = record.triple();
                let x = t.prompt.as_index("prompt").unwrap();
                let (best, worst) = env.rank_candidates(x, candidates, &mut rng).unwrap();
                assert_eq!(t.chosen.as_index("chosen").unwrap(), candidates[best]);
                assert_eq!(t.rejected.as_index("rejected").unwrap(), candidates[worst]);
            }
        }
    }

    #[test]
    fn theoretical_run_accumulates_one_pair_per_iteration() {
        let config = small_config(Algorithm::SelmTheoretical);
        let result = run(&config, 2).unwrap();
        for (t, it) in result.iterations.iter().enumerate() {
            assert_eq!(it.dataset.as_ref().unwrap().len(), t + 1);
        }
    }

    #[test]
    fn theoretical_saturated_labels_follow_true_ordering() {
        let mut config = small_config(Algorithm::SelmTheoretical);
        config.num_prompts = 1;
        config.num_responses = 3;
        config.iterations = 10;
        config.features = FeatureSpec::OneHot;
        // environment file route not used; build manually via a saturated
        // linear check below instead
        let env = Environment::new(
            vec![1.0],
            RewardFunction::new(vec![vec![100.0, 50.0, 0.0]]).unwrap(),
            0.0,
            10,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let y1 = 0;
            let y2 = rng.random_range(1..3);
            let t = env.sample_preference(0, y1, y2, &mut rng).unwrap();
            assert_eq!(t.chosen.as_index("chosen").unwrap(), 0);
        }
        let _ = config;
    }

    #[test]
    fn regret_series_properties() {
        let config = small_config(Algorithm::Selm);
        let features = config.build_features(9);
        let env = config.build_environment(&features, 9).unwrap();
        let result = run(&config, 9).unwrap();
        assert_eq!(result.regret.len(), config.iterations);
        for w in result.regret.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // J(pi_t) never exceeds J(pi*)
        let pi_star =
            exponential_tilt(result.initial_reference(), &env.true_reward, config.beta).unwrap();
        let j_star = rlhf_objective(
            &pi_star,
            result.initial_reference(),
            config.beta,
            &env.true_reward,
            &env.prompt_weights,
        )
        .unwrap();
        for it in &result.iterations {
            assert!(it.j_value <= j_star + 1e-12);
        }
    }

    #[test]
    fn regret_of_the_reference_policy_on_two_responses() {
        // pi_t = uniform reference forever: increments all equal
        // J(pi*) - J(ref) = ln 2 - (ln 3)/2
        let env = Environment::<f64>::two_response_example();
        let uniform = TabularPolicy::<f64>::uniform(1, 2);
        let mut iterations = Vec::new();
        for t in 0..3 {
            let j = rlhf_objective(&uniform, &uniform, 1.0, &env.true_reward, &[1.0]).unwrap();
            iterations.push(IterationRecord {
                iteration: t,
                theta: vec![],
                policy: Some(uniform.clone()),
                dataset: None,
                candidate_sets: vec![],
                loss_trace: vec![],
                j_value: j,
                r_max_diag: 0.0,
                mean_implicit_reward: 0.0,
                greedy_histogram: vec![],
                mean_true_reward_greedy: 0.0,
            });
        }
        let run = RunResult {
            algorithm: Algorithm::DpoOffline,
            config_hash: String::new(),
            seed: 0,
            beta: 1.0,
            alpha: 0.0,
            initial_reference: Some(uniform),
            iterations,
            regret: vec![],
        };
        let series = cumulative_regret(&run, &env).unwrap();
        let step = std::f64::consts::LN_2 - 3f64.ln() / 2.0;
        for (t, &r) in series.iter().enumerate() {
            assert!((r - step * (t + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_regret_for_the_optimal_policy() {
        let env = Environment::<f64>::two_response_example();
        let uniform = TabularPolicy::<f64>::uniform(1, 2);
        let pi_star = exponential_tilt(&uniform, &env.true_reward, 1.0).unwrap();
        let j_star = rlhf_objective(&pi_star, &uniform, 1.0, &env.true_reward, &[1.0]).unwrap();
        let iterations = (0..4)
            .map(|t| IterationRecord {
                iteration: t,
                theta: vec![],
                policy: Some(pi_star.clone()),
                dataset: None,
                candidate_sets: vec![],
                loss_trace: vec![],
                j_value: j_star,
                r_max_diag: 0.0,
                mean_implicit_reward: 0.0,
                greedy_histogram: vec![],
                mean_true_reward_greedy: 0.0,
            })
            .collect();
        let run = RunResult {
            algorithm: Algorithm::DpoOffline,
            config_hash: String::new(),
            seed: 0,
            beta: 1.0,
            alpha: 0.0,
            initial_reference: Some(uniform),
            iterations,
            regret: vec![],
        };
        let series = cumulative_regret(&run, &env).unwrap();
        assert!(series.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn self_comparison_report_is_all_zero() {
        let config = small_config(Algorithm::Selm);
        let features = config.build_features(4);
        let env = config.build_environment(&features, 4).unwrap();
        let a = run(&config, 4).unwrap();
        let b = run(&config, 4).unwrap();
        let report = analyze_runs(&a, &b, &env).unwrap();
        assert!(!report.implicit_diffs.is_empty());
        for row in &report.implicit_diffs {
            assert_eq!(row.diff, 0.0);
        }
        // sorted nonincreasing
        for w in report.implicit_diffs.windows(2) {
            assert!(w[0].diff >= w[1].diff);
        }
        // histogram fractions sum to 1 per iteration
        for (_, ha, hb) in &report.histograms {
            assert!((ha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((hb.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn offline_dpo_runs_and_improves() {
        let mut config = small_config(Algorithm::DpoOffline);
        config.iterations = 3;
        let result = run(&config, 1).unwrap();
        let first = result.iterations.first().unwrap().loss_trace[0];
        let last = *result.iterations.last().unwrap().loss_trace.last().unwrap();
        assert!(last < first);
        assert!(result.iterations.iter().all(|it| it.j_value.is_finite()));
    }

    #[test]
    fn goal_conditioning_prefers_high_goal() {
        let mut top = 0.0;
        let mut bottom = 0.0;
        for seed in 0..3 {
            let outcome = goal_conditioning_experiment(seed).unwrap();
            top += outcome.reward_top_goal;
            bottom += outcome.reward_bottom_goal;
        }
        assert!(top > bottom, "top {top} vs bottom {bottom}");
    }

    #[test]
    fn toml_config_round_trip() {
        let config = small_config(Algorithm::Selm);
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.hash(), config.hash());
    }
}
