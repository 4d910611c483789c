//! Simulated environment: ground-truth rewards, Bradley-Terry preference
//! sampling, a noisy candidate ranker, and a discretized judge.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Item, PreferenceTriple};
use crate::num::{sigmoid, Real};
use crate::policy::{PolicyError, RewardFunction};

pub const DEFAULT_JUDGE_SCALE: u32 = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("prompt index {prompt} out of range ({size} prompts)")]
    PromptOutOfRange { prompt: usize, size: usize },
    #[error("response index {response} out of range ({size} responses)")]
    ResponseOutOfRange { response: usize, size: usize },
    #[error("cannot compare a response {0} against itself")]
    IdenticalResponses(usize),
    #[error("ranking needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
}

mod reward_table {
    //! Serialize the reward as a bare 2D array rather than a wrapper object.
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<R, S>(reward: &RewardFunction<R>, ser: S) -> Result<S::Ok, S::Error>
    where
        R: Real + Serialize,
        S: Serializer,
    {
        reward.rows().serialize(ser)
    }

    pub fn deserialize<'de, R, D>(de: D) -> Result<RewardFunction<R>, D::Error>
    where
        R: Real + DeserializeOwned,
        D: Deserializer<'de>,
    {
        let rows = Vec::<Vec<R>>::deserialize(de)?;
        RewardFunction::new(rows).map_err(serde::de::Error::custom)
    }
}

/// Immutable simulated environment over a finite prompt/response space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Serialize", deserialize = "R: DeserializeOwned"))]
pub struct Environment<R: Real> {
    /// Prompt distribution nu.
    #[serde(rename = "nu")]
    pub prompt_weights: Vec<R>,
    /// Ground-truth reward r*(x, y).
    #[serde(rename = "r_star", with = "reward_table")]
    pub true_reward: RewardFunction<R>,
    /// Std. dev. of additive score noise in the ranker; 0 = exact.
    pub ranker_noise: R,
    /// Judge scores live on the integer range [1, g_max].
    #[serde(default = "default_g_max")]
    pub g_max: u32,
}

fn default_g_max() -> u32 {
    DEFAULT_JUDGE_SCALE
}

impl<R: Real> Environment<R> {
    pub fn new(
        prompt_weights: Vec<R>,
        true_reward: RewardFunction<R>,
        ranker_noise: R,
        g_max: u32,
    ) -> Result<Self, OracleError> {
        if prompt_weights.len() != true_reward.num_prompts() {
            return Err(OracleError::InvalidEnvironment(format!(
                "nu has {} entries but r_star has {} prompts",
                prompt_weights.len(),
                true_reward.num_prompts()
            )));
        }
        if prompt_weights.iter().any(|&w| !(w >= R::zero()) || !w.is_finite()) {
            return Err(OracleError::InvalidEnvironment(
                "nu entries must be finite and nonnegative".into(),
            ));
        }
        let sum: R = prompt_weights.iter().copied().sum();
        if (sum - R::one()).abs() > R::of(1e-9) {
            return Err(OracleError::InvalidEnvironment(format!(
                "nu sums to {sum}, expected 1"
            )));
        }
        if !(ranker_noise >= R::zero()) {
            return Err(OracleError::InvalidEnvironment(format!(
                "ranker_noise = {ranker_noise} must be >= 0"
            )));
        }
        if g_max < 1 {
            return Err(OracleError::InvalidEnvironment("g_max must be >= 1".into()));
        }
        Ok(Environment {
            prompt_weights,
            true_reward,
            ranker_noise,
            g_max,
        })
    }

    /// Two-response sanity environment: one prompt, rewards (ln 3, 0),
    /// uniform nu, exact ranker.
    pub fn two_response_example() -> Self {
        let reward = RewardFunction::new(vec![vec![R::of(3.0).ln(), R::zero()]]).unwrap();
        Environment::new(vec![R::one()], reward, R::zero(), DEFAULT_JUDGE_SCALE).unwrap()
    }

    /// Seeded environment with i.i.d. standard-normal rewards and uniform nu.
    pub fn random_gaussian(
        num_prompts: usize,
        num_responses: usize,
        seed: u64,
        ranker_noise: R,
        g_max: u32,
    ) -> Result<Self, OracleError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let rows: Vec<Vec<R>> = (0..num_prompts)
            .map(|_| {
                (0..num_responses)
                    .map(|_| R::of(normal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        let reward = RewardFunction::new(rows)?;
        let w = R::one() / R::of_usize(num_prompts);
        Environment::new(vec![w; num_prompts], reward, ranker_noise, g_max)
    }

    /// Environment whose reward is linear in a feature map:
    /// r*(x, y) = <phi(x, y), theta_star>, with uniform nu.
    pub fn from_linear_reward(
        features: &crate::domain::FeatureMap<R>,
        theta_star: &[R],
        ranker_noise: R,
        g_max: u32,
    ) -> Result<Self, OracleError> {
        if theta_star.len() != features.dim {
            return Err(OracleError::InvalidEnvironment(format!(
                "theta_star has {} entries but features have dim {}",
                theta_star.len(),
                features.dim
            )));
        }
        let nx = features.num_prompts;
        let ny = features.num_responses;
        let rows: Vec<Vec<R>> = (0..nx)
            .map(|x| {
                (0..ny)
                    .map(|y| {
                        features
                            .phi(x, y)
                            .iter()
                            .zip(theta_star)
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let reward = RewardFunction::new(rows)?;
        let w = R::one() / R::of_usize(nx);
        Environment::new(vec![w; nx], reward, ranker_noise, g_max)
    }

    pub fn num_prompts(&self) -> usize {
        self.true_reward.num_prompts()
    }

    pub fn num_responses(&self) -> usize {
        self.true_reward.num_responses()
    }

    fn check_prompt(&self, prompt: usize) -> Result<(), OracleError> {
        if prompt >= self.num_prompts() {
            return Err(OracleError::PromptOutOfRange {
                prompt,
                size: self.num_prompts(),
            });
        }
        Ok(())
    }

    fn check_response(&self, response: usize) -> Result<(), OracleError> {
        if response >= self.num_responses() {
            return Err(OracleError::ResponseOutOfRange {
                response,
                size: self.num_responses(),
            });
        }
        Ok(())
    }

    /// Draw a labeled preference between two distinct responses:
    /// y1 wins with probability sigma(r*(x, y1) - r*(x, y2)).
    pub fn sample_preference(
        &self,
        prompt: usize,
        y1: usize,
        y2: usize,
        rng: &mut impl Rng,
    ) -> Result<PreferenceTriple, OracleError> {
        if y1 == y2 {
            return Err(OracleError::IdenticalResponses(y1));
        }
        self.check_prompt(prompt)?;
        self.check_response(y1)?;
        self.check_response(y2)?;
        let p_first = sigmoid(self.true_reward.get(prompt, y1) - self.true_reward.get(prompt, y2));
        let (winner, loser) = if R::of(rng.random::<f64>()) < p_first {
            (y1, y2)
        } else {
            (y2, y1)
        };
        Ok(PreferenceTriple {
            id: format!("x{prompt}-y{y1}-y{y2}"),
            prompt: Item::Index(prompt),
            chosen: Item::Index(winner),
            rejected: Item::Index(loser),
        })
    }

    /// Score each candidate as r*(x, y_i) + Normal(0, ranker_noise) and
    /// return the positions of the best and worst scores in the candidate
    /// list. Ties break toward the lowest position. With zero noise this is
    /// a pure function of r*.
    pub fn rank_candidates(
        &self,
        prompt: usize,
        candidates: &[usize],
        rng: &mut impl Rng,
    ) -> Result<(usize, usize), OracleError> {
        if candidates.len() < 2 {
            return Err(OracleError::TooFewCandidates(candidates.len()));
        }
        self.check_prompt(prompt)?;
        for &y in candidates {
            self.check_response(y)?;
        }
        let noisy = self.ranker_noise > R::zero();
        let normal = if noisy {
            Some(Normal::new(0.0f64, self.ranker_noise.to_f64_lossy()).unwrap())
        } else {
            None
        };
        let scores: Vec<R> = candidates
            .iter()
            .map(|&y| {
                let mut s = self.true_reward.get(prompt, y);
                if let Some(n) = &normal {
                    s = s + R::of(n.sample(rng));
                }
                s
            })
            .collect();
        let mut best = 0;
        let mut worst = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
            if scores[i] < scores[worst] {
                worst = i;
            }
        }
        Ok((best, worst))
    }

    /// Deterministic judge: affine map of r*(x, y) from [min r*, max r*]
    /// onto [1, g_max], rounded half-up and clamped. A constant reward
    /// table maps everything to g_max.
    pub fn judge_score(&self, prompt: usize, response: usize) -> Result<u32, OracleError> {
        self.check_prompt(prompt)?;
        self.check_response(response)?;
        let (lo, hi) = self.true_reward.min_max();
        if !(hi > lo) {
            return Ok(self.g_max);
        }
        let r = self.true_reward.get(prompt, response);
        let span = R::of((self.g_max - 1) as f64);
        let scaled = R::one() + (r - lo) / (hi - lo) * span;
        let rounded = (scaled + R::of(0.5)).floor().to_f64_lossy() as i64;
        Ok(rounded.clamp(1, self.g_max as i64) as u32)
    }
}
