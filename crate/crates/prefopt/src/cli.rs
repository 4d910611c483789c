//! Command-line surface, configuration, and file emission.
//!
//! Exit codes: 0 on success, 1 on malformed input or IO/validation failure,
//! 2 when a numerical check (gradcheck or verify) finds a violation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    load_dataset, save_dataset, DatasetSchema, DomainError, Item, PreferenceDataset,
    PreferenceTriple, Record, ScoredPair,
};
use crate::loops::{
    analyze_runs, run, Algorithm, LoopError, RunConfig, RunResult,
};
use crate::num::sigmoid;
use crate::objectives::{
    brute_force_inner_max, dpo_gradient, dpo_loss, gradcheck_instance, implicit_reward,
    inner_value, inner_value_closed_form, min_reward_policy, random_instance, selm_gradient,
    selm_loss, ObjectiveConfig, ObjectiveError,
};
use crate::oracle::{Environment, OracleError};
use crate::policy::{
    exponential_tilt, kl_divergence, tilt_normalizers, Policy, PolicyError,
    RewardFunction, TabularPolicy,
};
use crate::reward_augment::{
    augment_dataset, augment_pair, condition_prompt, AugmentError, GoalEncoding, TiePolicy,
    DEFAULT_TEMPLATE,
};

/// Step size used by `gradcheck`'s central finite differences.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Relative tolerance (as a fraction of the environment's true-reward range)
/// used when judging whether a greedy-reward series is nondecreasing. Greedy
/// decoding is an argmax, so near-tied responses flip it by tiny reward gaps;
/// decreases within this fraction of the range count as noise.
pub const MONOTONE_TOL_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{0}")]
    Invalid(String),
    /// A numerical check failed; maps to exit code 2.
    #[error("{0}")]
    CheckFailed(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Parser)]
#[command(
    name = "prefopt",
    version,
    about = "Desk-scale direct preference alignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Number of random instances to check.
        #[arg(long)]
        instances: usize,
        /// Maximum allowed relative error.
        #[arg(long)]
        tol: f64,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the numerical invariant suites.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Goal-condition a scored preference dataset.
    Augment {
        /// Input JSONL with per-response scores.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSONL for the conditioned pairs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "tie-policy", value_enum, default_value_t = TiePolicyArg::Drop)]
        tie_policy: TiePolicyArg,
        /// Prompt prefix template; must contain the literal `{g}`.
        #[arg(long)]
        template: Option<String>,
    },
    /// Execute a training run for every configured seed.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured algorithm.
        #[arg(long, value_enum)]
        algo: Option<AlgoArg>,
        /// Override the optimism coefficient.
        #[arg(long)]
        alpha: Option<f64>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-seed regret experiment with an iterative-DPO baseline.
    Regret {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two run directories (implicit rewards, reward distributions).
    Report {
        /// Run directory of side A (contains summary.json).
        #[arg(long)]
        a: PathBuf,
        /// Run directory of side B.
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Identities,
    Oracle,
    Augment,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TiePolicyArg {
    Drop,
    KeepOriginal,
    EmitBoth,
}

impl From<TiePolicyArg> for TiePolicy {
    fn from(arg: TiePolicyArg) -> Self {
        match arg {
            TiePolicyArg::Drop => TiePolicy::Drop,
            TiePolicyArg::KeepOriginal => TiePolicy::KeepOriginal,
            TiePolicyArg::EmitBoth => TiePolicy::EmitBoth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Dpo,
    IterDpo,
    Selm,
    SelmTheory,
}

impl From<AlgoArg> for Algorithm {
    fn from(arg: AlgoArg) -> Self {
        match arg {
            AlgoArg::Dpo => Algorithm::DpoOffline,
            AlgoArg::IterDpo => Algorithm::DpoIterative,
            AlgoArg::Selm => Algorithm::Selm,
            AlgoArg::SelmTheory => Algorithm::SelmTheoretical,
        }
    }
}

pub fn run_cli(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::CheckFailed(msg)) => {
            eprintln!("FAIL: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("PREFOPT_LOG"))
        .try_init();
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gradcheck {
            instances,
            tol,
            seed,
        } => cmd_gradcheck(instances, tol, seed),
        Command::Verify { suite, seed } => cmd_verify(suite, seed),
        Command::Augment {
            input,
            out,
            tie_policy,
            template,
        } => cmd_augment(&input, &out, tie_policy.into(), template),
        Command::Train {
            config,
            algo,
            alpha,
            seed,
            out,
        } => cmd_train(&config, algo, alpha, seed, &out),
        Command::Regret { config, seeds, out } => cmd_regret(&config, &seeds, &out),
        Command::Report { a, b, out } => cmd_report(&a, &b, &out),
    }
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(instances: usize, tol: f64, seed: u64) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Invalid("--instances must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(CliError::Invalid("--tol must be > 0".into()));
    }
    let mut failures = 0usize;
    let mut worst_dpo = (0.0f64, 0u64);
    let mut worst_selm = (0.0f64, 0u64);
    for i in 0..instances {
        let instance_seed = seed.wrapping_add(i as u64);
        let (dpo, selm) = gradcheck_instance(instance_seed, GRADCHECK_STEP)?;
        if dpo.max_rel_err > worst_dpo.0 {
            worst_dpo = (dpo.max_rel_err, instance_seed);
        }
        if selm.max_rel_err > worst_selm.0 {
            worst_selm = (selm.max_rel_err, instance_seed);
        }
        if dpo.max_rel_err > tol || selm.max_rel_err > tol {
            failures += 1;
            log::warn!(
                "instance seed {instance_seed}: dpo rel err {:.3e}, selm rel err {:.3e}",
                dpo.max_rel_err,
                selm.max_rel_err
            );
        }
    }
    println!("gradcheck: instances={instances} tol={tol:e} h={GRADCHECK_STEP:e}");
    println!(
        "  worst dpo  rel err {:.3e} (instance seed {})",
        worst_dpo.0, worst_dpo.1
    );
    println!(
        "  worst selm rel err {:.3e} (instance seed {})",
        worst_selm.0, worst_selm.1
    );
    if failures > 0 {
        println!("gradcheck: FAIL ({failures}/{instances} instances over tolerance)");
        return Err(CliError::CheckFailed(format!(
            "{failures}/{instances} gradient checks exceeded tol {tol:e}"
        )));
    }
    println!("gradcheck: PASS ({instances}/{instances} instances within tolerance)");
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(suite: Suite, seed: u64) -> Result<(), CliError> {
    let mut total = 0usize;
    let run_suite = |name: &str,
                     f: &dyn Fn(u64) -> Result<usize, CliError>,
                     total: &mut usize|
     -> Result<(), CliError> {
        let checks = f(seed).map_err(|e| match e {
            CliError::CheckFailed(msg) => CliError::CheckFailed(format!("{name}: {msg}")),
            other => other,
        })?;
        println!("verify {name}: {checks} checks passed");
        *total += checks;
        Ok(())
    };
    match suite {
        Suite::Identities => run_suite("identities", &verify_identities, &mut total)?,
        Suite::Oracle => run_suite("oracle", &verify_oracle, &mut total)?,
        Suite::Augment => run_suite("augment", &verify_augment, &mut total)?,
        Suite::All => {
            run_suite("identities", &verify_identities, &mut total)?;
            run_suite("oracle", &verify_oracle, &mut total)?;
            run_suite("augment", &verify_augment, &mut total)?;
        }
    }
    println!("verify: PASS ({total} checks)");
    Ok(())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::CheckFailed(msg()))
    }
}

/// Closed-form identity checks: reparameterization, the minimum-reward
/// policy collapse, inner-solution optimality, and the DPO anchors.
fn verify_identities(seed: u64) -> Result<usize, CliError> {
    let mut checks = 0usize;

    // Reparameterization: beta log E_ref[exp(r_hat/beta)] = 0 per prompt,
    // and E_ref[r_hat] = -beta KL(ref || policy).
    for k in 0..100u64 {
        let inst = random_instance(seed.wrapping_add(k));
        let beta = inst.config.beta;
        for x in 0..inst.reference.num_prompts() {
            let ref_row = inst.reference.action_distribution(x)?;
            let mut acc = 0.0f64;
            let mut expected_r_hat = 0.0f64;
            for (y, &p) in ref_row.iter().enumerate() {
                if p > 0.0 {
                    let r_hat = implicit_reward(&inst.policy, &inst.reference, beta, x, y)?;
                    acc += p * (r_hat / beta).exp();
                    expected_r_hat += p * r_hat;
                }
            }
            let log_partition = beta * acc.ln();
            check(log_partition.abs() <= 1e-10, || {
                format!("reparameterization: beta log Z = {log_partition:e} at prompt {x}")
            })?;
            checks += 1;

            let point = point_weights(inst.reference.num_prompts(), x);
            let kl = kl_divergence(&inst.reference, &inst.policy, &point)?;
            check((expected_r_hat + beta * kl).abs() <= 1e-10, || {
                format!(
                    "drift identity: E_ref[r_hat] = {expected_r_hat:e} vs -beta KL = {:e}",
                    -beta * kl
                )
            })?;
            checks += 1;
        }
    }

    // Minimum-reward policy: tilting any rho by the negated implicit reward
    // of rho recovers the reference, with unit normalizers.
    for k in 0..100u64 {
        let inst = random_instance(seed.wrapping_add(1000 + k));
        let rho = inst.policy.to_tabular()?;
        let beta = inst.config.beta;
        let recovered = min_reward_policy(&rho, &inst.reference, beta)?;
        let mut sup = 0.0f64;
        for x in 0..rho.num_prompts() {
            let got = recovered.action_distribution(x)?;
            let want = inst.reference.action_distribution(x)?;
            for (g, w) in got.iter().zip(&want) {
                sup = sup.max((g - w).abs());
            }
        }
        check(sup <= 1e-10, || {
            format!("minimum-reward policy differs from reference by {sup:e}")
        })?;
        checks += 1;

        let r_hat = RewardFunction::implicit(&rho, &inst.reference, beta)?;
        for z in tilt_normalizers(&rho, &r_hat.negated(), beta)? {
            check((z - 1.0).abs() <= 1e-12, || {
                format!("tilt normalizer {z} deviates from 1")
            })?;
            checks += 1;
        }
    }

    // Inner-solution optimality: the exponential tilt beats a brute-force
    // simplex search and matches the closed-form value.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let mut done = 0usize;
    while done < 50 {
        let nx = rng.random_range(1..=3);
        let ny = rng.random_range(2..=4);
        let beta = *[0.1, 1.0].get(rng.random_range(0..2)).unwrap();
        let reference = random_positive_tabular(nx, ny, &mut rng)?;
        let reward = RewardFunction::new(
            (0..nx)
                .map(|_| (0..ny).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )?;
        let weights = random_weights(nx, &mut rng);
        let tilt = exponential_tilt(&reference, &reward, beta)?;
        let at_tilt = inner_value(&tilt, &reference, beta, &reward, &weights)?;
        let closed = inner_value_closed_form(&reference, beta, &reward, &weights)?;
        check((at_tilt - closed).abs() <= 1e-10, || {
            format!("inner value {at_tilt} vs closed form {closed}")
        })?;
        let (_, brute) = brute_force_inner_max(&reference, beta, &reward, &weights, 100)?;
        check(at_tilt >= brute - 1e-6, || {
            format!("tilt value {at_tilt} below brute-force {brute}")
        })?;
        checks += 2;
        done += 1;
    }

    // Anchors: at policy = reference the DPO loss is ln 2 and the optimism
    // gradient component vanishes; alpha = 0 reduces SELM to DPO exactly.
    for k in 0..20u64 {
        let inst = random_instance(seed.wrapping_add(3000 + k));
        let reference = inst.policy.to_tabular()?;
        let config = ObjectiveConfig::new(inst.config.beta, 1.0)?;
        let loss = dpo_loss(&inst.policy, &reference, &config, &inst.dataset)?;
        check((loss - std::f64::consts::LN_2).abs() <= 1e-12, || {
            format!("dpo loss at reference = {loss}, want ln 2")
        })?;
        let with_optimism = selm_gradient(&inst.policy, &reference, &config, &inst.dataset, None)?;
        let without = dpo_gradient(&inst.policy, &reference, &config, &inst.dataset)?;
        let optimism_norm = with_optimism
            .iter()
            .zip(&without)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        check(optimism_norm <= 1e-10, || {
            format!("optimism gradient at reference has sup norm {optimism_norm:e}")
        })?;

        let zero_alpha = ObjectiveConfig::new(inst.config.beta, 0.0)?;
        let selm = selm_loss(&inst.policy, &inst.reference, &zero_alpha, &inst.dataset, None)?;
        let dpo = dpo_loss(&inst.policy, &inst.reference, &zero_alpha, &inst.dataset)?;
        check(selm == dpo, || {
            format!("alpha=0 selm loss {selm} differs from dpo loss {dpo}")
        })?;
        checks += 3;
    }

    Ok(checks)
}

/// Preference-oracle checks: Bradley-Terry calibration, ranking against a
/// direct sort, and judge-score monotonicity.
fn verify_oracle(seed: u64) -> Result<usize, CliError> {
    let mut checks = 0usize;
    let env = Environment::random_gaussian(4, 5, seed, 0.0, 10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    // Bradley-Terry sampler calibration within 3-sigma binomial bounds.
    const N: usize = 100_000;
    for _ in 0..20 {
        let x = rng.random_range(0..4);
        let y1 = rng.random_range(0..5);
        let y2 = (y1 + rng.random_range(1..5)) % 5;
        let p = sigmoid(env.true_reward.get(x, y1) - env.true_reward.get(x, y2));
        let mut wins = 0usize;
        for _ in 0..N {
            let t = env.sample_preference(x, y1, y2, &mut rng)?;
            if t.chosen.as_index("chosen")? == y1 {
                wins += 1;
            }
        }
        let rate = wins as f64 / N as f64;
        let bound = 3.0 * (p * (1.0 - p) / N as f64).sqrt();
        check((rate - p).abs() <= bound, || {
            format!("BT rate {rate} vs p {p} outside 3-sigma bound {bound}")
        })?;
        checks += 1;
    }

    // Noise-free ranking agrees with sorting candidates by true reward.
    for _ in 0..50 {
        let x = rng.random_range(0..4);
        let mut candidates: Vec<usize> = (0..5).collect();
        let keep = rng.random_range(2..=5);
        candidates.truncate(keep);
        let (best, worst) = env.rank_candidates(x, &candidates, &mut rng)?;
        let by_reward = |y: &&usize| env.true_reward.get(x, **y);
        let max = candidates
            .iter()
            .max_by(|a, b| by_reward(a).partial_cmp(&by_reward(b)).unwrap())
            .unwrap();
        let min = candidates
            .iter()
            .min_by(|a, b| by_reward(a).partial_cmp(&by_reward(b)).unwrap())
            .unwrap();
        check(
            env.true_reward.get(x, candidates[best]) == env.true_reward.get(x, *max)
                && env.true_reward.get(x, candidates[worst]) == env.true_reward.get(x, *min),
            || "noise-free ranking disagrees with sort".to_string(),
        )?;
        checks += 1;
    }

    // Judge scores are monotone nondecreasing in the true reward.
    for x in 0..4 {
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|a, b| {
            env.true_reward
                .get(x, *a)
                .partial_cmp(&env.true_reward.get(x, *b))
                .unwrap()
        });
        let scores: Vec<u32> = order
            .iter()
            .map(|&y| env.judge_score(x, y))
            .collect::<Result<_, _>>()?;
        check(scores.windows(2).all(|w| w[0] <= w[1]), || {
            format!("judge scores {scores:?} not monotone in reward")
        })?;
        checks += 1;
    }

    Ok(checks)
}

/// Reward-augmentation checks: the swap and goal-consistency laws over the
/// full score grid, 2N sizing, and round-trip stability.
fn verify_augment(seed: u64) -> Result<usize, CliError> {
    let mut checks = 0usize;
    let encoding = GoalEncoding::default_text();

    // Exhaustive over the 10x10 score grid.
    for chosen_score in 1..=10i64 {
        for rejected_score in 1..=10i64 {
            let pair = ScoredPair {
                triple: PreferenceTriple {
                    id: "p0".into(),
                    prompt: Item::Text("base".into()),
                    chosen: Item::Text("a".into()),
                    rejected: Item::Text("b".into()),
                },
                chosen_score,
                rejected_score,
            };
            let out = augment_pair(&pair, TiePolicy::Drop, &encoding)?;
            if chosen_score == rejected_score {
                check(out.is_empty(), || "tie not dropped".to_string())?;
                checks += 1;
                continue;
            }
            check(out.len() == 2, || format!("expected 2 pairs, got {}", out.len()))?;
            // Goal consistency: each emitted pair prefers the response whose
            // score matches its goal.
            let high = &out[0];
            let low = &out[1];
            check(
                high.goal == chosen_score
                    && high.triple.chosen == pair.triple.chosen
                    && high.triple.rejected == pair.triple.rejected,
                || "goal-consistency violated for the chosen-score goal".to_string(),
            )?;
            // Swap law: conditioning on the rejected score flips the pair.
            check(
                low.goal == rejected_score
                    && low.triple.chosen == pair.triple.rejected
                    && low.triple.rejected == pair.triple.chosen,
                || "swap law violated for the rejected-score goal".to_string(),
            )?;
            checks += 3;
        }
    }

    // 2N sizing on a random no-tie dataset, plus byte-stable round trip.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..25 {
        let chosen_score = rng.random_range(1..=10i64);
        let mut rejected_score = rng.random_range(1..=10i64);
        if rejected_score == chosen_score {
            rejected_score = if chosen_score == 1 { 2 } else { chosen_score - 1 };
        }
        records.push(Record::Scored(ScoredPair {
            triple: PreferenceTriple {
                id: format!("r{i}"),
                prompt: Item::Text(format!("prompt {}", i % 5)),
                chosen: Item::Text(format!("good {i}")),
                rejected: Item::Text(format!("bad {i}")),
            },
            chosen_score,
            rejected_score,
        }));
    }
    let dataset = PreferenceDataset::from_records(records);
    let augmented = augment_dataset(&dataset, TiePolicy::Drop, &encoding)?;
    check(augmented.len() == 2 * dataset.len(), || {
        format!("expected {} pairs, got {}", 2 * dataset.len(), augmented.len())
    })?;
    checks += 1;

    let dir = std::env::temp_dir().join(format!("prefopt-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path_a = dir.join("augmented-a.jsonl");
    let path_b = dir.join("augmented-b.jsonl");
    save_dataset(&augmented, &path_a)?;
    let reloaded = load_dataset(&path_a, DatasetSchema::Plain)?;
    save_dataset(&reloaded, &path_b)?;
    let bytes_a = std::fs::read(&path_a).map_err(io_err(&path_a))?;
    let bytes_b = std::fs::read(&path_b).map_err(io_err(&path_b))?;
    let _ = std::fs::remove_dir_all(&dir);
    check(bytes_a == bytes_b, || {
        "augmented JSONL round trip not byte-stable".to_string()
    })?;
    checks += 1;

    // Conditioned prompts embed the goal through the default template.
    for g in 1..=10i64 {
        let conditioned = condition_prompt(&Item::Text("base".into()), g, &encoding)?;
        let expected = format!("{}base", DEFAULT_TEMPLATE.replace("{g}", &g.to_string()));
        check(
            conditioned.rendered == Item::Text(expected.clone()),
            || format!("conditioned prompt {:?} != {expected:?}", conditioned.rendered),
        )?;
        checks += 1;
    }

    Ok(checks)
}

fn point_weights(n: usize, x: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[x] = 1.0;
    w
}

fn random_positive_tabular(
    nx: usize,
    ny: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TabularPolicy<f64>, CliError> {
    let rows = (0..nx)
        .map(|_| {
            let raw: Vec<f64> = (0..ny).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    Ok(TabularPolicy::new(rows)?)
}

fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

// ---------------------------------------------------------------------------
// augment

fn cmd_augment(
    input: &Path,
    out: &Path,
    tie_policy: TiePolicy,
    template: Option<String>,
) -> Result<(), CliError> {
    let dataset = load_dataset(input, DatasetSchema::Scored)?;
    let encoding = match template {
        Some(template) => GoalEncoding::Text { template },
        None => GoalEncoding::default_text(),
    };
    let augmented = augment_dataset(&dataset, tie_policy, &encoding)?;
    save_dataset(&augmented, out)?;
    println!(
        "augment: {} records -> {} conditioned pairs ({})",
        dataset.len(),
        augmented.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
    Ok(config)
}

fn cmd_train(
    config_path: &Path,
    algo: Option<AlgoArg>,
    alpha: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut config = load_config(config_path)?;
    if let Some(algo) = algo {
        config.algorithm = algo.into();
    }
    if let Some(alpha) = alpha {
        config.alpha = alpha;
    }
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    config.validate()?;

    let mut manifest = BTreeMap::new();
    for &seed in &config.seeds.clone() {
        let result = run(&config, seed)?;
        let dir = out.join(format!("seed-{seed}"));
        let files = write_run_outputs(&result, &config, &dir)?;
        let last = result.iterations.last().expect("iterations nonempty");
        println!(
            "train seed {seed}: J={:.6} regret={:.6} mean_true_reward_greedy={:.6}",
            last.j_value,
            result.regret.last().copied().unwrap_or(0.0),
            last.mean_true_reward_greedy
        );
        for (name, digest) in files {
            manifest.insert(format!("seed-{seed}/{name}"), digest);
        }
    }
    write_manifest(out, &manifest)?;
    println!("train: wrote {} files under {}", manifest.len(), out.display());
    Ok(())
}

/// Emit a run's metrics CSV, histogram plot data, and summary JSON into
/// `dir`, returning each file's content hash. Identical (config, seed) runs
/// produce byte-identical files.
pub fn write_run_outputs(
    result: &RunResult,
    config: &RunConfig,
    dir: &Path,
) -> Result<BTreeMap<String, String>, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = BTreeMap::new();

    let metrics_path = dir.join("metrics.csv");
    {
        let mut w = csv::Writer::from_path(&metrics_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", metrics_path.display())))?;
        w.write_record([
            "iteration",
            "step",
            "loss",
            "J",
            "regret",
            "r_max_diag",
            "mean_true_reward_greedy",
        ])
        .map_err(|e| CliError::Invalid(e.to_string()))?;
        for it in &result.iterations {
            for (step, loss) in it.loss_trace.iter().enumerate() {
                w.write_record([
                    it.iteration.to_string(),
                    step.to_string(),
                    loss.to_string(),
                    it.j_value.to_string(),
                    result.regret[it.iteration].to_string(),
                    it.r_max_diag.to_string(),
                    it.mean_true_reward_greedy.to_string(),
                ])
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            }
        }
        w.flush().map_err(io_err(&metrics_path))?;
    }
    files.insert("metrics.csv".to_string(), hash_file(&metrics_path)?);

    let hist_path = dir.join("greedy_histogram.csv");
    {
        let mut w = csv::Writer::from_path(&hist_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", hist_path.display())))?;
        w.write_record(["iteration", "bin", "fraction"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for it in &result.iterations {
            for (bin, frac) in it.greedy_histogram.iter().enumerate() {
                w.write_record([it.iteration.to_string(), bin.to_string(), frac.to_string()])
                    .map_err(|e| CliError::Invalid(e.to_string()))?;
            }
        }
        w.flush().map_err(io_err(&hist_path))?;
    }
    files.insert("greedy_histogram.csv".to_string(), hash_file(&hist_path)?);

    let last = result
        .iterations
        .last()
        .ok_or_else(|| CliError::Invalid("run has no iterations".into()))?;
    let summary = serde_json::json!({
        "config_hash": result.config_hash,
        "algorithm": result.algorithm,
        "seed": result.seed,
        "seeds": config.seeds,
        "alpha": result.alpha,
        "beta": result.beta,
        "iterations": result.iterations.len(),
        "final": {
            "j": last.j_value,
            "regret": result.regret.last(),
            "mean_implicit_reward": last.mean_implicit_reward,
            "mean_true_reward_greedy": last.mean_true_reward_greedy,
        },
        "config": config,
    });
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    files.insert("summary.json".to_string(), hash_file(&summary_path)?);

    let manifest: BTreeMap<String, String> = files.clone();
    write_manifest(dir, &manifest)?;
    Ok(files)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_manifest(dir: &Path, files: &BTreeMap<String, String>) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    write_json(&path, &serde_json::json!({ "files": files }))
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// regret

/// Aggregate statistics of a multi-seed regret experiment.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegretAggregate {
    /// Log-log least-squares slope of seed-mean R(T); fit over T in [10, T]
    /// when T >= 10, otherwise over the whole series.
    pub slope: f64,
    pub baseline_slope: f64,
    pub mean_final_regret: f64,
    pub baseline_mean_final_regret: f64,
    /// Seed-mean final J(pi*) - J(pi_T).
    pub mean_final_j_gap: f64,
    pub baseline_mean_final_j_gap: f64,
    /// Fraction of seeds whose greedy-reward series is nondecreasing within
    /// `MONOTONE_TOL_FRACTION` of the environment's reward range.
    pub monotone_fraction: f64,
    pub monotone_tol_fraction: f64,
    /// Seed-mean cumulative regret per iteration.
    pub mean_regret: Vec<f64>,
    pub baseline_mean_regret: Vec<f64>,
}

/// Run `config` over `seeds` together with an iterative-DPO baseline and
/// aggregate regret/monotonicity statistics.
pub fn regret_experiment(
    config: &RunConfig,
    seeds: &[u64],
) -> Result<(Vec<RunResult>, Vec<RunResult>, RegretAggregate), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Invalid("at least one seed is required".into()));
    }
    let mut config = config.clone();
    config.seeds = seeds.to_vec();
    config.validate()?;
    let mut baseline_config = config.clone();
    baseline_config.algorithm = Algorithm::DpoIterative;

    let t = config.iterations;
    let n = seeds.len() as f64;
    let mut mean_regret = vec![0.0; t];
    let mut baseline_mean_regret = vec![0.0; t];
    let mut mean_final_j_gap = 0.0;
    let mut baseline_mean_final_j_gap = 0.0;
    let mut monotone = 0usize;
    let mut runs = Vec::with_capacity(seeds.len());
    let mut baseline_runs = Vec::with_capacity(seeds.len());

    for &seed in seeds {
        let features = config.build_features(seed);
        let env = config.build_environment(&features, seed)?;
        let (r_min, r_max) = env.true_reward.min_max();
        let tol = MONOTONE_TOL_FRACTION * (r_max - r_min);

        let result = run(&config, seed)?;
        for (i, &r) in result.regret.iter().enumerate() {
            mean_regret[i] += r / n;
        }
        mean_final_j_gap += final_j_gap(&result) / n;
        let series: Vec<f64> = result
            .iterations
            .iter()
            .map(|it| it.mean_true_reward_greedy)
            .collect();
        if series.windows(2).all(|w| w[1] >= w[0] - tol - 1e-12) {
            monotone += 1;
        }
        runs.push(result);

        let baseline = run(&baseline_config, seed)?;
        for (i, &r) in baseline.regret.iter().enumerate() {
            baseline_mean_regret[i] += r / n;
        }
        baseline_mean_final_j_gap += final_j_gap(&baseline) / n;
        baseline_runs.push(baseline);
    }

    let aggregate = RegretAggregate {
        slope: log_log_slope(&mean_regret),
        baseline_slope: log_log_slope(&baseline_mean_regret),
        mean_final_regret: *mean_regret.last().unwrap(),
        baseline_mean_final_regret: *baseline_mean_regret.last().unwrap(),
        mean_final_j_gap,
        baseline_mean_final_j_gap,
        monotone_fraction: monotone as f64 / n,
        monotone_tol_fraction: MONOTONE_TOL_FRACTION,
        mean_regret,
        baseline_mean_regret,
    };
    Ok((runs, baseline_runs, aggregate))
}

/// J(pi*) - J(pi_T), read off the last regret increment.
fn final_j_gap(result: &RunResult) -> f64 {
    match result.regret.len() {
        0 => 0.0,
        1 => result.regret[0],
        len => result.regret[len - 1] - result.regret[len - 2],
    }
}

/// Least-squares slope of log R(T) against log T. The fit window is
/// T in [10, T_max] when at least 10 iterations exist.
pub fn log_log_slope(mean_regret: &[f64]) -> f64 {
    let t_max = mean_regret.len();
    let t_min = if t_max >= 10 { 10 } else { 1 };
    let points: Vec<(f64, f64)> = (t_min..=t_max)
        .map(|t| ((t as f64).ln(), mean_regret[t - 1].max(1e-300).ln()))
        .collect();
    let m = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (m * sxy - sx * sy) / (m * sxx - sx * sx)
}

fn cmd_regret(config_path: &Path, seeds: &[u64], out: &Path) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let (runs, baseline_runs, aggregate) = regret_experiment(&config, seeds)?;

    let mut manifest = BTreeMap::new();
    let mut algo_config = config.clone();
    algo_config.seeds = seeds.to_vec();
    for result in &runs {
        let dir = out.join("selm").join(format!("seed-{}", result.seed));
        for (name, digest) in write_run_outputs(result, &algo_config, &dir)? {
            manifest.insert(format!("selm/seed-{}/{name}", result.seed), digest);
        }
    }
    let mut baseline_cfg = algo_config.clone();
    baseline_cfg.algorithm = Algorithm::DpoIterative;
    for result in &baseline_runs {
        let dir = out.join("iter_dpo").join(format!("seed-{}", result.seed));
        for (name, digest) in write_run_outputs(result, &baseline_cfg, &dir)? {
            manifest.insert(format!("iter_dpo/seed-{}/{name}", result.seed), digest);
        }
    }

    let curve_path = out.join("mean_regret.csv");
    {
        let mut w = csv::Writer::from_path(&curve_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", curve_path.display())))?;
        w.write_record(["iteration", "mean_regret", "baseline_mean_regret"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for (i, (a, b)) in aggregate
            .mean_regret
            .iter()
            .zip(&aggregate.baseline_mean_regret)
            .enumerate()
        {
            w.write_record([i.to_string(), a.to_string(), b.to_string()])
                .map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        w.flush().map_err(io_err(&curve_path))?;
    }
    manifest.insert("mean_regret.csv".to_string(), hash_file(&curve_path)?);

    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "config_hash": algo_config.hash(),
            "seeds": seeds,
            "aggregate": aggregate,
        }),
    )?;
    manifest.insert("summary.json".to_string(), hash_file(&summary_path)?);
    write_manifest(out, &manifest)?;

    println!(
        "regret: slope={:.4} (baseline {:.4}) mean final J gap={:.6} (baseline {:.6}) monotone={:.2}",
        aggregate.slope,
        aggregate.baseline_slope,
        aggregate.mean_final_j_gap,
        aggregate.baseline_mean_final_j_gap,
        aggregate.monotone_fraction
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn load_run_dir(dir: &Path) -> Result<(RunConfig, u64), CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_value(
        value
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Invalid(format!("{}: missing config", path.display())))?,
    )
    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let seed = value
        .get("seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CliError::Invalid(format!("{}: missing seed", path.display())))?;
    Ok((config, seed))
}

fn cmd_report(a: &Path, b: &Path, out: &Path) -> Result<(), CliError> {
    let (config_a, seed_a) = load_run_dir(a)?;
    let (config_b, seed_b) = load_run_dir(b)?;

    // Runs are deterministic in (config, seed), so reproduce them instead of
    // persisting full policy tables.
    let run_a = run(&config_a, seed_a)?;
    let run_b = run(&config_b, seed_b)?;

    let features = config_a.build_features(seed_a);
    let env = config_a.build_environment(&features, seed_a)?;
    let features_b = config_b.build_features(seed_b);
    let env_b = config_b.build_environment(&features_b, seed_b)?;
    if env.true_reward.rows() != env_b.true_reward.rows() {
        return Err(LoopError::MismatchedRuns(
            "run directories use different environments".into(),
        )
        .into());
    }

    let report = analyze_runs(&run_a, &run_b, &env)?;

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = BTreeMap::new();

    let diffs_path = out.join("implicit_diffs.csv");
    {
        let mut w = csv::Writer::from_path(&diffs_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", diffs_path.display())))?;
        w.write_record(["prompt", "response", "kind", "diff"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for row in &report.implicit_diffs {
            w.write_record([
                row.prompt.to_string(),
                row.response.to_string(),
                row.kind.to_string(),
                row.diff.to_string(),
            ])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        w.flush().map_err(io_err(&diffs_path))?;
    }
    manifest.insert("implicit_diffs.csv".to_string(), hash_file(&diffs_path)?);

    let hist_path = out.join("histograms.csv");
    {
        let mut w = csv::Writer::from_path(&hist_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", hist_path.display())))?;
        w.write_record(["iteration", "bin", "fraction_a", "fraction_b"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for (iteration, ha, hb) in &report.histograms {
            for (bin, (fa, fb)) in ha.iter().zip(hb).enumerate() {
                w.write_record([
                    iteration.to_string(),
                    bin.to_string(),
                    fa.to_string(),
                    fb.to_string(),
                ])
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            }
        }
        w.flush().map_err(io_err(&hist_path))?;
    }
    manifest.insert("histograms.csv".to_string(), hash_file(&hist_path)?);

    let reward_path = out.join("mean_true_reward.csv");
    {
        let mut w = csv::Writer::from_path(&reward_path)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", reward_path.display())))?;
        w.write_record(["iteration", "mean_a", "mean_b"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for (iteration, ma, mb) in &report.mean_true_reward {
            w.write_record([iteration.to_string(), ma.to_string(), mb.to_string()])
                .map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        w.flush().map_err(io_err(&reward_path))?;
    }
    manifest.insert("mean_true_reward.csv".to_string(), hash_file(&reward_path)?);

    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "a": {"config_hash": run_a.config_hash, "seed": run_a.seed, "algorithm": run_a.algorithm, "alpha": run_a.alpha},
            "b": {"config_hash": run_b.config_hash, "seed": run_b.seed, "algorithm": run_b.algorithm, "alpha": run_b.alpha},
            "implicit_diff_rows": report.implicit_diffs.len(),
            "final_mean_true_reward": report.mean_true_reward.last().map(|(_, ma, mb)| (ma, mb)),
        }),
    )?;
    manifest.insert("summary.json".to_string(), hash_file(&summary_path)?);
    write_manifest(out, &manifest)?;
    println!("report: wrote {} files under {}", manifest.len(), out.display());
    Ok(())
}
