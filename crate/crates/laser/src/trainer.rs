//! The joint training loop: group rollouts, verifier rewards, self-reward
//! scoring, warm-up-gated loss assembly, and plain-SGD parameter updates.
//!
//! Each step samples a batch of problems, rolls out `group_size` solutions
//! per problem, and ascends the objective
//!
//! ```text
//! J = (1/B) sum_i sum_t A_i log pi(y_t | .) - beta * KL - alpha * L_selfreward
//! ```
//!
//! where the advantages come from group-relative normalization (optionally
//! integrated with normalized self-rewarding scores after the second
//! warm-up) and `L_selfreward` is the class-reweighted MSE between scores
//! and verifier rewards (or the SFT comparison loss). Advantages are
//! rollout-time constants; the MSE term is differentiated through the
//! score. One update per rollout batch, so no importance ratios appear.
//!
//! Determinism: every random draw is keyed by `(run_seed, domain, id, k)`,
//! rollouts fan out in parallel into indexed slots, and all reductions run
//! in a fixed order, so reruns and resumed runs are bitwise identical.

use crate::advantage::{grpo_advantages, integrated_advantages, mean_and_pop_std};
use crate::checkpoint;
use crate::error::{LaserError, Result};
use crate::inference::verification_f1;
use crate::policy::{Arch, Policy};
use crate::rng::{domain, key, stream};
use crate::selfreward::{
    mse_loss_reweighted, score_solution_at, sft_loss, sft_target, ScorePosition, ScoredSolution,
    SelfRewardConfig, SftScored,
};
use crate::task::{gen_problem, vocab, verify, Problem, Solution, TokenId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Flat run configuration. Maps one-to-one onto the TOML config file;
/// unknown keys are rejected at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserConfig {
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_batch_problems")]
    pub batch_problems: usize,
    #[serde(default = "d_group_size")]
    pub group_size: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Generation-side KL coefficient; 0 disables the KL term.
    #[serde(default)]
    pub beta: f64,
    /// KL coefficient of the verification objective.
    #[serde(default = "d_tenth")]
    pub beta_v: f64,
    /// Weight of the self-rewarding loss in the joint objective.
    #[serde(default = "d_tenth")]
    pub alpha: f64,
    /// Weight of normalized self-reward advantages after integration.
    #[serde(default = "d_tenth")]
    pub tau: f64,
    /// Sigma filter: groups with self-reward std below this keep tau = 0.
    #[serde(default = "d_tenth")]
    pub sigma_threshold: f64,
    /// Reasoning warm-up: the self-rewarding loss activates at this step.
    #[serde(default = "d_w_r")]
    pub w_r: u64,
    /// Self-rewarding warm-up: advantage integration activates here.
    #[serde(default = "d_w_sr")]
    pub w_sr: u64,
    /// Reference log-probability constant; estimated at startup when unset.
    #[serde(default)]
    pub c_ref: Option<f64>,
    /// Compute the reference log-probability per sample instead.
    #[serde(default)]
    pub use_exact_ref: bool,
    /// Score at the position that emitted the final token (zero extra
    /// inference) instead of one position past it.
    #[serde(default)]
    pub score_at_eos: bool,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_context_window")]
    pub context_window: usize,
    #[serde(default = "d_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "d_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Log rollouts every this many steps; 0 disables.
    #[serde(default = "d_rollout_log_every")]
    pub rollout_log_every: u64,
    /// Record wall-clock timing in metrics and manifests. Off by default
    /// so every output file is bitwise reproducible from (config, seed).
    #[serde(default)]
    pub record_timing: bool,
}

fn d_steps() -> u64 {
    3000
}
fn d_batch_problems() -> usize {
    32
}
fn d_group_size() -> usize {
    8
}
fn d_max_len() -> usize {
    8
}
fn d_lr() -> f64 {
    0.05
}
fn d_tenth() -> f64 {
    0.1
}
fn d_w_r() -> u64 {
    300
}
fn d_w_sr() -> u64 {
    600
}
fn d_embed_dim() -> usize {
    16
}
fn d_hidden_dim() -> usize {
    64
}
fn d_context_window() -> usize {
    8
}
fn d_max_seq_len() -> usize {
    64
}
fn d_checkpoint_every() -> u64 {
    500
}
fn d_rollout_log_every() -> u64 {
    50
}

impl Default for LaserConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are valid")
    }
}

impl LaserConfig {
    pub fn arch(&self) -> Arch {
        Arch {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            context_window: self.context_window,
            vocab_size: vocab::SIZE,
            max_seq_len: self.max_seq_len,
        }
    }

    /// Self-rewarding config with the effective reference constant filled in.
    pub fn selfreward(&self, c_ref: f64) -> SelfRewardConfig {
        SelfRewardConfig {
            beta_v: self.beta_v,
            alpha: self.alpha,
            c_ref,
            zc: vocab::ZC,
            use_exact_ref: self.use_exact_ref,
        }
    }

    pub fn score_position(&self) -> ScorePosition {
        if self.score_at_eos {
            ScorePosition::FinalEmission
        } else {
            ScorePosition::AfterFinal
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, msg: String) -> LaserError {
            LaserError::Config {
                field: field.into(),
                msg,
            }
        }
        if self.group_size < 2 {
            return Err(bad("group_size", format!("must be >= 2, got {}", self.group_size)));
        }
        if self.batch_problems == 0 {
            return Err(bad("batch_problems", "must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(bad("max_len", "must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.beta < 0.0 {
            return Err(bad("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(bad("tau", format!("must be in [0, 1], got {}", self.tau)));
        }
        if self.sigma_threshold < 0.0 {
            return Err(bad("sigma_threshold", "must be >= 0".into()));
        }
        if !(self.w_r <= self.w_sr && self.w_sr <= self.steps) {
            return Err(bad(
                "w_r",
                format!(
                    "warm-ups must satisfy w_r <= w_sr <= steps, got {} <= {} <= {}",
                    self.w_r, self.w_sr, self.steps
                ),
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 {
            return Err(bad("arch", "embed_dim, hidden_dim, context_window must be >= 1".into()));
        }
        let prompt_len = 5;
        if prompt_len + self.max_len > self.max_seq_len {
            return Err(bad(
                "max_seq_len",
                format!(
                    "must hold a prompt plus max_len tokens ({} + {})",
                    prompt_len, self.max_len
                ),
            ));
        }
        // beta_v/alpha/c_ref are checked through the self-reward config;
        // when c_ref is unset the estimated value is validated at run start
        self.selfreward(self.c_ref.unwrap_or(-25.0)).validate()?;
        Ok(())
    }
}

/// Which loss assembly the run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pure group-relative policy optimization, no self-rewarding terms.
    Grpo,
    /// Full method: MSE loss after `w_r`, advantage integration after `w_sr`.
    Laser,
    /// MSE loss only, never integrating self-reward advantages.
    LaserNoSwa,
    /// The SFT comparison loss in place of the MSE loss.
    SftBaseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Laser => "laser",
            Mode::LaserNoSwa => "laser-noswa",
            Mode::SftBaseline => "sft-baseline",
        }
    }
}

/// Warm-up gates for step `s` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleFlags {
    pub use_sr_loss: bool,
    pub use_sr_adv: bool,
}

/// `use_sr_loss` from the reasoning warm-up, `use_sr_adv` from the
/// self-rewarding warm-up.
pub fn schedule_flags(s: u64, cfg: &LaserConfig) -> ScheduleFlags {
    ScheduleFlags {
        use_sr_loss: s >= cfg.w_r,
        use_sr_adv: s >= cfg.w_sr,
    }
}

fn effective_flags(mode: Mode, s: u64, cfg: &LaserConfig) -> (bool, bool, bool) {
    let flags = schedule_flags(s, cfg);
    match mode {
        Mode::Grpo => (false, false, false),
        Mode::Laser => (flags.use_sr_loss, flags.use_sr_adv, false),
        Mode::LaserNoSwa => (flags.use_sr_loss, false, false),
        Mode::SftBaseline => (flags.use_sr_loss, false, true),
    }
}

/// Hash covering the effective configuration and mode; stored in
/// checkpoints and the run manifest so tampering and mismatched resumes
/// are detected.
pub fn config_hash(cfg: &LaserConfig, mode: Mode) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
    hasher.update(mode.as_str().as_bytes());
    hex::encode(hasher.finalize())
}

/// One rollout: the problem, the sampled solution, and its scores.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub problem: Problem,
    pub solution: Solution,
    pub total_logprob: f64,
    pub scored: ScoredSolution,
}

/// JSONL record for one logged rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: u64,
    pub problem_id: u64,
    pub prompt_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
    pub answer: Option<String>,
    pub gt: String,
    pub r_v: f64,
    pub r_s: f64,
    pub total_logprob: f64,
    pub terminated: bool,
}

impl RolloutRecord {
    pub fn from_rollout(step: u64, r: &Rollout) -> Self {
        RolloutRecord {
            step,
            problem_id: r.problem.id,
            prompt_ids: r.problem.prompt.clone(),
            response_ids: r.solution.response.clone(),
            answer: r.solution.extracted_answer.clone(),
            gt: r.problem.gt_answer.clone(),
            r_v: r.scored.r_v,
            r_s: r.scored.r_s,
            total_logprob: r.total_logprob,
            terminated: r.solution.terminated,
        }
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub mean_rv: f64,
    pub pass_rate: f64,
    pub mse_loss: f64,
    pub sr_f1: f64,
    pub frac_sigma_filtered: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,mean_rv,pass_rate,mse_loss,sr_f1,frac_sigma_filtered,grad_norm,wall_ms";

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_rv,
            self.pass_rate,
            self.mse_loss,
            self.sr_f1,
            self.frac_sigma_filtered,
            self.grad_norm,
            self.wall_ms
        )
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("mean_rv", self.mean_rv),
            ("mse_loss", self.mse_loss),
            ("sr_f1", self.sr_f1),
            ("frac_sigma_filtered", self.frac_sigma_filtered),
            ("grad_norm", self.grad_norm),
        ] {
            if !v.is_finite() {
                return Err(LaserError::NonFinite(format!("metric {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Loop state. The reference is a frozen copy of the initial policy; its
/// checksum is asserted before and after every step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub policy: Policy,
    pub reference: Policy,
    pub ref_checksum: String,
    pub c_ref: f64,
    pub c_ref_std: f64,
    pub run_seed: u64,
}

impl TrainState {
    /// Fresh state: Gaussian init, frozen reference copy, and the reference
    /// constant estimated over `CREF_SAMPLE_SIZE` sampled pairs unless the
    /// config pins it.
    pub fn init(cfg: &LaserConfig) -> Result<TrainState> {
        let policy = Policy::init(cfg.arch(), cfg.run_seed);
        let reference = policy.clone();
        let ref_checksum = checkpoint::param_sha256(&reference);
        let (c_ref, c_ref_std) = match cfg.c_ref {
            Some(v) => (v, 0.0),
            None => {
                let est = estimate_cref_for_run(&reference, cfg)?;
                (est.mean, est.std)
            }
        };
        let sw = cfg.selfreward(c_ref);
        sw.validate()?;
        Ok(TrainState {
            step: 0,
            policy,
            reference,
            ref_checksum,
            c_ref,
            c_ref_std,
            run_seed: cfg.run_seed,
        })
    }

    /// State resumed from a checkpoint written by a run with the same
    /// config and mode.
    pub fn resume(cfg: &LaserConfig, mode: Mode, ckpt: &Path) -> Result<TrainState> {
        let (policy, header) = checkpoint::load(ckpt)?;
        let expected = config_hash(cfg, mode);
        if header.config_hash != expected {
            return Err(LaserError::Config {
                field: "resume".into(),
                msg: format!(
                    "checkpoint was written under a different config/mode \
                     (hash {} vs {})",
                    header.config_hash, expected
                ),
            });
        }
        let reference = Policy::init(cfg.arch(), header.run_seed);
        let ref_checksum = checkpoint::param_sha256(&reference);
        let c_ref_std = match cfg.c_ref {
            Some(_) => 0.0,
            None => estimate_cref_for_run(&reference, cfg)?.std,
        };
        Ok(TrainState {
            step: header.version,
            policy,
            reference,
            ref_checksum,
            c_ref: header.c_ref,
            c_ref_std,
            run_seed: header.run_seed,
        })
    }

    pub fn selfreward_config(&self, cfg: &LaserConfig) -> SelfRewardConfig {
        cfg.selfreward(self.c_ref)
    }
}

/// Sample size for the startup reference-constant estimate.
pub const CREF_SAMPLE_SIZE: usize = 300;

pub fn estimate_cref_for_run(
    reference: &Policy,
    cfg: &LaserConfig,
) -> Result<crate::selfreward::CrefEstimate> {
    let pairs: Vec<(Problem, Solution)> = (0..CREF_SAMPLE_SIZE as u64)
        .map(|i| {
            let p = gen_problem(key(cfg.run_seed, domain::CREF, i, 0));
            let mut rng = stream(cfg.run_seed, domain::CREF, i, 1);
            let (sol, _) = reference.sample_sequence(&p.prompt, cfg.max_len, &mut rng)?;
            Ok((p, sol))
        })
        .collect::<Result<_>>()?;
    crate::selfreward::estimate_cref(reference, &pairs, vocab::ZC, cfg.score_position())
}

/// Frozen per-solution data entering one step's objective.
#[derive(Debug, Clone)]
pub struct ObjectiveItem {
    /// `prompt ++ response`.
    pub seq: Vec<TokenId>,
    pub prompt_len: usize,
    /// Rollout-time advantage, a constant for the gradient.
    pub advantage: f64,
    pub r_v: f64,
    /// The context the self-rewarding score reads.
    pub score_ctx: Vec<TokenId>,
}

/// One step's assembled objective over frozen rollouts. `value` and
/// `gradient` are exact counterparts: the gradient is the derivative of
/// the value with advantages held constant and the score differentiated.
#[derive(Debug, Clone)]
pub struct StepObjective {
    pub items: Vec<ObjectiveItem>,
    /// Items per problem group; chunk boundaries for the fixed-order
    /// gradient reduction.
    pub group_size: usize,
    pub sw: SelfRewardConfig,
    pub beta: f64,
    pub use_sr_loss: bool,
    pub sft: bool,
}

impl StepObjective {
    fn scale(&self) -> f64 {
        1.0 / self.items.len() as f64
    }

    /// Recomputes each item's self-rewarding score under `policy`.
    fn rescore(&self, policy: &Policy, reference: &Policy) -> Result<Vec<ScoredSolution>> {
        self.items
            .iter()
            .map(|item| {
                let lp = policy.next_logprob_of(&item.score_ctx, self.sw.zc)?;
                let ref_term = if self.sw.use_exact_ref {
                    reference.next_logprob_of(&item.score_ctx, self.sw.zc)?
                } else {
                    self.sw.c_ref
                };
                Ok(ScoredSolution {
                    r_v: item.r_v,
                    r_s: crate::selfreward::score_from_logprob(lp, ref_term, self.sw.beta_v),
                    zc_logprob: lp,
                })
            })
            .collect()
    }

    fn sft_items(&self, policy: &Policy) -> Result<Vec<SftScored>> {
        self.items
            .iter()
            .map(|item| {
                let target = sft_target(item.r_v);
                Ok(SftScored {
                    r_v: item.r_v,
                    target_logprob: policy.next_logprob_of(&item.score_ctx, target)?,
                })
            })
            .collect()
    }

    /// Objective value at `policy` (ascent direction is positive).
    pub fn value(&self, policy: &Policy, reference: &Policy) -> Result<f64> {
        let scale = self.scale();
        let mut pg = 0.0;
        let mut kl = 0.0;
        for item in &self.items {
            let trace = policy.forward_logprobs(&item.seq, false)?;
            let resp: f64 = trace.logprobs[item.prompt_len..].iter().sum();
            pg += item.advantage * resp;
            if self.beta != 0.0 {
                let ref_trace = reference.forward_logprobs(&item.seq, false)?;
                let ref_resp: f64 = ref_trace.logprobs[item.prompt_len..].iter().sum();
                kl += resp - ref_resp;
            }
        }
        let mut value = scale * pg - self.beta * scale * kl;
        if self.use_sr_loss && self.sw.alpha != 0.0 {
            let loss = if self.sft {
                sft_loss(&self.sft_items(policy)?)?.0
            } else {
                mse_loss_reweighted(&self.rescore(policy, reference)?, &self.sw)?.loss
            };
            value -= self.sw.alpha * loss;
        }
        Ok(value)
    }

    /// Exact gradient of [`StepObjective::value`] with respect to the
    /// policy parameters, reduced over per-group chunks in a fixed order.
    pub fn gradient(&self, policy: &Policy, reference: &Policy) -> Result<Vec<f64>> {
        let scale = self.scale();
        let token_coeff: Vec<f64> = self
            .items
            .iter()
            .map(|item| (item.advantage - self.beta) * scale)
            .collect();

        let loss_coeffs: Option<Vec<(TokenId, f64)>> = if self.use_sr_loss && self.sw.alpha != 0.0
        {
            if self.sft {
                let items = self.sft_items(policy)?;
                let (_, coeffs) = sft_loss(&items)?;
                Some(
                    self.items
                        .iter()
                        .zip(coeffs)
                        .map(|(item, c)| (sft_target(item.r_v), -self.sw.alpha * c))
                        .collect(),
                )
            } else {
                let scored = self.rescore(policy, reference)?;
                let out = mse_loss_reweighted(&scored, &self.sw)?;
                Some(
                    out.coeffs
                        .iter()
                        .map(|&c| (self.sw.zc, -self.sw.alpha * c))
                        .collect(),
                )
            }
        } else {
            None
        };

        let chunks: Vec<(usize, usize)> = (0..self.items.len())
            .step_by(self.group_size)
            .map(|start| (start, (start + self.group_size).min(self.items.len())))
            .collect();

        let partials: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|&(start, end)| {
                let mut seqs: Vec<(Vec<TokenId>, Vec<f64>)> = Vec::new();
                for i in start..end {
                    let item = &self.items[i];
                    let mut coeffs = vec![0.0; item.seq.len()];
                    for c in coeffs[item.prompt_len..].iter_mut() {
                        *c = token_coeff[i];
                    }
                    seqs.push((item.seq.clone(), coeffs));
                }
                if let Some(lc) = &loss_coeffs {
                    for i in start..end {
                        let (target, c) = lc[i];
                        let mut ctx = self.items[i].score_ctx.clone();
                        ctx.push(target);
                        let mut coeffs = vec![0.0; ctx.len()];
                        *coeffs.last_mut().unwrap() = c;
                        seqs.push((ctx, coeffs));
                    }
                }
                let pairs: Vec<(&[TokenId], &[f64])> = seqs
                    .iter()
                    .map(|(s, c)| (s.as_slice(), c.as_slice()))
                    .collect();
                policy.backward(&pairs)
            })
            .collect();

        let mut grad = vec![0.0; policy.arch.n_params()];
        for partial in partials {
            let partial = partial?;
            for (g, p) in grad.iter_mut().zip(partial.iter()) {
                *g += p;
            }
        }
        Ok(grad)
    }
}

fn score_one(
    policy: &Policy,
    reference: &Policy,
    p: &Problem,
    sol: &Solution,
    sw: &SelfRewardConfig,
    pos: ScorePosition,
) -> Result<ScoredSolution> {
    let r_v = verify(p, sol);
    let (r_s, zc_logprob) = score_solution_at(policy, p, sol, sw, Some(reference), pos)?;
    Ok(ScoredSolution {
        r_v,
        r_s,
        zc_logprob,
    })
}

/// Rolls out one step's batch: `batch_problems` problems, `group_size`
/// samples each, scored under the rollout-time policy.
fn rollout_batch(state: &TrainState, cfg: &LaserConfig, s: u64) -> Result<Vec<Vec<Rollout>>> {
    let sw = state.selfreward_config(cfg);
    let pos = cfg.score_position();
    (0..cfg.batch_problems as u64)
        .into_par_iter()
        .map(|slot| {
            let problem = gen_problem(key(state.run_seed, domain::PROBLEM, s, slot));
            let mut group = Vec::with_capacity(cfg.group_size);
            for k in 0..cfg.group_size as u64 {
                let mut rng = stream(state.run_seed, domain::ROLLOUT, problem.id, k);
                let (solution, trace) =
                    state
                        .policy
                        .sample_sequence(&problem.prompt, cfg.max_len, &mut rng)?;
                let scored = score_one(&state.policy, &state.reference, &problem, &solution, &sw, pos)?;
                group.push(Rollout {
                    problem: problem.clone(),
                    solution,
                    total_logprob: trace.total_logprob,
                    scored,
                });
            }
            Ok(group)
        })
        .collect()
}

/// One optimization step: rollouts, advantages, joint objective gradient,
/// and a single SGD ascent update. Aborts (without updating) on any
/// non-finite loss or gradient.
pub fn train_step(
    state: &mut TrainState,
    cfg: &LaserConfig,
    mode: Mode,
    s: u64,
) -> Result<(MetricRow, Vec<Rollout>)> {
    let t0 = Instant::now();
    let before = checkpoint::param_sha256(&state.reference);
    assert_eq!(before, state.ref_checksum, "reference mutated before step {s}");

    let (use_sr_loss, use_sr_adv, sft) = effective_flags(mode, s, cfg);
    let sw = state.selfreward_config(cfg);
    let pos = cfg.score_position();
    let groups = rollout_batch(state, cfg, s)?;

    let mut items = Vec::with_capacity(cfg.batch_problems * cfg.group_size);
    let mut scored_all = Vec::with_capacity(items.capacity());
    let mut sigma_filtered = 0usize;
    for group in &groups {
        let rv: Vec<f64> = group.iter().map(|r| r.scored.r_v).collect();
        let rs: Vec<f64> = group.iter().map(|r| r.scored.r_s).collect();
        let advantages = if use_sr_adv {
            integrated_advantages(&rv, &rs, cfg.tau, cfg.sigma_threshold)?.advantages
        } else {
            grpo_advantages(&rv)?
        };
        let (_, std_rs) = mean_and_pop_std(&rs);
        if std_rs < cfg.sigma_threshold {
            sigma_filtered += 1;
        }
        for (rollout, adv) in group.iter().zip(advantages) {
            if !adv.is_finite() || !rollout.scored.r_s.is_finite() {
                return Err(LaserError::StepAborted {
                    step: s,
                    detail: format!(
                        "non-finite rollout quantities for problem {}: advantage {adv}, r_s {}",
                        rollout.problem.id, rollout.scored.r_s
                    ),
                });
            }
            items.push(ObjectiveItem {
                seq: rollout.problem.full_sequence(&rollout.solution),
                prompt_len: rollout.problem.prompt.len(),
                advantage: adv,
                r_v: rollout.scored.r_v,
                score_ctx: crate::selfreward::score_context(&rollout.problem, &rollout.solution, pos),
            });
            scored_all.push(rollout.scored);
        }
    }

    let objective = StepObjective {
        items,
        group_size: cfg.group_size,
        sw,
        beta: cfg.beta,
        use_sr_loss,
        sft,
    };
    let grad = objective.gradient(&state.policy, &state.reference)?;

    // reported even while its gradient is gated off
    let mse = mse_loss_reweighted(&scored_all, &sw)?;
    if !mse.loss.is_finite() {
        return Err(LaserError::StepAborted {
            step: s,
            detail: format!("non-finite self-rewarding loss {}", mse.loss),
        });
    }
    let mut norm_sq = 0.0;
    for (i, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(LaserError::StepAborted {
                step: s,
                detail: format!("non-finite gradient coordinate {i}: {g}"),
            });
        }
        norm_sq += g * g;
    }

    for (t, g) in state.policy.theta.iter_mut().zip(grad.iter()) {
        *t += cfg.lr * g;
    }
    state.policy.version = s;
    state.step = s;

    let mean_rv = scored_all.iter().map(|x| x.r_v).sum::<f64>() / scored_all.len() as f64;
    let f1 = verification_f1(&scored_all)?;
    let row = MetricRow {
        step: s,
        mean_rv,
        pass_rate: mean_rv,
        mse_loss: mse.loss,
        sr_f1: f1.f1_or_present_class(),
        frac_sigma_filtered: sigma_filtered as f64 / groups.len() as f64,
        grad_norm: norm_sq.sqrt(),
        wall_ms: if cfg.record_timing {
            t0.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    row.assert_finite()?;

    let after = checkpoint::param_sha256(&state.reference);
    assert_eq!(after, state.ref_checksum, "reference mutated during step {s}");

    Ok((row, groups.into_iter().flatten().collect()))
}

/// Artifacts produced by [`run`].
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub completed_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub rollout_log: Option<PathBuf>,
    pub c_ref: f64,
    pub c_ref_std: f64,
}

/// Options for a full run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    pub resume: Option<PathBuf>,
    /// Log every step's rollouts instead of every `rollout_log_every`.
    pub full_rollout_log: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: Mode::Laser,
            resume: None,
            full_rollout_log: false,
        }
    }
}

fn ckpt_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.bin"))
}

/// Executes `steps` training steps, writing the metrics CSV, periodic
/// checkpoints, and the rollout log under `out_dir`. Deterministic given
/// `(config, seed, mode)`.
pub fn run(cfg: &LaserConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let hash = config_hash(cfg, opts.mode);

    let (mut state, resuming) = match &opts.resume {
        Some(ckpt) => (TrainState::resume(cfg, opts.mode, ckpt)?, true),
        None => (TrainState::init(cfg)?, false),
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resuming && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    let rollout_path = out_dir.join("rollouts.jsonl");
    let log_rollouts = opts.full_rollout_log || cfg.rollout_log_every > 0;
    let mut rollout_log = if log_rollouts {
        Some(if resuming && rollout_path.exists() {
            std::fs::OpenOptions::new().append(true).open(&rollout_path)?
        } else {
            std::fs::File::create(&rollout_path)?
        })
    } else {
        None
    };

    let mut checkpoints = Vec::new();
    if !resuming {
        let initial = ckpt_path(out_dir, 0);
        checkpoint::save(&initial, &state.policy, state.run_seed, state.c_ref, &hash)?;
        checkpoints.push(initial);
    }

    for s in (state.step + 1)..=cfg.steps {
        let (row, rollouts) = train_step(&mut state, cfg, opts.mode, s)?;
        writeln!(metrics, "{}", row.to_csv_line())?;
        if let Some(log) = rollout_log.as_mut() {
            let log_this =
                opts.full_rollout_log || (cfg.rollout_log_every > 0 && s % cfg.rollout_log_every == 0);
            if log_this {
                for r in &rollouts {
                    serde_json::to_writer(&mut *log, &RolloutRecord::from_rollout(s, r))?;
                    log.write_all(b"\n")?;
                }
            }
        }
        if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) || s == cfg.steps {
            let path = ckpt_path(out_dir, s);
            checkpoint::save(&path, &state.policy, state.run_seed, state.c_ref, &hash)?;
            checkpoints.push(path);
        }
    }
    metrics.flush()?;
    if let Some(log) = rollout_log.as_mut() {
        log.flush()?;
    }

    let final_checkpoint = checkpoints
        .last()
        .cloned()
        .unwrap_or_else(|| ckpt_path(out_dir, state.step));
    Ok(RunSummary {
        completed_steps: state.step,
        final_checkpoint,
        metrics_csv: metrics_path,
        checkpoints,
        rollout_log: log_rollouts.then_some(rollout_path),
        c_ref: state.c_ref,
        c_ref_std: state.c_ref_std,
    })
}

/// Evaluation report over held-out problems.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_problems: usize,
    pub k: usize,
    pub pass1: f64,
    pub acc_correct: Option<f64>,
    pub acc_incorrect: Option<f64>,
    pub f1: Option<f64>,
    pub overall_acc: f64,
}

/// Samples `k` solutions for each of `n_problems` held-out problems and
/// reports Pass@1 and self-verification quality.
pub fn evaluate(
    policy: &Policy,
    reference: &Policy,
    sw: &SelfRewardConfig,
    pos: ScorePosition,
    max_len: usize,
    n_problems: usize,
    k: usize,
    eval_seed: u64,
) -> Result<(EvalReport, Vec<RolloutRecord>)> {
    assert!(k >= 1);
    let groups: Vec<Vec<RolloutRecord>> = (0..n_problems as u64)
        .into_par_iter()
        .map(|i| {
            let problem = gen_problem(key(eval_seed, domain::EVAL_PROBLEM, i, 0));
            let mut records = Vec::with_capacity(k);
            for j in 0..k as u64 {
                let mut rng = stream(eval_seed, domain::EVAL_ROLLOUT, problem.id, j);
                let (solution, trace) = policy.sample_sequence(&problem.prompt, max_len, &mut rng)?;
                let scored = score_one(policy, reference, &problem, &solution, sw, pos)?;
                records.push(RolloutRecord::from_rollout(
                    0,
                    &Rollout {
                        problem: problem.clone(),
                        solution,
                        total_logprob: trace.total_logprob,
                        scored,
                    },
                ));
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let records: Vec<RolloutRecord> = groups.into_iter().flatten().collect();
    let scored: Vec<ScoredSolution> = records
        .iter()
        .map(|r| ScoredSolution {
            r_v: r.r_v,
            r_s: r.r_s,
            zc_logprob: 0.0,
        })
        .collect();
    let f1 = verification_f1(&scored)?;
    let pass1 = scored.iter().map(|s| s.r_v).sum::<f64>() / scored.len() as f64;
    Ok((
        EvalReport {
            n_problems,
            k,
            pass1,
            acc_correct: f1.acc_correct,
            acc_incorrect: f1.acc_incorrect,
            f1: f1.f1,
            overall_acc: f1.overall_acc,
        },
        records,
    ))
}

/// Which loss a frozen-rollout fit optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrozenLoss {
    Mse,
    Sft,
}

/// Trains only the self-rewarding head objective on a fixed labeled set of
/// scoring contexts, by minibatch SGD. Used to study the verification loss
/// in isolation from generation.
pub fn fit_selfreward_frozen(
    policy: &mut Policy,
    contexts: &[(Vec<TokenId>, f64)],
    sw: &SelfRewardConfig,
    loss: FrozenLoss,
    updates: usize,
    minibatch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::Rng;
    if contexts.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let mut losses = Vec::with_capacity(updates);
    for it in 0..updates {
        let mut rng = stream(seed, domain::FROZEN_FIT, it as u64, 0);
        let batch: Vec<&(Vec<TokenId>, f64)> = (0..minibatch)
            .map(|_| &contexts[rng.random_range(0..contexts.len())])
            .collect();
        let (loss_value, pairs): (f64, Vec<(Vec<TokenId>, Vec<f64>)>) = match loss {
            FrozenLoss::Mse => {
                let scored: Vec<ScoredSolution> = batch
                    .iter()
                    .map(|(ctx, r_v)| {
                        let lp = policy.next_logprob_of(ctx, sw.zc)?;
                        Ok(ScoredSolution {
                            r_v: *r_v,
                            r_s: crate::selfreward::score_from_logprob(lp, sw.c_ref, sw.beta_v),
                            zc_logprob: lp,
                        })
                    })
                    .collect::<Result<_>>()?;
                let out = mse_loss_reweighted(&scored, sw)?;
                let pairs = batch
                    .iter()
                    .zip(out.coeffs.iter())
                    .map(|((ctx, _), &c)| {
                        let mut seq = ctx.clone();
                        seq.push(sw.zc);
                        let mut coeffs = vec![0.0; seq.len()];
                        *coeffs.last_mut().unwrap() = c;
                        (seq, coeffs)
                    })
                    .collect();
                (out.loss, pairs)
            }
            FrozenLoss::Sft => {
                let items: Vec<SftScored> = batch
                    .iter()
                    .map(|(ctx, r_v)| {
                        Ok(SftScored {
                            r_v: *r_v,
                            target_logprob: policy.next_logprob_of(ctx, sft_target(*r_v))?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let (value, coeffs) = sft_loss(&items)?;
                let pairs = batch
                    .iter()
                    .zip(coeffs.iter())
                    .map(|((ctx, r_v), &c)| {
                        let mut seq = ctx.clone();
                        seq.push(sft_target(*r_v));
                        let mut coeffs = vec![0.0; seq.len()];
                        *coeffs.last_mut().unwrap() = c;
                        (seq, coeffs)
                    })
                    .collect();
                (value, pairs)
            }
        };
        let refs: Vec<(&[TokenId], &[f64])> = pairs
            .iter()
            .map(|(s, c)| (s.as_slice(), c.as_slice()))
            .collect();
        let grad = policy.backward(&refs)?;
        if !loss_value.is_finite() {
            return Err(LaserError::NonFinite(format!(
                "frozen fit loss at update {it}: {loss_value}"
            )));
        }
        for (t, g) in policy.theta.iter_mut().zip(grad.iter()) {
            *t -= lr * g;
        }
        losses.push(loss_value);
    }
    Ok(losses)
}
