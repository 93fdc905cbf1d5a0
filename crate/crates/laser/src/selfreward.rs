//! Last-token self-rewarding: the score itself, the reference-constant
//! estimate, the class-reweighted MSE loss, the SFT comparison loss, the
//! partition-function audit, and the multi-token / final-emission variants.
//!
//! The self-rewarding score of a solution is
//! `r_s = beta_v * (log pi(zc | x, y) - c_ref)`: the policy's next-token
//! log-probability of the reserved token ZC at the last response token,
//! shifted by a pre-calculated reference constant and scaled by the KL
//! coefficient of the verification objective. Aligning `r_s` with the
//! verifier reward via an MSE loss trains verification without generating
//! any verification text.

use crate::error::{LaserError, Result};
use crate::policy::Policy;
use crate::task::{vocab, Problem, Solution, TokenId};
use serde::{Deserialize, Serialize};

/// Audit threshold on `|log Z|` below which the partition function may be
/// discarded from the closed-form verification solution.
pub const PARTITION_TOL: f64 = 1e-4;

/// Where the score reads the next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorePosition {
    /// One position past the final response token (the default: one extra
    /// token inference after generation).
    AfterFinal,
    /// The position that emitted the final response token (zero extra
    /// inference; the final token is EOS for terminated solutions).
    FinalEmission,
}

/// Hyper-parameters of the self-rewarding objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfRewardConfig {
    /// KL coefficient of the verification objective.
    pub beta_v: f64,
    /// Weight of the MSE loss inside the joint objective.
    pub alpha: f64,
    /// Pre-calculated constant standing in for `log pi_ref(zc | x, y)`.
    pub c_ref: f64,
    /// The pre-specified never-generated token carrying the score.
    pub zc: TokenId,
    /// Compute the reference log-probability per sample instead of using
    /// the constant.
    pub use_exact_ref: bool,
}

impl SelfRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_v > 0.0) {
            return Err(LaserError::Config {
                field: "beta_v".into(),
                msg: format!("must be > 0, got {}", self.beta_v),
            });
        }
        if !(self.alpha >= 0.0) {
            return Err(LaserError::Config {
                field: "alpha".into(),
                msg: format!("must be >= 0, got {}", self.alpha),
            });
        }
        // the fitted log-probability for correct solutions is
        // c_ref + 1/beta_v; it must stay well below log(1) for the
        // partition-function deduction to hold
        let target = self.c_ref + 1.0 / self.beta_v;
        if !(target < -2.0) {
            return Err(LaserError::Config {
                field: "c_ref".into(),
                msg: format!(
                    "c_ref + 1/beta_v must be < -2 (got {target}); \
                     the fitted ZC probability would not stay negligible"
                ),
            });
        }
        Ok(())
    }
}

/// A solution scored by both the verifier and the policy itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSolution {
    /// Verifier reward, 0 or 1.
    pub r_v: f64,
    /// Self-rewarding score.
    pub r_s: f64,
    /// The ZC log-probability the score was derived from.
    pub zc_logprob: f64,
}

/// Mean/std of the reference ZC log-probability over a sample set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrefEstimate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// The scoring context for a solution: `prompt ++ response` for
/// [`ScorePosition::AfterFinal`], or the prefix that emitted the final
/// token for [`ScorePosition::FinalEmission`].
pub fn score_context(p: &Problem, sol: &Solution, pos: ScorePosition) -> Vec<TokenId> {
    let mut ctx = p.prompt.clone();
    match pos {
        ScorePosition::AfterFinal => ctx.extend_from_slice(&sol.response),
        ScorePosition::FinalEmission => {
            let end = sol
                .response
                .iter()
                .position(|&t| t == vocab::EOS)
                .unwrap_or_else(|| sol.response.len().saturating_sub(1));
            ctx.extend_from_slice(&sol.response[..end]);
        }
    }
    ctx
}

/// The affine score map: `beta_v * (zc_logprob - ref_term)`.
pub fn score_from_logprob(zc_logprob: f64, ref_term: f64, beta_v: f64) -> f64 {
    beta_v * (zc_logprob - ref_term)
}

/// Mean and standard deviation of `log pi_ref(zc | x, y)` over sample
/// pairs; the mean is the constant `c_ref`.
pub fn estimate_cref(
    reference: &Policy,
    pairs: &[(Problem, Solution)],
    zc: TokenId,
    pos: ScorePosition,
) -> Result<CrefEstimate> {
    if pairs.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let mut values = Vec::with_capacity(pairs.len());
    for (p, sol) in pairs {
        let ctx = score_context(p, sol, pos);
        values.push(reference.next_logprob_of(&ctx, zc)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(CrefEstimate {
        mean,
        std: var.sqrt(),
        n: pairs.len(),
    })
}

/// Last-token self-rewarding score of a solution. Reads one next-token
/// distribution past the end of generation, nothing else.
///
/// With `use_exact_ref` the per-sample reference log-probability replaces
/// the constant, in which case `reference` must be supplied.
pub fn self_reward_score(
    policy: &Policy,
    p: &Problem,
    sol: &Solution,
    cfg: &SelfRewardConfig,
    reference: Option<&Policy>,
) -> Result<(f64, f64)> {
    score_solution_at(policy, p, sol, cfg, reference, ScorePosition::AfterFinal)
}

/// [`self_reward_score`] generalized over the scoring position. Returns
/// `(r_s, zc_logprob)`.
pub fn score_solution_at(
    policy: &Policy,
    p: &Problem,
    sol: &Solution,
    cfg: &SelfRewardConfig,
    reference: Option<&Policy>,
    pos: ScorePosition,
) -> Result<(f64, f64)> {
    let ctx = score_context(p, sol, pos);
    let zc_logprob = policy.next_logprob_of(&ctx, cfg.zc)?;
    let ref_term = if cfg.use_exact_ref {
        let reference = reference.ok_or_else(|| LaserError::Config {
            field: "use_exact_ref".into(),
            msg: "exact reference scoring requires the reference policy".into(),
        })?;
        reference.next_logprob_of(&ctx, cfg.zc)?
    } else {
        cfg.c_ref
    };
    Ok((score_from_logprob(zc_logprob, ref_term, cfg.beta_v), zc_logprob))
}

/// Output of the re-weighted MSE loss: the loss value and, per solution,
/// `d loss / d zc_logprob` for the backward pass.
#[derive(Debug, Clone)]
pub struct MseLossOutput {
    pub loss: f64,
    pub coeffs: Vec<f64>,
    pub w_correct: f64,
    pub w_incorrect: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Class-level re-weighted MSE loss over one optimization step's pooled
/// batch. With both classes present the weights are
/// `w_c = (N_c + N_i) / (2 N_c)` and `w_i = (N_c + N_i) / (2 N_i)`;
/// one-class batches use weight 1 for the present class.
pub fn mse_loss_reweighted(batch: &[ScoredSolution], cfg: &SelfRewardConfig) -> Result<MseLossOutput> {
    if batch.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let n = batch.len();
    let n_correct = batch.iter().filter(|s| s.r_v == 1.0).count();
    let n_incorrect = n - n_correct;
    let (w_correct, w_incorrect) = if n_correct > 0 && n_incorrect > 0 {
        (
            n as f64 / (2.0 * n_correct as f64),
            n as f64 / (2.0 * n_incorrect as f64),
        )
    } else {
        (1.0, 1.0)
    };
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(n);
    for s in batch {
        let w = if s.r_v == 1.0 { w_correct } else { w_incorrect };
        let err = s.r_s - s.r_v;
        loss += inv_n * w * err * err;
        coeffs.push(inv_n * 2.0 * w * cfg.beta_v * err);
    }
    Ok(MseLossOutput {
        loss,
        coeffs,
        w_correct,
        w_incorrect,
        n_correct,
        n_incorrect,
    })
}

/// Input to the SFT comparison loss: the verifier label and the policy's
/// log-probability of the label's target token (ZC for correct solutions,
/// the PAD stand-in for incorrect ones).
#[derive(Debug, Clone, Copy)]
pub struct SftScored {
    pub r_v: f64,
    pub target_logprob: f64,
}

/// The target token the SFT loss maximizes for a given verifier label.
pub fn sft_target(r_v: f64) -> TokenId {
    if r_v == 1.0 {
        vocab::ZC
    } else {
        vocab::PAD
    }
}

/// Supervised fine-tuning comparison loss: mean negative log-likelihood of
/// the label's target token. Returns the loss and, per solution,
/// `d loss / d target_logprob`.
pub fn sft_loss(batch: &[SftScored]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let loss = -batch.iter().map(|s| s.target_logprob).sum::<f64>() * inv_n;
    let coeffs = vec![-inv_n; batch.len()];
    Ok((loss, coeffs))
}

/// The partition function of the closed-form verification solution for one
/// context, from the reference probabilities of the two label tokens:
/// `Z = (1 - p_c - p_i) + (p_c + p_i) * exp(1 / beta_v)`.
pub fn partition_z(p_c: f64, p_i: f64, beta_v: f64) -> f64 {
    (1.0 - p_c - p_i) + (p_c + p_i) * (1.0 / beta_v).exp()
}

/// Result of auditing `log Z` over a set of contexts.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionAudit {
    pub max_abs_log_z: f64,
    pub z_values: Vec<f64>,
    pub n_contexts: usize,
    pub pass: bool,
}

/// Computes the exact partition function per context from the full
/// reference next-token distribution and checks that discarding `log Z`
/// is justified (`max |log Z| < 1e-4`).
pub fn partition_audit(
    reference: &Policy,
    contexts: &[Vec<TokenId>],
    beta_v: f64,
) -> Result<PartitionAudit> {
    if contexts.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let mut z_values = Vec::with_capacity(contexts.len());
    let mut max_abs_log_z = 0.0f64;
    for ctx in contexts {
        let dist = reference.next_token_logdist(ctx)?;
        let p_c = dist[vocab::ZC].exp();
        let p_i = dist[vocab::PAD].exp();
        let z = partition_z(p_c, p_i, beta_v);
        max_abs_log_z = max_abs_log_z.max(z.ln().abs());
        z_values.push(z);
    }
    Ok(PartitionAudit {
        max_abs_log_z,
        n_contexts: contexts.len(),
        pass: max_abs_log_z < PARTITION_TOL,
        z_values,
    })
}

/// The multi-token score formula given the `M` conditional ZC
/// log-probabilities: `beta_v * (sum - M * c_ref)`.
pub fn multi_token_from_logprobs(logprobs: &[f64], c_ref: f64, beta_v: f64) -> f64 {
    beta_v * (logprobs.iter().sum::<f64>() - logprobs.len() as f64 * c_ref)
}

/// Self-rewarding score accumulated over `m` consecutive ZC inferences:
/// the k-th term conditions on the context extended by k-1 ZC tokens.
/// `m = 1` reduces exactly to [`self_reward_score`].
pub fn multi_token_score(
    policy: &Policy,
    p: &Problem,
    sol: &Solution,
    cfg: &SelfRewardConfig,
    m: usize,
) -> Result<f64> {
    assert!(m >= 1);
    let mut ctx = score_context(p, sol, ScorePosition::AfterFinal);
    if ctx.len() + m - 1 > policy.arch.max_seq_len {
        return Err(LaserError::CapacityExceeded {
            len: ctx.len() + m - 1,
            max: policy.arch.max_seq_len,
        });
    }
    let mut logprobs = Vec::with_capacity(m);
    for step in 0..m {
        logprobs.push(policy.next_logprob_of(&ctx, cfg.zc)?);
        if step + 1 < m {
            ctx.push(cfg.zc);
        }
    }
    Ok(multi_token_from_logprobs(&logprobs, cfg.c_ref, cfg.beta_v))
}

/// Zero-extra-inference variant: reads the ZC log-probability at the
/// position that emitted the final (EOS) token, against its own constant
/// `c_ref_prime`. Requires a terminated solution.
pub fn eos_position_score(
    policy: &Policy,
    p: &Problem,
    sol: &Solution,
    cfg: &SelfRewardConfig,
    c_ref_prime: f64,
) -> Result<f64> {
    if !sol.terminated {
        return Err(LaserError::NotTerminated);
    }
    let ctx = score_context(p, sol, ScorePosition::FinalEmission);
    let lp = policy.next_logprob_of(&ctx, cfg.zc)?;
    Ok(score_from_logprob(lp, c_ref_prime, cfg.beta_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Arch, Policy, RESERVED_BIAS};
    use crate::rng::{domain, stream};
    use crate::task::{gen_problem, perfect_solution};
    use proptest::prelude::*;

    fn test_cfg() -> SelfRewardConfig {
        SelfRewardConfig {
            beta_v: 0.1,
            alpha: 0.1,
            c_ref: -23.0,
            zc: vocab::ZC,
            use_exact_ref: false,
        }
    }

    fn sample_pairs(reference: &Policy, n: usize) -> Vec<(Problem, Solution)> {
        (0..n)
            .map(|i| {
                let p = gen_problem(i as u64);
                let mut rng = stream(123, domain::CREF, i as u64, 0);
                let (sol, _) = reference.sample_sequence(&p.prompt, 8, &mut rng).unwrap();
                (p, sol)
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(test_cfg().validate().is_ok());
        let mut bad = test_cfg();
        bad.beta_v = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = test_cfg();
        bad.c_ref = -10.0; // -10 + 10 = 0, not < -2
        assert!(bad.validate().is_err());
        let mut bad = test_cfg();
        bad.alpha = -0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn score_formula_examples() {
        assert!((score_from_logprob(-13.0, -23.0, 0.1) - 1.0).abs() < 1e-12);
        assert_eq!(score_from_logprob(-23.0, -23.0, 0.1), 0.0);
        assert!((score_from_logprob(-23.0 + 2.5, -23.0, 0.2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn estimate_cref_single_pair() {
        let reference = Policy::init(Arch::default(), 0);
        let pairs = sample_pairs(&reference, 1);
        let est = estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::AfterFinal).unwrap();
        let ctx = score_context(&pairs[0].0, &pairs[0].1, ScorePosition::AfterFinal);
        let direct = reference.next_logprob_of(&ctx, vocab::ZC).unwrap();
        assert_eq!(est.mean.to_bits(), direct.to_bits());
        assert_eq!(est.std, 0.0);
        assert!(estimate_cref(&reference, &[], vocab::ZC, ScorePosition::AfterFinal).is_err());
    }

    #[test]
    fn estimate_cref_shipped_init_magnitude() {
        // near-uniform logits with the -25 reserved bias put the mean close
        // to -25 - ln(14) with a tiny spread, the toy analog of the
        // magnitudes reported for unused special tokens in real models
        let reference = Policy::init(Arch::default(), 1);
        let pairs = sample_pairs(&reference, 300);
        let est = estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::AfterFinal).unwrap();
        let expected = RESERVED_BIAS - 14.0f64.ln();
        assert!(
            (est.mean - expected).abs() < 0.5,
            "mean {} vs expected {expected}",
            est.mean
        );
        assert!(est.mean > -30.0 && est.mean < -24.0);
        assert!(est.std < 0.5, "std {}", est.std);
    }

    #[test]
    fn self_reward_score_is_composition_of_forward_and_formula() {
        let policy = Policy::init(Arch::default(), 2);
        let cfg = test_cfg();
        let p = gen_problem(7);
        let sol = perfect_solution(&p);
        let (r_s, lp) = self_reward_score(&policy, &p, &sol, &cfg, None).unwrap();
        let ctx = score_context(&p, &sol, ScorePosition::AfterFinal);
        let direct = policy.next_logprob_of(&ctx, vocab::ZC).unwrap();
        assert_eq!(lp.to_bits(), direct.to_bits());
        assert_eq!(
            r_s.to_bits(),
            score_from_logprob(direct, cfg.c_ref, cfg.beta_v).to_bits()
        );
    }

    #[test]
    fn exact_ref_equals_constant_when_reference_is_constant() {
        let policy = Policy::init(Arch::default(), 2);
        let reference = Policy::init(Arch::default(), 3);
        let mut cfg = test_cfg();
        cfg.use_exact_ref = true;
        let p = gen_problem(7);
        let sol = perfect_solution(&p);
        assert!(self_reward_score(&policy, &p, &sol, &cfg, None).is_err());
        let (r_s, lp) = self_reward_score(&policy, &p, &sol, &cfg, Some(&reference)).unwrap();
        let ctx = score_context(&p, &sol, ScorePosition::AfterFinal);
        let ref_lp = reference.next_logprob_of(&ctx, vocab::ZC).unwrap();
        assert_eq!(r_s.to_bits(), (cfg.beta_v * (lp - ref_lp)).to_bits());
    }

    fn scored(r_v: f64, r_s: f64) -> ScoredSolution {
        ScoredSolution {
            r_v,
            r_s,
            zc_logprob: 0.0,
        }
    }

    #[test]
    fn mse_weights_three_one_split() {
        let cfg = test_cfg();
        let batch = [
            scored(1.0, 0.9),
            scored(1.0, 0.8),
            scored(1.0, 1.1),
            scored(0.0, 0.3),
        ];
        let out = mse_loss_reweighted(&batch, &cfg).unwrap();
        assert!((out.w_correct - 4.0 / 6.0).abs() < 1e-12);
        assert!((out.w_incorrect - 2.0).abs() < 1e-12);
        // weight identity w_c * N_c + w_i * N_i = N_c + N_i
        let identity = out.w_correct * 3.0 + out.w_incorrect * 1.0;
        assert!((identity - 4.0).abs() < 1e-12);
        // direct evaluation of the re-weighted sum
        let expected = (4.0 / 6.0 * (0.01 + 0.04 + 0.01) + 2.0 * 0.09) / 4.0;
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn mse_balanced_reduces_to_plain_mse() {
        let cfg = test_cfg();
        let batch = [
            scored(1.0, 0.7),
            scored(0.0, 0.4),
            scored(1.0, 1.2),
            scored(0.0, -0.1),
        ];
        let out = mse_loss_reweighted(&batch, &cfg).unwrap();
        assert_eq!(out.w_correct, 1.0);
        assert_eq!(out.w_incorrect, 1.0);
        let plain: f64 = batch
            .iter()
            .map(|s| (s.r_s - s.r_v) * (s.r_s - s.r_v))
            .sum::<f64>()
            / 4.0;
        assert!((out.loss - plain).abs() < 1e-12);
    }

    #[test]
    fn mse_perfect_fit_is_zero() {
        let cfg = test_cfg();
        let batch = [scored(1.0, 1.0), scored(0.0, 0.0), scored(1.0, 1.0)];
        let out = mse_loss_reweighted(&batch, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn mse_one_class_uses_unit_weight() {
        let cfg = test_cfg();
        let out = mse_loss_reweighted(&[scored(1.0, 0.5), scored(1.0, 0.9)], &cfg).unwrap();
        assert_eq!(out.w_correct, 1.0);
        assert_eq!(out.n_incorrect, 0);
        assert!(mse_loss_reweighted(&[], &cfg).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        // full chain: L(theta) through the score; analytic gradient via
        // policy.backward with the emitted coefficients on the ZC position
        let arch = Arch {
            embed_dim: 4,
            hidden_dim: 8,
            context_window: 4,
            vocab_size: vocab::SIZE,
            max_seq_len: 32,
        };
        let policy = Policy::init(arch, 5);
        let cfg = test_cfg();
        let problems: Vec<Problem> = (0..4).map(gen_problem).collect();
        let sols: Vec<Solution> = problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream(9, domain::ROLLOUT, i as u64, 0);
                policy.sample_sequence(&p.prompt, 6, &mut rng).unwrap().0
            })
            .collect();
        let rvs: Vec<f64> = problems
            .iter()
            .zip(&sols)
            .map(|(p, s)| crate::task::verify(p, s))
            .collect();

        let loss_of = |pol: &Policy| -> f64 {
            let batch: Vec<ScoredSolution> = problems
                .iter()
                .zip(&sols)
                .zip(&rvs)
                .map(|((p, s), &r_v)| {
                    let (r_s, lp) = self_reward_score(pol, p, s, &cfg, None).unwrap();
                    ScoredSolution {
                        r_v,
                        r_s,
                        zc_logprob: lp,
                    }
                })
                .collect();
            mse_loss_reweighted(&batch, &cfg).unwrap().loss
        };

        let batch: Vec<ScoredSolution> = problems
            .iter()
            .zip(&sols)
            .zip(&rvs)
            .map(|((p, s), &r_v)| {
                let (r_s, lp) = self_reward_score(&policy, p, s, &cfg, None).unwrap();
                ScoredSolution {
                    r_v,
                    r_s,
                    zc_logprob: lp,
                }
            })
            .collect();
        let out = mse_loss_reweighted(&batch, &cfg).unwrap();
        let mut seqs: Vec<Vec<TokenId>> = Vec::new();
        let mut coeffs: Vec<Vec<f64>> = Vec::new();
        for ((p, s), &c) in problems.iter().zip(&sols).zip(out.coeffs.iter()) {
            let mut ctx = score_context(p, s, ScorePosition::AfterFinal);
            ctx.push(vocab::ZC);
            let mut cs = vec![0.0; ctx.len()];
            *cs.last_mut().unwrap() = c;
            seqs.push(ctx);
            coeffs.push(cs);
        }
        let pairs: Vec<(&[TokenId], &[f64])> = seqs
            .iter()
            .zip(coeffs.iter())
            .map(|(s, c)| (s.as_slice(), c.as_slice()))
            .collect();
        let analytic = policy.backward(&pairs).unwrap();

        let h = 1e-5;
        let mut probe = policy.clone();
        let mut max_rel: f64 = 0.0;
        for i in 0..probe.theta.len() {
            let saved = probe.theta[i];
            probe.theta[i] = saved + h;
            let plus = loss_of(&probe);
            probe.theta[i] = saved - h;
            let minus = loss_of(&probe);
            probe.theta[i] = saved;
            let numeric = (plus - minus) / (2.0 * h);
            let rel =
                (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(crate::policy::GRAD_CHECK_FLOOR);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn sft_loss_examples() {
        let (loss, coeffs) = sft_loss(&[SftScored {
            r_v: 1.0,
            target_logprob: -23.0,
        }])
        .unwrap();
        assert!((loss - 23.0).abs() < 1e-12);
        assert_eq!(coeffs, vec![-1.0]);

        let (loss, coeffs) = sft_loss(&[
            SftScored {
                r_v: 1.0,
                target_logprob: -23.0,
            },
            SftScored {
                r_v: 0.0,
                target_logprob: -1.0,
            },
        ])
        .unwrap();
        assert!((loss - 12.0).abs() < 1e-12);
        assert_eq!(coeffs, vec![-0.5, -0.5]);
        assert_eq!(sft_target(1.0), vocab::ZC);
        assert_eq!(sft_target(0.0), vocab::PAD);
        assert!(sft_loss(&[]).is_err());
    }

    #[test]
    fn partition_z_closed_forms() {
        // p_c = p_i = e^{-23}, beta_v = 0.1: Z = 1 + 2 e^{-23} (e^{10} - 1)
        let p = (-23.0f64).exp();
        let z = partition_z(p, p, 0.1);
        let expected = 1.0 + 2.0 * p * (10.0f64.exp() - 1.0);
        assert!((z - expected).abs() < 1e-15);
        // 2 e^{-23} e^{10} = 2 e^{-13} ~ 4.5e-6, comfortably inside the
        // 1e-4 audit tolerance
        assert!(z.ln() > 4.0e-6 && z.ln() < 5.0e-6, "log Z = {}", z.ln());

        assert_eq!(partition_z(0.0, 0.0, 0.1), 1.0);

        // uniform reference: the audit must fail decisively
        let z_uniform = partition_z(1.0 / 16.0, 1.0 / 16.0, 0.1);
        assert!((z_uniform - 2754.0).abs() < 1.0, "Z = {z_uniform}");
        assert!(z_uniform.ln().abs() > PARTITION_TOL);
    }

    fn audit_contexts(reference: &Policy, n: usize) -> Vec<Vec<TokenId>> {
        sample_pairs(reference, n)
            .iter()
            .map(|(p, s)| score_context(p, s, ScorePosition::AfterFinal))
            .collect()
    }

    #[test]
    fn partition_audit_passes_on_shipped_init() {
        let reference = Policy::init(Arch::default(), 11);
        let contexts = audit_contexts(&reference, 100);
        let audit = partition_audit(&reference, &contexts, 0.1).unwrap();
        assert!(audit.pass, "max |log Z| = {}", audit.max_abs_log_z);
        assert_eq!(audit.n_contexts, 100);
    }

    #[test]
    fn partition_audit_fails_on_uniform_reference() {
        let uniform = Policy::zeros(Arch::default());
        let helper = Policy::init(Arch::default(), 11);
        let contexts = audit_contexts(&helper, 20);
        let audit = partition_audit(&uniform, &contexts, 0.1).unwrap();
        assert!(!audit.pass);
        assert!(audit.z_values.iter().all(|&z| z > 100.0));
    }

    #[test]
    fn multi_token_m1_is_bitwise_self_reward() {
        let policy = Policy::init(Arch::default(), 2);
        let cfg = test_cfg();
        for seed in 0..20 {
            let p = gen_problem(seed);
            let mut rng = stream(2, domain::ROLLOUT, seed, 1);
            let (sol, _) = policy.sample_sequence(&p.prompt, 8, &mut rng).unwrap();
            let (r_s, _) = self_reward_score(&policy, &p, &sol, &cfg, None).unwrap();
            let m1 = multi_token_score(&policy, &p, &sol, &cfg, 1).unwrap();
            assert_eq!(m1.to_bits(), r_s.to_bits());
        }
    }

    #[test]
    fn multi_token_formula_and_larger_m() {
        // both conditional log-probs equal to c_ref -> exactly 0
        assert_eq!(multi_token_from_logprobs(&[-23.0, -23.0], -23.0, 0.1), 0.0);

        let policy = Policy::init(Arch::default(), 2);
        let cfg = test_cfg();
        let p = gen_problem(3);
        let sol = perfect_solution(&p);
        let m3 = multi_token_score(&policy, &p, &sol, &cfg, 3).unwrap();
        assert!(m3.is_finite());

        // capacity: the final context is |x ++ y| + m - 1 tokens
        let cap = policy.arch.max_seq_len;
        let too_many = cap + 2;
        assert!(matches!(
            multi_token_score(&policy, &p, &sol, &cfg, too_many),
            Err(LaserError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn eos_position_score_basics() {
        let policy = Policy::init(Arch::default(), 2);
        let cfg = test_cfg();
        let p = gen_problem(3);
        let sol = perfect_solution(&p);
        // policy equals reference: score is exactly zero against the
        // context's own reference log-probability
        let ctx = score_context(&p, &sol, ScorePosition::FinalEmission);
        let own = policy.next_logprob_of(&ctx, vocab::ZC).unwrap();
        assert_eq!(eos_position_score(&policy, &p, &sol, &cfg, own).unwrap(), 0.0);

        let truncated = Solution::from_response(vec![7, 7, 7]);
        assert!(matches!(
            eos_position_score(&policy, &p, &truncated, &cfg, -28.0),
            Err(LaserError::NotTerminated)
        ));
    }

    #[test]
    fn pre_eos_constant_differs_from_post_eos_constant() {
        // the final-emission position has its own reference constant
        let reference = Policy::init(Arch::default(), 1);
        let pairs = sample_pairs(&reference, 100);
        let after = estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::AfterFinal).unwrap();
        let emitting =
            estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::FinalEmission).unwrap();
        assert!(after.mean.is_finite() && emitting.mean.is_finite());
        assert!(emitting.std < 0.5);
    }

    proptest! {
        #[test]
        fn score_is_affine_increasing_in_logprob(
            lp1 in -40.0f64..-1.0,
            delta in 0.001f64..20.0,
            beta_v in 0.01f64..1.0,
            c_ref in -30.0f64..-15.0,
        ) {
            let a = score_from_logprob(lp1, c_ref, beta_v);
            let b = score_from_logprob(lp1 + delta, c_ref, beta_v);
            prop_assert!(b > a);
            // slope is beta_v
            prop_assert!(((b - a) / delta - beta_v).abs() < 1e-9);
        }

        #[test]
        fn mse_is_permutation_invariant(
            rvs in proptest::collection::vec(0u8..2, 2..12),
            seed in 0u64..500,
        ) {
            use rand::seq::SliceRandom;
            use rand::Rng;
            let cfg = test_cfg();
            let mut rng = stream(seed, domain::DIAGNOSE, 1, 0);
            let batch: Vec<ScoredSolution> = rvs
                .iter()
                .map(|&v| scored(f64::from(v), rng.random_range(-0.5..1.5)))
                .collect();
            let mut shuffled = batch.clone();
            shuffled.shuffle(&mut rng);
            let a = mse_loss_reweighted(&batch, &cfg).unwrap();
            let b = mse_loss_reweighted(&shuffled, &cfg).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.abs().max(1.0));
        }

        #[test]
        fn weight_identity_holds_for_random_splits(
            rvs in proptest::collection::vec(0u8..2, 2..40),
        ) {
            let cfg = test_cfg();
            let batch: Vec<ScoredSolution> =
                rvs.iter().map(|&v| scored(f64::from(v), 0.5)).collect();
            let out = mse_loss_reweighted(&batch, &cfg).unwrap();
            if out.n_correct > 0 && out.n_incorrect > 0 {
                let lhs = out.w_correct * out.n_correct as f64
                    + out.w_incorrect * out.n_incorrect as f64;
                prop_assert!((lhs - batch.len() as f64).abs() < 1e-9);
            }
        }
    }
}
