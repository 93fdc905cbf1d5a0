//! Analytical diagnostics: the cumulative implicit-reward curve (whose
//! final value is length-biased as a sequence score) and reference
//! log-probability statistics for individual tokens.

use crate::error::{LaserError, Result};
use crate::policy::Policy;
use crate::selfreward::{score_context, ScorePosition};
use crate::task::{Problem, Solution, TokenId};
use serde::Serialize;

/// Per-prefix cumulative implicit reward
/// `beta * sum_{i<=t} [log pi(y_i|.) - log pi_ref(y_i|.)]` over the
/// response tokens of one solution.
#[derive(Debug, Clone, Serialize)]
pub struct ImplicitRewardCurve {
    pub cumulative: Vec<f64>,
    pub final_value: f64,
    pub len: usize,
    pub r_v: f64,
}

/// Computes the cumulative implicit-reward curve for a solution.
pub fn cumulative_implicit_reward(
    policy: &Policy,
    reference: &Policy,
    p: &Problem,
    sol: &Solution,
    beta: f64,
) -> Result<ImplicitRewardCurve> {
    let seq = score_context(p, sol, ScorePosition::AfterFinal);
    let t_policy = policy.forward_logprobs(&seq, false)?;
    let t_ref = reference.forward_logprobs(&seq, false)?;
    let start = p.prompt.len();
    let mut cumulative = Vec::with_capacity(sol.response.len());
    let mut acc = 0.0;
    for t in start..seq.len() {
        acc += beta * (t_policy.logprobs[t] - t_ref.logprobs[t]);
        cumulative.push(acc);
    }
    Ok(ImplicitRewardCurve {
        final_value: cumulative.last().copied().unwrap_or(0.0),
        len: cumulative.len(),
        r_v: crate::task::verify(p, sol),
        cumulative,
    })
}

/// Mean and standard deviation of `-log pi_ref(token | x, y)` over sample
/// pairs. The negated-mean convention matches how reference statistics for
/// candidate verification tokens are usually reported.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TokenLogprobStats {
    pub mean_neg_logprob: f64,
    pub std: f64,
    pub n: usize,
}

pub fn ref_logprob_stats(
    reference: &Policy,
    token: TokenId,
    pairs: &[(Problem, Solution)],
) -> Result<TokenLogprobStats> {
    if pairs.len() < 2 {
        return Err(LaserError::ShapeMismatch(format!(
            "ref_logprob_stats needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let est = crate::selfreward::estimate_cref(reference, pairs, token, ScorePosition::AfterFinal)?;
    Ok(TokenLogprobStats {
        mean_neg_logprob: -est.mean,
        std: est.std,
        n: est.n,
    })
}

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Arch;
    use crate::rng::{domain, stream};
    use crate::selfreward::estimate_cref;
    use crate::task::{gen_problem, perfect_solution, vocab};

    #[test]
    fn identical_policies_give_zero_curve() {
        let p = Policy::init(Arch::default(), 4);
        let problem = gen_problem(1);
        let sol = perfect_solution(&problem);
        let curve = cumulative_implicit_reward(&p, &p, &problem, &sol, 0.1).unwrap();
        assert_eq!(curve.len, sol.response.len());
        assert!(curve.cumulative.iter().all(|&v| v == 0.0));
        assert_eq!(curve.r_v, 1.0);
    }

    #[test]
    fn final_value_telescopes_to_total_logprob_difference() {
        let policy = Policy::init(Arch::default(), 4);
        let reference = Policy::init(Arch::default(), 5);
        let problem = gen_problem(2);
        let mut rng = stream(4, domain::ROLLOUT, 2, 0);
        let (sol, _) = policy.sample_sequence(&problem.prompt, 8, &mut rng).unwrap();
        let beta = 0.7;
        let curve =
            cumulative_implicit_reward(&policy, &reference, &problem, &sol, beta).unwrap();

        let seq = problem.full_sequence(&sol);
        let lp_pol = policy.forward_logprobs(&seq, false).unwrap();
        let lp_ref = reference.forward_logprobs(&seq, false).unwrap();
        let start = problem.prompt.len();
        let total_pol: f64 = lp_pol.logprobs[start..].iter().sum();
        let total_ref: f64 = lp_ref.logprobs[start..].iter().sum();
        assert!((curve.final_value - beta * (total_pol - total_ref)).abs() < 1e-10);

        // increments are the single-token log-ratios
        for t in 1..curve.cumulative.len() {
            let inc = curve.cumulative[t] - curve.cumulative[t - 1];
            let direct = beta * (lp_pol.logprobs[start + t] - lp_ref.logprobs[start + t]);
            assert!((inc - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn zc_stats_dominate_digit_stats() {
        let reference = Policy::init(Arch::default(), 6);
        let pairs: Vec<_> = (0..50)
            .map(|i| {
                let p = gen_problem(i);
                let mut rng = stream(6, domain::CREF, i, 0);
                let (sol, _) = reference.sample_sequence(&p.prompt, 8, &mut rng).unwrap();
                (p, sol)
            })
            .collect();
        let zc = ref_logprob_stats(&reference, vocab::ZC, &pairs).unwrap();
        let digit = ref_logprob_stats(&reference, 7, &pairs).unwrap();
        // -25 bias plus log-normalizer, tiny spread
        assert!((zc.mean_neg_logprob - (25.0 + 14.0f64.ln())).abs() < 0.5);
        assert!(zc.std < 0.5);
        // a common token is orders of magnitude more likely
        assert!(digit.mean_neg_logprob < zc.mean_neg_logprob - 10.0);

        // consistency: same computation as the c_ref estimate, negated
        let est = estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::AfterFinal).unwrap();
        assert_eq!((zc.mean_neg_logprob + est.mean).abs(), 0.0);
    }

    #[test]
    fn stats_need_two_pairs_and_identical_pairs_have_zero_std() {
        let reference = Policy::init(Arch::default(), 6);
        let p = gen_problem(0);
        let sol = perfect_solution(&p);
        assert!(ref_logprob_stats(&reference, vocab::ZC, &[(p.clone(), sol.clone())]).is_err());
        let stats =
            ref_logprob_stats(&reference, vocab::ZC, &[(p.clone(), sol.clone()), (p, sol)])
                .unwrap();
        assert_eq!(stats.std, 0.0);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }
}
