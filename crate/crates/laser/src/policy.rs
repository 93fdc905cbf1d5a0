//! Compact autoregressive policy with exact analytic gradients.
//!
//! The network embeds each token, concatenates the last `context_window`
//! embeddings (zero vectors for missing history), applies one tanh hidden
//! layer, and produces next-token logits with a per-token output bias. All
//! arithmetic is in `f64` so the analytic backward pass can be held to
//! finite differences at tight tolerances.
//!
//! The reserved tokens ZC and PAD start with an output bias of -25 so the
//! freshly initialized reference assigns them near-zero probability, the
//! same property real pretrained models have for unused special tokens.
//! That precondition is audited (see `selfreward::partition_audit`), not
//! assumed.

use crate::error::{LaserError, Result};
use crate::rng::{domain, stream};
use crate::task::{vocab, Solution, TokenId};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Embedding initialization scale.
pub const EMBED_INIT_STD: f64 = 0.3;
/// Initial output bias for the reserved (never-generated) tokens ZC and PAD.
pub const RESERVED_BIAS: f64 = -25.0;

/// Architecture descriptor. `context_window` bounds the conditioning
/// history; `max_seq_len` is the hard capacity for any single sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            embed_dim: 16,
            hidden_dim: 64,
            context_window: 8,
            vocab_size: vocab::SIZE,
            max_seq_len: 64,
        }
    }
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    pub fn n_params(&self) -> usize {
        self.off_b2() + self.vocab_size
    }

    fn off_embed(&self) -> usize {
        0
    }
    fn off_w1(&self) -> usize {
        self.off_embed() + self.vocab_size * self.embed_dim
    }
    fn off_b1(&self) -> usize {
        self.off_w1() + self.hidden_dim * self.input_dim()
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden_dim
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.vocab_size * self.hidden_dim
    }
}

/// Per-position log-probabilities of the realized tokens, with the full
/// next-token log-distributions optionally retained.
#[derive(Debug, Clone)]
pub struct LogProbTrace {
    pub logprobs: Vec<f64>,
    pub dists: Option<Vec<Vec<f64>>>,
    pub total_logprob: f64,
}

/// Policy parameters: a flat `f64` vector plus the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub arch: Arch,
    pub theta: Vec<f64>,
    pub version: u64,
}

/// Finite-difference agreement report from [`Policy::grad_check`].
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub probes: usize,
    pub step: f64,
    /// Set when the agreement is too loose to certify the gradient,
    /// e.g. because the probe step was too large.
    pub degraded: bool,
}

/// Relative error above which a grad-check report is flagged degraded.
pub const GRAD_CHECK_DEGRADED: f64 = 1e-3;

/// Denominator floor for the finite-difference relative error: coordinates
/// whose analytic and numeric gradients are both below this magnitude are
/// dominated by central-difference roundoff (~1e-10 absolute for O(10)
/// objectives) rather than by gradient defects.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

const GRAD_CHECK_SEED: u64 = 0x6772_6164;

impl Policy {
    /// Gaussian-initialized policy (1/sqrt(fan-in) linear layers) with the
    /// reserved-token bias applied.
    pub fn init(arch: Arch, run_seed: u64) -> Self {
        let mut rng = stream(run_seed, domain::INIT, 0, 0);
        let embed = Normal::new(0.0, EMBED_INIT_STD).unwrap();
        let w1 = Normal::new(0.0, 1.0 / (arch.input_dim() as f64).sqrt()).unwrap();
        let w2 = Normal::new(0.0, 1.0 / (arch.hidden_dim as f64).sqrt()).unwrap();
        let mut theta = vec![0.0; arch.n_params()];
        for v in theta[arch.off_embed()..arch.off_w1()].iter_mut() {
            *v = embed.sample(&mut rng);
        }
        for v in theta[arch.off_w1()..arch.off_b1()].iter_mut() {
            *v = w1.sample(&mut rng);
        }
        for v in theta[arch.off_w2()..arch.off_b2()].iter_mut() {
            *v = w2.sample(&mut rng);
        }
        let off_b2 = arch.off_b2();
        theta[off_b2 + vocab::ZC] = RESERVED_BIAS;
        theta[off_b2 + vocab::PAD] = RESERVED_BIAS;
        Policy {
            arch,
            theta,
            version: 0,
        }
    }

    /// All-zero parameters: an exactly uniform next-token distribution.
    /// Used as the negative control for the partition audit.
    pub fn zeros(arch: Arch) -> Self {
        Policy {
            theta: vec![0.0; arch.n_params()],
            arch,
            version: 0,
        }
    }

    pub fn from_theta(arch: Arch, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), arch.n_params());
        Policy {
            arch,
            theta,
            version: 0,
        }
    }

    fn check_seq(&self, seq: &[TokenId]) -> Result<()> {
        if seq.len() > self.arch.max_seq_len {
            return Err(LaserError::CapacityExceeded {
                len: seq.len(),
                max: self.arch.max_seq_len,
            });
        }
        for &t in seq {
            if t >= self.arch.vocab_size {
                return Err(LaserError::TokenOutOfRange {
                    id: t,
                    vocab: self.arch.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Right-aligns the last `context_window` tokens of `ctx` into the
    /// input vector; missing history slots stay zero.
    fn fill_input(&self, ctx: &[TokenId], x: &mut [f64]) {
        let a = &self.arch;
        x.fill(0.0);
        let w = a.context_window;
        let used = ctx.len().min(w);
        let tail = &ctx[ctx.len() - used..];
        for (k, &tok) in tail.iter().enumerate() {
            let slot = w - used + k;
            let src = a.off_embed() + tok * a.embed_dim;
            x[slot * a.embed_dim..(slot + 1) * a.embed_dim]
                .copy_from_slice(&self.theta[src..src + a.embed_dim]);
        }
    }

    /// Forward pass for one position: hidden activations and log-softmax
    /// next-token distribution given `ctx`.
    fn position_forward(&self, ctx: &[TokenId], x: &mut [f64], h: &mut [f64], logp: &mut [f64]) {
        let a = &self.arch;
        self.fill_input(ctx, x);
        let w1 = &self.theta[a.off_w1()..a.off_b1()];
        let b1 = &self.theta[a.off_b1()..a.off_w2()];
        let in_dim = a.input_dim();
        for (i, hi) in h.iter_mut().enumerate() {
            let row = &w1[i * in_dim..(i + 1) * in_dim];
            let mut z = b1[i];
            for (wv, xv) in row.iter().zip(x.iter()) {
                z += wv * xv;
            }
            *hi = z.tanh();
        }
        let w2 = &self.theta[a.off_w2()..a.off_b2()];
        let b2 = &self.theta[a.off_b2()..];
        for (o, lp) in logp.iter_mut().enumerate() {
            let row = &w2[o * a.hidden_dim..(o + 1) * a.hidden_dim];
            let mut z = b2[o];
            for (wv, hv) in row.iter().zip(h.iter()) {
                z += wv * hv;
            }
            *lp = z;
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logp.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in logp.iter_mut() {
            *v -= lse;
        }
    }

    /// Full next-token log-distribution after `ctx`.
    pub fn next_token_logdist(&self, ctx: &[TokenId]) -> Result<Vec<f64>> {
        self.check_seq(ctx)?;
        let a = &self.arch;
        let mut x = vec![0.0; a.input_dim()];
        let mut h = vec![0.0; a.hidden_dim];
        let mut logp = vec![0.0; a.vocab_size];
        self.position_forward(ctx, &mut x, &mut h, &mut logp);
        Ok(logp)
    }

    /// Log-probability the model assigns to `token` as the next token
    /// after `ctx`. Matches the corresponding entry of a retained trace on
    /// `ctx` extended by one position.
    pub fn next_logprob_of(&self, ctx: &[TokenId], token: TokenId) -> Result<f64> {
        if token >= self.arch.vocab_size {
            return Err(LaserError::TokenOutOfRange {
                id: token,
                vocab: self.arch.vocab_size,
            });
        }
        Ok(self.next_token_logdist(ctx)?[token])
    }

    /// Per-position realized-token log-probabilities over `seq`. Position t
    /// conditions on a sliding window of at most `context_window` previous
    /// tokens; position 0 sees empty history.
    pub fn forward_logprobs(&self, seq: &[TokenId], retain_dists: bool) -> Result<LogProbTrace> {
        self.check_seq(seq)?;
        let a = &self.arch;
        let mut x = vec![0.0; a.input_dim()];
        let mut h = vec![0.0; a.hidden_dim];
        let mut logp = vec![0.0; a.vocab_size];
        let mut logprobs = Vec::with_capacity(seq.len());
        let mut dists = if retain_dists {
            Some(Vec::with_capacity(seq.len()))
        } else {
            None
        };
        for t in 0..seq.len() {
            self.position_forward(&seq[..t], &mut x, &mut h, &mut logp);
            logprobs.push(logp[seq[t]]);
            if let Some(d) = dists.as_mut() {
                d.push(logp.clone());
            }
        }
        let total_logprob = logprobs.iter().sum();
        Ok(LogProbTrace {
            logprobs,
            dists,
            total_logprob,
        })
    }

    /// Ancestral sampling at temperature 1.0 until EOS or `max_len` tokens.
    /// The trace covers the sampled response tokens.
    pub fn sample_sequence<R: Rng>(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        rng: &mut R,
    ) -> Result<(Solution, LogProbTrace)> {
        assert!(max_len >= 1);
        if prompt.len() + max_len > self.arch.max_seq_len {
            return Err(LaserError::CapacityExceeded {
                len: prompt.len() + max_len,
                max: self.arch.max_seq_len,
            });
        }
        self.check_seq(prompt)?;
        let a = &self.arch;
        let mut x = vec![0.0; a.input_dim()];
        let mut h = vec![0.0; a.hidden_dim];
        let mut logp = vec![0.0; a.vocab_size];
        let mut seq = prompt.to_vec();
        let mut logprobs = Vec::new();
        for _ in 0..max_len {
            self.position_forward(&seq, &mut x, &mut h, &mut logp);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = a.vocab_size - 1;
            for (k, &lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    tok = k;
                    break;
                }
            }
            seq.push(tok);
            logprobs.push(logp[tok]);
            if tok == vocab::EOS {
                break;
            }
        }
        let response = seq[prompt.len()..].to_vec();
        let total_logprob = logprobs.iter().sum();
        Ok((
            Solution::from_response(response),
            LogProbTrace {
                logprobs,
                dists: None,
                total_logprob,
            },
        ))
    }

    /// Value of the weighted log-likelihood objective
    /// `sum_seq sum_t coeff_t * log pi(seq_t | seq_<t)`.
    ///
    /// This is the forward-only counterpart of [`Policy::backward`]; tests
    /// difference it numerically to check the analytic gradient.
    pub fn weighted_loglik(&self, batch: &[(&[TokenId], &[f64])]) -> Result<f64> {
        let mut total = 0.0;
        for (seq, coeffs) in batch {
            self.validate_pair(seq, coeffs)?;
            let a = &self.arch;
            let mut x = vec![0.0; a.input_dim()];
            let mut h = vec![0.0; a.hidden_dim];
            let mut logp = vec![0.0; a.vocab_size];
            for (t, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                self.position_forward(&seq[..t], &mut x, &mut h, &mut logp);
                total += c * logp[seq[t]];
            }
        }
        Ok(total)
    }

    fn validate_pair(&self, seq: &[TokenId], coeffs: &[f64]) -> Result<()> {
        self.check_seq(seq)?;
        if seq.len() != coeffs.len() {
            return Err(LaserError::ShapeMismatch(format!(
                "sequence length {} vs coefficient length {}",
                seq.len(),
                coeffs.len()
            )));
        }
        if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(LaserError::NonFinite(format!("coefficient {c}")));
        }
        Ok(())
    }

    /// Exact gradient of the weighted log-likelihood objective with respect
    /// to the flat parameter vector. Positions with a zero coefficient
    /// contribute nothing and are skipped.
    pub fn backward(&self, batch: &[(&[TokenId], &[f64])]) -> Result<Vec<f64>> {
        let a = &self.arch;
        let mut grad = vec![0.0; a.n_params()];
        let in_dim = a.input_dim();
        let mut x = vec![0.0; in_dim];
        let mut h = vec![0.0; a.hidden_dim];
        let mut logp = vec![0.0; a.vocab_size];
        let mut g_logits = vec![0.0; a.vocab_size];
        let mut dh = vec![0.0; a.hidden_dim];
        let mut dx = vec![0.0; in_dim];
        for (seq, coeffs) in batch {
            self.validate_pair(seq, coeffs)?;
            for (t, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let ctx = &seq[..t];
                self.position_forward(ctx, &mut x, &mut h, &mut logp);
                let target = seq[t];
                for (k, g) in g_logits.iter_mut().enumerate() {
                    let p = logp[k].exp();
                    *g = if k == target { c * (1.0 - p) } else { c * (-p) };
                }
                let w2 = &self.theta[a.off_w2()..a.off_b2()];
                {
                    let (gw2, rest) = grad[a.off_w2()..].split_at_mut(a.vocab_size * a.hidden_dim);
                    let gb2 = &mut rest[..a.vocab_size];
                    for (o, &g) in g_logits.iter().enumerate() {
                        gb2[o] += g;
                        let row = &mut gw2[o * a.hidden_dim..(o + 1) * a.hidden_dim];
                        for (rv, hv) in row.iter_mut().zip(h.iter()) {
                            *rv += g * hv;
                        }
                    }
                }
                dh.fill(0.0);
                for (o, &g) in g_logits.iter().enumerate() {
                    let row = &w2[o * a.hidden_dim..(o + 1) * a.hidden_dim];
                    for (dv, wv) in dh.iter_mut().zip(row.iter()) {
                        *dv += g * wv;
                    }
                }
                // through tanh
                for (dv, hv) in dh.iter_mut().zip(h.iter()) {
                    *dv *= 1.0 - hv * hv;
                }
                let w1 = &self.theta[a.off_w1()..a.off_b1()];
                {
                    let (gw1, rest) = grad[a.off_w1()..].split_at_mut(a.hidden_dim * in_dim);
                    let gb1 = &mut rest[..a.hidden_dim];
                    for (i, &dz) in dh.iter().enumerate() {
                        gb1[i] += dz;
                        let row = &mut gw1[i * in_dim..(i + 1) * in_dim];
                        for (rv, xv) in row.iter_mut().zip(x.iter()) {
                            *rv += dz * xv;
                        }
                    }
                }
                dx.fill(0.0);
                for (i, &dz) in dh.iter().enumerate() {
                    let row = &w1[i * in_dim..(i + 1) * in_dim];
                    for (dv, wv) in dx.iter_mut().zip(row.iter()) {
                        *dv += dz * wv;
                    }
                }
                // scatter into embedding rows actually present in the window
                let w = a.context_window;
                let used = ctx.len().min(w);
                let tail = &ctx[ctx.len() - used..];
                for (k, &tok) in tail.iter().enumerate() {
                    let slot = w - used + k;
                    let dst = a.off_embed() + tok * a.embed_dim;
                    let src = &dx[slot * a.embed_dim..(slot + 1) * a.embed_dim];
                    for (gv, dv) in grad[dst..dst + a.embed_dim].iter_mut().zip(src.iter()) {
                        *gv += dv;
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Compares the analytic gradient against central finite differences on
    /// randomly probed coordinates of an internal probe objective.
    pub fn grad_check(&self, probe_count: usize, step: f64) -> GradCheckReport {
        self.grad_check_inner(probe_count, step, |_| {})
    }

    fn grad_check_inner(
        &self,
        probe_count: usize,
        step: f64,
        corrupt: impl Fn(&mut [f64]),
    ) -> GradCheckReport {
        assert!(probe_count >= 1);
        let mut rng = stream(GRAD_CHECK_SEED, domain::DIAGNOSE, 0, 0);
        let a = &self.arch;
        let seq_len = a.max_seq_len.min(10);
        let mut seqs: Vec<Vec<TokenId>> = Vec::new();
        let mut coeffs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..3 {
            seqs.push(
                (0..seq_len)
                    .map(|_| rng.random_range(0..a.vocab_size))
                    .collect(),
            );
            coeffs.push((0..seq_len).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        let batch: Vec<(&[TokenId], &[f64])> = seqs
            .iter()
            .zip(coeffs.iter())
            .map(|(s, c)| (s.as_slice(), c.as_slice()))
            .collect();
        let mut analytic = self.backward(&batch).expect("probe batch is valid");
        corrupt(&mut analytic);

        let mut max_rel_err = 0.0;
        let mut worst_index = 0;
        let mut probe = self.clone();
        let indices = rand::seq::index::sample(&mut rng, a.n_params(), probe_count.min(a.n_params()));
        for i in indices {
            let saved = probe.theta[i];
            probe.theta[i] = saved + step;
            let plus = probe.weighted_loglik(&batch).expect("probe batch is valid");
            probe.theta[i] = saved - step;
            let minus = probe.weighted_loglik(&batch).expect("probe batch is valid");
            probe.theta[i] = saved;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_index = i;
            }
        }
        GradCheckReport {
            max_rel_err,
            worst_index,
            probes: probe_count,
            step,
            degraded: max_rel_err > GRAD_CHECK_DEGRADED,
        }
    }
}
