//! Command-line surface: train / eval / vote / diagnose, plus the run
//! manifest, output-directory locking, and report emission.

use crate::checkpoint;
use crate::diagnostics::{cumulative_implicit_reward, pearson, ref_logprob_stats};
use crate::error::{LaserError, Result};
use crate::inference::{majority_vote, verification_f1, weighted_majority_vote, VoteItem};
use crate::policy::Policy;
use crate::rng::{domain, key, stream};
use crate::selfreward::{estimate_cref, partition_audit, score_context, ScorePosition, ScoredSolution};
use crate::task::{answers_match, gen_problem, vocab, Problem, Solution};
use crate::trainer::{
    config_hash, evaluate, run, LaserConfig, Mode, RolloutRecord, RunOptions, RunSummary,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "laser", about = "RL with last-token self-rewarding on a toy addition task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Grpo,
    Laser,
    LaserNoswa,
    SftBaseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Grpo => Mode::Grpo,
            ModeArg::Laser => Mode::Laser,
            ModeArg::LaserNoswa => Mode::LaserNoSwa,
            ModeArg::SftBaseline => Mode::SftBaseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Partition,
    Implicit,
    Refstats,
    Gradcheck,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run training and write metrics, checkpoints, and rollout logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's run_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "laser")]
        mode: ModeArg,
        /// Continue from a checkpoint written under the same config/mode.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log every step's rollouts (logs are large).
        #[arg(long)]
        full_rollouts: bool,
    },
    /// Sample held-out problems from a checkpoint and report Pass@1 / F1.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config for non-default scoring hyper-parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        problems: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Evaluation seed; defaults to the checkpoint's run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Majority-vote and weighted-majority-vote accuracy over a rollout log.
    Vote {
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated vote sizes, e.g. "1,2,4,8".
        #[arg(long, default_value = "1,2,4,8")]
        k: String,
    },
    /// Run one analytical diagnostic against a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        which: Diagnostic,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Loads and validates a TOML config; unknown keys are field-level errors.
pub fn load_config(path: &Path) -> Result<LaserConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LaserError::Config {
        field: "config".into(),
        msg: format!("{}: {e}", path.display()),
    })?;
    let cfg: LaserConfig = toml::from_str(&text).map_err(|e| LaserError::Config {
        field: "config".into(),
        msg: format!("{}: {e}", path.display()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Run manifest: the effective configuration, its hash, and every artifact
/// the run produced (paths relative to the output directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub run_seed: u64,
    pub config: LaserConfig,
    pub config_hash: String,
    pub status: String,
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
    pub metrics_csv: Option<String>,
    pub checkpoints: Vec<String>,
    pub rollout_log: Option<String>,
    pub cref_estimate: Option<CrefManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrefManifestEntry {
    pub mean: f64,
    pub std: f64,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn rel_name(out_dir: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

/// Exclusive-lock guard on an output directory.
struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    fn acquire(out_dir: &Path) -> Result<OutDirLock> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".laser.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(LaserError::OutDirLocked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    mode: Mode,
    resume: Option<PathBuf>,
    full_rollouts: bool,
) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(seed) = seed {
        cfg.run_seed = seed;
    }
    cfg.validate()?;
    let _lock = OutDirLock::acquire(out_dir)?;
    let started = cfg.record_timing.then(now_unix);
    let opts = RunOptions {
        mode,
        resume,
        full_rollout_log: full_rollouts,
    };
    let outcome = run(&cfg, out_dir, &opts);
    let finished = cfg.record_timing.then(now_unix);
    let manifest_path = out_dir.join("manifest.json");
    match outcome {
        Ok(summary) => {
            let manifest = manifest_for(&cfg, mode, "completed", started, finished, out_dir, Some(&summary));
            write_json(&manifest_path, &manifest)?;
            println!(
                "completed {} steps: metrics {}, final checkpoint {}",
                summary.completed_steps,
                summary.metrics_csv.display(),
                summary.final_checkpoint.display()
            );
            Ok(())
        }
        Err(e) => {
            let status = match &e {
                LaserError::StepAborted { step, .. } => format!("failed at step {step}: {e}"),
                _ => format!("failed: {e}"),
            };
            let manifest = manifest_for(&cfg, mode, &status, started, finished, out_dir, None);
            write_json(&manifest_path, &manifest)?;
            Err(e)
        }
    }
}

fn manifest_for(
    cfg: &LaserConfig,
    mode: Mode,
    status: &str,
    started_unix: Option<u64>,
    finished_unix: Option<u64>,
    out_dir: &Path,
    summary: Option<&RunSummary>,
) -> RunManifest {
    RunManifest {
        mode: mode.as_str().to_string(),
        run_seed: cfg.run_seed,
        config: cfg.clone(),
        config_hash: config_hash(cfg, mode),
        status: status.to_string(),
        started_unix,
        finished_unix,
        metrics_csv: summary.map(|s| rel_name(out_dir, &s.metrics_csv)),
        checkpoints: summary
            .map(|s| s.checkpoints.iter().map(|c| rel_name(out_dir, c)).collect())
            .unwrap_or_default(),
        rollout_log: summary.and_then(|s| s.rollout_log.as_ref().map(|r| rel_name(out_dir, r))),
        cref_estimate: summary.map(|s| CrefManifestEntry {
            mean: s.c_ref,
            std: s.c_ref_std,
        }),
    }
}

fn load_checkpoint_with_config(
    checkpoint_path: &Path,
    config_path: Option<&Path>,
) -> Result<(Policy, checkpoint::CheckpointHeader, LaserConfig)> {
    let (policy, header) = checkpoint::load(checkpoint_path)?;
    let mut cfg = match config_path {
        Some(p) => load_config(p)?,
        None => LaserConfig::default(),
    };
    cfg.c_ref = Some(header.c_ref);
    Ok((policy, header, cfg))
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    out_dir: &Path,
    config_path: Option<&Path>,
    n_problems: usize,
    k: usize,
    seed: Option<u64>,
) -> Result<()> {
    if k == 0 {
        return Err(LaserError::Config {
            field: "k".into(),
            msg: "must be >= 1".into(),
        });
    }
    let (policy, header, cfg) = load_checkpoint_with_config(checkpoint_path, config_path)?;
    let reference = Policy::init(header.arch, header.run_seed);
    let sw = cfg.selfreward(header.c_ref);
    let eval_seed = seed.unwrap_or(header.run_seed);
    std::fs::create_dir_all(out_dir)?;
    let (report, records) = evaluate(
        &policy,
        &reference,
        &sw,
        cfg.score_position(),
        cfg.max_len,
        n_problems,
        k,
        eval_seed,
    )?;
    let rollout_path = out_dir.join("eval_rollouts.jsonl");
    let mut f = std::fs::File::create(&rollout_path)?;
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    write_json(&out_dir.join("eval_report.json"), &report)?;
    println!(
        "pass@1 {:.4}  f1 {}  over {} problems x {} samples",
        report.pass1,
        report
            .f1
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        n_problems,
        k
    );
    Ok(())
}

/// Parses and groups a rollout log by problem, preserving per-problem
/// sample order and rejecting conflicting ground truths.
pub fn read_rollout_log(path: &Path) -> Result<BTreeMap<u64, (String, Vec<RolloutRecord>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut problems: BTreeMap<u64, (String, Vec<RolloutRecord>)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(line).map_err(|e| LaserError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let entry = problems
            .entry(rec.problem_id)
            .or_insert_with(|| (rec.gt.clone(), Vec::new()));
        if entry.0 != rec.gt {
            return Err(LaserError::DuplicateProblem { id: rec.problem_id });
        }
        entry.1.push(rec);
    }
    Ok(problems)
}

#[derive(Debug, Clone, Serialize)]
pub struct VoteRow {
    pub k: usize,
    pub maj_acc: f64,
    pub rm_acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
struct VoteDetail<'a> {
    problem_id: u64,
    k: usize,
    gt: &'a str,
    maj: Option<String>,
    rm: Option<String>,
    maj_correct: bool,
    rm_correct: bool,
}

/// Vote accuracies over the first `k` samples of each problem, for each
/// requested `k`.
pub fn vote_over_log(
    problems: &BTreeMap<u64, (String, Vec<RolloutRecord>)>,
    ks: &[usize],
) -> Result<(Vec<VoteRow>, Vec<serde_json::Value>)> {
    if problems.is_empty() {
        return Err(LaserError::EmptyBatch);
    }
    let max_k = *ks.iter().max().expect("at least one k");
    for (id, (_, recs)) in problems {
        if recs.len() < max_k {
            return Err(LaserError::ShapeMismatch(format!(
                "problem {id} has {} samples, need at least {max_k}",
                recs.len()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for &k in ks {
        let mut maj_hits = 0usize;
        let mut rm_hits = 0usize;
        let mut scored = Vec::new();
        for (id, (gt, recs)) in problems {
            let subset = &recs[..k];
            let items: Vec<VoteItem> = subset
                .iter()
                .map(|r| VoteItem {
                    answer: r.answer.as_deref(),
                    r_s: r.r_s,
                })
                .collect();
            let maj = majority_vote(&items);
            let rm = weighted_majority_vote(&items);
            let maj_correct = maj.as_deref().is_some_and(|a| answers_match(a, gt));
            let rm_correct = rm.as_deref().is_some_and(|a| answers_match(a, gt));
            maj_hits += maj_correct as usize;
            rm_hits += rm_correct as usize;
            for r in subset {
                scored.push(ScoredSolution {
                    r_v: r.r_v,
                    r_s: r.r_s,
                    zc_logprob: 0.0,
                });
            }
            details.push(serde_json::to_value(VoteDetail {
                problem_id: *id,
                k,
                gt,
                maj,
                rm,
                maj_correct,
                rm_correct,
            })?);
        }
        let n = problems.len() as f64;
        let f1 = verification_f1(&scored)?;
        rows.push(VoteRow {
            k,
            maj_acc: maj_hits as f64 / n,
            rm_acc: rm_hits as f64 / n,
            f1: f1.f1_or_present_class(),
        });
    }
    Ok((rows, details))
}

fn parse_ks(spec: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|e| LaserError::Config {
                field: "k".into(),
                msg: format!("bad vote size {s:?}: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(LaserError::Config {
            field: "k".into(),
            msg: "vote sizes must be >= 1".into(),
        });
    }
    Ok(ks)
}

pub fn cmd_vote(rollouts_path: &Path, out_dir: &Path, k_spec: &str) -> Result<()> {
    let ks = parse_ks(k_spec)?;
    let problems = read_rollout_log(rollouts_path)?;
    let (rows, details) = vote_over_log(&problems, &ks)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("vote.csv");
    let mut f = std::fs::File::create(&csv_path)?;
    writeln!(f, "k,maj_acc,rm_acc,f1")?;
    for row in &rows {
        writeln!(f, "{},{},{},{}", row.k, row.maj_acc, row.rm_acc, row.f1)?;
        println!(
            "k={}  maj_acc {:.4}  rm_acc {:.4}  f1 {:.4}",
            row.k, row.maj_acc, row.rm_acc, row.f1
        );
    }
    let detail_path = out_dir.join("vote_details.jsonl");
    let mut f = std::fs::File::create(detail_path)?;
    for d in details {
        serde_json::to_writer(&mut f, &d)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn fresh_pairs(policy: &Policy, max_len: usize, seed: u64, n: usize) -> Result<Vec<(Problem, Solution)>> {
    (0..n as u64)
        .map(|i| {
            let p = gen_problem(key(seed, domain::DIAGNOSE, i, 0));
            let mut rng = stream(seed, domain::DIAGNOSE, i, 1);
            let (sol, _) = policy.sample_sequence(&p.prompt, max_len, &mut rng)?;
            Ok((p, sol))
        })
        .collect()
}

pub fn cmd_diagnose(
    checkpoint_path: &Path,
    out_dir: &Path,
    which: Diagnostic,
    config_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let (policy, header, cfg) = load_checkpoint_with_config(checkpoint_path, config_path)?;
    let reference = Policy::init(header.arch, header.run_seed);
    let seed = seed.unwrap_or(header.run_seed);
    std::fs::create_dir_all(out_dir)?;
    match which {
        Diagnostic::Partition => {
            let pairs = fresh_pairs(&policy, cfg.max_len, seed, 100)?;
            let contexts: Vec<_> = pairs
                .iter()
                .map(|(p, s)| score_context(p, s, ScorePosition::AfterFinal))
                .collect();
            let audit = partition_audit(&reference, &contexts, cfg.beta_v)?;
            let est = estimate_cref(&reference, &pairs, vocab::ZC, ScorePosition::AfterFinal)?;
            let report = serde_json::json!({
                "max_abs_logZ": audit.max_abs_log_z,
                "n_contexts": audit.n_contexts,
                "pass": audit.pass,
                "c_ref": est.mean,
                "c_ref_std": est.std,
            });
            write_json(&out_dir.join("partition_audit.json"), &report)?;
            println!(
                "partition audit: max |log Z| = {:.3e} over {} contexts -> {}",
                audit.max_abs_log_z,
                audit.n_contexts,
                if audit.pass { "pass" } else { "FAIL" }
            );
        }
        Diagnostic::Implicit => {
            // the curve scale is irrelevant to the length-bias diagnostic,
            // so fall back to 1.0 when the run trained without a KL term
            let beta = if cfg.beta > 0.0 { cfg.beta } else { 1.0 };
            let pairs = fresh_pairs(&policy, cfg.max_len, seed, 64)?;
            let csv_path = out_dir.join("implicit_reward.csv");
            let mut f = std::fs::File::create(&csv_path)?;
            writeln!(f, "solution,position,cumulative_value,r_v")?;
            let mut lengths = Vec::new();
            let mut finals = Vec::new();
            for (i, (p, sol)) in pairs.iter().enumerate() {
                let curve = cumulative_implicit_reward(&policy, &reference, p, sol, beta)?;
                for (t, v) in curve.cumulative.iter().enumerate() {
                    writeln!(f, "{i},{t},{v},{}", curve.r_v)?;
                }
                lengths.push(curve.len as f64);
                finals.push(curve.final_value);
            }
            let corr = pearson(&lengths, &finals);
            write_json(
                &out_dir.join("implicit_reward.json"),
                &serde_json::json!({ "pearson_length_final": corr, "n": pairs.len(), "beta": beta }),
            )?;
            println!("implicit reward curves: pearson(length, final) = {corr:.4}");
        }
        Diagnostic::Refstats => {
            let pairs = fresh_pairs(&policy, cfg.max_len, seed, 300)?;
            let zc = ref_logprob_stats(&reference, vocab::ZC, &pairs)?;
            let digit = ref_logprob_stats(&reference, 7, &pairs)?;
            let report = serde_json::json!({
                "zc": {"mean_neg_logprob": zc.mean_neg_logprob, "std": zc.std},
                "digit_7": {"mean_neg_logprob": digit.mean_neg_logprob, "std": digit.std},
                "n_pairs": zc.n,
            });
            write_json(&out_dir.join("refstats.json"), &report)?;
            println!(
                "-log pi_ref: zc {:.3} +/- {:.3}, digit '7' {:.3} +/- {:.3}",
                zc.mean_neg_logprob, zc.std, digit.mean_neg_logprob, digit.std
            );
        }
        Diagnostic::Gradcheck => {
            let report = policy.grad_check(200, 1e-5);
            write_json(&out_dir.join("gradcheck.json"), &report)?;
            println!(
                "gradcheck: max rel err {:.3e} at coordinate {} ({} probes){}",
                report.max_rel_err,
                report.worst_index,
                report.probes,
                if report.degraded { " DEGRADED" } else { "" }
            );
        }
    }
    Ok(())
}

/// Dispatches a parsed command; returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            mode,
            resume,
            full_rollouts,
        } => cmd_train(&config, &out, seed, mode.into(), resume, full_rollouts),
        Command::Eval {
            checkpoint,
            out,
            config,
            problems,
            k,
            seed,
        } => cmd_eval(&checkpoint, &out, config.as_deref(), problems, k, seed),
        Command::Vote { rollouts, out, k } => cmd_vote(&rollouts, &out, &k),
        Command::Diagnose {
            checkpoint,
            out,
            which,
            config,
            seed,
        } => cmd_diagnose(&checkpoint, &out, which, config.as_deref(), seed),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_parse() {
        assert_eq!(parse_ks("1,2,4,8").unwrap(), vec![1, 2, 4, 8]);
        assert_eq!(parse_ks(" 3 ").unwrap(), vec![3]);
        assert!(parse_ks("0").is_err());
        assert!(parse_ks("a").is_err());
    }

    #[test]
    fn missing_config_reports_path_and_usage_error() {
        let err = load_config(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "run_seed = 1\nnot_a_key = 5\n").unwrap();
        let err = load_config(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn conflicting_ground_truth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = RolloutRecord {
            step: 1,
            problem_id: 5,
            prompt_ids: vec![12, 3, 10, 4, 11],
            response_ids: vec![7, 13],
            answer: Some("7".into()),
            gt: "7".into(),
            r_v: 1.0,
            r_s: 0.9,
            total_logprob: -2.0,
            terminated: true,
        };
        let mut b = a.clone();
        b.gt = "8".into();
        let mut text = serde_json::to_string(&a).unwrap();
        text.push('\n');
        text.push_str(&serde_json::to_string(&b).unwrap());
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_rollout_log(&path),
            Err(LaserError::DuplicateProblem { id: 5 })
        ));
    }

    #[test]
    fn malformed_rollout_line_is_line_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = RolloutRecord {
            step: 1,
            problem_id: 5,
            prompt_ids: vec![],
            response_ids: vec![],
            answer: None,
            gt: "7".into(),
            r_v: 0.0,
            r_s: 0.0,
            total_logprob: 0.0,
            terminated: false,
        };
        let text = format!("{}\n{{broken\n", serde_json::to_string(&a).unwrap());
        std::fs::write(&path, text).unwrap();
        match read_rollout_log(&path) {
            Err(LaserError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
