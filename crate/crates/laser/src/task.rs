//! Synthetic single-digit addition task and its rule-based verifier.
//!
//! Problems are `BOS d1 + d2 =` over a closed 16-token vocabulary and the
//! verifier scores a response 1.0 exactly when its extracted answer equals
//! the ground-truth sum (after leading-zero normalization). Everything here
//! is pure and thread-safe.

use crate::error::{LaserError, Result};
use crate::rng::{domain, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type TokenId = usize;

/// The closed vocabulary: digits, operators, and special tokens.
///
/// `ZC` is reserved and never appears in any generated problem or
/// ground-truth answer; `PAD` is the other never-generated token.
pub mod vocab {
    use super::TokenId;

    pub const SIZE: usize = 16;

    pub const PLUS: TokenId = 10;
    pub const EQUALS: TokenId = 11;
    pub const BOS: TokenId = 12;
    pub const EOS: TokenId = 13;
    pub const PAD: TokenId = 14;
    pub const ZC: TokenId = 15;

    pub fn digit(d: u8) -> TokenId {
        debug_assert!(d < 10);
        d as TokenId
    }

    pub fn is_digit(t: TokenId) -> bool {
        t < 10
    }

    pub fn digit_value(t: TokenId) -> Option<u8> {
        if is_digit(t) {
            Some(t as u8)
        } else {
            None
        }
    }

    pub fn name(t: TokenId) -> &'static str {
        const NAMES: [&str; SIZE] = [
            "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=", "<bos>", "<eos>", "<pad>",
            "<zc>",
        ];
        NAMES.get(t).copied().unwrap_or("<invalid>")
    }
}

/// One addition problem: prompt tokens and the ground-truth answer string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub gt_answer: String,
}

/// A sampled response with its extracted answer.
///
/// `extracted_answer` is present iff the response terminated with EOS and at
/// least one digit immediately precedes that EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub response: Vec<TokenId>,
    pub extracted_answer: Option<String>,
    pub terminated: bool,
}

impl Problem {
    pub fn from_digits(id: u64, d1: u8, d2: u8) -> Self {
        assert!(d1 < 10 && d2 < 10);
        Problem {
            id,
            prompt: vec![
                vocab::BOS,
                vocab::digit(d1),
                vocab::PLUS,
                vocab::digit(d2),
                vocab::EQUALS,
            ],
            gt_answer: (u32::from(d1) + u32::from(d2)).to_string(),
        }
    }

    /// Full token sequence `prompt ++ response`.
    pub fn full_sequence(&self, sol: &Solution) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&sol.response);
        seq
    }
}

impl Solution {
    /// Builds a solution from raw response tokens, deriving the terminated
    /// flag and the extracted answer.
    pub fn from_response(response: Vec<TokenId>) -> Self {
        let terminated = response.contains(&vocab::EOS);
        let extracted_answer = extract_answer(&response);
        Solution {
            response,
            extracted_answer,
            terminated,
        }
    }
}

/// Deterministically maps a seed to a problem with digits uniform over 0-9.
pub fn gen_problem(seed: u64) -> Problem {
    let mut rng = stream(seed, domain::PROBLEM, 0, 0);
    let d1: u8 = rng.random_range(0..10);
    let d2: u8 = rng.random_range(0..10);
    Problem::from_digits(seed, d1, d2)
}

/// Extracts the answer: the maximal run of digit tokens immediately
/// preceding the first EOS. Absent when there is no EOS or no such digit.
pub fn extract_answer(response: &[TokenId]) -> Option<String> {
    let eos_pos = response.iter().position(|&t| t == vocab::EOS)?;
    let mut start = eos_pos;
    while start > 0 && vocab::is_digit(response[start - 1]) {
        start -= 1;
    }
    if start == eos_pos {
        return None;
    }
    Some(
        response[start..eos_pos]
            .iter()
            .map(|&t| char::from(b'0' + t as u8))
            .collect(),
    )
}

fn strip_leading_zeros(s: &str) -> &str {
    let trimmed = s.trim_start_matches('0');
    if trimmed.is_empty() {
        "0"
    } else {
        trimmed
    }
}

/// Answer equality under the verifier's normalization.
pub fn answers_match(a: &str, b: &str) -> bool {
    strip_leading_zeros(a) == strip_leading_zeros(b)
}

/// Rule-based verifier: 1.0 iff the extracted answer equals the ground
/// truth after leading-zero stripping, else 0.0.
pub fn verify(p: &Problem, sol: &Solution) -> f64 {
    match &sol.extracted_answer {
        Some(a) if answers_match(a, &p.gt_answer) => 1.0,
        _ => 0.0,
    }
}

/// The canonical correct solution: ground-truth digits followed by EOS.
pub fn perfect_solution(p: &Problem) -> Solution {
    let mut response: Vec<TokenId> = p
        .gt_answer
        .bytes()
        .map(|b| (b - b'0') as TokenId)
        .collect();
    response.push(vocab::EOS);
    Solution::from_response(response)
}

/// JSONL export record for a problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: u64,
    pub prompt_ids: Vec<TokenId>,
    pub gt: String,
}

impl From<&Problem> for ProblemRecord {
    fn from(p: &Problem) -> Self {
        ProblemRecord {
            id: p.id,
            prompt_ids: p.prompt.clone(),
            gt: p.gt_answer.clone(),
        }
    }
}

/// Serializes problems as JSONL, one record per line.
pub fn export_problems_jsonl<W: std::io::Write>(problems: &[Problem], mut w: W) -> Result<()> {
    for p in problems {
        let rec = ProblemRecord::from(p);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses problems from JSONL, rejecting malformed lines with their number.
pub fn import_problems_jsonl(text: &str) -> Result<Vec<ProblemRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LaserError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prompt_grammar_and_gt() {
        let p = Problem::from_digits(0, 3, 4);
        assert_eq!(
            p.prompt,
            vec![vocab::BOS, 3, vocab::PLUS, 4, vocab::EQUALS]
        );
        assert_eq!(p.gt_answer, "7");
        assert_eq!(Problem::from_digits(1, 0, 0).gt_answer, "0");
        assert_eq!(Problem::from_digits(2, 9, 9).gt_answer, "18");
    }

    #[test]
    fn gen_problem_is_deterministic_and_uniformish() {
        for seed in [0u64, 1, 42, u64::MAX] {
            assert_eq!(gen_problem(seed), gen_problem(seed));
        }
        // all 100 digit pairs reachable
        let mut seen = std::collections::HashSet::new();
        for seed in 0..5000u64 {
            let p = gen_problem(seed);
            seen.insert((p.prompt[1], p.prompt[3]));
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn extract_answer_cases() {
        assert_eq!(extract_answer(&[7, vocab::EOS]), Some("7".into()));
        assert_eq!(extract_answer(&[7]), None); // truncated, no EOS
        assert_eq!(extract_answer(&[vocab::EOS]), None); // empty answer
        assert_eq!(extract_answer(&[1, 8, vocab::EOS]), Some("18".into()));
        assert_eq!(extract_answer(&[0, 7, vocab::EOS]), Some("07".into()));
        // digits must immediately precede EOS
        assert_eq!(extract_answer(&[7, vocab::PLUS, vocab::EOS]), None);
        // only the run before the first EOS counts
        assert_eq!(
            extract_answer(&[3, vocab::EOS, 9, vocab::EOS]),
            Some("3".into())
        );
    }

    #[test]
    fn verify_exact_and_mismatch() {
        let p = Problem::from_digits(0, 3, 4);
        assert_eq!(verify(&p, &Solution::from_response(vec![7, vocab::EOS])), 1.0);
        assert_eq!(verify(&p, &Solution::from_response(vec![8, vocab::EOS])), 0.0);
        assert_eq!(verify(&p, &Solution::from_response(vec![7])), 0.0);
    }

    // Independent oracle for the leading-zero rule: compare as integers.
    fn integer_equal(a: &str, b: &str) -> bool {
        a.parse::<u64>().ok() == b.parse::<u64>().ok()
    }

    #[test]
    fn verify_leading_zero_normalization_matches_integer_oracle() {
        let p = Problem::from_digits(0, 3, 4);
        for resp in [vec![0, 7, vocab::EOS], vec![0, 0, 7, vocab::EOS]] {
            let sol = Solution::from_response(resp);
            let ans = sol.extracted_answer.clone().unwrap();
            assert_eq!(verify(&p, &sol), 1.0);
            assert!(integer_equal(&ans, &p.gt_answer));
        }
        // and the zero case survives stripping
        let pz = Problem::from_digits(1, 0, 0);
        let sol = Solution::from_response(vec![0, 0, vocab::EOS]);
        assert_eq!(verify(&pz, &sol), 1.0);
        assert!(integer_equal("00", "0"));
    }

    #[test]
    fn perfect_solution_always_verifies() {
        for d1 in 0..10u8 {
            for d2 in 0..10u8 {
                let p = Problem::from_digits(u64::from(d1) * 10 + u64::from(d2), d1, d2);
                assert_eq!(verify(&p, &perfect_solution(&p)), 1.0);
            }
        }
    }

    #[test]
    fn problems_jsonl_round_trip() {
        let problems: Vec<Problem> = (0..8).map(gen_problem).collect();
        let mut buf = Vec::new();
        export_problems_jsonl(&problems, &mut buf).unwrap();
        let parsed = import_problems_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed.len(), problems.len());
        for (rec, p) in parsed.iter().zip(&problems) {
            assert_eq!(rec, &ProblemRecord::from(p));
        }
        assert!(import_problems_jsonl("{not json").is_err());
    }

    proptest! {
        #[test]
        fn no_eos_never_verifies(tokens in proptest::collection::vec(0usize..vocab::SIZE, 0..12)) {
            let resp: Vec<TokenId> = tokens.into_iter().filter(|&t| t != vocab::EOS).collect();
            let sol = Solution::from_response(resp);
            prop_assert!(!sol.terminated);
            prop_assert_eq!(sol.extracted_answer.clone(), None);
            let p = Problem::from_digits(0, 3, 4);
            prop_assert_eq!(verify(&p, &sol), 0.0);
        }

        #[test]
        fn extraction_presence_invariant(tokens in proptest::collection::vec(0usize..vocab::SIZE, 0..12)) {
            let sol = Solution::from_response(tokens.clone());
            let eos_pos = tokens.iter().position(|&t| t == vocab::EOS);
            let expect_present = match eos_pos {
                Some(p) if p > 0 => vocab::is_digit(tokens[p - 1]),
                _ => false,
            };
            prop_assert_eq!(sol.extracted_answer.is_some(), expect_present);
            prop_assert_eq!(sol.terminated, eos_pos.is_some());
        }
    }
}
