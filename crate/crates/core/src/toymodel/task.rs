//! Coin-flip state tracking.
//!
//! A question reads `<bos> heads [Pk flips|stays .]×n Q`, the rationale
//! writes the coin face after each clause (`heads`/`tails`), and `A:` is
//! followed by the answer: `True` if the last written face is heads.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::AnswerSpace;

pub const BOS: u32 = 0;
pub const HEADS: u32 = 1;
pub const FIRST_NAME: u32 = 2;
pub const NUM_NAMES: u32 = 8;
pub const FLIP: u32 = 10;
pub const STAY: u32 = 11;
pub const DOT: u32 = 12;
pub const QUERY: u32 = 13;
pub const ANS: u32 = 14;
pub const TRUE: u32 = 15;
pub const FALSE: u32 = 16;
pub const TAILS: u32 = 17;
pub const VOCAB_SIZE: usize = 18;

pub fn vocab() -> Vec<String> {
    let mut v = vec!["<bos>".to_string(), "heads".to_string()];
    v.extend((0..NUM_NAMES).map(|i| format!("P{i}")));
    v.extend(["flips", "stays", ".", "Q", "A:", "True", "False", "tails"].map(String::from));
    debug_assert_eq!(v.len(), VOCAB_SIZE);
    v
}

pub fn answer_space() -> AnswerSpace {
    AnswerSpace::true_false(TRUE, FALSE).expect("distinct ids")
}

pub fn label_token(label: usize) -> u32 {
    if label == AnswerSpace::POSITIVE {
        TRUE
    } else {
        FALSE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    /// `<bos> heads` clauses `Q`.
    pub prompt: Vec<u32>,
    /// Reference rationale: the face after each clause.
    pub rationale: Vec<u32>,
    /// Positions of the `.` closing each clause.
    pub step_positions: Vec<u32>,
    pub gold: usize,
}

impl Question {
    pub fn num_clauses(&self) -> usize {
        self.rationale.len()
    }

    /// Prompt, reference rationale and `A:`; the answer token follows.
    pub fn input_tokens(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.rationale);
        t.push(ANS);
        t
    }

    /// Teacher-forcing sequence including the answer token.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut t = self.input_tokens();
        t.push(label_token(self.gold));
        t
    }

    /// Length of the clause block that precedes `Q`.
    pub fn context_len(&self) -> usize {
        self.prompt.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub questions: Vec<Question>,
    pub max_flips: usize,
    pub vocab: Vec<String>,
    pub answer_space: AnswerSpace,
}

/// Generates `n_questions` questions with 1..=`max_flips` clauses each
/// (none when `max_flips` is 0). Labels alternate before shuffling, so they
/// are balanced within one.
pub fn gen_task(seed: u64, n_questions: usize, max_flips: usize) -> Result<SyntheticTask> {
    if n_questions < 2 {
        return Err(Error::InvalidInput("need at least two questions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questions = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let n = if max_flips == 0 { 0 } else { rng.random_range(1..=max_flips) };
        let target = if n == 0 { AnswerSpace::POSITIVE } else { i % 2 };
        let mut actions: Vec<u32> = (0..n).map(|_| if rng.random_bool(0.5) { FLIP } else { STAY }).collect();
        if n > 0 {
            // Fix the last action so the parity hits the target label.
            let before = actions_parity(&actions[..n - 1]);
            let want_odd = target == AnswerSpace::NEGATIVE;
            actions[n - 1] = if before != want_odd { FLIP } else { STAY };
        }
        let mut prompt = vec![BOS, HEADS];
        let mut step_positions = Vec::with_capacity(n);
        for &a in &actions {
            prompt.push(FIRST_NAME + rng.random_range(0..NUM_NAMES));
            prompt.push(a);
            step_positions.push(prompt.len() as u32);
            prompt.push(DOT);
        }
        prompt.push(QUERY);
        let gold = if actions_parity(&actions) { AnswerSpace::NEGATIVE } else { AnswerSpace::POSITIVE };
        let rationale = (1..=n)
            .map(|k| if actions_parity(&actions[..k]) { TAILS } else { HEADS })
            .collect();
        questions.push(Question {
            prompt,
            rationale,
            step_positions,
            gold,
        });
    }
    questions.shuffle(&mut rng);
    Ok(SyntheticTask {
        questions,
        max_flips,
        vocab: vocab(),
        answer_space: answer_space(),
    })
}

/// True when the number of flips is odd.
fn actions_parity(actions: &[u32]) -> bool {
    actions.iter().filter(|&&a| a == FLIP).count() % 2 == 1
}

/// Label implied by a rationale: its last written face (heads when empty).
/// `None` if the rationale contains anything but faces.
pub fn rationale_label(rationale: &[u32]) -> Option<usize> {
    if !rationale.iter().all(|&t| t == HEADS || t == TAILS) {
        return None;
    }
    Some(match rationale.last() {
        Some(&TAILS) => AnswerSpace::NEGATIVE,
        _ => AnswerSpace::POSITIVE,
    })
}
