//! Next-token training on the rationale and answer positions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{forward, logits_at, loss_and_backward, ToyParams};
use super::task::{label_token, rationale_label, Question, FALSE, HEADS, TAILS, TRUE};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::trace::AnswerSpace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the batch order and the rationale corruption.
    pub seed: u64,
    /// Probability that a training rationale step shows the wrong face.
    pub rationale_noise: f64,
    /// Probability that the answer target is read off the corrupted
    /// rationale; otherwise it is the true outcome of the clauses.
    pub answer_from_rationale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            rationale_noise: 0.2,
            answer_from_rationale: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token loss of each step's batch, before its update.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Positions whose next token is trained: `Q` through `A:`.
fn targets(q: &Question) -> (Vec<u32>, Vec<(usize, u32)>) {
    let full = q.full_sequence();
    let input = full[..full.len() - 1].to_vec();
    let first = q.prompt.len() - 1;
    let t = (first..input.len()).map(|p| (p, full[p + 1])).collect();
    (input, t)
}

/// Mean loss and summed gradient over `batch`, each question weighted
/// equally. The reduction runs in batch order.
fn batch_gradient(params: &ToyParams, batch: &[Question]) -> Result<(f64, Vec<f32>)> {
    let n = batch.len() as f32;
    let parts: Vec<Result<(f64, Vec<f32>)>> = batch
        .par_iter()
        .map(|q| {
            let (input, tg) = targets(q);
            let cache = forward(params, &input)?;
            let mut g = vec![0.0f32; params.data.len()];
            let w = 1.0 / (n * tg.len() as f32);
            let loss = loss_and_backward(params, &cache, &tg, w, &mut g);
            Ok((loss / tg.len() as f64, g))
        })
        .collect();
    let mut grad = vec![0.0f32; params.data.len()];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Two-token argmax at the answer slot with the reference rationale.
pub fn answer_accuracy(params: &ToyParams, questions: &[Question]) -> Result<f64> {
    let hits: Vec<Result<bool>> = questions
        .par_iter()
        .map(|q| {
            let input = q.input_tokens();
            let cache = forward(params, &input)?;
            let logits = logits_at(params, &cache, input.len() - 1);
            let pred = if logits[TRUE as usize] >= logits[FALSE as usize] {
                AnswerSpace::POSITIVE
            } else {
                AnswerSpace::NEGATIVE
            };
            Ok(label_token(pred) == label_token(q.gold))
        })
        .collect();
    let mut n = 0;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / questions.len().max(1) as f64)
}

/// Flips each rationale face with probability `noise`, independently, then
/// with probability `follow` relabels the answer from the result.
fn corrupt<R: Rng>(q: &Question, noise: f64, follow: f64, rng: &mut R) -> Question {
    let mut out = q.clone();
    for t in &mut out.rationale {
        if noise > 0.0 && rng.random_bool(noise) {
            *t = if *t == HEADS { TAILS } else { HEADS };
        }
    }
    if follow > 0.0 && rng.random_bool(follow) {
        out.gold = rationale_label(&out.rationale).unwrap_or(q.gold);
    }
    out
}

/// Adam on shuffled mini-batches; epochs reshuffle with the same stream.
pub fn train_toy(questions: &[Question], init: ToyParams, cfg: &TrainConfig) -> Result<(ToyParams, TrainReport)> {
    if questions.is_empty() {
        return Err(Error::InvalidInput("no training questions".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidInput("batch size and learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.rationale_noise) {
        return Err(Error::InvalidInput(format!("rationale noise {} outside [0, 1)", cfg.rationale_noise)));
    }
    if !(0.0..=1.0).contains(&cfg.answer_from_rationale) {
        return Err(Error::InvalidInput(format!(
            "answer_from_rationale {} outside [0, 1]",
            cfg.answer_from_rationale
        )));
    }
    let mut params = init;
    let mut adam = Adam::new(params.data.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..questions.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(questions.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corrupt(
                &questions[order[cursor]],
                cfg.rationale_noise,
                cfg.answer_from_rationale,
                &mut rng,
            ));
            cursor += 1;
        }
        let (loss, grad) = batch_gradient(&params, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        adam.step(&mut params.data, &grad);
    }
    let train_accuracy = answer_accuracy(&params, questions)?;
    params.train_accuracy = Some(train_accuracy);
    Ok((params, TrainReport { losses, train_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::model::ToyConfig;
    use crate::toymodel::task::gen_task;

    fn tiny() -> ToyConfig {
        ToyConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            max_seq: 32,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn zero_steps_return_init() {
        let task = gen_task(0, 20, 3).unwrap();
        let init = ToyParams::init(tiny()).unwrap();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (p, r) = train_toy(&task.questions, init.clone(), &cfg).unwrap();
        assert_eq!(p.data, init.data);
        assert!(r.losses.is_empty());
    }

    #[test]
    fn loss_descends_and_is_deterministic() {
        let task = gen_task(1, 60, 3).unwrap();
        let init = ToyParams::init(tiny()).unwrap();
        let cfg = TrainConfig { steps: 120, lr: 3e-3, batch_size: 8, seed: 2, ..Default::default() };
        let (a, ra) = train_toy(&task.questions, init.clone(), &cfg).unwrap();
        let late: f64 = ra.losses[100..].iter().sum::<f64>() / 20.0;
        assert!(late < ra.losses[0], "{} -> {late}", ra.losses[0]);
        let (b, _) = train_toy(&task.questions, init, &cfg).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn corruption_relabels() {
        let task = gen_task(5, 200, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flipped = 0;
        let mut steps = 0;
        for q in &task.questions {
            let c = corrupt(q, 0.2, 1.0, &mut rng);
            assert_eq!(c.prompt, q.prompt);
            assert_eq!(Some(c.gold), rationale_label(&c.rationale));
            flipped += c.rationale.iter().zip(&q.rationale).filter(|(a, b)| a != b).count();
            steps += q.rationale.len();
            assert_eq!(corrupt(q, 0.0, 1.0, &mut rng), *q);
            assert_eq!(corrupt(q, 0.2, 0.0, &mut rng).gold, q.gold);
        }
        let rate = flipped as f64 / steps as f64;
        assert!((0.15..0.25).contains(&rate), "{rate}");
    }

    #[test]
    fn divergence_is_reported() {
        let task = gen_task(1, 10, 3).unwrap();
        let mut init = ToyParams::init(tiny()).unwrap();
        // Every sequence starts with token 0, whose embedding this poisons.
        init.data[0] = f32::NAN;
        let cfg = TrainConfig { steps: 3, ..Default::default() };
        match train_toy(&task.questions, init, &cfg) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
