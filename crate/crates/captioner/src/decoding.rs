//! Caption generation: greedy argmax, beam search with optional length
//! normalization, and multinomial sampling (for REINFORCE rollouts).
//!
//! The image is encoded once; each step re-runs the text stack over the full
//! prefix with the cached visual features injected as a constant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CaptionModel, Forward};
use crate::tensor::Tensor;
use crate::vocab;

/// A decoded hypothesis: generated token ids (BOS excluded, EOS included if
/// emitted) and the per-step log-probabilities of the chosen tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub step_log_probs: Vec<f64>,
}

impl Hypothesis {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

/// Encode an image into a plain `V_info` tensor for repeated decoding.
pub fn encode_image(model: &CaptionModel, image: &Tensor) -> Result<Tensor> {
    let mut f = Forward::eval(model);
    let v = f.encode_image(image)?;
    Ok(f.tape.value(v))
}

/// Log-softmax of the next-token logits for a given prefix.
fn step_log_probs(model: &CaptionModel, v_info: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut f = Forward::eval(model);
    let v = f.inject_v_info(v_info)?;
    let out = f.decode_text(v, prefix)?;
    let (rows, vsz) = f.tape.shape(out.logits);
    let row = &f.tape.data(out.logits)[(rows - 1) * vsz..];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|x| x - lse).collect())
}

/// Greedy decoding: at every step take the highest-probability token
/// (lowest id on exact ties). Stops at EOS or the model's length limit.
pub fn greedy_decode(model: &CaptionModel, v_info: &Tensor) -> Result<Hypothesis> {
    let mut prefix = vec![vocab::BOS];
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
    };
    while prefix.len() < model.config.max_text_len {
        let lp = step_log_probs(model, v_info, &prefix)?;
        let (best, best_lp) = argmax(&lp);
        hyp.tokens.push(best);
        hyp.step_log_probs.push(best_lp);
        if best == vocab::EOS {
            break;
        }
        prefix.push(best);
    }
    Ok(hyp)
}

fn argmax(lp: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    (best, lp[best])
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    step_log_probs: Vec<f64>,
    finished: bool,
}

impl Beam {
    fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// Sum log-probability divided by `length^alpha` (alpha 0 = none).
    fn score(&self, alpha: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.log_prob() / len.powf(alpha)
    }
}

/// Beam search. `beam_size == 1` is exactly greedy decoding. Candidates are
/// ranked by length-normalized score; exact ties pick the lexicographically
/// smaller token sequence so results are deterministic.
pub fn beam_decode(
    model: &CaptionModel,
    v_info: &Tensor,
    beam_size: usize,
    length_norm_alpha: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Contract("beam_size must be at least 1".into()));
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        finished: false,
    }];
    for _ in 1..model.config.max_text_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool: Vec<Beam> = Vec::new();
        for b in &beams {
            if b.finished {
                pool.push(b.clone());
                continue;
            }
            let mut prefix = vec![vocab::BOS];
            prefix.extend_from_slice(&b.tokens);
            let lp = step_log_probs(model, v_info, &prefix)?;
            for (tok, &tok_lp) in lp.iter().enumerate() {
                let mut nb = b.clone();
                nb.tokens.push(tok);
                nb.step_log_probs.push(tok_lp);
                nb.finished = tok == vocab::EOS;
                pool.push(nb);
            }
        }
        sort_beams(&mut pool, length_norm_alpha);
        pool.truncate(beam_size);
        beams = pool;
    }
    // anything still unfinished at the length limit competes as-is
    sort_beams(&mut beams, length_norm_alpha);
    let best = beams.into_iter().next().expect("at least one beam");
    Ok(Hypothesis {
        tokens: best.tokens,
        step_log_probs: best.step_log_probs,
    })
}

fn sort_beams(beams: &mut [Beam], alpha: f64) {
    beams.sort_by(|a, b| {
        b.score(alpha)
            .partial_cmp(&a.score(alpha))
            .expect("finite beam scores")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Multinomial sampling from the model distribution, seeded for
/// reproducibility. Used for REINFORCE rollouts.
pub fn sample_decode(model: &CaptionModel, v_info: &Tensor, seed: u64) -> Result<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = vec![vocab::BOS];
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
    };
    while prefix.len() < model.config.max_text_len {
        let lp = step_log_probs(model, v_info, &prefix)?;
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = lp.len() - 1;
        for (i, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if r < acc {
                chosen = i;
                break;
            }
        }
        hyp.tokens.push(chosen);
        hyp.step_log_probs.push(lp[chosen]);
        if chosen == vocab::EOS {
            break;
        }
        prefix.push(chosen);
    }
    Ok(hyp)
}
