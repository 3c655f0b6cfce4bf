use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionTensor, Params, Tape, Token, TokenSequence, EOS};
use crate::error::{Error, Result};

/// Generation stops after this many tokens if no EOS was drawn.
pub const MAX_ANSWER_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub tokens: Vec<u16>,
    /// Answer bytes (EOS excluded), decoded lossily.
    pub text: String,
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn decode_answer(tokens: &[u16]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Samples `k_candidates` continuations of the prompt. Temperature 0 means
/// greedy decoding. Recorded log-probabilities are under the untempered model.
pub fn generate(
    seq: &TokenSequence,
    params: &Params,
    k_candidates: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<CandidateAnswer>> {
    check_sampling(k_candidates, temperature)?;
    let prompt = TokenSequence {
        tokens: seq.prompt_tokens().to_vec(),
        ..seq.clone()
    };
    let prefix = Tape::run(params, &prompt)?;
    (0..k_candidates)
        .map(|c| sample_one(&prefix, seq, params, temperature, seed, c).map(|(cand, _)| cand))
        .collect()
}

/// Like [`generate`], also returning each candidate's attention over the
/// prompt plus all answer tokens but the last (the rows that produced them).
pub fn generate_with_attention(
    seq: &TokenSequence,
    params: &Params,
    k_candidates: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<(CandidateAnswer, AttentionTensor)>> {
    check_sampling(k_candidates, temperature)?;
    let prompt = TokenSequence {
        tokens: seq.prompt_tokens().to_vec(),
        ..seq.clone()
    };
    let prefix = Tape::run(params, &prompt)?;
    (0..k_candidates)
        .map(|c| {
            sample_one(&prefix, seq, params, temperature, seed, c)
                .map(|(cand, tape)| (cand, tape.attention()))
        })
        .collect()
}

fn check_sampling(k_candidates: usize, temperature: f64) -> Result<()> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Precondition(format!("temperature {temperature}")));
    }
    if k_candidates == 0 {
        return Err(Error::Precondition(
            "k_candidates must be at least 1".into(),
        ));
    }
    Ok(())
}

fn sample_one(
    prefix: &Tape,
    seq: &TokenSequence,
    params: &Params,
    temperature: f64,
    seed: u64,
    c: usize,
) -> Result<(CandidateAnswer, Tape)> {
    let mut rng = crate::seeded_rng(seed, c as u64);
    let mut tape = prefix.clone();
    let mut out = CandidateAnswer {
        tokens: Vec::new(),
        text: String::new(),
        per_token_logprob: Vec::new(),
        total_logprob: 0.0,
    };
    loop {
        let logits = tape.logits(params, tape.len() - 1);
        let logp = log_softmax(&logits);
        let next = if temperature == 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
            let mut u: f64 = rng.gen();
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    pick = i;
                    break;
                }
                u -= p;
            }
            pick
        };
        out.tokens.push(next as u16);
        out.per_token_logprob.push(logp[next]);
        if next as u16 == EOS || out.tokens.len() == MAX_ANSWER_TOKENS {
            break;
        }
        tape.push(params, Token::Vocab(next as u16), &seq.patches)?;
    }
    out.total_logprob = out.per_token_logprob.iter().sum();
    out.text = decode_answer(&out.tokens);
    Ok((out, tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
}

/// Teacher-forced log-probability of `answer` after the prompt of `seq`.
pub fn score(seq: &TokenSequence, answer: &[u16], params: &Params) -> Result<Scored> {
    if answer.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    let prompt_len = seq.answer_start;
    let full = TokenSequence {
        tokens: seq.prompt_tokens().to_vec(),
        ..seq.clone()
    }
    .with_answer(&answer[..answer.len() - 1]);
    let tape = Tape::run(params, &full)?;
    let per_token_logprob: Vec<f64> = answer
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax(&tape.logits(params, prompt_len + i - 1))[tok as usize])
        .collect();
    let total_logprob = per_token_logprob.iter().sum();
    Ok(Scored {
        per_token_logprob,
        total_logprob,
    })
}
