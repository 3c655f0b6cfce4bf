//! DPO + NLL objective, exact gradients for the toy model, and SGD training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylvlm::{log_softmax, ModelConfig, Params, Tape, TokenSequence, VOCAB};

/// Learning rate reported for 7B-scale models. The toy default is larger.
pub const LVLM_LEARNING_RATE: f64 = 5e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Divide the NLL term by the chosen answer's token count.
    pub nll_per_token: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.1,
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            nll_per_token: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta.is_finite()
            && self.gamma >= 0.0
            && self.gamma.is_finite()
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs >= 1
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_margin(lp_w_pol: f64, lp_w_ref: f64, lp_l_pol: f64, lp_l_ref: f64, beta: f64) -> f64 {
    beta * (lp_w_pol - lp_w_ref) - beta * (lp_l_pol - lp_l_ref)
}

/// `-log sigmoid(margin)`, evaluated as `softplus(-margin)`.
pub fn dpo_loss(
    lp_w_pol: f64,
    lp_w_ref: f64,
    lp_l_pol: f64,
    lp_l_ref: f64,
    beta: f64,
) -> Result<f64> {
    if ![lp_w_pol, lp_w_ref, lp_l_pol, lp_l_ref]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteInput("log-probability"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::NonFiniteInput("beta"));
    }
    Ok(softplus(-dpo_margin(
        lp_w_pol, lp_w_ref, lp_l_pol, lp_l_ref, beta,
    )))
}

/// Negative log-likelihood of the chosen answer (sequence sum).
pub fn nll_loss(lp_w_pol: f64) -> Result<f64> {
    if !lp_w_pol.is_finite() {
        return Err(Error::NonFiniteInput("log-probability"));
    }
    Ok(-lp_w_pol)
}

pub fn total_loss(l_dpo: f64, l_nll: f64, gamma: f64) -> f64 {
    l_dpo + gamma * l_nll
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dpo: f64,
    pub l_nll: f64,
    pub l_total: f64,
    pub margin: f64,
}

/// A tokenized preference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub prompt: TokenSequence,
    pub chosen: Vec<u16>,
    pub rejected: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: Params,
    reference: Params,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    /// Policy and a frozen reference clone of `params`.
    pub fn new(params: Params, seed: u64) -> Self {
        Self {
            reference: params.clone(),
            policy: params,
            step: 0,
            seed,
        }
    }

    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(Params::init(config, seed)?, seed))
    }

    pub fn reference(&self) -> &Params {
        &self.reference
    }
}

/// Tape over prompt + answer with the answer's log-probability.
struct AnswerPass {
    tape: Tape,
    logprob: f64,
    /// (row, softmax probabilities, target token) per answer token.
    rows: Vec<(usize, Vec<f64>, usize)>,
}

fn answer_pass(
    params: &Params,
    prompt: &TokenSequence,
    answer: &[u16],
    keep: bool,
) -> Result<AnswerPass> {
    if answer.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    let full = TokenSequence {
        tokens: prompt.prompt_tokens().to_vec(),
        ..prompt.clone()
    }
    .with_answer(&answer[..answer.len() - 1]);
    let tape = Tape::run(params, &full)?;
    let mut logprob = 0.0;
    let mut rows = Vec::new();
    for (i, &tok) in answer.iter().enumerate() {
        let row = prompt.answer_start + i - 1;
        let lp = log_softmax(&tape.logits(params, row));
        logprob += lp[tok as usize];
        if keep {
            rows.push((row, lp.iter().map(|l| l.exp()).collect(), tok as usize));
        }
    }
    Ok(AnswerPass {
        tape,
        logprob,
        rows,
    })
}

/// Teacher-forced sequence log-probability.
pub fn sequence_logprob(params: &Params, prompt: &TokenSequence, answer: &[u16]) -> Result<f64> {
    Ok(answer_pass(params, prompt, answer, false)?.logprob)
}

/// Reference log-probabilities (chosen, rejected) of each pair.
pub fn reference_logprobs(reference: &Params, pairs: &[TrainPair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            Ok((
                sequence_logprob(reference, &p.prompt, &p.chosen)?,
                sequence_logprob(reference, &p.prompt, &p.rejected)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    pub loss: LossBreakdown,
    pub lp_w_pol: f64,
    pub lp_l_pol: f64,
}

fn pair_losses(
    pair: &TrainPair,
    lp_w: f64,
    lp_l: f64,
    refs: (f64, f64),
    hyper: &HyperParams,
) -> Result<PairEval> {
    let margin = dpo_margin(lp_w, refs.0, lp_l, refs.1, hyper.beta);
    let l_dpo = dpo_loss(lp_w, refs.0, lp_l, refs.1, hyper.beta);
    let l_nll = nll_loss(lp_w).map(|v| {
        if hyper.nll_per_token {
            v / pair.chosen.len() as f64
        } else {
            v
        }
    });
    match (l_dpo, l_nll) {
        (Ok(l_dpo), Ok(l_nll)) if margin.is_finite() => Ok(PairEval {
            loss: LossBreakdown {
                l_dpo,
                l_nll,
                l_total: total_loss(l_dpo, l_nll, hyper.gamma),
                margin,
            },
            lp_w_pol: lp_w,
            lp_l_pol: lp_l,
        }),
        _ => Err(Error::NonFiniteLoss {
            pair_id: pair.id.clone(),
        }),
    }
}

/// Loss of each pair under the current policy.
pub fn evaluate(
    pairs: &[TrainPair],
    refs: &[(f64, f64)],
    policy: &Params,
    hyper: &HyperParams,
) -> Result<Vec<PairEval>> {
    pairs
        .iter()
        .zip(refs)
        .map(|(p, &r)| {
            let lp_w = sequence_logprob(policy, &p.prompt, &p.chosen)?;
            let lp_l = sequence_logprob(policy, &p.prompt, &p.rejected)?;
            pair_losses(p, lp_w, lp_l, r, hyper)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    /// Gradient of the batch-mean total loss, laid out like the policy values.
    pub grad: Vec<f64>,
    pub pairs: Vec<PairEval>,
}

impl BatchGradient {
    pub fn mean_loss(&self) -> LossBreakdown {
        mean_breakdown(&self.pairs)
    }
}

pub fn mean_breakdown(pairs: &[PairEval]) -> LossBreakdown {
    let n = pairs.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in pairs {
        m.l_dpo += p.loss.l_dpo;
        m.l_nll += p.loss.l_nll;
        m.l_total += p.loss.l_total;
        m.margin += p.loss.margin;
    }
    m.l_dpo /= n;
    m.l_nll /= n;
    m.l_total /= n;
    m.margin /= n;
    m
}

pub fn preference_accuracy(pairs: &[PairEval]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.lp_w_pol > p.lp_l_pol).count() as f64 / pairs.len() as f64
}

/// Exact gradient of the mean batch `L_total` with respect to the policy.
/// `refs` are the frozen reference log-probabilities; they carry no gradient.
pub fn batch_gradient(
    batch: &[&TrainPair],
    refs: &[(f64, f64)],
    policy: &Params,
    hyper: &HyperParams,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.len()];
    let mut evals = Vec::with_capacity(batch.len());
    for (pair, &r) in batch.iter().zip(refs) {
        let w = answer_pass(policy, &pair.prompt, &pair.chosen, true)?;
        let l = answer_pass(policy, &pair.prompt, &pair.rejected, true)?;
        let eval = pair_losses(pair, w.logprob, l.logprob, r, hyper)?;
        // dL/dm = -sigmoid(-m); m = beta (lp_w - lp_l) + const.
        let s = sigmoid(-eval.loss.margin);
        let nll_coef = if hyper.nll_per_token {
            hyper.gamma / pair.chosen.len() as f64
        } else {
            hyper.gamma
        };
        let coef_w = (-hyper.beta * s - nll_coef) * scale;
        let coef_l = hyper.beta * s * scale;
        for (pass, coef) in [(&w, coef_w), (&l, coef_l)] {
            // d lp / d logits = onehot(target) - softmax.
            let dlogits: Vec<(usize, Vec<f64>)> = pass
                .rows
                .iter()
                .map(|(row, probs, tok)| {
                    let mut g: Vec<f64> = probs.iter().map(|p| -coef * p).collect();
                    g[*tok] += coef;
                    debug_assert_eq!(g.len(), VOCAB);
                    (*row, g)
                })
                .collect();
            pass.tape.backward(policy, &dlogits, &mut grad);
        }
        evals.push(eval);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            pair_id: batch[0].id.clone(),
        });
    }
    Ok(BatchGradient { grad, pairs: evals })
}

/// Gradient for a batch at the state's policy, reference terms held fixed.
pub fn backward(
    batch: &[TrainPair],
    state: &TrainState,
    hyper: &HyperParams,
) -> Result<BatchGradient> {
    let refs = reference_logprobs(&state.reference, batch)?;
    let refs_batch: Vec<&TrainPair> = batch.iter().collect();
    batch_gradient(&refs_batch, &refs, &state.policy, hyper)
}

pub fn sgd_step(params: &mut Params, grad: &[f64], learning_rate: f64) {
    for (v, g) in params.values.iter_mut().zip(grad) {
        *v -= learning_rate * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub l_dpo: f64,
    pub l_nll: f64,
    pub l_total: f64,
    pub margin_mean: f64,
    pub pref_accuracy: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,l_dpo,l_nll,l_total,margin_mean,pref_accuracy";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.l_dpo, r.l_nll, r.l_total, r.margin_mean, r.pref_accuracy
        ));
    }
    out
}

/// Deterministic Fisher-Yates order of `0..n` for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = crate::seeded_rng(seed, 0x0053_4855_0000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Plain SGD over shuffled minibatches. Each logged row reports the batch
/// metrics evaluated before that step's update.
pub fn train(
    pairs: &[TrainPair],
    mut state: TrainState,
    hyper: &HyperParams,
) -> Result<(TrainState, Vec<MetricRow>)> {
    hyper.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refs = reference_logprobs(&state.reference, pairs)?;
    let mut log = Vec::new();
    for epoch in 0..hyper.epochs {
        let order = epoch_order(pairs.len(), hyper.seed, epoch);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch_refs: Vec<(f64, f64)> = chunk.iter().map(|&i| refs[i]).collect();
            let g = batch_gradient(&batch, &batch_refs, &state.policy, hyper)?;
            let m = g.mean_loss();
            log.push(MetricRow {
                step: state.step,
                epoch,
                l_dpo: m.l_dpo,
                l_nll: m.l_nll,
                l_total: m.l_total,
                margin_mean: m.margin,
                pref_accuracy: preference_accuracy(&g.pairs),
            });
            sgd_step(&mut state.policy, &g.grad, hyper.learning_rate);
            state.step += 1;
        }
    }
    Ok((state, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Parameter index where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients against central differences on `n_coords`
/// seeded coordinates (all of them when `n_coords >= len`). The error metric
/// is `|a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check(
    state: &TrainState,
    pairs: &[TrainPair],
    hyper: &HyperParams,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if n_coords == 0 {
        return Err(Error::Precondition(
            "grad_check needs at least one coordinate".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Precondition(format!("epsilon {epsilon}")));
    }
    let refs = reference_logprobs(&state.reference, pairs)?;
    let batch: Vec<&TrainPair> = pairs.iter().collect();
    let analytic = batch_gradient(&batch, &refs, &state.policy, hyper)?.grad;
    let len = state.policy.len();
    let coords: Vec<usize> = if n_coords >= len {
        (0..len).collect()
    } else {
        let mut rng = crate::seeded_rng(seed, 0x4743);
        let mut v = rand::seq::index::sample(&mut rng, len, n_coords).into_vec();
        v.sort_unstable();
        v
    };
    let loss_at = |params: &Params| -> Result<f64> {
        Ok(mean_breakdown(&evaluate(pairs, &refs, params, hyper)?).l_total)
    };
    let mut probe = state.policy.clone();
    let mut report: Option<GradCheckReport> = None;
    for &i in &coords {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let up = loss_at(&probe)?;
        probe.values[i] = orig - epsilon;
        let down = loss_at(&probe)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if report.as_ref().is_none_or(|r| err > r.max_relative_error) {
            report = Some(GradCheckReport {
                coordinates: coords.len(),
                max_relative_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            });
        }
    }
    let report = report.expect("at least one coordinate");
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MIAP";
const CHECKPOINT_VERSION: u8 = 1;

/// `MIAP`, version byte, u32 LE count, then f64 LE values.
pub fn encode_checkpoint(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Params> {
    let bad = |reason: &str| Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    };
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing MIAP magic"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() != count * 8 {
        return Err(bad("length does not match parameter count"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Params::from_values(config, values)
}
