//! Attention-ratio mining of rejected answers and post-selection filters.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::augment::PromptFormat;
use crate::error::{Error, Result};
use crate::toylvlm::AttentionTensor;

/// Share of image-token attention per logical image, summed over the answer
/// queries and averaged over heads at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub per_image_mass: Vec<f64>,
    #[serde(rename = "R")]
    pub r: f64,
    /// 1-based.
    pub target_index: usize,
    pub layer_used: usize,
    pub heads: String,
    pub answer_positions: Range<usize>,
}

impl RatioReport {
    pub fn new(
        att: &AttentionTensor,
        answer_positions: Range<usize>,
        image_spans: &[Vec<usize>],
        layer: usize,
        target_index: usize,
    ) -> Result<Self> {
        let per_image_mass = attention_mass(att, answer_positions.clone(), image_spans, layer)?;
        let r = compute_r(&per_image_mass, target_index)?;
        Ok(Self {
            per_image_mass,
            r,
            target_index,
            layer_used: layer,
            heads: "mean".into(),
            answer_positions,
        })
    }
}

/// Normalized attention mass per image span. The denominator is attention
/// landing on image tokens only, so the result sums to 1.
pub fn attention_mass(
    att: &AttentionTensor,
    answer_positions: Range<usize>,
    image_spans: &[Vec<usize>],
    layer: usize,
) -> Result<Vec<f64>> {
    if layer >= att.n_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            n_layers: att.n_layers(),
        });
    }
    if image_spans.is_empty() || image_spans.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptySpans);
    }
    if answer_positions.is_empty() || answer_positions.end > att.seq_len() {
        return Err(Error::Precondition(format!(
            "answer positions {answer_positions:?} for a sequence of {}",
            att.seq_len()
        )));
    }
    if let Some(&p) = image_spans.iter().flatten().find(|&&p| p >= att.seq_len()) {
        return Err(Error::Precondition(format!(
            "span position {p} beyond sequence"
        )));
    }
    let heads = att.n_heads() as f64;
    let mut mass: Vec<f64> = image_spans
        .iter()
        .map(|span| {
            let mut total = 0.0;
            for q in answer_positions.clone() {
                for h in 0..att.n_heads() {
                    let row = att.row(layer, h, q);
                    total += span
                        .iter()
                        .filter(|&&k| k <= q)
                        .map(|&k| row[k])
                        .sum::<f64>()
                        / heads;
                }
            }
            total
        })
        .collect();
    let sum: f64 = mass.iter().sum();
    if sum <= 0.0 {
        return Err(Error::EmptySpans);
    }
    mass.iter_mut().for_each(|m| *m /= sum);
    Ok(mass)
}

/// R = A_target / A_sum, with `target_index` 1-based.
pub fn compute_r(masses: &[f64], target_index: usize) -> Result<f64> {
    if target_index == 0 || target_index > masses.len() {
        return Err(Error::IndexOutOfRange {
            index: target_index,
            len: masses.len(),
        });
    }
    Ok(masses[target_index - 1])
}

/// Attention-ratio threshold τ per (format, image count).
pub fn threshold_for(format: PromptFormat, n_images: usize) -> Result<f64> {
    let tau = match (format, n_images) {
        (PromptFormat::Sequence, 2) => 0.7,
        (PromptFormat::Sequence, 3) => 0.6,
        (PromptFormat::Sequence, 4) => 0.5,
        (PromptFormat::Sequence, 5) => 0.5,
        (PromptFormat::GridCollage, 2) => 0.7,
        (PromptFormat::GridCollage, 3) => 0.6,
        (PromptFormat::GridCollage, 4) => 0.5,
        (PromptFormat::GridCollage, 6) => 0.4,
        (PromptFormat::GridCollage, 9) => 0.4,
        (PromptFormat::PicInPic, 2) => 0.6,
        _ => {
            return Err(Error::UnsupportedCombination {
                format: format.as_str(),
                n: n_images,
            });
        }
    };
    Ok(tau)
}

/// Thresholds keyed by (format, count); starts from [`threshold_for`] and
/// only accepts overrides for keys that exist there.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable(BTreeMap<(PromptFormat, usize), f64>);

impl Default for ThresholdTable {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        for format in PromptFormat::ALL {
            for &n in format.allowed_counts() {
                map.insert(
                    (format, n),
                    threshold_for(format, n).expect("allowed count"),
                );
            }
        }
        Self(map)
    }
}

impl ThresholdTable {
    pub fn get(&self, format: PromptFormat, n_images: usize) -> Result<f64> {
        self.0
            .get(&(format, n_images))
            .copied()
            .ok_or(Error::UnsupportedCombination {
                format: format.as_str(),
                n: n_images,
            })
    }

    pub fn set(&mut self, format: PromptFormat, n_images: usize, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("threshold {tau} outside [0, 1]")));
        }
        match self.0.get_mut(&(format, n_images)) {
            Some(v) => {
                *v = tau;
                Ok(())
            }
            None => Err(Error::UnsupportedCombination {
                format: format.as_str(),
                n: n_images,
            }),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (PromptFormat, usize, f64)> + '_ {
        self.0.iter().map(|(&(f, n), &t)| (f, n, t))
    }
}

/// Index of the candidate to reject: the minimum R among those with R <= τ,
/// earliest on ties. `None` when no candidate qualifies.
pub fn select_rejected(ratios: &[f64], tau: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &r) in ratios.iter().enumerate() {
        if r <= tau && best.is_none_or(|b| r < ratios[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HallucinationType {
    SequenceConfusion,
    ElementInterference,
    None,
}

/// Attention peaking on a non-target image counts as a hallucination:
/// sequence confusion for sequences, element interference for composites.
pub fn classify_hallucination(report: &RatioReport, format: PromptFormat) -> HallucinationType {
    let masses = &report.per_image_mass;
    let mut arg = 0;
    for (i, &m) in masses.iter().enumerate() {
        if m > masses[arg] {
            arg = i;
        }
    }
    if arg + 1 == report.target_index {
        HallucinationType::None
    } else if format == PromptFormat::Sequence {
        HallucinationType::SequenceConfusion
    } else {
        HallucinationType::ElementInterference
    }
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(per_token_logprobs: &[f64]) -> Result<f64> {
    if per_token_logprobs.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    let mean = per_token_logprobs.iter().sum::<f64>() / per_token_logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `|len(a) - len(b)| / max(len(a), len(b))` in Unicode scalar values.
pub fn length_ratio(chosen: &str, rejected: &str) -> Result<f64> {
    let a = chosen.chars().count();
    let b = rejected.chars().count();
    if a == 0 || b == 0 {
        return Err(Error::EmptyAnswer);
    }
    Ok(a.abs_diff(b) as f64 / a.max(b) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub ppl_quantile: f64,
    pub len_diff_max: f64,
    pub edit_min: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ppl_quantile: 0.95,
            len_diff_max: 0.8,
            edit_min: 2,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppl_quantile > 0.0 && self.ppl_quantile <= 1.0) {
            return Err(Error::Config(format!(
                "ppl_quantile {} outside (0, 1]",
                self.ppl_quantile
            )));
        }
        if !(self.len_diff_max >= 0.0 && self.len_diff_max.is_finite()) {
            return Err(Error::Config(format!("len_diff_max {}", self.len_diff_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub prompt_id: String,
    pub question: String,
    pub images: Vec<String>,
    pub chosen: String,
    pub rejected: String,
    /// Token ids of the rejected answer as generated.
    pub rejected_tokens: Vec<u16>,
    #[serde(rename = "R")]
    pub r: f64,
    pub tau: f64,
    pub ppl: f64,
    pub edit_distance: usize,
    pub length_ratio: f64,
    pub hallucination_type: HallucinationType,
    pub kept: bool,
    pub drop_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DropReport {
    pub total: usize,
    pub dropped_ppl: usize,
    pub dropped_length: usize,
    pub dropped_edit: usize,
    /// PPL cut used; reuse it to re-filter without recomputing the quantile.
    pub ppl_threshold: f64,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.dropped_ppl + self.dropped_length + self.dropped_edit
    }

    pub fn kept(&self) -> usize {
        self.total - self.dropped()
    }

    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.dropped() as f64 / self.total as f64
        }
    }
}

/// Linear-interpolation quantile (the common "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Marks every pair kept or dropped. Each dropped pair is attributed to the
/// first failing criterion in the order ppl, length, edit.
pub fn post_filter(
    pairs: Vec<DpoPair>,
    config: &FilterConfig,
) -> Result<(Vec<DpoPair>, DropReport)> {
    config.validate()?;
    let ppls: Vec<f64> = pairs.iter().map(|p| p.ppl).collect();
    let threshold = quantile(&ppls, config.ppl_quantile)?;
    post_filter_with_threshold(pairs, config, threshold)
}

pub fn post_filter_with_threshold(
    mut pairs: Vec<DpoPair>,
    config: &FilterConfig,
    ppl_threshold: f64,
) -> Result<(Vec<DpoPair>, DropReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut report = DropReport {
        total: pairs.len(),
        ppl_threshold,
        ..Default::default()
    };
    for p in &mut pairs {
        let reason = if p.ppl > ppl_threshold {
            report.dropped_ppl += 1;
            Some("ppl")
        } else if p.length_ratio > config.len_diff_max {
            report.dropped_length += 1;
            Some("length")
        } else if p.edit_distance < config.edit_min {
            report.dropped_edit += 1;
            Some("edit")
        } else {
            None
        };
        p.kept = reason.is_none();
        p.drop_reason = reason.map(String::from);
    }
    Ok((pairs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-matrix Levenshtein, written independently of the two-row version.
    fn dp_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in m.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in m[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                m[i][j] = (m[i - 1][j] + 1)
                    .min(m[i][j - 1] + 1)
                    .min(m[i - 1][j - 1] + cost);
            }
        }
        m[a.len()][b.len()]
    }

    fn uniform_tensor(seq_len: usize, image_positions: &[usize], heads: usize) -> AttentionTensor {
        AttentionTensor::from_fn(2, heads, seq_len, |_, _, q, k| {
            let visible: Vec<_> = image_positions.iter().filter(|&&p| p <= q).collect();
            if visible.is_empty() {
                if k == q {
                    1.0
                } else {
                    0.0
                }
            } else if image_positions.contains(&k) {
                1.0 / visible.len() as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn uniform_mass_is_symmetric() {
        let spans: Vec<Vec<usize>> = (0..4).map(|i| (1 + i * 8..9 + i * 8).collect()).collect();
        let all: Vec<usize> = spans.concat();
        let att = uniform_tensor(40, &all, 2);
        let m = attention_mass(&att, 35..40, &spans, 1).unwrap();
        for v in &m {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert_eq!(compute_r(&m, 3).unwrap(), m[2]);
    }

    #[test]
    fn concentrated_mass() {
        let spans = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        let att = AttentionTensor::from_fn(1, 1, 10, |_, _, _, k| if k == 4 { 1.0 } else { 0.0 });
        assert_eq!(
            attention_mass(&att, 8..10, &spans, 0).unwrap(),
            [0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn unequal_spans_brute_force() {
        let spans = vec![(1..65).collect::<Vec<_>>(), (65..257).collect::<Vec<_>>()];
        let all: Vec<usize> = spans.concat();
        let att = uniform_tensor(270, &all, 1);
        // Brute force: sum the raw tensor entries per span over queries 260..270.
        let raw: Vec<f64> = spans
            .iter()
            .map(|s| {
                (260..270)
                    .flat_map(|q| s.iter().map(move |&k| (q, k)))
                    .map(|(q, k)| att.weight(0, 0, q, k))
                    .sum()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let m = attention_mass(&att, 260..270, &spans, 0).unwrap();
        assert!((m[0] - raw[0] / total).abs() < 1e-12);
        assert!((m[0] - 0.25).abs() < 1e-12 && (m[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mass_errors() {
        let att = AttentionTensor::from_fn(1, 1, 4, |_, _, q, k| if k == q { 1.0 } else { 0.0 });
        assert!(matches!(
            attention_mass(&att, 2..4, &[], 0),
            Err(Error::EmptySpans)
        ));
        assert!(matches!(
            attention_mass(&att, 2..4, &[vec![1]], 3),
            Err(Error::LayerOutOfRange { .. })
        ));
        assert!(attention_mass(&att, 2..2, &[vec![1]], 0).is_err());
        assert!(matches!(
            compute_r(&[0.5, 0.5], 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn r_examples() {
        assert_eq!(compute_r(&[0.25; 4], 3).unwrap(), 0.25);
        assert_eq!(compute_r(&[0.0, 1.0], 2).unwrap(), 1.0);
        assert_eq!(compute_r(&[0.1, 0.9], 1).unwrap(), 0.1);
    }

    #[test]
    fn thresholds() {
        use PromptFormat::*;
        assert_eq!(threshold_for(Sequence, 2).unwrap(), 0.7);
        assert_eq!(threshold_for(GridCollage, 9).unwrap(), 0.4);
        assert_eq!(threshold_for(PicInPic, 2).unwrap(), 0.6);
        assert!(threshold_for(Sequence, 6).is_err());
        assert!(threshold_for(GridCollage, 5).is_err());
        assert!(threshold_for(PicInPic, 3).is_err());
        let mut t = ThresholdTable::default();
        assert_eq!(t.entries().count(), 10);
        t.set(Sequence, 2, 0.65).unwrap();
        assert_eq!(t.get(Sequence, 2).unwrap(), 0.65);
        assert!(t.set(Sequence, 7, 0.5).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_rejected(&[0.8, 0.55, 0.3], 0.6), Some(2));
        assert_eq!(select_rejected(&[0.71], 0.7), None);
        assert_eq!(select_rejected(&[0.7], 0.7), Some(0));
        assert_eq!(select_rejected(&[0.2, 0.5, 0.2], 0.6), Some(0));
    }

    fn report(m: &[f64], target: usize) -> RatioReport {
        RatioReport {
            per_image_mass: m.to_vec(),
            r: m[target - 1],
            target_index: target,
            layer_used: 0,
            heads: "mean".into(),
            answer_positions: 0..1,
        }
    }

    #[test]
    fn hallucination_classes() {
        use HallucinationType::*;
        assert_eq!(
            classify_hallucination(&report(&[0.1, 0.2, 0.1, 0.6], 3), PromptFormat::Sequence),
            SequenceConfusion
        );
        assert_eq!(
            classify_hallucination(&report(&[0.2, 0.7, 0.1], 2), PromptFormat::GridCollage),
            None
        );
        assert_eq!(
            classify_hallucination(&report(&[0.8, 0.2], 2), PromptFormat::PicInPic),
            ElementInterference
        );
    }

    #[test]
    fn perplexity_examples() {
        let ln = f64::ln;
        assert!((perplexity(&[ln(0.5), ln(0.5)]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        // mpmath: exp(-(ln .25 + ln .5 + ln .125) / 3) = 4 (product is 1/64).
        assert!((perplexity(&[ln(0.25), ln(0.5), ln(0.125)]).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(perplexity(&[]), Err(Error::EmptyAnswer)));
    }

    #[test]
    fn edit_and_length_examples() {
        assert_eq!(edit_distance("apple", "apples"), 1);
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(
            edit_distance("kitten", "sitting"),
            dp_oracle("kitten", "sitting")
        );
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("héllo", "hello"), 1);
        assert_eq!(length_ratio("abcde", "vwxyz").unwrap(), 0.0);
        assert_eq!(length_ratio(&"a".repeat(10), &"b".repeat(5)).unwrap(), 0.5);
        assert!((length_ratio("a", &"b".repeat(100)).unwrap() - 0.99).abs() < 1e-15);
        assert!(length_ratio("", "x").is_err());
    }

    proptest! {
        #[test]
        fn select_matches_filter_then_argmin(rs in prop::collection::vec(0.0f64..1.0, 1..12), tau in 0.0f64..1.0) {
            let eligible: Vec<(usize, f64)> = rs.iter().copied().enumerate().filter(|(_, r)| *r <= tau).collect();
            let oracle = eligible.iter().fold(None::<(usize, f64)>, |acc, &(i, r)| match acc {
                Some((_, br)) if br <= r => acc,
                _ => Some((i, r)),
            }).map(|(i, _)| i);
            prop_assert_eq!(select_rejected(&rs, tau), oracle);
        }

        #[test]
        fn perplexity_at_least_one(lps in prop::collection::vec(-20.0f64..=0.0, 1..20)) {
            let p = perplexity(&lps).unwrap();
            prop_assert!(p >= 1.0);
            if lps.iter().any(|&l| l < 0.0) {
                prop_assert!(p > 1.0);
            }
        }

        #[test]
        fn edit_distance_is_a_metric(a in "[abcé]{0,8}", b in "[abcé]{0,8}", c in "[abcé]{0,8}") {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, dp_oracle(&a, &b));
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }
    }

    fn pair(i: usize, ppl: f64, chosen: &str, rejected: &str) -> DpoPair {
        DpoPair {
            prompt_id: format!("p{i}"),
            question: "q".into(),
            images: vec![],
            chosen: chosen.into(),
            rejected: rejected.into(),
            rejected_tokens: vec![],
            r: 0.1,
            tau: 0.5,
            ppl,
            edit_distance: edit_distance(chosen, rejected),
            length_ratio: length_ratio(chosen, rejected).unwrap(),
            hallucination_type: HallucinationType::None,
            kept: false,
            drop_reason: None,
        }
    }

    #[test]
    fn filter_criteria() {
        let pairs: Vec<DpoPair> = (0..100)
            .map(|i| pair(i, 1.0 + i as f64, "a red square", "a blue circle"))
            .collect();
        let (out, rep) = post_filter(pairs, &FilterConfig::default()).unwrap();
        assert!(rep.dropped_ppl >= 5);
        assert_eq!(rep.dropped(), out.iter().filter(|p| !p.kept).count());

        let same = pair(0, 1.0, "same text", "same text");
        let long = pair(1, 1.0, "a", "abcdefghij");
        let fine = pair(2, 1.0, "a red square", "a blue circle");
        let (out, rep) = post_filter(
            vec![same, long, fine],
            &FilterConfig {
                ppl_quantile: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out[0].drop_reason.as_deref(), Some("edit"));
        assert_eq!(out[1].drop_reason.as_deref(), Some("length"));
        assert!(out[2].kept && out[2].drop_reason.is_none());
        assert_eq!(
            (rep.dropped_edit, rep.dropped_length, rep.kept()),
            (1, 1, 1)
        );
        assert!(matches!(
            post_filter(vec![], &FilterConfig::default()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn filter_is_idempotent_with_stored_threshold() {
        let pairs: Vec<DpoPair> = (0..40)
            .map(|i| {
                pair(
                    i,
                    (i * 7 % 13) as f64,
                    "the cat sat",
                    if i % 5 == 0 {
                        "the cat sa"
                    } else {
                        "a dog ran off"
                    },
                )
            })
            .collect();
        let cfg = FilterConfig::default();
        let (out, rep) = post_filter(pairs, &cfg).unwrap();
        let kept: Vec<DpoPair> = out.into_iter().filter(|p| p.kept).collect();
        let n = kept.len();
        let (again, rep2) = post_filter_with_threshold(kept, &cfg, rep.ppl_threshold).unwrap();
        assert_eq!(rep2.dropped(), 0);
        assert_eq!(again.len(), n);
    }

    #[test]
    fn quantile_linear_interpolation() {
        let v: Vec<f64> = (1..=5).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&v, 0.95).unwrap(), 4.8);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
    }
}
