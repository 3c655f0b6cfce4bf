//! Pipeline stages over an output directory:
//!
//! ```text
//! prompts.jsonl, images/         augment
//! candidates.jsonl, attention/   mine
//! pairs.jsonl, drop_report.csv   select
//! checkpoint.miap, metrics.csv   train
//! report/                        report
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention_io::write_attention;
use crate::augment::{sample_mix, ManifestEntry, MultiImagePrompt, PromptFormat, Sample};
use crate::config::{AttentionDump, PipelineConfig};
use crate::dpo::{encode_checkpoint, metrics_csv, train, MetricRow, TrainPair, TrainState};
use crate::error::{Error, Result};
use crate::fsutil::{jsonl_bytes, read_jsonl, write_atomic};
use crate::ingest::{load_dataset, load_image, normalize_image};
use crate::raster::encode_png;
use crate::report::{drop_report_csv, emit_report, ratio_histogram};
use crate::selector::{
    classify_hallucination, edit_distance, length_ratio, perplexity, post_filter, select_rejected,
    DpoPair, DropReport, RatioReport,
};
use crate::toylvlm::{answer_tokens, generate_with_attention, tokenize_prompt, Params};

pub const MANIFEST: &str = "prompts.jsonl";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const DROP_REPORT: &str = "drop_report.csv";
pub const CHECKPOINT: &str = "checkpoint.miap";
pub const METRICS: &str = "metrics.csv";
pub const REPORT_DIR: &str = "report";

/// What a stage did: lines for the user plus empty-result warnings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutcome {
    pub messages: Vec<String>,
    pub warnings: Vec<String>,
}

impl StageOutcome {
    fn extend(&mut self, other: StageOutcome) {
        self.messages.extend(other.messages);
        self.warnings.extend(other.warnings);
    }
}

/// One mined answer with its attention ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub prompt_id: String,
    pub candidate: usize,
    pub text: String,
    pub tokens: Vec<u16>,
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
    pub ratio: RatioReport,
    /// Relative to the output directory.
    pub attention_file: Option<String>,
}

fn require_dir(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::Config(format!("{what} is not set")))?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(path.to_path_buf())
}

fn require_file(dir: &Path, name: &str, stage: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )));
    }
    Ok(path)
}

fn load_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(&require_file(out, MANIFEST, "augment")?)
}

pub fn cmd_augment(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let dataset_path = require_dir(cfg.dataset.as_deref(), "dataset")?;
    let image_root = require_dir(cfg.image_root.as_deref(), "image root")?;
    let dataset = load_dataset(&dataset_path, cfg.strict_ingest)?;
    let mut outcome = StageOutcome::default();
    if dataset.skipped > 0 {
        outcome.warnings.push(format!(
            "skipped {} malformed dataset lines",
            dataset.skipped
        ));
    }
    let mut corpus = Vec::with_capacity(dataset.records.len());
    for record in dataset.records {
        let image = match load_image(&record.image_path(&image_root)) {
            Ok(img) => normalize_image(&img, cfg.model.image_side, cfg.model.patch_size)?,
            Err(e) if cfg.strict_ingest => return Err(e),
            Err(e) => {
                outcome
                    .warnings
                    .push(format!("skipped record {}: {e}", record.id));
                continue;
            }
        };
        corpus.push(Sample { record, image });
    }
    let prompts = sample_mix(&corpus, &cfg.mix(), cfg.n_total)?;
    let out = &cfg.out_dir;
    let mut manifest = Vec::with_capacity(prompts.len());
    for prompt in &prompts {
        let entry = ManifestEntry::from_prompt(prompt);
        for (name, image) in entry.images.iter().zip(&prompt.images) {
            write_atomic(&out.join(name), &encode_png(image))?;
        }
        manifest.push(entry);
    }
    write_atomic(&out.join(MANIFEST), &jsonl_bytes(&manifest)?)?;
    for format in PromptFormat::ALL {
        let n = prompts.iter().filter(|p| p.format == format).count();
        outcome
            .messages
            .push(format!("{}: {n} prompts", format.as_str()));
    }
    Ok(outcome)
}

fn load_prompts(cfg: &PipelineConfig) -> Result<Vec<MultiImagePrompt>> {
    load_manifest(&cfg.out_dir)?
        .iter()
        .map(|e| e.load(&cfg.out_dir))
        .collect()
}

pub fn cmd_mine(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let prompts = load_prompts(cfg)?;
    let model = cfg.model();
    let params = Params::init(&model, model.seed)?;
    let layer = cfg.attention_layer();
    let mut records = Vec::new();
    for prompt in &prompts {
        let seq = tokenize_prompt(prompt, &model)?;
        let prompt_len = seq.answer_start;
        let traced = generate_with_attention(
            &seq,
            &params,
            cfg.k_candidates,
            cfg.temperature,
            prompt.seed,
        )?;
        for (c, (cand, att)) in traced.into_iter().enumerate() {
            // Queries that produced each answer token.
            let positions = prompt_len - 1..prompt_len - 1 + cand.tokens.len();
            let ratio = RatioReport::new(
                &att,
                positions,
                &seq.image_spans,
                layer,
                prompt.target_index,
            )?;
            let dumped = match cfg.attention_dump {
                AttentionDump::None => None,
                AttentionDump::Layer => Some(att.select_layers(layer..layer + 1)),
                AttentionDump::All => Some(att),
            };
            let attention_file = match dumped {
                Some(att) => {
                    let name = format!("attention/{}_{c}.miat", prompt.id);
                    write_attention(&cfg.out_dir.join(&name), &att)?;
                    Some(name)
                }
                None => None,
            };
            records.push(CandidateRecord {
                prompt_id: prompt.id.clone(),
                candidate: c,
                text: cand.text,
                tokens: cand.tokens,
                per_token_logprob: cand.per_token_logprob,
                total_logprob: cand.total_logprob,
                ratio,
                attention_file,
            });
        }
    }
    write_atomic(&cfg.out_dir.join(CANDIDATES), &jsonl_bytes(&records)?)?;
    let mut outcome = StageOutcome::default();
    outcome.messages.push(format!(
        "{} candidates over {} prompts",
        records.len(),
        prompts.len()
    ));
    Ok(outcome)
}

fn group_candidates(records: Vec<CandidateRecord>) -> HashMap<String, Vec<CandidateRecord>> {
    let mut map: HashMap<String, Vec<CandidateRecord>> = HashMap::new();
    for r in records {
        map.entry(r.prompt_id.clone()).or_default().push(r);
    }
    map
}

pub fn cmd_select(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let manifest = load_manifest(&cfg.out_dir)?;
    let mut by_prompt = group_candidates(read_jsonl(&require_file(
        &cfg.out_dir,
        CANDIDATES,
        "mine",
    )?)?);
    let mut pairs = Vec::new();
    for entry in &manifest {
        let tau = cfg.thresholds.get(entry.format, entry.n_images)?;
        let mut cands = by_prompt.remove(&entry.id).unwrap_or_default();
        // An empty answer cannot form a pair.
        cands.retain(|c| !c.text.is_empty());
        let ratios: Vec<f64> = cands.iter().map(|c| c.ratio.r).collect();
        let Some(i) = select_rejected(&ratios, tau) else {
            continue;
        };
        let cand = &cands[i];
        pairs.push(DpoPair {
            prompt_id: entry.id.clone(),
            question: entry.question.clone(),
            images: entry.images.clone(),
            chosen: entry.ground_truth.clone(),
            rejected: cand.text.clone(),
            rejected_tokens: cand.tokens.clone(),
            r: cand.ratio.r,
            tau,
            ppl: perplexity(&cand.per_token_logprob)?,
            edit_distance: edit_distance(&entry.ground_truth, &cand.text),
            length_ratio: length_ratio(&entry.ground_truth, &cand.text)?,
            hallucination_type: classify_hallucination(&cand.ratio, entry.format),
            kept: false,
            drop_reason: None,
        });
    }
    let mut outcome = StageOutcome::default();
    let (pairs, report) = if pairs.is_empty() {
        outcome
            .warnings
            .push("no candidate at or below its threshold; pair file is empty".into());
        (pairs, DropReport::default())
    } else {
        post_filter(pairs, &cfg.filter)?
    };
    write_atomic(&cfg.out_dir.join(PAIRS), &jsonl_bytes(&pairs)?)?;
    write_atomic(
        &cfg.out_dir.join(DROP_REPORT),
        drop_report_csv(&report).as_bytes(),
    )?;
    outcome.messages.push(format!(
        "{} pairs mined from {} prompts: kept {}, dropped ppl {} length {} edit {}",
        report.total,
        manifest.len(),
        report.kept(),
        report.dropped_ppl,
        report.dropped_length,
        report.dropped_edit
    ));
    Ok(outcome)
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let manifest = load_manifest(&cfg.out_dir)?;
    let pairs: Vec<DpoPair> = read_jsonl(&require_file(&cfg.out_dir, PAIRS, "select")?)?;
    let model = cfg.model();
    let hyper = cfg.hyper();
    let by_id: HashMap<&str, &ManifestEntry> =
        manifest.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut train_pairs = Vec::new();
    for p in pairs.iter().filter(|p| p.kept) {
        let entry = by_id.get(p.prompt_id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("pair for unknown prompt {}", p.prompt_id))
        })?;
        let prompt = entry.load(&cfg.out_dir)?;
        train_pairs.push(TrainPair {
            id: p.prompt_id.clone(),
            prompt: tokenize_prompt(&prompt, &model)?,
            chosen: answer_tokens(&p.chosen),
            rejected: p.rejected_tokens.clone(),
        });
    }
    let state = TrainState::fresh(&model, model.seed)?;
    let mut outcome = StageOutcome::default();
    let (state, log) = if train_pairs.is_empty() {
        outcome
            .warnings
            .push("no kept pairs; checkpoint holds the initial parameters".into());
        (state, Vec::new())
    } else {
        train(&train_pairs, state, &hyper)?
    };
    write_atomic(
        &cfg.out_dir.join(CHECKPOINT),
        &encode_checkpoint(&state.policy),
    )?;
    write_atomic(&cfg.out_dir.join(METRICS), metrics_csv(&log).as_bytes())?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        outcome.messages.push(format!(
            "{} pairs, {} steps: l_dpo {:.6} -> {:.6}, accuracy {:.3}",
            train_pairs.len(),
            log.len(),
            first.l_dpo,
            last.l_dpo,
            last.pref_accuracy
        ));
    }
    Ok(outcome)
}

/// Parses a metrics CSV written by this crate.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |line: usize, reason: String| Error::MalformedRecord { line, reason };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i + 1, format!("expected 7 columns, got {}", f.len())));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            Ok(MetricRow {
                step: f[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
                epoch: f[1]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?,
                l_dpo: real(f[2])?,
                l_nll: real(f[3])?,
                l_total: real(f[4])?,
                margin_mean: real(f[5])?,
                pref_accuracy: real(f[6])?,
            })
        })
        .collect()
}

fn drop_report_from_pairs(pairs: &[DpoPair]) -> DropReport {
    let count = |reason: &str| {
        pairs
            .iter()
            .filter(|p| p.drop_reason.as_deref() == Some(reason))
            .count()
    };
    DropReport {
        total: pairs.len(),
        dropped_ppl: count("ppl"),
        dropped_length: count("length"),
        dropped_edit: count("edit"),
        ppl_threshold: f64::NAN,
    }
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let manifest = load_manifest(&cfg.out_dir)?;
    let candidates: Vec<CandidateRecord> =
        read_jsonl(&require_file(&cfg.out_dir, CANDIDATES, "mine")?)?;
    let mut by_prompt = group_candidates(candidates);
    let mut by_key: BTreeMap<(PromptFormat, usize), Vec<RatioReport>> = BTreeMap::new();
    for entry in &manifest {
        let reports = by_key.entry((entry.format, entry.n_images)).or_default();
        for c in by_prompt.remove(&entry.id).unwrap_or_default() {
            reports.push(c.ratio);
        }
    }
    let mut outcome = StageOutcome::default();
    let mut histograms = Vec::new();
    for ((format, n), reports) in &by_key {
        if reports.is_empty() {
            outcome
                .warnings
                .push(format!("no ratios for {} n={n}; omitted", format.as_str()));
            continue;
        }
        let h = ratio_histogram(reports, *format, *n)?;
        outcome.messages.push(format!(
            "{} n={n}: {} ratios, mean {:.4}, median {:.4}",
            format.as_str(),
            h.samples,
            h.mean,
            h.median
        ));
        histograms.push(h);
    }
    let pairs_path = cfg.out_dir.join(PAIRS);
    let drop = if pairs_path.is_file() {
        Some(drop_report_from_pairs(&read_jsonl(&pairs_path)?))
    } else {
        None
    };
    let metrics_path = cfg.out_dir.join(METRICS);
    let log = if metrics_path.is_file() {
        parse_metrics_csv(&fs::read_to_string(&metrics_path)?)?
    } else {
        Vec::new()
    };
    let files = emit_report(
        &histograms,
        drop.as_ref(),
        &log,
        &cfg.out_dir.join(REPORT_DIR),
    )?;
    outcome
        .messages
        .push(format!("wrote {} report files", files.len()));
    Ok(outcome)
}

/// augment, mine, select, train, report in order; stops at the first error.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::default();
    for stage in [cmd_augment, cmd_mine, cmd_select, cmd_train, cmd_report] {
        outcome.extend(stage(cfg)?);
    }
    Ok(outcome)
}
