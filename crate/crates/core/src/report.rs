//! Ratio histograms, drop-rate breakdowns and training curves as CSV plus
//! plain SVG bar charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::PromptFormat;
use crate::dpo::{metrics_csv, MetricRow};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::selector::{DropReport, RatioReport};

pub const N_BINS: usize = 20;
pub const SVG_MAX_HEIGHT: usize = 200;
const BAR_WIDTH: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioHistogram {
    pub format: PromptFormat,
    pub n_images: usize,
    pub counts: [usize; N_BINS],
    pub mean: f64,
    pub median: f64,
    pub samples: usize,
}

impl RatioHistogram {
    /// `(lo, hi)` of bin `i`.
    pub fn bin_edges(i: usize) -> (f64, f64) {
        (i as f64 / N_BINS as f64, (i + 1) as f64 / N_BINS as f64)
    }

    pub fn file_stem(&self) -> String {
        format!("ratios_{}_{}", self.format.as_str(), self.n_images)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(i);
            writeln!(out, "{lo},{hi},{c}").unwrap();
        }
        out
    }

    /// One `<rect>` per bin; heights scale so the tallest bar is 200 px.
    pub fn to_svg(&self) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let (left, top) = (10, 30);
        let width = N_BINS * BAR_WIDTH + 2 * left;
        let height = SVG_MAX_HEIGHT + top + 10;
        let mut out = String::new();
        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#).unwrap();
        writeln!(
            out,
            r#"<text x="{left}" y="20" font-family="monospace" font-size="12">{} n={} samples={} mean={:.4}</text>"#,
            self.format.as_str(),
            self.n_images,
            self.samples,
            self.mean
        )
        .unwrap();
        for (i, &c) in self.counts.iter().enumerate() {
            let h = (c * SVG_MAX_HEIGHT + max / 2).checked_div(max).unwrap_or(0);
            let x = left + i * BAR_WIDTH;
            let y = top + SVG_MAX_HEIGHT - h;
            writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{}" height="{h}" fill="#4a78b0"/>"##,
                BAR_WIDTH - 2
            )
            .unwrap();
        }
        out.push_str("</svg>\n");
        out
    }
}

fn bin_of(r: f64) -> usize {
    ((r * N_BINS as f64).floor() as usize).min(N_BINS - 1)
}

/// Histogram of R over reports that all share `(format, n_images)`.
pub fn ratio_histogram(
    reports: &[RatioReport],
    format: PromptFormat,
    n_images: usize,
) -> Result<RatioHistogram> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut values: Vec<f64> = reports.iter().map(|r| r.r).collect();
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::NonFiniteInput("ratio outside [0, 1]"));
    }
    let mut counts = [0; N_BINS];
    for &v in &values {
        counts[bin_of(v)] += 1;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    values.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    Ok(RatioHistogram {
        format,
        n_images,
        counts,
        mean,
        median,
        samples: n,
    })
}

pub fn drop_report_csv(report: &DropReport) -> String {
    let total = report.total.max(1) as f64;
    let mut out = String::from("criterion,count,rate\n");
    for (name, count) in [
        ("ppl", report.dropped_ppl),
        ("length", report.dropped_length),
        ("edit", report.dropped_edit),
        ("dropped", report.dropped()),
        ("kept", report.kept()),
    ] {
        let rate = if report.total == 0 {
            0.0
        } else {
            count as f64 / total
        };
        writeln!(out, "{name},{count},{rate}").unwrap();
    }
    out
}

/// Per-key summary: format, n_images, samples, mean, median.
pub fn summary_csv(histograms: &[RatioHistogram]) -> String {
    let mut out = String::from("format,n_images,samples,mean,median\n");
    for h in histograms {
        writeln!(
            out,
            "{},{},{},{},{}",
            h.format.as_str(),
            h.n_images,
            h.samples,
            h.mean,
            h.median
        )
        .unwrap();
    }
    out
}

/// Writes every report file into `out_dir` and returns the paths in write order.
pub fn emit_report(
    histograms: &[RatioHistogram],
    drop: Option<&DropReport>,
    training_log: &[MetricRow],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut sorted: Vec<&RatioHistogram> = histograms.iter().collect();
    sorted.sort_by_key(|h| (h.format, h.n_images));
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    for h in &sorted {
        put(format!("{}.csv", h.file_stem()), h.to_csv())?;
        put(format!("{}.svg", h.file_stem()), h.to_svg())?;
    }
    put("ratios_summary.csv".into(), summary_csv(histograms))?;
    if let Some(d) = drop {
        put("drop_report.csv".into(), drop_report_csv(d))?;
    }
    put("training.csv".into(), metrics_csv(training_log))?;
    Ok(written)
}
