//! Attention-matrix sharing across a range of layers and the matching
//! self-attention FLOP count.
//!
//! Counting convention: a layer that computes its own attention pays for the
//! Q, K and V projections, `3·n·d²` multiply-accumulates; a layer that reuses
//! another layer's attention only projects V, `n·d²`. Score products, softmax
//! and the output projection are not counted. Shared layers take their
//! attention from the layer just before the range, or from the range's first
//! layer when the range starts at layer 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Layers `start..=end` (1-based) of an `layers`-deep stack share attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareConfig {
    pub start: usize,
    pub end: usize,
    pub layers: usize,
}

impl ShareConfig {
    pub fn new(start: usize, end: usize, layers: usize) -> Result<Self> {
        let cfg = Self { start, end, layers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.start && self.start <= self.end && self.end <= self.layers) {
            return Err(invalid(format!(
                "share range {}..{} is not within 1..{}",
                self.start, self.end, self.layers
            )));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    /// Parses `a..b` or `a-b`.
    pub fn parse(text: &str, layers: usize) -> Result<Self> {
        let (a, b) = text
            .split_once("..")
            .or_else(|| text.split_once('-'))
            .ok_or_else(|| invalid(format!("share range `{text}` is not of the form a..b")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("share range `{text}`: `{s}` is not a layer index")))
        };
        Self::new(parse(a)?, parse(b)?, layers)
    }
}

/// Layer → attention source layer, both 1-based; entry `l-1` is layer `l`.
pub fn share_sources(c: &ShareConfig) -> Result<Vec<usize>> {
    c.validate()?;
    let source = if c.start > 1 { c.start - 1 } else { c.start };
    Ok((1..=c.layers)
        .map(|l| if c.contains(l) { source } else { l })
        .collect())
}

pub fn identity_sources(layers: usize) -> Vec<usize> {
    (1..=layers).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub total: u64,
    pub per_layer: Vec<u64>,
    /// Fraction saved relative to the unshared stack, in `[0, 1)`.
    pub saved_fraction: f64,
}

/// Self-attention FLOPs of an `layers`-deep stack at `n` tokens and width `d`.
pub fn flops_self_attention(layers: usize, n: u64, d: u64, share: Option<&ShareConfig>) -> Result<FlopReport> {
    if layers == 0 || n == 0 || d == 0 {
        return Err(invalid("flop count needs positive layers, n and d"));
    }
    let sources = match share {
        Some(c) => {
            if c.layers != layers {
                return Err(invalid(format!("share config is for {} layers, not {layers}", c.layers)));
            }
            share_sources(c)?
        }
        None => identity_sources(layers),
    };
    let proj = n * d * d;
    let per_layer: Vec<u64> = sources
        .iter()
        .enumerate()
        .map(|(i, &src)| if src == i + 1 { 3 * proj } else { proj })
        .collect();
    let total: u64 = per_layer.iter().sum();
    let baseline = 3 * proj * layers as u64;
    Ok(FlopReport {
        total,
        per_layer,
        saved_fraction: 1.0 - total as f64 / baseline as f64,
    })
}

/// Rounds to `sig` significant figures and prints without exponent.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - mag).max(0) as usize;
    let factor = 10f64.powi(sig as i32 - 1 - mag);
    let rounded = (x * factor).round() / factor;
    // rounding can carry into the next magnitude (9.96 → 10)
    let mag2 = rounded.abs().log10().floor() as i32;
    let decimals = if mag2 > mag { decimals.saturating_sub(1) } else { decimals };
    format!("{rounded:.decimals$}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopRow {
    /// `none` or `a-b`.
    pub label: String,
    pub report: FlopReport,
}

impl FlopRow {
    /// Total in GFLOPs at 2 significant figures, e.g. `2.7`.
    pub fn giga(&self) -> String {
        format_sig(self.report.total as f64 / 1e9, 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopTable {
    pub n: u64,
    pub d: u64,
    pub layers: usize,
    pub rows: Vec<FlopRow>,
}

/// One row per entry of `ranges`; `None` is the unshared stack.
pub fn flops_table(n: u64, d: u64, layers: usize, ranges: &[Option<ShareConfig>]) -> Result<FlopTable> {
    let rows = ranges
        .iter()
        .map(|r| {
            let label = r.map_or_else(|| "none".to_string(), |c| format!("{}-{}", c.start, c.end));
            Ok(FlopRow {
                label,
                report: flops_self_attention(layers, n, d, r.as_ref())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopTable { n, d, layers, rows })
}

const TABLE_HEADER: [&str; 4] = ["shared", "flops", "gflops", "saved_fraction"];

impl FlopTable {
    pub fn to_tsv(&self) -> String {
        let mut out = TABLE_HEADER.join("\t");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}G\t{:.4}",
                r.label,
                r.report.total,
                r.giga(),
                r.report.saved_fraction
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.report.total.to_string(),
                    format!("{}G", r.giga()),
                    format!("{:.4}", r.report.saved_fraction),
                ]
            })
            .collect();
        let mut widths = TABLE_HEADER.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cols: [&str; 4]| {
            let parts: Vec<String> = cols
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(TABLE_HEADER);
        for row in &cells {
            line([&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const N: u64 = 128;
    const D: u64 = 768;

    #[test]
    fn sources_for_late_range() {
        let m = share_sources(&ShareConfig::new(5, 12, 12).unwrap()).unwrap();
        assert_eq!(m, vec![1, 2, 3, 4, 4, 4, 4, 4, 4, 4, 4, 4]);
    }

    #[test]
    fn sources_for_full_range() {
        let m = share_sources(&ShareConfig::new(1, 12, 12).unwrap()).unwrap();
        assert_eq!(m, vec![1; 12]);
    }

    #[test]
    fn invalid_ranges() {
        assert!(ShareConfig::new(0, 3, 3).is_err());
        assert!(ShareConfig::new(3, 2, 3).is_err());
        assert!(ShareConfig::new(2, 4, 3).is_err());
        assert!(ShareConfig::parse("x..3", 3).is_err());
        assert_eq!(ShareConfig::parse("5..12", 12).unwrap(), ShareConfig::new(5, 12, 12).unwrap());
        assert_eq!(ShareConfig::parse("5-12", 12).unwrap(), ShareConfig::new(5, 12, 12).unwrap());
    }

    #[test]
    fn published_flop_counts() {
        let base = flops_self_attention(12, N, D, None).unwrap();
        assert_eq!(base.total, 2_717_908_992);
        assert_eq!(base.saved_fraction, 0.0);

        let late = flops_self_attention(12, N, D, Some(&ShareConfig::new(5, 12, 12).unwrap())).unwrap();
        assert_eq!(late.total, 1_509_949_440);
        assert!((late.saved_fraction - 0.4444).abs() < 1e-4);

        let all = flops_self_attention(12, N, D, Some(&ShareConfig::new(1, 12, 12).unwrap())).unwrap();
        assert_eq!(all.total, 1_056_964_608);
        assert_eq!(all.per_layer.iter().sum::<u64>(), all.total);
    }

    #[test]
    fn table_column() {
        let ranges: Vec<_> = std::iter::once(None)
            .chain([11, 9, 7, 5, 3, 1].map(|s| Some(ShareConfig::new(s, 12, 12).unwrap())))
            .collect();
        let t = flops_table(N, D, 12, &ranges).unwrap();
        let g: Vec<String> = t.rows.iter().map(FlopRow::giga).collect();
        assert_eq!(g, ["2.7", "2.4", "2.1", "1.8", "1.5", "1.2", "1.1"]);
    }

    #[test]
    fn empty_and_single_layer_tables() {
        let t = flops_table(N, D, 12, &[]).unwrap();
        assert_eq!(t.to_tsv(), "shared\tflops\tgflops\tsaved_fraction\n");
        let t = flops_table(4, 3, 1, &[None]).unwrap();
        assert_eq!(t.rows[0].report.total, 3 * 4 * 9);
    }

    #[test]
    fn widening_never_increases_flops() {
        for end in 1..=12 {
            let mut prev = u64::MAX;
            for start in (1..=end).rev() {
                let c = ShareConfig::new(start, end, 12).unwrap();
                let t = flops_self_attention(12, N, D, Some(&c)).unwrap().total;
                assert!(t <= prev);
                prev = t;
            }
        }
    }

    #[test]
    fn sig_figs() {
        assert_eq!(format_sig(2.717908992, 2), "2.7");
        assert_eq!(format_sig(1.056964608, 2), "1.1");
        assert_eq!(format_sig(9.96, 2), "10");
        assert_eq!(format_sig(27.1, 2), "27");
        assert_eq!(format_sig(0.001234, 2), "0.0012");
    }
}
