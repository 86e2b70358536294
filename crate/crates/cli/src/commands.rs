//! One function per subcommand. Anything meant for the terminal goes to the
//! `out` writer so callers can capture it.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use smoothlab::diagnostics::{check_stack, kde, sigma_product, LEMMA1_NAMES};
use smoothlab::fusion::{concat_fuse, gate_fuse, max_fuse, ConcatParams, FusionInput, GateParams};
use smoothlab::graphview::{export_graph, AttentionGraph, GraphFormat, DEFAULT_EDGE_THRESHOLD};
use smoothlab::rng::derive_seed;
use smoothlab::sharing::{flops_table, ShareConfig};
use smoothlab::transformer::{random_matrix, random_stack, stack_forward};
use smoothlab::trials::{lemma1_trial, block_trial, TrialSizes};

use crate::error::{io_err, usage, CliError, Result};
use crate::formats::{
    fmt_num, fused_metrics_row, gate_weights_csv, metrics_csv, parse_values, read_json, read_matrix, read_params,
    read_text, read_trace, write_atomic, write_json, write_matrix, write_trace, StackParamsFile,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SMOOTHLAB_THREADS";

/// Seed of the embeddings written next to generated parameters.
pub fn embeddings_seed(seed: u64) -> u64 {
    derive_seed(seed, u64::MAX)
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub dff: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    /// Weights are uniform in [-scale, scale].
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    /// Stack parameter file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write seeded `n × d` embeddings (CSV, or JSON for `*.json`).
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
}

pub fn gen(a: &GenArgs) -> Result<()> {
    if a.layers == 0 || a.n == 0 {
        return Err(usage("--layers and --n must be at least 1"));
    }
    let blocks = random_stack(a.seed, a.n, a.d, a.heads, a.dff, a.layers, a.scale)?;
    let file = StackParamsFile {
        n: a.n,
        d: a.d,
        h: a.heads,
        d_ff: a.dff,
        layers: a.layers,
        seed: a.seed,
        weight_scale: a.scale,
        blocks,
    };
    write_json(&a.out, &file)?;
    if let Some(path) = &a.embeddings_out {
        write_matrix(path, &random_matrix(embeddings_seed(a.seed), a.n, a.d, 1.0))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Layers sharing one attention, `a..b` (1-based, inclusive).
    #[arg(long)]
    pub share: Option<String>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Metrics CSV; printed when omitted.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

pub fn run(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let params = read_params(&a.params)?;
    let share = a
        .share
        .as_deref()
        .map(|s| ShareConfig::parse(s, params.layers))
        .transpose()
        .map_err(|e| usage(format!("--share: {e}")))?;
    let x0 = read_matrix(&a.embeddings)?;
    if x0.cols() != params.d {
        return Err(crate::error::parse_err(
            &a.embeddings,
            format!("embeddings have {} columns, params have d = {}", x0.cols(), params.d),
        ));
    }
    let trace = stack_forward(&x0, &params.blocks, share.as_ref())?;
    let report = check_stack(&trace, &params.blocks)?;
    let csv = metrics_csv(&trace, &report.layers);
    if let Some(path) = &a.trace_out {
        write_trace(path, &trace)?;
    }
    match &a.metrics_out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes()).map_err(io_err("<stdout>"))?,
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Largest token count.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Largest model width.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Largest head count for block trials.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Largest feed-forward width for block trials.
    #[arg(long, default_value_t = 32)]
    pub dff: usize,
    /// Per-check slack CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const SLACK_HEADER: &str = "trial,seed,check,lhs,rhs,slack,holds";

/// Slack rows and the first failing check of one trial.
struct TrialOutcome {
    rows: String,
    failure: Option<&'static str>,
}

fn run_trial(trial: usize, seed: u64, a: &VerifyArgs) -> Result<TrialOutcome> {
    let mut rows = String::new();
    let mut failure = None;
    let mut row = |check: &'static str, lhs: f64, rhs: f64, slack: f64, holds: bool| {
        rows.push_str(&format!(
            "{trial},{seed},{check},{},{},{},{holds}\n",
            fmt_num(lhs),
            fmt_num(rhs),
            fmt_num(slack)
        ));
        if !holds && failure.is_none() {
            failure = Some(check);
        }
    };
    let lemma = lemma1_trial(seed, TrialSizes { max_n: a.n, max_d: a.d, max_heads: 1, max_dff: 1 })?;
    for (name, c) in LEMMA1_NAMES.iter().zip(lemma.report.records()) {
        row(name, c.lhs, c.rhs, c.slack, c.holds());
    }
    let block = block_trial(seed, TrialSizes { max_n: a.n, max_d: a.d, max_heads: a.heads, max_dff: a.dff })?;
    let r = &block.report;
    row("contraction", r.dm_out, r.v * r.dm_in, r.slack(), r.bound_holds);
    Ok(TrialOutcome { rows, failure })
}

/// Worker count from [`THREADS_ENV`], if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Some(k)),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs the seeded inequality trials. Rows are ordered by trial index
/// regardless of which worker finished first.
pub fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if a.n == 0 || a.d == 0 || a.heads == 0 || a.dff == 0 {
        return Err(usage("--n, --d, --heads and --dff must be at least 1"));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = thread_cap()? {
        pool = pool.num_threads(k);
    }
    let pool = pool.build().map_err(|e| usage(format!("thread pool: {e}")))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        (0..a.trials)
            .into_par_iter()
            .map(|i| run_trial(i, derive_seed(a.seed, i as u64), a))
            .collect::<Result<_>>()
    })?;

    let mut csv = String::from(SLACK_HEADER);
    csv.push('\n');
    outcomes.iter().for_each(|o| csv.push_str(&o.rows));
    if let Some(path) = &a.out {
        write_atomic(path, csv.as_bytes())?;
    }
    let failures: Vec<(usize, &str)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.failure.map(|f| (i, f)))
        .collect();
    if let Some(&(i, check)) = failures.first() {
        return Err(CliError::Verification(format!(
            "{} of {} trials violated a bound; first: trial {i}, check {check}, trial seed {} (--seed {})",
            failures.len(),
            a.trials,
            derive_seed(a.seed, i as u64),
            a.seed
        )));
    }
    writeln!(out, "{} trials, 0 violations", a.trials).map_err(io_err("<stdout>"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Concat,
    Max,
    Gate,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// JSON parameters: `{"alphas": [...]}` for concat, `{"w": [...], "b": x}` for gate.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Fused `n × d` matrix.
    #[arg(long)]
    pub out: PathBuf,
    /// Gate importance weights CSV.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// Metrics CSV to which an `F` row is appended.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

/// Fuses layers `1..=L` of a trace.
pub fn fuse(a: &FuseArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    if trace.blocks.is_empty() {
        return Err(crate::error::parse_err(&a.trace, "trace has no layers to fuse"));
    }
    if a.weights_out.is_some() && a.strategy != Strategy::Gate {
        return Err(usage("--weights-out only applies to --strategy gate"));
    }
    let input = FusionInput::new(trace.blocks.iter().map(|b| b.output.clone()).collect())?;
    let fused = match a.strategy {
        Strategy::Max => {
            if a.params.is_some() {
                return Err(usage("--strategy max takes no --params"));
            }
            max_fuse(&input)
        }
        Strategy::Concat => {
            let p = match &a.params {
                Some(path) => read_json::<ConcatParams>(path)?,
                None => ConcatParams::uniform(input.num_layers()),
            };
            concat_fuse(&input, &p)?
        }
        Strategy::Gate => {
            let path = a.params.as_ref().ok_or_else(|| usage("--strategy gate requires --params"))?;
            let p: GateParams = read_json(path)?;
            let (fused, weights) = gate_fuse(&input, &p)?;
            if let Some(w) = &a.weights_out {
                write_atomic(w, gate_weights_csv(weights.matrix()).as_bytes())?;
            }
            fused
        }
    };
    write_matrix(&a.out, &fused)?;
    if let Some(path) = &a.metrics {
        let mut text = read_text(path)?;
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&fused_metrics_row(&fused));
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormatArg {
    Dot,
    EdgeList,
}

impl From<GraphFormatArg> for GraphFormat {
    fn from(f: GraphFormatArg) -> Self {
        match f {
            GraphFormatArg::Dot => GraphFormat::Dot,
            GraphFormatArg::EdgeList => GraphFormat::EdgeList,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// 1-based layer.
    #[arg(long)]
    pub layer: usize,
    /// 1-based head.
    #[arg(long, default_value_t = 1)]
    pub head: usize,
    #[arg(long, value_enum, default_value_t = GraphFormatArg::Dot)]
    pub format: GraphFormatArg,
    /// Edges with weight at or below this are dropped.
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn graph(a: &GraphArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let l = trace.num_layers();
    let block = a
        .layer
        .checked_sub(1)
        .and_then(|i| trace.blocks.get(i))
        .ok_or_else(|| usage(format!("--layer {} is not in 1..={l}", a.layer)))?;
    let heads = block.attn_matrices.len();
    let attn = a
        .head
        .checked_sub(1)
        .and_then(|i| block.attn_matrices.get(i))
        .ok_or_else(|| usage(format!("--head {} is not in 1..={heads}", a.head)))?;
    if !(0.0..1.0).contains(&a.threshold) {
        return Err(usage(format!("--threshold must lie in [0, 1), got {}", a.threshold)));
    }
    let g = AttentionGraph::from_attention(attn)?;
    let text = export_graph(&g, a.format.into(), a.threshold)?;
    write_atomic(&a.out, text.as_bytes())
}

/// `lo:hi:steps` with `steps ≥ 2` evenly spaced points including both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, steps] = parts[..] else {
            return Err(format!("`{s}` is not lo:hi:steps"));
        };
        let num = |t: &str| t.trim().parse::<f64>().ok().filter(|v| v.is_finite());
        let (Some(lo), Some(hi)) = (num(lo), num(hi)) else {
            return Err(format!("`{s}`: bounds must be finite numbers"));
        };
        let steps: usize = steps.trim().parse().map_err(|_| format!("`{s}`: steps must be an integer"))?;
        if steps < 2 || lo >= hi {
            return Err(format!("`{s}`: need lo < hi and steps >= 2"));
        }
        Ok(Grid { lo, hi, steps })
    }
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| if i + 1 == self.steps { self.hi } else { self.lo + h * i as f64 })
            .collect()
    }
}

/// Points in the default grid.
pub const DEFAULT_GRID_STEPS: usize = 401;

#[derive(Debug, Clone, Args)]
pub struct KdeArgs {
    /// File of numbers separated by commas, spaces or newlines.
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    pub values: Option<PathBuf>,
    /// Trace files; each contributes its last layer's σ₁σ₂.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Kernel bandwidth; Scott's rule when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Evaluation grid; defaults to the sample range padded by four bandwidths.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<Grid>,
    /// `x,density` CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn kde_cmd(a: &KdeArgs, out: &mut dyn Write) -> Result<()> {
    let samples = match &a.values {
        Some(path) => parse_values(&read_text(path)?, path)?,
        None => a
            .trace
            .iter()
            .map(|p| {
                let t = read_trace(p)?;
                if t.num_layers() == 0 {
                    return Err(crate::error::parse_err(p, "trace has no layers"));
                }
                Ok(sigma_product(&t, t.num_layers())?)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if samples.is_empty() {
        return Err(usage("no samples to estimate a density from"));
    }
    if let Some(b) = a.bandwidth {
        if !(b > 0.0 && b.is_finite()) {
            return Err(usage(format!("--bandwidth must be positive, got {b}")));
        }
    }
    let est = kde(&samples, a.bandwidth)?;
    let grid = a.grid.unwrap_or_else(|| {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Grid {
            lo: lo - 4.0 * est.bandwidth,
            hi: hi + 4.0 * est.bandwidth,
            steps: DEFAULT_GRID_STEPS,
        }
    });
    let mut csv = String::from("x,density\n");
    for x in grid.points() {
        csv.push_str(&format!("{},{}\n", fmt_num(x), fmt_num(est.density(x))));
    }
    write_atomic(&a.out, csv.as_bytes())?;
    let above = samples.iter().filter(|&&s| s > 1.0).count() as f64 / samples.len() as f64;
    writeln!(out, "samples\t{}\nbandwidth\t{}\nfraction_above_1\t{}", samples.len(), fmt_num(est.bandwidth), fmt_num(above))
        .map_err(io_err("<stdout>"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Tsv,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct ShareTableArgs {
    #[arg(long, default_value_t = 128)]
    pub n: u64,
    #[arg(long, default_value_t = 768)]
    pub d: u64,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    /// `none` or `a..b`; repeat for several rows. Baseline only when omitted.
    #[arg(long)]
    pub share: Vec<String>,
    #[arg(long, value_enum, default_value_t = TableFormat::Tsv)]
    pub format: TableFormat,
    /// Printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn share_table(a: &ShareTableArgs, out: &mut dyn Write) -> Result<()> {
    let ranges = if a.share.is_empty() {
        vec![None]
    } else {
        a.share
            .iter()
            .map(|s| match s.trim() {
                "none" => Ok(None),
                s => ShareConfig::parse(s, a.layers).map(Some).map_err(|e| usage(format!("--share: {e}"))),
            })
            .collect::<Result<Vec<_>>>()?
    };
    let table = flops_table(a.n, a.d, a.layers, &ranges).map_err(|e| usage(e.to_string()))?;
    let text = match a.format {
        TableFormat::Tsv => table.to_tsv(),
        TableFormat::Text => table.to_text(),
    };
    match &a.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(io_err("<stdout>")),
    }
}
