//! On-disk formats: matrices (CSV or JSON), stack parameters, traces,
//! metrics reports and gate weights.
//!
//! Numbers are written in the shortest decimal form that parses back to the
//! same `f64`, always with a `.` separator.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smoothlab::diagnostics::{attn_layer_similarity, cos_sim, distance_to_m, ContractionReport};
use smoothlab::transformer::{BlockParams, BlockTrace, StackTrace};
use smoothlab::Matrix;

use crate::error::{io_err, parse_err, Result};

/// Round-trip decimal text for one number. Plain notation in `[1e-5, 1e16)`,
/// exponent notation outside it.
pub fn fmt_num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn is_json_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// `rows,cols` on the first line, then one matrix row per line.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|&x| fmt_num(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_to_json(m: &Matrix) -> String {
    let j = MatrixJson {
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice().to_vec(),
    };
    let mut s = serde_json::to_string(&j).expect("finite matrix serializes");
    s.push('\n');
    s
}

/// Parses either matrix format; JSON is recognized by a leading `{`.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Matrix> {
    let trimmed = text.trim_start();
    let (rows, cols, data) = if trimmed.starts_with('{') {
        let j: MatrixJson = serde_json::from_str(trimmed).map_err(|e| parse_err(path, e.to_string()))?;
        (j.rows, j.cols, j.data)
    } else {
        let mut lines = trimmed.lines();
        let header = lines.next().ok_or_else(|| parse_err(path, "empty matrix file"))?;
        let (r, c) = header
            .split_once(',')
            .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| parse_err(path, format!("first line `{header}` is not `rows,cols`")))?;
        let mut data = Vec::with_capacity(r * c);
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            for cell in line.split(',') {
                let v = parse_num(cell)
                    .ok_or_else(|| parse_err(path, format!("line {}: `{}` is not a number", ln + 2, cell.trim())))?;
                data.push(v);
            }
        }
        (r, c, data)
    };
    if data.len() != rows * cols {
        return Err(parse_err(
            path,
            format!("declared shape {rows}x{cols} needs {} values, found {}", rows * cols, data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, "matrix contains non-finite values"));
    }
    Matrix::new(rows, cols, data).map_err(|e| parse_err(path, e.to_string()))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    parse_matrix(&read_text(path)?, path)
}

/// JSON for `*.json` paths, CSV otherwise.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let text = if is_json_path(path) { matrix_to_json(m) } else { matrix_to_csv(m) };
    write_atomic(path, text.as_bytes())
}

/// A generated stack together with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackParamsFile {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub d_ff: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub seed: u64,
    pub weight_scale: f64,
    pub blocks: Vec<BlockParams>,
}

impl StackParamsFile {
    /// Checks the header fields against the blocks.
    pub fn check(&self, path: &Path) -> Result<()> {
        if self.blocks.len() != self.layers {
            return Err(parse_err(path, format!("L = {} but {} blocks", self.layers, self.blocks.len())));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let at = |field: &str, want: usize, got: usize| {
                parse_err(path, format!("blocks[{i}].{field}: expected {want}, got {got}"))
            };
            if b.d_model() != self.d {
                return Err(at("d", self.d, b.d_model()));
            }
            if b.num_heads() != self.h {
                return Err(at("heads", self.h, b.num_heads()));
            }
            if b.d_ff() != self.d_ff {
                return Err(at("d_ff", self.d_ff, b.d_ff()));
            }
            b.validate()
                .map_err(|e| parse_err(path, format!("blocks[{i}]: {e}")))?;
        }
        Ok(())
    }
}

pub fn read_params(path: &Path) -> Result<StackParamsFile> {
    let p: StackParamsFile =
        serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.to_string()))?;
    p.check(path)?;
    Ok(p)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    #[serde(rename = "H")]
    pub h: Matrix,
    pub attn: Vec<Matrix>,
    pub pre_ln1_std: Vec<f64>,
    pub pre_ln2_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_attn: Option<Matrix>,
}

/// JSON trace of a stack run. `embeddings` is `H_0`; `layers[l-1]` holds
/// layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    #[serde(rename = "L")]
    pub layers_count: usize,
    pub embeddings: Matrix,
    pub layers: Vec<TraceLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_map: Option<Vec<usize>>,
}

impl TraceFile {
    pub fn from_trace(t: &StackTrace) -> Self {
        let (n, d) = t.embeddings.shape();
        Self {
            n,
            d,
            h: t.blocks.first().map_or(0, |b| b.attn_matrices.len()),
            layers_count: t.blocks.len(),
            embeddings: t.embeddings.clone(),
            layers: t
                .blocks
                .iter()
                .map(|b| TraceLayer {
                    h: b.output.clone(),
                    attn: b.attn_matrices.clone(),
                    pre_ln1_std: b.pre_ln1_std.clone(),
                    pre_ln2_std: b.pre_ln2_std.clone(),
                    post_attn: b.post_attn.clone(),
                })
                .collect(),
            share_map: t.share_map.clone(),
        }
    }

    /// Validates every shape and rebuilds the in-memory trace; block `l`'s
    /// input is layer `l-1`'s output.
    pub fn into_trace(self, path: &Path) -> Result<StackTrace> {
        let (n, d, h) = (self.n, self.d, self.h);
        let bad = |field: String, msg: String| parse_err(path, format!("{field}: {msg}"));
        let want = |field: String, m: &Matrix, r: usize, c: usize| {
            if m.shape() != (r, c) {
                Err(bad(field, format!("expected {r}x{c}, got {}x{}", m.rows(), m.cols())))
            } else {
                Ok(())
            }
        };
        want("embeddings".into(), &self.embeddings, n, d)?;
        if self.layers.len() != self.layers_count {
            return Err(bad("L".into(), format!("{} declared, {} layers present", self.layers_count, self.layers.len())));
        }
        if let Some(map) = &self.share_map {
            if map.len() != self.layers_count {
                return Err(bad("share_map".into(), format!("{} entries for {} layers", map.len(), self.layers_count)));
            }
            if let Some(i) = map.iter().enumerate().position(|(i, &s)| s == 0 || s > i + 1) {
                return Err(bad(format!("share_map[{i}]"), format!("layer {} cannot use layer {}", i + 1, map[i])));
            }
        }
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut input = self.embeddings.clone();
        for (l, layer) in self.layers.into_iter().enumerate() {
            want(format!("layers[{l}].H"), &layer.h, n, d)?;
            if layer.attn.len() != h {
                return Err(bad(format!("layers[{l}].attn"), format!("expected {h} heads, got {}", layer.attn.len())));
            }
            for (k, a) in layer.attn.iter().enumerate() {
                want(format!("layers[{l}].attn[{k}]"), a, n, n)?;
            }
            for (field, v) in [("pre_ln1_std", &layer.pre_ln1_std), ("pre_ln2_std", &layer.pre_ln2_std)] {
                if v.len() != n {
                    return Err(bad(format!("layers[{l}].{field}"), format!("expected length {n}, got {}", v.len())));
                }
            }
            if let Some(p) = &layer.post_attn {
                want(format!("layers[{l}].post_attn"), p, n, d)?;
            }
            let output = layer.h;
            blocks.push(BlockTrace {
                input: std::mem::replace(&mut input, output.clone()),
                attn_matrices: layer.attn,
                pre_ln1_std: layer.pre_ln1_std,
                pre_ln2_std: layer.pre_ln2_std,
                post_attn: layer.post_attn,
                output,
            });
        }
        Ok(StackTrace {
            embeddings: self.embeddings,
            blocks,
            share_map: self.share_map,
        })
    }
}

pub fn read_trace(path: &Path) -> Result<StackTrace> {
    read_json::<TraceFile>(path)?.into_trace(path)
}

pub fn write_trace(path: &Path, t: &StackTrace) -> Result<()> {
    write_json(path, &TraceFile::from_trace(t))
}

pub const METRICS_HEADER: &str = "layer,cos_sim,d_M,sigma1,sigma2,sigma_product,s,lambda,v,bound_holds,attn_sim_to_next";

/// `cos_sim` is undefined for a single token or a zero row; the cell is
/// left empty then.
fn cos_cell(h: &Matrix) -> String {
    cos_sim(h).map(fmt_num).unwrap_or_default()
}

/// Metrics row for a fused output, labelled `F`.
pub fn fused_metrics_row(h: &Matrix) -> String {
    format!("F,{},{},,,,,,,,\n", cos_cell(h), fmt_num(distance_to_m(h)))
}

/// One row for `H_0`, then one per layer with its contraction quantities.
pub fn metrics_csv(trace: &StackTrace, reports: &[ContractionReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let h0 = &trace.embeddings;
    let _ = writeln!(out, "0,{},{},,,,,,,,", cos_cell(h0), fmt_num(distance_to_m(h0)));
    let sims = attn_layer_similarity(trace).unwrap_or_default();
    for (i, (b, r)) in trace.blocks.iter().zip(reports).enumerate() {
        let sim = sims.get(i).map(|&s| fmt_num(s)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            cos_cell(&b.output),
            fmt_num(distance_to_m(&b.output)),
            fmt_num(r.sigma1),
            fmt_num(r.sigma2),
            fmt_num(r.sigma1 * r.sigma2),
            fmt_num(r.s),
            fmt_num(r.lambda),
            fmt_num(r.v),
            r.bound_holds,
            sim
        );
    }
    out
}

/// Header `layer_1,…,layer_L`, then one row per token.
pub fn gate_weights_csv(w: &Matrix) -> String {
    let header: Vec<String> = (1..=w.cols()).map(|k| format!("layer_{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for r in w.row_iter() {
        let cells: Vec<String> = r.iter().map(|&x| fmt_num(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Numbers separated by commas, whitespace or newlines; `#` starts a comment.
pub fn parse_values(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v = parse_num(tok)
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, format!("line {}: `{tok}` is not a finite number", ln + 1)))?;
            out.push(v);
        }
    }
    Ok(out)
}
