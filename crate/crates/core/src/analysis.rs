//! Router diagnostics: rank consistency across expert budgets and gate
//! similarity.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Batch;
use crate::error::{config_err, Error, Result};
use crate::eval::EVAL_CHUNK;
use crate::graph::Graph;
use crate::model::Model;
use crate::schedule::Routing;
use crate::tensor::{Scalar, Tensor};

/// Raw router logits of every layer for every token of one inference run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogitTrace {
    /// Per-layer expert counts used for the run.
    pub ks: Vec<usize>,
    /// One `tokens × N` matrix per layer.
    pub layers: Vec<Tensor<f32>>,
}

impl LogitTrace {
    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |t| t.rows())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Runs `model` over `data` with per-layer counts `ks`, recording the router
/// logits before the score function.
pub fn capture_trace<T: Scalar>(model: &Model<T>, data: &Batch, ks: &[usize]) -> Result<LogitTrace> {
    let routing = Routing::per_layer(ks.to_vec());
    let n = model.config.num_experts;
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); model.num_layers()];
    let seqs = data.num_sequences();
    let mut s = 0;
    while s < seqs {
        let part = data.slice(s, (s + EVAL_CHUNK).min(seqs));
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &part.inputs, part.seq_len, &routing)?;
        for (buf, layer) in per_layer.iter_mut().zip(&pass.layers) {
            buf.extend(g.value(layer.logits).data().iter().map(|v| v.f64() as f32));
        }
        s += EVAL_CHUNK;
    }
    let layers = per_layer
        .into_iter()
        .map(|d| {
            let rows = d.len() / n;
            Tensor::new(vec![rows, n], d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitTrace {
        ks: ks.to_vec(),
        layers,
    })
}

/// Ranks starting at 1, tied values sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties. `None` when the
/// lengths differ, fewer than two values are given, or either input is
/// constant.
pub fn spearman_rank<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let a: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let b: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    pearson(&average_ranks(&a), &average_ranks(&b))
}

/// Indices of the `k` largest values, lower index first on ties.
fn top_indices<T: Copy + Into<f64>>(x: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b): (f64, f64) = (x[i].into(), x[j].into());
        b.partial_cmp(&a).unwrap_or(Ordering::Equal).then(i.cmp(&j))
    });
    idx.truncate(k);
    idx
}

/// Spearman correlation of two logit vectors restricted to the union of the
/// top-`k_large` experts of `large` and the top-`k_small` experts of `small`.
pub fn focused_spearman<T: Copy + Into<f64>>(large: &[T], small: &[T], k_large: usize, k_small: usize) -> Result<Option<f64>> {
    let n = large.len();
    if small.len() != n {
        return Err(Error::Shape {
            op: "focused_spearman",
            lhs: vec![n],
            rhs: vec![small.len()],
        });
    }
    if k_large == 0 || k_small == 0 || k_large > n || k_small > n {
        return Err(config_err(format!(
            "k_large={k_large} and k_small={k_small} must lie in 1..={n}"
        )));
    }
    let mut set = top_indices(large, k_large);
    set.extend(top_indices(small, k_small));
    set.sort_unstable();
    set.dedup();
    let a: Vec<f64> = set.iter().map(|&i| large[i].into()).collect();
    let b: Vec<f64> = set.iter().map(|&i| small[i].into()).collect();
    Ok(spearman_rank(&a, &b))
}

/// Mean focused correlation per layer (rows) and small budget (columns).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationHeatmap {
    pub k_large: usize,
    pub k_smalls: Vec<usize>,
    /// `values[layer][j]` for `k_smalls[j]`; `None` when no token was defined.
    pub values: Vec<Vec<Option<f64>>>,
    /// Tokens skipped as undefined, same layout as `values`.
    pub undefined: Vec<Vec<usize>>,
    pub tokens: usize,
}

impl CorrelationHeatmap {
    /// Mean over layers of the column for `k_small`, skipping undefined cells.
    pub fn column_mean(&self, k_small: usize) -> Option<f64> {
        let j = self.k_smalls.iter().position(|&k| k == k_small)?;
        let cells: Vec<f64> = self.values.iter().filter_map(|row| row[j]).collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

/// Builds the heatmap from a reference trace at `k_large` and one trace per
/// small budget, all over the same inputs.
pub fn heatmap(large: &LogitTrace, smalls: &[(usize, LogitTrace)], k_large: usize) -> Result<CorrelationHeatmap> {
    for (k, t) in smalls {
        if t.num_layers() != large.num_layers() || t.num_tokens() != large.num_tokens() {
            return Err(Error::TraceMismatch(format!(
                "trace for k_small={k} has {} layers × {} tokens, reference has {} × {}",
                t.num_layers(),
                t.num_tokens(),
                large.num_layers(),
                large.num_tokens()
            )));
        }
    }
    let rows = (0..large.num_layers())
        .into_par_iter()
        .map(|l| {
            let big = &large.layers[l];
            let mut vals = Vec::with_capacity(smalls.len());
            let mut skipped = Vec::with_capacity(smalls.len());
            for (k_small, trace) in smalls {
                let small = &trace.layers[l];
                let (mut sum, mut count, mut undefined) = (0.0, 0usize, 0usize);
                for t in 0..big.rows() {
                    match focused_spearman(big.row(t), small.row(t), k_large, *k_small)? {
                        Some(r) => {
                            sum += r;
                            count += 1;
                        }
                        None => undefined += 1,
                    }
                }
                vals.push((count > 0).then(|| sum / count as f64));
                skipped.push(undefined);
            }
            Ok((vals, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, undefined) = rows.into_iter().unzip();
    Ok(CorrelationHeatmap {
        k_large,
        k_smalls: smalls.iter().map(|(k, _)| *k).collect(),
        values,
        undefined,
        tokens: large.num_tokens(),
    })
}

/// Traces `model` at `k_large` and at every smaller budget and aggregates them.
pub fn spearman_heatmap<T: Scalar>(model: &Model<T>, data: &Batch, k_large: usize) -> Result<CorrelationHeatmap> {
    let layers = model.num_layers();
    let large = capture_trace(model, data, &vec![k_large; layers])?;
    let smalls = (1..k_large)
        .map(|k| Ok((k, capture_trace(model, data, &vec![k; layers])?)))
        .collect::<Result<Vec<_>>>()?;
    heatmap(&large, &smalls, k_large)
}

pub fn write_heatmap_csv<W: Write>(out: &mut W, map: &CorrelationHeatmap) -> Result<()> {
    let cols: Vec<String> = map.k_smalls.iter().map(|k| k.to_string()).collect();
    writeln!(out, "layer,{}", cols.join(","))?;
    for (l, row) in map.values.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}")))
            .collect();
        writeln!(out, "{l},{}", cells.join(","))?;
    }
    Ok(())
}

/// Mean absolute off-diagonal cosine similarity between the rows of
/// `gates` (`N × d`, one gate vector per expert).
pub fn mods<T: Scalar>(gates: &Tensor<T>) -> Result<f64> {
    let n = gates.rows();
    if gates.shape().len() != 2 || n < 2 {
        return Err(config_err(format!("mods needs an N×d matrix with N >= 2, got {:?}", gates.shape())));
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = gates.row(i).iter().map(|v| v.f64()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNormRow { expert: i });
            }
            Ok(row.into_iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            total += 2.0 * dot.abs().min(1.0);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// MODS of every layer's router.
pub fn mods_profile<T: Scalar>(model: &Model<T>) -> Result<Vec<f64>> {
    (0..model.num_layers()).map(|l| mods(&model.gate_vectors(l))).collect()
}

pub fn write_mods_csv<W: Write>(out: &mut W, profile: &[f64]) -> Result<()> {
    writeln!(out, "layer,mods")?;
    for (l, m) in profile.iter().enumerate() {
        writeln!(out, "{l},{m:.6}")?;
    }
    Ok(())
}
