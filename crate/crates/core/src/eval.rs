//! Evaluation under caller-chosen per-layer expert counts.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::model::{argmax_rows, token_losses, Model};
use crate::schedule::Routing;
use crate::tensor::Scalar;

/// Expert counts for consecutive groups of layers, e.g. `3-3-2-2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub group_ks: Vec<usize>,
}

impl ActivationPattern {
    pub fn new(group_ks: Vec<usize>) -> Result<Self> {
        if group_ks.is_empty() || group_ks.contains(&0) {
            return Err(config_err("a pattern needs at least one group and every k >= 1"));
        }
        Ok(ActivationPattern { group_ks })
    }

    /// The same `k` in every layer.
    pub fn flat(k: usize) -> Self {
        ActivationPattern { group_ks: vec![k] }
    }

    pub fn num_groups(&self) -> usize {
        self.group_ks.len()
    }

    pub fn max_k(&self) -> usize {
        self.group_ks.iter().copied().max().unwrap_or(0)
    }
}

impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.group_ks.iter().map(|k| k.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for ActivationPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ks = s
            .split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|_| config_err(format!("bad pattern '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        ActivationPattern::new(ks)
    }
}

/// Per-layer counts for `pattern` over `num_layers` layers. Each group covers a
/// contiguous span; when the groups do not divide the layers evenly the
/// earliest groups get one extra layer each.
pub fn expand_pattern(pattern: &ActivationPattern, num_layers: usize) -> Result<Vec<usize>> {
    let groups = pattern.num_groups();
    if groups == 0 || groups > num_layers {
        return Err(config_err(format!(
            "pattern {pattern} has {groups} groups for {num_layers} layers"
        )));
    }
    let (base, extra) = (num_layers / groups, num_layers % groups);
    let mut ks = Vec::with_capacity(num_layers);
    for (g, &k) in pattern.group_ks.iter().enumerate() {
        let span = base + usize::from(g < extra);
        ks.extend(std::iter::repeat(k).take(span));
    }
    Ok(ks)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub pattern: ActivationPattern,
    /// Mean of the expanded per-layer schedule.
    pub avg_k: f64,
    /// Mean next-token cross-entropy.
    pub loss: f64,
    pub perplexity: f64,
    /// Argmax accuracy on answer positions (all positions when the task marks none).
    pub accuracy: f64,
    pub tokens: usize,
}

/// Sequences per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Evaluates `model` with per-layer counts `ks` over every sequence in `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, ks: &[usize], data: &Batch) -> Result<EvalReport> {
    evaluate_chunked(model, ks, data, EVAL_CHUNK)
}

/// As [`evaluate`], running `chunk` sequences per forward pass.
pub fn evaluate_chunked<T: Scalar>(model: &Model<T>, ks: &[usize], data: &Batch, chunk: usize) -> Result<EvalReport> {
    if ks.len() != model.num_layers() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![ks.len()],
            rhs: vec![model.num_layers()],
        });
    }
    let routing = Routing::per_layer(ks.to_vec());
    let mut losses = Vec::with_capacity(data.num_tokens());
    let mut correct = Vec::with_capacity(data.num_tokens());
    let seqs = data.num_sequences();
    let chunk = chunk.max(1);
    let mut s = 0;
    while s < seqs {
        let part = data.slice(s, (s + chunk).min(seqs));
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &part.inputs, part.seq_len, &routing)?;
        let logits = g.value(pass.logits);
        if let Some(&bad) = part.targets.iter().find(|&&t| t >= logits.cols()) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: logits.cols(),
            });
        }
        losses.extend(token_losses(logits, &part.targets));
        correct.extend(argmax_rows(logits).into_iter().zip(&part.targets).map(|(p, &t)| p == t));
        s += chunk;
    }
    let tokens = losses.len();
    let loss = losses.iter().sum::<f64>() / tokens.max(1) as f64;
    let scored: Vec<bool> = if data.answer.iter().any(|&a| a) {
        correct.iter().zip(&data.answer).filter(|(_, &a)| a).map(|(&c, _)| c).collect()
    } else {
        correct
    };
    let accuracy = scored.iter().filter(|&&c| c).count() as f64 / scored.len().max(1) as f64;
    Ok(EvalReport {
        pattern: ActivationPattern { group_ks: ks.to_vec() },
        avg_k: ks.iter().sum::<usize>() as f64 / ks.len() as f64,
        loss,
        perplexity: loss.exp(),
        accuracy,
        tokens,
    })
}

/// Evaluates one activation pattern.
pub fn evaluate_pattern<T: Scalar>(model: &Model<T>, pattern: &ActivationPattern, data: &Batch) -> Result<EvalReport> {
    let ks = expand_pattern(pattern, model.num_layers())?;
    let mut report = evaluate(model, &ks, data)?;
    report.pattern = pattern.clone();
    Ok(report)
}

/// One report per pattern, in order.
pub fn sweep<T: Scalar>(model: &Model<T>, patterns: &[ActivationPattern], data: &Batch) -> Result<Vec<EvalReport>> {
    patterns.iter().map(|p| evaluate_pattern(model, p, data)).collect()
}

pub const EVAL_CSV_HEADER: &str = "pattern,avg_k,loss,perplexity,accuracy,tokens";

pub fn write_eval_csv<W: Write>(out: &mut W, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "{EVAL_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.pattern, r.avg_k, r.loss, r.perplexity, r.accuracy, r.tokens
        )?;
    }
    Ok(())
}
