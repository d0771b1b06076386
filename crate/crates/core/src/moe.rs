//! The mixture-of-experts feed-forward sublayer.
//!
//! A router maps each token to one score per expert; a selection rule (Top-k
//! or Top-p) picks a subset of experts per token and renormalizes their scores
//! into mixture weights; the layer output is the weighted sum of the selected
//! experts' outputs. Tokens are dispatched grouped by expert, so an expert
//! nobody selected is never evaluated.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{ExpertPart, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    #[default]
    Softmax,
    Sigmoid,
}

/// Expert feed-forward variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `gelu(x·W_in)·W_out`
    #[default]
    Gelu,
    /// `(silu(x·W_gate) ⊙ x·W_in)·W_out`
    GatedSilu,
}

#[derive(Clone, Debug)]
pub struct RouterWeights {
    /// `d_model × N`
    pub wg: ParamId,
    pub score_fn: ScoreFn,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub w_in: ParamId,
    pub w_gate: Option<ParamId>,
    pub w_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub layer_index: usize,
    pub router: RouterWeights,
    pub experts: Vec<Expert>,
}

/// Per-token selected experts, ordered by descending router score, with
/// their renormalized mixture weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertSelection {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f32>>,
}

impl ExpertSelection {
    pub fn num_tokens(&self) -> usize {
        self.indices.len()
    }

    /// Token rows routed to each expert, in token order.
    pub fn rows_by_expert(&self, num_experts: usize) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); num_experts];
        for (t, sel) in self.indices.iter().enumerate() {
            for &e in sel {
                rows[e].push(t);
            }
        }
        rows
    }

    /// Mean number of experts per token.
    pub fn mean_k(&self) -> f64 {
        if self.indices.is_empty() {
            return 0.0;
        }
        self.indices.iter().map(Vec::len).sum::<usize>() as f64 / self.indices.len() as f64
    }
}

/// Raw router logits and the scores derived from them.
#[derive(Clone, Copy, Debug)]
pub struct RouterOutput {
    pub logits: Var,
    pub scores: Var,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `scores = score_fn(x · W_g)`; the pre-activation logits are kept on the
    /// tape for tracing.
    pub fn router_scores<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<RouterOutput> {
        let wg = g.param(store, self.router.wg);
        let logits = g.matmul(x, wg)?;
        let scores = match self.router.score_fn {
            ScoreFn::Softmax => g.softmax(logits, 1)?,
            ScoreFn::Sigmoid => g.sigmoid(logits)?,
        };
        Ok(RouterOutput { logits, scores })
    }

    /// Applies expert `e` to the rows of `x`.
    pub fn expert_forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, e: usize, x: Var) -> Result<Var> {
        let ex = &self.experts[e];
        let w_in = g.param(store, ex.w_in);
        let w_out = g.param(store, ex.w_out);
        let up = g.matmul(x, w_in)?;
        let hidden = match ex.w_gate {
            None => g.gelu(up)?,
            Some(gate) => {
                let w_gate = g.param(store, gate);
                let gate = g.matmul(x, w_gate)?;
                let gate = g.silu(gate)?;
                g.mul(gate, up)?
            }
        };
        g.matmul(hidden, w_out)
    }

    /// `y_t = Σ_{i∈T_t} w_{t,i} · E_i(x_t)`, differentiable through both the
    /// weights (via `scores`) and the expert outputs.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        scores: Var,
        selection: &ExpertSelection,
    ) -> Result<Var> {
        let (tokens, dim) = (g.value(x).rows(), g.value(x).cols());
        if selection.num_tokens() != tokens || g.value(scores).rows() != tokens {
            return Err(Error::Shape {
                op: "moe_forward",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![selection.num_tokens()],
            });
        }
        let weights = g.routing_weights(scores, &selection.indices)?;
        let mut parts = Vec::new();
        for (e, rows) in selection.rows_by_expert(self.num_experts()).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &rows)?;
            let output = self.expert_forward(g, store, e, xe)?;
            parts.push(ExpertPart { output, expert: e, rows });
        }
        g.combine(weights, parts, dim)
    }
}

fn ranked<T: Scalar>(row: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn renormalized<T: Scalar>(row: &[T], chosen: &[usize]) -> Vec<f32> {
    let denom: f64 = chosen.iter().map(|&i| row[i].f64()).sum();
    chosen.iter().map(|&i| (row[i].f64() / denom) as f32).collect()
}

/// Picks the `k` highest-scoring experts per token (ties go to the lower
/// index) and renormalizes their scores to sum to one.
pub fn select_topk<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<ExpertSelection> {
    let n = scores.cols();
    if k == 0 || k > n {
        return Err(config_err(format!("top-k requires 1 <= k <= {n}, got {k}")));
    }
    let mut sel = ExpertSelection::default();
    for t in 0..scores.rows() {
        let row = scores.row(t);
        let mut chosen = ranked(row);
        chosen.truncate(k);
        sel.weights.push(renormalized(row, &chosen));
        sel.indices.push(chosen);
    }
    Ok(sel)
}

const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Number of leading experts (in descending-probability order) whose
/// cumulative probability first reaches `p`. The full prefix counts as exactly
/// one and shorter prefixes as strictly less, so `p = 1` always selects all.
pub fn top_p_count<T: Scalar>(sorted_probs: &[T], p: f64) -> usize {
    let n = sorted_probs.len();
    let mut cum = 0.0f64;
    for (i, &s) in sorted_probs.iter().enumerate() {
        cum += s.f64();
        let prefix = if i + 1 == n { 1.0 } else { cum.min(BELOW_ONE) };
        if prefix >= p {
            return i + 1;
        }
    }
    n
}

/// Per-token Top-p selection: the smallest descending-probability prefix with
/// cumulative mass at least `p`, renormalized like Top-k.
pub fn select_topp<T: Scalar>(scores: &Tensor<T>, p: f64) -> Result<ExpertSelection> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(config_err(format!("top-p threshold must lie in (0, 1], got {p}")));
    }
    let mut sel = ExpertSelection::default();
    let mut sorted = Vec::new();
    for t in 0..scores.rows() {
        let row = scores.row(t);
        let mut order = ranked(row);
        sorted.clear();
        sorted.extend(order.iter().map(|&i| row[i]));
        order.truncate(top_p_count(&sorted, p));
        sel.weights.push(renormalized(row, &order));
        sel.indices.push(order);
    }
    Ok(sel)
}

/// Fraction of token-slots routed to each expert.
pub fn routed_fractions(selection: &ExpertSelection, num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_experts];
    for sel in &selection.indices {
        for &e in sel {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Auxiliary load-balancing loss `coeff · N · Σ_i f_i · P_i`.
pub fn balance_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, selection: &ExpertSelection, coeff: f64) -> Result<Var> {
    if coeff < 0.0 {
        return Err(config_err("balance coefficient must be non-negative"));
    }
    let n = g.value(scores).cols();
    let frac = routed_fractions(selection, n);
    g.balance_loss(scores, &frac, coeff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn topk_renormalizes() {
        let s = select_topk(&row(&[0.4, 0.3, 0.2, 0.1]), 2).unwrap();
        assert_eq!(s.indices[0], vec![0, 1]);
        assert!((s.weights[0][0] - 4.0 / 7.0).abs() < 1e-6);
        assert!((s.weights[0][1] - 3.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn topk_full_and_single() {
        let scores = row(&[0.1, 0.6, 0.3]);
        let s = select_topk(&scores, 3).unwrap();
        assert_eq!(s.indices[0], vec![1, 2, 0]);
        for (w, i) in s.weights[0].iter().zip(&s.indices[0]) {
            assert!((*w as f64 - scores.data()[*i]).abs() < 1e-7);
        }
        let s = select_topk(&scores, 1).unwrap();
        assert_eq!((s.indices[0].clone(), s.weights[0].clone()), (vec![1], vec![1.0]));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let s = select_topk(&row(&[0.25; 4]), 2).unwrap();
        assert_eq!(s.indices[0], vec![0, 1]);
    }

    #[test]
    fn topk_range_checked() {
        assert!(matches!(select_topk(&row(&[0.5, 0.5]), 0), Err(Error::Config(_))));
        assert!(matches!(select_topk(&row(&[0.5, 0.5]), 3), Err(Error::Config(_))));
    }

    #[test]
    fn topp_cases() {
        let probs = row(&[0.5, 0.3, 0.2]);
        assert_eq!(select_topp(&probs, 0.7).unwrap().indices[0], vec![0, 1]);
        assert_eq!(select_topp(&probs, 0.5).unwrap().indices[0], vec![0]);
        assert_eq!(select_topp(&probs, 0.2).unwrap().indices[0].len(), 1);
        assert_eq!(select_topp(&probs, 1.0).unwrap().indices[0].len(), 3);
        // a prefix that rounds up to one must not cut p = 1 short
        assert_eq!(top_p_count(&[1.0f32, 1e-30], 1.0), 2);
        assert!(select_topp(&probs, 0.0).is_err());
        assert!(select_topp(&probs, 1.5).is_err());
    }

    #[test]
    fn balance_loss_values() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::full(&[4, 4], 0.25));
        let spread = ExpertSelection {
            indices: vec![vec![0], vec![1], vec![2], vec![3]],
            weights: vec![vec![1.0]; 4],
        };
        let l = balance_loss(&mut g, uniform, &spread, 0.01).unwrap();
        assert!((g.value(l).data()[0] - 0.01).abs() < 1e-15);
        let l = balance_loss(&mut g, uniform, &spread, 0.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let collapsed = ExpertSelection {
            indices: vec![vec![2]; 4],
            weights: vec![vec![1.0]; 4],
        };
        let l = balance_loss(&mut g, uniform, &collapsed, 0.5).unwrap();
        assert!((g.value(l).data()[0] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn topk_nesting(v in prop::collection::vec(0.0f64..1.0, 2..12), a in 1usize..12, b in 1usize..12) {
            let n = v.len();
            let (k1, k2) = (a.min(b).min(n), a.max(b).min(n));
            let s = row(&v);
            let small = select_topk(&s, k1).unwrap();
            let large = select_topk(&s, k2).unwrap();
            prop_assert!(small.indices[0].iter().all(|i| large.indices[0].contains(i)));
        }

        #[test]
        fn weights_sum_to_one(v in prop::collection::vec(0.01f64..1.0, 2..12), k in 1usize..12, p in 0.01f64..1.0) {
            let sum: f64 = v.iter().sum();
            let probs = row(&v.iter().map(|x| x / sum).collect::<Vec<_>>());
            for s in [select_topk(&probs, k.min(v.len())).unwrap(), select_topp(&probs, p).unwrap()] {
                let total: f64 = s.weights[0].iter().map(|&w| w as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(s.weights[0].windows(2).all(|w| w[0] >= w[1]));
            }
        }

        #[test]
        fn topk_invariant_to_logit_shift(v in prop::collection::vec(-5.0f64..5.0, 2..10), c in -50.0f64..50.0, k in 1usize..10) {
            let k = k.min(v.len());
            let a = row(&v).softmax(1).unwrap();
            let b = row(&v.iter().map(|x| x + c).collect::<Vec<_>>()).softmax(1).unwrap();
            prop_assert_eq!(select_topk(&a, k).unwrap().indices, select_topk(&b, k).unwrap().indices);
        }
    }
}
