//! Expert-count scheduling for every training strategy.
//!
//! A strategy decides how many experts each MoE layer activates and how often
//! that decision is redrawn: never (fixed Top-k), once per optimizer step or
//! per micro-batch (batch-level randomization, broadcast to all layers), or
//! independently per layer on every forward pass (layer-wise randomization).
//! Top-p routing has no schedule; its per-token count comes from the router.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    FixedTopk,
    TopP,
    MmoeGlobalBatch,
    MmoeMicroBatch,
    MmoeLayer,
}

impl StrategyKind {
    /// The training event at which this strategy draws a new schedule.
    pub fn resample_event(self) -> GranularityEvent {
        match self {
            StrategyKind::FixedTopk | StrategyKind::TopP | StrategyKind::MmoeGlobalBatch => {
                GranularityEvent::OptimizerStep
            }
            StrategyKind::MmoeMicroBatch => GranularityEvent::MicroBatch,
            StrategyKind::MmoeLayer => GranularityEvent::ForwardPass,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GranularityEvent {
    OptimizerStep,
    MicroBatch,
    ForwardPass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub k_fixed: usize,
    pub p: f32,
    pub k_min: usize,
    pub k_max: usize,
    /// Capacity-aware sampling temperature; `None` samples uniformly.
    pub tau: Option<f32>,
    /// Mean per-layer activation budget (layer-wise strategy only).
    pub budget_avg: Option<f32>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::FixedTopk,
            k_fixed: 1,
            p: 0.5,
            k_min: 1,
            k_max: 4,
            tau: None,
            budget_avg: None,
        }
    }
}

impl StrategyConfig {
    pub fn fixed(k: usize) -> Self {
        StrategyConfig {
            kind: StrategyKind::FixedTopk,
            k_fixed: k,
            ..Default::default()
        }
    }

    pub fn top_p(p: f32) -> Self {
        StrategyConfig {
            kind: StrategyKind::TopP,
            p,
            ..Default::default()
        }
    }

    pub fn mmoe(kind: StrategyKind, k_min: usize, k_max: usize) -> Self {
        StrategyConfig {
            kind,
            k_min,
            k_max,
            ..Default::default()
        }
    }

    /// Checks the strategy against a model with `num_experts` experts per layer.
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        match self.kind {
            StrategyKind::FixedTopk => {
                if self.k_fixed == 0 || self.k_fixed > num_experts {
                    return Err(config_err(format!(
                        "k_fixed {} outside [1, {num_experts}]",
                        self.k_fixed
                    )));
                }
            }
            StrategyKind::TopP => {
                if !(self.p > 0.0 && self.p <= 1.0) {
                    return Err(config_err(format!("p {} outside (0, 1]", self.p)));
                }
            }
            _ => {
                if self.k_min == 0 || self.k_min > self.k_max || self.k_max > num_experts {
                    return Err(config_err(format!(
                        "need 1 <= k_min <= k_max <= {num_experts}, got [{}, {}]",
                        self.k_min, self.k_max
                    )));
                }
            }
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return Err(config_err(format!("tau must be positive, got {tau}")));
            }
        }
        if let Some(b) = self.budget_avg {
            if self.kind != StrategyKind::MmoeLayer {
                return Err(config_err("an activation budget requires the mmoe_layer strategy"));
            }
            if !(b >= self.k_min as f32 && b <= self.k_max as f32) {
                return Err(config_err(format!(
                    "budget_avg {b} outside [{}, {}]",
                    self.k_min, self.k_max
                )));
            }
        }
        Ok(())
    }

    /// Largest expert count this strategy can ask for; Top-p has no
    /// configured ceiling.
    pub fn max_k(&self) -> Option<usize> {
        match self.kind {
            StrategyKind::FixedTopk => Some(self.k_fixed),
            StrategyKind::TopP => None,
            _ => Some(self.k_max),
        }
    }
}

/// Per-layer expert counts for one forward pass.
#[derive(Clone, Debug)]
pub struct KSchedule {
    pub per_layer_k: Vec<usize>,
    /// Generator state before this schedule was drawn; replaying from it
    /// reproduces the schedule.
    pub seed_state: ChaCha8Rng,
}

impl KSchedule {
    pub fn mean_k(&self) -> f64 {
        self.per_layer_k.iter().sum::<usize>() as f64 / self.per_layer_k.len().max(1) as f64
    }
}

/// How each layer selects experts for one forward pass.
#[derive(Clone, Debug)]
pub enum Routing {
    TopK(KSchedule),
    /// Per-token counts come from the router at this probability threshold.
    TopP(f32),
}

impl Routing {
    /// Fixed per-layer counts with no sampling history.
    pub fn per_layer(ks: Vec<usize>) -> Self {
        Routing::TopK(KSchedule {
            per_layer_k: ks,
            seed_state: rand::SeedableRng::seed_from_u64(0),
        })
    }

    pub fn ks(&self) -> Option<&[usize]> {
        match self {
            Routing::TopK(s) => Some(&s.per_layer_k),
            Routing::TopP(_) => None,
        }
    }
}

/// Uniform integer on `[k_min, k_max]`.
pub fn sample_uniform_k<R: Rng + ?Sized>(k_min: usize, k_max: usize, rng: &mut R) -> usize {
    debug_assert!(k_min <= k_max);
    rng.gen_range(k_min..=k_max)
}

/// Temperatures at or above this are treated as the uniform limit.
pub const UNIFORM_TAU: f32 = 1e6;

/// Normalized capacity-aware weights `P(k) ∝ k^(1/τ)` over `[k_min, k_max]`.
pub fn weighted_k_probs(k_min: usize, k_max: usize, tau: f32) -> Vec<f64> {
    let exponent = if tau >= UNIFORM_TAU { 0.0 } else { 1.0 / tau as f64 };
    let w: Vec<f64> = (k_min..=k_max).map(|k| (k as f64).powf(exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draws `k` with probability proportional to `k^(1/τ)` (softmax of
/// `log k / τ`), which favours larger counts as `τ` shrinks.
pub fn sample_weighted_k<R: Rng + ?Sized>(k_min: usize, k_max: usize, tau: f32, rng: &mut R) -> usize {
    if tau >= UNIFORM_TAU {
        return sample_uniform_k(k_min, k_max, rng);
    }
    let dist = WeightedIndex::new(weighted_k_probs(k_min, k_max, tau)).expect("positive weights");
    k_min + dist.sample(rng)
}

fn sample_k<R: Rng + ?Sized>(strategy: &StrategyConfig, rng: &mut R) -> usize {
    match strategy.tau {
        Some(tau) => sample_weighted_k(strategy.k_min, strategy.k_max, tau, rng),
        None => sample_uniform_k(strategy.k_min, strategy.k_max, rng),
    }
}

/// Produces the routing plan for `num_layers` layers at a training event.
///
/// `event` must be the strategy's own resampling event (see
/// [`StrategyKind::resample_event`]); fixed Top-k and Top-p accept any event.
pub fn schedule(
    strategy: &StrategyConfig,
    num_layers: usize,
    event: GranularityEvent,
    rng: &mut ChaCha8Rng,
) -> Result<Routing> {
    let seed_state = rng.clone();
    let kind = strategy.kind;
    let fixed_kind = matches!(kind, StrategyKind::FixedTopk | StrategyKind::TopP);
    if !fixed_kind && kind.resample_event() != event {
        return Err(config_err(format!(
            "strategy {kind:?} resamples at {:?}, not {event:?}",
            kind.resample_event()
        )));
    }
    let per_layer_k = match kind {
        StrategyKind::TopP => return Ok(Routing::TopP(strategy.p)),
        StrategyKind::FixedTopk => vec![strategy.k_fixed; num_layers],
        StrategyKind::MmoeGlobalBatch | StrategyKind::MmoeMicroBatch => {
            vec![sample_k(strategy, rng); num_layers]
        }
        StrategyKind::MmoeLayer => {
            let ks: Vec<usize> = (0..num_layers).map(|_| sample_k(strategy, rng)).collect();
            match strategy.budget_avg {
                Some(b) => enforce_budget(&ks, b, strategy.k_min, strategy.k_max, rng)?,
                None => ks,
            }
        }
    };
    Ok(Routing::TopK(KSchedule {
        per_layer_k,
        seed_state,
    }))
}

/// Total activation budget `round(budget_avg × num_layers)`.
pub fn budget_total(budget_avg: f32, num_layers: usize) -> usize {
    (budget_avg as f64 * num_layers as f64).round() as usize
}

/// Caps the summed expert count of a layer-wise schedule at the activation
/// budget.
///
/// Over-budget schedules are scaled down proportionally (floored, clamped to
/// `k_min`), then the remaining slots are handed back one at a time to layers
/// still below their sampled count, visiting eligible layers in a fresh random
/// order on each pass. The result sums to exactly the budget.
pub fn enforce_budget<R: Rng + ?Sized>(
    ks: &[usize],
    budget_avg: f32,
    k_min: usize,
    k_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let layers = ks.len();
    let budget = budget_total(budget_avg, layers);
    let min_total = layers * k_min;
    if budget < min_total {
        return Err(Error::InfeasibleBudget { budget, min_total });
    }
    let total: usize = ks.iter().sum();
    if total <= budget {
        return Ok(ks.to_vec());
    }
    let mut out: Vec<usize> = ks.iter().map(|&k| (k * budget / total).max(k_min)).collect();
    let mut assigned: usize = out.iter().sum();

    // Clamping to k_min can overshoot; give slots back from the largest cuts.
    while assigned > budget {
        let mut eligible: Vec<usize> = (0..layers).filter(|&l| out[l] > k_min).collect();
        eligible.shuffle(rng);
        for l in eligible {
            if assigned == budget {
                break;
            }
            out[l] -= 1;
            assigned -= 1;
        }
    }

    let mut cap: Vec<usize> = ks.iter().map(|&k| k.min(k_max)).collect();
    while assigned < budget {
        let mut eligible: Vec<usize> = (0..layers).filter(|&l| out[l] < cap[l]).collect();
        if eligible.is_empty() {
            cap = vec![k_max; layers];
            continue;
        }
        eligible.shuffle(rng);
        for l in eligible {
            if assigned == budget {
                break;
            }
            out[l] += 1;
            assigned += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn degenerate_range() {
        let mut r = rng(1);
        assert!((0..100).all(|_| sample_uniform_k(3, 3, &mut r) == 3));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a: Vec<usize> = {
            let mut r = rng(9);
            (0..50).map(|_| sample_weighted_k(1, 6, 2.0, &mut r)).collect()
        };
        let mut r = rng(9);
        let b: Vec<usize> = (0..50).map(|_| sample_weighted_k(1, 6, 2.0, &mut r)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_probabilities() {
        let p = weighted_k_probs(1, 6, 1.0);
        assert!((p[5] - 6.0 / 21.0).abs() < 1e-12);
        let p = weighted_k_probs(1, 6, 2.0);
        let norm: f64 = (1..=6).map(|k| (k as f64).sqrt()).sum();
        assert!((norm - 10.8318).abs() < 1e-4);
        assert!((p[0] - 0.0923).abs() < 1e-4);
        assert!((p[5] - 0.2261).abs() < 1e-4);
        let p = weighted_k_probs(1, 6, 1e6);
        assert!(p.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn fixed_schedule_is_constant() {
        let s = StrategyConfig::fixed(4);
        let mut r = rng(0);
        for event in [GranularityEvent::OptimizerStep, GranularityEvent::ForwardPass] {
            let plan = schedule(&s, 6, event, &mut r).unwrap();
            assert_eq!(plan.ks().unwrap(), &[4; 6]);
        }
    }

    #[test]
    fn global_batch_broadcasts() {
        let s = StrategyConfig::mmoe(StrategyKind::MmoeGlobalBatch, 1, 6);
        let mut r = rng(3);
        let mut distinct = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let plan = schedule(&s, 5, GranularityEvent::OptimizerStep, &mut r).unwrap();
            let ks = plan.ks().unwrap();
            assert!(ks.iter().all(|&k| k == ks[0]));
            distinct.insert(ks[0]);
        }
        assert!(distinct.len() > 1);
    }

    #[test]
    fn mismatched_event_rejected() {
        let s = StrategyConfig::mmoe(StrategyKind::MmoeGlobalBatch, 1, 6);
        let err = schedule(&s, 4, GranularityEvent::ForwardPass, &mut rng(0));
        assert!(matches!(err, Err(Error::Config(_))));
        let s = StrategyConfig::mmoe(StrategyKind::MmoeLayer, 1, 6);
        assert!(schedule(&s, 4, GranularityEvent::OptimizerStep, &mut rng(0)).is_err());
    }

    #[test]
    fn top_p_is_sentinel() {
        let plan = schedule(&StrategyConfig::top_p(0.7), 4, GranularityEvent::OptimizerStep, &mut rng(0)).unwrap();
        assert!(matches!(plan, Routing::TopP(p) if p == 0.7));
    }

    #[test]
    fn seed_state_replays() {
        let s = StrategyConfig::mmoe(StrategyKind::MmoeLayer, 1, 6);
        let mut r = rng(11);
        let Routing::TopK(first) = schedule(&s, 8, GranularityEvent::ForwardPass, &mut r).unwrap() else {
            unreachable!()
        };
        let mut replay = first.seed_state.clone();
        let again = schedule(&s, 8, GranularityEvent::ForwardPass, &mut replay).unwrap();
        assert_eq!(again.ks().unwrap(), &first.per_layer_k[..]);
    }

    #[test]
    fn budget_hand_traces() {
        let mut r = rng(0);
        assert_eq!(enforce_budget(&[6, 6, 6, 6], 3.0, 1, 6, &mut r).unwrap(), vec![3, 3, 3, 3]);
        assert_eq!(enforce_budget(&[5, 1, 6, 4], 2.0, 1, 6, &mut r).unwrap(), vec![2, 1, 3, 2]);
        assert_eq!(enforce_budget(&[1, 2, 1, 2], 2.0, 1, 6, &mut r).unwrap(), vec![1, 2, 1, 2]);
    }

    #[test]
    fn budget_overshoot_from_k_min_clamp() {
        // floors [3,0,0,0] clamp to [3,1,1,1] = 6 > 5
        let out = enforce_budget(&[6, 1, 1, 1], 1.25, 1, 6, &mut rng(2)).unwrap();
        assert_eq!(out.iter().sum::<usize>(), 5);
        assert!(out.iter().all(|&k| (1..=6).contains(&k)));
    }

    #[test]
    fn infeasible_budget() {
        let err = enforce_budget(&[6, 6], 0.5, 1, 6, &mut rng(0));
        assert!(matches!(err, Err(Error::InfeasibleBudget { budget: 1, min_total: 2 })));
    }

    proptest! {
        #[test]
        fn budget_properties(ks in prop::collection::vec(1usize..=6, 1..40), avg in 1.0f32..6.0, seed in any::<u64>()) {
            let mut r = rng(seed);
            let out = enforce_budget(&ks, avg, 1, 6, &mut r).unwrap();
            let b = budget_total(avg, ks.len());
            let s: usize = ks.iter().sum();
            prop_assert_eq!(out.iter().sum::<usize>(), s.min(b));
            prop_assert!(out.iter().all(|&k| (1..=6).contains(&k)));
            prop_assert!(out.iter().zip(&ks).all(|(o, k)| o <= k));
            prop_assert_eq!(enforce_budget(&out, avg, 1, 6, &mut r).unwrap(), out);
        }
    }
}
