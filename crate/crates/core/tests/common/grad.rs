//! Central-difference gradient checks shared by the test targets.

use mmoe::graph::{ExpertPart, Graph, Var};
use mmoe::model::{Model, ModelConfig};
use mmoe::moe::{balance_loss, FfnKind, ScoreFn};
use mmoe::schedule::Routing;
use mmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between d(loss)/d(inputs) from the tape and
/// central differences. `build` maps the input variables to a scalar loss.
pub fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("input reached").to_vec();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Reduces any node to a scalar through a fixed random weighting.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), g.value(x).shape());
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

/// Worst relative error of every differentiable op, by name.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng();
    let mut out = Vec::new();
    out.push(("matmul", check(vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 5])], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 1)
    })));
    let pair = vec![random(&mut r, &[3, 4]), random(&mut r, &[3, 4])];
    out.push(("add", check(pair.clone(), |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 2)
    })));
    out.push(("mul", check(pair, |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 3)
    })));
    let one = vec![random(&mut r, &[3, 4])];
    out.push(("scale", check(one.clone(), |g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        project(g, y, 4)
    })));
    out.push(("sum", check(one.clone(), |g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.sum(y).unwrap()
    })));
    out.push(("sigmoid", check(one.clone(), |g, v| {
        let y = g.sigmoid(v[0]).unwrap();
        project(g, y, 5)
    })));
    out.push(("gelu", check(one.clone(), |g, v| {
        let y = g.gelu(v[0]).unwrap();
        project(g, y, 6)
    })));
    out.push(("silu", check(one, |g, v| {
        let y = g.silu(v[0]).unwrap();
        project(g, y, 7)
    })));
    let x = vec![random(&mut r, &[3, 5])];
    for (name, axis) in [("softmax rows", 1), ("softmax columns", 0)] {
        out.push((name, check(x.clone(), move |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            project(g, y, 8)
        })));
    }
    out.push(("rms_norm", check(vec![random(&mut r, &[4, 6]), random(&mut r, &[6])], |g, v| {
        let y = g.rms_norm(v[0], v[1]).unwrap();
        project(g, y, 9)
    })));
    let qkv = vec![random(&mut r, &[6, 4]), random(&mut r, &[6, 4]), random(&mut r, &[6, 4])];
    out.push(("attention", check(qkv, |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, 3).unwrap();
        project(g, y, 10)
    })));
    out.push(("gather_rows", check(vec![random(&mut r, &[4, 3])], |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
        project(g, y, 11)
    })));
    out.push(("cross_entropy", check(vec![random(&mut r, &[3, 5])], |g, v| {
        g.cross_entropy(v[0], &[4, 0, 2]).unwrap()
    })));
    let selected = vec![vec![0, 2], vec![1], vec![2, 1, 0]];
    let scores = random(&mut r, &[3, 3]).data().iter().map(|x| x.abs() + 0.2).collect::<Vec<_>>();
    let scores = Tensor::new(vec![3, 3], scores).unwrap();
    out.push(("routing_weights", check(vec![scores.clone()], |g, v| {
        let w = g.routing_weights(v[0], &selected).unwrap();
        project(g, w, 12)
    })));
    let outs = vec![random(&mut r, &[2, 4]), random(&mut r, &[2, 4]), random(&mut r, &[2, 4])];
    let rows = [vec![0, 2], vec![1, 2], vec![0, 2]];
    out.push(("combine", check(vec![scores, outs[0].clone(), outs[1].clone(), outs[2].clone()], |g, v| {
        let parts = (0..3)
            .map(|e| ExpertPart {
                output: v[e + 1],
                expert: e,
                rows: rows[e].clone(),
            })
            .collect();
        let y = g.combine(v[0], parts, 4).unwrap();
        project(g, y, 13)
    })));
    out.push(("balance_loss", check(vec![random(&mut r, &[4, 3])], |g, v| {
        let p = g.softmax(v[0], 1).unwrap();
        g.balance_loss(p, &[0.5, 0.25, 0.25], 0.3).unwrap()
    })));
    out
}

/// Worst relative error over sampled parameters of a 2-layer model and the
/// number of entries compared.
pub fn model_errors(score_fn: ScoreFn, ffn: FfnKind) -> (f64, usize) {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        d_ff: 6,
        num_layers: 2,
        num_heads: 2,
        num_experts: 4,
        max_seq_len: 4,
        score_fn,
        ffn,
    };
    let mut r = rng();
    let mut model = Model::build(&cfg, &mut r).unwrap().cast::<f64>();
    // Larger weights than the default init keep gradients well above the
    // finite-difference noise floor.
    for p in model.params.iter_mut() {
        if p.value.shape().len() == 2 {
            for x in p.value.data_mut() {
                *x *= 10.0;
            }
        }
    }
    let inputs: Vec<usize> = (0..8).map(|_| r.gen_range(0..7)).collect();
    let targets: Vec<usize> = (0..8).map(|_| r.gen_range(0..7)).collect();
    let routing = Routing::per_layer(vec![2, 3]);
    let loss_of = |m: &Model<f64>| -> (f64, Vec<Vec<usize>>) {
        let mut g = Graph::new();
        let pass = m.forward(&mut g, &inputs, 4, &routing).unwrap();
        let ce = g.cross_entropy(pass.logits, &targets).unwrap();
        let mut total = ce;
        for l in &pass.layers {
            let b = balance_loss(&mut g, l.scores, &l.selection, 0.05).unwrap();
            total = g.add(total, b).unwrap();
        }
        let sel = pass.layers.iter().flat_map(|l| l.selection.indices.clone()).collect();
        (g.value(total).data()[0], sel)
    };
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &inputs, 4, &routing).unwrap();
    let ce = g.cross_entropy(pass.logits, &targets).unwrap();
    let mut total = ce;
    for l in &pass.layers {
        let b = balance_loss(&mut g, l.scores, &l.selection, 0.05).unwrap();
        total = g.add(total, b).unwrap();
    }
    model.params.zero_grad();
    g.backward_into(total, &mut model.params).unwrap();
    let (_, base_sel) = loss_of(&model);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = model.params.find(&name).unwrap();
        let len = model.params.value(id).len();
        for j in (0..len).step_by(len.div_ceil(6)) {
            let analytic = model.params.value(id).grad().unwrap()[j];
            let orig = model.params.value(id).data()[j];
            model.params.get_mut(id).value.data_mut()[j] = orig + H;
            let (lp, sp) = loss_of(&model);
            model.params.get_mut(id).value.data_mut()[j] = orig - H;
            let (lm, sm) = loss_of(&model);
            model.params.get_mut(id).value.data_mut()[j] = orig;
            // Routing decisions are piecewise constant; skip entries whose
            // perturbation flips a selection.
            if sp != base_sel || sm != base_sel {
                continue;
            }
            worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * H)));
            checked += 1;
        }
    }
    (worst, checked)
}
