//! Central finite differences against reverse-mode gradients for every
//! differentiable primitive, on randomized shapes.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtlab_core::graph::{Graph, Var};
use rtlab_core::nn::{init_params, EncoderKind, ModelSpec, Mode, NormKind, ProjectorSpec};
use rtlab_core::{Result, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SHAPES: usize = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.01 apart (keeps max-pool argmax stable).
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn loss_of(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval(inputs: &[Tensor], weights: &Tensor, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = loss_of(&mut g, out, weights).unwrap();
    g.value(loss).item()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs.
fn check(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let oshape = g.shape(out).to_vec();
    let weights = uniform(rng, &oshape, -1.0, 1.0);
    let loss = loss_of(&mut g, out, &weights).unwrap();
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.len());
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, &weights, build) - eval(&minus, &weights, build)) / (2.0 * H);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Worst relative error of one primitive over its randomized shapes.
#[derive(Debug)]
pub struct Report {
    pub name: String,
    pub shapes: usize,
    pub worst: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.shapes >= SHAPES && self.worst < TOL
    }
}

fn run(
    out: &mut Vec<Report>,
    name: &str,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>),
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SHAPES {
        let (inputs, build) = case(&mut rng);
        let err = check(&mut rng, inputs, build.as_ref());
        worst = worst.max(err);
    }
    out.push(Report {
        name: name.to_string(),
        shapes: SHAPES,
        worst,
    });
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn elementwise_ops(out: &mut Vec<Report>) {
    run(out, "add", 1, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
        (vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)], Box::new(|g, v| g.add(v[0], v[1])))
    });
    run(out, "sub", 2, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
        (vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)], Box::new(|g, v| g.sub(v[0], v[1])))
    });
    run(out, "mul", 3, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
        (vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)], Box::new(|g, v| g.mul(v[0], v[1])))
    });
    run(out, "scale", 4, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
        let c = rng.random_range(-3.0..3.0);
        (vec![uniform(rng, &s, -2.0, 2.0)], Box::new(move |g, v| Ok(g.scale(v[0], c))))
    });
}

pub fn linear_ops(out: &mut Vec<Report>) {
    run(out, "matmul", 5, |rng| {
        let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
        (
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        )
    });
    run(out, "add_bias", 6, |rng| {
        let (m, n) = (dims(rng, 1, 5), dims(rng, 1, 5));
        (
            vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        )
    });
}

pub fn convolution(out: &mut Vec<Report>) {
    run(out, "conv2d", 7, |rng| {
        let k = dims(rng, 1, 3);
        let stride = dims(rng, 1, 2);
        let padding = dims(rng, 0, 2).min(k);
        let (b, c, o) = (dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 3));
        let h = dims(rng, k.max(2), 5);
        let w = dims(rng, k.max(2), 5);
        let with_bias = rng.random::<bool>();
        let mut inputs = vec![uniform(rng, &[b, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, k, k], -1.0, 1.0)];
        if with_bias {
            inputs.push(uniform(rng, &[o], -1.0, 1.0));
        }
        (
            inputs,
            Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)),
        )
    });
}

pub fn pooling(out: &mut Vec<Report>) {
    run(out, "max_pool2", 8, |rng| {
        let s = [dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 2, 5)];
        (vec![distinct(rng, &s)], Box::new(|g, v| g.max_pool2(v[0])))
    });
    run(out, "avg_pool2", 9, |rng| {
        let s = [dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 2, 5)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.avg_pool2(v[0])))
    });
    run(out, "global_avg_pool", 10, |rng| {
        let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.global_avg_pool(v[0])))
    });
}

pub fn activations(out: &mut Vec<Report>) {
    run(out, "relu", 11, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 6)];
        (vec![away_from_zero(rng, &s)], Box::new(|g, v| Ok(g.relu(v[0]))))
    });
    run(out, "gelu", 12, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 6)];
        (vec![uniform(rng, &s, -3.0, 3.0)], Box::new(|g, v| Ok(g.gelu(v[0]))))
    });
}

fn norm_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random::<bool>() {
        vec![dims(rng, 2, 5), dims(rng, 1, 4)]
    } else {
        vec![dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)]
    }
}

pub fn normalization(out: &mut Vec<Report>) {
    run(out, "batch_norm_train", 13, |rng| {
        let s = norm_shape(rng);
        let c = s[1];
        (
            vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -1.0, 1.0)],
            Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        )
    });
    run(out, "batch_norm_eval", 14, |rng| {
        let s = norm_shape(rng);
        let c = s[1];
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        (
            vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -1.0, 1.0)],
            Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
        )
    });
    run(out, "layer_norm", 15, |rng| {
        let mut s = norm_shape(rng);
        if s.len() == 2 {
            s[1] = s[1].max(2);
        }
        let c = s[1];
        (
            vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -1.0, 1.0)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
    run(out, "l2_normalize", 16, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
        (vec![away_from_zero(rng, &s)], Box::new(|g, v| Ok(g.l2_normalize(v[0], 1e-8))))
    });
    run(out, "normalize_columns", 17, |rng| {
        let s = [dims(rng, 1, 5), dims(rng, 1, 4)];
        (vec![away_from_zero(rng, &s)], Box::new(|g, v| g.normalize_columns(v[0], 1e-8)))
    });
}

pub fn shape_and_reductions(out: &mut Vec<Report>) {
    run(out, "reshape", 18, |rng| {
        let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.reshape(v[0], vec![s[0] * s[1], s[2]])))
    });
    run(out, "flatten", 19, |rng| {
        let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 2), dims(rng, 1, 2)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.flatten(v[0])))
    });
    run(out, "sum", 20, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| Ok(g.sum(v[0]))))
    });
    run(out, "mean", 21, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
        (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| Ok(g.mean(v[0]))))
    });
}

fn probabilities(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Tensor {
    let mut t = uniform(rng, &[b, m], 0.05, 1.0);
    for row in t.data_mut().chunks_exact_mut(m) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

pub fn distributions_and_losses(out: &mut Vec<Report>) {
    run(out, "softmax", 22, |rng| {
        let s = [dims(rng, 1, 4), dims(rng, 2, 6)];
        let t = rng.random_range(0.5..2.0);
        (vec![uniform(rng, &s, -3.0, 3.0)], Box::new(move |g, v| g.softmax(v[0], t)))
    });
    run(out, "cross_entropy", 23, |rng| {
        let (b, m) = (dims(rng, 1, 4), dims(rng, 2, 6));
        let target = probabilities(rng, b, m);
        (
            vec![uniform(rng, &[b, m], 0.1, 1.0)],
            Box::new(move |g, v| g.cross_entropy(&target, v[0], 1e-12)),
        )
    });
    run(out, "softmax_cross_entropy", 24, |rng| {
        let (b, m) = (dims(rng, 1, 4), dims(rng, 2, 6));
        let target = probabilities(rng, b, m);
        (
            vec![uniform(rng, &[b, m], -3.0, 3.0)],
            Box::new(move |g, v| {
                let p = g.softmax(v[0], 1.0)?;
                g.cross_entropy(&target, p, 1e-12)
            }),
        )
    });
    run(out, "label_cross_entropy", 25, |rng| {
        let (b, k) = (dims(rng, 1, 5), dims(rng, 2, 5));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        (
            vec![uniform(rng, &[b, k], -3.0, 3.0)],
            Box::new(move |g, v| g.label_cross_entropy(v[0], &labels)),
        )
    });
}

pub fn random_two_layer_net(out: &mut Vec<Report>) {
    run(out, "two_layer", 26, |rng| {
        let (b, d, h, k) = (dims(rng, 2, 4), dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 2, 4));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        (
            vec![
                uniform(rng, &[b, d], -1.0, 1.0),
                uniform(rng, &[d, h], -1.0, 1.0),
                uniform(rng, &[h], -0.5, 0.5),
                uniform(rng, &[h, k], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let z = g.matmul(v[0], v[1])?;
                let z = g.add_bias(z, v[2])?;
                let a = g.gelu(z);
                let o = g.matmul(a, v[3])?;
                g.label_cross_entropy(o, &labels)
            }),
        )
    });
}

/// Whole-model gradients through `Trace` for every encoder, norm and
/// projector-flag combination.
pub fn model_parameter_gradients(out: &mut Vec<Report>) {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let flags = [(true, true, true), (false, true, true), (true, false, true), (true, true, false), (false, false, false)];
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for encoder in [EncoderKind::Mlp, EncoderKind::SmallCnn, EncoderKind::SmallCnnResidual] {
        for norm in [NormKind::Batch, NormKind::Layer, NormKind::Identity] {
            for &(wn, lin, fnorm) in &flags[..if encoder == EncoderKind::Mlp { 5 } else { 2 }] {
                let projector = ProjectorSpec {
                    hidden_dims: vec![3],
                    bottleneck_dim: 2,
                    out_dim: 4,
                    use_weight_norm: wn,
                    use_first_linear: lin,
                    use_feature_norm: fnorm,
                    linear_hidden: false,
                };
                let spec = match encoder {
                    EncoderKind::Mlp => ModelSpec {
                        encoder,
                        encoder_widths: vec![3],
                        embed_dim: 3,
                        norm,
                        projector,
                        input_shape: vec![3],
                        classes: None,
                    },
                    _ => ModelSpec {
                        encoder,
                        encoder_widths: vec![2, 3],
                        embed_dim: 3,
                        norm,
                        projector,
                        input_shape: vec![1, 4, 4],
                        classes: None,
                    },
                };
                // generic parameters: the small head init makes tiny nets ill-conditioned
                let mut state = init_params(&spec, cases).unwrap().with_mode(Mode::Train);
                state.params_mut().values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                let shape = [&[3][..], &spec.input_shape[..]].concat();
                let x = uniform(&mut rng, &shape, -1.0, 1.0);
                let weights = uniform(&mut rng, &[3, 4], -1.0, 1.0);
                let value = |s: &rtlab_core::ModelState| {
                    let mut g = Graph::new();
                    let t = s.trace(&mut g, &x, false).unwrap();
                    let l = loss_of(&mut g, t.output.unwrap(), &weights).unwrap();
                    g.value(l).item()
                };
                let mut g = Graph::new();
                let t = state.trace(&mut g, &x, true).unwrap();
                let l = loss_of(&mut g, t.output.unwrap(), &weights).unwrap();
                let grads = g.backward(l).unwrap();
                let analytic = t.gradient(&grads, state.layout()).unwrap();
                let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
                for j in 0..state.params().len() {
                    let mut p = state.clone();
                    p.params_mut().values_mut()[j] += H;
                    let mut m = state.clone();
                    m.params_mut().values_mut()[j] -= H;
                    let numeric = (value(&p) - value(&m)) / (2.0 * H);
                    let a = analytic.values()[j];
                    diff += (a - numeric).powi(2);
                    na += a * a;
                    nn += numeric * numeric;
                }
                worst = worst.max(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12));
                cases += 1;
            }
        }
    }
    out.push(Report {
        name: "model_parameters".into(),
        shapes: cases as usize,
        worst,
    });
}

/// Every primitive group in order.
pub fn all() -> Vec<Report> {
    let mut out = Vec::new();
    for group in GROUPS {
        group(&mut out);
    }
    out
}

pub const GROUPS: [fn(&mut Vec<Report>); 10] = [
    elementwise_ops,
    linear_ops,
    convolution,
    pooling,
    activations,
    normalization,
    shape_and_reductions,
    distributions_and_losses,
    random_two_layer_net,
    model_parameter_gradients,
];
