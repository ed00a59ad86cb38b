//! Finite-difference checks for every differentiable graph operation, with
//! respect to each of its inputs.

use cevit::gradcheck::grad_check;
use cevit::graph::{Graph, Var};
use cevit::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const TOL: f32 = 1e-3;

fn rand_tensor(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element receives a distinct upstream gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&shape, -1.0, 1.0, 99));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(|g, x| f(g, x).and_then(|y| project(g, y)), x, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

/// Same as `check` for operations that already produce a scalar.
fn check_scalar(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(f, x, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn matmul_both_operands() {
    let a = rand_tensor(&[3, 4], -1.0, 1.0, 1);
    let b = rand_tensor(&[4, 5], -1.0, 1.0, 2);
    check("matmul lhs", &a, |g, a| {
        let b = g.constant(b.clone());
        g.matmul(a, b)
    });
    check("matmul rhs", &b, |g, b| {
        let a = g.constant(a.clone());
        g.matmul(a, b)
    });
}

#[test]
fn linear_input_weight_bias() {
    let x = rand_tensor(&[2, 3, 4], -1.0, 1.0, 3);
    let w = rand_tensor(&[4, 6], -1.0, 1.0, 4);
    let b = rand_tensor(&[6], -1.0, 1.0, 5);
    check("linear x", &x, |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.linear(x, w, Some(b))
    });
    check("linear w", &w, |g, w| {
        let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
        g.linear(x, w, Some(b))
    });
    check("linear b", &b, |g, b| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        g.linear(x, w, Some(b))
    });
    check("linear without bias", &x, |g, x| {
        let w = g.constant(w.clone());
        g.linear(x, w, None)
    });
}

#[test]
fn add_mul_sum() {
    let a = rand_tensor(&[2, 5], -1.0, 1.0, 6);
    let b = rand_tensor(&[2, 5], -1.0, 1.0, 7);
    check("add", &a, |g, a| {
        let b = g.constant(b.clone());
        g.add(a, b)
    });
    check("mul", &a, |g, a| {
        let b = g.constant(b.clone());
        g.mul(a, b)
    });
    check("mul self", &a, |g, a| g.mul(a, a));
    check_scalar("sum", &a, |g, a| Ok(g.sum(a)));
}

#[test]
fn layer_norm_all_inputs() {
    let x = rand_tensor(&[3, 8], -2.0, 2.0, 8);
    let gamma = rand_tensor(&[8], 0.5, 1.5, 9);
    let beta = rand_tensor(&[8], -0.5, 0.5, 10);
    check("layer_norm x", &x, |g, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
    check("layer_norm gamma", &gamma, |g, ga| {
        let (x, be) = (g.constant(x.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
    check("layer_norm beta", &beta, |g, be| {
        let (x, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let x = rand_tensor(&[12], -3.0, 3.0, 11);
    check("gelu", &x, |g, x| Ok(g.gelu(x)));
    check("sigmoid", &x, |g, x| Ok(g.sigmoid(x)));
}

#[test]
fn softmax_each_axis() {
    let x = rand_tensor(&[2, 3, 4], -2.0, 2.0, 12);
    for axis in 0..3 {
        check(&format!("softmax axis {axis}"), &x, |g, x| g.softmax(x, axis));
    }
}

#[test]
fn attention() {
    let qkv = rand_tensor(&[2, 5, 12], -1.0, 1.0, 13);
    for heads in [1, 2] {
        check(&format!("attention {heads} heads"), &qkv, |g, qkv| g.attention(qkv, heads));
    }
}

#[test]
fn embed_and_select_tokens() {
    let patches = rand_tensor(&[2, 4, 3], -1.0, 1.0, 14);
    let cls = rand_tensor(&[3], -1.0, 1.0, 15);
    let pos = rand_tensor(&[5, 3], -1.0, 1.0, 16);
    check("embed patches", &patches, |g, p| {
        let (c, q) = (g.constant(cls.clone()), g.constant(pos.clone()));
        g.embed_tokens(p, c, q)
    });
    check("embed cls", &cls, |g, c| {
        let (p, q) = (g.constant(patches.clone()), g.constant(pos.clone()));
        g.embed_tokens(p, c, q)
    });
    check("embed pos", &pos, |g, q| {
        let (p, c) = (g.constant(patches.clone()), g.constant(cls.clone()));
        g.embed_tokens(p, c, q)
    });
    let x = rand_tensor(&[2, 5, 3], -1.0, 1.0, 17);
    for index in [0, 4] {
        check("select_token", &x, |g, x| g.select_token(x, index));
    }
}

#[test]
fn losses() {
    let p = rand_tensor(&[6], 0.05, 0.95, 18);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    check_scalar("bce", &p, |g, p| g.bce_loss(p, &labels));
    let z = rand_tensor(&[6], -4.0, 4.0, 19);
    check_scalar("sigmoid + bce", &z, |g, z| {
        let s = g.sigmoid(z);
        g.bce_loss(s, &labels)
    });
    let logits = rand_tensor(&[4, 10], -3.0, 3.0, 20);
    check_scalar("softmax cross-entropy", &logits, |g, z| g.softmax_ce_loss(z, &[3, 0, 9, 3]));
}

#[test]
fn full_encoder_block_every_input() {
    use cevit::model::{encoder_block, ModelConfig};
    let cfg = ModelConfig { embed_dim: 8, num_heads: 2, mlp_hidden: 16, num_layers: 1, ..ModelConfig::vit() };
    let shapes: Vec<Vec<usize>> = cfg
        .param_shapes()
        .into_iter()
        .filter(|(n, _)| n.starts_with("encoder.0."))
        .map(|(_, s)| s)
        .collect();
    assert_eq!(shapes.len(), 12);
    let params: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_tensor(s, -0.5, 0.5, 100 + i as u64))
        .collect();
    let x = rand_tensor(&[2, 5, 8], -1.0, 1.0, 21);

    let block = |g: &mut Graph, x: Var, layer: Vec<Var>| encoder_block(g, &cfg, &layer, x).map(|(y, _)| y);
    check("encoder block x", &x, |g, xv| {
        let layer = params.iter().map(|p| g.constant(p.clone())).collect();
        block(g, xv, layer)
    });
    for i in 0..params.len() {
        check(&format!("encoder block parameter {i}"), &params[i], |g, pv| {
            let layer = params
                .iter()
                .enumerate()
                .map(|(j, p)| if j == i { pv } else { g.constant(p.clone()) })
                .collect();
            let xc = g.constant(x.clone());
            block(g, xc, layer)
        });
    }
}
