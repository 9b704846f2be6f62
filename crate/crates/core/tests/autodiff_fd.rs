//! Finite-difference gradient checks for every differentiable op.
//!
//! The oracle below is independent of the backward pass: it re-runs the
//! forward computation with perturbed inputs and forms central-difference
//! quotients in f64. Comparison is norm-wise relative error over the whole
//! gradient vector.

use std::sync::Arc;

use sketchpad_core::graph::{AttnMask, EmptyRowPolicy, Graph, NodeId};
use sketchpad_core::rng::Rng;
use sketchpad_core::tensor::Tensor;

const H: f32 = 1e-3;
const REL_TOL: f64 = 1e-3;

/// Check analytic gradients of `build` against central finite differences
/// for every input tensor.
fn fd_check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed
            .iter()
            .map(|t| g.param(Arc::new(t.clone())))
            .collect();
        let l = build(&mut g, &ids);
        g.scalar_value(l) as f64
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(ids[i])
            .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"));
        let mut numeric = vec![0.0f64; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * H as f64);
        }
        let mut num_norm = 0.0f64;
        let mut ana_norm = 0.0f64;
        let mut diff_norm = 0.0f64;
        for j in 0..numeric.len() {
            let a = analytic[j] as f64;
            let n = numeric[j];
            num_norm += n * n;
            ana_norm += a * a;
            diff_norm += (a - n) * (a - n);
        }
        let rel = diff_norm.sqrt() / num_norm.sqrt().max(ana_norm.sqrt()).max(1e-8);
        assert!(
            rel < REL_TOL,
            "{name}: input {i} gradient mismatch, rel err {rel:.3e}"
        );
    }
}

/// Random projection to a scalar so every output element influences the loss.
fn project(g: &mut Graph, x: NodeId, rng: &mut Rng) -> NodeId {
    let w = Tensor::randn(g.value(x).shape().to_vec(), 1.0, rng);
    g.weighted_sum(x, w)
}

const SEEDS: u64 = 20;

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(seed);
        let a = Tensor::randn(vec![5, 7], 1.0, &mut rng);
        let b = Tensor::randn(vec![7, 3], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("matmul", &[a, b], move |g, ids| {
            let c = g.matmul(ids[0], ids[1]);
            project(g, c, &mut prng.clone())
        });
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(100 + seed);
        let x = Tensor::randn(vec![4, 6], 2.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("softmax", &[x], move |g, ids| {
            let y = g.softmax(ids[0]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(200 + seed);
        let x = Tensor::randn(vec![4, 8], 1.5, &mut rng);
        let gain = Tensor::randn(vec![8], 0.5, &mut rng);
        let bias = Tensor::randn(vec![8], 0.5, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("layer_norm", &[x, gain, bias], move |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(300 + seed);
        let q = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let v = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        let heads = if seed % 2 == 0 { 2 } else { 4 };
        fd_check("attention", &[q, k, v], move |g, ids| {
            let y = g.attention(
                ids[0],
                ids[1],
                ids[2],
                heads,
                &AttnMask::Full,
                EmptyRowPolicy::Error,
            );
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn attention_causal_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(400 + seed);
        let q = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let v = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("attention_causal", &[q, k, v], move |g, ids| {
            let y = g.attention(
                ids[0],
                ids[1],
                ids[2],
                2,
                &AttnMask::CausalOffset(0),
                EmptyRowPolicy::Error,
            );
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(500 + seed);
        let a = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let bias = Tensor::randn(vec![5], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("mul_add_bias", &[a.clone(), b, bias], move |g, ids| {
            let m = g.mul(ids[0], ids[1]);
            let s = g.add_bias(m, ids[2]);
            project(g, s, &mut prng.clone())
        });
        let mut prng2 = rng.split("proj2");
        fd_check("gelu", &[a.clone()], move |g, ids| {
            let y = g.gelu(ids[0]);
            project(g, y, &mut prng2.clone())
        });
        let mut prng3 = rng.split("proj3");
        fd_check("sigmoid", &[a], move |g, ids| {
            let y = g.sigmoid(ids[0]);
            project(g, y, &mut prng3.clone())
        });
    }
}

#[test]
fn exp_scale_add_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(600 + seed);
        let a = Tensor::randn(vec![2, 6], 0.5, &mut rng);
        let b = Tensor::randn(vec![2, 6], 0.5, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("exp_scale_add", &[a, b], move |g, ids| {
            let e = g.exp(ids[0]);
            let s = g.scale(ids[1], -1.7);
            let y = g.add(e, s);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn clamp_gradients_away_from_boundary() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(700 + seed);
        // Values within +/-2, clamp at +/-10: no input sits at the kink.
        let a = Tensor::randn(vec![3, 4], 0.7, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("clamp", &[a], move |g, ids| {
            let y = g.clamp(ids[0], -10.0, 10.0);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(800 + seed);
        let x = Tensor::randn(vec![2, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(vec![3], 0.5, &mut rng);
        let (stride, pad) = if seed % 2 == 0 { (1, 1) } else { (2, 0) };
        let mut prng = rng.split("proj");
        fd_check("conv2d", &[x, w, b], move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn pixel_shuffle_and_shape_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(900 + seed);
        let x = Tensor::randn(vec![8, 2, 2], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("pixel_shuffle_reshape_transpose", &[x], move |g, ids| {
            let y = g.pixel_shuffle(ids[0], 2); // [2, 4, 4]
            let flat = g.reshape(y, vec![4, 8]);
            let t = g.transpose2(flat);
            project(g, t, &mut prng.clone())
        });
    }
}

#[test]
fn select_concat_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(1000 + seed);
        let table = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let other = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut prng = rng.split("proj");
        fd_check("select_concat", &[table, other], move |g, ids| {
            // Repeated row index exercises scatter-add accumulation.
            let sel = g.select_rows(ids[0], &[0, 2, 2, 5]);
            let cat = g.concat_rows(&[sel, ids[1]]);
            project(g, cat, &mut prng.clone())
        });
    }
}

#[test]
fn ce_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(1100 + seed);
        let logits = Tensor::randn(vec![5, 7], 1.0, &mut rng);
        let targets: Vec<u32> = (0..5).map(|_| rng.below(7) as u32).collect();
        let weights = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        fd_check("ce_loss", &[logits], move |g, ids| {
            g.ce_loss(ids[0], &targets, &weights)
        });
    }
}

#[test]
fn regression_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(1200 + seed);
        let target = Arc::new(Tensor::randn(vec![4, 6], 1.0, &mut rng));
        // Keep |pred - target| well above the probe step so the finite
        // difference never straddles the L1 kink.
        let pred = {
            let mut p = (*target).clone();
            for v in p.data_mut() {
                let mag = rng.uniform_in(0.2, 1.0);
                *v += if rng.chance(0.5) { mag } else { -mag };
            }
            p
        };
        let t1 = Arc::clone(&target);
        fd_check("l1_loss", &[pred.clone()], move |g, ids| {
            g.l1_loss(ids[0], Arc::clone(&t1))
        });
        let t2 = Arc::clone(&target);
        fd_check("cosine_dist_loss", &[pred.clone()], move |g, ids| {
            g.cosine_dist_loss(ids[0], Arc::clone(&t2))
        });
        let t3 = Arc::clone(&target);
        let weight = Arc::new(Tensor::new(
            vec![4, 6],
            (0..24).map(|i| if i % 3 == 0 { 5.0 } else { 1.0 }).collect(),
        ));
        fd_check("mse_loss_weighted", &[pred.clone()], move |g, ids| {
            g.mse_loss(ids[0], Arc::clone(&t3), Some(Arc::clone(&weight)))
        });
    }
}

#[test]
fn gaussian_losses_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(1300 + seed);
        let mu = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let logvar = Tensor::randn(vec![3, 4], 0.3, &mut rng);
        let target = Arc::new(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let t = Arc::clone(&target);
        fd_check("gaussian_nll", &[mu.clone(), logvar.clone()], move |g, ids| {
            g.gaussian_nll_sum(ids[0], ids[1], Arc::clone(&t))
        });
        fd_check("kl_std_normal", &[mu, logvar], move |g, ids| {
            g.kl_std_normal_sum(ids[0], ids[1])
        });
    }
}

#[test]
fn mean_sum_gradients() {
    for seed in 0..SEEDS {
        let mut rng = Rng::from_seed(1400 + seed);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        fd_check("mean_all", &[x.clone()], |g, ids| g.mean_all(ids[0]));
        fd_check("sum_all", &[x], |g, ids| {
            let s = g.sum_all(ids[0]);
            g.scale(s, 0.25)
        });
    }
}

/// Randomized fuzz over op pipelines: finite inputs must never produce
/// NaN/Inf anywhere in the graph.
#[test]
fn no_non_finite_from_finite_inputs() {
    for seed in 0..100 {
        let mut rng = Rng::from_seed(2000 + seed);
        let mut g = Graph::new();
        g.check_finite = true; // panic on any non-finite intermediate
        let x = g.constant(Tensor::randn(vec![6, 8], 30.0, &mut rng));
        let w = g.constant(Tensor::randn(vec![8, 8], 30.0, &mut rng));
        let gain = g.constant(Tensor::full(vec![8], 1.0));
        let bias = g.constant(Tensor::zeros(vec![8]));
        let h = g.matmul(x, w);
        let n = g.layer_norm(h, gain, bias);
        let s = g.softmax(n);
        let a = g.attention(n, n, s, 2, &AttnMask::CausalOffset(0), EmptyRowPolicy::Error);
        let e = g.gelu(a);
        let l = g.mean_all(e);
        assert!(g.scalar_value(l).is_finite());
    }
}
