//! Finite-difference checks of every differentiable tape op, one op (or a
//! minimal chain) at a time.

use adpm_core::adsformer::{mhsa, AttentionWeights};
use adpm_core::gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
use adpm_core::pretrain::{hs_pair_loss, in_batch_softmax_loss, ns_pair_loss, HuffmanTree};
use adpm_core::ranking::cross_layer;
use adpm_core::{Graph, Result, Stream, Tensor, Var};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Stream::new(seed))
}

fn map(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(&shape, t.into_data().into_iter().map(f).collect()).unwrap()
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output coordinate feeds the
/// loss with a different weight.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let w = g.constant(randn(g.shape(out), 999));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check<F>(inputs: &[Tensor], build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = grad_check(inputs, build, &GradCheckOptions::default()).unwrap();
    assert!(r.checked > 0);
    r
}

fn assert_ok(name: &str, r: GradCheckReport) {
    assert!(
        r.passed(),
        "{name}: max rel {} worst {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let row = randn(&[4], 3);
    assert_ok(
        "add",
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "sub",
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.sub(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "mul",
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "add_row",
        check(&[a.clone(), row.clone()], |g, v| {
            let o = g.add_row(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "mul_row",
        check(&[a.clone(), row], |g, v| {
            let o = g.mul_row(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "scale",
        check(std::slice::from_ref(&a), |g, v| {
            let o = g.scale(v[0], -2.5);
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "mean",
        check(std::slice::from_ref(&a), |g, v| {
            let o = g.mul(v[0], v[0])?;
            Ok(g.mean(o))
        }),
    );
    assert_ok(
        "leaky_relu",
        check(std::slice::from_ref(&a), |g, v| {
            let o = g.leaky_relu(v[0], 0.2)?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "sigmoid",
        check(std::slice::from_ref(&a), |g, v| {
            let o = g.sigmoid(v[0]);
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "softmax",
        check(std::slice::from_ref(&a), |g, v| {
            let o = g.softmax(v[0]);
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "l2_normalize",
        check(&[a], |g, v| {
            let o = g.l2_normalize(v[0]);
            weighted_sum(g, o)
        }),
    );
}

#[test]
fn products() {
    let a = randn(&[3, 5], 4);
    let b = randn(&[5, 2], 5);
    let bt = randn(&[2, 5], 6);
    assert_ok(
        "matmul",
        check(&[a.clone(), b], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "matmul_nt",
        check(&[a, bt], |g, v| {
            let o = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, o)
        }),
    );
    let x = randn(&[2, 3, 4], 7);
    let y = randn(&[2, 4, 3], 8);
    let z = randn(&[2, 5, 4], 9);
    assert_ok(
        "batch_matmul",
        check(&[x.clone(), y], |g, v| {
            let o = g.batch_matmul(v[0], v[1], false)?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "batch_matmul_t",
        check(&[x, z], |g, v| {
            let o = g.batch_matmul(v[0], v[1], true)?;
            weighted_sum(g, o)
        }),
    );
}

#[test]
fn normalization() {
    let x = randn(&[5, 4], 10);
    let gain = randn(&[4], 11);
    let bias = randn(&[4], 12);
    assert_ok(
        "layer_norm",
        check(&[x.clone(), gain.clone(), bias.clone()], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "batch_norm_batch_stats",
        check(&[x.clone(), gain.clone(), bias.clone()], |g, v| {
            let (o, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
            weighted_sum(g, o)
        }),
    );
    let (m, s) = (vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.5, 2.0, 1.0]);
    assert_ok(
        "batch_norm_running_stats",
        check(&[x, gain, bias], |g, v| {
            let (o, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, Some((&m, &s)))?;
            weighted_sum(g, o)
        }),
    );
}

#[test]
fn pooling_indexing_and_layout() {
    let x = randn(&[2, 4, 3], 13);
    let mask = [true, true, false, true, true, false, false, false];
    assert_ok(
        "max_pool",
        check(std::slice::from_ref(&x), |g, v| {
            let o = g.global_max_pool(v[0], &mask)?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "avg_pool",
        check(std::slice::from_ref(&x), |g, v| {
            let o = g.global_avg_pool(v[0], &mask)?;
            weighted_sum(g, o)
        }),
    );
    let table = randn(&[6, 3], 14);
    assert_ok(
        "gather",
        check(&[table], |g, v| {
            let o = g.gather(v[0], &[0, 5, 5, 2, 1, 0], &[2, 3])?;
            weighted_sum(g, o)
        }),
    );
    let a = randn(&[2, 3], 15);
    let b = randn(&[2, 2], 16);
    assert_ok(
        "concat",
        check(&[a, b], |g, v| {
            let o = g.concat(&[v[0], v[1]])?;
            weighted_sum(g, o)
        }),
    );
    assert_ok(
        "reshape_heads",
        check(&[randn(&[2, 3, 4], 17)], |g, v| {
            let s = g.split_heads(v[0], 2)?;
            let s = g.scale(s, 1.5);
            let m = g.merge_heads(s, 2)?;
            let r = g.reshape(m, &[6, 4])?;
            weighted_sum(g, r)
        }),
    );
    assert_ok(
        "dropout_train",
        check(&[x], |g, v| {
            let o = g.dropout(v[0], 0.3, true, &mut Stream::new(5))?;
            weighted_sum(g, o)
        }),
    );
}

#[test]
fn losses() {
    let p = Tensor::new(&[4], vec![0.2, 0.7, 0.45, 0.9]).unwrap();
    assert_ok(
        "bce",
        check(&[p], |g, v| g.bce(v[0], &[1.0, 0.0, 1.0, 1.0])),
    );
    let logits = randn(&[3, 4], 18);
    let allowed = [
        true, true, false, true, true, true, true, true, false, true, true, false,
    ];
    assert_ok(
        "softmax_cross_entropy",
        check(&[logits], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 1, 2], Some(&allowed))
        }),
    );
    let cos = map(randn(&[4, 4], 19), |x| x.tanh());
    assert_ok(
        "in_batch_softmax",
        check(&[cos], |g, v| {
            in_batch_softmax_loss(g, v[0], 2, 3.0, &mut Stream::new(1))
        }),
    );
}

#[test]
fn attention_and_cross() {
    let x = randn(&[2, 3, 4], 20);
    let ws: Vec<Tensor> = (0..4)
        .map(|i| map(randn(&[4, 4], 21 + i), |w| w * 0.5))
        .collect();
    let mask = [true, true, false, true, false, false];
    let mut inputs = vec![x];
    inputs.extend(ws);
    assert_ok(
        "mhsa",
        check(&inputs, |g, v| {
            let w = AttentionWeights {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wh: v[4],
            };
            let o = mhsa(g, v[0], &mask, &w, 2)?;
            weighted_sum(g, o)
        }),
    );
    let x0 = randn(&[3, 5], 30);
    let w = map(randn(&[5, 5], 31), |w| w * 0.3);
    let b = randn(&[5], 32);
    assert_ok(
        "cross_layer",
        check(&[x0, w, b], |g, v| {
            let o = cross_layer(g, v[0], v[0], v[1], v[2])?;
            let o = cross_layer(g, v[0], o, v[1], v[2])?;
            weighted_sum(g, o)
        }),
    );
}

/// Dense gradient of a manual pair loss with respect to `(v, rows)`.
fn dense(
    v_len: usize,
    rows: &Tensor,
    gv: Vec<f64>,
    grows: Vec<(usize, Vec<f64>)>,
) -> Vec<Vec<f64>> {
    let mut g = vec![0.0; rows.len()];
    let d = rows.cols();
    for (r, grad) in grows {
        for (k, x) in grad.into_iter().enumerate() {
            g[r * d + k] += x;
        }
    }
    assert_eq!(gv.len(), v_len);
    vec![gv, g]
}

#[test]
fn skipgram_pair_losses() {
    let tree = HuffmanTree::build(&[9, 1, 4, 4, 2, 7]).unwrap();
    let v = map(randn(&[5], 40), |x| x * 0.5);
    let nodes = map(randn(&[tree.num_internal(), 5], 41), |x| x * 0.5);
    let opts = GradCheckOptions::default();
    for leaf in 0..tree.num_leaves() {
        let (path, code) = (&tree.paths[leaf], &tree.codes[leaf]);
        let (_, gv, gn) = hs_pair_loss(v.data(), &nodes, path, code);
        let analytic = dense(5, &nodes, gv, gn);
        let r = check_gradients(
            &[v.clone(), nodes.clone()],
            &analytic,
            |t| hs_pair_loss(t[0].data(), &t[1], path, code).0,
            &opts,
        );
        assert_ok("hs_pair_loss", r);
    }
    let outputs = map(randn(&[6, 5], 42), |x| x * 0.5);
    let (_, gv, go) = ns_pair_loss(v.data(), &outputs, 3, &[1, 2, 2]);
    let analytic = dense(5, &outputs, gv, go);
    let r = check_gradients(
        &[v.clone(), outputs.clone()],
        &analytic,
        |t| ns_pair_loss(t[0].data(), &t[1], 3, &[1, 2, 2]).0,
        &opts,
    );
    assert_ok("ns_pair_loss", r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_layer_norm_leaky_matmul_chain(seed in 0u64..10_000, n in 1usize..5, d in 2usize..6) {
        let x = randn(&[n, d], seed);
        let w = randn(&[d, d], seed + 1);
        let gain = randn(&[d], seed + 2);
        let bias = randn(&[d], seed + 3);
        let r = check(&[x, w, gain, bias], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.leaky_relu(h, 0.2)?;
            let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
            weighted_sum(g, h)
        });
        prop_assert!(r.passed(), "max rel {} worst {:?}", r.max_rel_error, r.worst);
    }
}
