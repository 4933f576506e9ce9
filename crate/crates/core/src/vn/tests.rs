use std::f64::consts::PI;

use super::*;
use crate::tensorcore::grad_check;

fn rel_dev(a: &Tensor, b: &Tensor) -> f64 {
    a.distance(b).unwrap() / b.norm().max(1e-12)
}

/// `||f(xR) - f(x)R|| / ||f(x)R||`.
fn equivariance_dev(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, r: &RotationMatrix) -> f64 {
    let lhs = f(&rotate(x, r).unwrap());
    let rhs = rotate(&f(x), r).unwrap();
    rel_dev(&lhs, &rhs)
}

fn random_rotations(rng: &mut SeededRng, n: usize) -> Vec<RotationMatrix> {
    (0..n).map(|_| RotationMatrix::from_angle(rng.uniform(0.0, 2.0 * PI))).collect()
}

fn with_graph(f: impl Fn(&mut Graph, Var) -> Result<Var>) -> impl Fn(&Tensor) -> Tensor {
    move |x| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }
}

#[test]
fn rotation_basics() {
    let mut rng = SeededRng::new(1);
    let x = rng.normal_tensor(&[3, 4, 2]);
    assert_eq!(rotate(&x, &RotationMatrix::from_angle(0.0)).unwrap(), x);

    let e1 = Tensor::from_vec(vec![1.0, 0.0]);
    let r = rotate(&e1, &RotationMatrix::from_angle(PI / 2.0)).unwrap();
    assert!(r.distance(&Tensor::from_vec(vec![0.0, 1.0])).unwrap() < 1e-12);

    let (t1, t2) = (0.7, -2.1);
    let twice = rotate(&rotate(&x, &RotationMatrix::from_angle(t1)).unwrap(), &RotationMatrix::from_angle(t2)).unwrap();
    let once = rotate(&x, &RotationMatrix::from_angle(t1 + t2)).unwrap();
    assert!(twice.distance(&once).unwrap() < 1e-12);

    for r in random_rotations(&mut rng, 100) {
        let m = r.matrix();
        let rtr = [
            m[0][0] * m[0][0] + m[1][0] * m[1][0],
            m[0][0] * m[0][1] + m[1][0] * m[1][1],
            m[0][1] * m[0][1] + m[1][1] * m[1][1],
        ];
        assert!((rtr[0] - 1.0).abs() < 1e-14 && rtr[1].abs() < 1e-14 && (rtr[2] - 1.0).abs() < 1e-14);
        assert!((m[0][0] * m[1][1] - m[0][1] * m[1][0] - 1.0).abs() < 1e-14);
        let rx = rotate(&x, &r).unwrap();
        for (a, b) in x.data().chunks(2).zip(rx.data().chunks(2)) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
        }
    }
}

#[test]
fn vec_feature_validates_shape() {
    assert!(VecFeature::new(Tensor::zeros(&[2, 3, 2])).is_ok());
    assert!(VecFeature::new(Tensor::zeros(&[2, 3, 3])).is_err());
    assert!(VecFeature::new(Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn vn_linear_examples() {
    let mut rng = SeededRng::new(2);
    let x = rng.normal_tensor(&[5, 3, 2]);
    let id = with_graph(|g, v| {
        let w = g.constant(Tensor::eye(3));
        vn_linear(g, w, v)
    });
    assert_eq!(id(&x), x);

    let scale = with_graph(|g, v| {
        let w = g.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        vn_linear(g, w, v)
    });
    let x1 = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
    assert_eq!(scale(&x1).data(), &[2.0, 6.0]);

    let mut g = Graph::new();
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let v = g.constant(x);
    assert!(vn_linear(&mut g, w, v).is_err());
}

#[test]
fn vn_linear_is_equivariant() {
    let mut rng = SeededRng::new(3);
    let w = rng.normal_tensor(&[6, 4]);
    let f = with_graph(move |g, v| {
        let w = g.constant(w.clone());
        vn_linear(g, w, v)
    });
    for _ in 0..20 {
        let x = rng.normal_tensor(&[7, 4, 2]);
        for r in random_rotations(&mut rng, 20) {
            assert!(equivariance_dev(&f, &x, &r) < 1e-10);
        }
    }
}

#[test]
fn vn_relu_pair_examples() {
    assert_eq!(vn_relu_pair([1.0, 0.0], [1.0, 1.0]), [1.0, 0.0]);
    assert_eq!(vn_relu_pair([1.0, 0.0], [-1.0, 0.0]), [0.0, 0.0]);
    // degenerate direction passes q through
    assert_eq!(vn_relu_pair([1.0, 2.0], [0.0, 0.0]), [1.0, 2.0]);
}

#[test]
fn vn_relu_graph_matches_pair_formula() {
    let mut rng = SeededRng::new(4);
    let q = rng.normal_tensor(&[10, 2]);
    let k = rng.normal_tensor(&[10, 2]);
    let mut g = Graph::new();
    let (vq, vk) = (g.constant(q.clone()), g.constant(k.clone()));
    let out = g.vn_relu_project(vq, vk).unwrap();
    for ((qs, ks), os) in q.data().chunks(2).zip(k.data().chunks(2)).zip(g.value(out).data().chunks(2)) {
        let want = vn_relu_pair([qs[0], qs[1]], [ks[0], ks[1]]);
        assert!((want[0] - os[0]).abs() < 1e-15 && (want[1] - os[1]).abs() < 1e-15);
    }
}

#[test]
fn vn_relu_is_equivariant_and_idempotent() {
    let mut rng = SeededRng::new(5);
    let w = rng.normal_tensor(&[4, 4]);
    let u = rng.normal_tensor(&[4, 4]);
    let f = with_graph(move |g, v| {
        let (w, u) = (g.constant(w.clone()), g.constant(u.clone()));
        vn_relu(g, v, w, u)
    });
    let x = rng.normal_tensor(&[6, 4, 2]);
    for r in random_rotations(&mut rng, 100) {
        assert!(equivariance_dev(&f, &x, &r) < 1e-10);
    }

    let q = rng.normal_tensor(&[50, 2]);
    let k = rng.normal_tensor(&[50, 2]);
    let mut g = Graph::new();
    let (vq, vk) = (g.constant(q), g.constant(k));
    let once = g.vn_relu_project(vq, vk).unwrap();
    let twice = g.vn_relu_project(once, vk).unwrap();
    assert!(g.value(once).distance(g.value(twice)).unwrap() < 1e-12);
}

#[test]
fn vn_attention_examples() {
    let mut rng = SeededRng::new(6);
    let q = rng.normal_tensor(&[1, 3, 2]);
    let k = rng.normal_tensor(&[1, 3, 2]);
    let z = rng.normal_tensor(&[1, 3, 2]);
    let mut g = Graph::new();
    let (vq, vk, vz) = (g.constant(q), g.constant(k.clone()), g.constant(z.clone()));
    let out = vn_attention(&mut g, vq, vk, vz).unwrap();
    assert!(g.value(out).distance(&z).unwrap() < 1e-15);

    // Q = 0 gives uniform weights and the mean of Z
    let k = rng.normal_tensor(&[4, 3, 2]);
    let z = rng.normal_tensor(&[4, 3, 2]);
    let mut g = Graph::new();
    let (vq, vk, vz) = (g.constant(Tensor::zeros(&[2, 3, 2])), g.constant(k), g.constant(z.clone()));
    let a = vn_attention_weights(&mut g, vq, vk).unwrap();
    assert!(g.value(a).data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    let out = vn_attention(&mut g, vq, vk, vz).unwrap();
    for m in 0..2 {
        for j in 0..6 {
            let mean: f64 = (0..4).map(|n| z.data()[n * 6 + j]).sum::<f64>() / 4.0;
            assert!((g.value(out).data()[m * 6 + j] - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn vn_attention_scores_invariant_output_equivariant() {
    let mut rng = SeededRng::new(7);
    for _ in 0..10 {
        let q = rng.normal_tensor(&[5, 3, 2]);
        let k = rng.normal_tensor(&[6, 3, 2]);
        let z = rng.normal_tensor(&[6, 3, 2]);
        let run = |q: &Tensor, k: &Tensor, z: &Tensor| {
            let mut g = Graph::new();
            let (vq, vk, vz) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(z.clone()));
            let a = vn_attention_weights(&mut g, vq, vk).unwrap();
            let o = vn_attention(&mut g, vq, vk, vz).unwrap();
            (g.value(a).clone(), g.value(o).clone())
        };
        let (a, o) = run(&q, &k, &z);
        for row in a.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for r in random_rotations(&mut rng, 10) {
            let (ar, or) = run(&rotate(&q, &r).unwrap(), &rotate(&k, &r).unwrap(), &rotate(&z, &r).unwrap());
            assert!(ar.distance(&a).unwrap() < 1e-10);
            assert!(rel_dev(&or, &rotate(&o, &r).unwrap()) < 1e-10);
        }
    }
}

#[test]
fn multi_head_attention_with_one_head_matches_single() {
    let mut rng = SeededRng::new(8);
    let x = rng.normal_tensor(&[2, 5, 4, 2]);
    let run = |heads| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = vn_attention_heads(&mut g, v, v, v, heads).unwrap();
        g.value(o).clone()
    };
    assert_eq!(run(1), {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = vn_attention(&mut g, v, v, v).unwrap();
        g.value(o).clone()
    });
    // two heads is still equivariant
    let r = RotationMatrix::from_angle(1.3);
    let f = with_graph(|g, v| vn_attention_heads(g, v, v, v, 2));
    assert!(equivariance_dev(&f, &x, &r) < 1e-10);
}

fn layernorm_fn(c: usize) -> impl Fn(&Tensor) -> Tensor {
    with_graph(move |g, v| {
        let gam = g.constant(Tensor::full(&[c], 1.0));
        let bet = g.constant(Tensor::zeros(&[c]));
        vn_layernorm(g, v, gam, bet)
    })
}

#[test]
fn vn_layernorm_examples() {
    // equal channel norms -> zero output
    let x = Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
    assert!(layernorm_fn(3)(&x).max_abs() < 1e-12);

    // output norms equal |LayerNorm(input norms)|
    let mut rng = SeededRng::new(9);
    let x = rng.normal_tensor(&[4, 5, 2]);
    let y = layernorm_fn(5)(&x);
    for t in 0..4 {
        let norms: Vec<f64> = (0..5).map(|c| {
            let i = (t * 5 + c) * 2;
            x.data()[i].hypot(x.data()[i + 1])
        }).collect();
        let mean = norms.iter().sum::<f64>() / 5.0;
        let var = norms.iter().map(|n| (n - mean).powi(2)).sum::<f64>() / 5.0;
        for (c, n) in norms.iter().enumerate() {
            let want = ((n - mean) / (var + LN_EPS).sqrt()).abs();
            let i = (t * 5 + c) * 2;
            let got = y.data()[i].hypot(y.data()[i + 1]);
            assert!((want - got).abs() < 1e-12);
        }
    }

    // a zero channel stays zero
    let mut x = rng.normal_tensor(&[1, 3, 2]);
    x.data_mut()[2] = 0.0;
    x.data_mut()[3] = 0.0;
    let y = layernorm_fn(3)(&x);
    assert_eq!(&y.data()[2..4], &[0.0, 0.0]);
    assert!(y.is_finite());
}

#[test]
fn vn_layernorm_is_equivariant() {
    let mut rng = SeededRng::new(10);
    let f = layernorm_fn(6);
    let x = rng.normal_tensor(&[3, 4, 6, 2]);
    for r in random_rotations(&mut rng, 100) {
        assert!(equivariance_dev(&f, &x, &r) < 1e-10);
    }
}

fn block_params(c: usize, rng: &mut SeededRng, zero_outputs: bool) -> Params {
    let mut p = Params::new();
    init_block(&mut p, "b", c, c, rng);
    if !zero_outputs {
        let n = BlockNames::new("b");
        p.init_uniform(&n.wo, &[c, c], c, rng);
        p.init_uniform(&n.mlp_out, &[c, c], c, rng);
        p.insert(&n.ln1_gamma, rng.uniform_tensor(&[c], 0.5, 1.5));
        p.insert(&n.ln2_beta, rng.uniform_tensor(&[c], -0.5, 0.5));
    }
    p
}

fn block_fn(p: Params, heads: usize) -> impl Fn(&Tensor) -> Tensor {
    move |x| {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let v = g.constant(x.clone());
        let y = vn_transformer_block(&mut g, v, &b, "b", heads).unwrap();
        g.value(y).clone()
    }
}

#[test]
fn zero_initialized_block_is_double_layernorm() {
    let mut rng = SeededRng::new(11);
    let c = 4;
    let f = block_fn(block_params(c, &mut rng, true), 1);
    let x = rng.normal_tensor(&[2, 5, c, 2]);
    let ln = layernorm_fn(c);
    assert!(f(&x).distance(&ln(&ln(&x))).unwrap() < 1e-12);
}

#[test]
fn block_is_equivariant() {
    let mut rng = SeededRng::new(12);
    for heads in [1, 2] {
        let f = block_fn(block_params(4, &mut rng, false), heads);
        let x = rng.normal_tensor(&[2, 6, 4, 2]);
        for r in random_rotations(&mut rng, 100) {
            assert!(equivariance_dev(&f, &x, &r) < 1e-9);
        }
    }
}

#[test]
fn block_gradient_passes_grad_check() {
    let mut rng = SeededRng::new(13);
    let p = block_params(3, &mut rng, false);
    let readout = rng.normal_tensor(&[1, 4, 3, 2]);
    let x = rng.normal_tensor(&[1, 4, 3, 2]);
    let err = grad_check(
        |g, v| {
            let b = p.bind_frozen(g);
            let y = vn_transformer_block(g, v, &b, "b", 1)?;
            let w = g.constant(readout.clone());
            let s = g.mul(y, w)?;
            g.sum_all(s)
        },
        &x,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
