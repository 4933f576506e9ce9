use std::rc::Rc;

use proptest::prelude::*;

use super::*;
use crate::rng::SeededRng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn eval1(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = f(&mut g, v);
    g.value(y).clone()
}

fn loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    g.value(c).clone()
}

#[test]
fn matmul_identity_and_projector() {
    let b = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(matmul(&Tensor::eye(2), &b), b);
    let p = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let b2 = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
    assert_eq!(matmul(&p, &b2), mat(&[&[5.0, 6.0], &[0.0, 0.0]]));
}

#[test]
fn matmul_matches_loop_oracle() {
    let mut rng = SeededRng::new(11);
    for _ in 0..20 {
        let a = rng.normal_tensor(&[3, 4]);
        let b = rng.normal_tensor(&[4, 2]);
        let diff = matmul(&a, &b).distance(&loop_matmul(&a, &b)).unwrap();
        assert!(diff < 1e-12, "diff {diff}");
    }
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Sizes straddle the kernel's row and column tiles.
    #[test]
    fn matmul_matches_oracle_across_tiles(
        m in 1usize..22,
        k in 1usize..12,
        n in 1usize..27,
        ta: bool,
        tb: bool,
        seed: u64,
    ) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_tensor(&[m, k]);
        let b = rng.normal_tensor(&[k, n]);
        let want = loop_matmul(&a, &b);
        let sa = if ta { transposed(&a) } else { a };
        let sb = if tb { transposed(&b) } else { b };
        let mut g = Graph::new();
        let (va, vb) = (g.constant(sa), g.constant(sb));
        let c = g.matmul_t(va, vb, ta, tb).unwrap();
        prop_assert!(g.value(c).distance(&want).unwrap() < 1e-12);
    }
}

#[test]
fn matmul_transposed_and_batched_match_oracle() {
    let mut rng = SeededRng::new(12);
    let a = rng.normal_tensor(&[2, 3, 4]);
    let b = rng.normal_tensor(&[2, 5, 4]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul_t(va, vb, false, true).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 5]);
    for bi in 0..2 {
        let ab = Tensor::new(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
        let bb = Tensor::new(vec![5, 4], b.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data_mut()[j * 5 + i] = bb.data()[i * 4 + j];
            }
        }
        let want = loop_matmul(&ab, &bt);
        let got = &g.value(c).data()[bi * 15..(bi + 1) * 15];
        for (x, y) in got.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn unary_examples() {
    let s = eval1(Tensor::scalar(0.0), |g, x| g.sigmoid(x).unwrap());
    assert_eq!(s.item(), 0.5);
    let t = eval1(Tensor::scalar(0.0), |g, x| g.tanh(x).unwrap());
    assert_eq!(t.item(), 0.0);
    let l = eval1(Tensor::scalar(-1.0), |g, x| g.leaky_relu(x, 0.2).unwrap());
    assert!((l.item() + 0.2).abs() < 1e-15);
}

#[test]
fn unary_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
    assert!(matches!(g.unary(Unary::Exp, x), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn reduce_examples() {
    let n = eval1(Tensor::from_vec(vec![3.0, 4.0]), |g, x| g.l2norm(x, 0).unwrap());
    assert_eq!(n.item(), 5.0);
    let s = eval1(mat(&[&[1.0, 2.0], &[3.0, 4.0]]), |g, x| g.sum(x, 0).unwrap());
    assert_eq!(s.data(), &[4.0, 6.0]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.sum(x, 1), Err(crate::Error::Axis { .. })));
}

#[test]
fn mean_of_normal_draws_is_near_zero() {
    let mut rng = SeededRng::new(5);
    let m = eval1(rng.normal_tensor(&[100]), |g, x| g.mean(x, 0).unwrap());
    assert!(m.item().abs() < 3.0 / 10.0);
}

#[test]
fn softmax_examples() {
    let s = eval1(Tensor::from_vec(vec![0.0, 0.0]), |g, x| g.softmax(x, 0).unwrap());
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = eval1(Tensor::from_vec(vec![1000.0, 1000.0]), |g, x| g.softmax(x, 0).unwrap());
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = eval1(Tensor::from_vec(vec![0.0, 3f64.ln()]), |g, x| g.softmax(x, 0).unwrap());
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mask: Rc<[bool]> = vec![true, false, true, true].into();
    let x = mat(&[&[1.0, 50.0], &[2.0, 2.0]]);
    let s = eval1(x, |g, v| g.softmax_masked(v, 1, Some(mask.clone())).unwrap());
    assert_eq!(s.data(), &[1.0, 0.0, 0.5, 0.5]);
}

#[test]
fn backward_examples() {
    // y = x², x = 3
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);

    // y = Σ(A·B) ⇒ dA = ones·Bᵀ
    let mut rng = SeededRng::new(1);
    let a = rng.normal_tensor(&[2, 3]);
    let b = rng.normal_tensor(&[3, 4]);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a, true), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum_all(c).unwrap();
    let grads = g.backward_scalar(s).unwrap();
    let want = loop_matmul(&Tensor::full(&[2, 4], 1.0), &{
        let mut bt = Tensor::zeros(&[4, 3]);
        for i in 0..3 {
            for j in 0..4 {
                bt.data_mut()[j * 3 + i] = b.data()[i * 4 + j];
            }
        }
        bt
    });
    assert!(grads.get(va).unwrap().distance(&want).unwrap() < 1e-12);
}

#[test]
fn backward_rejects_seed_shape() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    let y = g.scale(x, 2.0);
    assert!(g.backward(y, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn grad_check_linear_and_constant() {
    let mut rng = SeededRng::new(2);
    let w = rng.normal_tensor(&[5]);
    let p = rng.normal_tensor(&[5]);
    let err = grad_check(
        |g, x| {
            let c = g.constant(w.clone());
            let y = g.mul(x, c)?;
            g.sum_all(y)
        },
        &p,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");

    let mut g = Graph::new();
    let x = g.leaf(p.clone(), true);
    let zero = g.scale(x, 0.0);
    let y = g.sum_all(zero).unwrap();
    let grads = g.backward_scalar(y).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_report_flags_kinks_and_resolution_floor() {
    // The first coordinate sits within one step of the leaky-relu kink.
    let p = Tensor::from_vec(vec![2e-6, 1.0, -1.0]);
    let report = grad_report(
        |g, x| {
            let y = g.leaky_relu(x, 0.1)?;
            g.sum_all(y)
        },
        &p,
        None,
    )
    .unwrap();
    assert!(report.coords[0].straddles_kink(report.resolution()));
    assert!(report.max_rel_err() > 0.1);
    let (err, kinks) = report.resolved_max_rel_err();
    assert_eq!(kinks, 1);
    assert!(err < 1e-8, "{err}");

    // A gradient far below the resolution counts as agreeing.
    let p = Tensor::from_vec(vec![0.3]);
    let report = grad_report(
        |g, x| {
            let tiny = g.scale(x, 1e-12);
            let big = g.constant(Tensor::from_vec(vec![10.0]));
            let y = g.add(tiny, big)?;
            g.sum_all(y)
        },
        &p,
        None,
    )
    .unwrap();
    assert_eq!(report.resolved_max_rel_err(), (0.0, 0));
    assert_eq!(report.value, 10.0 + 0.3e-12);
}

/// Weighted scalar readout so every output coordinate matters.
fn readout(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = SeededRng::new(seed).normal_tensor(&shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> crate::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let other = SeededRng::new(99).normal_tensor(&[3, 4]);
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.map(|v| v.abs() + 0.5);
    let o4 = SeededRng::new(98).normal_tensor(&[4, 2]);
    let o5 = SeededRng::new(97).normal_tensor(&[2, 5, 4]);
    vec![
        ("add", vec![3, 4], Box::new(move |g, x| { let c = g.constant(o1.clone()); g.add(x, c) })),
        ("mul", vec![3, 4], Box::new(move |g, x| { let c = g.constant(o2.clone()); let y = g.mul(x, c)?; g.mul(y, x) })),
        ("div", vec![3, 4], Box::new(move |g, x| { let c = g.constant(o3.clone()); let y = g.div(x, c)?; let d = g.mul(x, x)?; let d = g.add_scalar(d, 1.0); let z = g.div(c, d)?; g.add(y, z) })),
        ("sigmoid", vec![3, 4], Box::new(|g, x| g.sigmoid(x))),
        ("tanh", vec![3, 4], Box::new(|g, x| g.tanh(x))),
        ("leaky_relu", vec![3, 4], Box::new(|g, x| g.leaky_relu(x, 0.2))),
        ("exp", vec![3, 4], Box::new(|g, x| g.unary(Unary::Exp, x))),
        ("sqrt", vec![3, 4], Box::new(|g, x| { let s = g.mul(x, x)?; let s = g.add_scalar(s, 0.3); g.unary(Unary::Sqrt, s) })),
        ("neg", vec![3, 4], Box::new(|g, x| g.unary(Unary::Neg, x))),
        ("matmul", vec![3, 4], Box::new(move |g, x| { let c = g.constant(o4.clone()); g.matmul(x, c) })),
        ("matmul_tt", vec![4, 3], Box::new(|g, x| { let y = g.matmul_t(x, x, true, false)?; g.matmul_t(y, x, false, true) })),
        ("bmm", vec![2, 3, 4], Box::new(move |g, x| { let c = g.constant(o5.clone()); g.matmul_t(x, c, false, true) })),
        ("sum", vec![3, 4], Box::new(|g, x| g.sum(x, 1))),
        ("mean", vec![3, 4], Box::new(|g, x| g.mean(x, 0))),
        ("l2norm", vec![3, 4], Box::new(|g, x| g.l2norm(x, 1))),
        ("softmax", vec![3, 4], Box::new(|g, x| g.softmax(x, 1))),
        ("softmax_axis0", vec![3, 4], Box::new(|g, x| g.softmax(x, 0))),
        ("permute", vec![2, 3, 4], Box::new(|g, x| g.permute(x, &[2, 0, 1]))),
        ("broadcast", vec![3, 1], Box::new(|g, x| g.broadcast_to(x, &[2, 3, 4]))),
        ("concat", vec![3, 4], Box::new(|g, x| { let y = g.scale(x, 2.0); g.concat(&[x, y, x], 1) })),
        ("slice", vec![3, 4], Box::new(|g, x| g.slice(x, 1, 1, 2))),
        ("gather", vec![3, 4], Box::new(|g, x| g.gather_rows(x, &[2, 0, 2]))),
        ("unit_vectors", vec![3, 4], Box::new(|g, x| g.unit_vectors(x))),
        ("vn_relu", vec![3, 2], Box::new(|g, x| { let k = g.constant(SeededRng::new(9600).normal_tensor(&[3, 2])); let q = g.mul(x, x)?; let q = g.sub(q, x)?; g.vn_relu_project(q, k) })),
        ("vn_relu_k", vec![3, 2], Box::new(|g, x| { let q = g.constant(SeededRng::new(9500).normal_tensor(&[3, 2])); g.vn_relu_project(q, x) })),
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = SeededRng::new(2024);
    for (name, shape, f) in op_cases() {
        let mut worst = 0.0f64;
        for point in 0..100 {
            let p = rng.normal_tensor(&shape);
            let err = grad_check(|g, x| { let y = f(g, x)?; readout(g, y, 1000 + point) }, &p).unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(m in 1usize..5, n in 1usize..5, p in 1usize..5, q in 1usize..5, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_tensor(&[m, n]);
        let b = rng.normal_tensor(&[n, p]);
        let c = rng.normal_tensor(&[p, q]);
        let left = matmul(&matmul(&a, &b), &c);
        let right = matmul(&a, &matmul(&b, &c));
        let rel = left.distance(&right).unwrap() / left.norm().max(1e-300);
        prop_assert!(rel < 1e-10, "relative error {}", rel);
    }

    #[test]
    fn softmax_is_shift_invariant(xs in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let base = eval1(Tensor::from_vec(xs.clone()), |g, x| g.softmax(x, 0).unwrap());
        let shifted = eval1(Tensor::from_vec(xs.iter().map(|x| x + c).collect()), |g, x| g.softmax(x, 0).unwrap());
        prop_assert!(base.distance(&shifted).unwrap() < 1e-12);
        prop_assert!((base.sum() - 1.0).abs() < 1e-12);
        prop_assert!(base.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forward_ops_stay_finite(xs in proptest::collection::vec(-30.0f64..30.0, 6)) {
        let t = Tensor::new(vec![3, 2], xs).unwrap();
        for (_, shape, f) in op_cases() {
            if shape != [3, 2] {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = f(&mut g, x).unwrap();
            prop_assert!(g.value(y).is_finite());
        }
    }
}

