use std::sync::Arc;

use ndarray::array;
use rand::Rng as _;

use super::*;
use crate::fd::max_rel_error;
use crate::graph::CsrAdjacency;
use crate::{seeded_rng, CieError, Matrix};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_identity_and_projector() {
    let mut t = Tape::new();
    let i2 = t.leaf(Matrix::eye(2));
    let b = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
    let out = t.matmul(i2, b).unwrap();
    assert_eq!(t.value(out), &array![[1.0, 2.0], [3.0, 4.0]]);

    let p = t.leaf(array![[1.0, 0.0], [0.0, 0.0]]);
    let v = t.leaf(array![[5.0], [7.0]]);
    let out = t.matmul(p, v).unwrap();
    assert_eq!(t.value(out), &array![[5.0], [0.0]]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(Matrix::zeros((2, 3)));
    let b = t.leaf(Matrix::zeros((2, 3)));
    match t.matmul(a, b) {
        Err(CieError::Dimension { left, right, .. }) => {
            assert_eq!(left, (2, 3));
            assert_eq!(right, (2, 3));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = max_rel_error(&[random(3, 3, 1), random(3, 3, 2)], 1e-5, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        Ok(t.sum(p))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_values() {
    let mut t = Tape::new();
    let a = t.leaf(array![[2.0, 3.0]]);
    let b = t.leaf(array![[4.0, 5.0]]);
    let h = t.hadamard(a, b).unwrap();
    assert_eq!(t.value(h), &array![[8.0, 15.0]]);
    let x = t.leaf(array![[-1.0, 2.0]]);
    let l = t.leaky_relu(x, 0.2);
    assert_eq!(t.value(l), &array![[-0.2, 2.0]]);
    let i = i2(&mut t);
    assert!(matches!(t.add(a, i), Err(CieError::Dimension { .. })));
    let z = t.leaf(array![[1.0, 0.0]]);
    assert!(matches!(t.log(z), Err(CieError::Domain { .. })));
}

fn i2(t: &mut Tape) -> Var {
    t.leaf(Matrix::eye(2))
}

#[test]
fn exp_hadamard_composite_gradient() {
    let err = max_rel_error(&[random(4, 3, 3), random(4, 3, 4)], 1e-5, |t, v| {
        let h = t.hadamard(v[0], v[1])?;
        let e = t.exp(h);
        Ok(t.sum(e))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn every_op_matches_finite_differences() {
    // Each closure maps random leaves to a scalar through one operation
    // family; weights break symmetry so sum-invariant ops still get tested.
    type Case = (&'static str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>);
    let w = random(5, 4, 99);
    let weighted = move |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let c = t.leaf(w.clone());
        let h = t.hadamard(x, c)?;
        Ok(t.sum(h))
    };
    let adj = Arc::new(CsrAdjacency::from_rows(vec![
        vec![(1, 0.5), (3, 0.2)],
        vec![(0, 0.5)],
        vec![],
        vec![(0, 0.2), (4, 1.5)],
        vec![(3, 1.5), (4, 0.3)],
    ]));
    let pos = random(5, 4, 7).mapv(|x| x.abs() + 0.5);
    let cases: Vec<Case> = vec![
        ("add", vec![random(5, 4, 1), random(5, 4, 2)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.add(v[0], v[1])?; weighted(t, a) }
        })),
        ("sub", vec![random(5, 4, 1), random(5, 4, 2)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.sub(v[0], v[1])?; weighted(t, a) }
        })),
        ("scale+add_scalar", vec![random(5, 4, 3)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.scale(v[0], -1.7); let b = t.add_scalar(a, 0.3); weighted(t, b) }
        })),
        ("leaky_relu", vec![random(5, 4, 4)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.leaky_relu(v[0], 0.2); weighted(t, a) }
        })),
        ("log", vec![pos.clone()], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.log(v[0])?; weighted(t, a) }
        })),
        ("powf", vec![pos], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.powf(v[0], -1.3)?; weighted(t, a) }
        })),
        ("softmax_rows", vec![random(5, 4, 5)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.softmax_rows(v[0])?; weighted(t, a) }
        })),
        ("mul_col", vec![random(5, 4, 6), random(5, 1, 7)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.mul_col(v[0], v[1])?; weighted(t, a) }
        })),
        ("add_row", vec![random(5, 4, 6), random(1, 4, 7)], Box::new({
            let weighted = weighted.clone();
            move |t, v| { let a = t.add_row(v[0], v[1])?; weighted(t, a) }
        })),
        ("spmm", vec![random(5, 4, 8)], Box::new({
            let weighted = weighted.clone();
            let adj = adj.clone();
            move |t, v| { let a = t.spmm(adj.clone(), v[0])?; weighted(t, a) }
        })),
        ("transpose+matmul", vec![random(5, 4, 9)], Box::new(|t, v| {
            let tr = t.transpose(v[0]);
            let g = t.matmul(v[0], tr)?;
            let e = t.exp(g);
            Ok(t.sum(e))
        })),
        ("gather+slice+concat", vec![random(5, 4, 10)], Box::new(|t, v| {
            let g = t.gather_rows(v[0], &[4, 0, 0, 2])?;
            let a = t.slice_cols(g, 1, 2)?;
            let b = t.slice_cols(g, 0, 1)?;
            let c = t.concat_cols(&[a, b, a])?;
            let e = t.exp(c);
            Ok(t.sum(e))
        })),
        ("pairwise_sq_dist", vec![random(5, 3, 11)], Box::new({
            let weighted = weighted.clone();
            move |t, v| {
                let d = t.pairwise_sq_dist(v[0]);
                let c = t.slice_cols(d, 0, 4)?;
                weighted(t, c)
            }
        })),
        ("double_center", vec![random(5, 5, 12)], Box::new(|t, v| {
            let c = t.double_center(v[0])?;
            let e = t.exp(c);
            Ok(t.sum(e))
        })),
        ("cross_entropy", vec![random(5, 4, 13)], Box::new(|t, v| {
            t.cross_entropy(v[0], &[0, 3, 1, 1, 2])
        })),
        ("gat_attention", vec![random(5, 3, 14), random(5, 1, 15), random(5, 1, 16)], Box::new({
            let adj = adj.clone();
            move |t, v| {
                let targets: Vec<usize> = (0..5).collect();
                let out = t.gat_attention(adj.clone(), &targets, v[0], v[1], v[2], v[0], v[1], 0.2)?;
                let e = t.exp(out);
                Ok(t.sum(e))
            }
        })),
        ("gat_attention_override", vec![random(5, 3, 17), random(5, 1, 18), random(2, 1, 19), random(2, 3, 20), random(2, 1, 21)], Box::new({
            let adj = adj.clone();
            move |t, v| {
                let out = t.gat_attention(adj.clone(), &[3, 0], v[0], v[1], v[2], v[3], v[4], 0.2)?;
                let e = t.exp(out);
                Ok(t.sum(e))
            }
        })),
    ];
    for (name, inputs, f) in cases {
        let err = max_rel_error(&inputs, 1e-5, |t, v| f(t, v));
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.leaf(array![[0.0, 0.0], [1f64.ln(), 3f64.ln()]]);
    let s = t.softmax_rows(x).unwrap();
    let v = t.value(s);
    assert!((v[[0, 0]] - 0.5).abs() < 1e-15 && (v[[0, 1]] - 0.5).abs() < 1e-15);
    assert!((v[[1, 0]] - 0.25).abs() < 1e-15 && (v[[1, 1]] - 0.75).abs() < 1e-15);

    let r = t.leaf(random(5, 7, 3) * 20.0);
    let s = t.softmax_rows(r).unwrap();
    for row in t.value(s).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let bad = t.leaf(array![[f64::NAN, 0.0]]);
    assert!(matches!(t.softmax_rows(bad), Err(CieError::Domain { .. })));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let u = t.leaf(Matrix::zeros((3, 4)));
    let ce = t.cross_entropy(u, &[0, 1, 3]).unwrap();
    assert!((t.scalar_value(ce) - 4f64.ln()).abs() < 1e-12);

    let mut last = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let l = t.leaf(array![[margin, 0.0, 0.0]]);
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.scalar_value(ce) < last);
        last = t.scalar_value(ce);
    }
    let l = t.leaf(Matrix::zeros((1, 3)));
    assert!(matches!(t.cross_entropy(l, &[3]), Err(CieError::Index { .. })));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random(4, 3, 21);
    let labels = [2, 0, 1, 1];
    let mut t = Tape::new();
    let l = t.leaf(logits.clone());
    let ce = t.cross_entropy(l, &labels).unwrap();
    let g = t.backward(ce).unwrap();
    let mut expected = softmax(&logits);
    for (r, &y) in labels.iter().enumerate() {
        expected[[r, y]] -= 1.0;
    }
    expected /= 4.0;
    let diff = (g.wrt(l).unwrap() - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-15);
    let err = max_rel_error(&[logits], 1e-5, |t, v| t.cross_entropy(v[0], &labels));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn dropout_modes() {
    let mut rng = seeded_rng(5);
    let mut t = Tape::new();
    let x = t.leaf(random(3, 3, 1));
    assert_eq!(dropout(&mut t, x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(dropout(&mut t, x, 0.9, false, &mut rng).unwrap(), x);
    assert!(matches!(dropout(&mut t, x, 1.0, true, &mut rng), Err(CieError::Parameter(_))));
    assert!(matches!(dropout(&mut t, x, -0.1, true, &mut rng), Err(CieError::Parameter(_))));

    let ones = t.leaf(Matrix::ones((100, 1000)));
    let d = dropout(&mut t, ones, 0.5, true, &mut rng).unwrap();
    let v = t.value(d);
    let zeros = v.iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.5).abs() < 0.01, "{zeros}");
    assert!(v.iter().all(|&x| x == 0.0 || x == 2.0));
}

#[test]
fn backward_basics() {
    let x = random(3, 4, 8);
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let s = t.sum(v);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &Matrix::ones((3, 4)));

    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let sq = t.hadamard(v, v).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    let g = t.backward(half).unwrap();
    assert!((g.wrt(v).unwrap() - &x).iter().all(|d| d.abs() < 1e-15));

    assert!(matches!(t.backward(v), Err(CieError::Contract(_))));
}

#[test]
fn param_grads_accumulate_until_zeroed() {
    let mut params = ParamSet::new();
    let id = params.add("w", array![[1.0, 2.0]]);
    for _ in 0..2 {
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let s = t.sum(b.var(id));
        params.backward(&t, s, &b).unwrap();
    }
    assert_eq!(params.get(id).grad, array![[2.0, 2.0]]);
    params.zero_grad();
    assert_eq!(params.get(id).grad, array![[0.0, 0.0]]);
    assert!(!params.get(id).has_grad());
}

#[test]
fn adam_first_step_and_zero_grad() {
    let mut params = ParamSet::new();
    let id = params.add("w", array![[0.0]]);
    let mut adam = Adam::new(&params, 0.01);
    assert!(matches!(adam.step(&mut params), Err(CieError::Contract(_))));

    params.get_mut(id).grad[[0, 0]] = 1.0;
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let z = t.scale(b.var(id), 0.0);
    let z = t.sum(z);
    params.backward(&t, z, &b).unwrap();
    adam.step(&mut params).unwrap();
    assert!((params.get(id).data[[0, 0]] + 0.01).abs() < 1e-9);
    assert_eq!(adam.steps(), 1);
    assert_eq!(params.get(id).grad[[0, 0]], 0.0);

    // zero gradient leaves the parameter where it is (first moment is
    // still non-zero here, so start from a fresh optimizer)
    let mut adam = Adam::new(&params, 0.01);
    let before = params.get(id).data.clone();
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let z = t.scale(b.var(id), 0.0);
    let z = t.sum(z);
    params.backward(&t, z, &b).unwrap();
    adam.step(&mut params).unwrap();
    assert_eq!(params.get(id).data, before);
}

#[test]
fn adam_converges_on_convex_quadratic() {
    // f(w) = 0.5 Σ c_i (w_i − t_i)², c_i > 0
    let c = array![[1.0, 2.0, 0.5]];
    let target = array![[0.3, -0.2, 0.1]];
    let mut params = ParamSet::new();
    let id = params.add("w", array![[0.4, -0.1, 0.0]]);
    let mut adam = Adam::new(&params, 0.01);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..100 {
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let tv = t.leaf(target.clone());
        let cv = t.leaf(c.clone());
        let d = t.sub(b.var(id), tv).unwrap();
        let sq = t.hadamard(d, d).unwrap();
        let w = t.hadamard(sq, cv).unwrap();
        let s = t.sum(w);
        let f = t.scale(s, 0.5);
        params.backward(&t, f, &b).unwrap();
        grad_norm = params.get(id).grad.mapv(|g| g * g).sum().sqrt();
        adam.step(&mut params).unwrap();
    }
    let w = &params.get(id).data;
    let final_grad = ((w - &target) * &c).mapv(|g| g * g).sum().sqrt();
    assert!(final_grad < 1e-3, "grad norm {final_grad} (last seen {grad_norm})");
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = seeded_rng(42);
        let mut t = Tape::new();
        let x = t.leaf(random(6, 5, 3));
        let d = dropout(&mut t, x, 0.5, true, &mut rng).unwrap();
        let s = t.softmax_rows(d).unwrap();
        let l = t.cross_entropy(s, &[0, 1, 2, 3, 4, 0]).unwrap();
        let g = t.backward(l).unwrap();
        (t.scalar_value(l).to_bits(), g.wrt(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn softmax_rows_normalised(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let mut t = Tape::new();
            let x = t.leaf(random(rows, cols, seed) * 30.0);
            let s = t.softmax_rows(x).unwrap();
            for row in t.value(s).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn matmul_chain_gradient(m in 1usize..8, k in 1usize..8, n in 2usize..8, seed in any::<u64>()) {
            let a = random(m, k, seed);
            let b = random(k, n, seed.wrapping_add(1));
            let err = max_rel_error(&[a, b], 1e-5, |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let s = t.softmax_rows(p)?;
                let l = t.log(s)?;
                Ok(t.sum(l))
            });
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
