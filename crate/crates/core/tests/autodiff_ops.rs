use epitoken::autodiff::{grad_check, GradCheckOptions, Graph, GraphError, ParamStore, Var};
use epitoken::tensor::Tensor;
use proptest::prelude::*;

type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError>;

/// Central-difference check of the vector-Jacobian product of `op` against
/// the weighted sum `Σ c ⊙ op(inputs)`.
fn check_op(op: Op, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let weights = |shape: &[usize]| {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    };
    let objective = |ins: &[Tensor<f64>], track: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| if track { g.variable(t.clone()) } else { g.constant(t.clone()) }.unwrap())
            .collect();
        let out = op(&mut g, &vars).unwrap();
        let c = g.constant(weights(g.shape(out))).unwrap();
        let prod = g.mul(out, c).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        if !track {
            return (value, vec![]);
        }
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, gs)
    };
    let (_, analytic) = objective(inputs, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let num = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
            let a = analytic[k].data()[e];
            max_diff = max_diff.max((a - num).abs());
            scale = scale.max(a.abs()).max(num.abs());
        }
        if scale > 0.0 {
            worst = worst.max(max_diff / scale);
        }
    }
    worst
}

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vals[..n].to_vec()).unwrap()
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_match_finite_differences(a in vals(12), b in vals(12), seed in any::<u64>()) {
        let x = tensor(&[3, 4], &a);
        let y = tensor(&[3, 4], &b);
        let row = tensor(&[4], &b);
        let ops: [(&str, Op, Vec<Tensor<f64>>); 9] = [
            ("add", |g, v| g.add(v[0], v[1]), vec![x.clone(), y.clone()]),
            ("sub", |g, v| g.sub(v[0], v[1]), vec![x.clone(), y.clone()]),
            ("mul", |g, v| g.mul(v[0], v[1]), vec![x.clone(), y.clone()]),
            ("add_bcast", |g, v| g.add(v[0], v[1]), vec![x.clone(), row.clone()]),
            ("mul_bcast", |g, v| g.mul(v[0], v[1]), vec![x.clone(), row.clone()]),
            ("mul_scalar", |g, v| g.mul_scalar(v[0], 1.7), vec![x.clone()]),
            ("sigmoid", |g, v| g.sigmoid(v[0]), vec![x.clone()]),
            ("gelu", |g, v| g.gelu(v[0]), vec![x.clone()]),
            ("tanh", |g, v| g.tanh(v[0]), vec![x.clone()]),
        ];
        for (name, op, ins) in ops {
            let err = check_op(op, &ins, seed);
            prop_assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn reductions_and_norms_match_finite_differences(a in vals(24), seed in any::<u64>()) {
        let x = tensor(&[2, 3, 4], &a);
        let pos = x.map(|e| e.abs() + 0.5);
        let ops: [(&str, Op, Vec<Tensor<f64>>); 10] = [
            ("softmax", |g, v| g.softmax(v[0]), vec![x.clone()]),
            ("layer_norm", |g, v| g.layer_norm(v[0]), vec![x.clone()]),
            ("square", |g, v| g.square(v[0]), vec![x.clone()]),
            ("sqrt", |g, v| g.sqrt(v[0]), vec![pos.clone()]),
            ("rsqrt", |g, v| g.rsqrt(v[0]), vec![pos.clone()]),
            ("div", |g, v| g.div(v[0], v[1]), vec![x.clone(), pos.clone()]),
            ("sum", |g, v| g.sum(v[0]), vec![x.clone()]),
            ("mean", |g, v| g.mean(v[0]), vec![x.clone()]),
            ("sum_axis1", |g, v| g.sum_axis(v[0], 1), vec![x.clone()]),
            ("relu", |g, v| g.relu(v[0]), vec![x.map(|e| if e.abs() < 0.05 { e + 0.2 } else { e })]),
        ];
        for (name, op, ins) in ops {
            let err = check_op(op, &ins, seed);
            prop_assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn structural_ops_match_finite_differences(a in vals(24), b in vals(24), seed in any::<u64>()) {
        let x = tensor(&[2, 3, 4], &a);
        let w = tensor(&[4, 2], &b);
        let y = tensor(&[2, 4, 3], &b);
        let sq = tensor(&[2, 3, 3], &b);
        let ops: [(&str, Op, Vec<Tensor<f64>>); 8] = [
            ("matmul", |g, v| g.matmul(v[0], v[1]), vec![x.clone(), w.clone()]),
            ("bmm", |g, v| g.matmul(v[0], v[1]), vec![x.clone(), y.clone()]),
            ("permute", |g, v| g.permute(v[0], &[2, 0, 1]), vec![x.clone()]),
            ("transpose", |g, v| g.transpose(v[0]), vec![x.clone()]),
            ("reshape", |g, v| g.reshape(v[0], &[6, 4]), vec![x.clone()]),
            ("concat", |g, v| g.concat(&[v[0], v[1]], 1), vec![x.clone(), y.clone().reshaped(&[2, 3, 4]).unwrap()]),
            ("slice", |g, v| g.slice(v[0], 2, 1, 2), vec![x.clone()]),
            ("causal_softmax", |g, v| g.causal_softmax(v[0]), vec![sq.clone()]),
        ];
        for (name, op, ins) in ops {
            let err = check_op(op, &ins, seed);
            prop_assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn accumulation_is_additive(a in vals(6), b in vals(6)) {
        // backward(L1) + backward(L2) == backward(L1 + L2)
        let mut store = ParamStore::new();
        let p = store.register("p", tensor(&[6], &a), false);
        let c = tensor(&[6], &b);
        let l1 = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let v = g.param(s, p)?;
            let sq = g.square(v)?;
            g.sum(sq)
        };
        let l2 = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let v = g.param(s, p)?;
            let k = g.constant(c.clone())?;
            let m = g.mul(v, k)?;
            let t = g.sigmoid(m)?;
            g.sum(t)
        };
        let mut separate = store.clone();
        for f in [&l1 as &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, GraphError>, &l2] {
            let mut g = Graph::new();
            let l = f(&mut g, &separate).unwrap();
            g.backward(l).unwrap().accumulate_into(&mut separate);
        }
        let mut g = Graph::new();
        let a1 = l1(&mut g, &store).unwrap();
        let a2 = l2(&mut g, &store).unwrap();
        let total = g.add(a1, a2).unwrap();
        g.backward(total).unwrap().accumulate_into(&mut store);
        for (x, y) in separate.grad(p).data().iter().zip(store.grad(p).data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0)).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn softmax_of_constant_vector_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4], 3.3)).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn identity_matmul_is_noop() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3)).unwrap();
    let x = Tensor::from_fn(&[3, 2], |k| k as f64 - 1.5);
    let xv = g.constant(x.clone()).unwrap();
    // I · X with I as the left operand of shape [3,3] and X as the [3,2] weight.
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn square_gradient_at_three_is_six() {
    let mut store = ParamStore::new();
    let p = store.register("p", Tensor::scalar(3.0), false);
    let mut g = Graph::new();
    let v = g.param(&store, p).unwrap();
    let l = g.square(v).unwrap();
    g.backward(l).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).item(), 6.0);
}

#[test]
fn independent_loss_gives_zero_gradient() {
    let mut store = ParamStore::new();
    let p = store.register("p", Tensor::scalar(3.0), false);
    let mut g = Graph::new();
    let _ = g.param(&store, p).unwrap();
    let c = g.constant(Tensor::scalar(2.0)).unwrap();
    let l = g.square(c).unwrap();
    g.backward(l).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).item(), 0.0);
}

#[test]
fn sigmoid_sum_gradient_is_quarter() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::zeros(&[5]), false);
    let mut g = Graph::new();
    let v = g.param(&store, p).unwrap();
    let s = g.sigmoid(v).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).data(), &[0.25; 5]);
}

#[test]
fn frozen_parameters_still_receive_gradients() {
    let mut store = ParamStore::new();
    let p = store.register("frozen", Tensor::scalar(2.0), true);
    let mut g = Graph::new();
    let v = g.param(&store, p).unwrap();
    let l = g.square(v).unwrap();
    g.backward(l).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).item(), 4.0);
    assert_eq!(store.counts(), (0, 1));
}

#[test]
fn backward_errors() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.variable(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(x), Err(GraphError::NotScalar { .. })));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), GraphError::BackwardTwice);
    g.reset();
    assert_eq!(g.backward(s).unwrap_err(), GraphError::EmptyTape);
}

#[test]
fn shape_and_finiteness_errors() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(GraphError::ShapeMismatch { .. })));
    assert!(matches!(g.add(a, b), Err(GraphError::ShapeMismatch { .. })));
    assert!(matches!(g.constant(Tensor::scalar(f64::NAN)), Err(GraphError::NonFinite { .. })));
    let z = g.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.rsqrt(z), Err(GraphError::NonFinite { .. })));
}

#[test]
fn causal_softmax_masks_future_positions_exactly() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::from_fn(&[3, 3], |i| i as f64 * 0.3)).unwrap();
    let y = g.causal_softmax(x).unwrap();
    let v = g.value(y);
    assert_eq!(v.at(&[0, 0]), 1.0);
    assert_eq!(v.at(&[0, 1]), 0.0);
    assert_eq!(v.at(&[1, 2]), 0.0);
    assert!((v.data()[6..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

fn quadratic_store() -> (ParamStore<f64>, epitoken::autodiff::ParamId) {
    let mut store = ParamStore::new();
    let p = store.register("x", Tensor::from_vec(vec![0.3, -1.2, 2.0]), false);
    (store, p)
}

#[test]
fn grad_check_on_quadratic_form() {
    // f(x) = xᵀ Q x with Q symmetric positive definite.
    let (mut store, p) = quadratic_store();
    let q = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.3], vec![0.0, 0.3, 3.0]]).unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, p)?;
            let xr = g.reshape(x, &[1, 3])?;
            let qv = g.constant(q.clone())?;
            let qx = g.matmul(xr, qv)?;
            let prod = g.mul(qx, xr)?;
            g.sum(prod)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.worst_rel_err < 1e-9, "{report:?}");
}

#[test]
fn grad_check_on_two_layer_gelu_network() {
    // 3 -> 8 -> 2 network plus biases: 3*8 + 8 + 8*2 + 2 = 50 parameters.
    let mut store = ParamStore::new();
    let mk = |shape: &[usize], off: f64| Tensor::from_fn(shape, |i| ((i as f64 * 0.7 + off).sin()) * 0.8);
    let w1 = store.register("w1", mk(&[3, 8], 0.1), false);
    let b1 = store.register("b1", mk(&[8], 0.2), false);
    let w2 = store.register("w2", mk(&[8, 2], 0.3), false);
    let b2 = store.register("b2", mk(&[2], 0.4), false);
    let total: usize = store.iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(total, 50);
    let input = Tensor::from_fn(&[5, 3], |i| (i as f64 * 1.3).cos());
    let report = grad_check(
        &mut store,
        |g, s| {
            let x = g.constant(input.clone())?;
            let (w1, b1, w2, b2) = (g.param(s, w1)?, g.param(s, b1)?, g.param(s, w2)?, g.param(s, b2)?);
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, w2)?;
            let o = g.add(o, b2)?;
            let o = g.square(o)?;
            g.mean(o)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.checked_elements, 50);
    assert!(report.worst_rel_err < 1e-4, "{report:?}");
}

#[test]
fn grad_check_on_constant_objective_reports_zero() {
    let (mut store, _) = quadratic_store();
    let report = grad_check::<f64, GraphError, _>(
        &mut store,
        |g, _| g.constant(Tensor::scalar(4.0)),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.worst_rel_err, 0.0);
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let (mut store, p) = quadratic_store();
    let err = grad_check::<f64, GraphError, _>(
        &mut store,
        |g, s| {
            let x = g.param(s, p)?;
            let big = g.mul_scalar(x, 1e300)?;
            let sq = g.square(big)?;
            g.sum(sq)
        },
        GradCheckOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, GraphError::NonFinite { .. } | GraphError::NonFiniteObjective));
}
