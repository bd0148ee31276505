//! Reverse-mode gradients against central finite differences, and the
//! Jacobian chain rule.

use latentcf::autodiff::{jacobian, Graph, Tensor, Unary, Var};
use latentcf::linalg::matmul;
use latentcf::nn::{Activation, Mlp, Parameterized};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-5;
/// Denominator floor so gradients near zero are compared absolutely.
const SCALE_FLOOR: f64 = 1e-3;

type Build = dyn Fn(&mut Graph<'static>, &[Var]) -> latentcf::Result<Var>;

/// `Σ wᵢ·outᵢ` with fixed, uneven weights so every upstream gradient differs.
fn weighted_root(g: &mut Graph<'static>, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i + 1) as f64).sin()).collect();
    let wv = g.constant(Tensor::new(w, shape).unwrap());
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

fn evaluate(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let root = weighted_root(&mut g, out);
    g.item(root)
}

/// Largest relative error between backward gradients and central
/// differences over every element of every input.
fn max_grad_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let root = weighted_root(&mut g, out);
    g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
        for j in 0..t.numel() {
            let x = t.data()[j];
            let h = 1e-6 * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] = x + h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] = x - h;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * h);
            let scale = analytic[j].abs().max(numeric.abs()).max(SCALE_FLOOR);
            worst = worst.max((analytic[j] - numeric).abs() / scale);
        }
    }
    worst
}

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(d, shape.clone()).unwrap())
}

/// Values bounded away from the kink at zero.
fn off_kink(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec((0.01..3.0f64, any::<bool>()), n).prop_map(move |d| {
        let v = d.into_iter().map(|(m, neg)| if neg { -m } else { m }).collect();
        Tensor::new(v, shape.clone()).unwrap()
    })
}

fn unary_case(kind: Unary) -> Box<Build> {
    Box::new(move |g, v| g.unary(kind, v[0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smooth_unary_ops(x in tensor(vec![2, 3], -3.0, 3.0)) {
        for kind in [Unary::Neg, Unary::Tanh, Unary::Sigmoid, Unary::Exp, Unary::Square, Unary::Softplus] {
            let err = max_grad_error(std::slice::from_ref(&x), &*unary_case(kind));
            prop_assert!(err < REL_TOL, "{kind:?}: {err:e}");
        }
    }

    #[test]
    fn piecewise_linear_unary_ops(x in off_kink(vec![2, 3])) {
        for kind in [Unary::Relu, Unary::LeakyRelu(0.01)] {
            let err = max_grad_error(std::slice::from_ref(&x), &*unary_case(kind));
            prop_assert!(err < REL_TOL, "{kind:?}: {err:e}");
        }
    }

    #[test]
    fn log(x in tensor(vec![2, 3], 0.1, 5.0)) {
        let err = max_grad_error(&[x], &*unary_case(Unary::Log));
        prop_assert!(err < REL_TOL, "{err:e}");
    }

    #[test]
    fn scale(x in tensor(vec![3, 2], -3.0, 3.0), c in -4.0..4.0f64) {
        let err = max_grad_error(&[x], &move |g: &mut Graph<'static>, v: &[Var]| g.scale(v[0], c));
        prop_assert!(err < REL_TOL, "{err:e}");
    }

    #[test]
    fn elementwise_binary_ops(a in tensor(vec![2, 3], -3.0, 3.0), b in off_kink(vec![2, 3])) {
        let cases: [(&str, Box<Build>); 4] = [
            ("add", Box::new(|g, v| g.add(v[0], v[1]))),
            ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
            ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
            ("div", Box::new(|g, v| g.div(v[0], v[1]))),
        ];
        for (name, build) in &cases {
            let err = max_grad_error(&[a.clone(), b.clone()], &**build);
            prop_assert!(err < REL_TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn scalar_broadcast(a in tensor(vec![2, 3], -3.0, 3.0), s in off_kink(vec![1])) {
        let cases: [(&str, Box<Build>); 4] = [
            ("add", Box::new(|g, v| g.add(v[0], v[1]))),
            ("sub", Box::new(|g, v| g.sub(v[1], v[0]))),
            ("mul", Box::new(|g, v| g.mul(v[1], v[0]))),
            ("div", Box::new(|g, v| g.div(v[0], v[1]))),
        ];
        for (name, build) in &cases {
            let err = max_grad_error(&[a.clone(), s.clone()], &**build);
            prop_assert!(err < REL_TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn matmul_and_affine(
        a in tensor(vec![3, 4], -2.0, 2.0),
        w in tensor(vec![4, 2], -2.0, 2.0),
        b in tensor(vec![2], -2.0, 2.0),
    ) {
        let err = max_grad_error(&[a.clone(), w.clone()], &|g, v| g.matmul(v[0], v[1]));
        prop_assert!(err < REL_TOL, "matmul: {err:e}");
        let err = max_grad_error(&[a, w, b], &|g, v| g.affine(v[0], v[1], v[2]));
        prop_assert!(err < REL_TOL, "affine: {err:e}");
    }

    #[test]
    fn reductions_and_column_ops(a in tensor(vec![3, 4], -2.0, 2.0), b in tensor(vec![3, 2], -2.0, 2.0)) {
        let cases: [(&str, Box<Build>); 6] = [
            ("sum", Box::new(|g, v| {
                let s = g.square(v[0])?;
                Ok(g.sum(s))
            })),
            ("mean", Box::new(|g, v| {
                let s = g.tanh(v[0])?;
                Ok(g.mean(s))
            })),
            ("sum_rows", Box::new(|g, v| g.sum_rows(v[0]))),
            ("concat", Box::new(|g, v| g.concat(&[v[1], v[0], v[1]]))),
            ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
            ("mask_select", Box::new(|g, v| g.mask_select(v[0], &[true, false, false, true]))),
        ];
        for (name, build) in &cases {
            let err = max_grad_error(&[a.clone(), b.clone()], &**build);
            prop_assert!(err < REL_TOL, "{name}: {err:e}");
        }
    }

    #[test]
    fn mlp_parameter_and_input_gradients(seed in any::<u64>(), x in tensor(vec![4, 3], -2.0, 2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let mut inputs = vec![x];
        inputs.extend(net.parameters().into_iter().cloned());
        let err = max_grad_error(&inputs, &move |g, v| net.apply(g, &v[1..], v[0]));
        prop_assert!(err < REL_TOL, "{err:e}");
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>(), x in tensor(vec![8, 3], -2.0, 2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3, 16, 16, 1], Activation::LeakyRelu { slope: 0.01 }, &mut rng).unwrap();
        let grads = || {
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let xv = g.variable(x.clone());
            let y = net.apply(&mut g, &params, xv).unwrap();
            let s = g.square(y).unwrap();
            let root = g.mean(s);
            g.backward(root).unwrap();
            let mut all: Vec<u64> = g.grad(xv).unwrap().iter().map(|v| v.to_bits()).collect();
            for p in params {
                all.extend(g.grad(p).unwrap().iter().map(|v| v.to_bits()));
            }
            all
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn jacobian_chain_rule(seed in any::<u64>(), p in prop::collection::vec(-2.0..2.0f64, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = Mlp::new(&[3, 6, 4], Activation::Tanh, &mut rng).unwrap();
        let outer = Mlp::new(&[4, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let composed = jacobian(|g, x| {
            let h = inner.forward(g, x)?;
            outer.forward(g, h)
        }, &p).unwrap();
        let j_inner = jacobian(|g, x| inner.forward(g, x), &p).unwrap();
        let mut hidden = Graph::new();
        let xv = hidden.constant(Tensor::row(&p));
        let h = inner.forward(&mut hidden, xv).unwrap();
        let h_val = hidden.value(h).to_vec();
        let j_outer = jacobian(|g, x| outer.forward(g, x), &h_val).unwrap();
        let product = matmul(&j_outer, &j_inner);
        for (r1, r2) in composed.iter().zip(&product) {
            for (a, b) in r1.iter().zip(r2) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
