use norface::diffcore::{check_gradients, entropy_of, Graph, Rng, Tensor, Var};
use norface::Error;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
}

const SHAPES: [(usize, usize); 5] = [(1, 3), (2, 2), (3, 4), (4, 1), (5, 3)];

/// Weighted sum so every output entry carries a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = Rng::new(seed);
    let w = g.constant(random(&mut rng, r, c));
    let m = g.mul(y, w).unwrap();
    g.sum(m)
}

fn assert_passes(name: &str, report: norface::diffcore::GradCheckReport) {
    assert!(
        report.passed,
        "{name}: max rel err {:.3e} (per param {:?})",
        report.max_rel_err,
        report.params.iter().map(|p| p.max_rel_err).collect::<Vec<_>>()
    );
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

    let b = g.constant(Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap());
    let out = g.matmul(m, b).unwrap();
    // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
    assert_eq!(g.value(out).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, (2, 3));
            assert_eq!(rhs, (2, 3));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum() {
    let mut rng = Rng::new(11);
    let a = random(&mut rng, 3, 2);
    let b = random(&mut rng, 2, 4);
    let report = check_gradients(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert_passes("matmul", report);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::row_vector(vec![2f64.ln(), 0.0]));
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y).get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

    let mut rng = Rng::new(5);
    let base = random(&mut rng, 3, 6);
    let x = g.constant(base.clone());
    let shifted = g.constant(base.map(|v| v + 1000.0));
    let (y0, y1) = (g.softmax(x).unwrap(), g.softmax(shifted).unwrap());
    for (a, b) in g.value(y0).data().iter().zip(g.value(y1).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for r in 0..3 {
        assert!((g.value(y0).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![f64::NAN, 0.0]));
    assert!(matches!(g.softmax(x), Err(Error::NumericDomain(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::filled(1, 4, 1.0));
    let bias = g.constant(Tensor::zeros(1, 4));
    let x = g.constant(Tensor::row_vector(vec![5.0; 4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let gain2 = g.constant(Tensor::filled(1, 2, 1.0));
    let bias2 = g.constant(Tensor::zeros(1, 2));
    let x = g.constant(Tensor::row_vector(vec![1.0, 3.0]));
    let y = g.layer_norm_eps(x, gain2, bias2, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

    let gain1 = g.constant(Tensor::filled(1, 1, 1.0));
    let bias1 = g.constant(Tensor::zeros(1, 1));
    let x = g.constant(Tensor::row_vector(vec![2.0]));
    assert!(matches!(g.layer_norm_eps(x, gain1, bias1, 0.0), Err(Error::NumericDomain(_))));
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = Rng::new(9);
    let mut g = Graph::new();
    let d = 16;
    let gain = g.constant(Tensor::filled(1, d, 1.0));
    let bias = g.constant(Tensor::zeros(1, d));
    let x = g.constant(random(&mut rng, 20, d).map(|v| 3.0 * v + 1.5));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for r in 0..20 {
        let row = g.value(y).row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        assert!(mu.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn entropy_examples() {
    assert_eq!(entropy_of(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
    assert!((entropy_of(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((entropy_of(&[0.5, 0.25, 0.25]).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-12);
    assert!((entropy_of(&[0.5, 0.25, 0.25]).unwrap() - 1.039_720_8).abs() < 1e-7);
    assert!(matches!(entropy_of(&[1.2, -0.2]), Err(Error::ProbabilityDomain(_))));
    assert!(matches!(entropy_of(&[0.5, 0.4]), Err(Error::ProbabilityDomain(_))));

    let mut g = Graph::new();
    let p = g.constant(Tensor::row_vector(vec![0.5, 0.25, 0.25]));
    let h = g.entropy(p).unwrap();
    assert!((g.scalar(h) - 1.5 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = Rng::new(1);
    let x = random(&mut rng, 3, 4);
    let report = check_gradients(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-8,
    )
    .unwrap();
    assert_passes("sum(x^2)", report);
}

#[test]
fn unreachable_nodes_have_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::row_vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::row_vector(vec![3.0, 4.0]));
    let _unused = g.mul(b, b).unwrap();
    let loss = g.sum(a);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).data(), &[1.0, 1.0]);
    assert_eq!(g.grad(b).data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_loss_is_an_evaluation_error() {
    let r = check_gradients(
        |g, v| {
            let z = g.scale(v[0], f64::INFINITY);
            Ok(g.sum(z))
        },
        &[Tensor::row_vector(vec![1.0])],
        1e-4,
    );
    assert!(matches!(r, Err(Error::Evaluation(_))));
}

type Builder = fn(&mut Graph, &[Var], (usize, usize)) -> norface::Result<Var>;

fn primitive_builders() -> Vec<(&'static str, usize, Builder)> {
    vec![
        ("matmul", 2, |g, v, _| g.matmul(v[0], v[1])),
        ("add", 2, |g, v, _| g.add(v[0], v[1])),
        ("sub", 2, |g, v, _| g.sub(v[0], v[1])),
        ("mul", 2, |g, v, _| g.mul(v[0], v[1])),
        ("concat_cols", 2, |g, v, _| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", 2, |g, v, _| g.concat_rows(&[v[0], v[1]])),
        ("mean", 1, |g, v, _| g.mean(v[0])),
        ("std", 1, |g, v, _| g.std(v[0])),
        ("col_mean", 1, |g, v, _| g.col_mean(v[0])),
        ("relu", 1, |g, v, _| Ok(g.relu(v[0]))),
        ("gelu", 1, |g, v, _| Ok(g.gelu(v[0]))),
        ("softplus", 1, |g, v, _| Ok(g.softplus(v[0]))),
        ("softmax", 1, |g, v, _| g.softmax(v[0])),
        ("log_softmax", 1, |g, v, _| g.log_softmax(v[0])),
        ("layer_norm", 3, |g, v, _| g.layer_norm(v[0], v[1], v[2])),
        ("row_norm", 1, |g, v, _| Ok(g.row_norm(v[0]))),
        ("row_cosine", 2, |g, v, _| g.row_cosine(v[0], v[1])),
        ("entropy", 1, |g, v, _| {
            let p = g.softmax(v[0])?;
            g.row_entropy(p)
        }),
        ("transpose", 1, |g, v, _| Ok(g.transpose(v[0]))),
        ("add_row", 2, |g, v, _| g.add_row(v[0], v[1])),
        ("mul_row", 2, |g, v, _| g.mul_row(v[0], v[1])),
        ("mul_col", 2, |g, v, _| g.mul_col(v[0], v[1])),
        ("div", 2, |g, v, _| {
            let d = g.softplus(v[1]);
            let d = g.add_scalar(d, 0.5);
            g.div(v[0], d)
        }),
        ("gather_scatter", 1, |g, v, (r, _)| {
            let idx: Vec<usize> = (0..r).rev().chain(0..1).collect();
            let gth = g.gather_rows(v[0], &idx)?;
            g.scatter_rows(gth, &idx, r)
        }),
        ("slice_reshape", 1, |g, v, (r, c)| {
            let s = g.slice(v[0], 0, r, 0, c.max(1))?;
            g.reshape(s, 1, r * c.max(1))
        }),
    ]
}

fn operand_shapes(name: &str, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
    match name {
        "matmul" => vec![(r, c), (c, 3)],
        "concat_cols" => vec![(r, c), (r, 2)],
        "concat_rows" => vec![(r, c), (2, c)],
        "layer_norm" => vec![(r, c.max(2)), (1, c.max(2)), (1, c.max(2))],
        "add_row" | "mul_row" => vec![(r, c), (1, c)],
        "mul_col" => vec![(r, c), (r, 1)],
        "add" | "sub" | "mul" | "row_cosine" | "div" => vec![(r, c), (r, c)],
        _ => vec![(r, c)],
    }
}

#[test]
fn every_primitive_passes_gradient_check_on_five_shapes() {
    for (name, arity, build) in primitive_builders() {
        for (si, &shape) in SHAPES.iter().enumerate() {
            let mut rng = Rng::new(100 + si as u64);
            let shapes = operand_shapes(name, shape);
            assert_eq!(shapes.len(), arity, "{name}");
            let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
            let seed = 1000 + si as u64;
            let report = check_gradients(
                |g, v| {
                    let y = build(g, v, shape)?;
                    Ok(weighted_sum(g, y, seed))
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert_passes(&format!("{name} {shape:?}"), report);
        }
    }
}

#[test]
fn forward_backward_is_bit_identical() {
    let run = || {
        let mut rng = Rng::new(42);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, 4, 5));
        let b = g.param(random(&mut rng, 5, 3));
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y);
        let y = g.softmax(y).unwrap();
        let h = g.row_entropy(y).unwrap();
        let l = g.sum(h);
        g.backward(l).unwrap();
        (g.scalar(l).to_bits(), g.grad(a).into_data(), g.grad(b).into_data())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1, l2);
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}
