use mvcnet::consolidation::{DecisionHead, FisherEstimate};
use mvcnet::linalg::frobenius;
use mvcnet::orthogonal_fusion::{projector_direct, FusionLayer, Projector};
use mvcnet::sparse_features::{fista_fit, lipschitz_constant, soft_threshold, Activation};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn dm(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn nd(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn rel(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    frobenius((&a - &b).view()) / frobenius(b).max(1e-300)
}

fn objective(z: ArrayView2<f64>, x: ArrayView2<f64>, theta: ArrayView2<f64>, lambda: f64) -> f64 {
    let r = z.dot(&theta) - x;
    r.iter().map(|v| v * v).sum::<f64>() + lambda * theta.iter().map(|v| v.abs()).sum::<f64>()
}

#[test]
fn lipschitz_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let z = random(50, 20, &mut rng);
        let g = dm(z.t().dot(&z).view());
        let top = SymmetricEigen::new(g).eigenvalues.max();
        let lip = lipschitz_constant(z.view()).unwrap();
        assert!((lip.value - 2.0 * top).abs() / (2.0 * top) < 1e-5, "{} vs {}", lip.value, 2.0 * top);
    }
}

#[test]
fn fista_without_penalty_reaches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = random(60, 6, &mut rng) + &Array2::<f64>::eye(60).slice(ndarray::s![.., ..6]).mapv(|v| 3.0 * v);
    let x = random(60, 4, &mut rng);
    let sol = fista_fit(z.view(), x.view(), 0.0, 2000).unwrap();
    let zm = dm(z.view());
    let oracle = (zm.transpose() * &zm).cholesky().unwrap().solve(&(zm.transpose() * dm(x.view())));
    let oracle = nd(&oracle);
    let r_fista = objective(z.view(), x.view(), sol.theta.view(), 0.0);
    let r_oracle = objective(z.view(), x.view(), oracle.view(), 0.0);
    assert!((r_fista - r_oracle).abs() / r_oracle < 1e-4);
    assert!(rel(sol.theta.view(), oracle.view()) < 1e-4);
}

#[test]
fn fista_large_penalty_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = random(30, 8, &mut rng);
    let x = random(30, 5, &mut rng);
    let cross = z.t().dot(&x);
    let lambda = 2.0 * cross.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1.01;
    let sol = fista_fit(z.view(), x.view(), lambda, 50).unwrap();
    assert!(sol.theta.iter().all(|&v| v == 0.0));
}

fn ista(z: ArrayView2<f64>, x: ArrayView2<f64>, lambda: f64, k: usize) -> Array2<f64> {
    let xi = lipschitz_constant(z).unwrap().value;
    let mut theta = Array2::zeros((z.ncols(), x.ncols()));
    for _ in 0..k {
        let grad = z.t().dot(&(z.dot(&theta) - x)) * 2.0;
        theta = (&theta - &(grad / xi)).mapv(|v| soft_threshold(v, lambda / xi));
    }
    theta
}

#[test]
fn fista_beats_ista_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = random(100, 600, &mut rng);
    let x = random(100, 10, &mut rng);
    let lambda = 1e-3;
    let sol = fista_fit(z.view(), x.view(), lambda, 50).unwrap();
    let f_fista = objective(z.view(), x.view(), sol.theta.view(), lambda);
    let f_ista = objective(z.view(), x.view(), ista(z.view(), x.view(), lambda, 50).view(), lambda);
    assert!(f_fista <= f_ista + 1e-8, "{f_fista} vs {f_ista}");
    assert!((sol.trace.last().unwrap() - f_fista).abs() <= 1e-9 * f_fista.max(1.0));
}

#[test]
fn smooth_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..5 {
        let z = random(5, 4, &mut rng);
        let x = random(5, 3, &mut rng);
        let theta = random(4, 3, &mut rng);
        let grad = z.t().dot(&(z.dot(&theta) - &x)) * 2.0;
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[[i, j]] += h;
                down[[i, j]] -= h;
                let fd = (objective(z.view(), x.view(), up.view(), 0.0) - objective(z.view(), x.view(), down.view(), 0.0)) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() <= 1e-4 * grad[[i, j]].abs().max(1.0));
            }
        }
    }
}

fn woodbury_oracle(z: ArrayView2<f64>, alpha: f64) -> Array2<f64> {
    let d = z.ncols();
    let s = dm(z.t().dot(&z).view()) + DMatrix::identity(d, d) * alpha;
    nd(&(s.try_inverse().unwrap() * alpha))
}

#[test]
fn direct_projector_matches_inverse_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let z = random(5, 8, &mut rng);
    let p = projector_direct(z.view(), 8, 1.0).unwrap();
    assert!(frobenius((&p - &woodbury_oracle(z.view(), 1.0)).view()) < 1e-10);
}

#[test]
fn rank_one_absorption_matches_direct_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z = random(20, 6, &mut rng);
    let mut p = Projector::new(6, 1.0).unwrap();
    for row in z.rows() {
        p.absorb_vector(row).unwrap();
    }
    assert_eq!(p.samples_absorbed(), 20);
    assert!(frobenius((&p.matrix() - &woodbury_oracle(z.view(), 1.0)).view()) < 1e-8);
}

#[test]
fn tiny_alpha_is_nearly_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let z = random(5, 12, &mut rng);
    let mut p = Projector::new(12, 1e-7).unwrap();
    p.absorb(z.view()).unwrap();
    for row in z.rows() {
        let pz = p.matrix().dot(&row);
        assert!(pz.dot(&pz).sqrt() / row.dot(&row).sqrt() <= 1e-3);
    }
}

#[test]
fn trace_grows_with_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let z = random(15, 10, &mut rng);
    let traces: Vec<f64> = [1e-2, 1.0, 1e2]
        .iter()
        .map(|&a| {
            let mut p = Projector::new(10, a).unwrap();
            p.absorb(z.view()).unwrap();
            p.matrix().diag().sum()
        })
        .collect();
    assert!(traces.windows(2).all(|w| w[0] <= w[1]), "{traces:?}");
}

#[test]
fn absorbed_direction_is_suppressed_in_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut layer = FusionLayer::new(6, 4, Activation::Tanh, 0.5, 1e-8, 3).unwrap();
    let z = random(1, 6, &mut rng);
    layer.projector.absorb(z.view()).unwrap();
    let u = random(1, 4, &mut rng);
    let grad = z.t().dot(&u);
    let before = layer.weights.clone();
    layer.orthogonal_step(grad.view(), None).unwrap();
    let moved = frobenius((&layer.weights - &before).view());
    assert!(moved <= 1e-3 * 0.5 * frobenius(grad.view()));
}

#[test]
fn learning_without_interference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut layer = FusionLayer::new(16, 5, Activation::Tanh, 0.1, 1e-6, 4).unwrap();
    layer.train_bias = false;
    let a = random(6, 16, &mut rng);
    let b = random(6, 16, &mut rng);
    let target = random(6, 5, &mut rng);
    for _ in 0..20 {
        let h = layer.forward(a.view()).unwrap();
        let delta = (&h - &target) * &h.mapv(|y| 1.0 - y * y);
        layer.orthogonal_step(a.t().dot(&delta).view(), None).unwrap();
    }
    layer.projector.absorb(a.view()).unwrap();
    let out_a = layer.forward(a.view()).unwrap();
    for _ in 0..20 {
        let h = layer.forward(b.view()).unwrap();
        let delta = (&h + &target) * &h.mapv(|y| 1.0 - y * y);
        layer.orthogonal_step(b.t().dot(&delta).view(), None).unwrap();
    }
    let after = layer.forward(a.view()).unwrap();
    assert!(rel(after.view(), out_a.view()) <= 1e-2);
}

fn head(classes: usize, hidden: usize, mu: f64, rng: &mut ChaCha8Rng) -> DecisionHead {
    let mut h = DecisionHead::new(hidden, mu).unwrap();
    for c in 0..classes {
        h.expand(c).unwrap();
    }
    h.weights_mut().assign(&random(hidden, classes, rng));
    h.bias_mut().assign(&random(1, classes, rng).row(0));
    h
}

fn log_likelihood(h: &DecisionHead, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let p = h.forward(x).unwrap();
    labels.iter().enumerate().map(|(i, &y)| p[[i, y]].ln()).sum()
}

#[test]
fn fisher_matches_per_sample_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = head(4, 3, 0.0, &mut rng);
    let x = random(6, 3, &mut rng);
    let labels = [0, 1, 2, 3, 1, 2];
    let f = model.fisher_diag(x.view(), &labels).unwrap();
    let eps = 1e-6;
    let mut oracle = Array2::<f64>::zeros((3, 4));
    for (i, &y) in labels.iter().enumerate() {
        let xi = x.slice(ndarray::s![i..i + 1, ..]);
        for a in 0..3 {
            for c in 0..4 {
                let mut up = model.clone();
                let mut down = model.clone();
                up.weights_mut()[[a, c]] += eps;
                down.weights_mut()[[a, c]] -= eps;
                let g = (log_likelihood(&up, xi, &[y]) - log_likelihood(&down, xi, &[y])) / (2.0 * eps);
                oracle[[a, c]] += g * g / labels.len() as f64;
            }
        }
    }
    assert!(rel(f.diag.view(), oracle.view()) < 1e-4);
}

#[test]
fn swc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut model = head(1, 4, 7.0, &mut rng);
    for slot in 0..2 {
        let fisher = FisherEstimate { diag: random(4, slot + 1, &mut rng).mapv(f64::abs), sample_count: 3 };
        model.end_of_class(slot, &fisher).unwrap();
        model.expand(slot + 1).unwrap();
    }
    model.weights_mut().assign(&random(4, 3, &mut rng));
    let x = random(5, 4, &mut rng);
    let labels = [2, 0, 1, 2, 2];
    let g = model.swc_loss_and_grad(x.view(), &labels).unwrap();
    let eps = 1e-6;
    for a in 0..4 {
        for c in 0..3 {
            let mut up = model.clone();
            let mut down = model.clone();
            up.weights_mut()[[a, c]] += eps;
            down.weights_mut()[[a, c]] -= eps;
            let lu = up.swc_loss_and_grad(x.view(), &labels).unwrap().loss;
            let ld = down.swc_loss_and_grad(x.view(), &labels).unwrap().loss;
            let fd = (lu - ld) / (2.0 * eps);
            assert!((fd - g.grad_w[[a, c]]).abs() <= 1e-4 * g.grad_w[[a, c]].abs().max(1e-2));
        }
    }
}

#[test]
fn orthogonal_linear_encoder_is_reconstruction_equivalent() {
    use mvcnet::sparse_features::{EncoderConfig, RandomEncoder};
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let d = 8;
    let x = random(200, d, &mut rng);
    let q = dm(random(d, d, &mut rng).view()).qr().q();
    let w = nd(&q);
    let enc = RandomEncoder::from_parts(w.clone(), ndarray::Array1::zeros(d), 1, Activation::Linear).unwrap();
    let cfg = EncoderConfig {
        groups: 1,
        nodes: d,
        max_iter: 2000,
        lambda: 0.0,
        activation: Activation::Linear,
        feature_activation: Activation::Linear,
        center: false,
    };
    let dec = enc.fit_decoder(x.view(), &cfg).unwrap();
    assert!(rel(dec.weights.view(), w.view()) < 1e-6);
    let z = enc.encode(x.view()).unwrap();
    let features = dec.apply(x.view()).unwrap();
    assert!(rel(features.view(), z.view()) < 1e-6);
    let recon = z.dot(&dec.weights.t());
    assert!(rel(recon.view(), x.view()) < 1e-6);
}
