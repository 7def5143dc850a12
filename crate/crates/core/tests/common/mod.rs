#![allow(dead_code)]

use std::path::PathBuf;

use evoloss::nn::{self, HiddenActivation, Matrix, MlpSpec, OutputActivation};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `sum(upstream .* forward(params, x))`.
pub fn weighted_output(spec: &MlpSpec, params: &[f64], x: &Matrix, upstream: &Matrix) -> f64 {
    let (out, _) = nn::forward(spec, params, x).unwrap();
    out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct GradCheck {
    pub param_error: f64,
    pub input_error: f64,
}

/// Compares analytic parameter and input gradients of the weighted output
/// with central differences. `coords` restricts the parameter check to a
/// subset of coordinates.
pub fn check_gradients(
    spec: &MlpSpec,
    params: &[f64],
    x: &Matrix,
    upstream: &Matrix,
    coords: Option<&[usize]>,
) -> GradCheck {
    let (_, trace) = nn::forward(spec, params, x).unwrap();
    let (grad, dx) = nn::backward(spec, params, &trace, upstream).unwrap();

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut analytic = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = weighted_output(spec, &p, x, upstream);
        p[i] = orig - FD_STEP;
        let down = weighted_output(spec, &p, x, upstream);
        p[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
        analytic.push(grad[i]);
    }
    let param_error = relative_error(&analytic, &numeric);

    let mut xs = x.clone();
    let mut numeric_x = Vec::with_capacity(x.data().len());
    for i in 0..x.data().len() {
        let orig = xs.data()[i];
        xs.data_mut()[i] = orig + FD_STEP;
        let up = weighted_output(spec, params, &xs, upstream);
        xs.data_mut()[i] = orig - FD_STEP;
        let down = weighted_output(spec, params, &xs, upstream);
        xs.data_mut()[i] = orig;
        numeric_x.push((up - down) / (2.0 * FD_STEP));
    }
    let input_error = relative_error(dx.data(), &numeric_x);
    GradCheck {
        param_error,
        input_error,
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A small dense network with random depth, widths and activations.
pub fn random_spec<R: Rng>(rng: &mut R) -> MlpSpec {
    let depth = rng.random_range(2..=5);
    let dims: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=7)).collect();
    let hidden = [
        HiddenActivation::PRelu,
        HiddenActivation::Relu,
        HiddenActivation::Identity,
    ][rng.random_range(0..3)];
    let output = [
        OutputActivation::SoftPlus,
        OutputActivation::Softmax,
        OutputActivation::Identity,
    ][rng.random_range(0..3)];
    let prelu = hidden == HiddenActivation::PRelu && rng.random_bool(0.7);
    MlpSpec::new(dims, hidden, output, prelu).unwrap()
}

/// Xavier weights with biases and PReLU slopes perturbed away from their
/// defaults so every parameter kind is exercised.
pub fn random_params<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Vec<f64> {
    let mut p = nn::xavier_init(spec, rng).into_inner();
    for v in p.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    p
}

/// Directory holding the four digit IDX files: `EVOLOSS_MNIST_DIR`, else
/// `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("EVOLOSS_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(evoloss::idx::TRAIN_IMAGES).is_file().then_some(dir)
}
