//! Dense feed-forward networks over flat parameter vectors.
//!
//! Every network in the crate (the meta-loss network, the classifiers being
//! trained, and the ground-truth classifiers) is an [`MlpSpec`] plus a flat
//! `f64` parameter slice. The slice layout is fixed per layer:
//!
//! - weight matrix, row-major with shape `(fan_out, fan_in)`
//! - bias vector of length `fan_out`
//! - one PReLU slope, only for hidden layers when `prelu_per_layer` is set
//!
//! Batches are row-major `K x dim` matrices. The forward pass records a
//! [`ForwardTrace`] so [`backward`] can return exact parameter and input
//! gradients for an arbitrary upstream gradient.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope used for PReLU layers whose slope is not part of the parameters,
/// and the initial value of learnable slopes.
pub const DEFAULT_PRELU_ALPHA: f64 = 0.25;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("matrix data length", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("matrix row length", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    PRelu,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    SoftPlus,
    Softmax,
    Identity,
}

impl HiddenActivation {
    pub fn code(self) -> u8 {
        match self {
            HiddenActivation::PRelu => 0,
            HiddenActivation::Relu => 1,
            HiddenActivation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HiddenActivation::PRelu),
            1 => Some(HiddenActivation::Relu),
            2 => Some(HiddenActivation::Identity),
            _ => None,
        }
    }
}

impl OutputActivation {
    pub fn code(self) -> u8 {
        match self {
            OutputActivation::SoftPlus => 0,
            OutputActivation::Softmax => 1,
            OutputActivation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputActivation::SoftPlus),
            1 => Some(OutputActivation::Softmax),
            2 => Some(OutputActivation::Identity),
            _ => None,
        }
    }
}

/// Architecture of a dense network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    prelu_per_layer: bool,
}

/// Activation applied after one affine layer, resolved against the layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerActivation {
    /// `alpha` is the parameter index of a learnable slope, or `None` for the
    /// fixed default slope.
    PRelu {
        alpha: Option<usize>,
    },
    Relu,
    Identity,
    SoftPlus,
    Softmax,
}

/// Where one layer's parameters live inside the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    pub activation: LayerActivation,
}

impl MlpSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        prelu_per_layer: bool,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer dims, got {}",
                layer_dims.len()
            )));
        }
        if let Some(pos) = layer_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("layer dim {pos} is zero")));
        }
        if layer_dims.len() > u8::MAX as usize {
            return Err(Error::InvalidSpec("too many layers".into()));
        }
        Ok(Self {
            layer_dims,
            hidden_activation,
            output_activation,
            prelu_per_layer,
        })
    }

    /// The meta-loss network: `[4, 32, 64, 128, 256, 512, 1]`, PReLU hidden
    /// layers with one learnable slope each, SoftPlus output.
    pub fn canonical_mln() -> Self {
        Self::new(
            vec![4, 32, 64, 128, 256, 512, 1],
            HiddenActivation::PRelu,
            OutputActivation::SoftPlus,
            true,
        )
        .expect("canonical spec is valid")
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn prelu_per_layer(&self) -> bool {
        self.prelu_per_layer
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("non-empty dims")
    }

    fn learnable_alpha(&self, layer: usize) -> bool {
        self.prelu_per_layer && self.hidden_activation == HiddenActivation::PRelu && layer + 1 < self.num_layers()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        let last = self.num_layers() - 1;
        self.layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                let activation = if l == last {
                    match self.output_activation {
                        OutputActivation::SoftPlus => LayerActivation::SoftPlus,
                        OutputActivation::Softmax => LayerActivation::Softmax,
                        OutputActivation::Identity => LayerActivation::Identity,
                    }
                } else {
                    match self.hidden_activation {
                        HiddenActivation::PRelu => {
                            let alpha = self.learnable_alpha(l).then(|| {
                                offset += 1;
                                offset - 1
                            });
                            LayerActivation::PRelu { alpha }
                        }
                        HiddenActivation::Relu => LayerActivation::Relu,
                        HiddenActivation::Identity => LayerActivation::Identity,
                    }
                };
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                    activation,
                }
            })
            .collect()
    }

    pub fn genome_length(&self) -> usize {
        let affine: usize = self.layer_dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let alphas = (0..self.num_layers()).filter(|&l| self.learnable_alpha(l)).count();
        affine + alphas
    }
}

pub fn genome_length(spec: &MlpSpec) -> usize {
    spec.genome_length()
}

/// Flat parameter vector for some [`MlpSpec`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FlatParams(Vec<f64>);

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FlatParams {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for FlatParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FlatParams {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Glorot-uniform weights, zero biases, PReLU slopes at 0.25.
pub fn xavier_init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> FlatParams {
    let mut values = vec![0.0; spec.genome_length()];
    for layer in spec.layout() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut values[layer.weights] {
            *w = rng.random_range(-limit..=limit);
        }
        if let LayerActivation::PRelu { alpha: Some(i) } = layer.activation {
            values[i] = DEFAULT_PRELU_ALPHA;
        }
    }
    FlatParams(values)
}

/// Pre- and post-activations of every layer for one batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    batch: usize,
    /// `post[0]` is the input batch, `post[l + 1]` the output of layer `l`.
    post: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn post_activations(&self, layer: usize) -> &[f64] {
        &self.post[layer + 1]
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`, with `a` and `b`
/// given as strided views of shape `m x k` and `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is an exclusively borrowed, densely packed m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `ln(1 + e^z)`, floored at the smallest positive normal so the result stays
/// strictly positive even where `e^z` underflows.
#[inline]
pub fn softplus(z: f64) -> f64 {
    let v = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    v.max(f64::MIN_POSITIVE)
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_params(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    let expected = spec.genome_length();
    if params.len() != expected {
        return Err(Error::dims("parameter vector length", expected, params.len()));
    }
    Ok(())
}

pub fn forward(spec: &MlpSpec, params: &[f64], batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    check_params(spec, params)?;
    if batch.cols() != spec.input_dim() {
        return Err(Error::dims("input batch width", spec.input_dim(), batch.cols()));
    }
    let k = batch.rows();
    let layout = spec.layout();
    let mut post = Vec::with_capacity(layout.len() + 1);
    let mut pre = Vec::with_capacity(layout.len());
    post.push(batch.data().to_vec());

    for layer in &layout {
        let input = post.last().expect("input pushed");
        let bias = &params[layer.bias.clone()];
        let mut z = Vec::with_capacity(k * layer.fan_out);
        for _ in 0..k {
            z.extend_from_slice(bias);
        }
        // z += input (k x in) * W^T (in x out)
        gemm(
            k,
            layer.fan_in,
            layer.fan_out,
            input,
            (layer.fan_in, 1),
            &params[layer.weights.clone()],
            (1, layer.fan_in),
            1.0,
            &mut z,
        );
        let a = activate(layer.activation, params, &z, layer.fan_out);
        pre.push(z);
        post.push(a);
    }

    let output = Matrix::from_vec(k, spec.output_dim(), post.last().expect("layers").clone())?;
    Ok((output, ForwardTrace { batch: k, post, pre }))
}

fn activate(act: LayerActivation, params: &[f64], z: &[f64], width: usize) -> Vec<f64> {
    match act {
        LayerActivation::Identity => z.to_vec(),
        LayerActivation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
        LayerActivation::PRelu { alpha } => {
            let a = alpha.map_or(DEFAULT_PRELU_ALPHA, |i| params[i]);
            z.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect()
        }
        LayerActivation::SoftPlus => z.iter().map(|&v| softplus(v)).collect(),
        LayerActivation::Softmax => {
            let mut out = z.to_vec();
            out.chunks_exact_mut(width).for_each(softmax_in_place);
            out
        }
    }
}

/// Exact gradients of `sum(upstream .* output)` with respect to the
/// parameters and to the input batch.
pub fn backward(spec: &MlpSpec, params: &[f64], trace: &ForwardTrace, upstream: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (grads, input) = backward_impl(spec, params, trace, upstream, true)?;
    Ok((grads.expect("requested"), input))
}

/// Like [`backward`] but skips the parameter gradients.
pub fn backward_inputs(spec: &MlpSpec, params: &[f64], trace: &ForwardTrace, upstream: &Matrix) -> Result<Matrix> {
    Ok(backward_impl(spec, params, trace, upstream, false)?.1)
}

fn backward_impl(
    spec: &MlpSpec,
    params: &[f64],
    trace: &ForwardTrace,
    upstream: &Matrix,
    want_params: bool,
) -> Result<(Option<Vec<f64>>, Matrix)> {
    check_params(spec, params)?;
    let layout = spec.layout();
    let k = trace.batch;
    if trace.pre.len() != layout.len() || trace.post.len() != layout.len() + 1 {
        return Err(Error::dims("trace layer count", layout.len(), trace.pre.len()));
    }
    for (l, layer) in layout.iter().enumerate() {
        if trace.pre[l].len() != k * layer.fan_out || trace.post[l].len() != k * layer.fan_in {
            return Err(Error::dims("trace layer width", k * layer.fan_out, trace.pre[l].len()));
        }
    }
    if upstream.rows() != k {
        return Err(Error::dims("upstream gradient rows", k, upstream.rows()));
    }
    if upstream.cols() != spec.output_dim() {
        return Err(Error::dims(
            "upstream gradient width",
            spec.output_dim(),
            upstream.cols(),
        ));
    }

    let mut grads = want_params.then(|| vec![0.0; params.len()]);
    let mut delta = upstream.data().to_vec();

    for (l, layer) in layout.iter().enumerate().rev() {
        let z = &trace.pre[l];
        let input = &trace.post[l];
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);

        let dz: Vec<f64> = match layer.activation {
            LayerActivation::Identity => delta,
            LayerActivation::Relu => delta
                .iter()
                .zip(z)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            LayerActivation::PRelu { alpha } => {
                let a = alpha.map_or(DEFAULT_PRELU_ALPHA, |i| params[i]);
                if let (Some(i), Some(g)) = (alpha, grads.as_mut()) {
                    g[i] = delta
                        .iter()
                        .zip(z)
                        .filter(|(_, &v)| v <= 0.0)
                        .map(|(&d, &v)| d * v)
                        .sum();
                }
                delta
                    .iter()
                    .zip(z)
                    .map(|(&d, &v)| if v > 0.0 { d } else { a * d })
                    .collect()
            }
            LayerActivation::SoftPlus => delta.iter().zip(z).map(|(&d, &v)| d * logistic(v)).collect(),
            LayerActivation::Softmax => {
                let out = &trace.post[l + 1];
                let mut dz = delta;
                for (d_row, p_row) in dz.chunks_exact_mut(fan_out).zip(out.chunks_exact(fan_out)) {
                    let dot: f64 = d_row.iter().zip(p_row).map(|(d, p)| d * p).sum();
                    for (d, &p) in d_row.iter_mut().zip(p_row) {
                        *d = p * (*d - dot);
                    }
                }
                dz
            }
        };

        if let Some(g) = grads.as_mut() {
            // dW (out x in) = dz^T (out x k) * input (k x in)
            gemm(
                fan_out,
                k,
                fan_in,
                &dz,
                (1, fan_out),
                input,
                (fan_in, 1),
                0.0,
                &mut g[layer.weights.clone()],
            );
            let db = &mut g[layer.bias.clone()];
            for row in dz.chunks_exact(fan_out) {
                for (b, &d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }

        // d input (k x in) = dz (k x out) * W (out x in)
        let mut next = vec![0.0; k * fan_in];
        gemm(
            k,
            fan_out,
            fan_in,
            &dz,
            (fan_out, 1),
            &params[layer.weights.clone()],
            (fan_in, 1),
            0.0,
            &mut next,
        );
        delta = next;
    }

    let input_grads = Matrix::from_vec(k, spec.input_dim(), delta)?;
    Ok((grads, input_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    fn linear(dims: Vec<usize>, out: OutputActivation) -> MlpSpec {
        MlpSpec::new(dims, HiddenActivation::Identity, out, false).unwrap()
    }

    #[test]
    fn genome_lengths() {
        assert_eq!(MlpSpec::canonical_mln().genome_length(), 175_718);
        assert_eq!(linear(vec![2, 1], OutputActivation::Identity).genome_length(), 3);
        assert_eq!(linear(vec![5, 2], OutputActivation::Softmax).genome_length(), 12);
        let no_alpha = MlpSpec::new(
            vec![4, 32, 64, 128, 256, 512, 1],
            HiddenActivation::PRelu,
            OutputActivation::SoftPlus,
            false,
        )
        .unwrap();
        assert_eq!(no_alpha.genome_length(), 175_713);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![3], HiddenActivation::Relu, OutputActivation::Identity, false).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], HiddenActivation::Relu, OutputActivation::Identity, false).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = MlpSpec::canonical_mln();
        let layout = spec.layout();
        let mut expect = 0;
        for (l, layer) in layout.iter().enumerate() {
            assert_eq!(layer.weights.start, expect);
            assert_eq!(layer.bias.start, layer.weights.end);
            expect = layer.bias.end;
            match layer.activation {
                LayerActivation::PRelu { alpha: Some(i) } => {
                    assert_eq!(i, expect);
                    expect += 1;
                }
                LayerActivation::SoftPlus => assert_eq!(l, layout.len() - 1),
                other => panic!("unexpected activation {other:?}"),
            }
        }
        assert_eq!(expect, spec.genome_length());
    }

    #[test]
    fn xavier_bounds_bias_and_alpha() {
        let spec = MlpSpec::canonical_mln();
        let mut rng = rng_for(3, &[]);
        let params = xavier_init(&spec, &mut rng);
        for layer in spec.layout() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(params[layer.weights.clone()].iter().all(|w| w.abs() <= limit));
            assert!(params[layer.bias.clone()].iter().all(|&b| b == 0.0));
            if let LayerActivation::PRelu { alpha: Some(i) } = layer.activation {
                assert_eq!(params[i], 0.25);
            }
        }
        let first = &spec.layout()[0];
        assert_eq!(first.fan_in + first.fan_out, 36);
        assert!(((6.0f64 / 36.0).sqrt() - 0.40825).abs() < 1e-5);
    }

    #[test]
    fn xavier_fills_the_interval() {
        // 4 -> 2500 layer: 10^4 draws should reach close to both bounds.
        let spec = linear(vec![4, 2500], OutputActivation::Identity);
        let params = xavier_init(&spec, &mut rng_for(11, &[]));
        let limit = (6.0f64 / 2504.0).sqrt();
        let w = &params[0..10_000];
        let max = w.iter().copied().fold(f64::MIN, f64::max);
        let min = w.iter().copied().fold(f64::MAX, f64::min);
        assert!(max <= limit && max > 0.99 * limit);
        assert!(min >= -limit && min < -0.99 * limit);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        // uniform variance limit^2/3; 5 standard errors
        assert!(mean.abs() < 5.0 * limit / (3.0f64 * 1e4).sqrt());
    }

    #[test]
    fn xavier_is_deterministic() {
        let spec = MlpSpec::canonical_mln();
        let a = xavier_init(&spec, &mut rng_for(5, &[1]));
        let b = xavier_init(&spec, &mut rng_for(5, &[1]));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn linear_forward_and_backward() {
        let spec = linear(vec![2, 1], OutputActivation::Identity);
        let params = [1.0, 1.0, 0.0];
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (out, trace) = forward(&spec, &params, &x).unwrap();
        assert_eq!(out.data(), &[7.0]);
        let up = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (g, gx) = backward(&spec, &params, &trace, &up).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0]);
        assert_eq!(g, vec![3.0, 4.0, 1.0]);
    }

    #[test]
    fn softplus_and_prelu_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(logistic(0.0), 0.5);
        assert!(softplus(-1000.0) > 0.0);
        assert!((softplus(50.0) - 50.0).abs() < 1e-15);

        // one hidden PReLU unit with identity weights: -2 -> -0.5
        let spec = MlpSpec::new(vec![1, 1, 1], HiddenActivation::PRelu, OutputActivation::Identity, true).unwrap();
        let params = [1.0, 0.0, 0.25, 1.0, 0.0];
        let x = Matrix::from_vec(1, 1, vec![-2.0]).unwrap();
        let (out, trace) = forward(&spec, &params, &x).unwrap();
        assert_eq!(out.data(), &[-0.5]);
        let up = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (g, _) = backward(&spec, &params, &trace, &up).unwrap();
        // d/d alpha of alpha * z at z = -2
        assert_eq!(g[2], -2.0);
    }

    #[test]
    fn softplus_output_local_derivative() {
        let spec = linear(vec![1, 1], OutputActivation::SoftPlus);
        let params = [1.0, 0.0];
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let (out, trace) = forward(&spec, &params, &x).unwrap();
        assert!((out.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let up = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let gx = backward_inputs(&spec, &params, &trace, &up).unwrap();
        assert_eq!(gx.data(), &[0.5]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2.0f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let spec = linear(vec![2, 1], OutputActivation::Identity);
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let err = forward(&spec, &[1.0, 1.0], &x).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                actual: 2,
                ..
            }
        ));
        let x3 = Matrix::from_rows(&[vec![3.0, 4.0, 5.0]]).unwrap();
        assert!(forward(&spec, &[1.0, 1.0, 0.0], &x3).is_err());

        let (_, trace) = forward(&spec, &[1.0, 1.0, 0.0], &x).unwrap();
        let other = linear(vec![2, 3, 1], OutputActivation::Identity);
        let up = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let p = vec![0.0; other.genome_length()];
        assert!(backward(&other, &p, &trace, &up).is_err());
        let up2 = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(backward(&spec, &[1.0, 1.0, 0.0], &trace, &up2).is_err());
    }
}
