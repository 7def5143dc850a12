//! Classification losses over softmax predictions.
//!
//! The learned loss sees one `(true class, wrong class)` pair at a time as
//! the vector `[p_true, p_false, 1, 0]`. A sample with `n` classes contributes
//! `n - 1` such terms; a batch of `K` samples is normalized by `K (n - 1)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, FlatParams, Matrix, MlpSpec};

pub const CE_CLAMP: f64 = 1e-12;

/// A meta-loss network: any spec with 4 inputs and 1 output.
#[derive(Clone, Debug)]
pub struct MetaLossNet {
    spec: MlpSpec,
    params: FlatParams,
}

impl MetaLossNet {
    pub fn new(spec: MlpSpec, params: FlatParams) -> Result<Self> {
        if spec.input_dim() != 4 {
            return Err(Error::dims("meta-loss input width", 4, spec.input_dim()));
        }
        if spec.output_dim() != 1 {
            return Err(Error::dims("meta-loss output width", 1, spec.output_dim()));
        }
        if params.len() != spec.genome_length() {
            return Err(Error::dims(
                "meta-loss parameter count",
                spec.genome_length(),
                params.len(),
            ));
        }
        Ok(Self { spec, params })
    }

    pub fn canonical(params: FlatParams) -> Result<Self> {
        Self::new(MlpSpec::canonical_mln(), params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    fn inputs(pairs: &[(f64, f64)]) -> Matrix {
        let mut data = Vec::with_capacity(pairs.len() * 4);
        for &(t, f) in pairs {
            data.extend_from_slice(&[t, f, 1.0, 0.0]);
        }
        Matrix::from_vec(pairs.len(), 4, data).expect("4 columns per pair")
    }

    /// Loss values for each `(p_true, p_false)` pair, and the gradient of
    /// `weight * sum(values)` with respect to both probabilities of each pair.
    pub fn evaluate(&self, pairs: &[(f64, f64)], weight: f64) -> (Vec<f64>, Vec<(f64, f64)>) {
        let x = Self::inputs(pairs);
        let (out, trace) = nn::forward(&self.spec, &self.params, &x).expect("validated at construction");
        let upstream = Matrix::from_vec(pairs.len(), 1, vec![weight; pairs.len()]).expect("column");
        let gx = nn::backward_inputs(&self.spec, &self.params, &trace, &upstream).expect("matching trace");
        let grads = gx.iter_rows().map(|r| (r[0], r[1])).collect();
        (out.into_vec(), grads)
    }

    pub fn values(&self, pairs: &[(f64, f64)]) -> Vec<f64> {
        let x = Self::inputs(pairs);
        nn::forward(&self.spec, &self.params, &x)
            .expect("validated at construction")
            .0
            .into_vec()
    }
}

pub fn mln_value(net: &MetaLossNet, p_true: f64, p_false: f64) -> f64 {
    net.values(&[(p_true, p_false)])[0]
}

pub fn mln_grad(net: &MetaLossNet, p_true: f64, p_false: f64) -> (f64, f64) {
    net.evaluate(&[(p_true, p_false)], 1.0).1[0]
}

fn check_class(n: usize, class: usize) -> Result<()> {
    if class >= n {
        return Err(Error::dims("class index bound", n, class));
    }
    Ok(())
}

pub fn ce_value(probs: &[f64], true_class: usize) -> Result<f64> {
    check_class(probs.len(), true_class)?;
    Ok(-probs[true_class].max(CE_CLAMP).ln())
}

/// `-1/p` at the true slot. The floor only guards against an exact zero, so
/// the gradient through a softmax stays `probs - onehot` even when the
/// value itself is clamped.
pub fn ce_grad(probs: &[f64], true_class: usize) -> Result<Vec<f64>> {
    check_class(probs.len(), true_class)?;
    let mut g = vec![0.0; probs.len()];
    g[true_class] = -1.0 / probs[true_class].max(f64::MIN_POSITIVE);
    Ok(g)
}

pub fn mse_value(probs: &[f64], onehot: &[f64]) -> Result<f64> {
    if probs.len() != onehot.len() {
        return Err(Error::dims("mse target length", probs.len(), onehot.len()));
    }
    let sum: f64 = probs.iter().zip(onehot).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(sum / probs.len() as f64)
}

pub fn mse_grad(probs: &[f64], onehot: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != onehot.len() {
        return Err(Error::dims("mse target length", probs.len(), onehot.len()));
    }
    let k = probs.len() as f64;
    Ok(probs.iter().zip(onehot).map(|(p, y)| 2.0 * (p - y) / k).collect())
}

pub fn one_hot(n: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// Serializable name of a loss kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Mln,
    Ce,
    Mse,
}

impl LossName {
    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Mln => "mln",
            LossName::Ce => "ce",
            LossName::Mse => "mse",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mln" => Ok(LossName::Mln),
            "ce" => Ok(LossName::Ce),
            "mse" => Ok(LossName::Mse),
            other => Err(format!("unknown loss '{other}' (expected mln, ce or mse)")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind<'a> {
    Mln(&'a MetaLossNet),
    CrossEntropy,
    MeanSquaredError,
}

impl LossKind<'_> {
    pub fn name(&self) -> LossName {
        match self {
            LossKind::Mln(_) => LossName::Mln,
            LossKind::CrossEntropy => LossName::Ce,
            LossKind::MeanSquaredError => LossName::Mse,
        }
    }
}

/// Batch loss over softmax predictions (`K x n`) and its gradient with
/// respect to the predictions.
pub fn multiclass_batch_loss(predictions: &Matrix, labels: &[usize], kind: &LossKind<'_>) -> Result<(f64, Matrix)> {
    let n = predictions.cols();
    let k = predictions.rows();
    if n < 2 {
        return Err(Error::dims("class count (minimum)", 2, n));
    }
    if labels.len() != k {
        return Err(Error::dims("label count", k, labels.len()));
    }
    for &y in labels {
        check_class(n, y)?;
    }
    let mut grad = Matrix::zeros(k, n);
    if k == 0 {
        return Ok((0.0, grad));
    }

    let value = match kind {
        LossKind::Mln(net) => {
            let mut pairs = Vec::with_capacity(k * (n - 1));
            for (row, &y) in predictions.iter_rows().zip(labels) {
                for (i, &p) in row.iter().enumerate() {
                    if i != y {
                        pairs.push((row[y], p));
                    }
                }
            }
            let norm = 1.0 / (k * (n - 1)) as f64;
            let (values, pair_grads) = net.evaluate(&pairs, norm);
            let mut it = pair_grads.into_iter();
            for (j, &y) in labels.iter().enumerate() {
                let g = grad.row_mut(j);
                for i in (0..n).filter(|&i| i != y) {
                    let (gt, gf) = it.next().expect("one gradient per pair");
                    g[y] += gt;
                    g[i] += gf;
                }
            }
            values.iter().sum::<f64>() * norm
        }
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for (j, &y) in labels.iter().enumerate() {
                let row = predictions.row(j);
                total += ce_value(row, y)?;
                let g = ce_grad(row, y)?;
                for (dst, v) in grad.row_mut(j).iter_mut().zip(g) {
                    *dst = v / k as f64;
                }
            }
            total / k as f64
        }
        LossKind::MeanSquaredError => {
            let mut total = 0.0;
            for (j, &y) in labels.iter().enumerate() {
                let row = predictions.row(j);
                let target = one_hot(n, y);
                total += mse_value(row, &target)?;
                let g = mse_grad(row, &target)?;
                for (dst, v) in grad.row_mut(j).iter_mut().zip(g) {
                    *dst = v / k as f64;
                }
            }
            total / k as f64
        }
    };
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HiddenActivation, OutputActivation};

    /// `[4, 1]` SoftPlus net computing `softplus(p_true - p_false)`.
    fn toy() -> MetaLossNet {
        let spec = MlpSpec::new(
            vec![4, 1],
            HiddenActivation::Identity,
            OutputActivation::SoftPlus,
            false,
        )
        .unwrap();
        MetaLossNet::new(spec, vec![1.0, -1.0, 0.0, 0.0, 0.0].into()).unwrap()
    }

    #[test]
    fn toy_value_and_gradient() {
        let net = toy();
        assert!((mln_value(&net, 0.8, 0.2) - 1.037488).abs() < 1e-6);
        let (gt, gf) = mln_grad(&net, 0.8, 0.2);
        assert!((gt - 0.645656).abs() < 1e-6);
        assert!((gf + 0.645656).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let spec = MlpSpec::new(
            vec![3, 1],
            HiddenActivation::Identity,
            OutputActivation::SoftPlus,
            false,
        )
        .unwrap();
        assert!(MetaLossNet::new(spec, vec![0.0; 4].into()).is_err());
        assert!(MetaLossNet::canonical(vec![0.0; 10].into()).is_err());
    }

    #[test]
    fn ce_and_mse_examples() {
        assert_eq!(ce_value(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((ce_value(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((ce_value(&[0.0, 1.0], 0).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(ce_value(&[0.5, 0.5], 2).is_err());
        assert_eq!(mse_value(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mse_value(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.25);
        assert!(mse_value(&[0.5, 0.5], &[1.0]).is_err());
        assert_eq!(mse_grad(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn binary_batch_is_mean_of_pair_values() {
        let net = toy();
        let preds = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let labels = [0, 0, 1];
        let (v, _) = multiclass_batch_loss(&preds, &labels, &LossKind::Mln(&net)).unwrap();
        let expect = (mln_value(&net, 0.7, 0.3) + mln_value(&net, 0.1, 0.9) + mln_value(&net, 0.5, 0.5)) / 3.0;
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn three_class_closed_form() {
        let net = toy();
        let preds = Matrix::from_rows(&[vec![0.6, 0.3, 0.1]]).unwrap();
        let (v, g) = multiclass_batch_loss(&preds, &[0], &LossKind::Mln(&net)).unwrap();
        let expect = 0.5 * (nn::softplus(0.3) + nn::softplus(0.5));
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.914216).abs() < 1e-6);
        let (s1, s2) = (nn::logistic(0.3), nn::logistic(0.5));
        assert!((g.row(0)[0] - 0.5 * (s1 + s2)).abs() < 1e-15);
        assert!((g.row(0)[1] + 0.5 * s1).abs() < 1e-15);
        assert!((g.row(0)[2] + 0.5 * s2).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_errors() {
        let one_class = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(multiclass_batch_loss(&one_class, &[0], &LossKind::CrossEntropy).is_err());
        let preds = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(multiclass_batch_loss(&preds, &[2], &LossKind::CrossEntropy).is_err());
        assert!(multiclass_batch_loss(&preds, &[0, 1], &LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn constant_mln_has_zero_gradient() {
        let spec = MlpSpec::canonical_mln();
        let mut rng = crate::seeds::rng_for(1, &[]);
        let mut params = nn::xavier_init(&spec, &mut rng);
        let first = spec.layout()[0].weights.clone();
        params[first].fill(0.0);
        let net = MetaLossNet::new(spec, params).unwrap();
        assert_eq!(mln_grad(&net, 0.3, 0.7), (0.0, 0.0));
    }

    #[test]
    fn baselines_minimized_at_onehot() {
        for y in 0..2 {
            let onehot = one_hot(2, y);
            let at_target_ce = ce_value(&onehot, y).unwrap();
            let at_target_mse = mse_value(&onehot, &onehot).unwrap();
            for i in 0..=100 {
                let p = i as f64 / 100.0;
                let probs = [p, 1.0 - p];
                assert!(ce_value(&probs, y).unwrap() >= at_target_ce);
                assert!(mse_value(&probs, &onehot).unwrap() >= at_target_mse);
            }
        }
    }

    #[test]
    fn loss_names_parse() {
        for n in [LossName::Mln, LossName::Ce, LossName::Mse] {
            assert_eq!(n.as_str().parse::<LossName>().unwrap(), n);
        }
        assert!("hinge".parse::<LossName>().is_err());
    }
}
