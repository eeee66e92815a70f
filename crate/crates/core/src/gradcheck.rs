//! Finite-difference verification of the analytic gradients.
//!
//! [`run_suite`] checks every layer type in 64-bit precision against central
//! differences, plus a spot check of the whole network on 16x16 inputs (the
//! smallest size the two 5x5 convolutions and two poolings admit).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dpl::DictionaryPair;
use crate::error::{Error, Result};
use crate::layers::{
    one_hot, relu, relu_backward, selu, selu_backward, softmax_cross_entropy, AvgPoolLayer,
    Connectivity, ConvLayer, FcLayer,
};
use crate::model::{Model, ModelConfig};
use crate::rng::{Rng as StreamRng, SeedStreams};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn numerical_gradient(
    x: &Tensor<f64>,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// One entry of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckKind {
    Conv,
    Pool,
    Selu,
    Relu,
    Fc,
    SoftmaxCe,
    Dpl,
    WholeModel,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::Conv,
        CheckKind::Pool,
        CheckKind::Selu,
        CheckKind::Relu,
        CheckKind::Fc,
        CheckKind::SoftmaxCe,
        CheckKind::Dpl,
        CheckKind::WholeModel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckKind::Conv => "conv",
            CheckKind::Pool => "pool",
            CheckKind::Selu => "selu",
            CheckKind::Relu => "relu",
            CheckKind::Fc => "fc",
            CheckKind::SoftmaxCe => "softmax-ce",
            CheckKind::Dpl => "dpl",
            CheckKind::WholeModel => "whole-model",
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            CheckKind::WholeModel => MODEL_TOLERANCE,
            _ => LAYER_TOLERANCE,
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient check {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<CheckKind> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.kind)
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck seed={}", self.seed)?;
        for r in &self.results {
            writeln!(
                f,
                "{:<12} max_rel_err={:.3e} tol={:.0e} {}",
                r.kind.as_str(),
                r.max_relative_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Flips the sign of one check's analytic gradient; used to confirm the
/// harness notices a broken backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection(pub Option<CheckKind>);

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64, fault: FaultInjection) -> Result<GradcheckReport> {
    let streams = SeedStreams::new(seed);
    let mut results = Vec::new();
    for kind in CheckKind::ALL {
        let mut rng = streams.stream(&format!("gradcheck/{kind}"));
        let sign = if fault.0 == Some(kind) { -1.0 } else { 1.0 };
        let err = match kind {
            CheckKind::Conv => check_conv(&mut rng, sign)?,
            CheckKind::Pool => check_pool(&mut rng, sign)?,
            CheckKind::Selu => check_activation(&mut rng, sign, selu, selu_backward)?,
            CheckKind::Relu => check_activation(&mut rng, sign, relu, relu_backward)?,
            CheckKind::Fc => check_fc(&mut rng, sign)?,
            CheckKind::SoftmaxCe => check_softmax_ce(&mut rng, sign)?,
            CheckKind::Dpl => check_dpl(&mut rng, sign)?,
            CheckKind::WholeModel => check_model(&mut rng, sign)?,
        };
        results.push(CheckResult {
            kind,
            max_relative_error: err,
            tolerance: kind.tolerance(),
        });
    }
    Ok(GradcheckReport { seed, results })
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform in `[-hi, -lo] u [lo, hi]`, keeping clear of activation kinks.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn worst(pairs: &[(&Tensor<f64>, Tensor<f64>)], sign: f64) -> f64 {
    pairs
        .iter()
        .map(|(analytic, numeric)| {
            let a: Vec<f64> = analytic.data().iter().map(|v| sign * v).collect();
            relative_error(&a, numeric.data())
        })
        .fold(0.0, f64::max)
}

fn check_conv(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let conn = Connectivity::from_lists(3, &[&[0, 1], &[1, 2], &[0, 1, 2]])?;
    let layer = ConvLayer::<f64>::from_parts(
        uniform(rng, &[3, 3, 3, 3], -0.5, 0.5),
        uniform(rng, &[3], -0.5, 0.5),
        conn,
    )?;
    let x = uniform(rng, &[2, 3, 6, 6], -1.0, 1.0);
    let w = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    let g = layer.backward(&x, &w)?;
    let f_in = numerical_gradient(&x, FD_EPS, |x| dot(&layer.forward(x).unwrap(), &w));
    let f_k = numerical_gradient(&layer.kernels, FD_EPS, |k| {
        let l = ConvLayer::from_parts(
            k.clone(),
            layer.biases.clone(),
            layer.connectivity().clone(),
        )
        .unwrap();
        dot(&l.forward(&x).unwrap(), &w)
    });
    let f_b = numerical_gradient(&layer.biases, FD_EPS, |b| {
        let l = ConvLayer::from_parts(
            layer.kernels.clone(),
            b.clone(),
            layer.connectivity().clone(),
        )
        .unwrap();
        dot(&l.forward(&x).unwrap(), &w)
    });
    Ok(worst(
        &[(&g.input, f_in), (&g.kernels, f_k), (&g.biases, f_b)],
        sign,
    ))
}

fn check_pool(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let layer = AvgPoolLayer::<f64> {
        coefficients: uniform(rng, &[3], 0.5, 1.5),
        biases: uniform(rng, &[3], -0.5, 0.5),
    };
    let x = uniform(rng, &[2, 3, 4, 6], -1.0, 1.0);
    let w = uniform(rng, &[2, 3, 2, 3], -1.0, 1.0);
    let g = layer.backward(&x, &w)?;
    let f_in = numerical_gradient(&x, FD_EPS, |x| dot(&layer.forward(x).unwrap(), &w));
    let f_c = numerical_gradient(&layer.coefficients, FD_EPS, |c| {
        let l = AvgPoolLayer {
            coefficients: c.clone(),
            biases: layer.biases.clone(),
        };
        dot(&l.forward(&x).unwrap(), &w)
    });
    let f_b = numerical_gradient(&layer.biases, FD_EPS, |b| {
        let l = AvgPoolLayer {
            coefficients: layer.coefficients.clone(),
            biases: b.clone(),
        };
        dot(&l.forward(&x).unwrap(), &w)
    });
    Ok(worst(
        &[(&g.input, f_in), (&g.coefficients, f_c), (&g.biases, f_b)],
        sign,
    ))
}

fn check_activation(
    rng: &mut StreamRng,
    sign: f64,
    forward: fn(&Tensor<f64>) -> Tensor<f64>,
    backward: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<f64> {
    let x = away_from_zero(rng, &[4, 25], 0.05, 2.0);
    let w = uniform(rng, &[4, 25], -1.0, 1.0);
    let g = backward(&x, &w)?;
    let f = numerical_gradient(&x, FD_EPS, |x| dot(&forward(x), &w));
    Ok(worst(&[(&g, f)], sign))
}

fn check_fc(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let layer = FcLayer::<f64> {
        weights: uniform(rng, &[5, 7], -0.5, 0.5),
        biases: uniform(rng, &[5], -0.5, 0.5),
    };
    let x = uniform(rng, &[3, 7], -1.0, 1.0);
    let w = uniform(rng, &[3, 5], -1.0, 1.0);
    let g = layer.backward(&x, &w)?;
    let f_in = numerical_gradient(&x, FD_EPS, |x| dot(&layer.forward(x).unwrap(), &w));
    let f_w = numerical_gradient(&layer.weights, FD_EPS, |m| {
        let l = FcLayer {
            weights: m.clone(),
            biases: layer.biases.clone(),
        };
        dot(&l.forward(&x).unwrap(), &w)
    });
    let f_b = numerical_gradient(&layer.biases, FD_EPS, |b| {
        let l = FcLayer {
            weights: layer.weights.clone(),
            biases: b.clone(),
        };
        dot(&l.forward(&x).unwrap(), &w)
    });
    Ok(worst(
        &[(&g.input, f_in), (&g.weights, f_w), (&g.biases, f_b)],
        sign,
    ))
}

fn check_softmax_ce(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let logits = uniform(rng, &[4, 6], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let targets = one_hot::<f64>(&labels, 6)?;
    let (_, g) = softmax_cross_entropy(&logits, &targets)?;
    let f = numerical_gradient(&logits, FD_EPS, |z| {
        softmax_cross_entropy(z, &targets).unwrap().0
    });
    Ok(worst(&[(&g, f)], sign))
}

/// `<W, D P X> + w ||X - D P X||^2`; the l1 term is handled by the proximal step.
fn check_dpl(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let (m, k, n) = (6, 9, 5);
    let pair = DictionaryPair::from_parts(
        uniform(rng, &[m, k], -0.5, 0.5),
        uniform(rng, &[k, m], -0.5, 0.5),
        1e-4,
        1.0,
    )?;
    let x = uniform(rng, &[m, n], -1.0, 1.0);
    let w = uniform(rng, &[m, n], -1.0, 1.0);
    let weight = 0.7;
    let objective = |pair: &DictionaryPair<f64>, x: &Tensor<f64>| {
        let fwd = pair.forward(x).unwrap();
        dot(&fwd.output, &w) + weight * pair.reconstruction_error(x, &fwd.output).unwrap()
    };
    let g = pair.backward_weighted(&x, &pair.forward(&x)?, &w, weight, false)?;
    let f_in = numerical_gradient(&x, FD_EPS, |x| objective(&pair, x));
    let f_d = numerical_gradient(&pair.d, FD_EPS, |d| {
        objective(
            &DictionaryPair::from_parts(d.clone(), pair.p.clone(), 1e-4, 1.0).unwrap(),
            &x,
        )
    });
    let f_p = numerical_gradient(&pair.p, FD_EPS, |p| {
        objective(
            &DictionaryPair::from_parts(pair.d.clone(), p.clone(), 1e-4, 1.0).unwrap(),
            &x,
        )
    });
    Ok(worst(&[(&g.input, f_in), (&g.d, f_d), (&g.p, f_p)], sign))
}

/// Spot check: three random coordinates of every parameter tensor.
fn check_model(rng: &mut StreamRng, sign: f64) -> Result<f64> {
    let cfg = ModelConfig {
        atoms_dpl3: 12,
        atoms_dpl6: 6,
        class_count: 2,
        input_size: 16,
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(&cfg)?;
    // Fresh networks are nearly silent on tiny inputs, which leaves many
    // pre-activations within a step of a ReLU kink; random biases and a
    // larger input scale move them clear.
    for p in model.parameters_mut() {
        if p.name.ends_with(".biases") {
            *p.value = uniform(rng, p.value.shape(), -0.3, 0.3);
        }
    }
    let x = uniform(rng, &[3, 1, 16, 16], 0.0, 4.0);
    let targets = one_hot::<f64>(&[0, 1, 1], 2)?;
    let (_, cache) = model.forward_loss(&x, &targets)?;
    let grads = model.backward(&cache, &targets)?;
    let base_kinks = cache.kink_signs();
    let mut worst_err: f64 = 0.0;
    for (t, grad) in grads.iter().enumerate() {
        let len = grad.len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        // The derivative is undefined where a probe crosses an activation
        // kink; such coordinates are redrawn.
        let mut attempts = 0;
        while analytic.len() < 3.min(len) && attempts < 50 {
            attempts += 1;
            let i = rng.gen_range(0..len);
            let mut eval = |delta: f64| {
                let orig = {
                    let mut params = model.parameters_mut();
                    let v = &mut params[t].value.data_mut()[i];
                    let orig = *v;
                    *v = orig + delta;
                    orig
                };
                let (loss, cache) = model.forward_loss(&x, &targets).unwrap();
                model.parameters_mut()[t].value.data_mut()[i] = orig;
                (loss.smooth_total(), cache.kink_signs())
            };
            let (plus, kp) = eval(FD_EPS);
            let (minus, km) = eval(-FD_EPS);
            if kp != base_kinks || km != base_kinks {
                continue;
            }
            numeric.push((plus - minus) / (2.0 * FD_EPS));
            analytic.push(sign * grad.data()[i]);
        }
        worst_err = worst_err.max(relative_error(&analytic, &numeric));
    }
    Ok(worst_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn numerical_gradient_of_quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numerical_gradient(&x, FD_EPS, |x| x.data().iter().map(|v| v * v).sum());
        assert!(relative_error(g.data(), &[2.0, -4.0, 1.0]) < 1e-9);
    }

    #[test]
    fn suite_passes_and_is_deterministic() {
        let report = run_suite(0, FaultInjection::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(
            report.to_string(),
            run_suite(0, FaultInjection::default()).unwrap().to_string()
        );
    }

    #[test]
    fn injected_fault_is_reported_by_name() {
        let report = run_suite(1, FaultInjection(Some(CheckKind::Pool))).unwrap();
        assert_eq!(report.failures(), vec![CheckKind::Pool]);
        assert!(report.to_string().contains("pool"));
    }

    #[test]
    fn check_names_round_trip() {
        for k in CheckKind::ALL {
            assert_eq!(k.as_str().parse::<CheckKind>().unwrap(), k);
        }
        assert!("bogus".parse::<CheckKind>().is_err());
    }
}
