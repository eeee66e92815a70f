//! The CDPL-Net layer stack:
//!
//! ```text
//! input -> C1 -> ReLU -> P2 -> [DPL3 -> SELU] -> C4 -> ReLU -> P5 -> [DPL6 -> SELU]
//!       -> flatten -> F8 -> ReLU -> F9 -> ReLU -> OUT -> softmax cross-entropy
//! ```
//!
//! Bracketed blocks are absent in the no-DPL ablation. The training
//! objective is the mean cross-entropy plus, for each DPL layer,
//! `gamma * (||X - DPX||_F^2 / n + beta * ||P||_1)` where `n` is the number
//! of feature-map columns in the batch.

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Geometry, ModelConfig};

use std::fmt;
use std::str::FromStr;

use crate::dpl::{flatten_maps, unflatten_maps, DictionaryPair, DplForward};
use crate::error::{Error, Result};
use crate::layers::{
    relu, relu_backward, selu, selu_backward, softmax_cross_entropy, AvgPoolLayer, Connectivity,
    ConvLayer, FcLayer,
};
use crate::optim::{Hook, ParamMut};
use crate::rng::SeedStreams;
use crate::tensor::{Matrix, Scalar, Tensor};

/// Layers whose activations can be exported as features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerTag {
    P2,
    Dpl3,
    P5,
    Dpl6,
}

impl LayerTag {
    pub const ALL: [LayerTag; 4] = [LayerTag::P2, LayerTag::Dpl3, LayerTag::P5, LayerTag::Dpl6];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerTag::P2 => "P2",
            LayerTag::Dpl3 => "DPL3",
            LayerTag::P5 => "P5",
            LayerTag::Dpl6 => "DPL6",
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P2" => Ok(LayerTag::P2),
            "DPL3" => Ok(LayerTag::Dpl3),
            "P5" => Ok(LayerTag::P5),
            "DPL6" => Ok(LayerTag::Dpl6),
            _ => Err(Error::UnknownLayer(s.to_string())),
        }
    }
}

/// Loss terms for one batch. `recon_dpl*` are per-column reconstruction
/// error plus the l1 penalty, before the `gamma` weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub total: f64,
    pub cross_entropy: f64,
    pub recon_dpl3: f64,
    pub recon_dpl6: f64,
    /// `gamma * beta * (||P3||_1 + ||P6||_1)`, the non-smooth part of `total`.
    pub l1_penalty: f64,
}

impl LossComponents {
    /// `total` without the l1 penalty: the part that gradients are taken of.
    pub fn smooth_total(&self) -> f64 {
        self.total - self.l1_penalty
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DplCache<T: Scalar> {
    x: Matrix<T>,
    fwd: DplForward<T>,
    /// Unflattened `DPX`, the SELU input.
    recon: Tensor<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct StageCache<T: Scalar> {
    pub(crate) input: Tensor<T>,
    pub(crate) conv: Tensor<T>,
    /// ReLU output (ReLU-first order) or pool output (pool-first order).
    pub(crate) mid: Tensor<T>,
    /// Block output before any DPL layer.
    pub(crate) features: Tensor<T>,
    pub(crate) dpl: Option<DplCache<T>>,
    /// What the next layer consumes.
    pub(crate) out: Tensor<T>,
}

/// Activations kept from [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    pub(crate) stage1: StageCache<T>,
    pub(crate) stage2: StageCache<T>,
    pub(crate) flat: Matrix<T>,
    pub(crate) f8: Matrix<T>,
    pub(crate) f9: Matrix<T>,
    pub logits: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sign of every ReLU and SELU input; finite differences are only
    /// meaningful while this stays fixed.
    pub(crate) fn kink_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for stage in [&self.stage1, &self.stage2] {
            signs.extend(stage.conv.data().iter().map(|v| *v > T::zero()));
            signs.extend(stage.mid.data().iter().map(|v| *v > T::zero()));
            if let Some(dc) = &stage.dpl {
                signs.extend(dc.recon.data().iter().map(|v| *v > T::zero()));
            }
        }
        signs.extend(
            self.f8
                .data()
                .iter()
                .chain(self.f9.data())
                .map(|v| *v > T::zero()),
        );
        signs
    }

    pub fn features(&self, tag: LayerTag) -> Option<&Tensor<T>> {
        match tag {
            LayerTag::P2 => Some(&self.stage1.features),
            LayerTag::P5 => Some(&self.stage2.features),
            LayerTag::Dpl3 => self.stage1.dpl.as_ref().map(|_| &self.stage1.out),
            LayerTag::Dpl6 => self.stage2.dpl.as_ref().map(|_| &self.stage2.out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    pub c1: ConvLayer<T>,
    pub p2: AvgPoolLayer<T>,
    pub dpl3: Option<DictionaryPair<T>>,
    pub c4: ConvLayer<T>,
    pub p5: AvgPoolLayer<T>,
    pub dpl6: Option<DictionaryPair<T>>,
    pub f8: FcLayer<T>,
    pub f9: FcLayer<T>,
    pub out: FcLayer<T>,
    bypass_selu: bool,
}

fn check_finite<T: Scalar>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation of {layer}")))
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized network. Each layer draws from its own
    /// seed sub-stream, so the DPL and no-DPL variants share every other weight.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let g = config.geometry()?;
        let streams = SeedStreams::new(config.seed);
        let init = |name: &str| streams.stream(&format!("init/{name}"));
        let (beta, gamma) = (T::from_f64(config.beta), T::from_f64(config.gamma));
        let c4_table = if config.c4_full_connectivity {
            Connectivity::full(16, 6)
        } else {
            Connectivity::lenet5()
        };
        let dpl = |m: usize, atoms: usize, name: &str| -> Result<Option<DictionaryPair<T>>> {
            if config.no_dpl_layers {
                Ok(None)
            } else {
                DictionaryPair::new(m, atoms, beta, gamma, &mut init(name)).map(Some)
            }
        };
        Ok(Self {
            c1: ConvLayer::new(Connectivity::full(6, 1), 5, &mut init("C1")),
            p2: AvgPoolLayer::new(6),
            dpl3: dpl(g.p2 * g.p2, config.atoms_dpl3, "DPL3")?,
            c4: ConvLayer::new(c4_table, 5, &mut init("C4")),
            p5: AvgPoolLayer::new(16),
            dpl6: dpl(g.p5 * g.p5, config.atoms_dpl6, "DPL6")?,
            f8: FcLayer::new(g.flat_features(), 120, &mut init("F8")),
            f9: FcLayer::new(120, 84, &mut init("F9")),
            out: FcLayer::new(84, config.class_count, &mut init("OUT")),
            config: config.clone(),
            bypass_selu: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the training-recipe fields of the config. Architecture fields must agree.
    pub fn set_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        if let Some(diff) = self.config.architecture_mismatch(&config) {
            return Err(Error::ConfigMismatch(diff));
        }
        let (beta, gamma) = (T::from_f64(config.beta), T::from_f64(config.gamma));
        for pair in [&mut self.dpl3, &mut self.dpl6].into_iter().flatten() {
            pair.beta = beta;
            pair.gamma = gamma;
        }
        self.config = config;
        Ok(())
    }

    /// Skips the SELU after each DPL layer. Only meant for equivalence tests.
    #[doc(hidden)]
    pub fn set_selu_bypass(&mut self, bypass: bool) {
        self.bypass_selu = bypass;
    }

    /// Trainable parameter counts per layer, in stack order.
    pub fn parameter_report(&self) -> Vec<(&'static str, usize)> {
        let mut rows = vec![
            ("C1", self.c1.parameter_count()),
            ("P2", self.p2.parameter_count()),
        ];
        if let Some(p) = &self.dpl3 {
            rows.push(("DPL3", p.parameter_count()));
        }
        rows.push(("C4", self.c4.parameter_count()));
        rows.push(("P5", self.p5.parameter_count()));
        if let Some(p) = &self.dpl6 {
            rows.push(("DPL6", p.parameter_count()));
        }
        rows.push(("F8", self.f8.parameter_count()));
        rows.push(("F9", self.f9.parameter_count()));
        rows.push(("OUT", self.out.parameter_count()));
        rows
    }

    /// Every parameter tensor with its checkpoint name, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("C1.kernels".into(), &self.c1.kernels),
            ("C1.biases".into(), &self.c1.biases),
            ("P2.coefficients".into(), &self.p2.coefficients),
            ("P2.biases".into(), &self.p2.biases),
        ];
        if let Some(p) = &self.dpl3 {
            out.push(("DPL3.D".into(), &p.d));
            out.push(("DPL3.P".into(), &p.p));
        }
        out.extend([
            ("C4.kernels".into(), &self.c4.kernels),
            ("C4.biases".into(), &self.c4.biases),
            ("P5.coefficients".into(), &self.p5.coefficients),
            ("P5.biases".into(), &self.p5.biases),
        ]);
        if let Some(p) = &self.dpl6 {
            out.push(("DPL6.D".into(), &p.d));
            out.push(("DPL6.P".into(), &p.p));
        }
        out.extend([
            ("F8.weights".into(), &self.f8.weights),
            ("F8.biases".into(), &self.f8.biases),
            ("F9.weights".into(), &self.f9.weights),
            ("F9.biases".into(), &self.f9.biases),
            ("OUT.weights".into(), &self.out.weights),
            ("OUT.biases".into(), &self.out.biases),
        ]);
        out
    }

    /// Mutable parameter views with optimizer hooks, in [`Model::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let shrink = Hook::SoftThreshold {
            weight: self.config.gamma * self.config.beta,
        };
        let plain = |name: &str, value| ParamMut {
            name: name.to_string(),
            value,
            hooks: vec![],
        };
        let mut out = vec![
            plain("C1.kernels", &mut self.c1.kernels),
            plain("C1.biases", &mut self.c1.biases),
            plain("P2.coefficients", &mut self.p2.coefficients),
            plain("P2.biases", &mut self.p2.biases),
        ];
        if let Some(p) = &mut self.dpl3 {
            out.push(ParamMut {
                name: "DPL3.D".into(),
                value: &mut p.d,
                hooks: vec![Hook::ProjectColumns],
            });
            out.push(ParamMut {
                name: "DPL3.P".into(),
                value: &mut p.p,
                hooks: vec![shrink],
            });
        }
        out.extend([
            plain("C4.kernels", &mut self.c4.kernels),
            plain("C4.biases", &mut self.c4.biases),
            plain("P5.coefficients", &mut self.p5.coefficients),
            plain("P5.biases", &mut self.p5.biases),
        ]);
        if let Some(p) = &mut self.dpl6 {
            out.push(ParamMut {
                name: "DPL6.D".into(),
                value: &mut p.d,
                hooks: vec![Hook::ProjectColumns],
            });
            out.push(ParamMut {
                name: "DPL6.P".into(),
                value: &mut p.p,
                hooks: vec![shrink],
            });
        }
        out.extend([
            plain("F8.weights", &mut self.f8.weights),
            plain("F8.biases", &mut self.f8.biases),
            plain("F9.weights", &mut self.f9.weights),
            plain("F9.biases", &mut self.f9.biases),
            plain("OUT.weights", &mut self.out.weights),
            plain("OUT.biases", &mut self.out.biases),
        ]);
        out
    }

    fn stage_forward(
        &self,
        x: Tensor<T>,
        conv: &ConvLayer<T>,
        pool: &AvgPoolLayer<T>,
        pair: Option<&DictionaryPair<T>>,
        names: (&str, &str, &str),
    ) -> Result<StageCache<T>> {
        let c = conv.forward(&x)?;
        check_finite(&c, names.0)?;
        let (mid, features) = if self.config.pool_before_relu {
            let pooled = pool.forward(&c)?;
            let r = relu(&pooled);
            (pooled, r)
        } else {
            let r = relu(&c);
            let pooled = pool.forward(&r)?;
            (r, pooled)
        };
        check_finite(&features, names.1)?;
        let (dpl, out) = match pair {
            None => (None, features.clone()),
            Some(pair) => {
                let &[b, ch, h, w] = features.shape() else {
                    unreachable!()
                };
                let xm = flatten_maps(&features)?;
                let fwd = pair.forward(&xm)?;
                let recon = unflatten_maps(&fwd.output, b, ch, h, w)?;
                check_finite(&recon, names.2)?;
                let out = if self.bypass_selu {
                    recon.clone()
                } else {
                    selu(&recon)
                };
                (Some(DplCache { x: xm, fwd, recon }), out)
            }
        };
        Ok(StageCache {
            input: x,
            conv: c,
            mid,
            features,
            dpl,
            out,
        })
    }

    /// Runs the network on `images` (`[b, 1, s, s]`) and keeps every activation.
    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardCache<T>> {
        let s = self.config.input_size;
        match *images.shape() {
            [_, 1, h, w] if h == s && w == s => {}
            _ => return Err(Error::shape("model input", images.shape(), &[0, 1, s, s])),
        }
        let stage1 = self.stage_forward(
            images.clone(),
            &self.c1,
            &self.p2,
            self.dpl3.as_ref(),
            ("C1", "P2", "DPL3"),
        )?;
        let stage2 = self.stage_forward(
            stage1.out.clone(),
            &self.c4,
            &self.p5,
            self.dpl6.as_ref(),
            ("C4", "P5", "DPL6"),
        )?;
        let b = images.shape()[0];
        let flat = stage2.out.clone().reshape(&[b, stage2.out.len() / b])?;
        let f8 = self.f8.forward(&flat)?;
        check_finite(&f8, "F8")?;
        let f9 = self.f9.forward(&relu(&f8))?;
        check_finite(&f9, "F9")?;
        let logits = self.out.forward(&relu(&f9))?;
        check_finite(&logits, "OUT")?;
        Ok(ForwardCache {
            stage1,
            stage2,
            flat,
            f8,
            f9,
            logits,
        })
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Matrix<T>> {
        Ok(self.forward(images)?.logits)
    }

    /// Loss components for a forward pass against one-hot `targets`.
    pub fn loss(&self, cache: &ForwardCache<T>, targets: &Matrix<T>) -> Result<LossComponents> {
        let (ce, _) = softmax_cross_entropy(&cache.logits, targets)?;
        let recon =
            |pair: Option<&DictionaryPair<T>>, stage: &StageCache<T>| -> Result<(f64, f64)> {
                match (pair, &stage.dpl) {
                    (Some(pair), Some(dc)) => {
                        let n = dc.x.cols() as f64;
                        let err = pair.reconstruction_error(&dc.x, &dc.fwd.output)?.to_f64() / n;
                        let l1 = pair.beta.to_f64() * pair.p.l1_norm().to_f64();
                        Ok((err + l1, l1))
                    }
                    _ => Ok((0.0, 0.0)),
                }
            };
        let (r3, l3) = recon(self.dpl3.as_ref(), &cache.stage1)?;
        let (r6, l6) = recon(self.dpl6.as_ref(), &cache.stage2)?;
        let ce = ce.to_f64();
        let gamma = self.config.gamma;
        let total = ce + gamma * (r3 + r6);
        if !total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        Ok(LossComponents {
            total,
            cross_entropy: ce,
            recon_dpl3: r3,
            recon_dpl6: r6,
            l1_penalty: gamma * (l3 + l6),
        })
    }

    /// Forward pass plus loss.
    pub fn forward_loss(
        &self,
        images: &Tensor<T>,
        targets: &Matrix<T>,
    ) -> Result<(LossComponents, ForwardCache<T>)> {
        let cache = self.forward(images)?;
        let loss = self.loss(&cache, targets)?;
        Ok((loss, cache))
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_backward(
        &self,
        cache: &StageCache<T>,
        grad_out: Tensor<T>,
        conv: &ConvLayer<T>,
        pool: &AvgPoolLayer<T>,
        pair: Option<&DictionaryPair<T>>,
        grads: &mut Vec<Tensor<T>>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        // Gradients are pushed in reverse parameter order and flipped at the end.
        let grad_features = match (pair, &cache.dpl) {
            (Some(pair), Some(dc)) => {
                let g_recon = if self.bypass_selu {
                    grad_out
                } else {
                    selu_backward(&dc.recon, &grad_out)?
                };
                let n = dc.x.cols();
                let weight = T::from_f64(self.config.gamma / n as f64);
                let g = pair.backward_weighted(
                    &dc.x,
                    &dc.fwd,
                    &flatten_maps(&g_recon)?,
                    weight,
                    self.config.stop_recon_grad_at_x,
                )?;
                grads.push(g.p);
                grads.push(g.d);
                let &[b, c, h, w] = cache.features.shape() else {
                    unreachable!()
                };
                unflatten_maps(&g.input, b, c, h, w)?
            }
            _ => grad_out,
        };
        let (pool_grads, grad_conv) = if self.config.pool_before_relu {
            let g_pooled = relu_backward(&cache.mid, &grad_features)?;
            let pg = pool.backward(&cache.conv, &g_pooled)?;
            let gc = pg.input.clone();
            (pg, gc)
        } else {
            let pg = pool.backward(&cache.mid, &grad_features)?;
            let gc = relu_backward(&cache.conv, &pg.input)?;
            (pg, gc)
        };
        grads.push(pool_grads.biases);
        grads.push(pool_grads.coefficients);
        let cg = conv.backward(&cache.input, &grad_conv)?;
        grads.push(cg.biases);
        grads.push(cg.kernels);
        Ok(need_input_grad.then_some(cg.input))
    }

    /// Analytic gradient of [`LossComponents::smooth_total`], one tensor per
    /// parameter in [`Model::parameters`] order.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: &Matrix<T>) -> Result<Vec<Tensor<T>>> {
        if targets.shape() != cache.logits.shape() {
            return Err(Error::shape(
                "backward",
                targets.shape(),
                cache.logits.shape(),
            ));
        }
        let (_, g_logits) = softmax_cross_entropy(&cache.logits, targets)?;
        let mut rev = Vec::new();
        let a9 = relu(&cache.f9);
        let go = self.out.backward(&a9, &g_logits)?;
        rev.push(go.biases);
        rev.push(go.weights);
        let g9 = relu_backward(&cache.f9, &go.input)?;
        let a8 = relu(&cache.f8);
        let gf9 = self.f9.backward(&a8, &g9)?;
        rev.push(gf9.biases);
        rev.push(gf9.weights);
        let g8 = relu_backward(&cache.f8, &gf9.input)?;
        let gf8 = self.f8.backward(&cache.flat, &g8)?;
        rev.push(gf8.biases);
        rev.push(gf8.weights);
        let g_stage2 = gf8.input.reshape(cache.stage2.out.shape())?;
        let g_stage1 = self
            .stage_backward(
                &cache.stage2,
                g_stage2,
                &self.c4,
                &self.p5,
                self.dpl6.as_ref(),
                &mut rev,
                true,
            )?
            .expect("requested input gradient");
        self.stage_backward(
            &cache.stage1,
            g_stage1,
            &self.c1,
            &self.p2,
            self.dpl3.as_ref(),
            &mut rev,
            false,
        )?;
        rev.reverse();
        Ok(rev)
    }

    /// Predicted class per sample, evaluated in chunks of `batch_size`.
    pub fn predict(&self, images: &Tensor<f32>, batch_size: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let per = images.len() / n;
        let mut preds = Vec::with_capacity(n);
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk =
                Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?.cast::<T>();
            let logits = self.logits(&chunk)?;
            let c = logits.cols();
            for row in logits.data().chunks(c) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                preds.push(best.0);
            }
        }
        Ok(preds)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let pair = |p: &Option<DictionaryPair<T>>| {
            p.as_ref().map(|p| DictionaryPair {
                d: p.d.cast(),
                p: p.p.cast(),
                beta: U::from_f64(p.beta.to_f64()),
                gamma: U::from_f64(p.gamma.to_f64()),
            })
        };
        let conv = |c: &ConvLayer<T>| {
            ConvLayer::from_parts(c.kernels.cast(), c.biases.cast(), c.connectivity().clone())
                .expect("same shapes")
        };
        let pool = |p: &AvgPoolLayer<T>| AvgPoolLayer {
            coefficients: p.coefficients.cast(),
            biases: p.biases.cast(),
        };
        let fc = |f: &FcLayer<T>| FcLayer {
            weights: f.weights.cast(),
            biases: f.biases.cast(),
        };
        Model {
            config: self.config.clone(),
            c1: conv(&self.c1),
            p2: pool(&self.p2),
            dpl3: pair(&self.dpl3),
            c4: conv(&self.c4),
            p5: pool(&self.p5),
            dpl6: pair(&self.dpl6),
            f8: fc(&self.f8),
            f9: fc(&self.f9),
            out: fc(&self.out),
            bypass_selu: self.bypass_selu,
        }
    }
}
