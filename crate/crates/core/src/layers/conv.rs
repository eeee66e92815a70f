use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_slices, Scalar, Tensor};

/// Which input maps each output map of a convolution reads from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connectivity {
    out_maps: usize,
    in_maps: usize,
    table: Vec<bool>,
}

impl Connectivity {
    pub fn full(out_maps: usize, in_maps: usize) -> Self {
        Self {
            out_maps,
            in_maps,
            table: vec![true; out_maps * in_maps],
        }
    }

    /// Builds a table from per-output lists of connected input maps.
    pub fn from_lists(in_maps: usize, lists: &[&[usize]]) -> Result<Self> {
        let mut table = vec![false; lists.len() * in_maps];
        for (o, inputs) in lists.iter().enumerate() {
            for &i in inputs.iter() {
                if i >= in_maps {
                    return Err(Error::InvalidArgument(format!(
                        "output map {o} connects to input {i}, but only {in_maps} inputs exist"
                    )));
                }
                table[o * in_maps + i] = true;
            }
        }
        Ok(Self {
            out_maps: lists.len(),
            in_maps,
            table,
        })
    }

    /// The classic LeNet-5 C3 table (16 outputs over 6 inputs).
    pub fn lenet5() -> Self {
        const TABLE: [&[usize]; 16] = [
            &[0, 1, 2],
            &[1, 2, 3],
            &[2, 3, 4],
            &[3, 4, 5],
            &[4, 5, 0],
            &[5, 0, 1],
            &[0, 1, 2, 3],
            &[1, 2, 3, 4],
            &[2, 3, 4, 5],
            &[3, 4, 5, 0],
            &[4, 5, 0, 1],
            &[5, 0, 1, 2],
            &[0, 1, 3, 4],
            &[1, 2, 4, 5],
            &[0, 2, 3, 5],
            &[0, 1, 2, 3, 4, 5],
        ];
        Self::from_lists(6, &TABLE).expect("static table is valid")
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn is_connected(&self, out_map: usize, in_map: usize) -> bool {
        self.table[out_map * self.in_maps + in_map]
    }

    pub fn connected_inputs(&self, out_map: usize) -> usize {
        (0..self.in_maps)
            .filter(|&i| self.is_connected(out_map, i))
            .count()
    }

    pub fn is_full(&self) -> bool {
        self.table.iter().all(|&c| c)
    }
}

/// Valid (unpadded), stride-1 cross-correlation with square kernels.
///
/// Kernels are stored densely as `[out, in, k, k]`; slices for unconnected
/// `(out, in)` pairs are held at zero and never receive gradient.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar = f32> {
    pub kernels: Tensor<T>,
    pub biases: Tensor<T>,
    connectivity: Connectivity,
    kernel_size: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub biases: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(connectivity: Connectivity, kernel_size: usize, rng: &mut impl Rng) -> Self {
        let (out, inp, k) = (connectivity.out_maps, connectivity.in_maps, kernel_size);
        let kernels = super::glorot(&[out, inp, k, k], inp * k * k, out * k * k, rng);
        let mut layer = Self {
            kernels,
            biases: Tensor::zeros(&[out]),
            connectivity,
            kernel_size,
        };
        layer.apply_mask();
        layer
    }

    /// Builds a layer from explicit parameters. The kernels of unconnected
    /// pairs are zeroed.
    pub fn from_parts(
        kernels: Tensor<T>,
        biases: Tensor<T>,
        connectivity: Connectivity,
    ) -> Result<Self> {
        let shape = kernels.shape().to_vec();
        let ok = shape.len() == 4
            && shape[0] == connectivity.out_maps
            && shape[1] == connectivity.in_maps
            && shape[2] == shape[3]
            && biases.shape() == [shape[0]];
        if !ok {
            return Err(Error::shape(
                "ConvLayer::from_parts",
                &shape,
                biases.shape(),
            ));
        }
        let mut layer = Self {
            kernels,
            biases,
            connectivity,
            kernel_size: shape[2],
        };
        layer.apply_mask();
        Ok(layer)
    }

    pub fn connectivity(&self) -> &Connectivity {
        &self.connectivity
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn out_maps(&self) -> usize {
        self.connectivity.out_maps
    }

    pub fn in_maps(&self) -> usize {
        self.connectivity.in_maps
    }

    /// Trainable parameters: one `k x k` kernel per connected pair plus one bias per output map.
    pub fn parameter_count(&self) -> usize {
        let kk = self.kernel_size * self.kernel_size;
        (0..self.out_maps())
            .map(|o| kk * self.connectivity.connected_inputs(o) + 1)
            .sum()
    }

    /// Zeroes kernel slices of unconnected pairs (applied to weights and gradients alike).
    pub(crate) fn mask(&self, kernels: &mut Tensor<T>) {
        let kk = self.kernel_size * self.kernel_size;
        let inp = self.in_maps();
        for o in 0..self.out_maps() {
            for i in 0..inp {
                if !self.connectivity.is_connected(o, i) {
                    let start = (o * inp + i) * kk;
                    kernels.data_mut()[start..start + kk].fill(T::zero());
                }
            }
        }
    }

    /// Kernels with unconnected pairs forced to zero, whatever `kernels` holds.
    fn effective_kernels(&self) -> std::borrow::Cow<'_, Tensor<T>> {
        if self.connectivity.is_full() {
            std::borrow::Cow::Borrowed(&self.kernels)
        } else {
            let mut k = self.kernels.clone();
            self.mask(&mut k);
            std::borrow::Cow::Owned(k)
        }
    }

    fn apply_mask(&mut self) {
        let mut k = std::mem::replace(&mut self.kernels, Tensor::zeros(&[1]));
        self.mask(&mut k);
        self.kernels = k;
    }

    fn output_dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::shape(
                "conv_forward",
                x.shape(),
                self.kernels.shape(),
            ));
        };
        if c != self.in_maps() || h < self.kernel_size || w < self.kernel_size {
            return Err(Error::shape(
                "conv_forward",
                x.shape(),
                self.kernels.shape(),
            ));
        }
        Ok((b, c, h, w))
    }

    /// Unrolls one sample `[c, h, w]` into `[c*k*k, oh*ow]` patch columns.
    fn im2col(&self, sample: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
        let k = self.kernel_size;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let plane = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let src = ci * h * w + (oy + ky) * w + kx;
                        dst[oy * ow..(oy + 1) * ow].copy_from_slice(&sample[src..src + ow]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], c: usize, h: usize, w: usize, sample: &mut [T]) {
        let k = self.kernel_size;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let plane = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let dst = ci * h * w + (oy + ky) * w + kx;
                        for (d, &s) in sample[dst..dst + ow]
                            .iter_mut()
                            .zip(&src[oy * ow..(oy + 1) * ow])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.output_dims(x)?;
        let k = self.kernel_size;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let out_maps = self.out_maps();
        let patch = c * k * k;
        let plane = oh * ow;
        let kernels = self.effective_kernels();
        let mut cols = vec![T::zero(); patch * plane];
        let mut out = Tensor::zeros(&[b, out_maps, oh, ow]);
        let in_stride = c * h * w;
        let out_stride = out_maps * plane;
        for s in 0..b {
            self.im2col(
                &x.data()[s * in_stride..(s + 1) * in_stride],
                c,
                h,
                w,
                &mut cols,
            );
            let dst = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(self.biases.data()[o]);
            }
            gemm_slices(
                out_maps,
                patch,
                plane,
                T::one(),
                kernels.data(),
                false,
                &cols,
                false,
                T::one(),
                dst,
            );
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let (b, c, h, w) = self.output_dims(x)?;
        let k = self.kernel_size;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let out_maps = self.out_maps();
        if grad_out.shape() != [b, out_maps, oh, ow] {
            return Err(Error::shape(
                "conv_backward",
                grad_out.shape(),
                &[b, out_maps, oh, ow],
            ));
        }
        let patch = c * k * k;
        let plane = oh * ow;
        let in_stride = c * h * w;
        let out_stride = out_maps * plane;
        let kernels = self.effective_kernels();
        let mut cols = vec![T::zero(); patch * plane];
        let mut grad_cols = vec![T::zero(); patch * plane];
        let mut grad_x = Tensor::zeros(x.shape());
        let mut grad_k = Tensor::zeros(self.kernels.shape());
        let mut grad_b = Tensor::zeros(&[out_maps]);
        for s in 0..b {
            let g = &grad_out.data()[s * out_stride..(s + 1) * out_stride];
            for (o, chunk) in g.chunks(plane).enumerate() {
                grad_b.data_mut()[o] += chunk.iter().copied().sum();
            }
            self.im2col(
                &x.data()[s * in_stride..(s + 1) * in_stride],
                c,
                h,
                w,
                &mut cols,
            );
            // dK += G * cols^T
            gemm_slices(
                out_maps,
                plane,
                patch,
                T::one(),
                g,
                false,
                &cols,
                true,
                T::one(),
                grad_k.data_mut(),
            );
            // dcols = K^T * G
            gemm_slices(
                patch,
                out_maps,
                plane,
                T::one(),
                kernels.data(),
                true,
                g,
                false,
                T::zero(),
                &mut grad_cols,
            );
            self.col2im(
                &grad_cols,
                c,
                h,
                w,
                &mut grad_x.data_mut()[s * in_stride..(s + 1) * in_stride],
            );
        }
        self.mask(&mut grad_k);
        Ok(ConvGrads {
            input: grad_x,
            kernels: grad_k,
            biases: grad_b,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution, independent of the im2col path.
    fn direct(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [b, c, h, w] = x.shape().try_into().unwrap();
        let k = layer.kernel_size();
        let (oh, ow) = (h - k + 1, w - k + 1);
        let o_maps = layer.out_maps();
        let mut out = Tensor::zeros(&[b, o_maps, oh, ow]);
        for s in 0..b {
            for o in 0..o_maps {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = layer.biases.data()[o];
                        for i in 0..c {
                            if !layer.connectivity().is_connected(o, i) {
                                continue;
                            }
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += layer.kernels.get(&[o, i, ky, kx]).unwrap()
                                        * x.get(&[s, i, y + ky, xx + kx]).unwrap();
                                }
                            }
                        }
                        out.set(&[s, o, y, xx], acc).unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn table_one_parameter_counts() {
        let mut r = rng();
        let c1 = ConvLayer::<f32>::new(Connectivity::full(6, 1), 5, &mut r);
        let c4 = ConvLayer::<f32>::new(Connectivity::lenet5(), 5, &mut r);
        assert_eq!(c1.parameter_count(), 156);
        assert_eq!(c4.parameter_count(), 1516);
        let c4_full = ConvLayer::<f32>::new(Connectivity::full(16, 6), 5, &mut r);
        assert_eq!(c4_full.parameter_count(), 16 * (150 + 1));
    }

    #[test]
    fn c1_output_shape() {
        let c1 = ConvLayer::<f32>::new(Connectivity::full(6, 1), 5, &mut rng());
        let out = c1.forward(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[1, 6, 28, 28]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut c1 = ConvLayer::<f32>::new(Connectivity::full(6, 1), 5, &mut rng());
        c1.biases = Tensor::from_fn(&[6], |i| i as f32 - 2.5);
        let out = c1.forward(&Tensor::zeros(&[2, 1, 9, 9])).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let map = (i / 25) % 6;
            assert_eq!(*v, map as f32 - 2.5);
        }
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        let layer = ConvLayer::from_parts(
            Tensor::<f64>::full(&[1, 1, 5, 5], 1.0),
            Tensor::zeros(&[1]),
            Connectivity::full(1, 1),
        )
        .unwrap();
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f64) * 0.5 - 3.0);
        let expected: f64 = x.data().iter().sum();
        let out = layer.forward(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert!((out.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn too_small_input_is_shape_error() {
        let c1 = ConvLayer::<f32>::new(Connectivity::full(6, 1), 5, &mut rng());
        assert!(matches!(
            c1.forward(&Tensor::zeros(&[1, 1, 4, 8])),
            Err(Error::Shape { .. })
        ));
        assert!(c1.forward(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
    }

    #[test]
    fn matches_direct_loops_with_partial_connectivity() {
        let mut r = rng();
        let mut layer = ConvLayer::<f64>::new(Connectivity::lenet5(), 5, &mut r);
        layer.biases = random(&[16], &mut r);
        let x = random(&[2, 6, 9, 8], &mut r);
        let fast = layer.forward(&x).unwrap();
        let slow = direct(&layer, &x);
        assert!(relative_error(fast.data(), slow.data()) < 1e-12);
    }

    #[test]
    fn full_table_equals_unconstrained_convolution() {
        let mut r = rng();
        let kernels = random(&[3, 2, 3, 3], &mut r);
        let biases = random(&[3], &mut r);
        let a = ConvLayer::from_parts(kernels.clone(), biases.clone(), Connectivity::full(3, 2))
            .unwrap();
        let x = random(&[1, 2, 6, 6], &mut r);
        let out = a.forward(&x).unwrap();
        // every kernel weight survives the mask
        assert_eq!(a.kernels, kernels);
        assert!(relative_error(out.data(), direct(&a, &x).data()) < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let layer = ConvLayer::<f64>::new(Connectivity::lenet5(), 5, &mut r);
        let x = random(&[2, 6, 7, 7], &mut r);
        let g = layer.backward(&x, &Tensor::zeros(&[2, 16, 3, 3])).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.kernels.max_abs(), 0.0);
        assert_eq!(g.biases.max_abs(), 0.0);
    }

    #[test]
    fn bias_gradient_is_sum_of_upstream() {
        let mut r = rng();
        let layer = ConvLayer::<f64>::new(Connectivity::full(2, 1), 3, &mut r);
        let x = random(&[3, 1, 5, 5], &mut r);
        let gout = random(&[3, 2, 3, 3], &mut r);
        let g = layer.backward(&x, &gout).unwrap();
        for o in 0..2 {
            let mut sum = 0.0;
            for s in 0..3 {
                for p in 0..9 {
                    sum += gout.data()[(s * 2 + o) * 9 + p];
                }
            }
            assert!((g.biases.data()[o] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn unconnected_slices_get_no_gradient() {
        let mut r = rng();
        let layer = ConvLayer::<f64>::new(Connectivity::lenet5(), 5, &mut r);
        let x = random(&[1, 6, 6, 6], &mut r);
        let g = layer.backward(&x, &random(&[1, 16, 2, 2], &mut r)).unwrap();
        for o in 0..16 {
            for i in 0..6 {
                let slice: Vec<f64> = (0..25)
                    .map(|t| g.kernels.data()[(o * 6 + i) * 25 + t])
                    .collect();
                let connected = layer.connectivity().is_connected(o, i);
                assert_eq!(slice.iter().all(|v| *v == 0.0), !connected, "({o},{i})");
            }
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let mut r = rng();
        let mut layer = ConvLayer::<f64>::new(Connectivity::full(2, 1), 5, &mut r);
        layer.biases = random(&[2], &mut r);
        let x = random(&[1, 1, 8, 8], &mut r);
        let probe = random(&[1, 2, 4, 4], &mut r);
        let loss = |l: &ConvLayer<f64>, x: &Tensor<f64>| -> f64 {
            l.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = layer.backward(&x, &probe).unwrap();

        let num_x = numerical_gradient(&x, 1e-5, |xp| loss(&layer, xp));
        assert!(relative_error(g.input.data(), num_x.data()) < 1e-4);

        let num_k = numerical_gradient(&layer.kernels, 1e-5, |kp| {
            let mut l = layer.clone();
            l.kernels = kp.clone();
            loss(&l, &x)
        });
        assert!(relative_error(g.kernels.data(), num_k.data()) < 1e-4);

        let num_b = numerical_gradient(&layer.biases, 1e-5, |bp| {
            let mut l = layer.clone();
            l.biases = bp.clone();
            loss(&l, &x)
        });
        assert!(relative_error(g.biases.data(), num_b.data()) < 1e-4);
    }
}
