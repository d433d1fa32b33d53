use std::fmt::{Debug, Display};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point type the estimator can run in.
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative written in terms of the activation's output.
    fn slope_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Shape of the residual lifting network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub joints: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// Millimetres per unit of raw network output.
    pub output_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            joints: 17,
            hidden: 256,
            blocks: 2,
            activation: Activation::Relu,
            output_scale: 1000.0,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::config("architecture.joints", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("architecture.hidden", "must be at least 1"));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::config("architecture.output_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.joints
    }

    pub fn output_dim(&self) -> usize {
        3 * self.joints
    }

    /// `(fan_in, fan_out)` of every affine map in parameter order: the input
    /// layer, two maps per residual block, then the output layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim(), self.hidden)];
        for _ in 0..self.blocks {
            shapes.push((self.hidden, self.hidden));
            shapes.push((self.hidden, self.hidden));
        }
        shapes.push((self.hidden, self.output_dim()));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSpan {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

fn spans(arch: &Architecture) -> Vec<LayerSpan> {
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let span = LayerSpan {
                weights: offset,
                bias: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            offset = span.bias + fan_out;
            span
        })
        .collect()
}

/// Residual MLP mapping normalized 2D joints to root-relative 3D joints.
///
/// Parameters live in one flat vector: for each layer in [`Architecture::layer_shapes`]
/// order, the `fan_in x fan_out` weight matrix row-major followed by its bias.
/// A block computes `h + act(act(h W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel<T: Real> {
    arch: Architecture,
    params: Vec<T>,
    layers: Vec<LayerSpan>,
}

/// Intermediate activations of one forward pass.
pub struct ForwardCache<T: Real> {
    input: Array2<T>,
    /// `(h_prev, a, z)` for every block, then the last hidden state.
    acts: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }
}

impl<T: Real> EstimatorModel<T> {
    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = spans(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.parameter_count());
        for l in &layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for _ in 0..l.fan_in * l.fan_out + l.fan_out {
                params.push(T::of(rng.random_range(-bound..bound)));
            }
        }
        Ok(Self {
            arch,
            params,
            layers,
        })
    }

    pub fn from_parameters(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: arch.parameter_count(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self {
            layers: spans(&arch),
            arch,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Zeroes the output layer, making the network output identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = *self.layers.last().expect("at least one layer");
        self.params[last.weights..last.bias + last.fan_out].fill(T::zero());
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, T> {
        let s = self.layers[l];
        ArrayView2::from_shape((s.fan_in, s.fan_out), &self.params[s.weights..s.bias])
            .expect("layer span matches shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, T> {
        let s = self.layers[l];
        ArrayView1::from(&self.params[s.bias..s.bias + s.fan_out])
    }

    fn affine(&self, l: usize, x: &ArrayView2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weights(l));
        out += &self.bias(l);
        out
    }

    fn activate(&self, mut x: Array2<T>) -> Array2<T> {
        let act = self.arch.activation;
        x.mapv_inplace(|v| act.apply(v));
        x
    }

    /// Forward pass over a batch (`B x 2J` normalized inputs) keeping what the
    /// backward pass needs. Outputs are `B x 3J` millimetres.
    pub fn forward_cached(&self, input: ArrayView2<T>) -> Result<ForwardCache<T>> {
        if input.ncols() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "estimator input",
                expected: self.arch.input_dim(),
                actual: input.ncols(),
            });
        }
        let mut acts = Vec::with_capacity(1 + 3 * self.arch.blocks);
        let mut h = self.activate(self.affine(0, &input));
        for r in 0..self.arch.blocks {
            let a = self.activate(self.affine(1 + 2 * r, &h.view()));
            let z = self.activate(self.affine(2 + 2 * r, &a.view()));
            let next = &h + &z;
            acts.push(std::mem::replace(&mut h, next));
            acts.push(a);
            acts.push(z);
        }
        let mut output = self.affine(self.layers.len() - 1, &h.view());
        acts.push(h);
        let scale = T::of(self.arch.output_scale);
        output.mapv_inplace(|v| v * scale);
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimator activations"));
        }
        Ok(ForwardCache {
            input: input.to_owned(),
            acts,
            output,
        })
    }

    pub fn forward_batch(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(input)?.output)
    }

    /// Reverse-mode gradient of a loss with respect to every parameter, given
    /// the loss gradient `d_output` with respect to the millimetre outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: ArrayView2<T>) -> Vec<T> {
        let act = self.arch.activation;
        let mut grad = vec![T::zero(); self.params.len()];
        let blocks = self.arch.blocks;
        let last = self.layers.len() - 1;
        // acts holds (h_prev, a, z) for every block, then the final h.
        let h_final = &cache.acts[cache.acts.len() - 1];

        let mut dy = d_output.to_owned();
        let scale = T::of(self.arch.output_scale);
        dy.mapv_inplace(|v| v * scale);
        self.accumulate(&mut grad, last, &h_final.view(), &dy.view());
        let mut dh = dy.dot(&self.weights(last).t());

        for r in (0..blocks).rev() {
            let h_prev = &cache.acts[3 * r];
            let a = &cache.acts[3 * r + 1];
            let z = &cache.acts[3 * r + 2];
            let mut dz = dh.clone();
            ndarray::Zip::from(&mut dz)
                .and(z)
                .for_each(|d, &y| *d = *d * act.slope_from_output(y));
            self.accumulate(&mut grad, 2 + 2 * r, &a.view(), &dz.view());
            let mut da = dz.dot(&self.weights(2 + 2 * r).t());
            ndarray::Zip::from(&mut da)
                .and(a)
                .for_each(|d, &y| *d = *d * act.slope_from_output(y));
            self.accumulate(&mut grad, 1 + 2 * r, &h_prev.view(), &da.view());
            general_mat_mul(T::one(), &da, &self.weights(1 + 2 * r).t(), T::one(), &mut dh);
        }

        let h0 = &cache.acts[0];
        ndarray::Zip::from(&mut dh)
            .and(h0)
            .for_each(|d, &y| *d = *d * act.slope_from_output(y));
        self.accumulate(&mut grad, 0, &cache.input.view(), &dh.view());
        grad
    }

    /// Adds `xᵀ d` and the column sums of `d` into layer `l`'s slots of `grad`.
    fn accumulate(&self, grad: &mut [T], l: usize, x: &ArrayView2<T>, d: &ArrayView2<T>) {
        let s = self.layers[l];
        let (w, b) = grad[s.weights..s.bias + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
        let mut gw = ArrayViewMut2::from_shape((s.fan_in, s.fan_out), w).expect("layer shape");
        general_mat_mul(T::one(), &x.t(), d, T::one(), &mut gw);
        let mut gb = ArrayViewMut1::from(b);
        gb += &d.sum_axis(Axis(0));
    }
}

/// A combined batch: rows `0..generated_rows` come from the generated set and
/// the rest from the ground-truth sample. Row `i` contributes
/// `row_scale[i] * mean_k (pred_ik - target_ik)^2` to the objective.
pub struct LossBatch<T: Real> {
    pub inputs: Array2<T>,
    pub targets: Array2<T>,
    pub row_scale: Array1<T>,
    pub generated_rows: usize,
}

/// Objective value split into its generated-set and counterfactual parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub pose: f64,
    pub counterfactual: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.pose + self.counterfactual
    }
}

impl<T: Real> LossBatch<T> {
    /// `generated` rows averaged into `L_P`; ground-truth rows weighted by
    /// `weights` and averaged into `lambda * L_co`.
    pub fn new(
        generated: (ArrayView2<T>, ArrayView2<T>),
        gt: (ArrayView2<T>, ArrayView2<T>),
        weights: &[f64],
        lambda: f64,
    ) -> Self {
        let (ng, nt) = (generated.0.nrows(), gt.0.nrows());
        assert_eq!(weights.len(), nt, "one weight per ground-truth row");
        let inputs = ndarray::concatenate(Axis(0), &[generated.0, gt.0]).expect("same width");
        let targets = ndarray::concatenate(Axis(0), &[generated.1, gt.1]).expect("same width");
        let mut row_scale = Array1::zeros(ng + nt);
        for i in 0..ng {
            row_scale[i] = T::of(1.0 / ng as f64);
        }
        for (i, w) in weights.iter().enumerate() {
            row_scale[ng + i] = T::of(lambda * w / nt as f64);
        }
        Self {
            inputs,
            targets,
            row_scale,
            generated_rows: ng,
        }
    }
}

/// Objective parts for `pred` against a batch, accumulated in double precision.
pub fn batch_loss<T: Real>(pred: &ArrayView2<T>, batch: &LossBatch<T>) -> LossParts {
    let coords = batch.targets.ncols() as f64;
    let mut parts = LossParts {
        pose: 0.0,
        counterfactual: 0.0,
    };
    for (i, (p, t)) in pred.outer_iter().zip(batch.targets.outer_iter()).enumerate() {
        let sq: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let term = batch.row_scale[i].as_f64() * sq / coords;
        if i < batch.generated_rows {
            parts.pose += term;
        } else {
            parts.counterfactual += term;
        }
    }
    parts
}

impl<T: Real> EstimatorModel<T> {
    pub fn loss(&self, batch: &LossBatch<T>) -> Result<LossParts> {
        let out = self.forward_batch(batch.inputs.view())?;
        Ok(batch_loss(&out.view(), batch))
    }

    /// Objective value and its gradient; the row weights are constants.
    pub fn loss_and_gradient(&self, batch: &LossBatch<T>) -> Result<(LossParts, Vec<T>)> {
        let cache = self.forward_cached(batch.inputs.view())?;
        let parts = batch_loss(&cache.output.view(), batch);
        let coords = T::of(batch.targets.ncols() as f64);
        let two = T::of(2.0);
        let mut d = &cache.output - &batch.targets;
        for (mut row, &s) in d.outer_iter_mut().zip(batch.row_scale.iter()) {
            let f = two * s / coords;
            row.mapv_inplace(|v| v * f);
        }
        let grad = self.backward(&cache, d.view());
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok((parts, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(act: Activation) -> EstimatorModel<f64> {
        EstimatorModel::init(
            Architecture {
                joints: 2,
                hidden: 4,
                blocks: 1,
                activation: act,
                output_scale: 10.0,
            },
            5,
        )
        .unwrap()
    }

    /// Plain nested-loop affine map `x W + b` with row-major `W` of size `n_in x n_out`.
    fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let n_out = b.len();
        (0..n_out)
            .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + o]).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut m = tiny(Activation::Relu);
        m.zero_output_layer();
        let out = m.forward_batch(array![[0.3, -0.2, 0.9, 0.1], [5.0, 1.0, -3.0, 2.0]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_manual_oracle() {
        for act in [Activation::Relu, Activation::Tanh] {
            let m = tiny(act);
            let x = [0.3, -0.2, 0.9, 0.1];
            let p = m.parameters();
            let f = |v: Vec<f64>| -> Vec<f64> {
                v.into_iter()
                    .map(|z| match act {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    })
                    .collect()
            };
            // Layer offsets for J=2, hidden 4, one block: 4x4+4, 4x4+4, 4x4+4, 4x6+6.
            let h0 = f(affine(&x, &p[0..16], &p[16..20]));
            let a = f(affine(&h0, &p[20..36], &p[36..40]));
            let z = f(affine(&a, &p[40..56], &p[56..60]));
            let h1: Vec<f64> = h0.iter().zip(&z).map(|(u, v)| u + v).collect();
            let out: Vec<f64> = affine(&h1, &p[60..84], &p[84..90]).iter().map(|v| v * 10.0).collect();
            assert_eq!(p.len(), 90);

            let got = m.forward_batch(ndarray::Array2::from_shape_vec((1, 4), x.to_vec()).unwrap().view()).unwrap();
            for (g, e) in got.iter().zip(&out) {
                assert!((g - e).abs() < 1e-12);
            }
            let again = m.forward_batch(ndarray::Array2::from_shape_vec((1, 4), x.to_vec()).unwrap().view()).unwrap();
            assert_eq!(got, again);
        }
    }

    #[test]
    fn perfect_predictions_have_zero_gradient() {
        let m = tiny(Activation::Relu);
        let x = array![[0.3, -0.2, 0.9, 0.1], [0.5, 0.5, -0.5, 0.2]];
        let y = m.forward_batch(x.view()).unwrap();
        let batch = LossBatch::new((x.view(), y.view()), (x.view(), y.view()), &[1.0, 2.0], 1.0);
        let (parts, grad) = m.loss_and_gradient(&batch).unwrap();
        assert_eq!(parts.total(), 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_output_layer_gradient_is_closed_form() {
        // Without blocks the output layer is linear regression on the hidden
        // features h; for one sample with residual r over 3 coordinates,
        // dL/dW[i][o] = 2 h_i r_o / 3 and dL/db[o] = 2 r_o / 3.
        let m = EstimatorModel::<f64>::init(
            Architecture {
                joints: 1,
                hidden: 3,
                blocks: 0,
                activation: Activation::Tanh,
                output_scale: 1.0,
            },
            9,
        )
        .unwrap();
        let x = array![[0.4, -0.7]];
        let y = array![[1.0, -2.0, 0.5]];
        let empty_x = ndarray::Array2::<f64>::zeros((0, 2));
        let empty_y = ndarray::Array2::<f64>::zeros((0, 3));
        let batch = LossBatch::new((x.view(), y.view()), (empty_x.view(), empty_y.view()), &[], 1.0);
        let (_, grad) = m.loss_and_gradient(&batch).unwrap();

        let p = m.parameters();
        let h: Vec<f64> = affine(&[0.4, -0.7], &p[0..6], &p[6..9]).iter().map(|v| v.tanh()).collect();
        let pred = affine(&h, &p[9..18], &p[18..21]);
        let resid: Vec<f64> = pred.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
        for i in 0..3 {
            for o in 0..3 {
                let expect = 2.0 * h[i] * resid[o] / 3.0;
                assert!((grad[9 + i * 3 + o] - expect).abs() < 1e-12);
            }
        }
        for o in 0..3 {
            assert!((grad[18 + o] - 2.0 * resid[o] / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = tiny(Activation::Relu);
        assert!(m.forward_batch(array![[1.0, 2.0]].view()).is_err());
        assert!(EstimatorModel::<f64>::from_parameters(*m.architecture(), vec![0.0; 3]).is_err());
    }
}
