//! Fully connected networks with cached forward passes and hand-derived
//! backward passes.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TnetError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Identity => pre.clone(),
            Activation::Softmax => {
                let mut out = pre.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
        }
    }

    /// Maps a gradient with respect to the activation output back to the
    /// pre-activation, given both.
    fn backprop(self, pre: &Matrix, post: &Matrix, grad_post: &Matrix) -> Matrix {
        match self {
            Activation::Identity => grad_post.clone(),
            Activation::Relu => {
                let mut g = grad_post.clone();
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            Activation::Sigmoid => {
                let mut g = grad_post.clone();
                for (gv, &s) in g.data_mut().iter_mut().zip(post.data()) {
                    *gv *= s * (1.0 - s);
                }
                g
            }
            Activation::Softmax => {
                let mut g = grad_post.clone();
                for r in 0..g.rows() {
                    let s = post.row(r);
                    let dot: f64 = g.row(r).iter().zip(s).map(|(a, b)| a * b).sum();
                    for (gv, &sv) in g.row_mut(r).iter_mut().zip(s) {
                        *gv = sv * (*gv - dot);
                    }
                }
                g
            }
        }
    }
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

/// One affine layer; `weight` is `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform `±1/sqrt(inputs)` initialization for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(inputs, outputs, |_, _| rng.random_range(-bound..bound));
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    /// Applied after every layer except the last.
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Inverted dropout on hidden activations, training only.
    pub dropout_rate: f64,
}

/// Per-layer gradients, shaped like [`MlpParams::layers`].
pub type MlpGrads = Vec<Dense>;

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    /// Post-activation output of the last layer.
    pub output: Matrix,
}

impl MlpCache {
    /// Pre-activation output of the last layer.
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("non-empty network")
    }
}

impl MlpParams {
    /// Builds `widths.len() - 1` layers chaining `widths[0] -> ... -> widths[last]`.
    pub fn init(
        widths: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        dropout_rate: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(TnetError::config("widths", "an MLP needs at least one layer"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(TnetError::config("dropout_rate", "must lie in [0, 1)"));
        }
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
            dropout_rate,
        })
    }

    pub fn from_layers(
        layers: Vec<Dense>,
        hidden_activation: Activation,
        output_activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(TnetError::config("layers", "an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(TnetError::dim(
                    "MlpParams::from_layers",
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.outputs() {
                return Err(TnetError::dim("MlpParams bias", layer.outputs(), layer.bias.len()));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
            dropout_rate,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        self.layers
            .iter()
            .map(|l| Dense::zeros(l.inputs(), l.outputs()))
            .collect()
    }

    /// Forward pass. Dropout masks are drawn from `dropout` when it is given
    /// (training mode); `None` evaluates deterministically.
    pub fn forward(&self, input: &Matrix, dropout: Option<&mut dyn RngCore>) -> Result<MlpCache> {
        if input.cols() != self.input_width() {
            return Err(TnetError::dim("mlp_forward input", self.input_width(), input.cols()));
        }
        let mut rng = dropout;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            inputs.push(current);
            if l == last {
                let output = self.output_activation.apply(&z);
                pre.push(z);
                masks.push(None);
                return Ok(MlpCache {
                    inputs,
                    pre,
                    masks,
                    output,
                });
            }
            let mut a = self.hidden_activation.apply(&z);
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout_rate > 0.0 => {
                    let keep = 1.0 - self.dropout_rate;
                    let mask: Vec<f64> = (0..a.data().len())
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (v, m) in a.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            current = a;
        }
        unreachable!("loop returns at the last layer")
    }

    /// Convenience wrapper returning only the output.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward(input, None)?.output)
    }

    /// Backward pass from a gradient on the post-activation output.
    /// Gradients are accumulated into `grads`; the input gradient is returned.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Matrix, grads: &mut MlpGrads) -> Result<Matrix> {
        let grad_logits = self
            .output_activation
            .backprop(cache.logits(), &cache.output, grad_output);
        self.backward_from_logits(cache, &grad_logits, grads)
    }

    /// Backward pass from a gradient on the last layer's pre-activation.
    pub fn backward_from_logits(&self, cache: &MlpCache, grad_logits: &Matrix, grads: &mut MlpGrads) -> Result<Matrix> {
        if grad_logits.shape() != cache.logits().shape() {
            return Err(TnetError::dim(
                "mlp backward",
                format!("{:?}", cache.logits().shape()),
                format!("{:?}", grad_logits.shape()),
            ));
        }
        let mut delta = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            grads[l].weight.add_t_matmul(&cache.inputs[l], &delta)?;
            for (gb, d) in grads[l].bias.iter_mut().zip(delta.col_sums()) {
                *gb += d;
            }
            let mut upstream = delta.matmul_t(&layer.weight)?;
            if l == 0 {
                return Ok(upstream);
            }
            // Undo dropout and the hidden activation of layer l - 1.
            if let Some(mask) = &cache.masks[l - 1] {
                for (v, m) in upstream.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            let pre = &cache.pre[l - 1];
            delta = match self.hidden_activation {
                Activation::Relu => {
                    for (v, &p) in upstream.data_mut().iter_mut().zip(pre.data()) {
                        if p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    upstream
                }
                act => {
                    let post = act.apply(pre);
                    act.backprop(pre, &post, &upstream)
                }
            };
        }
        unreachable!("loop returns at the first layer")
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

pub fn grad_tensors(grads: &MlpGrads) -> Vec<&[f64]> {
    grads
        .iter()
        .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn single(weight: Matrix, bias: Vec<f64>, out: Activation) -> MlpParams {
        MlpParams::from_layers(vec![Dense { weight, bias }], Activation::Relu, out, 0.0).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(Matrix::identity(3), vec![0.0; 3], Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_sigmoid_layer_is_one_half() {
        let net = single(Matrix::zeros(2, 4), vec![0.0; 4], Activation::Sigmoid);
        let x = Matrix::from_rows(&[vec![3.0, -7.0], vec![100.0, 0.1]]).unwrap();
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_layer_relu_matches_hand_evaluation() {
        // x (3x2), W1 (2x2), b1, relu, W2 (2x1), b2.
        let w1 = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let net = MlpParams::from_layers(
            vec![
                Dense {
                    weight: w1,
                    bias: vec![0.0, 1.0],
                },
                Dense {
                    weight: w2,
                    bias: vec![0.5],
                },
            ],
            Activation::Relu,
            Activation::Identity,
            0.0,
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 2.0], vec![2.0, -3.0]]).unwrap();
        // Row 0: h = relu([3, 0.5]) -> 3 - 1 + 0.5 = 2.5
        // Row 1: h = relu([3, 3]) -> 3 - 6 + 0.5 = -2.5
        // Row 2: h = relu([-4, -2.5]) -> 0 + 0.5 = 0.5
        let y = net.predict(&x).unwrap();
        assert_eq!(y.data(), &[2.5, -2.5, 0.5]);
    }

    #[test]
    fn dimension_errors() {
        let net = single(Matrix::identity(3), vec![0.0; 3], Activation::Identity);
        assert!(matches!(
            net.predict(&Matrix::zeros(1, 2)),
            Err(TnetError::Dimension { .. })
        ));
        let bad = MlpParams::from_layers(
            vec![Dense::zeros(2, 3), Dense::zeros(4, 1)],
            Activation::Relu,
            Activation::Identity,
            0.0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        // With x = 1 and identity output, sum(outputs) = sum of all parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpParams::init(&[4, 3], Activation::Relu, Activation::Identity, 0.0, &mut rng).unwrap();
        let x = Matrix::filled(1, 4, 1.0);
        let cache = net.forward(&x, None).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&cache, &Matrix::filled(1, 3, 1.0), &mut grads).unwrap();
        for t in grad_tensors(&grads) {
            assert!(t.iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn squared_error_gradient_is_outer_product() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.5, 1.5]]).unwrap();
        let net = single(w.clone(), vec![0.0, 0.0], Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let y = [0.3, -0.7];
        let cache = net.forward(&x, None).unwrap();
        let resid: Vec<f64> = cache.output.data().iter().zip(&y).map(|(a, b)| a - b).collect();
        let mut grads = net.zero_grads();
        net.backward(&cache, &Matrix::new(1, 2, resid.clone()).unwrap(), &mut grads)
            .unwrap();
        // Weight layout is inputs x outputs, so the gradient is x (Wx - y)ᵀ.
        for i in 0..3 {
            for j in 0..2 {
                let expected = x.get(0, i) * resid[j];
                assert!((grads[0].weight.get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    fn scalar_loss(net: &MlpParams, x: &Matrix, target: &Matrix) -> f64 {
        let y = net.predict(x).unwrap();
        y.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| 0.5 * (a - b).powi(2))
            .sum()
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for out in [Activation::Identity, Activation::Sigmoid, Activation::Softmax] {
            let net = MlpParams::init(&[3, 5, 4, 3], Activation::Relu, out, 0.0, &mut rng).unwrap();
            let x = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.5..1.5));
            let target = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let cache = net.forward(&x, None).unwrap();
            let grad_out = Matrix::new(
                6,
                3,
                cache
                    .output
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| a - b)
                    .collect(),
            )
            .unwrap();
            let mut grads = net.zero_grads();
            let grad_x = net.backward(&cache, &grad_out, &mut grads).unwrap();
            let analytic: Vec<f64> = grad_tensors(&grads).concat();

            let h = 1e-5;
            let mut idx = 0;
            let mut probe = net.clone();
            for t in 0..probe.tensors().len() {
                for k in 0..probe.tensors()[t].len() {
                    let orig = probe.tensors()[t][k];
                    probe.tensors_mut()[t][k] = orig + h;
                    let up = scalar_loss(&probe, &x, &target);
                    probe.tensors_mut()[t][k] = orig - h;
                    let down = scalar_loss(&probe, &x, &target);
                    probe.tensors_mut()[t][k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[idx];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "{out:?} param {idx}: analytic {a} vs fd {fd}");
                    idx += 1;
                }
            }
            for k in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[k] += h;
                let up = scalar_loss(&net, &xp, &target);
                xp.data_mut()[k] -= 2.0 * h;
                let down = scalar_loss(&net, &xp, &target);
                let fd = (up - down) / (2.0 * h);
                assert!((grad_x.data()[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn dropout_only_in_training_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(&[4, 16, 16, 2], Activation::Relu, Activation::Identity, 0.5, &mut rng).unwrap();
        let x = Matrix::from_fn(8, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let eval_a = net.predict(&x).unwrap();
        let eval_b = net.predict(&x).unwrap();
        assert_eq!(eval_a, eval_b);

        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let t1 = net.forward(&x, Some(&mut r1)).unwrap().output;
        let t2 = net.forward(&x, Some(&mut r2)).unwrap().output;
        assert_eq!(t1, t2);
        assert_ne!(t1, eval_a);
    }

    #[test]
    fn dropout_gradients_match_finite_differences_with_fixed_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpParams::init(&[3, 6, 6, 1], Activation::Relu, Activation::Identity, 0.3, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let loss = |n: &MlpParams| -> f64 {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            n.forward(&x, Some(&mut r))
                .unwrap()
                .output
                .data()
                .iter()
                .map(|v| v * v)
                .sum()
        };
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let cache = net.forward(&x, Some(&mut r)).unwrap();
        let grad_out = cache.output.map(|v| 2.0 * v);
        let mut grads = net.zero_grads();
        net.backward(&cache, &grad_out, &mut grads).unwrap();
        let analytic = grad_tensors(&grads).concat();
        let mut probe = net.clone();
        let mut idx = 0;
        for t in 0..probe.tensors().len() {
            for k in 0..probe.tensors()[t].len() {
                let orig = probe.tensors()[t][k];
                probe.tensors_mut()[t][k] = orig + 1e-5;
                let up = loss(&probe);
                probe.tensors_mut()[t][k] = orig - 1e-5;
                let down = loss(&probe);
                probe.tensors_mut()[t][k] = orig;
                let fd = (up - down) / 2e-5;
                let a = analytic[idx];
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "{a} vs {fd}");
                idx += 1;
            }
        }
    }
}
