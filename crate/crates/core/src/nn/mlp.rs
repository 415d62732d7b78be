use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation output.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn second_deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    ScalarLogit,
    GaussianMean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub head: OutputHead,
}

impl MlpShape {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input);
        s.extend(&self.hidden);
        s.push(self.output);
        s
    }
}

/// Dense layer; `w` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Feedforward network: affine layers with a fixed hidden activation and a
/// linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub head: OutputHead,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(scale, &b.w);
            a.b.scaled_add(scale, &b.b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// State of the input-gradient pass used by the gradient penalty.
#[derive(Debug, Clone)]
pub struct InputGradCache {
    forward: ForwardCache,
    /// `q[l]`: d(logit)/d(acts[l]); `q[0]` is the input gradient.
    q: Vec<Array2<f64>>,
    /// `r[l]`: d(logit)/d(z_l) for hidden layer `l` (index 0 unused).
    r: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(shape: &MlpShape, rng: &mut Rng) -> Result<Self> {
        let sizes = shape.sizes();
        if sizes.contains(&0) {
            return Err(Error::Shape(format!("layer sizes must be positive: {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.gen_range(-bound..=bound)
                });
                Layer {
                    w: weights,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp {
            layers,
            activation: shape.activation,
            head: shape.head,
        })
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.w.nrows())
                .collect(),
            output: self.output_dim(),
            activation: self.activation,
            head: self.head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward pass over a batch (rows are samples).
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t());
            z += &layer.b;
            if l < last {
                self.activation.apply(&mut z);
                acts.push(z);
            } else {
                return Ok((z, ForwardCache { acts }));
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Backpropagates `upstream` (d loss / d output, one row per sample).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let batch = cache.acts[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        if cache.acts.len() != self.layers.len() {
            return Err(Error::Shape("cache does not match network depth".into()));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.acts[l];
            grads.layers[l].w = delta.t().dot(input).as_standard_layout().into_owned();
            grads.layers[l].b = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.layers[l].w);
            if l > 0 {
                let act = self.activation;
                Zip::from(&mut back)
                    .and(input)
                    .for_each(|g, &a| *g *= act.deriv_from_output(a));
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// Gradient of the scalar output with respect to each input row.
    pub fn input_gradients(&self, x: &Array2<f64>) -> Result<(Array2<f64>, InputGradCache)> {
        if self.output_dim() != 1 {
            return Err(Error::Shape("input gradients need a scalar-output network".into()));
        }
        let (_, forward) = self.forward(x)?;
        let n_layers = self.layers.len();
        let batch = x.nrows();
        let mut q: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n_layers];
        let mut r: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n_layers];
        let out_w = &self.layers[n_layers - 1].w;
        q[n_layers - 1] = Array2::from_shape_fn((batch, out_w.ncols()), |(_, j)| out_w[[0, j]]);
        for l in (1..n_layers).rev() {
            let mut rl = q[l].clone();
            let act = self.activation;
            Zip::from(&mut rl)
                .and(&forward.acts[l])
                .for_each(|v, &a| *v *= act.deriv_from_output(a));
            q[l - 1] = rl.dot(&self.layers[l - 1].w);
            r[l] = rl;
        }
        Ok((q[0].clone(), InputGradCache { forward, q, r }))
    }

    /// Parameter gradient of `sum_i f(g_i)` given `gbar = df/dg` for each row
    /// of the input gradients returned by [`Mlp::input_gradients`].
    pub fn input_gradients_backward(
        &self,
        cache: &InputGradCache,
        gbar: &Array2<f64>,
    ) -> Result<MlpGrads> {
        if gbar.dim() != cache.q[0].dim() {
            return Err(Error::Shape("input-gradient adjoint shape mismatch".into()));
        }
        let n_layers = self.layers.len();
        let act = self.activation;
        let acts = &cache.forward.acts;
        let mut grads = MlpGrads::zeros_like(self);
        // Adjoints of the pre-activations collected while reversing the
        // input-gradient pass.
        let mut zbar: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n_layers];
        let mut qbar = gbar.to_owned();
        for l in 1..n_layers {
            // q[l-1] = r[l] W_(l-1)
            let w = &self.layers[l - 1].w;
            grads.layers[l - 1].w += &cache.r[l].t().dot(&qbar);
            let rbar = qbar.dot(&w.t());
            // r[l] = q[l] * s'(z_l)
            let mut next_qbar = rbar.clone();
            Zip::from(&mut next_qbar)
                .and(&acts[l])
                .for_each(|v, &a| *v *= act.deriv_from_output(a));
            let mut zb = rbar;
            Zip::from(&mut zb)
                .and(&cache.q[l])
                .and(&acts[l])
                .for_each(|v, &q, &a| *v *= q * act.second_deriv_from_output(a));
            zbar[l] = zb;
            qbar = next_qbar;
        }
        // q[last] is the output weight row.
        let out = n_layers - 1;
        let col = qbar.sum_axis(Axis(0));
        for (j, v) in col.iter().enumerate() {
            grads.layers[out].w[[0, j]] += v;
        }
        // Reverse the forward pass; the logit itself does not enter the
        // penalty, so the only sources are the zbar terms above.
        let batch = acts[0].nrows();
        let mut abar: Array2<f64> = Array2::zeros((batch, acts[out].ncols()));
        for l in (1..n_layers).rev() {
            let mut zb = abar;
            Zip::from(&mut zb)
                .and(&acts[l])
                .for_each(|v, &a| *v *= act.deriv_from_output(a));
            zb += &zbar[l];
            let layer = l - 1;
            grads.layers[layer].w += &zb.t().dot(&acts[l - 1]);
            grads.layers[layer].b += &zb.sum_axis(Axis(0));
            abar = zb.dot(&self.layers[layer].w);
        }
        Ok(grads)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, network has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("layer{i}.weight"),
                        l.w.as_slice_mut().expect("standard layout"),
                    ),
                    (
                        format!("layer{i}.bias"),
                        l.b.as_slice_mut().expect("standard layout"),
                    ),
                ]
            })
            .collect()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_check, FdOptions};
    use crate::rng::seeded;
    use ndarray::array;

    fn shape(input: usize, hidden: &[usize], output: usize, act: Activation) -> MlpShape {
        MlpShape {
            input,
            hidden: hidden.to_vec(),
            output,
            activation: act,
            head: OutputHead::ScalarLogit,
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = Mlp::init(&shape(3, &[5, 5], 2, Activation::Tanh), &mut seeded(1)).unwrap();
        net.set_flat(&vec![0.0; net.num_params()]).unwrap();
        let y = net.predict(&array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_relu_net() {
        let mut net = Mlp::init(&shape(1, &[1], 1, Activation::Relu), &mut seeded(1)).unwrap();
        net.set_flat(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(net.predict(&array![[2.0]]).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = Mlp::init(&shape(4, &[8, 8], 1, Activation::Tanh), &mut seeded(2)).unwrap();
        let x = array![[0.1, 0.2, -0.3, 0.4]];
        let single = net.predict(&x).unwrap();
        let twice = net
            .predict(&array![[0.1, 0.2, -0.3, 0.4], [0.1, 0.2, -0.3, 0.4]])
            .unwrap();
        assert_eq!(twice[[0, 0]], single[[0, 0]]);
        assert_eq!(twice[[1, 0]], single[[0, 0]]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = Mlp::init(&shape(2, &[3], 1, Activation::Tanh), &mut seeded(2)).unwrap();
        assert!(matches!(
            net.forward(&array![[f64::NAN, 0.0]]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(net.forward(&array![[0.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn init_bounds_and_seeds() {
        let s = shape(256, &[4], 1, Activation::Relu);
        let a = Mlp::init(&s, &mut seeded(5)).unwrap();
        assert!(a.layers[0].w.iter().all(|w| w.abs() <= 0.0625));
        assert!(a.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
        assert_eq!(a, Mlp::init(&s, &mut seeded(5)).unwrap());
        assert_ne!(a, Mlp::init(&s, &mut seeded(6)).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = Mlp::init(&shape(3, &[4], 2, Activation::Tanh), &mut seeded(3)).unwrap();
        let (_, cache) = net.forward(&array![[1.0, 2.0, 3.0]]).unwrap();
        let (g, gx) = net.backward(&cache, &Array2::zeros((1, 2))).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(net.backward(&cache, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn linear_net_gradient() {
        // y = w x through a single affine layer.
        let mut net = Mlp::init(&shape(1, &[], 1, Activation::Relu), &mut seeded(3)).unwrap();
        net.set_flat(&[1.5, 0.0]).unwrap();
        let (_, cache) = net.forward(&array![[2.0]]).unwrap();
        let (g, gx) = net.backward(&cache, &array![[1.0]]).unwrap();
        assert_eq!(g.layers[0].w[[0, 0]], 2.0);
        assert_eq!(gx[[0, 0]], 1.5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut rng = seeded(11);
            let net = Mlp::init(&shape(6, &[16, 16], 1, act), &mut rng).unwrap();
            let x = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
            let loss = |n: &Mlp| n.predict(&x).unwrap().mapv(|v| v * v).sum() * 0.5;
            let (y, cache) = net.forward(&x).unwrap();
            let (g, _) = net.backward(&cache, &y).unwrap();
            let err = finite_diff_check(
                |p| {
                    let mut n = net.clone();
                    n.set_flat(p).unwrap();
                    loss(&n)
                },
                &net.to_flat(),
                &g.to_flat(),
                &FdOptions::default(),
            );
            assert!(err < 1e-4, "{act:?}: relative error {err}");
        }
    }

    #[test]
    fn input_gradients_match_backward() {
        let mut rng = seeded(12);
        let net = Mlp::init(&shape(3, &[7, 5], 1, Activation::Tanh), &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let (g, _) = net.input_gradients(&x).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let (_, gx) = net.backward(&cache, &Array2::ones((4, 1))).unwrap();
        for (a, b) in g.iter().zip(gx.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn double_backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut rng = seeded(13);
            let net = Mlp::init(&shape(3, &[9, 6], 1, act), &mut rng).unwrap();
            let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            // f(g) = 0.5 * |g|^2 summed over rows
            let value = |n: &Mlp| n.input_gradients(&x).unwrap().0.mapv(|v| v * v).sum() * 0.5;
            let (g, cache) = net.input_gradients(&x).unwrap();
            let grads = net.input_gradients_backward(&cache, &g).unwrap();
            let err = finite_diff_check(
                |p| {
                    let mut n = net.clone();
                    n.set_flat(p).unwrap();
                    value(&n)
                },
                &net.to_flat(),
                &grads.to_flat(),
                &FdOptions::default(),
            );
            assert!(err < 1e-4, "{act:?}: relative error {err}");
        }
    }
}
