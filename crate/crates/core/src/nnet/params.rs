use std::fmt;

use rand::Rng;

/// Weights (plus optional bias) of one named layer and their gradients.
///
/// Weight layouts: `[cin, cout]` for 1×1 convolutions, `[k, k, cin, cout]`
/// for spatial convolutions, `[n, out]` for dense layers; the last
/// dimension varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    name: String,
    shape: Vec<usize>,
    weights: Vec<f64>,
    weight_grad: Vec<f64>,
    bias: Option<Vec<f64>>,
    bias_grad: Vec<f64>,
    frozen: bool,
}

impl LayerParams {
    pub fn zeros(name: impl Into<String>, shape: &[usize], bias: Option<usize>) -> Self {
        let n: usize = shape.iter().product();
        let b = bias.unwrap_or(0);
        LayerParams {
            name: name.into(),
            shape: shape.to_vec(),
            weights: vec![0.0; n],
            weight_grad: vec![0.0; n],
            bias: bias.map(|b| vec![0.0; b]),
            bias_grad: vec![0.0; b],
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn weight_grad(&self) -> &[f64] {
        &self.weight_grad
    }

    pub fn bias_grad(&self) -> &[f64] {
        &self.bias_grad
    }

    pub(crate) fn grads_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight_grad, &mut self.bias_grad)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Flat view index `i`: weights first, then bias.
    pub fn param(&self, i: usize) -> f64 {
        match i.checked_sub(self.weights.len()) {
            None => self.weights[i],
            Some(j) => self.bias.as_ref().expect("index past weights")[j],
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        match i.checked_sub(self.weights.len()) {
            None => &mut self.weights[i],
            Some(j) => &mut self.bias.as_mut().expect("index past weights")[j],
        }
    }

    pub fn grad(&self, i: usize) -> f64 {
        match i.checked_sub(self.weights.len()) {
            None => self.weight_grad[i],
            Some(j) => self.bias_grad[j],
        }
    }

    /// Flattened parameters (weights then bias).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.bias.iter().flatten()).copied()
    }

    /// Fan-in and fan-out used by the uniform initializer.
    pub fn fans(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
            [a, b] => (*a, *b),
            other => {
                let n: usize = other.iter().product();
                (n, n)
            }
        }
    }

    /// Redraws weights uniformly in `±sqrt(6 / (fan_in + fan_out))` and
    /// zeroes the bias and gradients.
    pub fn initialize(&mut self, rng: &mut impl Rng) {
        let (fan_in, fan_out) = self.fans();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut self.weights {
            *w = rng.random_range(-bound..=bound);
        }
        if let Some(b) = &mut self.bias {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        self.zero_grad();
    }

    pub fn init_bound(&self) -> f64 {
        let (fan_in, fan_out) = self.fans();
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias_grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Copies parameter values (not gradients or the freeze flag).
    pub fn copy_values_from(&mut self, other: &LayerParams) {
        assert_eq!(self.shape, other.shape, "layer shape mismatch");
        self.weights.copy_from_slice(&other.weights);
        if let (Some(dst), Some(src)) = (&mut self.bias, &other.bias) {
            dst.copy_from_slice(src);
        }
    }
}

impl fmt::Display for LayerParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(ToString::to_string).collect();
        write!(f, "{} [{}]", self.name, dims.join("x"))?;
        if let Some(b) = &self.bias {
            write!(f, " + bias {}", b.len())?;
        }
        Ok(())
    }
}
