use super::params::LayerParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Adaptive-moment optimizer over a fixed, ordered list of layers.
///
/// Moments are allocated the first time a layer is updated and only for
/// layers that are not frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: Vec::new(),
        }
    }

    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Adam::new(AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of layers currently holding moment estimates.
    pub fn tracked_layers(&self) -> usize {
        self.moments.iter().flatten().count()
    }

    pub fn layer_steps(&self, layer: usize) -> u64 {
        self.moments.get(layer).and_then(Option::as_ref).map_or(0, |m| m.steps)
    }

    /// Forgets the moments of one layer (after it is reinitialized).
    pub fn reset_layer(&mut self, layer: usize) {
        if let Some(slot) = self.moments.get_mut(layer) {
            *slot = None;
        }
    }

    /// Applies one update to every unfrozen layer, then clears all gradients.
    pub fn step(&mut self, layers: &mut [LayerParams]) {
        if self.moments.len() < layers.len() {
            self.moments.resize(layers.len(), None);
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (layer, slot) in layers.iter_mut().zip(&mut self.moments) {
            if layer.is_frozen() {
                layer.zero_grad();
                continue;
            }
            let n = layer.parameter_count();
            let m = slot.get_or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
                steps: 0,
            });
            m.steps += 1;
            let c1 = 1.0 - beta1.powi(m.steps as i32);
            let c2 = 1.0 - beta2.powi(m.steps as i32);
            for i in 0..n {
                let g = layer.grad(i);
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let update = learning_rate * (m.first[i] / c1) / ((m.second[i] / c2).sqrt() + epsilon);
                *layer.param_mut(i) -= update;
            }
            layer.zero_grad();
        }
    }
}
