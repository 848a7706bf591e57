use serde::{Deserialize, Serialize};

use super::SubnetSpec;

/// Running statistics of one batch-normalized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub update_count: u64,
}

impl LayerStats {
    pub fn new(width: usize) -> Self {
        LayerStats {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            update_count: 0,
        }
    }

    /// Folds one batch's mean and (biased) variance into the running values.
    /// The first update adopts the batch statistics outright; later updates
    /// are an exponential moving average with weight `momentum` on the past.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        debug_assert_eq!(batch_mean.len(), self.running_mean.len());
        if self.update_count == 0 {
            self.running_mean.copy_from_slice(batch_mean);
            self.running_var.copy_from_slice(batch_var);
        } else {
            for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
                *r = (momentum * *r + (1.0 - momentum) * b).max(0.0);
            }
        }
        self.update_count += 1;
    }
}

/// Running statistics for every normalized layer of every subnet: three
/// layers per subnet, subnets in time-step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    layers: Vec<LayerStats>,
}

impl BatchNormState {
    pub fn new(spec: &SubnetSpec, steps: usize) -> Self {
        let mut layers = Vec::with_capacity(3 * steps.saturating_sub(1));
        for _ in 1..steps {
            layers.push(LayerStats::new(spec.hidden_dim));
            layers.push(LayerStats::new(spec.hidden_dim));
            layers.push(LayerStats::new(spec.output_dim));
        }
        BatchNormState { layers }
    }

    /// The three layer statistics of the subnet for time step `n >= 1`.
    pub fn subnet(&self, n: usize) -> &[LayerStats] {
        &self.layers[3 * (n - 1)..3 * n]
    }

    pub fn subnet_mut(&mut self, n: usize) -> &mut [LayerStats] {
        &mut self.layers[3 * (n - 1)..3 * n]
    }

    pub fn layers(&self) -> &[LayerStats] {
        &self.layers
    }
}
