use serde::{Deserialize, Serialize};

use crate::types::{Measurement, CHANNELS};

/// Smallest standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Statistics fixed; a pure affine map.
    Frozen,
    /// Statistics updated with every observed sample.
    Running,
}

/// Per-channel standardization of sensor samples.
///
/// Statistics are accumulated with Welford's algorithm; the reported
/// standard deviation is the population value floored at [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mode: NormMode,
    count: u64,
    mean: [f64; CHANNELS],
    m2: [f64; CHANNELS],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalizer {
    /// Frozen map with zero mean and unit scale.
    pub fn identity() -> Self {
        Self {
            mode: NormMode::Frozen,
            count: 0,
            mean: [0.0; CHANNELS],
            m2: [0.0; CHANNELS],
        }
    }

    /// Empty running accumulator.
    pub fn running() -> Self {
        Self {
            mode: NormMode::Running,
            ..Self::identity()
        }
    }

    /// Frozen statistics of `samples`.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Measurement>) -> Self {
        let mut n = Self::running();
        for m in samples {
            n.observe(m);
        }
        n.frozen()
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds a sample to the running statistics. Frozen normalizers ignore it.
    pub fn observe(&mut self, m: &Measurement) {
        if self.mode == NormMode::Frozen {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, x) in m.channels().into_iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    /// Frozen copy of the current statistics.
    pub fn frozen(&self) -> Self {
        Self {
            mode: NormMode::Frozen,
            ..self.clone()
        }
    }

    /// Running copy that keeps accumulating from the current statistics.
    pub fn running_copy(&self) -> Self {
        Self {
            mode: NormMode::Running,
            ..self.clone()
        }
    }

    pub fn mean(&self) -> [f64; CHANNELS] {
        if self.count == 0 {
            [0.0; CHANNELS]
        } else {
            self.mean
        }
    }

    pub fn std(&self) -> [f64; CHANNELS] {
        if self.count == 0 {
            return [1.0; CHANNELS];
        }
        let n = self.count as f64;
        self.m2.map(|m2| (m2 / n).sqrt().max(STD_FLOOR))
    }

    pub fn normalize(&self, m: &Measurement) -> [f64; CHANNELS] {
        let (mean, std) = (self.mean(), self.std());
        let mut out = m.channels();
        for i in 0..CHANNELS {
            out[i] = (out[i] - mean[i]) / std[i];
        }
        out
    }

    pub fn denormalize(&self, z: &[f64; CHANNELS]) -> [f64; CHANNELS] {
        let (mean, std) = (self.mean(), self.std());
        let mut out = *z;
        for i in 0..CHANNELS {
            out[i] = out[i] * std[i] + mean[i];
        }
        out
    }
}
