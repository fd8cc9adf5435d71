use std::time::Instant;

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;

/// How operator work is charged.
///
/// `Simulated` charges `model_cost * f` with `f` lognormal, mean 1 and shape
/// `sigma`, drawn from the ChaCha8 stream `(seed, stream)`, so a charge
/// depends only on its coordinates and never on what ran before it. `Wall`
/// charges measured elapsed microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    Simulated { sigma: f64 },
    Wall,
}

impl Default for ClockMode {
    fn default() -> Self {
        ClockMode::Simulated { sigma: 0.05 }
    }
}

impl ClockMode {
    pub fn name(&self) -> &'static str {
        match self {
            ClockMode::Simulated { .. } => "simulated",
            ClockMode::Wall => "wall",
        }
    }

    pub fn noise_factor(sigma: f64, seed: u64, stream: u64) -> f64 {
        if sigma <= 0.0 {
            return 1.0;
        }
        let dist = LogNormal::new(-0.5 * sigma * sigma, sigma).expect("sigma is finite and > 0");
        dist.sample(&mut stream_rng(seed, stream))
    }

    /// Runs `work` and returns its output with the charged cost.
    pub fn charge<T>(&self, seed: u64, stream: u64, model_cost: f64, work: impl FnOnce() -> T) -> (T, f64) {
        match *self {
            ClockMode::Simulated { sigma } => {
                let out = work();
                (out, model_cost * Self::noise_factor(sigma, seed, stream))
            }
            ClockMode::Wall => {
                let start = Instant::now();
                let out = std::hint::black_box(work());
                (out, start.elapsed().as_secs_f64() * 1e6)
            }
        }
    }
}
