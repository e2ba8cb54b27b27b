use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Per-node projection only; edges are ignored.
    Flat,
    MessagePassing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Input feature width (op-type vocabulary + 4).
    pub features: usize,
    pub hidden: usize,
    /// Message-passing rounds; ignored by the flat encoder.
    pub rounds: usize,
    /// Number of placement locations.
    pub locations: usize,
    pub encoder: EncoderKind,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.features == 0 || self.locations == 0 {
            return Err(Error::Dimension(format!(
                "features, hidden and locations must be >= 1 (got F={}, D={}, M={})",
                self.features, self.hidden, self.locations
            )));
        }
        if self.encoder == EncoderKind::MessagePassing && self.rounds == 0 {
            return Err(Error::Dimension("message passing needs at least one round".into()));
        }
        Ok(())
    }

    /// Rounds that carry parameters (zero for the flat encoder).
    pub fn active_rounds(&self) -> usize {
        match self.encoder {
            EncoderKind::Flat => 0,
            EncoderKind::MessagePassing => self.rounds,
        }
    }

    pub fn layout(&self) -> Layout {
        let d = self.hidden;
        let w_in = d * self.features;
        let round = 2 * d * d + d;
        let head_start = w_in + self.active_rounds() * round;
        Layout { d, f: self.features, round, head_start, total: head_start + self.locations * (d + 2) }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block in the flat weight vector.
///
/// Canonical order: `W_in` (D x F, row-major), then per round `W_self`
/// (D x D), `W_nbr` (D x D), `b` (D), then per location `a_j` (D), `d_j`, `b_j`.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    d: usize,
    f: usize,
    round: usize,
    head_start: usize,
    pub total: usize,
}

impl Layout {
    pub fn w_in(&self) -> Range<usize> {
        0..self.d * self.f
    }

    fn round_base(&self, k: usize) -> usize {
        self.d * self.f + k * self.round
    }

    pub fn w_self(&self, k: usize) -> Range<usize> {
        let s = self.round_base(k);
        s..s + self.d * self.d
    }

    pub fn w_nbr(&self, k: usize) -> Range<usize> {
        let s = self.round_base(k) + self.d * self.d;
        s..s + self.d * self.d
    }

    pub fn bias(&self, k: usize) -> Range<usize> {
        let s = self.round_base(k) + 2 * self.d * self.d;
        s..s + self.d
    }

    pub fn head_a(&self, j: usize) -> Range<usize> {
        let s = self.head_start + j * (self.d + 2);
        s..s + self.d
    }

    pub fn head_d(&self, j: usize) -> usize {
        self.head_start + j * (self.d + 2) + self.d
    }

    pub fn head_b(&self, j: usize) -> usize {
        self.head_start + j * (self.d + 2) + self.d + 1
    }
}

/// All learnable weights of the policy, stored flat in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub hyper: Hyper,
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn layout(&self) -> Layout {
        self.hyper.layout()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let want = self.hyper.param_count();
        if self.weights.len() != want {
            return Err(Error::Dimension(format!(
                "weight vector has {} entries, hyper-parameters imply {want}",
                self.weights.len()
            )));
        }
        if let Some(k) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Dimension(format!("weight {k} is not finite")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("params serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: PolicyParams = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        params.validate()?;
        Ok(params)
    }
}

/// Uniform `[-1/sqrt(D), 1/sqrt(D)]` weights with zero head biases.
pub fn init_params(seed: u64, hyper: Hyper) -> Result<PolicyParams> {
    hyper.validate()?;
    let layout = hyper.layout();
    let scale = 1.0 / (hyper.hidden as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-scale..=scale)).collect();
    for j in 0..hyper.locations {
        weights[layout.head_b(j)] = 0.0;
    }
    Ok(PolicyParams { hyper, weights })
}
