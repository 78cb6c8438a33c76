//! Encoder, codebook and decoder assembled into a world model.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Mlp};
use crate::codebook::{ActionId, Codebook};
use crate::error::{GcqError, Result};
use crate::gridworld::{Action, Frame};
use crate::quantizer::{quantize, Metric, Quantized};

/// Architecture and input scaling of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    /// Encoder input is `(pixel - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    pub metric: Metric,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            activation: Activation::Relu,
            input_offset: 0.5,
            input_scale: 2.0,
            metric: Metric::L2,
        }
    }
}

/// Factor indices locating an observation on the cognitive map.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CognitiveState(pub Vec<usize>);

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
    pub config: ModelConfig,
    env_actions: [Option<ActionId>; 5],
}

impl WorldModel {
    pub fn new(codebook: Codebook, observation_dim: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = codebook.latent_dim();
        let enc_widths: Vec<usize> = std::iter::once(observation_dim)
            .chain(config.encoder_hidden.iter().copied())
            .chain(std::iter::once(latent))
            .collect();
        let dec_widths: Vec<usize> = std::iter::once(latent)
            .chain(config.decoder_hidden.iter().copied())
            .chain(std::iter::once(observation_dim))
            .collect();
        let encoder = Mlp::new(&enc_widths, config.activation, &mut rng)?;
        let decoder = Mlp::new(&dec_widths, config.activation, &mut rng)?;
        Self::from_parts(encoder, decoder, codebook, config)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, codebook: Codebook, config: ModelConfig) -> Result<Self> {
        let latent = codebook.latent_dim();
        if encoder.output_dim() != latent || decoder.input_dim() != latent {
            return Err(GcqError::DimensionMismatch {
                context: "model latent width",
                expected: latent,
                found: encoder.output_dim(),
            });
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(GcqError::DimensionMismatch {
                context: "model observation width",
                expected: encoder.input_dim(),
                found: decoder.output_dim(),
            });
        }
        let mut env_actions = [None; 5];
        for a in Action::ALL {
            env_actions[a.code() as usize] = codebook.action_map().id(a.name()).ok();
        }
        Ok(WorldModel {
            encoder,
            decoder,
            codebook,
            config,
            env_actions,
        })
    }

    pub fn observation_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Action-map id for an environment action.
    pub fn action_id(&self, action: Action) -> Result<ActionId> {
        self.env_actions[action.code() as usize].ok_or_else(|| GcqError::UnknownAction(action.name().into()))
    }

    pub fn action_ids(&self, actions: &[Action]) -> Result<Vec<ActionId>> {
        actions.iter().map(|&a| self.action_id(a)).collect()
    }

    /// Environment action named by an action-map symbol.
    pub fn env_action(&self, id: ActionId) -> Result<Action> {
        let symbol = self.codebook.action_map().symbol(id);
        Action::parse(symbol).ok_or_else(|| GcqError::UnknownAction(symbol.to_string()))
    }

    pub fn normalize_input(&self, pixels: &Array2<f64>) -> Array2<f64> {
        let (off, scale) = (self.config.input_offset, self.config.input_scale);
        pixels.mapv(|p| (p - off) * scale)
    }

    /// `frames` holds one raw frame per row.
    pub fn encode(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        self.encoder.forward(&self.normalize_input(frames))
    }

    pub fn decode(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        self.decoder.forward(latents)
    }

    pub fn quantize_frames(&self, frames: &Array2<f64>, actions: &[ActionId]) -> Result<Quantized> {
        let s = self.encode(frames)?;
        quantize(&s, actions, &self.codebook, self.config.metric)
    }

    /// Nearest codeword per factor of a single frame.
    pub fn localize(&self, frame: &Frame) -> Result<CognitiveState> {
        let x = frames_matrix(std::slice::from_ref(frame))?;
        let q = self.quantize_frames(&x, &[])?;
        Ok(CognitiveState(q.bases))
    }

    /// Concatenated codewords of a cognitive state.
    pub fn state_latent(&self, state: &CognitiveState) -> Result<Vec<f64>> {
        if state.0.len() != self.codebook.m() {
            return Err(GcqError::DimensionMismatch {
                context: "cognitive state factors",
                expected: self.codebook.m(),
                found: state.0.len(),
            });
        }
        let mut out = Vec::with_capacity(self.codebook.latent_dim());
        for (f, &i) in self.codebook.factors().iter().zip(&state.0) {
            if i >= f.len() {
                return Err(GcqError::DimensionMismatch {
                    context: "codeword index",
                    expected: f.len(),
                    found: i,
                });
            }
            out.extend_from_slice(f.codeword(i));
        }
        Ok(out)
    }

    pub fn decode_states(&self, states: &[CognitiveState]) -> Result<Array2<f64>> {
        let d = self.codebook.latent_dim();
        let mut rows = Vec::with_capacity(states.len() * d);
        for s in states {
            rows.extend(self.state_latent(s)?);
        }
        self.decode(&Array2::from_shape_vec((states.len(), d), rows).unwrap())
    }
}

/// Stacks frames into one row per frame.
pub fn frames_matrix(frames: &[Frame]) -> Result<Array2<f64>> {
    let width = frames.first().map_or(0, |f| f.pixels.len());
    let mut data = Vec::with_capacity(frames.len() * width);
    for f in frames {
        if f.pixels.len() != width {
            return Err(GcqError::DimensionMismatch {
                context: "frame size",
                expected: width,
                found: f.pixels.len(),
            });
        }
        data.extend(f.pixels.iter().map(|&p| p as f64));
    }
    Ok(Array2::from_shape_vec((frames.len(), width), data).unwrap())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Peak signal-to-noise ratio for signals with peak value 1.
pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}
