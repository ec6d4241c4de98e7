//! The three tagger shapes behind one parameter container.
//!
//! | shape                  | emissions from          | decoder         |
//! |------------------------|-------------------------|-----------------|
//! | `classify_head`        | encoder + linear head   | per-token argmax |
//! | `transformer_crf`      | encoder + linear head   | CRF (Viterbi)   |
//! | `frozen_emissions_crf` | external emission file  | CRF (Viterbi)   |

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::window_ranges;
use crate::decoder_heads::{
    classify_decode, crf_nll, crf_viterbi, softmax_xent, EmissionHead, EmissionLattice,
    TransitionMatrix,
};
use crate::encoder::{backward, forward, init_parameters, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::label_scheme::Label;
use crate::seed::derive_seed;
use crate::tensor::{ParamSet, TensorMut, TensorRef};

const HEAD_STREAM: u64 = 0x4845_4144;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelShape {
    ClassifyHead,
    TransformerCrf,
    FrozenEmissionsCrf,
}

impl ModelShape {
    pub fn name(self) -> &'static str {
        match self {
            ModelShape::ClassifyHead => "classify_head",
            ModelShape::TransformerCrf => "transformer_crf",
            ModelShape::FrozenEmissionsCrf => "frozen_emissions_crf",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != ModelShape::FrozenEmissionsCrf
    }

    pub fn uses_crf(self) -> bool {
        self != ModelShape::ClassifyHead
    }
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify_head" => Ok(ModelShape::ClassifyHead),
            "transformer_crf" => Ok(ModelShape::TransformerCrf),
            "frozen_emissions_crf" => Ok(ModelShape::FrozenEmissionsCrf),
            _ => Err(Error::Config(format!(
                "unknown model shape {s:?} (expected classify_head, transformer_crf or frozen_emissions_crf)"
            ))),
        }
    }
}

/// What a model consumes for one sentence (or window).
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    Emissions(EmissionLattice),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Emissions(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub shape: ModelShape,
    pub encoder: Option<EncoderParams>,
    pub head: Option<EmissionHead>,
    pub crf: Option<TransitionMatrix>,
}

impl TaggerModel {
    /// Builds a freshly initialised model. `encoder` is required for the
    /// encoder shapes and ignored for `frozen_emissions_crf`.
    pub fn new(shape: ModelShape, encoder: Option<&EncoderConfig>, constrain_bioes: bool) -> Result<Self> {
        let (encoder, head) = if shape.uses_encoder() {
            let cfg = encoder.ok_or_else(|| {
                Error::Config(format!("shape {shape} needs an encoder configuration"))
            })?;
            let params = init_parameters(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, HEAD_STREAM, 0));
            let head = EmissionHead::init(cfg.d_model, Label::COUNT, &mut rng);
            (Some(params), Some(head))
        } else {
            (None, None)
        };
        let crf = shape
            .uses_crf()
            .then(|| TransitionMatrix::clinical(constrain_bioes));
        Ok(TaggerModel {
            shape,
            encoder,
            head,
            crf,
        })
    }

    pub fn encoder_config(&self) -> Option<&EncoderConfig> {
        self.encoder.as_ref().map(|e| &e.config)
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        match (self.shape.uses_encoder(), input) {
            (true, ModelInput::Tokens(_)) | (false, ModelInput::Emissions(_)) => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "input kind does not match model shape {}",
                self.shape
            ))),
        }
    }

    /// Emission scores for one input, without dropout. Token inputs longer
    /// than `max_sequence` are windowed and the lattices concatenated.
    pub fn emissions(&self, input: &ModelInput) -> Result<EmissionLattice> {
        self.check_input(input)?;
        match input {
            ModelInput::Emissions(e) => Ok(e.clone()),
            ModelInput::Tokens(ids) => {
                let (enc, head) = self.encoder_parts();
                let parts = window_ranges(ids.len(), None, enc.config.max_sequence)
                    .into_iter()
                    .map(|r| forward(&ids[r], enc, false, 0).map(|rep| head.forward(&rep.output)))
                    .collect::<Result<Vec<Array2<f64>>>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                let scores = concatenate(Axis(0), &views)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok(EmissionLattice::from_encoder(scores))
            }
        }
    }

    pub fn decode_lattice(&self, lattice: &EmissionLattice) -> Result<Vec<Label>> {
        let path = match &self.crf {
            Some(t) => crf_viterbi(lattice, t)?.path,
            None => classify_decode(lattice),
        };
        Ok(path
            .into_iter()
            .map(|i| Label::from_index(i).expect("lattice width is the label count"))
            .collect())
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Vec<Label>> {
        if input.is_empty() {
            return Ok(Vec::new());
        }
        self.decode_lattice(&self.emissions(input)?)
    }

    fn encoder_parts(&self) -> (&EncoderParams, &EmissionHead) {
        (
            self.encoder.as_ref().expect("encoder shape has encoder parameters"),
            self.head.as_ref().expect("encoder shape has an emission head"),
        )
    }

    /// Training objective for one sentence and its gradient.
    ///
    /// For `classify_head` the loss is the token *sum* of cross-entropies;
    /// for CRF shapes it is the sentence negative log-likelihood. The caller
    /// normalises per batch.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput,
        gold: &[Label],
        dropout_seed: u64,
        train_mode: bool,
    ) -> Result<(f64, TaggerModel)> {
        self.check_input(input)?;
        let gold_idx: Vec<usize> = gold.iter().map(|l| l.index()).collect();
        let mut grads = self.zeros_like();
        match input {
            ModelInput::Emissions(lattice) => {
                let t = self.crf.as_ref().expect("frozen shape has a CRF");
                let out = crf_nll(lattice, t, &gold_idx)?;
                grads.crf = Some(out.grad_transitions);
                Ok((out.loss, grads))
            }
            ModelInput::Tokens(ids) => {
                let (enc, head) = self.encoder_parts();
                let rep = forward(ids, enc, train_mode, dropout_seed)?;
                let lattice = EmissionLattice::from_encoder(head.forward(&rep.output));
                let (loss, d_scores) = match &self.crf {
                    Some(t) => {
                        let out = crf_nll(&lattice, t, &gold_idx)?;
                        grads.crf = Some(out.grad_transitions);
                        (out.loss, out.grad_emissions)
                    }
                    None => {
                        let n = ids.len() as f64;
                        let (mean, grad) = softmax_xent(&lattice, &gold_idx)?;
                        (mean * n, grad * n)
                    }
                };
                let (g_head, d_rep) = head.backward(&rep.output, &d_scores);
                let g_enc = backward(&rep, &d_rep, enc)?;
                grads.head = Some(g_head);
                grads.encoder = Some(g_enc.params);
                Ok((loss, grads))
            }
        }
    }
}

impl ParamSet for TaggerModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend(e.tensors());
        }
        if let Some(h) = &self.head {
            out.extend(h.tensors());
        }
        if let Some(c) = &self.crf {
            out.extend(c.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.extend(e.tensors_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.tensors_mut());
        }
        if let Some(c) = &mut self.crf {
            out.extend(c.tensors_mut());
        }
        out
    }
}
