//! Attention encoder-decoder.
//!
//! The encoder is a single-layer bidirectional GRU over feature frames. The
//! decoder is a single-layer GRU fed the previous token's (learned) input
//! embedding and a dot-product attention context. Its per-step output
//! `h_t = tanh(W [s_t; c_t] + b)` feeds two heads: the word transform
//! (linear + softmax, the baseline distribution) and the embedding
//! transform (two-layer tanh/linear network into the embedding space).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::embedding::{Vocab, SOS};
use crate::error::{Error, Result};
use crate::params::{NamedTensor, ParamStore};

pub const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Hidden size of each encoder direction; encoder states are twice this.
    pub enc_hidden: usize,
    /// Decoder hidden size, also the size of `h_t`.
    pub dec_hidden: usize,
    /// Output size of the embedding transform; must match the table.
    pub emb_dim: usize,
    pub vocab_size: usize,
    pub theta_hidden: usize,
    /// Size of the decoder's learned input token embedding.
    pub token_dim: usize,
    pub att_dim: usize,
    /// Feed the embedding transform a detached copy of `h_t`, so its losses
    /// only train the transform itself.
    pub detach_embedding_branch: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            enc_hidden: 32,
            dec_hidden: 64,
            emb_dim: 256,
            vocab_size: 54,
            theta_hidden: 64,
            token_dim: 16,
            att_dim: 32,
            detach_embedding_branch: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("feat_dim", self.feat_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("emb_dim", self.emb_dim),
            ("vocab_size", self.vocab_size),
            ("theta_hidden", self.theta_hidden),
            ("token_dim", self.token_dim),
            ("att_dim", self.att_dim),
        ];
        for (name, v) in sizes {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size <= SOS {
            return Err(Error::Config("vocab_size must include the reserved tokens".into()));
        }
        Ok(())
    }

    pub fn enc_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

// Parameter slots, in registration order.
const ENC_F_WX: usize = 0;
const ENC_F_WH: usize = 1;
const ENC_F_B: usize = 2;
const ENC_B_WX: usize = 3;
const ENC_B_WH: usize = 4;
const ENC_B_B: usize = 5;
const TOKEN_EMB: usize = 6;
const ATT_KEY: usize = 7;
const ATT_QUERY: usize = 8;
const DEC_WX: usize = 9;
const DEC_WH: usize = 10;
const DEC_B: usize = 11;
const INIT_W: usize = 12;
const INIT_B: usize = 13;
const OUT_W: usize = 14;
const OUT_B: usize = 15;
const PHI_W: usize = 16;
const PHI_B: usize = 17;
const THETA_W1: usize = 18;
const THETA_B1: usize = 19;
const THETA_W2: usize = 20;
const THETA_B2: usize = 21;

fn param_layout(c: &ModelConfig) -> Vec<(&'static str, Vec<usize>, bool)> {
    let (f, e, h, v) = (c.feat_dim, c.enc_hidden, c.dec_hidden, c.vocab_size);
    let ed = c.enc_dim();
    vec![
        ("encoder.fwd.w_input", vec![f, 3 * e], false),
        ("encoder.fwd.w_hidden", vec![e, 3 * e], false),
        ("encoder.fwd.bias", vec![3 * e], true),
        ("encoder.bwd.w_input", vec![f, 3 * e], false),
        ("encoder.bwd.w_hidden", vec![e, 3 * e], false),
        ("encoder.bwd.bias", vec![3 * e], true),
        ("decoder.token_embedding", vec![v, c.token_dim], false),
        ("attention.w_key", vec![ed, c.att_dim], false),
        ("attention.w_query", vec![h, c.att_dim], false),
        ("decoder.w_input", vec![c.token_dim + ed, 3 * h], false),
        ("decoder.w_hidden", vec![h, 3 * h], false),
        ("decoder.bias", vec![3 * h], true),
        ("decoder.init.w", vec![ed, h], false),
        ("decoder.init.bias", vec![h], true),
        ("decoder.out.w", vec![h + ed, h], false),
        ("decoder.out.bias", vec![h], true),
        ("word_transform.w", vec![h, v], false),
        ("word_transform.bias", vec![v], true),
        ("embedding_transform.w1", vec![h, c.theta_hidden], false),
        ("embedding_transform.b1", vec![c.theta_hidden], true),
        ("embedding_transform.w2", vec![c.theta_hidden, c.emb_dim], false),
        ("embedding_transform.b2", vec![c.emb_dim], true),
    ]
}

/// Per-step decoder outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub h: Tensor,
    pub p_phi: Tensor,
    pub e_tilde: Tensor,
    pub attention: Tensor,
}

/// Graph handles for one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub h: NodeId,
    pub logits: NodeId,
    pub p_phi: NodeId,
    pub e_tilde: NodeId,
    pub attention: NodeId,
}

/// Encoder results needed by every decoder step.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// `T × enc_dim`.
    pub states: NodeId,
    /// `T × att_dim`, the attention keys.
    pub keys: NodeId,
    /// Initial decoder state.
    pub init_state: NodeId,
}

/// Model parameters registered in a graph.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Wraps ids produced by binding this model's [`ParamStore`].
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn p(&self, slot: usize) -> NodeId {
        self.ids[slot]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// `h' = (1 - z) ⊙ n + z ⊙ h` with fused `[r, z, n]` gate projections.
/// `gx` is the input projection including bias.
pub(crate) fn gru_cell(g: &mut Graph<'_>, wh: NodeId, gx: NodeId, h: NodeId, size: usize) -> Result<NodeId> {
    let gh = g.matmul(h, wh)?;
    let xr = g.slice(gx, 0, size)?;
    let xz = g.slice(gx, size, size)?;
    let xn = g.slice(gx, 2 * size, size)?;
    let hr = g.slice(gh, 0, size)?;
    let hz = g.slice(gh, size, size)?;
    let hn = g.slice(gh, 2 * size, size)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let rh = g.mul(r, hn)?;
    let n = g.add(xn, rh)?;
    let n = g.tanh(n);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

impl Seq2Seq {
    /// Fresh model: weights uniform in ±0.1, biases zero, from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape, is_bias) in param_layout(&config) {
            let t = if is_bias {
                Tensor::zeros(&shape)
            } else {
                Tensor::uniform(&shape, -INIT_RANGE, INIT_RANGE, &mut rng)
            };
            params.push(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Bound {
        Bound { ids: self.params.bind(g, trainable) }
    }

    fn run_direction(
        &self,
        g: &mut Graph<'_>,
        b: &Bound,
        features: NodeId,
        slots: (usize, usize, usize),
        reverse: bool,
    ) -> Result<Vec<NodeId>> {
        let e = self.config.enc_hidden;
        let t = g.value(features).rows();
        let gx = g.matmul(features, b.p(slots.0))?;
        let gx = g.add(gx, b.p(slots.2))?;
        let wh = b.p(slots.1);
        let mut h = g.constant(Tensor::zeros(&[e]));
        let mut out = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let row = g.slice_row(gx, i)?;
            h = gru_cell(g, wh, row, h, e)?;
            out[i] = h;
        }
        Ok(out)
    }

    /// Encodes `T × feat_dim` frames into `T × enc_dim` states, plus the
    /// attention keys and the initial decoder state.
    pub fn encode(&self, g: &mut Graph<'_>, b: &Bound, features: NodeId) -> Result<EncoderNodes> {
        let shape = g.value(features).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.feat_dim || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "features must be T×{} with T >= 1, got {shape:?}",
                self.config.feat_dim
            )));
        }
        let fwd = self.run_direction(g, b, features, (ENC_F_WX, ENC_F_WH, ENC_F_B), false)?;
        let bwd = self.run_direction(g, b, features, (ENC_B_WX, ENC_B_WH, ENC_B_B), true)?;
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &bk)| g.concat(&[f, bk]))
            .collect::<Result<Vec<_>>>()?;
        let states = g.stack_rows(&rows)?;
        let keys = g.matmul(states, b.p(ATT_KEY))?;
        let t = shape[0];
        let avg = g.constant(Tensor::vector(vec![1.0 / t as f64; t]));
        let pooled = g.matmul(avg, states)?;
        let s0 = g.matmul(pooled, b.p(INIT_W))?;
        let s0 = g.add(s0, b.p(INIT_B))?;
        let init_state = g.tanh(s0);
        Ok(EncoderNodes { states, keys, init_state })
    }

    /// One decoder step from `prev_token` and `state`; returns the step
    /// outputs and the new recurrent state.
    pub fn decoder_step(
        &self,
        g: &mut Graph<'_>,
        b: &Bound,
        enc: &EncoderNodes,
        prev_token: usize,
        state: NodeId,
    ) -> Result<(StepNodes, NodeId)> {
        let c = &self.config;
        if prev_token >= c.vocab_size {
            return Err(Error::Lookup(format!("token id {prev_token} outside vocabulary of {}", c.vocab_size)));
        }
        if g.value(state).shape() != [c.dec_hidden] {
            return Err(Error::Contract(format!(
                "decoder state must be initialized with shape [{}], got {:?}",
                c.dec_hidden,
                g.value(state).shape()
            )));
        }
        let q = g.matmul(state, b.p(ATT_QUERY))?;
        let scores = g.matmul(enc.keys, q)?;
        let attention = g.softmax(scores)?;
        let context = g.matmul(attention, enc.states)?;

        let tok = g.slice_row(b.p(TOKEN_EMB), prev_token)?;
        let x = g.concat(&[tok, context])?;
        let gx = g.matmul(x, b.p(DEC_WX))?;
        let gx = g.add(gx, b.p(DEC_B))?;
        let new_state = gru_cell(g, b.p(DEC_WH), gx, state, c.dec_hidden)?;

        let sc = g.concat(&[new_state, context])?;
        let h = g.matmul(sc, b.p(OUT_W))?;
        let h = g.add(h, b.p(OUT_B))?;
        let h = g.tanh(h);

        let logits = g.matmul(h, b.p(PHI_W))?;
        let logits = g.add(logits, b.p(PHI_B))?;
        let p_phi = g.softmax(logits)?;

        let h_theta = if c.detach_embedding_branch { g.detach(h) } else { h };
        let u = g.matmul(h_theta, b.p(THETA_W1))?;
        let u = g.add(u, b.p(THETA_B1))?;
        let u = g.tanh(u);
        let e_tilde = g.matmul(u, b.p(THETA_W2))?;
        let e_tilde = g.add(e_tilde, b.p(THETA_B2))?;

        Ok((StepNodes { h, logits, p_phi, e_tilde, attention }, new_state))
    }

    /// Teacher-forced decoding: step `t` consumes `targets[t-1]` (SOS first).
    pub fn teacher_forced_rollout(
        &self,
        g: &mut Graph<'_>,
        b: &Bound,
        features: NodeId,
        targets: &[usize],
    ) -> Result<Vec<StepNodes>> {
        if targets.is_empty() {
            return Err(Error::Data("empty target sequence".into()));
        }
        if *targets.last().expect("non-empty") != crate::embedding::EOS {
            return Err(Error::Data("target sequence must end with EOS".into()));
        }
        let enc = self.encode(g, b, features)?;
        let mut state = enc.init_state;
        let mut prev = SOS;
        let mut out = Vec::with_capacity(targets.len());
        for &y in targets {
            let (step, s) = self.decoder_step(g, b, &enc, prev, state)?;
            out.push(step);
            state = s;
            prev = y;
        }
        Ok(out)
    }

    /// Runs the encoder once for inference.
    pub fn start(&self, features: &Tensor) -> Result<Inference<'_>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant_ref(features);
        let enc = self.encode(&mut g, &b, f)?;
        Ok(Inference {
            model: self,
            states: g.value(enc.states).clone(),
            keys: g.value(enc.keys).clone(),
            init: g.value(enc.init_state).clone(),
        })
    }
}

/// Recurrent decoder state, only obtainable from [`Inference`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState(Tensor);

impl DecoderState {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Frozen encoder results for step-by-step decoding without gradients.
pub struct Inference<'m> {
    model: &'m Seq2Seq,
    states: Tensor,
    keys: Tensor,
    init: Tensor,
}

impl Inference<'_> {
    pub fn init_decoder_state(&self) -> DecoderState {
        DecoderState(self.init.clone())
    }

    pub fn encoder_states(&self) -> &Tensor {
        &self.states
    }

    pub fn step(&self, prev_token: usize, state: &DecoderState) -> Result<(DecoderStepOutput, DecoderState)> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, false);
        let enc = EncoderNodes {
            states: g.constant_ref(&self.states),
            keys: g.constant_ref(&self.keys),
            init_state: g.constant_ref(&self.init),
        };
        let s = g.constant_ref(&state.0);
        let (nodes, next) = self.model.decoder_step(&mut g, &b, &enc, prev_token, s)?;
        let out = DecoderStepOutput {
            h: g.value(nodes.h).clone(),
            p_phi: g.value(nodes.p_phi).clone(),
            e_tilde: g.value(nodes.e_tilde).clone(),
            attention: g.value(nodes.attention).clone(),
        };
        Ok((out, DecoderState(g.value(next).clone())))
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON checkpoint of a recognizer together with the settings that decide
/// how it decodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub mode: crate::objectives::TrainMode,
    pub fusion: crate::objectives::FusionConfig,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    /// Hash of the embedding table used in training, if any.
    pub table_hash: Option<String>,
    pub params: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        model: &Seq2Seq,
        vocab: &Vocab,
        mode: crate::objectives::TrainMode,
        fusion: crate::objectives::FusionConfig,
        table_hash: Option<String>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: model.config.clone(),
            mode,
            fusion,
            vocab: vocab.tokens()[crate::embedding::RESERVED.len()..].to_vec(),
            vocab_hash: vocab.hash(),
            table_hash,
            params: model.params.to_named(),
        }
    }

    /// Rebuilds the model and vocabulary, validating every tensor shape
    /// against the stored config.
    pub fn restore(&self) -> Result<(Seq2Seq, Vocab)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", self.format_version)));
        }
        let vocab = Vocab::from_tokens(self.vocab.iter().cloned())?;
        if vocab.hash() != self.vocab_hash {
            return Err(Error::Data("checkpoint vocabulary hash mismatch".into()));
        }
        if vocab.len() != self.model_config.vocab_size {
            return Err(Error::Shape(format!(
                "checkpoint vocab has {} tokens, config says {}",
                vocab.len(),
                self.model_config.vocab_size
            )));
        }
        let mut model = Seq2Seq::new(self.model_config.clone())?;
        model.params.load_named(&self.params)?;
        Ok((model, vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
