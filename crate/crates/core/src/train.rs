//! Recognizer training: run configuration, the minibatch SGD loop with
//! dev-set model selection, and evaluation helpers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::cosine;
use crate::corpus::{wer, Example, WerReport};
use crate::decoding::{greedy_decode, DecodeConfig};
use crate::embedding::{EmbedTrainConfig, EmbeddingTable, EOS};
use crate::error::{Error, Result};
use crate::objectives::{objective_for_mode, FusionConfig, LossBreakdown, RegularizationConfig, TrainMode};
use crate::params::{parallel_grads, Sgd};
use crate::seq2seq::{ModelConfig, Seq2Seq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Epochs without dev improvement before the learning rate is halved.
    pub patience: usize,
    /// Seed for minibatch shuffling.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.1, batch_size: 16, epochs: 20, clip_norm: 5.0, patience: 2, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a pipeline run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub model: ModelConfig,
    pub reg: RegularizationConfig,
    pub fusion: FusionConfig,
    pub decode: DecodeConfig,
    pub embed: EmbedTrainConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Reg,
            model: ModelConfig::default(),
            reg: RegularizationConfig::default(),
            fusion: FusionConfig::default(),
            decode: DecodeConfig::default(),
            embed: EmbedTrainConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies the mode constraints: baseline zeroes both weights, reg
    /// zeroes the fusion weight. Decoding follows the training mode.
    pub fn normalized(mut self) -> Self {
        match self.mode {
            TrainMode::Baseline => {
                self.reg.lambda = 0.0;
                self.fusion.lambda_f = 0.0;
            }
            TrainMode::Reg => self.fusion.lambda_f = 0.0,
            TrainMode::Fused => {}
        }
        self.decode.mode = self.mode.into();
        self.decode.fusion = self.fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reg.validate()?;
        self.fusion.validate()?;
        self.decode.validate()?;
        self.embed.validate()?;
        self.optim.validate()?;
        if self.mode == TrainMode::Baseline && (self.reg.lambda != 0.0 || self.fusion.lambda_f != 0.0) {
            return Err(Error::Config("baseline mode requires lambda = 0 and lambda_f = 0".into()));
        }
        if self.mode == TrainMode::Reg && self.fusion.lambda_f != 0.0 {
            return Err(Error::Config("reg mode requires lambda_f = 0".into()));
        }
        Ok(())
    }

    /// Checks a loaded table against the model dimensions.
    pub fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.model.emb_dim {
            return Err(Error::Config(format!(
                "embedding table dim {} differs from model emb_dim {}",
                table.dim(),
                self.model.emb_dim
            )));
        }
        if table.vocab_size() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "embedding table has {} rows, model vocab_size is {}",
                table.vocab_size(),
                self.model.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_token_error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters of the epoch with the lowest dev token error.
    pub model: Seq2Seq,
    pub best_epoch: usize,
    pub best_dev_error: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Greedy-decodes every example and scores the result against its targets
/// (EOS excluded). Utterances run in parallel, reports merge in order.
pub fn token_error(
    model: &Seq2Seq,
    examples: &[Example],
    table: Option<&EmbeddingTable>,
    decode: &DecodeConfig,
) -> Result<WerReport> {
    let reports = examples
        .par_iter()
        .map(|ex| {
            let hyp = greedy_decode(model, &ex.features, table, decode)?;
            wer(strip_eos(&ex.targets), &hyp)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WerReport::merge(reports))
}

fn strip_eos(t: &[usize]) -> &[usize] {
    match t.last() {
        Some(&EOS) => &t[..t.len() - 1],
        _ => t,
    }
}

/// Teacher-forced projected embeddings `(ẽ_t, y_t)` for every step.
pub fn projected_embeddings(model: &Seq2Seq, examples: &[Example]) -> Result<Vec<(Vec<f64>, usize)>> {
    let per = examples
        .par_iter()
        .map(|ex| {
            let inf = model.start(&ex.features)?;
            let mut state = inf.init_decoder_state();
            let mut prev = crate::embedding::SOS;
            let mut out = Vec::with_capacity(ex.targets.len());
            for &y in &ex.targets {
                let (step, next) = inf.step(prev, &state)?;
                out.push((step.e_tilde.into_data(), y));
                state = next;
                prev = y;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Mean cosine between projected embeddings and their targets, and the
/// mean cosine of the same projections against randomly drawn targets.
pub fn cosine_alignment(
    model: &Seq2Seq,
    examples: &[Example],
    table: &EmbeddingTable,
    seed: u64,
) -> Result<(f64, f64)> {
    let pairs = projected_embeddings(model, examples)?;
    if pairs.is_empty() {
        return Err(Error::Data("no decoding steps to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let (mut aligned, mut random) = (0.0, 0.0);
    for (e, y) in &pairs {
        aligned += cosine(e, table.row(*y)?)?;
        let r = targets[rng.random_range(0..targets.len())];
        random += cosine(e, table.row(r)?)?;
    }
    let n = pairs.len() as f64;
    Ok((aligned / n, random / n))
}

fn merge_breakdowns(parts: &[LossBreakdown]) -> LossBreakdown {
    let lambda = parts.first().map_or(0.0, |b| b.lambda);
    let mut out = LossBreakdown { total: 0.0, asr_or_fused: 0.0, reg: 0.0, lambda, steps: Vec::new() };
    for b in parts {
        out.total += b.total;
        out.asr_or_fused += b.asr_or_fused;
        out.reg += b.reg;
        out.steps.extend_from_slice(&b.steps);
    }
    out
}

/// Minibatch SGD on the objective of `run.mode`, averaged over the
/// utterances of each batch. After every epoch the dev set is greedy-decoded
/// and the parameters with the lowest token error are kept. The learning
/// rate halves after `patience` epochs without improvement.
///
/// `log` receives one JSON object per update and one per epoch.
pub fn asr_train(
    train: &[Example],
    dev: &[Example],
    table: Option<&EmbeddingTable>,
    run: &RunConfig,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TrainReport> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("dev set is empty".into()));
    }
    let table = match run.mode {
        TrainMode::Baseline => None,
        _ => {
            let t = table.ok_or_else(|| Error::Config(format!("mode {} needs embeddings", run.mode)))?;
            run.check_table(t)?;
            Some(t)
        }
    };
    let mut model = Seq2Seq::new(run.model.clone())?;
    let mut opt = Sgd { lr: run.optim.lr, clip_norm: run.optim.clip_norm };
    let mut rng = ChaCha8Rng::seed_from_u64(run.optim.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stalled = 0;
    let mut epochs = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=run.optim.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(run.optim.batch_size) {
            let items: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let m = &model;
            let (grads, parts) = parallel_grads(&model.params, &items, |g, ids, ex| {
                let b = crate::seq2seq::Bound::from_ids(ids.to_vec());
                let f = g.constant_ref(&ex.features);
                let steps = m.teacher_forced_rollout(g, &b, f, &ex.targets)?;
                let obj = objective_for_mode(g, &steps, &ex.targets, table, run.mode, &run.reg, &run.fusion)?;
                Ok((obj.loss, obj.breakdown))
            })
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                e => e,
            })?;
            let bd = merge_breakdowns(&parts);
            opt.step(&mut model.params, &grads, 1.0 / items.len() as f64)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                    e => e,
                })?;
            epoch_loss += bd.total;
            let mut line = bd.log_line(step);
            line["epoch"] = epoch.into();
            line["lambda"] = bd.lambda.into();
            log(line);
            step += 1;
        }
        let dev_err = token_error(&model, dev, table, &run.decode)?.wer;
        let rec = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: epoch_loss / train.len() as f64,
            dev_token_error: dev_err,
        };
        log(serde_json::to_value(&rec)?);
        epochs.push(rec);
        if dev_err < best.0 {
            best = (dev_err, epoch, model.clone());
            stalled = 0;
        } else {
            stalled += 1;
            if run.optim.patience > 0 && stalled >= run.optim.patience {
                opt.lr *= 0.5;
                stalled = 0;
            }
        }
    }
    let (best_dev_error, best_epoch, model) = best;
    Ok(TrainReport { model, best_epoch, best_dev_error, epochs })
}
