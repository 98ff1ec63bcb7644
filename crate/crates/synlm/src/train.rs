//! Minibatch training with AdamW, dev-loss early stopping and metrics logging.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synlm_core::model::{encode_example, Example, Gradients, Model, ModelConfig, Variant};
use synlm_core::optim::{AdamW, AdamWConfig};
use synlm_core::transitions::{oracle, ActionSequence};
use synlm_core::tree::Tree;
use synlm_core::vocab::{build_ngram_vocab, build_token_vocab, JointActionVocab, NGramVocab};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::io::{sig9, JsonlWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// Batch loss divided by the number of predicted tokens.
    #[default]
    PerToken,
    /// Batch loss divided by the number of sequences.
    PerSequence,
}

/// Architecture knobs; vocabulary sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub layernorm_eps: f64,
    pub scaffold_weight: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(Variant::Plm, 1, 0);
        ModelShape {
            hidden: d.hidden,
            heads: d.heads,
            layers: d.layers,
            ff_mult: d.ff_mult,
            max_len: d.max_len,
            dropout: d.dropout,
            tie_embeddings: d.tie_embeddings,
            layernorm_eps: d.layernorm_eps,
            scaffold_weight: d.scaffold_weight,
        }
    }
}

impl ModelShape {
    pub fn config(&self, variant: Variant, vocab: &JointActionVocab, ngrams: Option<&NGramVocab>) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            ff_mult: self.ff_mult,
            max_len: self.max_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
            layernorm_eps: self.layernorm_eps,
            scaffold_weight: self.scaffold_weight,
            ..ModelConfig::for_vocabs(variant, vocab, ngrams)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss_norm: LossNorm,
    /// Words seen fewer times map to UNK.
    pub min_count: usize,
    /// Evaluate the dropout-free training loss every this many epochs.
    pub train_eval_every: Option<usize>,
    /// Stop once the dropout-free training loss (per token) is below this.
    pub target_train_loss: Option<f64>,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        TrainConfig {
            lr: 1e-5,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: None,
            batch_size: 5,
            max_epochs: 100,
            max_steps: None,
            patience: 3,
            seed: 0,
            loss_norm: LossNorm::PerToken,
            min_count: 1,
            train_eval_every: None,
            target_train_loss: None,
            model: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.batch_size >= 1
            && self.patience >= 1
            && self.max_epochs >= 1
            && self.min_count >= 1
            && self.train_eval_every != Some(0)
            && (0.0..1.0).contains(&self.model.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(
                "training config needs lr > 0, batch_size, patience, max_epochs, min_count >= 1 and dropout in [0, 1)".into(),
            ))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// Vocabularies and encoded examples for one variant.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub variant: Variant,
    pub vocab: JointActionVocab,
    pub ngrams: Option<NGramVocab>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// Builds vocabularies and examples. Words come from the training trees
/// only; labels and scaffold n-grams from training and dev trees together.
pub fn prepare(variant: Variant, train: &[Tree], dev: &[Tree], min_count: usize) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let tokens = build_token_vocab(train, min_count)?;
    let vocab = JointActionVocab::from_trees(tokens, train.iter().chain(dev));
    let train_o: Vec<ActionSequence> = train.iter().map(oracle).collect();
    let dev_o: Vec<ActionSequence> = dev.iter().map(oracle).collect();
    let ngrams = variant
        .is_scaffold()
        .then(|| build_ngram_vocab(train_o.iter().chain(&dev_o)));
    let encode = |os: &[ActionSequence]| -> Result<Vec<Example>> {
        os.iter()
            .map(|o| Ok(encode_example(variant, o, &vocab, ngrams.as_ref())?.0))
            .collect()
    };
    let train = encode(&train_o)?;
    let dev = encode(&dev_o)?;
    Ok(Dataset {
        variant,
        vocab,
        ngrams,
        train,
        dev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: usize,
    /// `train` (running loss of the optimized objective, dropout on),
    /// `train-eval` (dropout off) or `dev`.
    pub split: String,
    /// Mean loss per predicted token.
    pub loss: f64,
    pub tokens: usize,
    pub wallclock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best: Model<f32>,
    /// Epoch of the selected model (the last one without a dev set).
    pub best_epoch: usize,
    pub best_dev_loss: Option<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub history: Vec<MetricRecord>,
    /// Step at which `target_train_loss` was reached.
    pub reached_target: Option<usize>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Best-dev checkpoint, rewritten on every improvement.
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

fn dropout_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut x = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Summed loss and token count over `examples`, no dropout.
pub fn corpus_loss(model: &Model<f32>, examples: &[Example]) -> Result<(f64, usize)> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| model.eval_loss(e))
        .collect::<Result<_, _>>()?;
    let total: f64 = losses.iter().sum();
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite evaluation loss".into()));
    }
    Ok((total, examples.iter().map(Example::tokens).sum()))
}

fn check_lengths(model: &Model<f32>, examples: &[Example]) -> Result<()> {
    let max = model.config().max_len;
    for (i, e) in examples.iter().enumerate() {
        let inputs = e.tokens();
        if inputs > max {
            return Err(Error::Data(format!("example {i} needs {inputs} positions but max_len is {max}")));
        }
    }
    Ok(())
}

/// Summed loss and gradient of a batch, reduced in index order.
pub fn batch_gradient(model: &Model<f32>, batch: &[&Example], seeds: &[Option<u64>]) -> Result<(f64, usize, Gradients<f32>)> {
    let parts: Vec<(f64, Gradients<f32>)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(e, &s)| model.loss_and_grad(e, s))
        .collect::<Result<_, _>>()?;
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss, batch.iter().map(|e| e.tokens()).sum(), total))
}

/// Runs training. Gradient reduction order is fixed, so results do not
/// depend on the size of the rayon pool the call runs in.
pub fn train(data: &Dataset, config: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainReport> {
    config.validate()?;
    let model_config = config.model.config(data.variant, &data.vocab, data.ngrams.as_ref());
    let mut model = Model::<f32>::new(model_config, config.seed)?;
    check_lengths(&model, &data.train)?;
    check_lengths(&model, &data.dev)?;
    let mut opt = AdamW::<f32>::new(config.adamw(), model.specs());
    let mut metrics = outputs.metrics.as_deref().map(JsonlWriter::create).transpose()?;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut log = |rec: MetricRecord, history: &mut Vec<MetricRecord>| -> Result<()> {
        log::info!("epoch {} step {} {} loss {:.6}", rec.epoch, rec.step, rec.split, rec.loss);
        if let Some(w) = metrics.as_mut() {
            w.write(&rec)?;
        }
        history.push(rec);
        Ok(())
    };
    let use_dropout = model.config().dropout > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs = 0;
    let mut reached_target = None;
    'epochs: for epoch in 1..=config.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_tokens) = (0.0, 0);
        let mut out_of_steps = false;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                out_of_steps = true;
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let seeds: Vec<Option<u64>> = chunk
                .iter()
                .map(|&i| use_dropout.then(|| dropout_seed(config.seed, step, i)))
                .collect();
            let (loss, tokens, mut grads) = batch_gradient(&model, &batch, &seeds)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
            }
            let denom = match config.loss_norm {
                LossNorm::PerToken => tokens.max(1),
                LossNorm::PerSequence => batch.len(),
            };
            grads.scale(1.0 / denom as f32);
            opt.update(&mut model, &grads);
            step += 1;
            epoch_loss += loss;
            epoch_tokens += tokens;
        }
        let wall = start.elapsed().as_secs_f64();
        if epoch_tokens > 0 {
            log(
                MetricRecord {
                    epoch,
                    step,
                    split: "train".into(),
                    loss: sig9(epoch_loss / epoch_tokens as f64),
                    tokens: epoch_tokens,
                    wallclock: wall,
                },
                &mut history,
            )?;
        }
        if let Some(every) = config.train_eval_every {
            if epoch % every == 0 || out_of_steps {
                let (l, t) = corpus_loss(&model, &data.train)?;
                let per = l / t.max(1) as f64;
                log(
                    MetricRecord {
                        epoch,
                        step,
                        split: "train-eval".into(),
                        loss: sig9(per),
                        tokens: t,
                        wallclock: start.elapsed().as_secs_f64(),
                    },
                    &mut history,
                )?;
                if config.target_train_loss.is_some_and(|target| per < target) {
                    reached_target = Some(step);
                }
            }
        }
        if !data.dev.is_empty() {
            let (l, t) = corpus_loss(&model, &data.dev)?;
            let per = sig9(l / t.max(1) as f64);
            log(
                MetricRecord {
                    epoch,
                    step,
                    split: "dev".into(),
                    loss: per,
                    tokens: t,
                    wallclock: start.elapsed().as_secs_f64(),
                },
                &mut history,
            )?;
            if best.as_ref().is_none_or(|(b, _, _)| per < *b) {
                best = Some((per, epoch, model.clone()));
                since_best = 0;
                save(&model, data, outputs)?;
            } else {
                since_best += 1;
            }
        }
        if reached_target.is_some() || out_of_steps || since_best >= config.patience {
            break 'epochs;
        }
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    let (best_dev_loss, best_epoch, best) = match best {
        Some((l, e, m)) => (Some(l), e, m),
        None => {
            save(&model, data, outputs)?;
            (None, epochs, model)
        }
    };
    Ok(TrainReport {
        best,
        best_epoch,
        best_dev_loss,
        epochs,
        steps: step,
        history,
        reached_target,
    })
}

fn save(model: &Model<f32>, data: &Dataset, outputs: &TrainOutputs) -> Result<()> {
    if let Some(p) = &outputs.checkpoint {
        Checkpoint::new(model.clone(), data.vocab.clone(), data.ngrams.clone())?.save(p)?;
    }
    Ok(())
}
