//! Optimization: learning-rate schedule, AdamW, EMA, the training step and
//! the evaluation loop.

use htr_autograd::Tensor;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{epoch_order, make_batch, sample_rng, AugmentConfig, Batch, Sample};
use crate::error::{HtrError, Result};
use crate::metrics::ErrorTally;
use crate::model::HtrModel;
use crate::nn::layers::apply_bn_update;
use crate::nn::{Ctx, ParamKind, ParamStore};
use crate::vocab::CharVocab;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `max_lr`, then cosine decay to 0 at `total_iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.max_lr * step as f64 / cfg.warmup_iters as f64;
    }
    let span = (cfg.total_iters - cfg.warmup_iters).max(1) as f64;
    let progress = ((step - cfg.warmup_iters) as f64 / span).min(1.0);
    (cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if shadow.len() != params.len() || shadow.iter().zip(params).any(|(s, p)| s.shape() != p.shape()) {
        return Err(HtrError::Shape("EMA shadow does not match the parameters".into()));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub ema: Vec<Tensor>,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            seed,
            ema: params.values().to_vec(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
        }
    }

    /// Parameters with the EMA shadow in place of the raw values.
    pub fn ema_params(&self) -> ParamStore {
        ParamStore::from_parts(self.params.specs().to_vec(), self.ema.clone())
    }

    /// Stochastic-depth stream of the current step.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step as u64);
        rng
    }
}

/// One AdamW update with decoupled weight decay on `Weight` parameters.
/// Parameters without a gradient are left untouched.
pub fn adamw_update(state: &mut TrainState, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
    let (b1, b2) = ADAM_BETAS;
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let kind = state.params.specs()[i].kind;
        if kind == ParamKind::Buffer {
            continue;
        }
        let decay = if kind == ParamKind::Weight { lr * weight_decay } else { 0.0 };
        let p = state.params.values_mut()[i].data_mut();
        let m = state.adam_m[i].data_mut();
        let v = state.adam_v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            p[j] -= decay * p[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ctc: f64,
    pub tcm: f64,
    pub lr: f64,
}

/// Forward, backward, AdamW, batch-norm statistics, EMA, step + 1.
/// `ids` identify the batch samples in error messages.
pub fn train_step(
    model: &HtrModel,
    state: &mut TrainState,
    batch: &Batch,
    ids: &[usize],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (grads, bn, out) = {
        let mut ctx = Ctx::new(&state.params, true, true, state.step_rng());
        let out = model.loss(&mut ctx, batch, ids, cfg.loss)?;
        let loss = ctx.g.value(out.total).item();
        let tape = ctx.g.backward(out.total);
        let stats = StepStats {
            loss,
            ctc: out.ctc,
            tcm: out.tcm,
            lr: 0.0,
        };
        (ctx.param_grads(&tape), ctx.bn_updates().to_vec(), stats)
    };
    let lr = lr_at(state.step + 1, cfg);
    adamw_update(state, &grads, lr, cfg.weight_decay);
    for u in &bn {
        let mut mean = state.params.value(u.mean).clone();
        let mut var = state.params.value(u.var).clone();
        apply_bn_update(&mut mean, &mut var, u);
        *state.params.value_mut(u.mean) = mean;
        *state.params.value_mut(u.var) = var;
    }
    ema_update(&mut state.ema, state.params.values(), cfg.ema_decay)?;
    state.step += 1;
    Ok(StepStats { lr, ..out })
}

/// Sample indices of the batch at `step`, walking reshuffled epochs.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<(u64, usize)> {
    let mut order: Option<(u64, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|p| {
            let epoch = (p / n) as u64;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(n, seed, epoch)));
            }
            (epoch, order.as_ref().unwrap().1[p % n])
        })
        .collect()
}

/// Batch for `step`, augmented when enabled.
pub fn training_batch(
    samples: &[Sample],
    vocab: &CharVocab,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    step: usize,
) -> Result<(Batch, Vec<usize>)> {
    if samples.is_empty() {
        return Err(HtrError::Data("training split is empty".into()));
    }
    let picks = batch_indices(samples.len(), cfg.batch_train, cfg.seed, step);
    let chosen: Vec<&Sample> = picks.iter().map(|&(_, i)| &samples[i]).collect();
    let ids: Vec<usize> = picks.iter().map(|&(_, i)| i).collect();
    let batch = if cfg.augment {
        let rngs: Vec<ChaCha8Rng> = picks
            .iter()
            .map(|&(e, i)| sample_rng(cfg.seed, e, i as u64))
            .collect();
        make_batch(&chosen, vocab, Some((aug, &rngs)))?
    } else {
        make_batch(&chosen, vocab, None)?
    };
    Ok((batch, ids))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub cer: f64,
    pub wer: f64,
    pub hypotheses: Vec<String>,
}

/// Greedy-decodes every sample and scores against the transcripts.
pub fn evaluate(
    model: &HtrModel,
    params: &ParamStore,
    samples: &[Sample],
    vocab: &CharVocab,
    batch: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(HtrError::Data("cannot evaluate an empty split".into()));
    }
    let mut tally = ErrorTally::default();
    let mut hypotheses = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = make_batch(&refs, vocab, None)?;
        for (s, ids) in chunk.iter().zip(model.decode(params, &b.images)?) {
            let hyp = vocab.decode(&ids)?;
            tally.push(&s.text, &hyp);
            hypotheses.push(hyp);
        }
    }
    Ok(Evaluation {
        cer: tally.cer()?,
        wer: tally.wer()?,
        hypotheses,
    })
}

/// Result of a full training run.
pub struct Fit {
    pub state: TrainState,
    /// Best validation parameters with their CER, when validation data was given.
    pub best: Option<(ParamStore, f64)>,
    pub last: StepStats,
}

/// Runs `state` up to `cfg.total_iters`, validating every `eval_every` steps.
/// `on_step` may stop early by returning `false`.
pub fn fit(
    model: &HtrModel,
    mut state: TrainState,
    train: &[Sample],
    val: &[Sample],
    vocab: &CharVocab,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepStats) -> bool,
) -> Result<Fit> {
    let aug = AugmentConfig::default();
    let mut best: Option<(ParamStore, f64)> = None;
    let mut last = StepStats {
        loss: f64::NAN,
        ctc: f64::NAN,
        tcm: f64::NAN,
        lr: 0.0,
    };
    while state.step < cfg.total_iters {
        let (batch, ids) = training_batch(train, vocab, cfg, &aug, state.step)?;
        last = train_step(model, &mut state, &batch, &ids, cfg)?;
        let keep_going = on_step(&state, &last);
        if !val.is_empty() && (state.step % cfg.eval_every == 0 || state.step == cfg.total_iters || !keep_going) {
            let params = if cfg.select_ema { state.ema_params() } else { state.params.clone() };
            let e = evaluate(model, &params, val, vocab, cfg.batch_val)?;
            info!("step {} val CER {:.4} WER {:.4}", state.step, e.cer, e.wer);
            if best.as_ref().is_none_or(|(_, c)| e.cer < *c) {
                best = Some((params, e.cer));
            }
        }
        if !keep_going {
            break;
        }
    }
    Ok(Fit { state, best, last })
}
