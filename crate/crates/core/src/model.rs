//! The full recognizer: feature extractor, sequence encoder, CTC head and the
//! optional training-only context branch.

use htr_autograd::{Tensor, Var};

use crate::ctc::{ctc_loss, greedy_decode_batch, CtcHead};
use crate::data::Batch;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{HtrError, Result};
use crate::mvp::{MvpConfig, MvpExtractor};
use crate::nn::{Ctx, ParamBuilder, ParamSpec, ParamStore};
use crate::tcm::{build_windows, ContextWindows, Tcm, TcmConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mvp: MvpConfig,
    pub encoder: EncoderConfig,
    /// `None` trains with CTC alone.
    pub tcm: Option<TcmConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mvp.validate()?;
        self.encoder.validate()?;
        if self.mvp.token_dim != self.encoder.block.dim {
            return Err(HtrError::Config(format!(
                "token dim {} differs from encoder dim {}",
                self.mvp.token_dim, self.encoder.block.dim
            )));
        }
        if let Some(t) = &self.tcm {
            t.validate(self.encoder.block.dim)?;
        }
        Ok(())
    }
}

/// Objective weights of the CTC and context losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ctc: f64,
    pub tcm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ctc: 1.0, tcm: 0.1 }
    }
}

/// Weighted sum of the two objectives; non-finite parts are rejected.
pub fn total_loss(ctc: f64, tcm: f64, w: LossWeights) -> Result<f64> {
    if !ctc.is_finite() || !tcm.is_finite() {
        return Err(HtrError::Numeric(format!("non-finite loss parts ctc={ctc} tcm={tcm}")));
    }
    Ok(w.ctc * ctc + w.tcm * tcm)
}

#[derive(Clone, Debug)]
pub struct HtrModel {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub extractor: MvpExtractor,
    pub encoder: Encoder,
    pub head: CtcHead,
    pub tcm: Option<Tcm>,
}

/// Loss of one batch: the differentiable total plus its parts.
pub struct LossOutput {
    pub total: Var,
    pub ctc: f64,
    pub tcm: f64,
    pub per_sample_ctc: Vec<f64>,
}

impl HtrModel {
    /// Declares every parameter. Context-branch parameters come last and are
    /// marked training-only; with `with_tcm = false` they are not declared.
    pub fn build(cfg: &ModelConfig, classes: usize, with_tcm: bool) -> Result<(Self, Vec<ParamSpec>)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new();
        let extractor = MvpExtractor::new(&mut pb, &cfg.mvp);
        let encoder = Encoder::new(&mut pb, &cfg.encoder);
        let dim = cfg.encoder.block.dim;
        let head = CtcHead::new(&mut pb, dim, classes);
        let tcm = match (&cfg.tcm, with_tcm) {
            (Some(t), true) => {
                pb.set_train_only(true);
                Some(Tcm::new(&mut pb, t, dim, classes))
            }
            _ => None,
        };
        let model = Self {
            cfg: cfg.clone(),
            classes,
            extractor,
            encoder,
            head,
            tcm,
        };
        Ok((model, pb.into_specs()))
    }

    /// Encoded visual tokens `[B, L, D]`.
    pub fn encode(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let x = self.extractor.forward(ctx, images)?;
        self.encoder.forward(ctx, x)
    }

    /// `(encoded tokens, CTC logits [B, L, V])`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<(Var, Var)> {
        let x = self.encode(ctx, images)?;
        let logits = self.head.forward(ctx, x);
        Ok((x, logits))
    }

    /// Joint objective of a batch. `ids` name the samples in diagnostics.
    pub fn loss(&self, ctx: &mut Ctx, batch: &Batch, ids: &[usize], w: LossWeights) -> Result<LossOutput> {
        let images = ctx.g.constant(batch.images.clone());
        let (x, logits) = self.forward(ctx, images)?;
        let targets: Vec<&[usize]> = (0..batch.size()).map(|b| batch.target(b)).collect();
        let per = ctc_loss(ctx, logits, &targets).map_err(|e| match e {
            HtrError::Numeric(m) => HtrError::Numeric(format!("{m} in batch with samples {ids:?}")),
            e => e,
        })?;
        let per_sample_ctc = ctx.g.value(per).data().to_vec();
        let bad: Vec<usize> = per_sample_ctc
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_finite())
            .map(|(i, _)| ids.get(i).copied().unwrap_or(i))
            .collect();
        if !bad.is_empty() {
            return Err(HtrError::Numeric(format!("non-finite CTC loss for samples {bad:?}")));
        }
        let ctc = ctx.g.mean_all(per);
        let ctc_value = ctx.g.value(ctc).item();
        let mut total = ctx.g.scale(ctc, w.ctc);
        let mut tcm_value = 0.0;
        if let Some(tcm) = &self.tcm {
            let windows: Vec<ContextWindows> = batch
                .labels
                .iter()
                .zip(&batch.lengths)
                .map(|(l, &n)| build_windows(l, n, tcm.cfg.window))
                .collect();
            let out = tcm.forward(ctx, &windows, x);
            let loss = tcm.loss(ctx, &out, &batch.labels, &windows);
            tcm_value = ctx.g.value(loss).item();
            if !tcm_value.is_finite() {
                return Err(HtrError::Numeric(format!("non-finite context loss for samples {ids:?}")));
            }
            let weighted = ctx.g.scale(loss, w.tcm);
            total = ctx.g.add(total, weighted);
        }
        total_loss(ctc_value, tcm_value, w)?;
        Ok(LossOutput {
            total,
            ctc: ctc_value,
            tcm: tcm_value,
            per_sample_ctc,
        })
    }

    /// Evaluation-mode CTC logits `[B, L, V]`.
    pub fn logits(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval(store);
        let im = ctx.g.constant(images.clone());
        let (_, logits) = self.forward(&mut ctx, im)?;
        Ok(ctx.g.value(logits).clone())
    }

    /// Greedy label sequences for `[B, 1, H, W]` images.
    pub fn decode(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(greedy_decode_batch(&self.logits(store, images)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(2.0, 3.0, w).unwrap() - 2.3).abs() < 1e-12);
        let off = LossWeights { ctc: 1.0, tcm: 0.0 };
        assert_eq!(total_loss(2.0, 3.0, off).unwrap(), 2.0);
        assert!(total_loss(f64::NAN, 0.0, w).is_err());
        assert!(total_loss(1.0, f64::INFINITY, w).is_err());
    }
}
