//! Connectionist temporal classification: projection head, loss and greedy decoding.

use htr_autograd::{Tensor, Var};

use crate::error::{HtrError, Result};
use crate::nn::layers::Linear;
use crate::nn::{Ctx, ParamBuilder};
use crate::vocab::BLANK_ID;

/// Per-token affine map from the encoder width to vocabulary logits.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: Linear,
}

impl CtcHead {
    pub fn new(pb: &mut ParamBuilder, dim: usize, classes: usize) -> Self {
        Self {
            proj: Linear::new(pb, "ctc_head", dim, classes, true),
        }
    }

    /// `[B, L, D]` → `[B, L, V]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        self.proj.forward(ctx, x)
    }
}

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(labels: &[usize], frames: usize) -> Result<()> {
    let required = required_frames(labels);
    if required > frames {
        return Err(HtrError::InfeasibleTarget {
            label_len: labels.len(),
            required,
            frames,
        });
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of an `L × V` row-major matrix.
pub fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

/// Negative log-likelihood of `labels` under per-frame softmax of `logits`
/// (`L × V`, row-major), and its gradient with respect to the logits.
pub fn ctc_nll(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes < 2 || logits.is_empty() || logits.len() % classes != 0 {
        return Err(HtrError::Shape(format!(
            "{} logits do not form frames of {classes} classes",
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK_ID || l >= classes) {
        return Err(HtrError::Data(format!("label id {bad} is not a character class")));
    }
    let frames = logits.len() / classes;
    check_feasible(labels, frames)?;

    let lp = log_softmax(logits, classes);
    let s_len = 2 * labels.len() + 1;
    let sym = |s: usize| if s % 2 == 0 { BLANK_ID } else { labels[s / 2] };
    // skip transition s-2 -> s allowed onto a label that differs from the previous label
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && labels[s / 2] != labels[s / 2 - 1];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[BLANK_ID];
    if s_len > 1 {
        alpha[1] = lp[sym(1)];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * classes + sym(s)];
        }
    }

    // beta[t][s]: log-probability of the remaining frames after t given state s at t
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let nx = |s2: usize| beta[(t + 1) * s_len + s2] + lp[(t + 1) * classes + sym(s2)];
            let mut b = nx(s);
            if s + 1 < s_len {
                b = log_add(b, nx(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, nx(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(HtrError::Numeric("CTC path probability underflowed".into()));
    }

    let mut grad = vec![0.0; logits.len()];
    for t in 0..frames {
        let row = &mut grad[t * classes..(t + 1) * classes];
        for (g, l) in row.iter_mut().zip(&lp[t * classes..(t + 1) * classes]) {
            *g = l.exp();
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                row[sym(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Brute-force loss: sums the probability of every frame labelling that
/// collapses to `labels`. Only for tiny instances (L ≤ 8, V ≤ 5).
/// Returns +∞ when no labelling collapses to the target.
pub fn ctc_loss_oracle(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    let frames = logits.len() / classes.max(1);
    if frames > 8 || classes > 5 {
        return Err(HtrError::Data(format!(
            "oracle limited to 8 frames and 5 classes, got {frames} and {classes}"
        )));
    }
    let probs: Vec<f64> = log_softmax(logits, classes).iter().map(|l| l.exp()).collect();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if greedy_collapse(&path) == labels {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs[t * classes + k])
                .product::<f64>();
        }
        // odometer increment over V^L labellings
        let mut t = 0;
        loop {
            if t == frames {
                return Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY });
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Collapses repeats and drops blanks from a frame labelling.
pub fn greedy_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK_ID {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (first maximum wins), then collapse.
pub fn greedy_decode(logits: &[f64], classes: usize) -> Vec<usize> {
    let path: Vec<usize> = logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    greedy_collapse(&path)
}

/// Greedy decoding of every sample of `[B, L, V]` logits.
pub fn greedy_decode_batch(logits: &Tensor) -> Vec<Vec<usize>> {
    let s = logits.shape();
    let per = s[1] * s[2];
    logits
        .data()
        .chunks(per)
        .map(|chunk| greedy_decode(chunk, s[2]))
        .collect()
}

/// Per-sample CTC losses of `[B, L, V]` logits as a `[B]` tape variable.
pub fn ctc_loss(ctx: &mut Ctx, logits: Var, targets: &[&[usize]]) -> Result<Var> {
    let s = ctx.g.shape(logits).to_vec();
    let (b, l, v) = (s[0], s[1], s[2]);
    if targets.len() != b {
        return Err(HtrError::Shape(format!("{} targets for {b} samples", targets.len())));
    }
    let values = ctx.g.value(logits).data();
    let mut losses = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * l * v);
    for (i, t) in targets.iter().enumerate() {
        let (loss, g) = ctc_nll(&values[i * l * v..(i + 1) * l * v], v, t)?;
        losses.push(loss);
        grad.extend(g);
    }
    Ok(ctx.g.row_loss(logits, losses, Tensor::new(&[b, l, v], grad)))
}
