use htr_autograd::Tensor;
use htr_convtext::config::{Config, Preset};
use htr_convtext::data::Batch;
use htr_convtext::model::{HtrModel, LossWeights};
use htr_convtext::nn::{Ctx, ParamBuilder, ParamStore};
use htr_convtext::tcm::{build_windows, ContextWindows, Fusion, Tcm, TcmConfig, TcmOutput};
use htr_convtext::vocab::PAD_ID;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const CLASSES: usize = 6;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn config() -> TcmConfig {
    TcmConfig {
        window: 3,
        embed_dim: 4,
        window_kernel: 3,
        heads: 2,
        fusion: Fusion::QueryProduct,
    }
}

fn module(seed: u64) -> (Tcm, ParamStore) {
    let mut pb = ParamBuilder::new();
    let t = Tcm::new(&mut pb, &config(), DIM, CLASSES);
    (t, ParamStore::initialize(pb.into_specs(), seed))
}

fn label_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(2usize..CLASSES, 0..10)
}

proptest! {
    #[test]
    fn windows_match_direct_slices(labels in label_strategy(), k in 1usize..6, pad in 0usize..4) {
        let len = labels.len();
        let mut padded = labels.clone();
        padded.resize(len + pad, PAD_ID);
        let w = build_windows(&padded, len, k);
        prop_assert_eq!(w.left.len(), len + pad);
        for i in 0..len + pad {
            let slice = |from: isize| -> Vec<usize> {
                (from..from + k as isize)
                    .map(|j| if j >= 0 && (j as usize) < len { labels[j as usize] } else { PAD_ID })
                    .collect()
            };
            prop_assert_eq!(&w.left[i], &slice(i as isize - k as isize));
            prop_assert_eq!(&w.right[i], &slice(i as isize + 1));
            prop_assert_eq!(w.weights[i], if i < len { 1.0 } else { 0.0 });
        }
    }
}

fn queries(t: &Tcm, store: &ParamStore, windows: &[Vec<usize>], left: bool) -> Tensor {
    let mut ctx = Ctx::eval(store);
    let bias = if left { t.left_bias } else { t.right_bias };
    let q = t.context(&mut ctx, &[windows], bias);
    ctx.g.value(q).clone()
}

#[test]
fn shared_bias_and_windows_give_identical_queries() {
    let (t, mut store) = module(1);
    let windows = build_windows(&[2, 3, 4, 5], 4, 3).left;
    let left = store.value(t.left_bias).clone();
    *store.value_mut(t.right_bias) = left;
    assert_eq!(queries(&t, &store, &windows, true), queries(&t, &store, &windows, false));
}

#[test]
fn directional_biases_separate_queries() {
    let (t, store) = module(2);
    assert_ne!(store.value(t.left_bias), store.value(t.right_bias));
    let windows = build_windows(&[2, 3, 4, 5], 4, 3).left;
    assert_ne!(queries(&t, &store, &windows, true), queries(&t, &store, &windows, false));
}

#[test]
fn queries_are_layer_normalized() {
    let (t, store) = module(3);
    let windows = build_windows(&[2, 3, 4, 5, 2], 5, 3).right;
    let q = queries(&t, &store, &windows, false);
    for row in q.data().chunks(DIM) {
        let mean = row.iter().sum::<f64>() / DIM as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / DIM as f64;
        assert!(mean.abs() < 1e-12);
        // the variance is v / (v + eps) for pre-norm variance v
        assert!(var <= 1.0 && var > 0.99, "{var}");
    }
}

#[test]
fn single_visual_token_is_attended_everywhere() {
    let (t, store) = module(4);
    let mut ctx = Ctx::eval(&store);
    let query = ctx.g.constant(noise(&[1, 5, DIM], 5));
    let visual = ctx.g.constant(noise(&[1, 1, DIM], 6));
    let (a, p) = t.cross.forward(&mut ctx, query, visual, None);
    assert!(ctx.g.value(p).data().iter().all(|&x| x == 1.0));
    let a = ctx.g.value(a).data().to_vec();
    for row in a.chunks(DIM) {
        assert_eq!(row, &a[..DIM]);
    }
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let (t, store) = module(7);
    let mut ctx = Ctx::eval(&store);
    let query = ctx.g.constant(noise(&[2, 4, DIM], 8));
    let visual = ctx.g.constant(noise(&[2, 9, DIM], 9));
    let (_, p) = t.cross.forward(&mut ctx, query, visual, None);
    assert_eq!(ctx.g.shape(p), [4, 4, 9]);
    for row in ctx.g.value(p).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn both_directions_share_one_classifier() {
    let (t, store) = module(10);
    let names: Vec<&str> = store.specs().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("tcm.classifier.")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.starts_with("tcm.transform.")).count(), 1);
    let windows = [build_windows(&[2, 3, 4], 3, 3)];
    for left in [true, false] {
        let mut ctx = Ctx::new(&store, false, true, ChaCha8Rng::seed_from_u64(0));
        let visual = ctx.g.constant(noise(&[1, 6, DIM], 11));
        let out = t.forward(&mut ctx, &windows, visual);
        let side = if left { out.left } else { out.right };
        let w = ctx.g.constant(noise(&[1, 3, CLASSES], 12));
        let prod = ctx.g.mul(side, w);
        let loss = ctx.g.sum_all(prod);
        let grads = ctx.g.backward(loss);
        let grads = ctx.param_grads(&grads);
        let touched = |id: htr_convtext::nn::ParamId| grads[id.index()].as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        assert!(touched(t.classifier.w) && touched(t.transform.w));
        assert_eq!(touched(t.left_bias), left);
        assert_eq!(touched(t.right_bias), !left);
    }
}

fn loss_of(t: &Tcm, store: &ParamStore, left: Tensor, right: Tensor, labels: &[Vec<usize>], lens: &[usize]) -> f64 {
    let windows: Vec<ContextWindows> = labels.iter().zip(lens).map(|(l, &n)| build_windows(l, n, 3)).collect();
    let mut ctx = Ctx::eval(store);
    let out = TcmOutput {
        left: ctx.g.constant(left),
        right: ctx.g.constant(right),
    };
    let l = t.loss(&mut ctx, &out, labels, &windows);
    ctx.g.value(l).item()
}

#[test]
fn uniform_logits_cost_log_classes() {
    let (t, store) = module(13);
    let labels = vec![vec![2, 3, 4, PAD_ID], vec![5, 5, 2, 3]];
    let zeros = Tensor::zeros(&[2, 4, CLASSES]);
    let l = loss_of(&t, &store, zeros.clone(), zeros, &labels, &[3, 4]);
    assert!((l - (CLASSES as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let (t, store) = module(14);
    let labels = vec![vec![2, 3, 4, PAD_ID]];
    let onehot = Tensor::from_fn(&[1, 4, CLASSES], |i| if labels[0][i / CLASSES] == i % CLASSES { 1000.0 } else { 0.0 });
    assert_eq!(loss_of(&t, &store, onehot.clone(), onehot, &labels, &[3]), 0.0);
}

fn full_loss(t: &Tcm, store: &ParamStore, labels: &[Vec<usize>], extra: usize, visual: &Tensor) -> f64 {
    let width = labels.iter().map(Vec::len).max().unwrap() + extra;
    let rows: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            let mut r = l.clone();
            r.resize(width, PAD_ID);
            r
        })
        .collect();
    let windows: Vec<ContextWindows> = rows.iter().zip(labels).map(|(r, l)| build_windows(r, l.len(), 3)).collect();
    let mut ctx = Ctx::eval(store);
    let v = ctx.g.constant(visual.clone());
    let out = t.forward(&mut ctx, &windows, v);
    let l = t.loss(&mut ctx, &out, &rows, &windows);
    ctx.g.value(l).item()
}

#[test]
fn extra_padding_is_bit_identical() {
    let (t, store) = module(15);
    let labels = vec![vec![2, 3, 4, 5, 2], vec![3, 3]];
    let visual = noise(&[2, 7, DIM], 16);
    let base = full_loss(&t, &store, &labels, 0, &visual);
    for extra in [1, 5] {
        assert_eq!(full_loss(&t, &store, &labels, extra, &visual).to_bits(), base.to_bits());
    }
}

#[test]
fn duplicating_a_sample_keeps_the_batch_mean() {
    let (t, store) = module(17);
    let one = vec![vec![2, 3, 4, 5]];
    let visual = noise(&[1, 7, DIM], 18);
    let twice = Tensor::from_fn(&[2, 7, DIM], |i| visual.data()[i % (7 * DIM)]);
    let a = full_loss(&t, &store, &one, 0, &visual);
    let b = full_loss(&t, &store, &[one[0].clone(), one[0].clone()], 0, &twice);
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
}

#[test]
fn empty_sample_contributes_zero() {
    let (t, store) = module(19);
    let visual = noise(&[2, 7, DIM], 20);
    let only = full_loss(&t, &store, &[vec![2, 3, 4]], 0, &noise(&[1, 7, DIM], 20));
    let with_empty = full_loss(&t, &store, &[vec![2, 3, 4], vec![]], 0, &visual);
    assert!((with_empty - only / 2.0).abs() < 1e-12);
}

#[test]
fn context_gradients_reach_the_encoder() {
    let mut cfg = Config::preset(Preset::Micro);
    cfg.mvp.geometry = htr_convtext::data::Geometry { height: 32, width: 64 };
    let (model, specs) = HtrModel::build(&cfg.model(), 10, true).unwrap();
    let store = ParamStore::initialize(specs, 21);
    let batch = Batch {
        images: noise(&[1, 1, 32, 64], 22),
        labels: vec![vec![2, 3, 4]],
        lengths: vec![3],
    };
    let mut ctx = Ctx::new(&store, true, true, ChaCha8Rng::seed_from_u64(0));
    let out = model.loss(&mut ctx, &batch, &[0], LossWeights { ctc: 0.0, tcm: 1.0 }).unwrap();
    let grads = ctx.g.backward(out.total);
    let grads = ctx.param_grads(&grads);
    let reached = |prefix: &str| {
        store
            .specs()
            .iter()
            .zip(&grads)
            .filter(|(s, _)| s.name.starts_with(prefix))
            .any(|(_, g)| g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
    };
    assert!(reached("encoder."));
    assert!(reached("mvp."));
    assert!(!reached("ctc_head"));
}

#[test]
fn attended_only_fusion_skips_the_query_product() {
    let cfg = TcmConfig {
        fusion: Fusion::AttendedOnly,
        ..config()
    };
    let mut pb = ParamBuilder::new();
    let t = Tcm::new(&mut pb, &cfg, DIM, CLASSES);
    let store = ParamStore::initialize(pb.into_specs(), 23);
    // with one visual token every position attends to it alone, so the
    // logits no longer depend on the query
    let mut ctx = Ctx::eval(&store);
    let visual = ctx.g.constant(noise(&[1, 1, DIM], 24));
    let q1 = ctx.g.constant(noise(&[1, 2, DIM], 25));
    let q2 = ctx.g.constant(noise(&[1, 2, DIM], 26));
    let a = t.classify(&mut ctx, q1, visual);
    let b = t.classify(&mut ctx, q2, visual);
    assert_eq!(ctx.g.value(a), ctx.g.value(b));
    assert!(cfg.validate(DIM).is_ok());
    assert!(TcmConfig { window: 0, ..config() }.validate(DIM).is_err());
    assert!(TcmConfig { window_kernel: 2, ..config() }.validate(DIM).is_err());
}
