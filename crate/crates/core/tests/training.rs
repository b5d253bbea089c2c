use htr_autograd::Tensor;
use htr_convtext::checkpoint::{self, Checkpoint, Weights};
use htr_convtext::config::Config;
use htr_convtext::ctc::{greedy_decode_batch, CtcHead};
use htr_convtext::data::{make_batch, synth_corpus, Sample};
use htr_convtext::inspect::{attention_csv, attention_heatmap, attention_rows, inspect_attention, write_attention};
use htr_convtext::metrics::cer;
use htr_convtext::model::{total_loss, HtrModel, LossWeights};
use htr_convtext::nn::{Ctx, ParamBuilder, ParamKind, ParamStore};
use htr_convtext::train::{adamw_update, evaluate, fit, lr_at, train_step, TrainState};
use htr_convtext::vocab::BLANK_ID;
use htr_convtext::{CharVocab, CheckpointErrorKind, HtrError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Config {
    Config::from_toml(
        "preset = \"micro\"\ndim = 16\nheads = 2\nmv_dims = [8, 8]\ntcm_embed = 8\ntcm_heads = 2\nbatch_train = 4\nbatch_val = 4\n",
    )
    .unwrap()
}

fn vocab() -> CharVocab {
    CharVocab::from_symbols("abcdef").unwrap()
}

fn corpus(n: usize, seed: u64, cfg: &Config) -> Vec<Sample> {
    synth_corpus(&vocab(), n, seed, cfg.mvp.geometry).unwrap()
}

fn model(cfg: &Config, with_tcm: bool, seed: u64) -> (HtrModel, ParamStore) {
    let (m, specs) = HtrModel::build(&cfg.model(), vocab().size(), with_tcm).unwrap();
    (m, ParamStore::initialize(specs, seed))
}

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn head(store_seed: u64) -> (CtcHead, ParamStore) {
    let mut pb = ParamBuilder::new();
    let h = CtcHead::new(&mut pb, 6, 4);
    (h, ParamStore::initialize(pb.into_specs(), store_seed))
}

fn project(h: &CtcHead, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut ctx = Ctx::eval(store);
    let v = ctx.g.constant(x.clone());
    let y = h.forward(&mut ctx, v);
    ctx.g.value(y).clone()
}

#[test]
fn head_with_zero_weights_emits_its_bias() {
    let (h, mut store) = head(1);
    store.get_mut("ctc_head.weight").unwrap().data_mut().fill(0.0);
    store.get_mut("ctc_head.bias").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
    let y = project(&h, &store, &noise(&[2, 128, 6], 2));
    assert_eq!(y.shape(), [2, 128, 4]);
    for row in y.data().chunks(4) {
        assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn head_is_affine() {
    let (h, mut store) = head(3);
    store.get_mut("ctc_head.bias").unwrap().data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
    let (x, y) = (noise(&[1, 5, 6], 4), noise(&[1, 5, 6], 5));
    let sum = Tensor::from_fn(&[1, 5, 6], |i| x.data()[i] + y.data()[i]);
    let (px, py, ps) = (project(&h, &store, &x), project(&h, &store, &y), project(&h, &store, &sum));
    for i in 0..ps.numel() {
        let bias = [0.1, 0.2, 0.3, 0.4][i % 4];
        assert!((ps.data()[i] - (px.data()[i] + py.data()[i] - bias)).abs() < 1e-12);
    }
}

#[test]
fn total_loss_is_linear_in_each_part() {
    let w = LossWeights { ctc: 0.7, tcm: 0.3 };
    let f = |c, t| total_loss(c, t, w).unwrap();
    assert!((f(2.0, 3.0) + f(1.0, 5.0) - f(3.0, 8.0)).abs() < 1e-12);
    assert!((f(4.0, 0.0) - 2.0 * f(2.0, 0.0)).abs() < 1e-12);
    assert_eq!(total_loss(2.0, 3.0, LossWeights { ctc: 1.0, tcm: 0.0 }).unwrap(), 2.0);
    assert!(matches!(total_loss(f64::NAN, 1.0, w), Err(HtrError::Numeric(_))));
}

#[test]
fn schedule_warms_up_linearly_then_decays() {
    let t = tiny().train;
    for s in 0..=t.warmup_iters {
        assert!((lr_at(s, &t) - t.max_lr * s as f64 / t.warmup_iters as f64).abs() < 1e-15);
    }
    let mid = t.warmup_iters + (t.total_iters - t.warmup_iters) / 2;
    assert!((lr_at(mid, &t) - t.max_lr / 2.0).abs() < 1e-12);
    let tail: Vec<f64> = (t.warmup_iters..=t.total_iters).map(|s| lr_at(s, &t)).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn weight_decay_skips_norms_biases_and_buffers() {
    let mut pb = ParamBuilder::new();
    let w = pb.weight("w".into(), &[2, 2], 1.0);
    let b = pb.no_decay("b".into(), &[2], htr_convtext::nn::Init::Const(1.0));
    let r = pb.add("r".into(), &[2], htr_convtext::nn::Init::Const(1.0), ParamKind::Buffer);
    let mut state = TrainState::new(ParamStore::initialize(pb.into_specs(), 6), 0);
    let before = state.params.clone();
    let zeros: Vec<Option<Tensor>> = state.params.values().iter().map(|t| Some(Tensor::zeros(t.shape()))).collect();
    adamw_update(&mut state, &zeros, 0.1, 0.5);
    for (a, e) in state.params.value(w).data().iter().zip(before.value(w).data()) {
        assert!((a - e * 0.95).abs() < 1e-15);
    }
    assert_eq!(state.params.value(b), before.value(b));
    assert_eq!(state.params.value(r), before.value(r));
}

fn run(cfg: &Config, seed: u64, steps: usize) -> TrainState {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let data = corpus(8, 7, &cfg);
    let (m, store) = model(&cfg, true, seed);
    fit(&m, TrainState::new(store, seed), &data, &[], &vocab(), &cfg.train, |s, _| s.step < steps)
        .unwrap()
        .state
}

#[test]
fn training_replays_bit_identically() {
    let mut cfg = tiny();
    cfg.train.augment = true;
    cfg.encoder.block.droppath_rate = 0.2;
    let a = run(&cfg, 3, 4);
    let b = run(&cfg, 3, 4);
    assert_eq!(a.step, 4);
    assert_eq!(a, b);
    assert_ne!(a.params, run(&cfg, 4, 4).params);
}

#[test]
fn zero_context_weight_leaves_context_parameters_alone() {
    let mut cfg = tiny();
    cfg.train.loss = LossWeights { ctc: 1.0, tcm: 0.0 };
    let data = corpus(4, 8, &cfg);
    let (m, store) = model(&cfg, true, 9);
    let mut state = TrainState::new(store, 9);
    let refs: Vec<&Sample> = data.iter().collect();
    let batch = make_batch(&refs, &vocab(), None).unwrap();
    let before = state.params.clone();
    let stats = train_step(&m, &mut state, &batch, &[0, 1, 2, 3], &cfg.train).unwrap();
    assert!(stats.tcm > 0.0);
    for spec in state.params.specs() {
        let id = state.params.find(&spec.name).unwrap();
        if spec.train_only {
            // only the decoupled decay moves them
            if spec.kind != ParamKind::Weight {
                assert_eq!(state.params.value(id), before.value(id), "{}", spec.name);
            }
            assert!(state.adam_m[id.index()].data().iter().all(|&v| v == 0.0));
        }
    }
}

fn eval_loss(m: &HtrModel, params: &ParamStore, batch: &htr_convtext::data::Batch, w: LossWeights) -> f64 {
    let mut ctx = Ctx::eval(params);
    let out = m.loss(&mut ctx, batch, &[0, 1, 2, 3], w).unwrap();
    ctx.g.value(out.total).item()
}

#[test]
fn loss_on_a_fixed_batch_decreases_for_most_seeds() {
    let cfg = tiny();
    let data = corpus(4, 10, &cfg);
    let refs: Vec<&Sample> = data.iter().collect();
    let batch = make_batch(&refs, &vocab(), None).unwrap();
    let mut decreased = 0;
    for seed in 0..20 {
        let (m, store) = model(&cfg, true, seed);
        let mut state = TrainState::new(store, seed);
        let start = eval_loss(&m, &state.params, &batch, cfg.train.loss);
        for _ in 0..20 {
            train_step(&m, &mut state, &batch, &[0, 1, 2, 3], &cfg.train).unwrap();
        }
        if eval_loss(&m, &state.params, &batch, cfg.train.loss) < start {
            decreased += 1;
        }
    }
    assert!(decreased >= 18, "loss decreased for {decreased} of 20 seeds");
}

#[test]
fn non_finite_loss_names_the_samples() {
    let cfg = tiny();
    let data = corpus(2, 11, &cfg);
    let (m, mut store) = model(&cfg, true, 12);
    store.get_mut("ctc_head.bias").unwrap().data_mut()[0] = f64::NAN;
    let refs: Vec<&Sample> = data.iter().collect();
    let batch = make_batch(&refs, &vocab(), None).unwrap();
    let mut state = TrainState::new(store, 0);
    match train_step(&m, &mut state, &batch, &[41, 42], &cfg.train) {
        Err(e @ HtrError::Numeric(_)) => {
            assert!(e.to_string().contains("41") && e.to_string().contains("42"));
            assert_eq!(e.exit_code(), 4);
        }
        other => panic!("expected a numeric error, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn one_hot_alignment_logits_decode_perfectly() {
    let v = vocab();
    let refs = ["abc", "aab", "f"];
    let frames = 8;
    // alignments with blanks between repeats and trailing blanks
    let paths: Vec<Vec<usize>> = refs
        .iter()
        .map(|r| {
            let ids = v.encode(r).unwrap();
            let mut path = Vec::new();
            for (i, &c) in ids.iter().enumerate() {
                if i > 0 && ids[i - 1] == c {
                    path.push(BLANK_ID);
                }
                path.extend([c, c]);
            }
            path.resize(frames, BLANK_ID);
            path
        })
        .collect();
    let classes = v.size();
    let logits = Tensor::from_fn(&[3, frames, classes], |i| {
        let (b, t, c) = (i / (frames * classes), (i / classes) % frames, i % classes);
        if paths[b][t] == c { 5.0 } else { 0.0 }
    });
    let hyps: Vec<String> = greedy_decode_batch(&logits).iter().map(|ids| v.decode(ids).unwrap()).collect();
    assert_eq!(cer(&refs, &hyps.iter().map(String::as_str).collect::<Vec<_>>()).unwrap(), 0.0);
}

#[test]
fn blank_only_model_has_unit_cer() {
    let cfg = tiny();
    let data = corpus(3, 13, &cfg);
    let (m, mut store) = model(&cfg, false, 14);
    store.get_mut("ctc_head.weight").unwrap().data_mut().fill(0.0);
    let bias = store.get_mut("ctc_head.bias").unwrap();
    bias.data_mut().fill(0.0);
    bias.data_mut()[BLANK_ID] = 1.0;
    let e = evaluate(&m, &store, &data, &vocab(), 2).unwrap();
    assert_eq!(e.cer, 1.0);
    assert_eq!(e.wer, 1.0);
    assert!(e.hypotheses.iter().all(String::is_empty));
    assert!(matches!(evaluate(&m, &store, &[], &vocab(), 2), Err(HtrError::Data(_))));
}

#[test]
fn validation_keeps_the_best_parameters() {
    let mut cfg = tiny();
    cfg.train.eval_every = 2;
    let data = corpus(6, 15, &cfg);
    let (m, store) = model(&cfg, true, 16);
    let result = fit(&m, TrainState::new(store, 16), &data[..4], &data[4..], &vocab(), &cfg.train, |s, _| s.step < 4).unwrap();
    let (params, best) = result.best.expect("validation ran");
    assert!((0.0..=f64::MAX).contains(&best));
    let e = evaluate(&m, &params, &data[4..], &vocab(), 4).unwrap();
    assert_eq!(e.cer, best);
}

fn trained_checkpoint() -> Checkpoint {
    let cfg = tiny();
    Checkpoint {
        state: run(&cfg, 17, 2),
        config: cfg,
        vocab: vocab(),
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let ck = trained_checkpoint();
    let bytes = checkpoint::encode(&ck);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(checkpoint::encode(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    checkpoint::save(&ck, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), ck);
}

fn checkpoint_kind(bytes: &[u8]) -> CheckpointErrorKind {
    match checkpoint::decode(bytes) {
        Err(HtrError::Checkpoint { kind, .. }) => kind,
        other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn damaged_checkpoints_report_distinct_errors() {
    let bytes = checkpoint::encode(&trained_checkpoint());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert_eq!(checkpoint_kind(&bad_magic), CheckpointErrorKind::Version);
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert_eq!(checkpoint_kind(&bad_version), CheckpointErrorKind::Version);
    assert_eq!(checkpoint_kind(&bytes[..4]), CheckpointErrorKind::Version);
    for cut in [12, bytes.len() / 2, bytes.len() - 1] {
        assert_eq!(checkpoint_kind(&bytes[..cut]), CheckpointErrorKind::Truncated);
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert_eq!(checkpoint_kind(&trailing), CheckpointErrorKind::Malformed);
}

#[test]
fn decode_loading_skips_training_only_parameters() {
    let ck = trained_checkpoint();
    let (plain, specs) = HtrModel::build(&ck.config.model(), ck.vocab.size(), false).unwrap();
    let raw = checkpoint::params_for(&ck, &specs, Weights::Raw).unwrap();
    let ema = checkpoint::params_for(&ck, &specs, Weights::Ema).unwrap();
    assert!(raw.len() < ck.state.params.len());
    assert!(raw.specs().iter().all(|s| !s.train_only));
    assert_ne!(raw, ema);
    // decoding is identical with or without the training-only branch present
    let (full, _) = HtrModel::build(&ck.config.model(), ck.vocab.size(), true).unwrap();
    let images = noise(&[2, 1, 32, 256], 18);
    let a = plain.logits(&raw, &images).unwrap();
    let b = full.logits(&ck.state.params, &images).unwrap();
    assert_eq!(a, b);

    // a checkpoint written without the branch loads the same way
    let mut stripped = ck.clone();
    let keep: Vec<usize> = (0..ck.state.params.len()).filter(|&i| !ck.state.params.specs()[i].train_only).collect();
    let pick = |v: &[Tensor]| keep.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    stripped.state.params = ParamStore::from_parts(
        keep.iter().map(|&i| ck.state.params.specs()[i].clone()).collect(),
        pick(ck.state.params.values()),
    );
    stripped.state.adam_m = pick(&ck.state.adam_m);
    stripped.state.adam_v = pick(&ck.state.adam_v);
    stripped.state.ema = pick(&ck.state.ema);
    let decoded = checkpoint::decode(&checkpoint::encode(&stripped)).unwrap();
    assert_eq!(checkpoint::params_for(&decoded, &specs, Weights::Raw).unwrap(), raw);

    // a model that needs the missing branch cannot load it
    let (_, full_specs) = HtrModel::build(&ck.config.model(), ck.vocab.size(), true).unwrap();
    assert!(matches!(
        checkpoint::params_for(&decoded, &full_specs, Weights::Raw),
        Err(HtrError::Checkpoint { kind: CheckpointErrorKind::Shape, .. })
    ));
}

#[test]
fn shape_mismatch_is_reported() {
    let ck = trained_checkpoint();
    let mut other = ck.config.clone();
    other.encoder.block.ffn_ratio = 3.0;
    let (_, specs) = HtrModel::build(&other.model(), ck.vocab.size(), false).unwrap();
    let err = checkpoint::params_for(&ck, &specs, Weights::Raw).unwrap_err();
    assert!(matches!(err, HtrError::Checkpoint { kind: CheckpointErrorKind::Shape, .. }));
}

#[test]
fn attention_inspection_averages_heads() {
    let cfg = tiny();
    let (m, store) = model(&cfg, false, 19);
    let image = noise(&[1, 1, 32, 256], 20).reshaped(&[1, 1, 32, 256]);
    let per_head = attention_rows(&m, &store, &image, 5, 2).unwrap();
    assert_eq!(per_head.len(), cfg.encoder.block.heads);
    let row = inspect_attention(&m, &store, &image, 5, 2).unwrap();
    // layer 2 sits at half resolution
    assert_eq!(row.len(), cfg.mvp.tokens() / 2);
    for (j, w) in row.iter().enumerate() {
        let mean = per_head.iter().map(|h| h[j]).sum::<f64>() / per_head.len() as f64;
        assert!((w - mean).abs() < 1e-15);
    }
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(inspect_attention(&m, &store, &image, 64, 0).is_err());
    assert!(inspect_attention(&m, &store, &image, 0, 4).is_err());

    let csv = attention_csv(&row);
    assert_eq!(csv.lines().count(), row.len() + 1);
    assert!(csv.starts_with("position,weight"));
    let heat = attention_heatmap(&row).unwrap();
    assert_eq!((heat.height(), heat.width()), (1, row.len()));
    let dir = tempfile::tempdir().unwrap();
    write_attention(&row, &dir.path().join("attn")).unwrap();
    assert!(dir.path().join("attn.csv").exists() && dir.path().join("attn.png").exists());
}

#[test]
fn single_token_attention_is_one() {
    let mut cfg = tiny();
    cfg.mvp.geometry = htr_convtext::data::Geometry { height: 32, width: 8 };
    cfg.mvp.stage_strides = vec![(1, 1), (2, 2), (2, 1), (1, 1)];
    cfg.mvp.mv_placement = vec![];
    cfg.mvp.mv_dims = vec![];
    cfg.mvp.geometry.height = 16;
    cfg.encoder.layout = (1, 0, 0);
    cfg.encoder.downsample = false;
    assert_eq!(cfg.mvp.tokens(), 1);
    let (m, store) = model(&cfg, false, 21);
    let row = inspect_attention(&m, &store, &noise(&[1, 1, 16, 8], 22), 0, 0).unwrap();
    assert_eq!(row, vec![1.0]);
}
