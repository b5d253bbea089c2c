use htr_autograd::Tensor;
use htr_convtext::config::{Config, Preset};
use htr_convtext::mvp::{conditional_pe, fold, unfold, MobileVitBlock, MvpConfig, MvpExtractor, PeVariant};
use htr_convtext::nn::{Ctx, Init, ParamBuilder, ParamKind, ParamStore};
use htr_convtext::HtrError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
}

fn build(cfg: &MvpConfig, seed: u64) -> (MvpExtractor, ParamStore) {
    let mut pb = ParamBuilder::new();
    let ex = MvpExtractor::new(&mut pb, cfg);
    (ex, ParamStore::initialize(pb.into_specs(), seed))
}

fn features(ex: &MvpExtractor, store: &ParamStore, images: &Tensor) -> Tensor {
    let mut ctx = Ctx::eval(store);
    let x = ctx.g.constant(images.clone());
    let f = ex.features(&mut ctx, x).unwrap();
    ctx.g.value(f).clone()
}

fn tokens(ex: &MvpExtractor, store: &ParamStore, images: &Tensor) -> Tensor {
    let mut ctx = Ctx::eval(store);
    let x = ctx.g.constant(images.clone());
    let t = ex.forward(&mut ctx, x).unwrap();
    ctx.g.value(t).clone()
}

fn micro() -> MvpConfig {
    Config::preset(Preset::Micro).mvp
}

/// Feature-map size from the stride schedule alone: stem conv and pool halve
/// twice, then each stage divides by its stride.
fn stride_oracle(cfg: &MvpConfig, h: usize, w: usize) -> (usize, usize) {
    let (mut h, mut w) = (h / 4, w / 4);
    for &(sh, sw) in &cfg.stage_strides {
        h /= sh;
        w /= sw;
    }
    (h, w)
}

#[test]
fn reference_geometry_gives_two_rows_of_sixty_four() {
    let cfg = Config::preset(Preset::Reference).mvp;
    assert_eq!(cfg.total_stride(), (32, 8));
    assert_eq!(stride_oracle(&cfg, 64, 512), (2, 64));
    assert_eq!(cfg.tokens(), 128);
    let (ex, store) = build(&cfg, 1);
    let f = features(&ex, &store, &noise(&[1, 1, 64, 512], 2));
    assert_eq!(f.shape(), [1, 512, 2, 64]);
    assert!(f.all_finite());
    let t = tokens(&ex, &store, &noise(&[1, 1, 64, 512], 2));
    assert_eq!(t.shape(), [1, 128, 512]);
}

#[test]
fn doubling_width_doubles_feature_columns() {
    let cfg = micro();
    let (ex, store) = build(&cfg, 3);
    let narrow = features(&ex, &store, &noise(&[1, 1, 32, 256], 4));
    let wide = features(&ex, &store, &noise(&[1, 1, 32, 512], 4));
    assert_eq!((narrow.shape()[2], narrow.shape()[3]), stride_oracle(&cfg, 32, 256));
    assert_eq!((wide.shape()[2], wide.shape()[3]), stride_oracle(&cfg, 32, 512));
    assert_eq!(wide.shape()[3], 2 * narrow.shape()[3]);
}

#[test]
fn zero_image_with_zero_biases_gives_zero_tokens() {
    for pe in [PeVariant::None, PeVariant::Learned, PeVariant::Relative, PeVariant::Conditional] {
        let mut cfg = micro();
        cfg.pe = pe;
        let (ex, mut store) = build(&cfg, 5);
        // learned grids are the only non-zero additive terms at initialization
        for id in store.ids().collect::<Vec<_>>() {
            if store.spec(id).name.ends_with("pos_grid") {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let t = tokens(&ex, &store, &Tensor::zeros(&[1, 1, 32, 256]));
        assert!(t.data().iter().all(|&v| v == 0.0), "{pe}");
    }
}

#[test]
fn every_positional_variant_keeps_the_token_shape() {
    let images = noise(&[2, 1, 32, 256], 6);
    for pe in [PeVariant::None, PeVariant::Learned, PeVariant::Relative, PeVariant::Conditional] {
        let mut cfg = micro();
        cfg.pe = pe;
        let (ex, store) = build(&cfg, 7);
        let t = tokens(&ex, &store, &images);
        assert_eq!(t.shape(), [2, cfg.tokens(), cfg.token_dim], "{pe}");
        assert!(t.all_finite(), "{pe}");
    }
}

#[test]
fn fold_inverts_unfold() {
    let x = noise(&[2, 3, 4, 6], 8);
    let store = ParamStore::initialize(Vec::new(), 0);
    let mut ctx = Ctx::eval(&store);
    let v = ctx.g.constant(x.clone());
    let t = unfold(&mut ctx, v, (2, 2));
    assert_eq!(ctx.g.shape(t), [8, 6, 3]);
    let back = fold(&mut ctx, t, 2, 3, (4, 6), (2, 2));
    assert_eq!(ctx.g.value(back), &x);
    // each sequence holds one offset inside the patch, cells in row-major order
    let v = ctx.g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    let t = unfold(&mut ctx, v, (2, 2));
    assert_eq!(&ctx.g.value(t).data()[..4], &[0.0, 2.0, 8.0, 10.0]);
    assert_eq!(&ctx.g.value(t).data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
}

fn block(cfg: &MvpConfig, size: (usize, usize), seed: u64) -> (MobileVitBlock, ParamStore) {
    let mut pb = ParamBuilder::new();
    let b = MobileVitBlock::new(&mut pb, "mv", 4, 8, cfg, size);
    (b, ParamStore::initialize(pb.into_specs(), seed))
}

fn run_block(b: &MobileVitBlock, store: &ParamStore, x: &Tensor) -> Result<Tensor, HtrError> {
    let mut ctx = Ctx::eval(store);
    let v = ctx.g.constant(x.clone());
    let y = b.forward(&mut ctx, v)?;
    Ok(ctx.g.value(y).clone())
}

#[test]
fn mobilevit_block_preserves_shape_and_rejects_odd_maps() {
    let mut cfg = micro();
    cfg.mv_heads = 2;
    let (b, store) = block(&cfg, (4, 6), 9);
    let x = noise(&[2, 4, 4, 6], 10);
    assert_eq!(run_block(&b, &store, &x).unwrap().shape(), x.shape());
    let odd = noise(&[1, 4, 3, 6], 11);
    assert!(matches!(run_block(&b, &store, &odd), Err(HtrError::Shape(_))));
}

#[test]
fn zeroed_fusion_path_ignores_the_transformer() {
    let mut cfg = micro();
    cfg.mv_heads = 2;
    let (b, mut store) = block(&cfg, (4, 6), 12);
    store.get_mut("mv.from_tokens.conv.weight").unwrap().data_mut().fill(0.0);
    let x = noise(&[1, 4, 4, 6], 13);
    let base = run_block(&b, &store, &x).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let mut moved = store.clone();
    for id in moved.ids().collect::<Vec<_>>() {
        let name = moved.spec(id).name.clone();
        if name.contains(".layer0.") || name.starts_with("mv.to_tokens") || name.starts_with("mv.cpe") {
            for v in moved.value_mut(id).data_mut() {
                *v += r.random_range(-1.0..1.0);
            }
        }
    }
    assert_eq!(run_block(&b, &moved, &x).unwrap(), base);
    // the output is then the fuse convolution of [x, 0] alone
    let mut zero_input = store.clone();
    let fuse = zero_input.get_mut("mv.fuse.conv.weight").unwrap();
    let per_out = fuse.numel() / fuse.shape()[0];
    let half = per_out / 2;
    for o in 0..fuse.shape()[0] {
        fuse.data_mut()[o * per_out + half..(o + 1) * per_out].fill(0.0);
    }
    assert_eq!(run_block(&b, &zero_input, &x).unwrap(), base);
}

#[test]
fn zero_cpe_kernel_is_identity() {
    let mut pb = ParamBuilder::new();
    let w = pb.add("w".into(), &[3, 1, 3, 3], Init::Zeros, ParamKind::Weight);
    let b = pb.add("b".into(), &[3], Init::Zeros, ParamKind::NoDecay);
    let store = ParamStore::initialize(pb.into_specs(), 0);
    let x = noise(&[2, 3, 4, 5], 15);
    let mut ctx = Ctx::eval(&store);
    let v = ctx.g.constant(x.clone());
    let y = conditional_pe(&mut ctx, v, w, b);
    assert_eq!(ctx.g.value(y), &x);
}

#[test]
fn zeroed_cpe_matches_no_positional_encoding() {
    let images = noise(&[1, 1, 32, 256], 16);
    let mut none = micro();
    none.pe = PeVariant::None;
    let (ex_none, store_none) = build(&none, 17);
    let (ex_cpe, mut store_cpe) = build(&micro(), 17);
    for id in store_cpe.ids().collect::<Vec<_>>() {
        if store_cpe.spec(id).name.contains(".cpe.") {
            store_cpe.value_mut(id).data_mut().fill(0.0);
        }
    }
    assert_eq!(tokens(&ex_none, &store_none, &images), tokens(&ex_cpe, &store_cpe, &images));
}

#[test]
fn cpe_is_sensitive_to_spatial_arrangement() {
    let mut pb = ParamBuilder::new();
    let w = pb.weight("w".into(), &[2, 1, 3, 3], 0.5);
    let b = pb.add("b".into(), &[2], Init::Zeros, ParamKind::NoDecay);
    let store = ParamStore::initialize(pb.into_specs(), 18);
    let x = noise(&[1, 2, 3, 4], 19);
    // reverse the cells of each channel: same multiset, different arrangement
    let mut flipped = x.clone();
    for c in 0..2 {
        flipped.data_mut()[c * 12..(c + 1) * 12].reverse();
    }
    let mut ctx = Ctx::eval(&store);
    let a = ctx.g.constant(x);
    let a = conditional_pe(&mut ctx, a, w, b);
    let f = ctx.g.constant(flipped);
    let f = conditional_pe(&mut ctx, f, w, b);
    let mut sa = ctx.g.value(a).data().to_vec();
    let mut sf = ctx.g.value(f).data().to_vec();
    sa.sort_by(f64::total_cmp);
    sf.sort_by(f64::total_cmp);
    assert_ne!(sa, sf);
}

#[test]
fn tokens_flatten_row_major() {
    let mut cfg = micro();
    cfg.token_dim = *cfg.stage_channels.last().unwrap();
    let (ex, store) = build(&cfg, 20);
    let (c, h, w) = (cfg.token_dim, 2, 5);
    let f = noise(&[1, c, h, w], 21);
    let mut ctx = Ctx::eval(&store);
    let v = ctx.g.constant(f.clone());
    let t = ex.tokens_from(&mut ctx, v);
    let t = ctx.g.value(t).clone();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                assert_eq!(t.data()[(row * w + col) * c + ch], f.data()[(ch * h + row) * w + col]);
            }
        }
    }
}

#[test]
fn permuting_columns_permutes_tokens() {
    let cfg = micro();
    let (ex, store) = build(&cfg, 22);
    let (c, w) = (cfg.stage_channels[3], 6);
    let f = noise(&[1, c, 1, w], 23);
    let perm = [3, 0, 5, 1, 4, 2];
    let g = Tensor::from_fn(&[1, c, 1, w], |i| f.data()[(i / w) * w + perm[i % w]]);
    let mut ctx = Ctx::eval(&store);
    let fv = ctx.g.constant(f);
    let gv = ctx.g.constant(g);
    let tf = ex.tokens_from(&mut ctx, fv);
    let tg = ex.tokens_from(&mut ctx, gv);
    let d = cfg.token_dim;
    let (tf, tg) = (ctx.g.value(tf), ctx.g.value(tg));
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(tg.data()[i * d..(i + 1) * d], tf.data()[p * d..(p + 1) * d]);
    }
}

#[test]
fn no_placement_is_the_plain_residual_backbone() {
    let mut cfg = micro();
    cfg.mv_placement.clear();
    cfg.mv_dims.clear();
    cfg.validate().unwrap();
    let (ex, store) = build(&cfg, 24);
    assert!(store.specs().iter().all(|s| !s.name.contains("mobilevit")));
    let t = tokens(&ex, &store, &noise(&[1, 1, 32, 256], 25));
    assert_eq!(t.shape(), [1, 64, cfg.token_dim]);
}

#[test]
fn geometry_mismatch_is_a_shape_error() {
    let (ex, store) = build(&micro(), 26);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.g.constant(noise(&[1, 1, 32, 128], 27));
    assert!(matches!(ex.forward(&mut ctx, x), Err(HtrError::Shape(_))));
    let x = ctx.g.constant(noise(&[1, 3, 32, 256], 27));
    assert!(matches!(ex.forward(&mut ctx, x), Err(HtrError::Shape(_))));
}

#[test]
fn learned_grid_is_tied_to_its_geometry() {
    let mut cfg = micro();
    cfg.pe = PeVariant::Learned;
    let (ex, store) = build(&cfg, 28);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.g.constant(noise(&[1, 1, 32, 512], 29));
    assert!(matches!(ex.features(&mut ctx, x), Err(HtrError::Shape(_))));
}

#[test]
fn outputs_are_finite_for_unit_range_inputs() {
    let (ex, store) = build(&micro(), 30);
    for seed in 0..4 {
        let images = noise(&[2, 1, 32, 256], 100 + seed);
        assert!(tokens(&ex, &store, &images).all_finite());
    }
}
