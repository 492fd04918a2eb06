use super::*;
use crate::layers::{Block, BlockConfig, LayerKind, QuerySource};
use crate::tensor::{grad_check_projected, Tape, Tensor};

fn layer(d: usize, cfg: ResonaConfig, seed: u64) -> ResonaLayer<f64> {
    let mut r = ResonaLayer::init("r", d, d, cfg, &Prng::new(seed)).unwrap();
    let mut rng = Prng::new(seed + 100);
    for p in [&mut r.w_q, &mut r.w_k, &mut r.w_v, &mut r.w_out] {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::randn(shape, 0.4, &mut rng).unwrap().with_grad();
    }
    r
}

#[test]
fn mix_endpoints_and_arithmetic() {
    let tape = Tape::<f64>::inference();
    let b = Binder::new(&tape);
    let ym = tape.constant(Tensor::new(vec![1, 2], vec![4.0, 0.0]).unwrap());
    let yr = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap());
    let mut r = layer(2, ResonaConfig::desk(2, 1, 1), 1);
    for (alpha, want) in [(1.0, [4.0, 0.0]), (0.0, [0.0, 4.0]), (0.25, [1.0, 3.0])] {
        r.cfg.alpha = alpha;
        assert_eq!(r.mix(&b, &ym, &yr, &ym).unwrap().data(), &want);
    }
    r.cfg.alpha = 1.5;
    assert!(matches!(r.mix(&b, &ym, &yr, &ym), Err(Error::Config(_))));
    assert!(ResonaConfig { alpha: -0.1, ..ResonaConfig::desk(2, 1, 1) }.validate().is_err());
}

#[test]
fn gated_alpha_stays_in_unit_interval() {
    let cfg = ResonaConfig {
        alpha_mode: AlphaMode::Gated,
        ..ResonaConfig::desk(4, 2, 1)
    };
    let r = layer(4, cfg, 2);
    let tape = Tape::<f64>::inference();
    let b = Binder::new(&tape);
    let mut rng = Prng::new(3);
    let ym = tape.constant(Tensor::full([3, 4], 1.0).unwrap());
    let yr = tape.constant(Tensor::zeros([3, 4]).unwrap());
    let xn = tape.constant(Tensor::randn([3, 4], 5.0, &mut rng).unwrap());
    let y = r.mix(&b, &ym, &yr, &xn).unwrap();
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn empty_retrieval_is_silent() {
    let r = layer(4, ResonaConfig::desk(4, 4, 1), 4);
    let tape = Tape::<f64>::inference();
    let b = Binder::new(&tape);
    let x = tape.constant(Tensor::randn([3, 4], 1.0, &mut Prng::new(5)).unwrap());
    let (yr, masks) = r.integrate(&b, &x, &x, Seq::single(3)).unwrap();
    assert!(masks[0].sets.iter().all(|s| s.is_empty()));
    assert!(yr.data().iter().all(|v| *v == 0.0));
    let ym = tape.constant(Tensor::full([3, 4], 2.0).unwrap());
    assert!(r.mix(&b, &ym, &yr, &x).unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn masks_have_structure_on_real_encodings() {
    let r = layer(6, ResonaConfig::desk(6, 3, 2), 6);
    let x = Tensor::<f64>::randn([40, 6], 1.0, &mut Prng::new(7)).unwrap();
    let masks = r.retrieve(x.data(), x.data(), Seq::new(2, 20)).unwrap();
    for m in &masks {
        m.validate(2).unwrap();
    }
}

fn augmented_block(d: usize, chunk: usize, k: usize, source: QuerySource, seed: u64) -> Block<f64> {
    let cfg = BlockConfig {
        kind: LayerKind::GatedRecurrence,
        d_model: d,
        state_width: d,
        mlp_expansion: 2,
        resona: Some(ResonaConfig::desk(d, chunk, k)),
        query_source: source,
    };
    let mut block = Block::init("b", cfg, &Prng::new(seed)).unwrap();
    let rng = Prng::new(seed + 1);
    block.visit_mut(&mut |p| {
        if p.name.ends_with(".b_a") || p.name.contains(".enc_") {
            return;
        }
        let mut r = rng.derive(&p.name);
        let base = if p.name.ends_with(".gain") { 1.0 } else { 0.0 };
        let shape = p.value.shape().to_vec();
        let v: Vec<f64> = Tensor::<f64>::randn(shape.clone(), 0.3, &mut r).unwrap().data().iter().map(|v| v + base).collect();
        p.value = Tensor::new(shape, v).unwrap().with_grad();
    });
    block
}

#[test]
fn block_gradients_end_to_end() {
    for (source, seed) in [(QuerySource::Embeddings, 30u64), (QuerySource::Hidden, 31)] {
        let block = augmented_block(8, 2, 1, source, seed);
        let x = Tensor::randn([12, 8], 1.0, &mut Prng::new(seed + 2)).unwrap();
        let base = {
            let tape = Tape::inference();
            let b = Binder::new(&tape);
            let xv = tape.constant(x.clone());
            block.forward(&b, &xv, &xv, Seq::single(12), None).unwrap().masks.unwrap()
        };
        assert!(base[0].sets.iter().any(|s| !s.is_empty()));
        let err = grad_check_projected(
            |tape, xv| {
                let b = Binder::new(tape);
                Ok(block.forward(&b, xv, xv, Seq::single(12), None)?.y)
            },
            &x,
            1e-5,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "{source:?}: {err}");
    }
}

#[test]
fn no_chunks_reduces_to_scaled_recurrent_output() {
    let block = augmented_block(4, 8, 1, QuerySource::Embeddings, 40);
    let x = Tensor::randn([5, 4], 1.0, &mut Prng::new(41)).unwrap();
    let tape = Tape::inference();
    let b = Binder::new(&tape);
    let xv = tape.constant(x.clone());
    let xn = block.norm1.forward(&b, &xv).unwrap();
    let crate::layers::Mixer::Gated(m) = &block.mixer else { unreachable!() };
    let (ym, _, _) = m.forward(&b, &xn, Seq::single(5), None).unwrap();
    let y = tape.add(&xv, &tape.scale(&ym, 0.5)).unwrap();
    let want = tape.add(&y, &block.mlp.forward(&b, &block.norm2.forward(&b, &y).unwrap()).unwrap()).unwrap();
    let got = block.forward(&b, &xv, &xv, Seq::single(5), None).unwrap().y;
    assert!(got.value().max_abs_diff(want.value()) < 1e-15);
}

#[test]
fn cache_grows_on_chunk_boundaries() {
    let r = layer(4, ResonaConfig::desk(4, 4, 1), 50);
    let mut cache = ChunkCache::new(4);
    let mut rng = Prng::new(51);
    let z = vec![0.0; 4];
    let mut counts = Vec::new();
    for _ in 0..12 {
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        r.step(&mut cache, &x, &x, &x, &z).unwrap();
        counts.push(cache.chunk_count());
    }
    // After the 8-token prefill both chunks are cached; positions 8..11
    // leave the cache unchanged until the token at 11 completes chunk 2.
    assert_eq!(counts[7], 2);
    assert_eq!(&counts[8..11], &[2, 2, 2]);
    assert_eq!(counts[11], 3);
    assert_eq!(cache.len(), 12);
}

#[test]
fn streaming_reproduces_batch_masks() {
    let r = layer(6, ResonaConfig::desk(6, 3, 2), 60);
    let x = Tensor::<f64>::randn([20, 6], 1.0, &mut Prng::new(61)).unwrap();
    let batch = r.retrieve(x.data(), x.data(), Seq::single(20)).unwrap();
    let mut cache = ChunkCache::new(6);
    let z = vec![0.0; 6];
    for j in 0..20 {
        let (_, set) = r.step(&mut cache, x.row(j), x.row(j), x.row(j), &z).unwrap();
        assert_eq!(set, batch[0].sets[j], "row {j}");
    }
}

#[test]
fn integrate_rejects_bad_shapes() {
    let r = layer(4, ResonaConfig::desk(4, 2, 1), 70);
    let tape = Tape::<f64>::inference();
    let b = Binder::new(&tape);
    let x = tape.constant(Tensor::zeros([6, 4]).unwrap());
    let short = tape.constant(Tensor::zeros([5, 4]).unwrap());
    assert!(r.integrate(&b, &short, &x, Seq::single(6)).is_err());
}

#[test]
fn parameter_formula_matches_layer() {
    for mode in [AlphaMode::Fixed, AlphaMode::Gated] {
        let cfg = ResonaConfig {
            alpha_mode: mode,
            ..ResonaConfig::desk(8, 2, 1)
        };
        let r = ResonaLayer::<f64>::init("r", 8, 5, cfg.clone(), &Prng::new(1)).unwrap();
        assert_eq!(r.param_count(), param_count(&cfg, 8, 5));
    }
}
