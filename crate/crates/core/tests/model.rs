use cacvit_core::attention::retile;
use cacvit_core::embeddings::Exemplar;
use cacvit_core::gradcheck::{grad_check_coords, Coord, GradCheckOptions};
use cacvit_core::image::{render_density, BBox};
use cacvit_core::model::{decode_checkpoint, density_loss_var, prepare_exemplars, Model, ModelConfig};
use cacvit_core::{DensityMap, Error, Image, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        exemplar_w: 8,
        exemplar_h: 8,
        exemplar_patch: 4,
        channels: 3,
        depth: 2,
        dim: 16,
        heads: 2,
        extra_depth: 1,
        extra_dim: 8,
        extra_heads: 2,
        decoder_dim: 8,
        k_shots: 2,
        use_cls: true,
        use_se: true,
        use_me: true,
        seed: 3,
    }
}

fn inputs(cfg: &ModelConfig, seed: u64) -> (Image, Vec<Exemplar>) {
    let img = random_image(cfg.image_size, cfg.image_size, seed);
    let s = cfg.image_size;
    let boxes = [BBox::new(0, 0, s / 4, s / 4), BBox::new(s / 2, s / 4, s / 2, s / 4), BBox::new(1, 2, 3, 5)];
    let ex = prepare_exemplars(&img, &boxes[..cfg.k_shots], cfg).unwrap();
    (img, ex)
}

#[test]
fn sequence_length_matches_token_counts() {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone()).unwrap();
    let (img, ex) = inputs(&cfg, 1);
    let seq = model.embed_inputs(&img, &ex).unwrap();
    assert_eq!(seq.len(), 76);
    assert_eq!(seq.dim(), cfg.dim);
    let out = model.forward(&img, &ex).unwrap();
    assert_eq!(out.last_attention.a_query.shape(), &[4, 64, 64]);
    assert_eq!(out.last_attention.a_match.shape(), &[4, 12, 64]);
    assert_eq!(out.density.width(), 64);
    assert_eq!(out.similarity.len(), 64);
    assert!((out.count - out.density.count()).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic_and_seed_sensitive() {
    let cfg = tiny();
    let (img, ex) = inputs(&cfg, 2);
    let a = Model::new(cfg.clone()).unwrap().forward(&img, &ex).unwrap();
    let b = Model::new(cfg.clone()).unwrap().forward(&img, &ex).unwrap();
    assert_eq!(a.density, b.density);
    let other = Model::new(ModelConfig { seed: 4, ..cfg }).unwrap().forward(&img, &ex).unwrap();
    assert_ne!(a.density, other.density);
}

#[test]
fn zero_features_decode_to_zero_density() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let g = cfg.grid();
    let d = model.decode(&Tensor::zeros(&[cfg.extra_dim + 1, g, g])).unwrap();
    assert_eq!((d.width(), d.height()), (16, 16));
    assert!(d.data().iter().all(|v| *v == 0.0));
    assert!(model.decode(&Tensor::zeros(&[cfg.extra_dim, g, g])).is_err());
}

#[test]
fn exemplar_order_does_not_change_the_count() {
    let cfg = ModelConfig { k_shots: 3, ..tiny() };
    let model = Model::new(cfg.clone()).unwrap();
    let (img, ex) = inputs(&cfg, 5);
    let a = model.forward(&img, &ex).unwrap();
    let rev: Vec<Exemplar> = ex.iter().rev().cloned().collect();
    let b = model.forward(&img, &rev).unwrap();
    assert!((a.count - b.count).abs() < 1e-9);
    for (x, y) in a.density.data().iter().zip(b.density.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ablation_switches_change_behaviour() {
    let base = tiny();
    let (img, ex) = inputs(&base, 6);
    let full = Model::new(base.clone()).unwrap().forward(&img, &ex).unwrap();

    let no_cls = Model::new(ModelConfig { use_cls: false, ..base.clone() }).unwrap().forward(&img, &ex).unwrap();
    let a = &no_cls.last_attention.a_class;
    assert!(a.data().iter().all(|v| *v == 0.0));
    let attn = &no_cls.last_attention;
    let (h, m) = (attn.heads(), attn.m_query());
    for head in 0..h {
        for r in 0..m {
            let s: f64 = (0..m).map(|c| attn.a_query.at3(head, r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    // the scale embedding only reaches the model through exemplar tokens
    let se_off = Model::new(ModelConfig { use_se: false, ..base.clone() }).unwrap();
    let mut bigger = ex.clone();
    bigger[0] = prepare_exemplars(&img, &[BBox::new(0, 0, 8, 8)], &base).unwrap().remove(0);
    bigger[0].pixels = ex[0].pixels.clone();
    let p1 = se_off.prepare(&img, &ex).unwrap();
    let p2 = se_off.prepare(&img, &bigger).unwrap();
    assert_eq!(p1.exemplar_patches, p2.exemplar_patches);
    let with_se = Model::new(base.clone()).unwrap();
    assert_ne!(
        with_se.prepare(&img, &ex).unwrap().exemplar_patches,
        with_se.prepare(&img, &bigger).unwrap().exemplar_patches
    );

    let no_me = Model::new(ModelConfig { use_me: false, ..base.clone() }).unwrap().forward(&img, &ex).unwrap();
    let me = with_se.prepare(&img, &ex).unwrap().me;
    for (a, b) in full.similarity.data().iter().zip(no_me.similarity.data()) {
        assert!((a - b * me).abs() < 1e-12);
    }
}

#[test]
fn retained_layers_cover_every_block() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let (img, ex) = inputs(&cfg, 7);
    let out = model.forward_prepared(&model.prepare(&img, &ex).unwrap(), true).unwrap();
    assert_eq!(out.layer_attention.len(), cfg.depth);
    assert_eq!(retile(out.layer_attention.last().unwrap()), retile(&out.last_attention));
}

#[test]
fn input_validation() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let (img, ex) = inputs(&cfg, 8);
    assert!(matches!(model.forward(&random_image(8, 8, 0), &ex), Err(Error::Config(_))));
    assert!(model.forward(&img, &[]).is_err());
    let mut many = ex.clone();
    many.push(ex[0].clone());
    assert!(model.forward(&img, &many).is_err());
    assert!(matches!(prepare_exemplars(&img, &[BBox::new(10, 10, 8, 8)], &cfg), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig { use_me: false, ..tiny() };
    let model = Model::new(cfg.clone()).unwrap();
    let bytes = model.checkpoint_bytes();
    assert_eq!(&bytes[..4], b"CVCK");
    let back = Model::from_checkpoint(&bytes).unwrap();
    assert_eq!(back.cfg, cfg);
    let (_, tensors) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(tensors.len(), model.params().len());
    for ((name, a), (bname, b)) in model.params().iter().zip(back.params()) {
        assert_eq!(name, &bname);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    assert!(Model::from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::from_checkpoint(&bad).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    assert!(model.num_params() <= 50_000, "{}", model.num_params());
    let (img, ex) = inputs(&cfg, 9);
    let input = model.prepare(&img, &ex).unwrap();
    let gt = render_density(16, 16, &[(3.0, 4.0), (10.5, 12.0)], 1.0).unwrap();
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut cacvit_core::Tape, vars: &[cacvit_core::Var]| {
        let out = model.forward_vars(tape, vars, &input, false)?;
        density_loss_var(tape, out.density, &gt)
    };
    // every tensor gets at least one probe; the rest are strided
    let mut coords = Vec::new();
    for (i, t) in params.iter().enumerate() {
        let stride = (t.len() / 4).max(1);
        coords.extend((0..t.len()).step_by(stride).map(|index| Coord { input: i, index }));
    }
    let total: usize = params.iter().map(Tensor::len).sum();
    let stride = total / 120;
    let mut flat = 0;
    for (i, t) in params.iter().enumerate() {
        for index in 0..t.len() {
            if flat % stride == 1 {
                coords.push(Coord { input: i, index });
            }
            flat += 1;
        }
    }
    assert!(coords.len() >= 200, "{}", coords.len());
    let report = grad_check_coords(f, &params, &coords, GradCheckOptions::default(), |_| {}).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked >= 200);
    let corrupted = grad_check_coords(f, &params, &coords, GradCheckOptions::default(), |t| {
        t.inject_backward_fault(cacvit_core::OpKind::MatMul)
    })
    .unwrap();
    assert!(!corrupted.passed(), "{corrupted:?}");
}

#[test]
fn loss_gradients_are_finite_and_nonzero() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let (img, ex) = inputs(&cfg, 10);
    let input = model.prepare(&img, &ex).unwrap();
    let gt = DensityMap::new(16, 16, vec![0.01; 256]).unwrap();
    let (loss, grads) = model.loss_and_grads(&input, &gt).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(grads.len(), model.params().len());
    assert!(grads.iter().flatten().all(|g| g.is_finite()));
    assert!(grads.iter().flatten().any(|g| *g != 0.0));
}

#[test]
fn desk_config_end_to_end_gradcheck() {
    let row = cacvit_core::suite::check_end_to_end(&ModelConfig::desk(), 200, None).unwrap();
    assert!(row.report.checked >= 200, "{:?}", row.report);
    assert!(row.report.passed(), "{:?}", row.report);
}
