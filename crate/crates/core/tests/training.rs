use activemri::cli::normalized_channels;
use activemri::model::{evaluate_loss, train_model, Checkpoint, LatentModel, MaskSampler, ModelShape, TrainConfig, TransformerConfig};
use activemri::phantom::{random_ellipse_phantom, PhantomSpec};
use activemri::tokenizer::{train_tokenizer, TokenizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ten images, 500 optimizer steps: the model should nearly memorize the
/// token maps.
#[test]
fn overfits_ten_images() {
    let images: Vec<_> = (0..10)
        .map(|s| {
            random_ellipse_phantom(&PhantomSpec {
                seed: 500 + s,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let tcfg = TokenizerConfig::default();
    let (tok, _) = train_tokenizer(&normalized_channels(&images).unwrap(), &tcfg).unwrap();
    let shape = ModelShape {
        seq_len: (64 / tcfg.p) * (64 / tcfg.p),
        latent_dim: tcfg.d,
        vocab: tcfg.k,
    };
    let cfg = TrainConfig::default();
    // Ten images in batches of eight give two steps per epoch.
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let cfg = TrainConfig {
        epochs: 500 / steps_per_epoch,
        ..cfg
    };
    let model = LatentModel::init(TransformerConfig::default(), shape, 3).unwrap();
    let (ckpt, trace) = train_model(&images, &tok, &cfg, Checkpoint::fresh(model, cfg.adam.clone()), |_, _| {}).unwrap();
    assert_eq!(trace.len(), 500);

    let sampler = MaskSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<_> = images.iter().map(|img| (img.clone(), sampler.sample(64, &mut rng).unwrap())).collect();
    // The loss sums the two streams; compare the per-stream mean.
    let per_stream = evaluate_loss(&ckpt.model, &tok, &pairs).unwrap() / 2.0;
    let threshold = 0.1 * (tcfg.k as f64).ln();
    assert!(per_stream < threshold, "cross-entropy {per_stream} vs {threshold}");
}
