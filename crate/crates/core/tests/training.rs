use dmdetect::channel::LinearChannel;
use dmdetect::denoiser::{train, Checkpoint, ModelConfig, TrainConfig};
use dmdetect::modem::{build_constellation, Scheme};

#[test]
fn two_symbol_bpsk_beats_null_predictor() {
    let model_cfg = ModelConfig {
        model_dim: 32,
        n_heads: 4,
        depth: 2,
        t_embed_dim: 32,
        ..ModelConfig::desk(2, 1)
    };
    let cfg = TrainConfig {
        total_steps: 2000,
        batch_size: 256,
        seed: 12,
        ..TrainConfig::default()
    };
    let ch = LinearChannel::identity(2, 0.0).unwrap();
    let ckpt = train(&cfg, &model_cfg, &ch, &build_constellation(Scheme::Bpsk)).unwrap();
    assert!(ckpt.params.is_finite() && ckpt.ema.is_finite());
    assert!(
        ckpt.meta.final_loss < 0.8 * ckpt.meta.null_loss,
        "loss {} vs null {}",
        ckpt.meta.final_loss,
        ckpt.meta.null_loss
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b/model.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let x = [0.4, -1.3];
    assert_eq!(back.model().unwrap().predict(&x, 0.25).unwrap(), ckpt.model().unwrap().predict(&x, 0.25).unwrap());
}
