use dmdetect::harness::{
    binomial_std, evaluate_sweep, reference_ser_bpsk, run_sweep, ChannelSource, DetectorKind, DmSweepOptions,
    MetricRecord, SweepConfig, CSV_FILE, MANIFEST_FILE,
};
use dmdetect::modem::Scheme;
use proptest::prelude::*;

fn config(scheme: Scheme, n_r: usize, detectors: Vec<DetectorKind>, snr_db: Vec<f64>, trials: usize, seed: u64) -> SweepConfig {
    SweepConfig {
        scheme,
        n_r,
        channel: ChannelSource::Identity,
        snr_db,
        detectors,
        trials,
        seed,
        dm: DmSweepOptions::default(),
        record_wall_time: false,
    }
}

fn symbols(r: &MetricRecord, n_r: usize) -> f64 {
    (r.trials as usize * n_r) as f64
}

// Joint ML minimizes block errors, not symbol errors: on a correlated channel
// near 0 dB its SER can sit above MMSE's, so the ordering is checked from 4 dB.
#[test]
fn ml_is_never_worse_than_mmse() {
    let h = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(
        h.path(),
        r#"{"rows":4,"cols":4,"entries":[1.0,0.6,0.2,0.0, 0.5,1.0,0.4,0.1, 0.0,0.7,0.9,0.3, 0.2,0.0,0.8,1.1]}"#,
    )
    .unwrap();
    let mut cfg = config(Scheme::Bpsk, 4, vec![DetectorKind::Ml, DetectorKind::Mmse], vec![4.0, 8.0, 12.0], 20_000, 5);
    cfg.channel = ChannelSource::File(h.path().to_path_buf());
    let out = evaluate_sweep(&cfg, None).unwrap();
    for snr in &cfg.snr_db {
        let get = |name: &str| out.records.iter().find(|r| r.detector == name && r.snr_db == *snr).unwrap();
        let (ml, mmse) = (get("ml"), get("mmse"));
        assert!(
            ml.ser <= mmse.ser + 3.0 * binomial_std(mmse.ser, symbols(mmse, 4)),
            "{snr} dB: ml {} mmse {}",
            ml.ser,
            mmse.ser
        );
    }
}

#[test]
fn ml_matches_q_function_at_six_db() {
    let cfg = config(Scheme::Bpsk, 4, vec![DetectorKind::Ml], vec![6.0], 250_000, 6);
    let r = &evaluate_sweep(&cfg, None).unwrap().records[0];
    let p = reference_ser_bpsk(6.0);
    assert!((r.ser - p).abs() <= 3.0 * binomial_std(p, 1e6), "{} vs {p}", r.ser);
}

#[test]
fn ser_is_non_increasing_in_snr() {
    let grid: Vec<f64> = (-4..=10).step_by(2).map(f64::from).collect();
    let detectors = vec![DetectorKind::Ml, DetectorKind::Mmse, DetectorKind::Zf, DetectorKind::Mf, DetectorKind::DmNull];
    let cfg = config(Scheme::Qam16, 2, detectors, grid, 20_000, 7);
    let out = evaluate_sweep(&cfg, None).unwrap();
    for pair in out.records.windows(2).filter(|w| w[0].detector == w[1].detector) {
        let n = symbols(&pair[0], 2);
        let slack = 3.0 * (binomial_std(pair[0].ser, n).powi(2) + binomial_std(pair[1].ser, n).powi(2)).sqrt();
        assert!(
            pair[1].ser <= pair[0].ser + slack,
            "{} rose from {} dB to {} dB",
            pair[0].detector,
            pair[0].snr_db,
            pair[1].snr_db
        );
    }
}

#[test]
fn qam4_combines_two_bpsk_decisions() {
    let snr = 3.0;
    let n = 1_000_000;
    let bpsk = &evaluate_sweep(&config(Scheme::Bpsk, 4, vec![DetectorKind::Ml], vec![snr], n / 4, 8), None).unwrap().records[0];
    let qam = &evaluate_sweep(&config(Scheme::Qam4, 4, vec![DetectorKind::Ml], vec![snr], n / 4, 9), None).unwrap().records[0];
    let p = reference_ser_bpsk(snr);
    let expected = 1.0 - (1.0 - p).powi(2);
    assert!((qam.ser - expected).abs() <= 3.0 * binomial_std(expected, n as f64), "{} vs {expected}", qam.ser);
    let from_measured = 1.0 - (1.0 - bpsk.ser).powi(2);
    // delta method: d/dp of 1-(1-p)^2 is 2(1-p)
    let sigma = (binomial_std(expected, n as f64).powi(2)
        + (2.0 * (1.0 - p) * binomial_std(p, n as f64)).powi(2))
    .sqrt();
    assert!((qam.ser - from_measured).abs() <= 3.0 * sigma);
    // bit errors of Gray-mapped 4-QAM are exactly per-dimension sign errors
    assert!((qam.ber - p).abs() <= 3.0 * binomial_std(p, 2.0 * n as f64));
}

#[test]
fn repeated_runs_differ_only_in_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Scheme::Qam4, 3, vec![DetectorKind::Ml, DetectorKind::Zf], vec![0.0, 6.0], 3_000, 10);
    let (a, b) = (dir.path().join("a/deep"), dir.path().join("b"));
    run_sweep(&cfg, Some(&a)).unwrap();
    run_sweep(&cfg, Some(&b)).unwrap();
    assert_eq!(std::fs::read(a.join(CSV_FILE)).unwrap(), std::fs::read(b.join(CSV_FILE)).unwrap());
    let load = |dir: &std::path::Path| -> serde_json::Value {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        assert!(obj.remove("started_at").unwrap().is_string());
        assert!(obj.remove("finished_at").unwrap().is_string());
        v
    };
    assert_eq!(load(&a), load(&b));
}

#[test]
fn changed_checkpoint_is_flagged_on_rerun() {
    use dmdetect::denoiser::{init_model, Checkpoint, ModelConfig};
    use dmdetect::numerics::make_stream;

    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("model.json");
    let model_cfg = ModelConfig {
        model_dim: 8,
        n_heads: 2,
        depth: 1,
        t_embed_dim: 8,
        mlp_ratio: 2,
        ..ModelConfig::desk(4, 1)
    };
    let save = |seed| {
        let model = init_model(&model_cfg, &mut make_stream(seed, 1)).unwrap();
        Checkpoint::from_model(&model).save(&ckpt_path).unwrap();
    };
    let mut cfg = config(Scheme::Bpsk, 4, vec![DetectorKind::Dm], vec![5.0], 100, 11);
    cfg.dm.checkpoint = Some(ckpt_path.clone());
    let out_dir = dir.path().join("out");

    save(1);
    assert!(run_sweep(&cfg, Some(&out_dir)).unwrap().warnings.is_empty());
    assert!(run_sweep(&cfg, Some(&out_dir)).unwrap().warnings.is_empty());
    save(2);
    let warnings = run_sweep(&cfg, Some(&out_dir)).unwrap().warnings;
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("checkpoint hash changed"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn missing_checkpoint_is_reported() {
    let mut cfg = config(Scheme::Bpsk, 4, vec![DetectorKind::Dm], vec![5.0], 10, 0);
    cfg.dm.checkpoint = Some("does/not/exist.json".into());
    let err = run_sweep(&cfg, None).unwrap_err();
    assert!(matches!(err, dmdetect::Error::CheckpointMissing(_)), "{err}");
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Bpsk), Just(Scheme::Qam4), Just(Scheme::Qam16)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identical_configs_give_identical_csv(scheme in scheme(), n_r in 1usize..4, snr in -5.0f64..15.0, seed in any::<u64>(), trials in 1usize..300) {
        let kinds = vec![DetectorKind::Ml, DetectorKind::Mmse, DetectorKind::DmNull, DetectorKind::Oracle];
        let cfg = config(scheme, n_r, kinds, vec![snr, snr + 3.0], trials, seed);
        let a = evaluate_sweep(&cfg, None).unwrap();
        let b = evaluate_sweep(&cfg, None).unwrap();
        prop_assert_eq!(dmdetect::harness::records_to_csv(&a.records), dmdetect::harness::records_to_csv(&b.records));
        for r in &a.records {
            prop_assert!((0.0..=1.0).contains(&r.ser));
            prop_assert_eq!(r.ser, r.symbol_errors as f64 / (r.trials as f64 * n_r as f64));
        }
    }
}
