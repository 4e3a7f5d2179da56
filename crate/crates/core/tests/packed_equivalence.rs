//! End-to-end equivalence of the packed deployment engine against the float
//! binary path, over independently trained models.

use bnnkit::bitpack::{export, PackedModel};
use bnnkit::config::DataFormat;
use bnnkit::data::Normalize;
use bnnkit::engine::{evaluate, train, Strategy, TrainConfig};
use bnnkit::models::{forward_eval, ForwardMode, ModelSpec};
use bnnkit::synth;
use bnnkit::tensor::Tensor;

fn trained_tiny(seed: u64) -> (bnnkit::models::Model<f32>, bnnkit::data::Dataset) {
    let sspec = synth::SynthSpec {
        num_classes: 5,
        train_per_class: 40,
        test_per_class: 16,
        shape: (3, 16, 16),
        noise: 40.0,
        seed: 1000 + seed,
        ..synth::SynthSpec::default()
    };
    let (train_ds, test_ds) = synth::datasets(&sspec, &Normalize::identity(3)).unwrap();
    let cfg = TrainConfig {
        seed,
        epochs: 2,
        batch_size: 32,
        lr0: 0.01,
        strategy: Strategy::LabelAware,
        lambda: 0.01,
        model: ModelSpec {
            stage_widths: vec![8, 16],
            input_shape: (3, 16, 16),
            projection_dim: 8,
            ..ModelSpec::tiny_cnn(5)
        },
        augment_pad: 1,
        augment_hflip: true,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.data.format, DataFormat::Synth);
    let out = train(&cfg, &train_ds, &test_ds, None).unwrap();
    (out.checkpoint.model, test_ds)
}

#[test]
fn packed_inference_matches_float_path_bitwise() {
    for seed in [1u64, 2, 3] {
        let (model, test_ds) = trained_tiny(seed);
        let packed = export(&model).unwrap();
        let (images, _) = test_ds.gather(&(0..test_ds.len()).collect::<Vec<_>>());
        let (float_logits, _) = forward_eval(&model, &images, ForwardMode::EvalB).unwrap();
        let packed_logits = packed.infer(&images).unwrap();
        // the packed path reproduces the float binary path bit for bit
        assert_eq!(packed_logits, float_logits, "seed {seed}");
    }
}

#[test]
fn packed_model_survives_latent_weight_deletion() {
    let (mut model, test_ds) = trained_tiny(7);
    let packed = export(&model).unwrap();
    let (images, _) = test_ds.gather(&(0..32).collect::<Vec<_>>());
    let before = packed.infer(&images).unwrap();

    // wreck every latent kernel after export; the deployed path is untouched
    for block in model.blocks_mut() {
        block.w.map_assign(|_| f32::NAN);
    }
    let after = packed.infer(&images).unwrap();
    assert_eq!(before, after);

    // while the float model is now broken
    assert!(forward_eval(&model, &images, ForwardMode::EvalB)
        .map(|(l, _)| !l.all_finite())
        .unwrap_or(true));
}

#[test]
fn packed_container_roundtrip_and_structure() {
    let (model, test_ds) = trained_tiny(11);
    let packed = export(&model).unwrap();
    let container = packed.to_container();

    // the export carries no latent kernels: every dual-block record is the
    // packed kernel, never a float "w"
    for rec in &container.records {
        assert!(
            !(rec.name.starts_with("block") && rec.name.ends_with(".w")),
            "latent weight leaked into export: {}",
            rec.name
        );
    }

    let dir = std::env::temp_dir().join(format!("bnnkit-pk-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.bnnp");
    packed.save(&path).unwrap();
    let loaded = PackedModel::load(&path).unwrap();
    let (images, _) = test_ds.gather(&(0..16).collect::<Vec<_>>());
    assert_eq!(packed.infer(&images).unwrap(), loaded.infer(&images).unwrap());

    // version mismatch rejected
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 0xFE;
    let bad = dir.join("bad.bnnp");
    std::fs::write(&bad, bytes).unwrap();
    assert!(PackedModel::load(&bad).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn packed_empty_batch_gives_empty_output() {
    let (model, _) = trained_tiny(13);
    let packed = export(&model).unwrap();
    let empty = Tensor::<f32>::zeros(&[0, 3, 16, 16]);
    let out = packed.infer(&empty).unwrap();
    assert_eq!(out.shape(), &[0, 5]);
}

#[test]
fn packed_throughput_report() {
    // reporting only, no pass/fail threshold: words of packed weights
    // consumed per second by the xnor/popcount convolutions
    let (model, test_ds) = trained_tiny(23);
    let packed = export(&model).unwrap();
    let (images, _) = test_ds.gather(&(0..64).collect::<Vec<_>>());
    let t0 = std::time::Instant::now();
    let mut runs = 0usize;
    while t0.elapsed().as_secs_f64() < 0.4 {
        packed.infer(&images).unwrap();
        runs += 1;
    }
    let elapsed = t0.elapsed().as_secs_f64();
    // one weight-word read per output position per channel row
    let mut word_reads = 0usize;
    for (_, blocks) in &packed.stages {
        for b in blocks {
            word_reads += b.conv.weight_words.len();
        }
    }
    let words_per_sec = (word_reads * images.dim(0) * runs) as f64 / elapsed;
    println!(
        "packed microbenchmark: {:.2e} weight-words/s over {} runs of {} images",
        words_per_sec,
        runs,
        images.dim(0)
    );
}

#[test]
fn packed_accuracy_equals_float_accuracy() {
    let (model, test_ds) = trained_tiny(17);
    let packed = export(&model).unwrap();
    let float_acc = evaluate(&model, &test_ds, ForwardMode::EvalB).unwrap();
    let (images, _) = test_ds.gather(&(0..test_ds.len()).collect::<Vec<_>>());
    let logits = packed.infer(&images).unwrap();
    let k = logits.dim(1);
    let mut correct = 0;
    for (i, &label) in test_ds.labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    assert_eq!(correct as f64 / test_ds.len() as f64, float_acc);
}
