use rln_core::data::{preprocess, Sample};
use rln_core::model::{build_model, Head, ModelConfig};
use rln_core::synth::{generate_indexed, SynthConfig};
use rln_core::trainer::{evaluate_loss, train, StopReason, TrainConfig};
use rln_core::Error;

const W: usize = 64;
const H: usize = 48;

fn samples(seed: u64, count: usize) -> Vec<Sample> {
    let config = SynthConfig { width: W, height: H, seed, count, ..SynthConfig::default() };
    (0..count)
        .map(|i| {
            let (image, record, _) = generate_indexed(&config, i).unwrap();
            preprocess(&record, &image, 1).unwrap()
        })
        .collect()
}

fn tiny(head: Head) -> ModelConfig {
    ModelConfig {
        input_height: H,
        input_width: W,
        block_widths: vec![4, 8],
        convs_per_block: 1,
        fc_widths: vec![16],
        head,
        ..ModelConfig::default()
    }
}

#[test]
fn patience_zero_single_epoch() {
    let (tr, va) = (samples(1, 20), samples(2, 8));
    let model = build_model::<f32>(&tiny(Head::Landmark4), 0).unwrap();
    let config = TrainConfig { max_epochs: 1, patience: 0, ..TrainConfig::default() };
    let (_, log) = train(model, &tr, &va, &config).unwrap();
    let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 1]);
}

#[test]
fn training_is_seed_deterministic_and_returns_best_epoch() {
    let (tr, va) = (samples(3, 40), samples(4, 12));
    let config = TrainConfig { max_epochs: 4, patience: 2, learning_rate: 1e-3, seed: 7, ..TrainConfig::default() };
    let run = || train(build_model::<f32>(&tiny(Head::Landmark4), 5).unwrap(), &tr, &va, &config).unwrap();
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(m1, m2);
    let strip = |l: &rln_core::trainer::TrainLog| {
        l.records.iter().map(|r| (r.epoch, r.train_loss.map(f64::to_bits), r.val_loss.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&log1), strip(&log2));

    for w in log1.records.windows(2) {
        assert!(w[0].epoch < w[1].epoch);
    }
    let min = log1.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(log1.best_val_loss(), min);
    let recomputed = evaluate_loss(&m1, &va, config.batch_size).unwrap();
    assert!((recomputed - min).abs() <= 1e-9 * min.max(1.0));
    assert!(min < log1.records[0].val_loss);
}

#[test]
fn laterality_head_trains_with_bce() {
    let (tr, va) = (samples(5, 24), samples(6, 8));
    let model = build_model::<f32>(&tiny(Head::Laterality1), 0).unwrap();
    let config = TrainConfig { max_epochs: 2, patience: 5, ..TrainConfig::default() };
    let (_, log) = train(model, &tr, &va, &config).unwrap();
    assert_eq!(log.stop, StopReason::MaxEpochs);
    assert!(log.records.iter().all(|r| r.val_loss.is_finite() && r.val_loss > 0.0));
}

#[test]
fn huge_learning_rate_diverges() {
    let (mut tr, va) = (samples(7, 16), samples(8, 4));
    // pathological inputs push activations to overflow once the weights blow up
    for s in &mut tr {
        for v in s.image.data_mut() {
            *v *= 1e6;
        }
    }
    let model = build_model::<f32>(&tiny(Head::Landmark4), 0).unwrap();
    let config = TrainConfig { learning_rate: 1e6, max_epochs: 20, patience: 20, ..TrainConfig::default() };
    match train(model, &tr, &va, &config) {
        Err(Error::Divergence { epoch, loss, .. }) => {
            assert!(epoch >= 1);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l)),
    }
}

#[test]
fn empty_sets_are_rejected() {
    let va = samples(9, 4);
    let model = build_model::<f32>(&tiny(Head::Landmark4), 0).unwrap();
    assert!(matches!(train(model.clone(), &[], &va, &TrainConfig::default()), Err(Error::Argument(_))));
    assert!(matches!(train(model, &va, &[], &TrainConfig::default()), Err(Error::Argument(_))));
}
