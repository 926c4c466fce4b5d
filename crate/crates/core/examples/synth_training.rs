//! Trains the desk-scale network on in-memory synthetic data and reports
//! held-out accuracy. Usage: `synth_training [landmark4|laterality1] [epochs]`.

use rln_core::data::{flip_sample, preprocess, Sample};
use rln_core::evaluation::{
    classifier_laterality_accuracy, inferred_laterality_accuracy, landmark_accuracy, ClassOutput, Prediction,
};
use rln_core::data::{denormalize, AnnotationRecord, Landmarks};
use rln_core::model::{build_model, Head, ModelConfig};
use rln_core::synth::{generate_indexed, SynthConfig};
use rln_core::trainer::{predict_outputs, train_with_progress, TrainConfig};

fn make(seed: u64, count: usize, double: bool) -> rln_core::Result<(Vec<Sample>, Vec<AnnotationRecord>)> {
    let config = SynthConfig { seed, count, ..SynthConfig::default() };
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for i in 0..count {
        let (image, record, _) = generate_indexed(&config, i)?;
        let s = preprocess(&record, &image, 1)?;
        if double {
            samples.push(flip_sample(&s));
        }
        samples.push(s);
        records.push(record);
    }
    Ok((samples, records))
}

fn main() -> rln_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let head: Head = args.get(1).map_or(Ok(Head::Landmark4), |s| s.parse())?;
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);

    let (train, _) = make(1, 1000, true)?;
    let (val, _) = make(2, 200, true)?;
    let (test, test_records) = make(3, 400, false)?;

    let config = ModelConfig { head, ..ModelConfig::desk() };
    let model = build_model::<f32>(&config, 0)?;
    let tc = TrainConfig { max_epochs: epochs, patience: 10, ..TrainConfig::default() };
    let (model, log) = train_with_progress(model, &train, &val, &tc, |r| {
        println!("epoch {} train {:?} val {:.6} {:.1}s", r.epoch, r.train_loss, r.val_loss, r.seconds);
    })?;
    println!("best epoch {} stop {}", log.best_epoch, log.stop);

    let outputs = predict_outputs(&model, &test, 16)?;
    match head {
        Head::Landmark4 => {
            let preds: Vec<Prediction> = test
                .iter()
                .zip(&outputs)
                .map(|(s, o)| Prediction {
                    image_path: s.image_path.clone(),
                    landmarks: denormalize(Landmarks::from_array(o.iter().map(|v| *v as f64).collect::<Vec<_>>().try_into().unwrap()), s.width()),
                })
                .collect();
            let acc = landmark_accuracy(&preds, &test_records, &[0.25, 0.5, 1.0])?;
            println!("od {:?} fovea {:?}", acc.od, acc.fovea);
            println!("laterality {:?}", inferred_laterality_accuracy(&preds, &test_records)?);
        }
        Head::Laterality1 => {
            let outs: Vec<ClassOutput> = test
                .iter()
                .zip(&outputs)
                .map(|(s, o)| ClassOutput { image_path: s.image_path.clone(), p_right: o[0] as f64 })
                .collect();
            println!("classifier {:?}", classifier_laterality_accuracy(&outs, &test_records)?);
        }
    }
    Ok(())
}
