// Throwaway experiment harness for balancing the synthetic generator
// against the acceptance ordering. Not part of the deliverable.

use gridcast_core::baselines::{baseline_predictor, evaluate, model_predictor, BaselineKind};
use gridcast_core::models::{BiasCombo, TrConfig};
use gridcast_core::synth::{synthesize_city, SynthSpec};
use gridcast_core::train::{train, ModelInit, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let hour_amp: f64 = args[1].parse().unwrap();
    let week_amp: f64 = args[2].parse().unwrap();
    let month_amp: f64 = args[3].parse().unwrap();
    let noise: f64 = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let data_seed: u64 = args[6].parse().unwrap();
    let train_seed: u64 = args[7].parse().unwrap();
    let harmonics: usize = args.get(8).map(|a| a.parse().unwrap()).unwrap_or(8);

    let mut spec = SynthSpec::new(64, 64, 3, 60, data_seed);
    spec.hour_amplitude = hour_amp;
    spec.week_amplitude = week_amp;
    spec.month_amplitude = month_amp;
    spec.noise = noise;
    spec.hour_harmonics = harmonics;
    let ds = synthesize_city(&spec).unwrap();

    let train_days: Vec<usize> = (0..40).collect();
    let val_days: Vec<usize> = (40..50).collect();
    let eval_days: Vec<usize> = (50..60).collect();
    let slots = [48usize, 96, 144, 192, 240];
    let cfg = TrainConfig {
        learning_rate: lr,
        max_epochs: 50,
        seed: train_seed,
        ..TrainConfig::default()
    };
    let config = TrConfig::default();

    let overall = |cells: &[f64]| cells.iter().sum::<f64>() / cells.len() as f64;
    let mut scores = Vec::new();
    for combo in [BiasCombo::NONE, BiasCombo::ALL] {
        let (params, log) = train(
            ModelInit::Trb { config, combo },
            &ds,
            &train_days,
            &val_days,
            &slots,
            12,
            &cfg,
        )
        .unwrap();
        let cells = evaluate(model_predictor(&params, 12), &ds, &eval_days, &slots).unwrap();
        scores.push((combo.label(), overall(&cells), log.epochs.len(), log.best_epoch));
    }
    let mut base = Vec::new();
    for kind in BaselineKind::ALL {
        let cells = evaluate(baseline_predictor(kind), &ds, &eval_days, &slots).unwrap();
        base.push((kind.name(), overall(&cells)));
    }

    let (tr, trb) = (scores[0].1, scores[1].1);
    println!(
        "amp={hour_amp} harm={harmonics} week={week_amp} month={month_amp} noise={noise} lr={lr} seeds=({data_seed},{train_seed}) | tr={tr:.4} ({} ep, best {}) trb={trb:.4} ({} ep, best {}) ratio={:.3} | {:?}",
        scores[0].2, scores[0].3, scores[1].2, scores[1].3, trb / tr, base
    );
}
