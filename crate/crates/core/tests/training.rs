use trisprompt::synth::{generate, SynthConfig};
use trisprompt::train::{fit, TrainConfig};

#[test]
fn overfit_loss_medians_never_rise() {
    let data = generate(&SynthConfig {
        n: 32,
        seed: 5,
        ..Default::default()
    });
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: None,
        ..Default::default()
    };
    let out = fit(&data, &data, &cfg).unwrap();
    let medians: Vec<f64> = out
        .history
        .chunks(10)
        .map(|w| {
            let mut v: Vec<f64> = w.iter().map(|e| e.train.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let rises: Vec<String> = medians
        .windows(2)
        .enumerate()
        .filter(|(_, p)| p[1] > p[0])
        .map(|(i, p)| format!("window {}: {:.4} -> {:.4}", i + 1, p[0], p[1]))
        .collect();
    assert!(rises.is_empty(), "{} of {} windows rose: {rises:?}", rises.len(), medians.len() - 1);
}
