//! Trains on a generated corpus and prints the per-epoch history.
//!
//! `cargo run --release --example synthetic -- [k|full] [lr] [epochs] [seed] [label|mask|learnable] [noaux|nolabel] [embed_std] [weight_std]`

use std::time::Instant;

use labelprompt::corpus::generate_synthetic;
use labelprompt::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first().map(String::as_str) {
        None | Some("full") => TrainConfig::full_data(),
        Some(k) => TrainConfig::few_shot(k.parse().expect("k")),
    };
    if let Some(lr) = args.get(1) {
        cfg.learning_rate = lr.parse().expect("lr");
    }
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(s) = args.get(3) {
        cfg.seed = s.parse().expect("seed");
    }
    if let Some(st) = args.get(4) {
        cfg.token_strategy = st.parse().expect("strategy");
    }
    match args.get(5).map(String::as_str) {
        Some("noaux") => {
            cfg.objective.alpha1 = 0.0;
            cfg.objective.alpha2 = 0.0;
        }
        Some("nolabel") => cfg.objective.alpha1 = 0.0,
        _ => {}
    }
    if let Some(std) = args.get(6) {
        cfg.encoder.embed_std = std.parse().expect("embed std");
    }
    if let Some(std) = args.get(7) {
        cfg.encoder.weight_std = Some(std.parse().expect("weight std"));
    }
    let corpus = generate_synthetic(8, 100, 200, 7).expect("corpus");
    let start = Instant::now();
    let out = train::<f64>(&corpus, &cfg).expect("training");
    for r in &out.history {
        println!("{}", serde_json::to_string(r).unwrap());
    }
    println!(
        "best epoch {:?}, test micro-F1 {:.4}, {:.1}s",
        out.best_epoch,
        out.test.map(|t| t.micro_f1).unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
}
