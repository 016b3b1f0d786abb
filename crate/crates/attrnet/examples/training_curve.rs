//! Trains on a synthetic dataset and prints held-out metrics after every
//! epoch. Usage:
//!
//!   cargo run --release --example training_curve -- [epochs] [lr] [clutter] [train_n] [test_n]

use attrnet::data::{generate_synthetic, Split, SyntheticConfig};
use attrnet::metrics::{evaluate, CropMode};
use attrnet::model::{build_tinydan, initialize};
use attrnet::trainer::{EpochMode, PhaseMode, PreparedData, Session, TrainerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let clutter: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let train_n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let test_n: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(500);

    let t0 = std::time::Instant::now();
    let ds = generate_synthetic(&SyntheticConfig::new(train_n, 200, test_n, 64, clutter, 42))
        .expect("dataset");
    println!(
        "dataset: {} train / {} val / {} test, {} classes ({:.1}s)",
        ds.split_len(Split::Train),
        ds.split_len(Split::Val),
        ds.split_len(Split::Test),
        ds.schema.num_classes(),
        t0.elapsed().as_secs_f32()
    );

    let model = build_tinydan(ds.schema.num_classes(), (3, 64, 64)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = initialize::<f32, _>(&model, &mut rng).unwrap();
    let config = TrainerConfig {
        base_lr: lr,
        phase_mode: PhaseMode::Full,
        seed: 42,
        max_epochs: epochs,
        ..TrainerConfig::default()
    };
    let data = PreparedData::prepare(&ds, &config, 64).unwrap();
    let mut session = Session::new(model, params, config, &data).unwrap();

    let mut final_report = None;
    for epoch in 1..=epochs {
        session.state.epoch = epoch;
        let te = std::time::Instant::now();
        let train_loss = session.run_epoch(EpochMode::Train).unwrap();
        let val_loss = session.run_epoch(EpochMode::Validate).unwrap();
        let ckpt = session.to_checkpoint();
        let (report, _) = evaluate(&ckpt, &ds, Split::Test, CropMode::Whole).unwrap();
        println!(
            "epoch {epoch:2}: train {train_loss:.4} val {val_loss:.4} | test micro mAP {:.4} macro {:.4} AUC {:.4} | {:.1}s (total {:.1}s)",
            report.overall.micro_map.unwrap_or(f64::NAN),
            report.overall.macro_map.unwrap_or(f64::NAN),
            report.overall.micro_roc_auc.unwrap_or(f64::NAN),
            te.elapsed().as_secs_f32(),
            t0.elapsed().as_secs_f32()
        );
        final_report = Some(report);
    }
    if let Some(report) = final_report {
        for class in &report.classes {
            println!(
                "  class {:<12} ({:>7}) ap {:.4} auc {:.4} ({} pos)",
                class.name,
                class.group.as_str(),
                class.ap.unwrap_or(f64::NAN),
                class.roc_auc.unwrap_or(f64::NAN),
                class.positives
            );
        }
    }
}
