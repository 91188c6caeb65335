//! Trains the tiny preset on the synthetic three-class fixture and prints
//! per-epoch losses and scores.
//!
//! `cargo run --release -p pici-core --example toy_run -- [lr] [seed]`

use pici::data::synth_blobs;
use pici::network::NetworkConfig;
use pici::trainer::{AdamConfig, EpochRecord, RunObserver, Stage, TrainConfig, TrainState, Trainer};

struct Print;

impl RunObserver for Print {
    fn epoch_end(&mut self, r: &EpochRecord, _: &TrainState) -> pici::Result<()> {
        println!(
            "{:8} {:4} pisd {:.4} ins {:.4} clu {:.4} cli {:.4} | nmi {:.3} acc {:.3} ari {:.3} | {:.2}s",
            r.stage.name(),
            r.epoch,
            r.losses.l_pisd,
            r.losses.l_ins,
            r.losses.l_clu,
            r.losses.l_cli,
            r.scores.nmi,
            r.scores.acc,
            r.scores.ari,
            r.wall_seconds
        );
        Ok(())
    }

    fn stage_end(&mut self, _: Stage, _: &TrainState) -> pici::Result<()> {
        Ok(())
    }
}

fn main() -> pici::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lr = args.get(1).map(|s| s.parse().expect("lr")).unwrap_or(1e-3);
    let seed = args.get(2).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let ds = synth_blobs(3, 40, 32, 7)?;
    let net = NetworkConfig::tiny();
    let cfg = TrainConfig {
        pretrain_epochs: 30,
        train_epochs: 100,
        boost_epochs: 20,
        batch_size: 24,
        adam: AdamConfig {
            learning_rate: lr,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let mut state = TrainState::new(&net, &cfg, &ds)?;
    let trainer = Trainer::new(cfg, &state, &ds)?;
    let start = std::time::Instant::now();
    trainer.run(&mut state, Stage::Done, &mut Print)?;
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
