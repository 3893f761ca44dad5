//! Trains the reduced model on online warps of procedural textures and
//! reports held-out matching precision and refinement gain as it goes.
//!
//! cargo run --release --example train_synthetic -- [steps] [eval_every] [out.xftw]

use std::path::PathBuf;
use std::time::Instant;

use xfeat::io::save_weights;
use xfeat::training::{evaluate_pairs, procedural_bases, synthetic_dataset, HarrisTeacher, TrainConfig, Trainer};

fn main() -> xfeat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|a| a.parse().ok()).unwrap_or(2000u64);
    let every = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(250u64);
    let out = args.get(2).map_or_else(|| PathBuf::from("desk.xftw"), PathBuf::from);

    let config = TrainConfig::desk();
    let teacher = HarrisTeacher::default();
    let t0 = Instant::now();
    let bases = procedural_bases(config.dataset_size, config.width, config.height, config.seed);
    let held_out = synthetic_dataset(10, config.width, config.height, 1000, &config.warp, 1024, &teacher)?;
    let held: Vec<_> = held_out.iter().map(|s| &s.pair).collect();

    let mut trainer = Trainer::from_config(config)?;
    let mut done = 0;
    while done < steps {
        let n = every.min(steps - done);
        let reports = trainer.fit_online(&bases, &teacher, &[], n, |_| {})?;
        done += n;
        let last = reports.last().expect("at least one step");
        let stats = evaluate_pairs(&trainer.model, &held, 8.0)?;
        println!(
            "step {done:5} [{:5.0}s] loss {:.3} (ds {:.3} rel {:.3} fine {:.3} kp {:.3}) | precision {:.3} epe {:.2} -> {:.2}",
            t0.elapsed().as_secs_f64(),
            last.total,
            last.ds,
            last.rel,
            last.fine,
            last.kp,
            stats.precision,
            stats.coarse_epe,
            stats.refined_epe,
        );
    }
    save_weights(&trainer.model, &out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
