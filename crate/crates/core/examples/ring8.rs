//! Trains RTM(8,2) with a point decoder on the 8-mode ring and prints the
//! evaluation report.
//!
//! ```text
//! cargo run --release -p rtmlab --example ring8 -- [steps] [seed]
//! ```

use std::time::Instant;

use rtmlab::decoder::DecoderConfig;
use rtmlab::harness::{DatasetConfig, Experiment, ExperimentConfig, MetricsConfig};
use rtmlab::imle::ImleConfig;
use rtmlab::mapper::{MapperConfig, RtmConfig};

fn main() -> Result<(), rtmlab::Error> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(5000, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let cfg = ExperimentConfig {
        seed,
        dataset: DatasetConfig::ring8(256),
        mapper: MapperConfig::Rtm(RtmConfig::new(32, 8, 16, 8, 2)),
        decoder: DecoderConfig::default(),
        imle: ImleConfig::new(steps),
        metrics: MetricsConfig::default(),
        ablate: None,
    };
    let exp = Experiment::new(&cfg)?;
    println!("epsilon {:.4}  pool {}", exp.trainer.epsilon(), exp.trainer.pool_size());
    let mut state = exp.init_state();
    let t = Instant::now();
    let mut step = 0;
    while step < steps {
        step = (step + 500).min(steps);
        let h = exp.trainer.run(&mut state, step as u64, &mut |_| {})?;
        let last = h.last().expect("ran at least one step");
        println!(
            "step {:5}  loss {:.5}  dist {:.4}  acc {:.3}  {:.1}s",
            last.step,
            last.loss,
            last.mean_distance,
            last.acceptance,
            t.elapsed().as_secs_f64()
        );
    }
    let report = exp.evaluate(&state, 3, 1024, None)?;
    println!("{report:#?}");
    Ok(())
}
