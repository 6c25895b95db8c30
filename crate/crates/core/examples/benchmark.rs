//! Trains the default model on the synthetic benchmark and prints the
//! per-epoch history. Optional args: loss mode, seed, pixel noise sigma.

use tyrppg::losses::LossMode;
use tyrppg::model::ModelConfig;
use tyrppg::signal::HrBinGrid;
use tyrppg::train::{synth_dataset, train, SynthConfig, TrainConfig};

fn main() -> tyrppg::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: LossMode = args.next().as_deref().unwrap_or("CSL").parse()?;
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let noise: f64 = args.next().map_or(SynthConfig::benchmark().noise_sigma, |s| s.parse().expect("noise sigma"));
    let cfg = SynthConfig {
        noise_sigma: noise,
        ..SynthConfig::benchmark()
    };
    let data = synth_dataset(&cfg, &HrBinGrid::default())?;
    let t = TrainConfig {
        loss_mode: mode,
        seed,
        ..Default::default()
    };
    let out = train(&data, &ModelConfig::default(), &t)?;
    for e in &out.report.history {
        println!(
            "epoch {:2} loss {:.4} c {:?} p {:?} w {:?} heldout_mae {:.2}",
            e.epoch, e.loss, e.loss_c, e.loss_p, e.loss_w, e.heldout_mae
        );
    }
    let r = &out.report;
    println!("initial heldout {:?}", r.initial_heldout);
    println!("best epoch {} heldout {:?}", r.best_epoch, r.heldout);
    println!("train {:?}", r.train);
    println!("wall {:.1}s", r.wall_time_s);
    Ok(())
}
