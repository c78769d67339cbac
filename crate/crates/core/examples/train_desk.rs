//! Train the desk-scale network on a freshly generated synthetic set and
//! print the loss curve.
//!
//!     cargo run --example train_desk -- [steps] [ablation] [out_dir]

use socl::backbone::Arch;
use socl::data::{generate_dataset, SyntheticSpec};
use socl::socl::Ablation;
use socl::top_prior::TopConfig;
use socl::trainer::{fit, TrainConfig, TrainSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let ablation = Ablation::parse(&args.next().unwrap_or_else(|| "full".into()))?;
    let out = args.next().unwrap_or_else(|| "train_desk_out".into());

    let data = tempfile::tempdir()?;
    let spec = SyntheticSpec { n_videos: 16, ..SyntheticSpec::default() };
    let manifest = generate_dataset(&spec, data.path())?;
    let set = TrainSet::load(&manifest, data.path(), &TopConfig::default(), data.path().join("top"))?;
    let cfg = TrainConfig { steps, ablation, log_interval: 10, ..TrainConfig::default() };
    let (state, report) = fit(&set, &Arch::desk(), &cfg, &out, false)?;
    for chunk in report.losses.chunks(steps.div_ceil(10).max(1)) {
        let mean = chunk.iter().map(|l| l.1).sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..{:<5} mean loss {mean:.4}", chunk[0].0, chunk[chunk.len() - 1].0 + 1);
    }
    println!("{} parameters, checkpoint {}", state.params.num_params(), report.checkpoint.display());
    Ok(())
}
