//! Track held-out synthetic videos with a random network and, if given, a
//! trained checkpoint.
//!
//!     cargo run --example track_synthetic -- [model.ckpt]

use socl::backbone::{init_backbone, Arch, BackboneParams};
use socl::data::{render_video, SyntheticSpec};
use socl::tracker::{evaluate, track_video, TrackerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch = Arch::desk();
    let mut models = vec![("random".to_string(), init_backbone(&arch, 0)?)];
    if let Some(path) = std::env::args().nth(1) {
        models.push((path.clone(), BackboneParams::load(&path, &arch)?));
    }
    let spec = SyntheticSpec { n_videos: 8, frames_per_video: 32, seed: 1000, ..SyntheticSpec::default() };
    let videos = (0..spec.n_videos).map(|v| render_video(&spec, v)).collect::<Result<Vec<_>, _>>()?;
    let truth: Vec<_> = videos.iter().map(|v| v.boxes.clone()).collect();
    let cfg = TrackerConfig::default();
    for (name, params) in &models {
        let mut pred = Vec::new();
        for video in &videos {
            let traj = track_video(params, &video.frames, &video.boxes[0], &cfg)?;
            pred.push(traj.iter().map(|p| p.bbox()).collect());
        }
        let m = evaluate(&pred, &truth)?;
        println!(
            "{name}: precision@5/10/20 {:.3} {:.3} {:.3}, mean error {:.1} px, success AUC {:.3}",
            m.precision_5, m.precision_10, m.precision_20, m.mean_center_error, m.success_auc
        );
    }
    Ok(())
}
