//! Shift every click 20 px in a random direction and see how far the TOP
//! peak moves compared with exact center clicks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socl::data::{generate_dataset, load_frames, points_from_boxes, SyntheticSpec};
use socl::top_prior::{top_map, PointAnnotation, TopConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec { n_videos: 6, frames_per_video: 8, ..SyntheticSpec::default() };
    let clean = generate_dataset(&spec, dir.path())?;
    let noisy = points_from_boxes(&clean, 20.0, &mut ChaCha8Rng::seed_from_u64(1));
    let frames = load_frames(&clean, dir.path())?;
    let cfg = TopConfig::default();
    for (name, manifest) in [("clean", &clean), ("noisy", &noisy)] {
        let (mut click, mut peak, mut within) = (0.0, 0.0, 0);
        let mut total = 0;
        for (v, video) in manifest.videos.iter().enumerate() {
            for (f, (b, p)) in video.boxes.iter().zip(&video.points).enumerate() {
                let map = top_map(&frames[v][f], &PointAnnotation::new(p[0], p[1], f), &cfg)?;
                let (px, py) = map.peak();
                let d = (px - b.cx).hypot(py - b.cy);
                click += (p[0] - b.cx).hypot(p[1] - b.cy);
                peak += d;
                within += (d <= 8.0) as usize;
                total += 1;
            }
        }
        let n = total as f64;
        println!(
            "{name}: click error {:.1} px, TOP peak error {:.1} px, {:.0}% of peaks within 8 px",
            click / n,
            peak / n,
            100.0 * within as f64 / n
        );
    }
    Ok(())
}
