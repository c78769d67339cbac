//! Compute the target objectness prior for one clicked point and write it
//! next to the frame as grayscale heat maps.
//!
//!     cargo run --example top_map -- [out_dir]

use socl::cli::dump_top_visual;
use socl::data::{render_video, SyntheticSpec};
use socl::imaging::save_image;
use socl::top_prior::{top_map_stages, PointAnnotation, TopConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "top_map_out".into());
    std::fs::create_dir_all(&out)?;
    let spec = SyntheticSpec { n_videos: 1, frames_per_video: 4, ..SyntheticSpec::default() };
    let video = render_video(&spec, 0)?;
    let cfg = TopConfig::default();
    for (f, (frame, truth)) in video.frames.iter().zip(&video.boxes).enumerate() {
        let point = PointAnnotation::new(truth.cx, truth.cy, f);
        let stages = top_map_stages(frame, &point, &cfg)?;
        let (px, py) = stages.map.peak();
        println!(
            "frame {f}: {} proposals, {} after nms, peak ({px:.1}, {py:.1}), truth ({:.1}, {:.1})",
            stages.proposals.len(),
            stages.survivors.len(),
            truth.cx,
            truth.cy
        );
        save_image(frame, format!("{out}/frame_{f}.ppm"))?;
        dump_top_visual(&stages.map, format!("{out}/top_{f}.pgm"))?;
    }
    println!("wrote {out}/");
    Ok(())
}
