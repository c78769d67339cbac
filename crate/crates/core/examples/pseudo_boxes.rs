//! Fill in boxes between sparse box annotations by tracking, snapping to
//! the clicked point whenever the tracker wanders too far.

use socl::backbone::{init_backbone, Arch};
use socl::data::{render_video, SyntheticSpec};
use socl::geometry::BoxF;
use socl::tracker::{evaluate, pseudo_boxes_schema, schema_cost, SchemaConfig, SiameseTracker, TrackerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = init_backbone(&Arch::desk(), 0)?;
    let spec = SyntheticSpec { n_videos: 4, frames_per_video: 30, ..SyntheticSpec::default() };
    for t in [5, 10, 30] {
        let schema = SchemaConfig { t, ..SchemaConfig::default() };
        let (mut pred, mut truth, mut corrected) = (Vec::new(), Vec::new(), 0);
        for v in 0..spec.n_videos {
            let video = render_video(&spec, v)?;
            let points: Vec<[f64; 2]> = video.boxes.iter().map(|b| [b.cx, b.cy]).collect();
            let sparse: Vec<BoxF> = video.boxes.iter().step_by(t).copied().collect();
            let mut tracker = SiameseTracker::new(&params, TrackerConfig::default());
            let out = pseudo_boxes_schema(&mut tracker, &video.frames, &points, &sparse, &schema)?;
            corrected += out.corrected.iter().filter(|&&c| c).count();
            pred.push(out.boxes);
            truth.push(video.boxes);
        }
        let m = evaluate(&pred, &truth)?;
        println!(
            "T={t:<3} {:.2} s/frame  corrections {corrected:>3}  success AUC {:.3}  mean error {:.1} px",
            schema_cost(&schema)?,
            m.success_auc,
            m.mean_center_error
        );
    }
    Ok(())
}
