//! Seconds of annotation per frame when only every T-th frame gets a box.

use socl::tracker::{schema_cost, SchemaConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = SchemaConfig::default();
    println!("point {:.2}s, box {:.2}s: points are {:.1}x faster", base.point_cost_s, base.box_cost_s, base.box_cost_s / base.point_cost_s);
    println!("{:>4} {:>8} {:>10}", "T", "s/frame", "vs boxes");
    for t in [1, 2, 3, 5, 10, 20, 50, 100] {
        let c = schema_cost(&SchemaConfig { t, ..base.clone() })?;
        println!("{t:>4} {c:>8.2} {:>9.1}%", 100.0 * c / base.box_cost_s);
    }
    Ok(())
}
