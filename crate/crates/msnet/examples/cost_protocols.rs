//! Compare the cost of kernel-size protocols on the backbone.
//!
//! Ascending kernels put the large, expensive windows at the small deep
//! feature maps, so the protocol costs barely more than all-3x3 while the
//! inverted order pays for large kernels at high resolution.
//!
//!     cargo run --release --example cost_protocols

use msnet::analysis::cost::count_params_macs;
use msnet::arch::{build_model, KernelProtocol, ModelVariant, Parts};

fn main() -> msnet::Result<()> {
    let protocols = [
        [3, 3, 3, 3],
        [5, 5, 5, 5],
        [7, 7, 7, 7],
        [9, 9, 9, 9],
        [11, 11, 11, 11],
        [9, 7, 5, 3],
        [3, 5, 7, 9],
    ];
    let variant = ModelVariant::xs();
    println!("{:<14} {:>12} {:>12}", "protocol", "params", "macs");
    let mut baseline = None;
    for p in protocols {
        let model = build_model::<f32>(&variant, KernelProtocol(p), Parts::Backbone, 0)?;
        let cost = count_params_macs(&model, (640, 640))?;
        let note = match baseline {
            None => {
                baseline = Some(cost.total_macs);
                String::new()
            }
            Some(base) => {
                format!("  ({:+.2}% vs all-3)", (cost.total_macs as f64 / base as f64 - 1.0) * 100.0)
            }
        };
        println!(
            "{:<14} {:>12} {:>12}{note}",
            format!("{:?}", p),
            cost.total_params,
            cost.total_macs
        );
    }
    Ok(())
}
