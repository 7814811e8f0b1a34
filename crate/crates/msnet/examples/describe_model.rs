//! Build a model variant and inspect its structure.
//!
//!     cargo run --release --example describe_model

use msnet::analysis::cost::count_params_macs;
use msnet::arch::{build_model, KernelProtocol, ModelVariant, Parts};

fn main() -> msnet::Result<()> {
    let variant = ModelVariant::xs();
    let model = build_model::<f32>(&variant, KernelProtocol::hks(), Parts::Full, 0)?;

    println!(
        "variant {} — widen {:.3}, branches {}, expansion {}, query {}x{}",
        variant.name,
        variant.widen,
        variant.branches,
        variant.expansion,
        variant.branches,
        variant.query_dim
    );
    println!(
        "resolved widths: stem {}, stages {:?}, split groups {:?}, neck {:?}",
        model.widths.stem, model.widths.stages, model.widths.branch, model.widths.neck
    );

    let cost = count_params_macs(&model, (640, 640))?;
    println!("\n{:<10} {:>14} {:>16}", "region", "params", "macs @ 640x640");
    for region in &cost.regions {
        println!("{:<10} {:>14} {:>16}", region.region, region.params, region.macs);
    }
    println!(
        "\ntotal {:.3}M parameters, {:.3}G MACs across {} layers",
        cost.total_params as f64 / 1e6,
        cost.total_macs as f64 / 1e9,
        cost.layers.len()
    );

    // Where each depthwise kernel size lives.
    let mut kernels: Vec<(String, usize)> = Vec::new();
    for layer in model.layers() {
        if layer.is_depthwise_conv() {
            if let msnet::arch::LayerOp::Conv { kernel, .. } = layer.op {
                kernels.push((layer.region.label(), kernel));
            }
        }
    }
    kernels.dedup();
    println!("\ndepthwise kernels by region: {kernels:?}");
    Ok(())
}
