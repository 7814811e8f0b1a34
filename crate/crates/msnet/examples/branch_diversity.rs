//! Inter-branch feature diversity of a model on noise inputs.
//!
//!     cargo run --release --example branch_diversity

use msnet::analysis::diversity::branch_diversity;
use msnet::arch::{build_model, KernelProtocol, ModelVariant, Parts};
use msnet::rng::Rng;
use msnet::tensor::Tensor;

fn main() -> msnet::Result<()> {
    let model =
        build_model::<f32>(&ModelVariant::xs(), KernelProtocol::hks(), Parts::Backbone, 0)?;
    model.calibrate_norms(160, 2, 0)?;

    let images: Vec<Tensor<f32>> = (0..3)
        .map(|i| {
            let mut rng = Rng::derive(0, &format!("example.image{i}"));
            Tensor::randn(&[1, 3, 160, 160], &mut rng)
        })
        .collect::<msnet::Result<_>>()?;

    let report = branch_diversity(&model, &images)?;
    println!(
        "diversity {:.6e} over {} blocks x {} images ({} branches)",
        report.diversity, report.blocks, report.images, report.branches
    );
    for block in &report.per_block {
        let pairs: Vec<String> = block
            .pairs
            .iter()
            .map(|p| format!("({},{})={:.3e}", p.i, p.j, p.distance))
            .collect();
        println!(
            "  {:<28} {}  skipped {}",
            block.block,
            pairs.join(" "),
            block.skipped_pairs
        );
    }
    Ok(())
}
