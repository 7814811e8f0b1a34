//! Save a model to the binary weight container and load it back, bit for
//! bit, then show what the manifest records.
//!
//!     cargo run --release --example weights_roundtrip

use msnet::arch::{build_model, KernelProtocol, ModelVariant, Parts};
use msnet::io::weights::{load_from_bytes, read_container, save_to_bytes};

fn main() -> msnet::Result<()> {
    let variant = ModelVariant::xs();
    let model = build_model::<f32>(&variant, KernelProtocol::hks(), Parts::Backbone, 42)?;
    let bytes = save_to_bytes(&model)?;

    let (manifest, payload) = read_container(&bytes)?;
    println!(
        "container: {} bytes total, {} payload, {} tensors, format v{}",
        bytes.len(),
        payload.len(),
        manifest.entries.len(),
        manifest.version
    );
    for entry in manifest.entries.iter().take(6) {
        println!(
            "  {:<44} {:?} {} @ {}",
            entry.name, entry.shape, entry.dtype, entry.byte_offset
        );
    }
    println!("  ...");

    // Load into a differently initialized model of the same shape.
    let mut target = build_model::<f32>(&variant, KernelProtocol::hks(), Parts::Backbone, 7)?;
    load_from_bytes(&bytes, &mut target)?;
    assert_eq!(save_to_bytes(&target)?, bytes, "round trip must be bit-exact");
    println!("round trip bit-exact");

    // A model with a different architecture is rejected with a diff.
    let mut wrong = build_model::<f32>(&ModelVariant::s(), KernelProtocol::hks(), Parts::Backbone, 7)?;
    match load_from_bytes(&bytes, &mut wrong) {
        Err(e) => println!("loading into the wrong architecture fails as expected:\n{e}"),
        Ok(_) => unreachable!("shape mismatch must be rejected"),
    }
    Ok(())
}
