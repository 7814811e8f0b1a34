//! Binary weight container (`.msw`).
//!
//! Layout: 8 bytes little-endian header length, then a UTF-8 JSON manifest
//! (format version plus one entry per tensor: name, shape, dtype,
//! byte_offset, byte_length), padded so the payload starts 64-byte aligned,
//! then the payload of concatenated raw little-endian IEEE-754 values, each
//! entry aligned to 64 bytes. Offsets are relative to the payload start.
//!
//! Loading is strict: version, alignment, bounds, overlap and byte lengths
//! are validated, and the set of names/shapes must match the target model
//! exactly — any difference is rejected with a full diff listing. A
//! save/load round trip reproduces every value bit-exactly.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ModelGraph;
use crate::error::{Error, Result};
use crate::io::json::to_canonical_string;
use crate::nn::StateSink;
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::WeightFormat { detail: detail.into() }
}

/// Snapshot of a model's named state (parameters and buffers).
fn collect_state<T: Element>(model: &ModelGraph<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    struct Collect<T: Element>(Vec<(String, Vec<usize>, Vec<T>)>);
    impl<T: Element> StateSink<T> for Collect<T> {
        fn param(&mut self, name: &str, t: &Tensor<T>) {
            self.0.push((name.to_string(), t.shape().to_vec(), t.to_vec()));
        }
        fn buffer(&mut self, name: &str, shape: &[usize], data: &RefCell<Vec<T>>) {
            self.0.push((name.to_string(), shape.to_vec(), data.borrow().clone()));
        }
    }
    let mut c = Collect(Vec::new());
    model.visit_state(&mut c);
    c.0
}

/// Serialize a model's state into the container format.
pub fn save_to_bytes<T: Element>(model: &ModelGraph<T>) -> Result<Vec<u8>> {
    let state = collect_state(model);
    let elem = T::DTYPE.size_bytes();

    let mut entries = Vec::with_capacity(state.len());
    let mut offset = 0usize;
    for (name, shape, data) in &state {
        let len = data.len() * elem;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: T::DTYPE.name().to_string(),
            byte_offset: offset as u64,
            byte_length: len as u64,
        });
        offset = align_up(offset + len);
    }
    let payload_len = offset;

    let manifest = Manifest { version: FORMAT_VERSION, entries };
    let mut header = to_canonical_string(&manifest)?.into_bytes();
    // Pad the header so the payload base lands on a 64-byte boundary.
    let padded = align_up(8 + header.len()) - 8;
    header.resize(padded, b' ');

    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let payload_base = out.len();
    out.resize(payload_base + payload_len, 0);
    for ((_, _, data), entry) in state.iter().zip(&manifest.entries) {
        let mut at = payload_base + entry.byte_offset as usize;
        for v in data {
            let b = v.to_le_bytes_vec();
            out[at..at + b.len()].copy_from_slice(&b);
            at += b.len();
        }
    }
    Ok(out)
}

pub fn save_weights<T: Element>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    fs::write(path, save_to_bytes(model)?)?;
    Ok(())
}

/// Parse and structurally validate a container, returning the manifest and
/// the payload slice.
pub fn read_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(fmt_err("file shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(fmt_err("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|_| fmt_err("header is not valid UTF-8"))?;
    let manifest: Manifest = serde_json::from_str(header.trim_end())
        .map_err(|e| fmt_err(format!("invalid manifest JSON: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(fmt_err(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let payload = &bytes[8 + header_len..];

    // Per-entry structural checks.
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let elem = match e.dtype.as_str() {
            "f32" => 4u64,
            "f64" => 8u64,
            other => return Err(fmt_err(format!("entry `{}`: unknown dtype `{other}`", e.name))),
        };
        if e.byte_offset % ALIGN as u64 != 0 {
            return Err(fmt_err(format!(
                "entry `{}`: offset {} violates 64-byte alignment",
                e.name, e.byte_offset
            )));
        }
        let numel: u64 = e.shape.iter().map(|&x| x as u64).product();
        if e.byte_length != numel * elem {
            return Err(fmt_err(format!(
                "entry `{}`: byte_length {} does not match shape {:?} x {elem} bytes",
                e.name, e.byte_length, e.shape
            )));
        }
        if e.byte_offset + e.byte_length > payload.len() as u64 {
            return Err(fmt_err(format!(
                "entry `{}`: truncated payload ({} bytes needed, {} present)",
                e.name,
                e.byte_offset + e.byte_length,
                payload.len()
            )));
        }
        spans.push((e.byte_offset, e.byte_length, &e.name));
    }
    spans.sort_by_key(|s| s.0);
    for pair in spans.windows(2) {
        let (off_a, len_a, name_a) = pair[0];
        let (off_b, _, name_b) = pair[1];
        if off_a + len_a > off_b {
            return Err(fmt_err(format!("entries `{name_a}` and `{name_b}` overlap")));
        }
    }
    Ok((manifest, payload))
}

/// Load a container into a model. Names, shapes and dtypes must match the
/// target exactly; mismatches produce a diff naming every discrepancy.
pub fn load_from_bytes<T: Element>(bytes: &[u8], model: &mut ModelGraph<T>) -> Result<()> {
    let (manifest, payload) = read_container(bytes)?;

    let model_state: BTreeMap<String, Vec<usize>> = collect_state(model)
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect();
    let file_state: BTreeMap<String, &ManifestEntry> =
        manifest.entries.iter().map(|e| (e.name.clone(), e)).collect();
    if file_state.len() != manifest.entries.len() {
        return Err(fmt_err("duplicate entry names in manifest"));
    }

    let mut diff = Vec::new();
    for (name, shape) in &model_state {
        match file_state.get(name) {
            None => diff.push(format!("missing from file: {name}")),
            Some(e) => {
                if &e.shape != shape {
                    diff.push(format!(
                        "shape mismatch for {name}: model {:?} vs file {:?}",
                        shape, e.shape
                    ));
                }
                if e.dtype != T::DTYPE.name() {
                    diff.push(format!(
                        "dtype mismatch for {name}: model {} vs file {}",
                        T::DTYPE.name(),
                        e.dtype
                    ));
                }
            }
        }
    }
    for name in file_state.keys() {
        if !model_state.contains_key(name) {
            diff.push(format!("unexpected in file: {name}"));
        }
    }
    if !diff.is_empty() {
        diff.sort();
        return Err(Error::WeightMismatch { diff });
    }

    let decode = |e: &ManifestEntry| -> Vec<T> {
        let start = e.byte_offset as usize;
        let elem = T::DTYPE.size_bytes();
        payload[start..start + e.byte_length as usize]
            .chunks_exact(elem)
            .map(T::from_le_slice)
            .collect()
    };

    // Buffers first (through the shared-state visitor), then parameters.
    struct FillBuffers<'a, T: Element> {
        file: &'a BTreeMap<String, &'a ManifestEntry>,
        decode: &'a dyn Fn(&ManifestEntry) -> Vec<T>,
    }
    impl<T: Element> StateSink<T> for FillBuffers<'_, T> {
        fn param(&mut self, _name: &str, _t: &Tensor<T>) {}
        fn buffer(&mut self, name: &str, _shape: &[usize], data: &RefCell<Vec<T>>) {
            let entry = self.file.get(name).expect("diff checked");
            *data.borrow_mut() = (self.decode)(entry);
        }
    }
    model.visit_state(&mut FillBuffers { file: &file_state, decode: &decode });

    let mut failure = None;
    model.visit_params_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let entry = file_state.get(name).expect("diff checked");
        match Tensor::param(&entry.shape, decode(entry)) {
            Ok(t) => *tensor = t,
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_weights<T: Element>(path: &Path, model: &mut ModelGraph<T>) -> Result<()> {
    let bytes = fs::read(path)?;
    load_from_bytes(&bytes, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, KernelProtocol, ModelVariant, Parts};
    use crate::blocks::BranchKind;

    fn small_variant() -> ModelVariant {
        ModelVariant {
            name: "unit".into(),
            widen: 1.0,
            base_channels: [8, 8, 16, 16, 16],
            block_kinds: [BranchKind::Sibm, BranchKind::Ibm],
            blocks_per_stage: [1, 1, 1, 1],
            expansion: 2,
            branches: 3,
            gql_stages: vec![2, 3, 4],
            query_dim: 16,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Full, 11).unwrap();
        let bytes = save_to_bytes(&model).unwrap();
        let mut target =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Full, 999).unwrap();
        load_from_bytes(&bytes, &mut target).unwrap();
        let a = collect_state(&model);
        let b = collect_state(&target);
        assert_eq!(a.len(), b.len());
        for ((na, sa, da), (nb, sb, db)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            let bits_a: Vec<u32> = da.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = db.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "value mismatch in {na}");
        }
    }

    #[test]
    fn manifest_audit_byte_lengths() {
        let model =
            build_model::<f64>(&small_variant(), KernelProtocol::hks(), Parts::Backbone, 1)
                .unwrap();
        let bytes = save_to_bytes(&model).unwrap();
        let (manifest, payload) = read_container(&bytes).unwrap();
        assert!(!manifest.entries.is_empty());
        for e in &manifest.entries {
            let numel: u64 = e.shape.iter().map(|&x| x as u64).product();
            assert_eq!(e.byte_length, numel * 8, "entry {}", e.name);
            assert_eq!(e.byte_offset % 64, 0, "entry {}", e.name);
            assert!(e.byte_offset + e.byte_length <= payload.len() as u64);
        }
    }

    #[test]
    fn renamed_tensor_rejected_with_diff() {
        let model =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Backbone, 2)
                .unwrap();
        let bytes = save_to_bytes(&model).unwrap();
        let pos = bytes
            .windows("backbone.stem.0.conv.weight".len())
            .position(|w| w == b"backbone.stem.0.conv.weight")
            .unwrap();
        let mut corrupted = bytes.clone();
        corrupted[pos..pos + 8].copy_from_slice(b"backbonX");

        let mut target =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Backbone, 3)
                .unwrap();
        match load_from_bytes(&corrupted, &mut target) {
            Err(Error::WeightMismatch { diff }) => {
                assert!(
                    diff.iter()
                        .any(|l| l.contains("unexpected in file: backbonX.stem.0.conv.weight")),
                    "diff must name the renamed tensor: {diff:?}"
                );
                assert!(
                    diff.iter()
                        .any(|l| l.contains("missing from file: backbone.stem.0.conv.weight")),
                    "diff must name the absent tensor: {diff:?}"
                );
            }
            other => panic!("expected WeightMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_version_and_alignment_rejected() {
        let model =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Backbone, 4)
                .unwrap();
        let bytes = save_to_bytes(&model).unwrap();

        // Cut into the last entry's data proper (the container may carry
        // trailing alignment padding that is legitimately disposable).
        let (manifest, _) = read_container(&bytes).unwrap();
        let data_end = 8
            + u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize
            + manifest
                .entries
                .iter()
                .map(|e| (e.byte_offset + e.byte_length) as usize)
                .max()
                .unwrap();
        let truncated = &bytes[..data_end - 1];
        let mut target =
            build_model::<f32>(&small_variant(), KernelProtocol::hks(), Parts::Backbone, 5)
                .unwrap();
        assert!(matches!(
            load_from_bytes(truncated, &mut target),
            Err(Error::WeightFormat { .. })
        ));

        // Same-length in-header edits keep offsets valid.
        let patch_header = |needle: &str, replacement: &str| -> Vec<u8> {
            assert_eq!(needle.len(), replacement.len());
            let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
            let mut out = bytes.clone();
            let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
            let at = 8 + header.find(needle).expect("needle present");
            out[at..at + needle.len()].copy_from_slice(replacement.as_bytes());
            out
        };

        let bad_version = patch_header("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            load_from_bytes(&bad_version, &mut target),
            Err(Error::WeightFormat { .. })
        ));

        let bad_alignment = patch_header("\"byte_offset\": 0,", "\"byte_offset\": 3,");
        assert!(matches!(
            load_from_bytes(&bad_alignment, &mut target),
            Err(Error::WeightFormat { .. })
        ));
    }
}
