use std::path::PathBuf;

use ffae::channel::OutputStage;
use ffae::checkpoint::{decode, encode, FORMAT_VERSION, MAGIC};
use ffae::models::{AnyModel, Architecture, BpAutoencoder, CodeParams, FfAutoencoder};
use ffae::numerics::make_rng;
use proptest::prelude::*;

fn corpus() -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/checkpoint_decode");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| { let b = std::fs::read(&p).unwrap(); (p, b) }).collect()
}

fn small_model(seed: u64, ff: bool) -> AnyModel {
    let params = CodeParams::new(2, 3).unwrap();
    let arch = Architecture { encoder_layers: 2, decoder_layers: 2, width: 4 };
    let mut rng = make_rng(seed, 0);
    if ff {
        FfAutoencoder::new(params, arch, OutputStage::Quantize, &mut rng).unwrap().into()
    } else {
        BpAutoencoder::new(params, arch, OutputStage::Normalize, &mut rng).unwrap().into()
    }
}

fn assert_consistent(bytes: &[u8]) {
    if let Ok(model) = decode(bytes) {
        assert_eq!(encode(&model), bytes);
    }
}

#[test]
fn corpus_seeds_decode_as_expected() {
    let files = corpus();
    assert!(files.len() >= 4);
    for (path, bytes) in &files {
        let name = path.file_name().unwrap().to_string_lossy();
        let decoded = decode(bytes);
        if name.starts_with("truncated") || name.starts_with("future") {
            assert!(decoded.is_err(), "{name} should be rejected");
        } else {
            let model = decoded.unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&encode(&model), bytes, "{name}");
        }
    }
}

#[test]
fn future_versions_are_rejected_with_a_version_error() {
    let mut bytes = encode(&small_model(1, false));
    assert_eq!(&bytes[..4], &MAGIC);
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let msg = decode(&bytes).unwrap_err().to_string();
    assert!(msg.contains("version"), "{msg}");
}

proptest! {
    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        assert_consistent(&bytes);
    }

    #[test]
    fn corrupted_checkpoints_never_panic(
        seed in 0u64..4,
        ff in any::<bool>(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut bytes = encode(&small_model(seed, ff));
        for (at, value) in edits {
            let i = at.index(bytes.len());
            bytes[i] = value;
        }
        assert_consistent(&bytes);
        let keep = cut.index(bytes.len() + 1);
        assert_consistent(&bytes[..keep]);
    }
}
