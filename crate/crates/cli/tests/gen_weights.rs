use nriqa_cli::args::GenWeightsArgs;
use nriqa_cli::commands;
use nriqa_cli::RunManifest;
use nriqa_core::quality::defaults;
use nriqa_core::quality::training::DEFAULT_SEED;
use tempfile::tempdir;

// Retrains every shipped model from scratch; takes a couple of minutes.
#[test]
fn retraining_reproduces_the_shipped_files_byte_for_byte() {
    let tmp = tempdir().unwrap();
    let files = commands::gen_weights(&GenWeightsArgs {
        seed: DEFAULT_SEED,
        out: tmp.path().to_path_buf(),
    })
    .unwrap();
    let shipped = defaults::files();
    assert_eq!(files.len(), shipped.len());
    for &(name, bytes) in &shipped {
        let (_, fresh) = files.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name} not regenerated"));
        assert!(fresh == bytes, "{name} differs from the shipped copy");
        assert_eq!(std::fs::read(tmp.path().join(name)).unwrap(), bytes);
    }
    let m: RunManifest =
        serde_json::from_slice(&std::fs::read(tmp.path().join("gen-weights.run.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(DEFAULT_SEED));
    assert_eq!(m.outputs.len(), shipped.len());
}
