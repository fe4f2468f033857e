use std::fs;

use umtl::corpus::{generate_corpus, load_corpus, read_manifest, synthesize, SyntheticConfig, MANIFEST_FILE};
use umtl::UmtlError;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        num_bags: 4,
        patches_per_bag: 16,
        patch_size: 16,
        seed: 5,
        ..SyntheticConfig::default()
    }
}

#[test]
fn written_corpus_reads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let m = generate_corpus(&cfg, dir.path()).unwrap();
    assert_eq!(m.bags.iter().filter(|b| b.slide_label == Some(1)).count(), 2);
    let loaded = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, synthesize(&cfg).unwrap());
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_corpus(&small(), a.path()).unwrap();
    let mb = generate_corpus(&small(), b.path()).unwrap();
    assert_eq!(ma.digest(), mb.digest());
    for d in &ma.bags {
        assert_eq!(fs::read(a.path().join(&d.file)).unwrap(), fs::read(b.path().join(&d.file)).unwrap());
    }
}

#[test]
fn missing_bag_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&small(), dir.path()).unwrap();
    fs::remove_file(dir.path().join(&m.bags[1].file)).unwrap();
    let err = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap_err();
    assert!(matches!(err, UmtlError::MissingFile(_)), "{err}");
}

#[test]
fn corrupted_bag_file_fails_digest_check() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&small(), dir.path()).unwrap();
    let path = dir.path().join(&m.bags[0].file);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    fs::write(&path, bytes).unwrap();
    let err = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap_err();
    assert!(matches!(err, UmtlError::DigestMismatch { .. }), "{err}");
    assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
}
