use std::collections::HashSet;

use adc::data::{build_dataset, generate_dataset, generate_pair, load_dataset, read_manifest, regenerate, GenConfig};
use adc::stats::{ks_one_sample, ks_two_sample};

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn lesion_fractions_follow_the_configured_distribution() {
    let cfg = GenConfig::easy(32);
    let fracs: Vec<f64> = (0..10_000u64)
        .map(|s| generate_pair(&cfg, s).unwrap().meta.lesion_fraction)
        .collect();
    assert!(fracs.iter().all(|&f| f >= cfg.min_frac && f <= cfg.max_frac));
    let span = cfg.max_frac - cfg.min_frac;
    let d = ks_one_sample(&fracs, |x| ((x - cfg.min_frac) / span).clamp(0.0, 1.0));
    assert!(d < 0.05, "KS distance {d}");
}

#[test]
fn splits_are_unique_and_indistinguishable() {
    let ds = generate_dataset(&GenConfig::hard(16), 512, 128, 0).unwrap();
    let seeds: HashSet<u64> = ds.train.iter().chain(&ds.test).map(|p| p.meta.seed).collect();
    assert_eq!(seeds.len(), 640);
    let a: Vec<f64> = ds.train.iter().map(|p| p.meta.lesion_fraction).collect();
    let b: Vec<f64> = ds.test.iter().map(|p| p.meta.lesion_fraction).collect();
    let (_, p) = ks_two_sample(&a, &b);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn regeneration_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let m = build_dataset(&GenConfig::hard(16), 24, 8, 3, &a, false, Some("abc".into())).unwrap();
    assert_eq!(read_manifest(&a).unwrap(), m);
    let m2 = regenerate(&m, &b, false).unwrap();
    assert_eq!(m, m2);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());

    // Rebuilding in place needs overwrite and gives the same files again.
    assert!(regenerate(&m, &a, false).is_err());
    regenerate(&m, &a, true).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn loaded_dataset_matches_generated_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenConfig::easy(16);
    build_dataset(&cfg, 6, 2, 9, tmp.path(), false, None).unwrap();
    let loaded = load_dataset(tmp.path()).unwrap();
    let fresh = generate_dataset(&cfg, 6, 2, 9).unwrap();
    assert_eq!(loaded.train.len(), 6);
    assert_eq!(loaded.test.len(), 2);
    for (l, f) in loaded.train.iter().chain(&loaded.test).zip(fresh.train.iter().chain(&fresh.test)) {
        assert_eq!(l.mask, f.mask);
        assert_eq!(l.meta.seed, f.meta.seed);
        // 16-bit PNG quantization.
        let worst = l.image.iter().zip(&f.image).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 2.0 / 65535.0 + 1e-6, "{worst}");
    }

    // A corrupted file is caught by its checksum.
    let victim = tmp.path().join("masks/train_00000.png");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    assert!(load_dataset(tmp.path()).is_err());
}
