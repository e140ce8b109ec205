//! IDX parsing against hand-built byte fixtures, toy generation, normalization.

use std::io::Write;

use ibp_core::data::{
    channel_stats, denormalize, generate_toy, load_idx, normalize, parse_idx_images, parse_idx_labels, ToySpec,
};
use proptest::prelude::*;

/// Two 2×2 images, pixels 0, 255, 128, 64 then 1, 2, 3, 4.
const IMAGES: [u8; 24] = [
    0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, //
    0, 255, 128, 64, 1, 2, 3, 4,
];
const LABELS: [u8; 10] = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];

#[test]
fn fixture_pixels_are_scaled_by_255() {
    let (n, r, c, px) = parse_idx_images(&IMAGES).unwrap();
    assert_eq!((n, r, c), (2, 2, 2));
    assert_eq!(&px[..4], &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert_eq!(parse_idx_labels(&LABELS).unwrap(), vec![7, 3]);
}

#[test]
fn wrong_magic_and_truncation_are_rejected() {
    let mut labels_as_images = LABELS;
    labels_as_images[3] = 0x03;
    let err = parse_idx_labels(&labels_as_images).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");
    assert!(parse_idx_images(&IMAGES[..20]).is_err());
    assert!(parse_idx_images(&IMAGES[..3]).is_err());
    assert!(parse_idx_labels(&LABELS[..9]).is_err());
}

#[test]
fn files_load_plain_or_gzipped_and_counts_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab.gz");
    std::fs::write(&img, IMAGES).unwrap();
    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(&LABELS).unwrap();
    std::fs::write(&lab, gz.finish().unwrap()).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.input_shape(), &[1, 2, 2]);
    assert_eq!(ds.labels(), &[7, 3]);

    let one = dir.path().join("one");
    let mut short = LABELS.to_vec();
    short[7] = 1;
    short.pop();
    std::fs::write(&one, short).unwrap();
    assert!(load_idx(&img, &one).is_err());
    assert!(load_idx(&dir.path().join("missing"), &lab).is_err());
}

#[test]
fn normalization_round_trips() {
    let ds = generate_toy(&ToySpec::default()).unwrap();
    let stats = channel_stats(&ds).unwrap();
    let n = normalize(&ds, Some(&stats)).unwrap();
    assert!(n.normalization().applied);
    let back = denormalize(&n).unwrap();
    assert!(back.inputs().max_abs_diff(ds.inputs()).unwrap() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn toy_sets_meet_their_spec(seed in any::<u64>()) {
        let spec = ToySpec { seed, ..ToySpec::default() };
        let ds = generate_toy(&spec).unwrap();
        prop_assert_eq!(ds.len(), 13);
        prop_assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 5);
        let x = ds.inputs().data();
        for i in 0..13 {
            prop_assert!(x[2 * i..2 * i + 2].iter().all(|v| (0.0..=1.0).contains(v)));
            for j in 0..i {
                let d = (x[2 * i] - x[2 * j]).abs().max((x[2 * i + 1] - x[2 * j + 1]).abs());
                prop_assert!(d >= 0.08);
            }
        }
        let again = generate_toy(&spec).unwrap();
        prop_assert_eq!(again.inputs(), ds.inputs());
    }
}

#[test]
fn impossible_toy_spec_gives_up() {
    let spec = ToySpec { point_count: 400, positive_count: 5, max_draws: 5000, ..ToySpec::default() };
    assert!(generate_toy(&spec).is_err());
}
