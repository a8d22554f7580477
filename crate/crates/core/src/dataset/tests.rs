use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn vocab(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Ring {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn ann(w: usize, h: usize, mpp: f64, shapes: Vec<(&str, Ring)>) -> AnnotationSet {
    AnnotationSet {
        image_id: "img".into(),
        width: w,
        height: h,
        mpp,
        shapes: shapes
            .into_iter()
            .map(|(c, ring)| Shape {
                class: c.into(),
                ring,
            })
            .collect(),
        unknown_regions: vec![],
    }
}

/// Brute-force distance from a pixel center to a densely sampled ring outline.
fn outline_distance(ring: &Ring, px: f64, py: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        let steps = 2000;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
            best = best.min(((px - x).powi(2) + (py - y).powi(2)).sqrt());
        }
    }
    best
}

#[test]
fn whole_image_window_gets_four_pixel_frame() {
    let v = vocab(&["window"]);
    let a = ann(40, 30, 0.025, vec![("window", rect(0.0, 0.0, 40.0, 30.0))]);
    let m = rasterize_multilabel(&a, (40, 30), 0.025, &v, &EdgeBandRules::default()).unwrap();
    for y in 0..30 {
        for x in 0..40 {
            let d = x.min(y).min(39 - x).min(29 - y);
            let expect = if d < 4 { Label::Edg } else { Label::Pos };
            assert_eq!(m.get(0, x, y), expect, "({x},{y})");
        }
    }
}

#[test]
fn band_matches_distance_oracle_at_two_resolutions() {
    for &(mpp, band) in &[(0.025, 4usize), (0.05, 2usize)] {
        let rules = EdgeBandRules::default();
        assert_eq!(rules.band_px("window", mpp), band);
        let ring: Ring = vec![[10.0, 8.0], [30.5, 6.0], [34.0, 27.0], [12.0, 30.0]];
        let v = vocab(&["window"]);
        let a = ann(48, 40, mpp, vec![("window", ring.clone())]);
        let m = rasterize_multilabel(&a, (48, 40), mpp, &v, &rules).unwrap();
        for y in 0..40 {
            for x in 0..48 {
                let d = outline_distance(&ring, x as f64 + 0.5, y as f64 + 0.5);
                let got = m.get(0, x, y);
                if d < band as f64 - 0.01 {
                    assert_eq!(got, Label::Edg, "({x},{y}) d={d}");
                } else if d > band as f64 + 0.01 {
                    assert_ne!(got, Label::Edg, "({x},{y}) d={d}");
                }
            }
        }
    }
}

#[test]
fn facade_band_is_wider_and_vertical_only() {
    let v = vocab(&["facade"]);
    let mpp = 0.05;
    let a = ann(60, 40, mpp, vec![("facade", rect(10.0, 10.0, 50.0, 30.0))]);
    let m = rasterize_multilabel(&a, (60, 40), mpp, &v, &EdgeBandRules::default()).unwrap();
    let band = (0.3048f64 / mpp).round() as usize;
    assert_eq!(band, 6);
    // horizontal edges carry no band; interior next to the top edge stays POS
    assert_eq!(m.get(0, 30, 10), Label::Pos);
    assert_eq!(m.get(0, 30, 9), Label::Neg);
    // vertical edge at x = 10 bands 6 px on each side
    assert_eq!(m.get(0, 4, 20), Label::Edg);
    assert_eq!(m.get(0, 3, 20), Label::Neg);
    assert_eq!(m.get(0, 15, 20), Label::Edg);
    assert_eq!(m.get(0, 16, 20), Label::Pos);
}

#[test]
fn empty_annotation_is_all_neg() {
    let v = cmp_vocabulary();
    let a = ann(8, 6, 0.025, vec![]);
    let m = rasterize_multilabel(&a, (8, 6), 0.025, &v, &EdgeBandRules::default()).unwrap();
    for c in 0..v.len() {
        assert!(m.plane(c).iter().all(|&x| x == Label::Neg as u8));
    }
}

#[test]
fn overlapping_window_and_balcony_are_both_pos() {
    let v = vocab(&["window", "balcony"]);
    let a = ann(
        60,
        60,
        0.05,
        vec![
            ("window", rect(10.0, 10.0, 40.0, 45.0)),
            ("balcony", rect(5.0, 30.0, 45.0, 55.0)),
        ],
    );
    let m = rasterize_multilabel(&a, (60, 60), 0.05, &v, &EdgeBandRules::default()).unwrap();
    assert_eq!(m.get(0, 25, 37), Label::Pos);
    assert_eq!(m.get(1, 25, 37), Label::Pos);
}

#[test]
fn polygon_outside_image_is_clipped() {
    let v = vocab(&["window"]);
    let a = ann(10, 10, 0.05, vec![("window", rect(-20.0, -5.0, 5.0, 5.0))]);
    let m = rasterize_multilabel(&a, (10, 10), 0.05, &v, &EdgeBandRules::default()).unwrap();
    assert_eq!(m.get(0, 0, 0), Label::Pos);
    assert_eq!(m.get(0, 9, 9), Label::Neg);
}

#[test]
fn unknown_region_overrides_every_class() {
    let v = vocab(&["window", "door"]);
    let mut a = ann(20, 20, 0.05, vec![("window", rect(0.0, 0.0, 20.0, 20.0))]);
    a.unknown_regions.push(rect(5.0, 5.0, 10.0, 10.0));
    let m = rasterize_multilabel(&a, (20, 20), 0.05, &v, &EdgeBandRules::default()).unwrap();
    assert_eq!(m.get(0, 7, 7), Label::Unk);
    assert_eq!(m.get(1, 7, 7), Label::Unk);
    assert_eq!(m.get(1, 12, 12), Label::Neg);
}

#[test]
fn rasterize_rejects_bad_inputs() {
    let v = vocab(&["window"]);
    let a = ann(10, 10, 0.05, vec![("tree", rect(0.0, 0.0, 5.0, 5.0))]);
    assert!(rasterize_multilabel(&a, (10, 10), 0.05, &v, &EdgeBandRules::default()).is_err());
    let a = ann(10, 10, 0.05, vec![]);
    assert!(rasterize_multilabel(&a, (11, 10), 0.05, &v, &EdgeBandRules::default()).is_err());
    assert!(rasterize_multilabel(&a, (10, 10), 0.0, &v, &EdgeBandRules::default()).is_err());
}

#[test]
fn median_frequency_examples() {
    let c = vocab(&["a", "b", "c"]);
    let w = median_frequency_weights(&c, &[0.2, 0.3, 0.5]).unwrap();
    for (a, e) in w.iter().zip([1.5, 1.0, 0.6]) {
        assert!((a - e).abs() < 1e-12);
    }
    assert_eq!(median_frequency_weights(&c, &[0.3, 0.3, 0.3]).unwrap(), vec![1.0; 3]);
    let c2 = vocab(&["a", "b"]);
    let w = median_frequency_weights(&c2, &[0.1, 0.4]).unwrap();
    assert!((w[0] - 2.5).abs() < 1e-12 && (w[1] - 0.625).abs() < 1e-12);
    let err = median_frequency_weights(&c, &[0.2, 0.0, 0.5]).unwrap_err().to_string();
    assert!(err.contains("'b'"), "{err}");
}

#[test]
fn class_stats_merge_and_frequency() {
    let v = vocab(&["window"]);
    let a = ann(10, 10, 1.0, vec![("window", rect(0.0, 0.0, 5.0, 10.0))]);
    let m = rasterize_multilabel(&a, (10, 10), 1.0, &v, &EdgeBandRules::default()).unwrap();
    let mut s = ClassStats::from_mask(&m);
    let t = s.clone();
    s.merge(&t).unwrap();
    assert_eq!(s.pixels, 200);
    assert_eq!(s.counts[0].iter().sum::<u64>(), 200);
    assert!((s.frequency(0) - 0.5).abs() < 1e-12);
}

#[test]
fn joint_labels_paint_in_order_and_ignore_edges() {
    let v = vocab(&["balcony", "window"]);
    let mut m = MultiLabelMask::new(3, 1, v).unwrap();
    m.set(0, 0, 0, Label::Pos);
    m.set(0, 1, 0, Label::Pos);
    m.set(1, 1, 0, Label::Pos);
    m.set(1, 2, 0, Label::Edg);
    let joint = vocab(&["background", "window", "balcony"]);
    let j = joint_labels(&m, &joint, &CMP_PAINT_ORDER).unwrap();
    assert_eq!(j, vec![2, 1, IGNORE_LABEL]);
}

fn sample_pair(w: u32, h: u32) -> (RgbImage, MultiLabelMask) {
    let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 90]));
    let v = vocab(&["window", "balcony"]);
    let a = ann(
        w as usize,
        h as usize,
        0.05,
        vec![
            ("window", rect(8.0, 8.0, w as f64 - 8.0, h as f64 / 2.0)),
            ("balcony", rect(4.0, h as f64 / 3.0, w as f64 - 4.0, h as f64 - 6.0)),
        ],
    );
    let m = rasterize_multilabel(&a, (w as usize, h as usize), 0.05, &v, &EdgeBandRules::default()).unwrap();
    (img, m)
}

#[test]
fn zero_displacement_is_identity() {
    let (img, m) = sample_pair(40, 32);
    let (i2, m2, s) = augment_perspective(&img, &m, 0.0, 3).unwrap();
    assert_eq!(i2, img);
    assert_eq!(m2, m);
    assert_eq!(s.displacements, [[0.0; 2]; 4]);
}

#[test]
fn augmentation_is_deterministic_per_seed() {
    let (img, m) = sample_pair(40, 32);
    let a = augment_perspective(&img, &m, 0.2, 17).unwrap();
    let b = augment_perspective(&img, &m, 0.2, 17).unwrap();
    assert_eq!(a, b);
    let c = augment_perspective(&img, &m, 0.2, 18).unwrap();
    assert_ne!(a.2, c.2);
}

#[test]
fn corner_displacement_bound_over_many_draws() {
    let img = RgbImage::new(512, 8);
    let m = MultiLabelMask::new(512, 8, vocab(&["window"])).unwrap();
    // warping is irrelevant for the bound; draw displacements only
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = 0.2 * 512.0;
        for _ in 0..8 {
            let d: f64 = rng.random_range(-limit..=limit);
            assert!(d.abs() <= 102.4);
        }
    }
    for seed in 0..20u64 {
        let (_, _, s) = augment_perspective(&img, &m, 0.2, seed).unwrap();
        assert!(s.displacements.iter().flatten().all(|d| d.abs() <= 102.4 + 1e-12));
    }
}

#[test]
fn augmentation_never_turns_pos_into_neg() {
    let (img, m) = sample_pair(48, 40);
    for seed in 0..25 {
        let (_, out, s) = augment_perspective(&img, &m, 0.2, seed).unwrap();
        let h = nalgebra::Matrix3::from_fn(|r, c| s.homography[r][c]);
        let inv = h.try_inverse().unwrap();
        for y in 0..40 {
            for x in 0..48 {
                let Some((sx, sy)) = apply_homography(&inv, x as f64 + 0.5, y as f64 + 0.5) else {
                    continue;
                };
                if sx < 0.0 || sy < 0.0 || sx >= 48.0 || sy >= 40.0 {
                    assert_eq!(out.get(0, x, y), Label::Unk);
                    continue;
                }
                for c in 0..2 {
                    if m.get(c, sx.floor() as usize, sy.floor() as usize) == Label::Pos {
                        assert_ne!(out.get(c, x, y), Label::Neg);
                    }
                }
            }
        }
    }
}

#[test]
fn decode_rejects_out_of_range_value_with_location() {
    let v = vocab(&["window", "door"]);
    let m = MultiLabelMask::new(4, 3, v).unwrap();
    let mut files: BTreeMap<String, Vec<u8>> = encode_mask(&m, "f").unwrap().into_iter().collect();
    let mut plane = vec![0u8; 12];
    plane[6] = 7;
    files.insert(mask_plane_name("f", "door"), encode_plane_png(&plane, 4, 3).unwrap());
    let err = decode_mask("f", |n| Ok(files[n].clone()), None).unwrap_err().to_string();
    assert!(err.contains("door") && err.contains("(2, 1)"), "{err}");
}

#[test]
fn decode_rejects_unknown_class_and_empty_vocabulary() {
    let m = MultiLabelMask::new(2, 2, vocab(&["tree"])).unwrap();
    let files: BTreeMap<String, Vec<u8>> = encode_mask(&m, "f").unwrap().into_iter().collect();
    let v = cmp_vocabulary();
    assert!(decode_mask("f", |n| Ok(files[n].clone()), Some(&v)).is_err());
    assert!(MultiLabelMask::new(2, 2, vec![]).is_err());
    let empty = serde_json::to_vec(&MaskManifest {
        image_id: "e".into(),
        width: 2,
        height: 2,
        classes: vec![],
    })
    .unwrap();
    assert!(decode_mask("e", |_| Ok(empty.clone()), None).is_err());
}

#[test]
fn decode_rejects_dimension_mismatch() {
    let m = MultiLabelMask::new(4, 3, vocab(&["window"])).unwrap();
    let mut files: BTreeMap<String, Vec<u8>> = encode_mask(&m, "f").unwrap().into_iter().collect();
    files.insert(mask_plane_name("f", "window"), encode_plane_png(&[0; 4], 2, 2).unwrap());
    assert!(decode_mask("f", |n| Ok(files[n].clone()), None).is_err());
}

proptest! {
    #[test]
    fn mask_round_trip(w in 1usize..12, h in 1usize..12, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let planes = (0..k).map(|_| (0..w * h).map(|_| rng.random_range(0..4u8)).collect()).collect();
        let m = MultiLabelMask::from_planes(w, h, classes, planes).unwrap();
        let files: BTreeMap<String, Vec<u8>> = encode_mask(&m, "p").unwrap().into_iter().collect();
        let back = decode_mask("p", |n| Ok(files[n].clone()), None).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn rasterization_partitions_each_class(
        x0 in 0.0f64..30.0, y0 in 0.0f64..30.0, dw in 1.0f64..30.0, dh in 1.0f64..30.0,
        mpp in 0.02f64..0.2,
    ) {
        let v = vocab(&["window", "facade"]);
        let mut a = ann(40, 40, mpp, vec![("window", rect(x0, y0, x0 + dw, y0 + dh)), ("facade", rect(y0, x0, y0 + dh, x0 + dw))]);
        a.unknown_regions.push(rect(0.0, 0.0, 3.0, 3.0));
        let m = rasterize_multilabel(&a, (40, 40), mpp, &v, &EdgeBandRules::default()).unwrap();
        let s = ClassStats::from_mask(&m);
        for c in &s.counts {
            prop_assert_eq!(c.iter().sum::<u64>(), 1600);
        }
        // every EDG pixel lies within the band of a POS-region boundary pixel
        for ci in 0..2 {
            let band = EdgeBandRules::default().band_px(&v[ci], mpp) as f64;
            let ring = &a.shapes[ci].ring;
            for y in 0..40 {
                for x in 0..40 {
                    if m.get(ci, x, y) == Label::Edg {
                        prop_assert!(outline_distance(ring, x as f64 + 0.5, y as f64 + 0.5) <= band + 0.01);
                    }
                }
            }
        }
    }
}
