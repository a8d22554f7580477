use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const NEG: u8 = Label::Neg as u8;
const UNK: u8 = Label::Unk as u8;
const POS: u8 = Label::Pos as u8;
const EDG: u8 = Label::Edg as u8;

fn square_plane(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Vec<u8> {
    let mut p = vec![NEG; w * h];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            p[y * w + x] = POS;
        }
    }
    p
}

/// Brute-force Chebyshev distance to the nearest POS pixel with a NEG/EDG 8-neighbour.
fn exclusion_oracle(plane: &[u8], w: usize, h: usize, b: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| -> Option<u8> {
        (x >= 0 && y >= 0 && x < w as isize && y < h as isize).then(|| plane[y as usize * w + x as usize])
    };
    let mut edge = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(x, y) != Some(POS) {
                continue;
            }
            let touches = (-1..=1).any(|dy| (-1..=1).any(|dx| matches!(at(x + dx, y + dy), Some(NEG) | Some(EDG))));
            if touches {
                edge.push((x, y));
            }
        }
    }
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let known = plane[i] == POS || plane[i] == NEG;
            let near = b > 0 && edge.iter().any(|&(ex, ey)| (ex - x).abs().max((ey - y).abs()) <= b as isize);
            known && !near
        })
        .collect()
}

#[test]
fn all_negative_is_fully_evaluated() {
    let p = vec![NEG; 30 * 20];
    assert!(exclusion_mask_plane(&p, 30, 20, 5).iter().all(|&e| e));
}

#[test]
fn square_gets_an_eleven_pixel_band() {
    let (w, h) = (50, 50);
    let p = square_plane(w, h, 15, 15, 20);
    let m = exclusion_mask_plane(&p, w, h, 5);
    assert_eq!(m, exclusion_oracle(&p, w, h, 5));
    // along the middle row: excluded columns 10..=20 on the left edge
    let row: Vec<bool> = (0..w).map(|x| m[25 * w + x]).collect();
    let excluded: Vec<usize> = (0..w).filter(|&x| !row[x]).collect();
    let left: Vec<usize> = excluded.iter().copied().filter(|&x| x < 25).collect();
    assert_eq!(left, (10..=20).collect::<Vec<_>>());
    assert_eq!(left.len(), 11);
}

#[test]
fn zero_boundary_only_drops_unknown_and_edges() {
    let mut p = square_plane(20, 20, 5, 5, 6);
    p[0] = UNK;
    p[5 * 20 + 5] = EDG;
    let m = exclusion_mask_plane(&p, 20, 20, 0);
    for (i, &e) in m.iter().enumerate() {
        assert_eq!(e, i != 0 && i != 105);
    }
}

fn random_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut p = vec![NEG; w * h];
    for _ in 0..rng.random_range(0..5) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
        let label = [POS, POS, EDG, UNK][rng.random_range(0..4)];
        for y in y0..=y1 {
            for x in x0..=x1 {
                p[y * w + x] = label;
            }
        }
    }
    p
}

proptest! {
    #[test]
    fn exclusion_matches_oracle_and_is_monotone(seed in 0u64..10_000, b in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(1..25), rng.random_range(1..25));
        let p = random_plane(w, h, &mut rng);
        let m = exclusion_mask_plane(&p, w, h, b);
        prop_assert_eq!(&m, &exclusion_oracle(&p, w, h, b));
        let wider = exclusion_mask_plane(&p, w, h, b + 1);
        prop_assert!(m.iter().zip(&wider).all(|(&a, &c)| a || !c));
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gt = square_plane(10, 10, 2, 2, 4);
    let pred: Vec<f32> = gt.iter().map(|&g| if g == POS { 0.9 } else { 0.1 }).collect();
    let m = pixel_metrics(&pred, &gt, &vec![true; 100]).unwrap();
    assert_eq!((m.acc, m.p, m.r, m.f1), (1.0, 1.0, 1.0, 1.0));
    assert!(m.undefined.is_empty());
}

#[test]
fn all_positive_against_half_positive() {
    let gt: Vec<u8> = (0..20).map(|i| if i < 10 { POS } else { NEG }).collect();
    let m = pixel_metrics(&vec![1.0; 20], &gt, &vec![true; 20]).unwrap();
    assert_eq!((m.p, m.r), (0.5, 1.0));
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.counts.total(), 20);
}

#[test]
fn f1_consistency_with_published_row() {
    let v = f1(0.89, 0.64);
    assert!((v - 0.7446).abs() < 5e-5);
    assert_eq!(format!("{v:.2}"), "0.74");
}

#[test]
fn degenerate_metrics_are_flagged() {
    let m = pixel_metrics(&[0.9, 0.1], &[POS, NEG], &[false, false]).unwrap();
    assert_eq!(m.undefined, vec!["acc", "p", "r", "f1"]);
    assert_eq!((m.acc, m.p, m.r, m.f1), (0.0, 0.0, 0.0, 0.0));
    assert!(pixel_metrics(&[0.9], &[POS, NEG], &[true, true]).is_err());
}

proptest! {
    #[test]
    fn metric_bounds(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let m = PixelMetrics::from_counts(ConfusionCounts { tp, fp, fn_, tn });
        for v in [m.acc, m.p, m.r, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if tp + fp > 0 && tp + fn_ > 0 && m.p + m.r > 0.0 {
            prop_assert!(m.f1 <= m.p.max(m.r) + 1e-12);
            prop_assert!(m.f1 >= m.p.min(m.r) - 1e-12);
        }
    }
}

type Set = HashSet<(isize, isize)>;

/// Set-morphology opening over the image domain.
fn open_oracle(img: &[bool], w: usize, h: usize) -> Vec<bool> {
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize;
    let set: Set = (0..w * h).filter(|&i| img[i]).map(|i| ((i % w) as isize, (i / w) as isize)).collect();
    let nb = |x: isize, y: isize| -> Vec<(isize, isize)> {
        (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (x + dx, y + dy)))
            .filter(|&(a, b)| inside(a, b))
            .collect()
    };
    let eroded: Set = (0..w * h)
        .map(|i| ((i % w) as isize, (i / w) as isize))
        .filter(|&(x, y)| nb(x, y).iter().all(|p| set.contains(p)))
        .collect();
    let opened: Set = eroded.iter().flat_map(|&(x, y)| nb(x, y)).collect();
    (0..w * h)
        .map(|i| opened.contains(&((i % w) as isize, (i / w) as isize)))
        .collect()
}

#[test]
fn opening_examples() {
    let mut img = vec![false; 100];
    img[55] = true;
    assert!(open_3x3(&img, 10, 10).iter().all(|&v| !v));
    let mut block = vec![false; 100];
    for y in 3..7 {
        for x in 2..6 {
            block[y * 10 + x] = true;
        }
    }
    assert_eq!(open_3x3(&block, 10, 10), block);
}

proptest! {
    #[test]
    fn opening_matches_set_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let density = rng.random_range(0.2..0.9);
        let img: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        let once = open_3x3(&img, w, h);
        prop_assert_eq!(&once, &open_oracle(&img, w, h));
        prop_assert_eq!(open_3x3(&once, w, h), once.clone());
        prop_assert!(once.iter().zip(&img).all(|(&o, &i)| i || !o));
    }
}

#[test]
fn component_examples() {
    assert!(components_and_boxes(&[false; 9], 3, 3).is_empty());
    let mut diag = vec![false; 9];
    diag[0] = true;
    diag[4] = true;
    assert_eq!(components_and_boxes(&diag, 3, 3), vec![BBox::new(0, 0, 1, 1).unwrap()]);
    // an L: vertical bar x=1, y=1..=5 and foot y=5, x=1..=4
    let mut l = vec![false; 64];
    for y in 1..=5 {
        l[y * 8 + 1] = true;
    }
    for x in 1..=4 {
        l[5 * 8 + x] = true;
    }
    assert_eq!(components_and_boxes(&l, 8, 8), vec![BBox::new(1, 1, 4, 5).unwrap()]);
}

/// Union-find over 8-neighbour pairs, independent of the flood fill.
fn components_oracle(img: &[bool], w: usize, h: usize) -> HashSet<BBox> {
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..img.len()).collect();
    for y in 0..h {
        for x in 0..w {
            if !img[y * w + x] {
                continue;
            }
            for (dx, dy) in [(1isize, 0isize), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && nx < w as isize && ny < h as isize && img[ny as usize * w + nx as usize] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny as usize * w + nx as usize));
                    parent[a] = b;
                }
            }
        }
    }
    let mut boxes: std::collections::HashMap<usize, BBox> = Default::default();
    for i in 0..img.len() {
        if !img[i] {
            continue;
        }
        let r = find(&mut parent, i);
        let (x, y) = (i % w, i / w);
        let b = boxes.entry(r).or_insert(BBox { x0: x, y0: y, x1: x, y1: y });
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    boxes.into_values().collect()
}

proptest! {
    #[test]
    fn components_match_union_find(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let img: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.35)).collect();
        let boxes = components_and_boxes(&img, w, h);
        let set: HashSet<BBox> = boxes.iter().copied().collect();
        prop_assert_eq!(set, components_oracle(&img, w, h));
    }
}

#[test]
fn iou_examples() {
    let a = BBox::new(0, 0, 10, 10).unwrap();
    let b = BBox::new(0, 5, 10, 15).unwrap();
    // inclusive pixels: 11·6 shared of 121 + 121 − 66
    assert!((iou(&a, &b) - 66.0 / 176.0).abs() < 1e-15);
    let r = match_objects(&[a], &[b], 0.5);
    assert!(r.matched.is_empty());
    assert_eq!((r.unmatched_pred.clone(), r.unmatched_gt.clone()), (vec![0], vec![0]));
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(match_objects(&[a], &[a], 0.5).matched.len(), 1);
    assert_eq!(iou(&a, &BBox::new(20, 20, 21, 21).unwrap()), 0.0);
    assert!(BBox::new(3, 0, 2, 0).is_err());
}

#[test]
fn better_overlap_wins_the_gt() {
    let gt = BBox::new(0, 0, 9, 9).unwrap();
    let p1 = BBox::new(0, 0, 9, 5).unwrap(); // iou 0.6
    let p2 = BBox::new(0, 0, 10, 5).unwrap();
    let (i1, i2) = (iou(&p1, &gt), iou(&p2, &gt));
    assert!((i1 - 0.6).abs() < 1e-12 && i2 > 0.5 && i2 < i1);
    let r = match_objects(&[p2, p1], &[gt], 0.5);
    assert_eq!(r.matched.len(), 1);
    assert_eq!(r.matched[0].pred, 1);
    assert_eq!(r.unmatched_pred, vec![0]);
}

/// Best total weight over every one-to-one partial matching.
fn brute_force(w: &[Vec<f64>]) -> f64 {
    fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == w.len() {
            return 0.0;
        }
        let mut best = go(w, row + 1, used);
        for j in 0..used.len() {
            if !used[j] && w[row][j] > 0.0 {
                used[j] = true;
                best = best.max(w[row][j] + go(w, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = w.first().map_or(0, |r| r.len());
    go(w, 0, &mut vec![false; cols])
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.random_range(0..12), rng.random_range(0..12));
    BBox::new(x0, y0, x0 + rng.random_range(0..8), y0 + rng.random_range(0..8)).unwrap()
}

#[test]
fn matching_is_optimal_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let pred: Vec<BBox> = (0..rng.random_range(0..=6)).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<BBox> = (0..rng.random_range(0..=6)).map(|_| random_box(&mut rng)).collect();
        let r = match_objects(&pred, &gt, 0.5);
        let w: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| gt.iter().map(|g| if iou(p, g) > 0.5 { iou(p, g) } else { 0.0 }).collect())
            .collect();
        assert!((r.total_weight() - brute_force(&w)).abs() < 1e-9);
        let preds: HashSet<usize> = r.matched.iter().map(|m| m.pred).collect();
        let gts: HashSet<usize> = r.matched.iter().map(|m| m.gt).collect();
        assert_eq!(preds.len(), r.matched.len());
        assert_eq!(gts.len(), r.matched.len());
        assert!(r.matched.iter().all(|m| m.iou > 0.5));
        assert_eq!(r.matched.len() + r.unmatched_pred.len(), pred.len());
        assert_eq!(r.matched.len() + r.unmatched_gt.len(), gt.len());
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in (0usize..20, 0usize..20, 0usize..10, 0usize..10), b in (0usize..20, 0usize..20, 0usize..10, 0usize..10)) {
        let ba = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
        let bb = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
        prop_assert_eq!(iou(&ba, &bb).to_bits(), iou(&bb, &ba).to_bits());
        prop_assert!((0.0..=1.0).contains(&iou(&ba, &bb)));
    }
}

#[test]
fn object_metric_examples() {
    let all = ObjectMetrics::from_counts(ObjectCounts { tp: 3, fp: 0, fn_: 0 });
    assert_eq!((all.p, all.r, all.f1), (1.0, 1.0, 1.0));
    let m = ObjectMetrics::from_counts(ObjectCounts { tp: 2, fp: 1, fn_: 2 });
    assert!((m.p - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.r, 0.5);
    assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
    let none = object_metrics(&match_objects(&[], &[BBox::new(0, 0, 1, 1).unwrap()], 0.5));
    assert_eq!(none.undefined, vec!["p_ob", "f1_ob"]);
    assert_eq!(none.r, 0.0);
}

#[test]
fn edges_resolve_to_nearest_side() {
    // row: POS POS EDG EDG EDG NEG NEG
    let p = [POS, POS, EDG, EDG, EDG, NEG, NEG];
    assert_eq!(resolve_edges(&p, 7, 1), vec![POS, POS, POS, POS, NEG, NEG, NEG]);
    let only = [EDG, UNK];
    assert_eq!(resolve_edges(&only, 2, 1), vec![EDG, UNK]);
}

fn mask_with(plane: Vec<u8>, w: usize, h: usize) -> MultiLabelMask {
    MultiLabelMask::from_planes(w, h, vec!["window".into()], vec![plane]).unwrap()
}

#[test]
fn corpus_report_and_tables() {
    let gt = square_plane(40, 40, 5, 5, 20);
    let pred: Vec<f32> = gt.iter().map(|&g| if g == POS { 1.0 } else { 0.0 }).collect();
    let mut acc = MetricsAccumulator::new(vec!["window".into()], EvalConfig::default());
    acc.add_image(&[pred.clone()], &mask_with(gt.clone(), 40, 40)).unwrap();
    acc.add_image(&[vec![0.0; 1600]], &mask_with(gt.clone(), 40, 40)).unwrap();
    let r = acc.report();
    assert_eq!(r.images, 2);
    let w = r.class("window").unwrap();
    assert_eq!(w.object.counts, ObjectCounts { tp: 1, fp: 0, fn_: 1 });
    assert_eq!(w.pixel.p, 1.0);
    assert!((w.pixel.r - 0.5).abs() < 1e-12);
    let csv = r.to_csv();
    assert!(csv.starts_with("class,Acc,P,R,F1,P_ob,R_ob,F1_ob\n"));
    assert_eq!(csv.lines().count(), 3);
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    let back: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(acc.add_image(&[], &mask_with(gt, 40, 40)).is_err());
}

#[test]
fn include_edges_counts_band_pixels() {
    let mut gt = square_plane(20, 20, 5, 5, 8);
    for x in 0..20 {
        gt[4 * 20 + x] = EDG;
    }
    let pred = vec![0.0; 400];
    let cfg = EvalConfig {
        boundary_px: 0,
        ..EvalConfig::default()
    };
    let ignored = evaluate_plane(&pred, &gt, 20, 20, &cfg).unwrap();
    let included = evaluate_plane(
        &pred,
        &gt,
        20,
        20,
        &EvalConfig {
            include_edges: true,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(ignored.pixel.total(), 380);
    assert_eq!(included.pixel.total(), 400);
}

#[test]
fn composite_accuracy_skips_ignored() {
    assert_eq!(label_accuracy(&[1, 2, 3], &[1, 0, IGNORE_LABEL]).unwrap(), Some(0.5));
    assert_eq!(label_accuracy(&[1], &[IGNORE_LABEL]).unwrap(), None);
    assert!(label_accuracy(&[1], &[]).is_err());
}
