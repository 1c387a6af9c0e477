use proptest::prelude::*;
use ultraseg_core::metrics::*;
use ultraseg_core::{Error, Shape, Tensor};

fn brute_hd95(pred: &Mask, gt: &Mask) -> Option<f64> {
    let (p, g) = (pred.points(), gt.points());
    if p.is_empty() && g.is_empty() {
        return Some(0.0);
    }
    if p.is_empty() || g.is_empty() {
        return None;
    }
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|b| {
                let (dr, dc) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut d: Vec<f64> = p.iter().map(|&a| nearest(a, &g)).chain(g.iter().map(|&b| nearest(b, &p))).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    Some(d[lo] + (pos - lo as f64) * (d[hi] - d[lo]))
}

fn brute_sq_dt(m: &Mask) -> Vec<f64> {
    let pts = m.points();
    (0..m.height * m.width)
        .map(|i| {
            let (r, c) = (i / m.width, i % m.width);
            pts.iter().map(|&(a, b)| (r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2)).fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    (prop::collection::vec(any::<bool>(), h * w), 0.0..1.0f64).prop_map(move |(bits, keep)| {
        // thin some masks out so sparse sets get exercised
        let data = bits.iter().enumerate().map(|(i, &b)| b && ((i * 2654435761) % 1000) as f64 / 1000.0 < keep).collect();
        Mask::new(h, w, data).unwrap()
    })
}

fn pair(h: usize, w: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (mask_strategy(h, w), mask_strategy(h, w))
}

#[test]
fn binarize_threshold_inclusive() {
    let t = |v: Vec<f32>| Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap();
    assert!(binarize(&t(vec![0.5; 4]), 0.5).unwrap()[0].data.iter().all(|&b| b));
    assert!(binarize(&t(vec![0.49; 4]), 0.5).unwrap()[0].data.iter().all(|&b| !b));
    assert_eq!(binarize(&t(vec![0.2, 0.7]), 0.5).unwrap()[0].data, [false, true]);
    let two = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![0.9f32, 0.1, 0.1, 0.9]).unwrap();
    let masks = binarize(&two, 0.5).unwrap();
    assert_eq!((masks[0].data.clone(), masks[1].data.clone()), (vec![true, false], vec![false, true]));
}

#[test]
fn two_by_two_example() {
    let pred = Mask::from_points(2, 2, &[(0, 0), (0, 1)]);
    let gt = Mask::from_points(2, 2, &[(0, 1), (1, 1)]);
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.r#fn, c.tn), (1, 1, 1, 1));
    assert_eq!(dice(&pred, &gt).unwrap(), 0.5);
    assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn dice_iou_conventions() {
    let a = Mask::from_points(4, 4, &[(0, 0), (1, 1)]);
    let b = Mask::from_points(4, 4, &[(3, 3)]);
    let e = Mask::empty(4, 4);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &b).unwrap(), 0.0);
    assert_eq!(iou(&a, &b).unwrap(), 0.0);
    assert_eq!((dice(&e, &e).unwrap(), iou(&e, &e).unwrap()), (1.0, 1.0));
    assert_eq!((dice(&e, &a).unwrap(), iou(&a, &e).unwrap()), (0.0, 0.0));
    let wide = Mask::empty(4, 5);
    assert!(matches!(dice(&a, &wide), Err(Error::Shape { .. })));
    assert!(matches!(iou(&a, &wide), Err(Error::Shape { .. })));
    assert!(matches!(hd95(&a, &wide), Err(Error::Shape { .. })));
}

#[test]
fn hd95_examples() {
    let a = Mask::from_points(8, 8, &[(0, 0)]);
    let b = Mask::from_points(8, 8, &[(3, 4)]);
    assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
    let blob = Mask::from_points(8, 8, &[(2, 2), (2, 3), (3, 2), (5, 6)]);
    assert_eq!(hd95(&blob, &blob).unwrap(), Some(0.0));
    assert_eq!(hd95(&Mask::empty(8, 8), &b).unwrap(), None);
    assert_eq!(hd95(&b, &Mask::empty(8, 8)).unwrap(), None);
    assert_eq!(hd95(&Mask::empty(8, 8), &Mask::empty(8, 8)).unwrap(), Some(0.0));
}

#[test]
fn percentile_linear_inclusive() {
    let mut v = vec![4.0, 1.0, 3.0, 2.0];
    assert_eq!(percentile(&mut v, 0.0), 1.0);
    assert_eq!(percentile(&mut v, 100.0), 4.0);
    assert_eq!(percentile(&mut v, 50.0), 2.5);
    let mut v: Vec<f64> = (0..21).map(f64::from).collect();
    assert_eq!(percentile(&mut v, 95.0), 19.0);
    assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
}

#[test]
fn evaluate_aggregates() {
    let a = Mask::from_points(4, 4, &[(1, 1), (1, 2)]);
    let half = Mask::from_points(4, 4, &[(1, 1)]);
    let none = Mask::empty(4, 4);
    let r = evaluate([("b", &a, &a), ("a", &half, &a)]).unwrap();
    assert_eq!(r.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert!((r.mean_dice - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

    // per-sample mean, not pooled pixels
    let big = Mask::from_points(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    let pred = Mask::from_points(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3), (2, 0), (2, 1), (2, 2), (2, 3)]);
    assert_eq!(dice(&pred, &big).unwrap(), 0.5);
    let r = evaluate([("p", &a, &a), ("q", &pred, &big)]).unwrap();
    assert_eq!(r.mean_dice, 0.75);

    let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let mut triples: Vec<(&str, &Mask, &Mask)> = ids[..9].iter().map(|id| (id.as_str(), &a, &a)).collect();
    triples.push((ids[9].as_str(), &none, &a));
    let r = evaluate(triples).unwrap();
    assert_eq!((r.mean_hd95, r.undefined_hd95), (Some(0.0), 1));
    assert!((r.mean_dice - 0.9).abs() < 1e-12);

    let perfect = evaluate([("x", &a, &a), ("y", &none, &none)]).unwrap();
    assert_eq!((perfect.mean_dice, perfect.mean_iou, perfect.mean_hd95), (1.0, 1.0, Some(0.0)));
}

fn shift(m: &Mask, dr: usize, dc: usize) -> Mask {
    let pts: Vec<(usize, usize)> = m.points().into_iter().map(|(r, c)| (r + dr, c + dc)).collect();
    Mask::from_points(m.height + dr, m.width + dc, &pts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn distance_transform_matches_brute_force(m in mask_strategy(13, 17)) {
        prop_assume!(!m.is_empty());
        prop_assert_eq!(squared_distance_transform(&m), brute_sq_dt(&m));
    }

    #[test]
    fn hd95_matches_brute_force_16((p, g) in pair(16, 16)) {
        prop_assert_eq!(hd95(&p, &g).unwrap(), brute_hd95(&p, &g));
    }

    #[test]
    fn hd95_matches_brute_force_32((p, g) in pair(32, 32)) {
        prop_assert_eq!(hd95(&p, &g).unwrap(), brute_hd95(&p, &g));
    }

    #[test]
    fn metric_symmetries((p, g) in pair(12, 12)) {
        let (d, i) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
        prop_assert_eq!(d, dice(&g, &p).unwrap());
        prop_assert_eq!(i, iou(&g, &p).unwrap());
        prop_assert_eq!(hd95(&p, &g).unwrap(), hd95(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        prop_assert!((i - d / (2.0 - d)).abs() < 1e-12);
        prop_assert!(i <= d);
        if i == d {
            prop_assert!(d == 0.0 || d == 1.0);
        }
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total(), 144);
    }

    #[test]
    fn translation_invariance((p, g) in pair(10, 10), dr in 0usize..5, dc in 0usize..5) {
        let (ps, gs) = (shift(&p, dr, dc), shift(&g, dr, dc));
        prop_assert_eq!(dice(&p, &g).unwrap(), dice(&ps, &gs).unwrap());
        prop_assert_eq!(iou(&p, &g).unwrap(), iou(&ps, &gs).unwrap());
        prop_assert_eq!(hd95(&p, &g).unwrap(), hd95(&ps, &gs).unwrap());
    }
}
