use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng::rng;

fn uniform(h: usize, w: usize, rgb: [f32; 3]) -> Tensor {
    Tensor::new(vec![h, w, 3], (0..h * w).flat_map(|_| rgb).collect()).unwrap()
}

/// Random rectangles over a noisy background.
fn blocky_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut r = rng(seed);
    let mut img = uniform(h, w, [r.random(), r.random(), r.random()]);
    for _ in 0..6 {
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = ((y0 + r.random_range(2..h / 2)).min(h), (x0 + r.random_range(2..w / 2)).min(w));
        let color: [f32; 3] = [r.random(), r.random(), r.random()];
        for y in y0..y1 {
            for x in x0..x1 {
                img.data_mut()[(y * w + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + r.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    img
}

fn is_4_connected(mask: &Mask) -> bool {
    let (h, w) = (mask.height, mask.width);
    let Some(start) = mask.bits().iter().position(|&b| b) else { return false };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(p) = stack.pop() {
        count += 1;
        for q in slic::neighbors4(p, h, w) {
            if mask.bits()[q] && !seen[q] {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    count == mask.count()
}

#[test]
fn three_resolutions_are_tagged() {
    let img = blocky_image(1, 32, 32);
    let segs = extract_segments(&img, "img0", &[15, 50, 80], &SlicParams::new(15), DEFAULT_MIN_SEGMENT_PIXELS).unwrap();
    for level in [ResolutionLevel::Coarse, ResolutionLevel::Medium, ResolutionLevel::Fine] {
        assert!(segs.iter().any(|s| s.resolution_level == level), "{level:?} missing");
    }
    for s in &segs {
        assert!(s.mask.count() >= DEFAULT_MIN_SEGMENT_PIXELS);
        assert!(is_4_connected(&s.mask));
        assert_eq!(s.mask.bbox().unwrap(), s.bbox);
        assert_eq!(s.instance_id, "img0");
    }
}

#[test]
fn two_tone_gives_two_segments_and_tiny_threshold_drops_all() {
    let mut img = uniform(12, 12, [0.9, 0.9, 0.2]);
    for y in 0..12 {
        for x in 6..12 {
            img.data_mut()[(y * 12 + x) * 3..][..3].copy_from_slice(&[0.1, 0.1, 0.6]);
        }
    }
    let segs = extract_segments(&img, "t", &[2], &SlicParams::new(2), DEFAULT_MIN_SEGMENT_PIXELS).unwrap();
    assert_eq!(segs.len(), 2);
    assert!(extract_segments(&img, "t", &[2], &SlicParams::new(2), 1000).unwrap().is_empty());
    assert!(extract_segments(&img, "t", &[], &SlicParams::new(2), 9).is_err());
}

#[test]
fn full_mask_patch_is_resized_image() {
    let img = blocky_image(2, 16, 16);
    let seg = Segment {
        segment_id: "s".into(),
        instance_id: "i".into(),
        resolution_level: ResolutionLevel::Coarse,
        mask: Mask::full(16, 16),
        bbox: BBox { top: 0, left: 0, height: 16, width: 16 },
    };
    let patch = segment_to_patch(&img, &seg, &[0.5; 3], [16, 16, 3]).unwrap();
    assert_eq!(patch.pixels, img);
    let bigger = segment_to_patch(&img, &seg, &[0.5; 3], [31, 31, 3]).unwrap();
    assert_eq!(bigger.pixels, resize_bilinear(&img, 31, 31).unwrap());
    // Corner alignment: even output indices land exactly on source pixels.
    assert_eq!(bigger.pixels.at3(30, 30, 1), img.at3(15, 15, 1));
    assert_eq!(bigger.pixels.at3(2, 4, 0), img.at3(1, 2, 0));
}

#[test]
fn half_mask_on_mean_colored_image_is_uniform() {
    let means = [0.25, 0.5, 0.75];
    let img = uniform(8, 8, [0.25, 0.5, 0.75]);
    let bits = (0..64).map(|p| p % 8 < 4).collect();
    let mask = Mask::new(8, 8, bits).unwrap();
    let seg = Segment {
        segment_id: "h".into(),
        instance_id: "i".into(),
        resolution_level: ResolutionLevel::Fine,
        bbox: mask.bbox().unwrap(),
        mask,
    };
    let patch = segment_to_patch(&img, &seg, &means, [8, 8, 3]).unwrap();
    assert_eq!(patch.pixels, img);
}

#[test]
fn empty_mask_is_a_precondition_violation() {
    let img = uniform(4, 4, [0.5; 3]);
    let seg = Segment {
        segment_id: "e".into(),
        instance_id: "i".into(),
        resolution_level: ResolutionLevel::Fine,
        mask: Mask::new(4, 4, vec![false; 16]).unwrap(),
        bbox: BBox { top: 0, left: 0, height: 1, width: 1 },
    };
    assert!(matches!(segment_to_patch(&img, &seg, &[0.5; 3], [4, 4, 3]), Err(Error::Precondition(_))));
}

#[test]
fn thumbnail_is_bbox_crop() {
    let img = blocky_image(3, 10, 10);
    let bits = (0..100).map(|p| (2..5).contains(&(p / 10)) && (3..7).contains(&(p % 10))).collect();
    let mask = Mask::new(10, 10, bits).unwrap();
    let seg = Segment {
        segment_id: "t".into(),
        instance_id: "i".into(),
        resolution_level: ResolutionLevel::Medium,
        bbox: mask.bbox().unwrap(),
        mask,
    };
    let thumb = segment_thumbnail(&img, &seg, &[0.0; 3]).unwrap();
    assert_eq!(thumb.shape(), &[3, 4, 3]);
    assert_eq!(thumb.at3(0, 0, 2), img.at3(2, 3, 2));
}

#[test]
fn outline_of_rectangle_and_hole() {
    let mut bits = vec![false; 36];
    for y in 1..5 {
        for x in 1..5 {
            bits[y * 6 + x] = true;
        }
    }
    let rect = Mask::new(6, 6, bits.clone()).unwrap();
    let loops = rect.outline();
    assert_eq!(loops, vec![vec![(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)]]);
    bits[2 * 6 + 2] = false;
    let holed = Mask::new(6, 6, bits).unwrap();
    let loops = holed.outline();
    assert_eq!(loops.len(), 2);
    assert!(loops.iter().any(|l| l.len() == 4 && l.contains(&(2.0, 2.0)) && l.contains(&(3.0, 3.0))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slic_partitions_and_connects(seed in 0u64..10_000, n in prop::sample::select(vec![4usize, 15, 50, 80])) {
        let img = blocky_image(seed, 32, 32);
        let sp = slic(&img, &SlicParams::new(n)).unwrap();
        prop_assert_eq!(sp.labels.len(), 32 * 32);
        let mut present = vec![false; sp.n_labels];
        for &l in &sp.labels {
            prop_assert!(l < sp.n_labels);
            present[l] = true;
        }
        prop_assert!(present.iter().all(|&p| p), "labels not contiguous");
        for l in 0..sp.n_labels {
            let mask = Mask::new(32, 32, sp.labels.iter().map(|&x| x == l).collect()).unwrap();
            prop_assert!(is_4_connected(&mask), "label {} disconnected", l);
        }
        for pair in sp.objective_history.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "objective rose: {:?}", pair);
        }
        prop_assert_eq!(slic(&img, &SlicParams::new(n)).unwrap(), sp);
    }

    #[test]
    fn rle_round_trip(bits in prop::collection::vec(any::<bool>(), 1..200)) {
        let n = bits.len();
        let mask = Mask::new(1, n, bits).unwrap();
        let json = serde_json::to_string(&mask).unwrap();
        let back: Mask = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, mask);
    }
}
