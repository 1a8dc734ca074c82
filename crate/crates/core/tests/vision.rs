use attend_core::facegate::{
    compute_integral, detect_faces, detect_faces_with, detect_raw, evaluate_window, extract_and_normalize, gate_frame,
    parse_cascade, window_size, Cascade, CascadeStage, DetectParams, DetectionBox, Gate, HaarFeature, WeakClassifier,
    WeightedRect, FACE_SIDE,
};
use attend_core::image::GrayImage;
use attend_core::par::Exec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random())
}

fn brute_sum(img: &GrayImage, x: usize, y: usize, w: usize, h: usize) -> u64 {
    let mut s = 0u64;
    for yy in y..y + h {
        for xx in x..x + w {
            s += img.get(xx, yy) as u64;
        }
    }
    s
}

#[test]
fn integral_sums_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let img = random_image(&mut rng, w, h);
        let ii = compute_integral(&img);
        for y in 0..h {
            for x in 0..w {
                for rh in 1..=h - y {
                    for rw in 1..=w - x {
                        assert_eq!(ii.rect_sum(x, y, rw, rh), brute_sum(&img, x, y, rw, rh));
                    }
                }
            }
        }
    }
}

#[test]
fn integral_on_large_image_with_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 64, 64);
    let ii = compute_integral(&img);
    for _ in 0..2000 {
        let (x, y) = (rng.random_range(0..64), rng.random_range(0..64));
        let (w, h) = (rng.random_range(1..=64 - x), rng.random_range(1..=64 - y));
        assert_eq!(ii.rect_sum(x, y, w, h), brute_sum(&img, x, y, w, h));
        let sq: u64 = (y..y + h)
            .flat_map(|yy| (x..x + w).map(move |xx| (xx, yy)))
            .map(|(xx, yy)| (img.get(xx, yy) as u64).pow(2))
            .sum();
        assert_eq!(ii.rect_sq_sum(x, y, w, h), sq);
    }
}

fn random_cascade(rng: &mut impl Rng) -> Cascade {
    let bw = rng.random_range(6..=16u32);
    let bh = rng.random_range(6..=16u32);
    let stages = (0..rng.random_range(1..=3))
        .map(|_| {
            let weak: Vec<WeakClassifier> = (0..rng.random_range(1..=4))
                .map(|_| {
                    let rects = (0..rng.random_range(2..=3))
                        .map(|_| {
                            let x = rng.random_range(0..bw);
                            let y = rng.random_range(0..bh);
                            WeightedRect {
                                x,
                                y,
                                w: rng.random_range(1..=bw - x),
                                h: rng.random_range(1..=bh - y),
                                weight: [-1.0, 2.0, 3.0, -2.0][rng.random_range(0..4)],
                            }
                        })
                        .collect();
                    WeakClassifier {
                        feature: HaarFeature { rects },
                        threshold: rng.random_range(-0.3..0.3),
                        left_value: rng.random_range(-1.0..1.0),
                        right_value: rng.random_range(-1.0..1.0),
                    }
                })
                .collect();
            CascadeStage {
                stage_threshold: rng.random_range(-1.0..0.5),
                weak,
            }
        })
        .collect();
    let c = Cascade {
        base_width: bw,
        base_height: bh,
        stages,
    };
    c.validate().unwrap();
    c
}

/// Per-pixel reference evaluator: no integral image, no shared helpers.
fn straight_line_evaluate(c: &Cascade, img: &GrayImage, x: usize, y: usize, scale: f64) -> bool {
    let w = (c.base_width as f64 * scale).round() as usize;
    let h = (c.base_height as f64 * scale).round() as usize;
    let mut sum = 0u64;
    let mut sq = 0u64;
    for yy in y..y + h {
        for xx in x..x + w {
            let p = img.get(xx, yy) as u64;
            sum += p;
            sq += p * p;
        }
    }
    let n = (w * h) as u128;
    let spread = n * sq as u128 - (sum as u128) * (sum as u128);
    let sigma = if spread > 0 { (spread as f64).sqrt() / n as f64 } else { 1.0 };
    let norm = (w * h) as f64 * sigma;
    for stage in &c.stages {
        let mut total = 0.0;
        for weak in &stage.weak {
            let scaled: Vec<(usize, usize, usize, usize)> = weak
                .feature
                .rects
                .iter()
                .map(|r| {
                    let x0 = (r.x as f64 * scale).round() as usize;
                    let y0 = (r.y as f64 * scale).round() as usize;
                    let x1 = ((r.x + r.w) as f64 * scale).round() as usize;
                    let y1 = ((r.y + r.h) as f64 * scale).round() as usize;
                    (x + x0, y + y0, x1 - x0, y1 - y0)
                })
                .collect();
            // first weight rebalanced so the scaled weighted areas cancel
            let mut rest_area = 0.0;
            let mut rest = 0.0;
            for (r, &(rx, ry, rw, rh)) in weak.feature.rects.iter().zip(&scaled).skip(1) {
                rest_area += r.weight * (rw * rh) as f64;
                rest += r.weight * brute_sum(img, rx, ry, rw, rh) as f64;
            }
            let (fx, fy, fw, fh) = scaled[0];
            let f = -rest_area / (fw * fh) as f64 * brute_sum(img, fx, fy, fw, fh) as f64 + rest;
            total += if f / norm < weak.threshold { weak.left_value } else { weak.right_value };
        }
        if total < stage.stage_threshold {
            return false;
        }
    }
    true
}

#[test]
fn evaluate_window_matches_straight_line_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut accepted, mut rejected) = (0, 0);
    for _ in 0..50 {
        let c = random_cascade(&mut rng);
        let img = random_image(&mut rng, 48, 40);
        let ii = compute_integral(&img);
        let scale = [1.0, 1.1, 1.21, 1.5, 2.0][rng.random_range(0..5)];
        let (w, h) = window_size(&c, scale);
        let x = rng.random_range(0..=48 - w);
        let y = rng.random_range(0..=40 - h);
        let got = evaluate_window(&c, &ii, x, y, scale);
        assert_eq!(got, straight_line_evaluate(&c, &img, x, y, scale));
        if got {
            accepted += 1
        } else {
            rejected += 1
        }
    }
    assert!(accepted > 0 && rejected > 0, "oracle pairs should cover both outcomes ({accepted}/{rejected})");
}

fn stump_cascade(rects: Vec<WeightedRect>, threshold: f64, left: f64, right: f64, stage_threshold: f64) -> Cascade {
    Cascade {
        base_width: 24,
        base_height: 24,
        stages: vec![CascadeStage {
            weak: vec![WeakClassifier {
                feature: HaarFeature { rects },
                threshold,
                left_value: left,
                right_value: right,
            }],
            stage_threshold,
        }],
    }
}

fn rect(x: u32, y: u32, w: u32, h: u32, weight: f64) -> WeightedRect {
    WeightedRect { x, y, w, h, weight }
}

#[test]
fn stage_threshold_gates_the_window() {
    // threshold far below any normalized feature: the stump always answers right_value
    let pass = stump_cascade(vec![rect(0, 0, 24, 24, 1.0), rect(0, 0, 12, 12, 1.0)], -1e9, -1.0, 0.5, 0.25);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(4), 30, 30);
    let ii = compute_integral(&img);
    assert!(evaluate_window(&pass, &ii, 3, 2, 1.0));
    let mut fail = pass.clone();
    fail.stages[0].stage_threshold = 0.75;
    assert!(!evaluate_window(&fail, &ii, 3, 2, 1.0));
}

/// 40×40 black image with a 4×4 white block at (20, 12); the single stump
/// fires only when its probe rect sits exactly on the block.
fn unique_hit_fixture() -> (Cascade, GrayImage) {
    let c = stump_cascade(vec![rect(10, 10, 4, 4, 1.0), rect(0, 0, 24, 24, -1.0 / 36.0)], 0.155, -1.0, 1.0, 0.0);
    let mut img = GrayImage::filled(40, 40, 0);
    img.fill_rect(20, 12, 4, 4, 255);
    (c, img)
}

fn single_hit_params() -> DetectParams {
    DetectParams {
        min_neighbors: 1,
        scale_factor: 2.0,
        ..DetectParams::default()
    }
}

#[test]
fn unique_pattern_yields_one_box() {
    let (c, img) = unique_hit_fixture();
    let raw = detect_raw(&c, &img, &single_hit_params(), Exec::Sequential);
    assert_eq!(raw.len(), 1, "{raw:?}");
    let boxes = detect_faces(&c, &img, &single_hit_params());
    assert_eq!(
        boxes,
        vec![DetectionBox {
            x: 10,
            y: 2,
            w: 24,
            h: 24,
            neighbor_count: 1
        }]
    );
    match gate_frame(&c, &img, &single_hit_params()) {
        Gate::Face { region, face } => {
            assert_eq!(region, boxes[0]);
            assert_eq!(face, extract_and_normalize(&img, &boxes[0]).unwrap());
        }
        Gate::Invalid => panic!("expected a face"),
    }
    // min_neighbors 3 drops the lone hit
    let strict = DetectParams {
        min_neighbors: 3,
        ..single_hit_params()
    };
    assert!(gate_frame(&c, &img, &strict).is_invalid());
}

#[test]
fn flat_images_are_invalid() {
    let (c, _) = unique_hit_fixture();
    for v in [0u8, 1, 77, 128, 255] {
        let img = GrayImage::filled(64, 48, v);
        assert!(detect_faces(&c, &img, &single_hit_params()).is_empty());
        assert!(gate_frame(&c, &img, &single_hit_params()).is_invalid());
    }
    // smaller than the base window
    assert!(gate_frame(&c, &GrayImage::filled(20, 20, 9), &single_hit_params()).is_invalid());
}

#[test]
fn accept_all_cascade_covers_the_lattice() {
    let c = stump_cascade(vec![rect(0, 0, 24, 24, 1.0), rect(0, 0, 1, 1, 1.0)], -1e9, 0.0, 1.0, 0.5);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(5), 30, 28);
    let params = DetectParams {
        min_neighbors: 1,
        scale_factor: 2.0,
        ..DetectParams::default()
    };
    let raw = detect_raw(&c, &img, &params, Exec::Sequential);
    // only scale 1 fits: (30-24+1) × (28-24+1) windows
    assert_eq!(raw.len(), 7 * 5);
    let boxes = detect_faces(&c, &img, &params);
    assert_eq!(boxes.len(), 1);
    let b = boxes[0];
    assert_eq!(b.neighbor_count, 35);
    assert_eq!((b.x, b.y, b.w, b.h), (3, 2, 24, 24));
}

#[test]
fn larger_box_wins() {
    let mut boxes = vec![
        DetectionBox { x: 0, y: 0, w: 24, h: 24, neighbor_count: 3 },
        DetectionBox { x: 40, y: 40, w: 30, h: 30, neighbor_count: 3 },
        DetectionBox { x: 10, y: 50, w: 30, h: 30, neighbor_count: 3 },
    ];
    attend_core::facegate::sort_boxes(&mut boxes);
    assert_eq!((boxes[0].x, boxes[0].y), (40, 40));
    assert_eq!((boxes[1].x, boxes[1].y), (10, 50));
}

#[test]
fn parallel_and_sequential_scans_agree() {
    let (c, img) = unique_hit_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noisy = GrayImage::from_fn(60, 50, |x, y| if x < 40 && y < 40 { img.get(x, y) } else { rng.random() });
    let p = single_hit_params();
    assert_eq!(
        detect_raw(&c, &noisy, &p, Exec::Sequential),
        detect_raw(&c, &noisy, &p, Exec::Parallel)
    );
    assert_eq!(
        detect_faces_with(&c, &noisy, &p, Exec::Sequential),
        detect_faces_with(&c, &noisy, &p, Exec::Parallel)
    );
}

#[test]
fn uniform_crops_normalize_to_constants() {
    let white = GrayImage::filled(50, 40, 255);
    let region = DetectionBox { x: 5, y: 3, w: 30, h: 30, neighbor_count: 1 };
    assert!(extract_and_normalize(&white, &region).unwrap().as_slice().iter().all(|&v| v == 1.0));
    let black = GrayImage::filled(50, 40, 0);
    assert!(extract_and_normalize(&black, &region).unwrap().as_slice().iter().all(|&v| v == 0.0));
    let bad = DetectionBox { w: 0, ..region };
    assert!(extract_and_normalize(&white, &bad).is_err());
}

#[test]
fn gradient_crop_matches_bilinear_oracle() {
    // a linear ramp is reproduced exactly by bilinear interpolation, so the
    // oracle is the ramp evaluated at the pixel-centre source coordinates
    let img = GrayImage::from_fn(128, 128, |x, y| (x + y) as u8);
    let region = DetectionBox { x: 0, y: 0, w: 128, h: 128, neighbor_count: 1 };
    let face = extract_and_normalize(&img, &region).unwrap();
    for dy in 0..FACE_SIDE {
        for dx in 0..FACE_SIDE {
            let sx = (dx as f64 + 0.5) * 2.0 - 0.5;
            let sy = (dy as f64 + 0.5) * 2.0 - 0.5;
            let expect = (sx + sy) / 255.0;
            assert!((face.as_slice()[dy * FACE_SIDE + dx] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn upsampled_crop_matches_bilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng, 40, 40);
    let region = DetectionBox { x: 7, y: 9, w: 24, h: 24, neighbor_count: 1 };
    let face = extract_and_normalize(&img, &region).unwrap();
    let px = |x: usize, y: usize| img.get(region.x + x, region.y + y) as f64;
    for dy in 0..FACE_SIDE {
        for dx in 0..FACE_SIDE {
            let fx = ((dx as f64 + 0.5) * 24.0 / 64.0 - 0.5).clamp(0.0, 23.0);
            let fy = ((dy as f64 + 0.5) * 24.0 / 64.0 - 0.5).clamp(0.0, 23.0);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(23), (y0 + 1).min(23));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let v = px(x0, y0) * (1.0 - tx) * (1.0 - ty)
                + px(x1, y0) * tx * (1.0 - ty)
                + px(x0, y1) * (1.0 - tx) * ty
                + px(x1, y1) * tx * ty;
            assert!((face.as_slice()[dy * FACE_SIDE + dx] - v / 255.0).abs() < 1e-6);
        }
    }
}

#[test]
#[allow(clippy::excessive_precision)]
fn reparse_of_serialized_fixture_is_exact() {
    let xml = r#"<opencv_storage><c type_id="opencv-haar-classifier"><size>20 20</size><stages><_><trees>
        <_><_><feature><rects><_>3 7 14 4 -1.</_><_>3 9 14 2 2.</_></rects><tilted>0</tilted></feature>
        <threshold>4.0141958743333817e-003</threshold><left_val>0.0337941907346249</left_val>
        <right_val>0.8378106951713562</right_val></_></_>
        </trees><stage_threshold>0.8226894140243530</stage_threshold></_></stages></c></opencv_storage>"#;
    let c = parse_cascade(xml).unwrap();
    let w = &c.stages[0].weak[0];
    assert_eq!(w.threshold, 4.0141958743333817e-003);
    assert_eq!(w.right_value, 0.8378106951713562);
    assert_eq!(c.stages[0].stage_threshold, 0.8226894140243530);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detection_is_invariant_under_background_padding(right in 0usize..24, bottom in 0usize..24) {
        let (c, img) = unique_hit_fixture();
        let p = single_hit_params();
        let base = detect_faces(&c, &img, &p);
        let padded = img.pad(right, bottom, 0);
        prop_assert_eq!(detect_faces(&c, &padded, &p), base);
    }

    #[test]
    fn normalized_faces_stay_in_unit_range(seed in any::<u64>(), w in 1usize..80, h in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 80, 80);
        let region = DetectionBox { x: 80 - w, y: 80 - h, w, h, neighbor_count: 1 };
        let face = extract_and_normalize(&img, &region).unwrap();
        prop_assert!(face.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        // re-normalizing an already normalized 64×64 crop by factor 1 is the identity
        let again = extract_and_normalize(&face.to_gray(), &DetectionBox { x: 0, y: 0, w: 64, h: 64, neighbor_count: 1 }).unwrap();
        prop_assert_eq!(again, attend_core::facegate::PreprocessedFace::from_gray(&face.to_gray()).unwrap());
    }
}
