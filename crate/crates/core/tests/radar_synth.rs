use std::collections::VecDeque;

use proptest::prelude::*;
use vrnet_core::dataset::{self, SCENE_FILES};
use vrnet_core::radar::{
    self, accumulate_frames, back_project, project_points, rasterize_revp, CameraModel, Extrinsic, NormRanges,
    ProjectedPoint, RadarPoint,
};
use vrnet_core::synth::{self, apply_adversity, generate_scene, Adversity, SynthConfig};

fn pt(x: f64, y: f64, z: f64) -> RadarPoint {
    RadarPoint {
        x,
        y,
        z,
        velocity: 0.0,
        power: 10.0,
        frame_idx: 0,
    }
}

fn cam64() -> CameraModel {
    synth::default_camera(64)
}

proptest! {
    #[test]
    fn back_projection_inverts_projection(u in 0.0..63.99f64, v in 0.0..63.99f64, range in 1.0..80.0f64) {
        let cam = cam64();
        let e = synth::default_extrinsic();
        let [x, y, z] = back_project(u, v, range, &e, &cam);
        let p = project_points(&[pt(x, y, z)], &e, &cam).unwrap();
        prop_assert_eq!(p.len(), 1);
        prop_assert!((p[0].u - u).abs() < 1e-6);
        prop_assert!((p[0].v - v).abs() < 1e-6);
        prop_assert!((p[0].range - range).abs() < 1e-6);
    }

    #[test]
    fn identity_extrinsic_preserves_points(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -50.0..50.0f64) {
        let e = Extrinsic::identity();
        prop_assert_eq!(e.apply([x, y, z]), [x, y, z]);
    }

    #[test]
    fn raster_is_order_invariant(seed in 0u64..500) {
        let mut rng = vrnet_tensor::Rng::new(seed);
        let cam = CameraModel { fx: 8.0, fy: 8.0, cx: 4.0, cy: 4.0, width: 8, height: 8 };
        let pts: Vec<ProjectedPoint> = (0..20)
            .map(|index| ProjectedPoint {
                u: rng.range(0.0, 7.99),
                v: rng.range(0.0, 7.99),
                range: (rng.below(4) + 1) as f64,
                elevation: rng.range(-20.0, 20.0),
                velocity: rng.range(-5.0, 5.0),
                power: rng.range(0.0, 40.0),
                index,
            })
            .collect();
        let mut shuffled = pts.clone();
        rng.shuffle(&mut shuffled);
        let a = rasterize_revp(&pts, &cam, &NormRanges::default());
        let b = rasterize_revp(&shuffled, &cam, &NormRanges::default());
        prop_assert_eq!(a, b);
    }
}

/// Sorts by (range, index) and lets the first point claim each pixel.
#[test]
fn collisions_match_sorted_first_claim() {
    let mut rng = vrnet_tensor::Rng::new(77);
    let cam = CameraModel { fx: 4.0, fy: 4.0, cx: 2.0, cy: 2.0, width: 4, height: 4 };
    let norm = NormRanges::default();
    for _ in 0..50 {
        let pts: Vec<ProjectedPoint> = (0..30)
            .map(|index| ProjectedPoint {
                u: rng.range(0.0, 3.99),
                v: rng.range(0.0, 3.99),
                range: (rng.below(5) + 1) as f64 * 10.0,
                elevation: 0.0,
                velocity: 0.0,
                power: index as f64,
                index,
            })
            .collect();
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| (a.range, a.index).partial_cmp(&(b.range, b.index)).unwrap());
        let mut expected: Vec<Option<usize>> = vec![None; 16];
        for p in &sorted {
            let cell = &mut expected[p.v.floor() as usize * 4 + p.u.floor() as usize];
            cell.get_or_insert(p.index);
        }
        let map = rasterize_revp(&pts, &cam, &norm);
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(map.occupancy[i], e.is_some());
            if let Some(idx) = e {
                assert_eq!(map.channels[48 + i], (*idx as f64 / 50.0).clamp(0.0, 1.0));
            }
        }
    }
}

#[test]
fn multi_frame_occupancy_contains_single_frame() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let s = generate_scene(seed, &cfg).unwrap();
        let one = s.revp(1, &NormRanges::default()).unwrap();
        let three = s.revp(3, &NormRanges::default()).unwrap();
        for (a, b) in one.occupancy.iter().zip(&three.occupancy) {
            assert!(!a || *b);
        }
        assert!(three.occupied() >= one.occupied());
    }
}

#[test]
fn frame_order_is_most_recent_first() {
    let frames = vec![vec![pt(0.0, 0.0, 1.0)], vec![pt(0.0, 0.0, 2.0)], vec![pt(0.0, 0.0, 3.0)]];
    let two = accumulate_frames(&frames, 2);
    assert_eq!(two.iter().map(|p| p.z).collect::<Vec<_>>(), vec![1.0, 2.0]);
}

#[test]
fn revp_values_in_unit_interval_and_empty_pixels_zero() {
    let s = generate_scene(3, &SynthConfig::default()).unwrap();
    let m = s.revp(3, &NormRanges::default()).unwrap();
    let hw = m.height * m.width;
    for i in 0..hw {
        for c in 0..4 {
            let v = m.channels[c * hw + i];
            assert!((0.0..=1.0).contains(&v));
            if !m.occupancy[i] {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn projection_uses_camera_axes() {
    let cam = cam64();
    let e = Extrinsic::identity();
    let p = project_points(&[pt(0.0, -1.0, 10.0)], &e, &cam).unwrap();
    // camera y points down, so a negative y sits above the principal point
    assert!(p[0].v < cam.cy);
    assert!(p[0].elevation > 0.0);
    assert!((p[0].elevation - (1.0 / 101f64.sqrt()).asin().to_degrees()).abs() < 1e-12);
}

#[test]
fn back_projection_of_principal_ray() {
    let cam = cam64();
    let e = Extrinsic::identity();
    let q = back_project(cam.cx, cam.cy, 7.0, &e, &cam);
    assert_eq!(q, [0.0, 0.0, 7.0]);
    assert_eq!(radar::pixel_of(cam.cx, cam.cy, &cam), (32, 32));
}

// ---------------------------------------------------------------- scenes

#[test]
fn same_seed_same_scene_different_seed_differs() {
    let cfg = SynthConfig::default();
    assert_eq!(generate_scene(11, &cfg).unwrap(), generate_scene(11, &cfg).unwrap());
    assert_ne!(generate_scene(11, &cfg).unwrap().image, generate_scene(12, &cfg).unwrap().image);
}

#[test]
fn large_objects_have_radar_inside_box() {
    let cfg = SynthConfig::default();
    for seed in 0..50 {
        let s = generate_scene(seed, &cfg).unwrap();
        let pts = accumulate_frames(&s.radar_frames, 1);
        let proj = project_points(&pts, &s.extrinsic, &s.camera).unwrap();
        for b in &s.boxes {
            let [x1, y1, x2, y2] = b.to_xyxy(s.width, s.height);
            if (x2 - x1) * (y2 - y1) < 64.0 {
                continue;
            }
            let hit = proj.iter().any(|p| p.u >= x1 && p.u <= x2 && p.v >= y1 && p.v <= y2);
            assert!(hit, "seed {seed}: box {b:?} has no return");
        }
    }
}

#[test]
fn boxes_intersect_image_and_classes_paint_mask() {
    let cfg = SynthConfig::default();
    for seed in 0..50 {
        let s = generate_scene(seed, &cfg).unwrap();
        for b in &s.boxes {
            let [x1, y1, x2, y2] = b.to_xyxy(s.width, s.height);
            assert!(x2 > 0.0 && y2 > 0.0 && x1 < s.width as f64 && y1 < s.height as f64);
            let class = b.class_id as u8 + 1;
            let (xa, ya) = (x1.max(0.0).floor() as usize, y1.max(0.0).floor() as usize);
            let (xb, yb) = (
                (x2.ceil() as usize).min(s.width),
                (y2.ceil() as usize).min(s.height),
            );
            let mut inside = 0usize;
            for y in ya..yb {
                for x in xa..xb {
                    inside += (s.sem_mask[y * s.width + x] == class) as usize;
                }
            }
            let area = (x2 - x1) * (y2 - y1);
            assert!(inside as f64 >= 0.3 * area, "seed {seed}: {inside} of {area}");
        }
    }
}

/// 4-connected component count of the water class by flood fill.
fn water_components(mask: &[u8], h: usize, w: usize, water: u8) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if mask[start] != water || seen[start] {
            continue;
        }
        count += 1;
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if mask[j] == water && !seen[j] {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
    }
    count
}

#[test]
fn water_is_one_component() {
    let cfg = SynthConfig::default();
    for seed in 0..30 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert_eq!(water_components(&s.sem_mask, s.height, s.width, cfg.water_class()), 1, "seed {seed}");
    }
}

#[test]
fn object_returns_land_in_boxes_statistically() {
    let cfg = SynthConfig::default();
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..100 {
        let s = generate_scene(seed, &cfg).unwrap();
        for (frame, owners) in s.radar_frames.iter().zip(&s.point_objects) {
            let proj = project_points(frame, &s.extrinsic, &s.camera).unwrap();
            for p in &proj {
                if owners[p.index].is_none() {
                    continue;
                }
                total += 1;
                inside += s.boxes.iter().any(|b| {
                    let [x1, y1, x2, y2] = b.to_xyxy(s.width, s.height);
                    p.u >= x1 && p.u <= x2 && p.v >= y1 && p.v <= y2
                }) as usize;
            }
        }
    }
    assert!(total > 0);
    assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
}

#[test]
fn droplets_touch_exactly_their_disks() {
    let cfg = SynthConfig::default();
    for seed in 0..10 {
        let s = generate_scene(seed, &cfg).unwrap();
        let d = apply_adversity(&s, Adversity::Droplet, 2).unwrap();
        assert_eq!(d.meta.droplets.len(), 2);
        let hw = s.height * s.width;
        let mut touched = vec![0usize; 2];
        for i in 0..hw {
            let (y, x) = (i / s.width, i % s.width);
            let changed = (0..3).any(|c| d.image[c * hw + i] != s.image[c * hw + i]);
            let owner = d.meta.droplets.iter().position(|k| k.contains(y, x));
            match owner {
                Some(k) => {
                    assert!(changed, "seed {seed}: disk pixel ({y},{x}) unchanged");
                    touched[k] += 1;
                }
                None => assert!(!changed, "seed {seed}: pixel ({y},{x}) outside disks changed"),
            }
        }
        assert!(touched.iter().all(|&t| t > 0));
    }
}

#[test]
fn adversity_keeps_labels_and_radar() {
    let s = generate_scene(5, &SynthConfig::default()).unwrap();
    for mode in [Adversity::Dark, Adversity::Fog, Adversity::Droplet] {
        let a = apply_adversity(&s, mode, 2).unwrap();
        assert_eq!(a.boxes, s.boxes);
        assert_eq!(a.sem_mask, s.sem_mask);
        assert_eq!(a.radar_frames, s.radar_frames);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn fog_brightens_sky_more_than_near_water() {
    let s = generate_scene(9, &SynthConfig::default()).unwrap();
    let f = apply_adversity(&s, Adversity::Fog, 0).unwrap();
    let w = s.width;
    let top = f.image[0] - s.image[0];
    let bottom = f.image[(s.height - 1) * w] - s.image[(s.height - 1) * w];
    assert!(top >= bottom);
}

// --------------------------------------------------------------- dataset

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth::generate_dataset(16, 4, &SynthConfig::default()).unwrap();
    dataset::write_dataset(&scenes, dir.path()).unwrap();
    let entries: Vec<_> = std::fs::read_dir(dir.path().join("scenes")).unwrap().collect();
    assert_eq!(entries.len(), 16);
    for i in 0..16 {
        let d = dataset::scene_dir(dir.path(), i);
        for f in SCENE_FILES {
            assert!(d.join(f).is_file(), "{} missing", d.join(f).display());
        }
    }
    let back = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.radar_frames, b.radar_frames);
        assert_eq!(a.sem_mask, b.sem_mask);
        assert_eq!(a.camera, b.camera);
        assert_eq!(a.meta, b.meta);
        let worst = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "{worst}");
    }
}

#[test]
fn malformed_labels_name_file_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(1, &SynthConfig::default()).unwrap();
    let d = dir.path().join("scene");
    dataset::write_scene(&s, &d).unwrap();
    std::fs::write(d.join("labels.json"), r#"{"boxes":[{"class_id":0,"cx":0.5}]}"#).unwrap();
    let err = dataset::read_scene(&d).unwrap_err().to_string();
    assert!(err.contains("labels.json"), "{err}");
}

#[test]
fn missing_scene_dir_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = dataset::read_dataset(&dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, vrnet_core::Error::Io { .. }));
}
