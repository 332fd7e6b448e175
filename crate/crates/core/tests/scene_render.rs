use pixgrasp::render::{self, CameraConfig, CameraModel, CropWindow};
use pixgrasp::rng;
use pixgrasp::scene::{generate_scene, sample_mode, Scene, SceneConfig, SceneMode};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn camera() -> CameraModel {
    CameraModel::from_config(&CameraConfig::default()).unwrap()
}

#[test]
fn cluttered_count_is_uniform() {
    let cfg = SceneConfig {
        placement_retries: 1,
        ..SceneConfig::default()
    };
    let n = 5800;
    let mut counts = [0usize; 31];
    for seed in 0..n {
        let s = generate_scene(seed, SceneMode::Cluttered, &cfg);
        counts[s.requested] += 1;
    }
    let expected = n as f64 / 29.0;
    let chi2: f64 = (2..=30).map(|k| (counts[k] as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(28.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
    assert_eq!(counts[0] + counts[1], 0);
}

#[test]
fn mode_frequency_is_even() {
    let single = (0..10_000u64).filter(|s| sample_mode(*s) == SceneMode::Single).count();
    let f = single as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&f), "{f}");
}

#[test]
fn mode_fixture() {
    let modes: Vec<&str> = (0..8).map(|s| sample_mode(s).name()).collect();
    assert_eq!(modes, ["cluttered", "cluttered", "cluttered", "cluttered", "single", "cluttered", "cluttered", "single"]);
}

#[test]
fn generation_is_pure() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let a = generate_scene(seed, SceneMode::Cluttered, &cfg);
        let b = generate_scene(seed, SceneMode::Cluttered, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }
}

#[test]
fn cluttered_primitives_do_not_interpenetrate() {
    let cfg = SceneConfig::default();
    for seed in 0..60 {
        let s = generate_scene(seed, SceneMode::Cluttered, &cfg);
        assert!(!s.primitives.is_empty() && s.primitives.len() <= 30);
        for (i, a) in s.primitives.iter().enumerate() {
            assert!(a.footprint().inside_square(cfg.table_extent));
            for b in &s.primitives[i + 1..] {
                let d = a.footprint().signed_distance(&b.footprint());
                assert!(d >= -cfg.overlap_tol - 1e-12, "seed {seed}: {} vs {} at {d}", a.id, b.id);
            }
        }
    }
}

#[test]
fn seed7_fixture_has_one_primitive() {
    let s = generate_scene(7, SceneMode::Single, &SceneConfig::default());
    assert_eq!(s.primitives.len(), 1);
    let c = generate_scene(7, SceneMode::Cluttered, &SceneConfig::default());
    assert!((2..=30).contains(&c.primitives.len()));
}

#[test]
fn projection_round_trip() {
    let cam = camera();
    let scene = generate_scene(3, SceneMode::Cluttered, &SceneConfig::default());
    let img = render::render_depth(&scene, &cam);
    let mut r = rng::from_seed(11);
    for _ in 0..1000 {
        let (i, j) = (r.gen_range(0..cam.rows), r.gen_range(0..cam.cols));
        let p = render::deproject_native(i as f64, j as f64, img.at(i, j), &cam);
        let (v, u, _) = cam.project(&p);
        assert!((v - i as f64).abs() < 0.5 && (u - j as f64).abs() < 0.5);
    }
}

#[test]
fn tilted_round_trip() {
    let cam = CameraModel::from_config(&CameraConfig {
        tilt_deg: 60.0,
        ..CameraConfig::default()
    })
    .unwrap();
    let img = render::render_depth(&Scene::empty(0.25), &cam);
    let mut checked = 0;
    for (i, j) in [(0, 0), (5, 90), (127, 127), (64, 3), (100, 64)] {
        if img.at(i, j) >= cam.far_clip {
            continue;
        }
        checked += 1;
        let p = render::deproject_native(i as f64, j as f64, img.at(i, j), &cam);
        assert!(p.z.abs() < 1e-9);
        let (v, u, _) = cam.project(&p);
        assert!((v - i as f64).abs() < 1e-6 && (u - j as f64).abs() < 1e-6);
    }
    assert!(checked >= 3);
}

/// Five pixels of the seed-7 fixture recomputed from the primitive's own
/// ray intersection.
#[test]
fn seed7_pixels_match_direct_intersection() {
    let cam = camera();
    let scene = generate_scene(7, SceneMode::Cluttered, &SceneConfig::default());
    let img = render::render_depth(&scene, &cam);
    for (i, j) in [(0, 0), (31, 97), (64, 64), (100, 20), (127, 127)] {
        let (o, d) = cam.ray(i as f64, j as f64);
        let mut best = -o.z / d.z;
        for p in &scene.primitives {
            if let Some(t) = p.ray_hit(&o, &d) {
                best = best.min(t);
            }
        }
        assert_eq!(img.at(i, j), best, "pixel ({i},{j})");
    }
}

#[test]
fn zoomed_deprojection_equals_native() {
    let cam = camera();
    let scene = generate_scene(5, SceneMode::Cluttered, &SceneConfig::default());
    let native = render::render_depth(&scene, &cam);
    let full = render::resample(&native, &cam.full_window(), (64, 64));
    let zoomed = render::crop_resize(&native, &full, (20, 40), 0.5, (64, 64));
    for (i, j) in [(0, 0), (10, 50), (63, 63), (32, 32)] {
        let d = zoomed.at(i, j);
        let via = render::deproject((i, j), d, &cam, &zoomed.window, (64, 64)).unwrap();
        let (r, c) = zoomed.window.source_pixel(i, j, (64, 64));
        assert_eq!(native.at(r, c), d);
        let direct = render::deproject_native(r as f64, c as f64, d, &cam);
        assert!((via - direct).norm() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn crop_chains_compose(
        seed in 0u64..1_000_000,
        steps in prop::collection::vec((0usize..64, 0usize..64, 0.3f64..1.0), 1..6),
    ) {
        let cam = camera();
        let res = (64, 64);
        let floor_px = 24.0;
        let scene = generate_scene(seed % 50, SceneMode::Single, &SceneConfig::default());
        let native = render::render_depth(&scene, &cam);
        let mut img = render::resample(&native, &cam.full_window(), res);
        let mut product = 1.0;
        let mut prev: CropWindow = img.window;
        for (r, c, s) in steps {
            let floor = floor_px / (prev.composed_scale * cam.rows as f64);
            let applied = s.max(floor).min(1.0);
            img = render::crop_resize(&native, &img, (r, c), applied, res);
            product *= applied;
            let w = img.window;
            prop_assert_eq!(w.composed_scale, product);
            prop_assert!(w.inside_frame());
            prop_assert!(prev.contains(&w));
            prop_assert!(w.size_rows >= floor_px - 1e-9);
            prop_assert!((w.size_rows / w.size_cols - 1.0).abs() < 1e-12);
            prev = w;
        }
        for (i, j) in [(0, 0), (63, 0), (17, 44), (63, 63)] {
            let d = img.at(i, j);
            let via = render::deproject((i, j), d, &cam, &img.window, res).unwrap();
            let (nr, nc) = img.window.source_pixel(i, j, res);
            prop_assert_eq!(native.at(nr, nc), d);
            let direct = render::deproject_native(nr as f64, nc as f64, d, &cam);
            prop_assert!((via - direct).norm() <= 1e-9);
        }
    }

    #[test]
    fn resampling_never_invents_depth(seed in 0u64..200, r in 0usize..64, c in 0usize..64, s in 0.2f64..1.0) {
        let cam = camera();
        let scene = generate_scene(seed, SceneMode::Cluttered, &SceneConfig::default());
        let native = render::render_depth(&scene, &cam);
        let full = render::resample(&native, &cam.full_window(), (64, 64));
        let z = render::crop_resize(&native, &full, (r, c), s, (64, 64));
        let mut set: Vec<u64> = native.data.iter().map(|v| v.to_bits()).collect();
        set.sort_unstable();
        for v in &z.data {
            prop_assert!(set.binary_search(&v.to_bits()).is_ok());
        }
    }
}
