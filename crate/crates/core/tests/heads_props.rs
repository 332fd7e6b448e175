use std::f64::consts::{FRAC_PI_2, PI};

use pixgrasp::episode::Ablation;
use pixgrasp::heads::*;
use pixgrasp::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn random_maps(res: usize, spread: f64, r: &mut rng::Rng) -> ActionMaps {
    let n = Normal::new(0.0, spread).unwrap();
    ActionMaps::from_vec(res, (0..CHANNELS * res * res).map(|_| n.sample(r)).collect()).unwrap()
}

fn random_log_std(r: &mut rng::Rng) -> [f64; N_GAUSS] {
    std::array::from_fn(|_| r.gen_range(-3.0..0.5))
}

fn in_ranges(a: &GraspAction, cfg: &HeadConfig) -> bool {
    let ang = |x: f64| (-PI..=PI).contains(&x);
    ang(a.roll)
        && (0.0..=PI).contains(&a.pitch)
        && ang(a.yaw)
        && (0.0..=FRAC_PI_2).contains(&a.spread)
        && a.fingers.iter().all(|f| (0.0..=0.61).contains(f))
        && (cfg.scale_min..=cfg.scale_max).contains(&a.scale)
}

#[test]
fn hundred_thousand_samples_stay_in_range() {
    let cfg = HeadConfig::default();
    let mut r = rng::from_seed(1);
    let mut n = 0;
    for _ in 0..1000 {
        let maps = random_maps(6, 3.0, &mut r);
        let ls = random_log_std(&mut r);
        for _ in 0..100 {
            let a = sample_action(&maps, &ls, &cfg, &Pins::none(), &mut r);
            assert!(in_ranges(&a, &cfg), "{a:?}");
            assert!(a.pixel.0 < 6 && a.pixel.1 < 6);
            n += 1;
        }
    }
    assert_eq!(n, 100_000);
}

#[test]
fn greedy_actions_stay_in_range() {
    let cfg = HeadConfig::default();
    let mut r = rng::from_seed(2);
    for _ in 0..500 {
        let maps = random_maps(5, 10.0, &mut r);
        let a = greedy_action(&maps, &random_log_std(&mut r), &cfg, &Pins::none());
        assert!(in_ranges(&a, &cfg));
    }
}

#[test]
fn spatial_softmax_sums_to_one() {
    let mut r = rng::from_seed(3);
    for spread in [0.1, 1.0, 10.0, 50.0] {
        let maps = random_maps(16, spread, &mut r);
        let mut s = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                s += position_logp(&maps, (i, j)).exp();
            }
        }
        assert!((s - 1.0).abs() <= 1e-6, "{spread}: {s}");
    }
}

#[test]
fn bernoulli_branches_sum_to_one() {
    for i in -400..=400 {
        let l = i as f64 * 0.1;
        let s = zoom_logp(l, true).exp() + zoom_logp(l, false).exp();
        assert!((s - 1.0).abs() <= 1e-9, "{l}: {s}");
        assert!(zoom_logp(l, true).is_finite() && zoom_logp(l, false).is_finite());
    }
}

#[test]
fn sampled_position_frequencies_follow_softmax() {
    let mut r = rng::from_seed(4);
    let maps = random_maps(3, 1.0, &mut r);
    let n = 60_000;
    let mut counts = [0usize; 9];
    for _ in 0..n {
        let (p, _) = sample_position(&maps, &mut r);
        counts[p.0 * 3 + p.1] += 1;
    }
    for k in 0..9 {
        let p = position_logp(&maps, (k / 3, k % 3)).exp();
        let f = counts[k] as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-3, "{k}: {f} vs {p}");
    }
}

#[test]
fn pinned_components_contribute_nothing() {
    let cfg = HeadConfig::default();
    let mut r = rng::from_seed(5);
    for ab in [Ablation::TopDown, Ablation::Parallel, Ablation::NoAttention] {
        let pins = ab.pins();
        for _ in 0..50 {
            let maps = random_maps(4, 2.0, &mut r);
            let ls = random_log_std(&mut r);
            let a = sample_action(&maps, &ls, &cfg, &pins, &mut r);
            match ab {
                Ablation::TopDown => {
                    assert!((a.pitch - FRAC_PI_2).abs() < 1e-12);
                    assert_eq!(a.logp.dof[G_PITCH], Some(0.0));
                }
                Ablation::Parallel => {
                    assert_eq!(a.spread, 0.0);
                    assert_eq!(a.logp.dof[G_SPREAD], Some(0.0));
                }
                _ => {
                    assert!(!a.zoom);
                    assert_eq!(a.logp.zoom, Some(0.0));
                }
            }
            let mut g = vec![0.0; maps.data.len()];
            let mut gl = [0.0; N_GAUSS];
            logp_grad(&maps, &ls, &cfg, &a, 1.0, &mut g, &mut gl).unwrap();
            let n = 16;
            let k = match ab {
                Ablation::TopDown => CH_GAUSS + G_PITCH,
                Ablation::Parallel => CH_GAUSS + G_SPREAD,
                _ => CH_ZOOM,
            };
            assert!(g[k * n..(k + 1) * n].iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn missing_raw_samples_is_an_error() {
    let cfg = HeadConfig::default();
    let maps = ActionMaps::zeros(2);
    let mut a = greedy_action(&maps, &[0.0; N_GAUSS], &cfg, &Pins::none());
    a.raw_samples = None;
    assert!(logp_of(&maps, &[0.0; N_GAUSS], &cfg, &a).is_err());
}

#[test]
fn non_finite_maps_are_rejected() {
    let mut v = vec![0.0; CHANNELS * 4];
    v[7] = f64::NAN;
    assert!(ActionMaps::from_vec(2, v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn masked_sum_and_perturbation_invariance(seed in any::<u64>(), force_zoom in any::<bool>()) {
        let cfg = HeadConfig::default();
        let mut r = rng::from_seed(seed);
        let maps = random_maps(5, 2.0, &mut r);
        let ls = random_log_std(&mut r);
        let pins = Pins { zoom: Some(force_zoom), ..Pins::none() };
        let mut a = sample_action(&maps, &ls, &cfg, &pins, &mut r);
        a.zoom_pinned = false;
        a.logp.zoom = Some(zoom_logp(maps.at(CH_ZOOM, a.pixel), a.zoom));
        a.logp_total = compose_logp(&a.logp, a.zoom).unwrap();

        let c = &a.logp;
        let mut expect = c.position.unwrap() + c.zoom.unwrap();
        if a.zoom {
            expect += c.dof[G_SCALE].unwrap();
        } else {
            for k in 1..N_GAUSS {
                expect += c.dof[k].unwrap();
            }
        }
        prop_assert_eq!(a.logp_total, expect);
        let again = logp_of(&maps, &ls, &cfg, &a).unwrap();
        prop_assert!((again - a.logp_total).abs() <= 1e-12 * (1.0 + a.logp_total.abs()));

        // Perturb the maps the transition must not depend on.
        let mut other = maps.clone();
        let n = 25;
        let noise: f64 = r.gen_range(-5.0..5.0);
        let touched: Vec<usize> = if a.zoom {
            (CH_GAUSS + 1..CHANNELS).collect()
        } else {
            vec![CH_GAUSS + G_SCALE]
        };
        for &ch in &touched {
            for v in &mut other.data[ch * n..(ch + 1) * n] {
                *v += noise;
            }
        }
        let perturbed = logp_of(&other, &ls, &cfg, &a).unwrap();
        prop_assert_eq!(perturbed, again);

        let mut g = vec![0.0; maps.data.len()];
        let mut gl = [0.0; N_GAUSS];
        logp_grad(&maps, &ls, &cfg, &a, 1.0, &mut g, &mut gl).unwrap();
        for &ch in &touched {
            prop_assert!(g[ch * n..(ch + 1) * n].iter().all(|v| *v == 0.0));
        }
    }
}
