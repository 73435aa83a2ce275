use ave3_core::loss::sdr;
use ave3_core::sim::{
    image_method_rir, image_sources, mix_scene, power, sample_scene, synth_noise, synth_speech, Point, RoomSpec,
    Scenario, SceneRanges, SceneSpec,
};
use proptest::prelude::*;

mod common;
use common::{brute_force_images, distance, energy};

#[test]
fn images_match_brute_force_enumeration() {
    for order in 0..=2 {
        let mut room = RoomSpec::new([2.0, 2.0, 2.0], 0.3, order);
        room.absorption = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let (src, mic) = ([0.4, 1.3, 0.7], [1.5, 0.6, 1.1]);
        let ours = image_sources(&room, &src);
        let oracle = brute_force_images(&room, &src, order);
        assert_eq!(ours.len(), oracle.len(), "order {order}");
        for (p, o, r) in &oracle {
            let m = ours
                .iter()
                .find(|im| im.pos.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-9))
                .unwrap_or_else(|| panic!("missing image {p:?}"));
            assert_eq!(m.order, *o);
            assert!((m.reflection - r).abs() <= 1e-6);
        }
        let e_ours = energy(ours.iter().map(|im| (im.pos, im.reflection)), &mic);
        let e_oracle = energy(oracle.iter().map(|(p, _, r)| (*p, *r)), &mic);
        assert!((e_ours - e_oracle).abs() <= 1e-6 * e_oracle, "{e_ours} vs {e_oracle}");
    }
}

#[test]
fn image_counts_by_order() {
    // 1 direct path, 6 first-order and 18 second-order images
    let room = RoomSpec::new([3.0, 4.0, 2.5], 0.5, 2);
    let images = image_sources(&room, &[1.0, 1.0, 1.0]);
    let count = |o| images.iter().filter(|im| im.order == o).count();
    assert_eq!((count(0), count(1), count(2)), (1, 6, 18));
}

fn ts2_spec(max_order: usize, snr_db: Option<f64>) -> SceneSpec {
    SceneSpec {
        scenario: Scenario::Ts2,
        room: RoomSpec::new([6.0, 5.0, 3.0], 0.4, max_order),
        mic: [3.0, 2.5, 1.5],
        target: [2.0, 2.0, 1.6],
        interferer: None,
        noise: [5.0, 4.0, 1.0],
        snr_db,
        sir_db: None,
        seed: 3,
    }
}

#[test]
fn anechoic_mixture_measures_requested_snr() {
    let (speech, noise) = (synth_speech(16_000, 1), synth_noise(16_000, 2));
    let scene = mix_scene(&ts2_spec(0, Some(6.0)), &speech, None, Some(&noise)).unwrap();
    let measured = sdr(&scene.mixture, &scene.target).unwrap();
    assert!((measured - 6.0).abs() <= 0.1, "{measured}");
    assert!(scene.interferer.iter().all(|&v| v == 0.0));
}

#[test]
fn reverberant_mixture_measures_requested_snr() {
    let (speech, noise) = (synth_speech(16_000, 3), synth_noise(16_000, 4));
    for snr in [-5.0, 0.0, 12.0] {
        let scene = mix_scene(&ts2_spec(6, Some(snr)), &speech, None, Some(&noise)).unwrap();
        let measured = sdr(&scene.mixture, &scene.target).unwrap();
        assert!((measured - snr).abs() <= 0.5, "{snr}: {measured}");
    }
}

#[test]
fn ts1_balances_interferer_to_sir() {
    let spec = SceneSpec {
        scenario: Scenario::Ts1,
        interferer: Some([4.5, 1.0, 1.2]),
        sir_db: Some(0.0),
        ..ts2_spec(3, Some(10.0))
    };
    let (t, i, n) = (synth_speech(16_000, 5), synth_speech(16_000, 6), synth_noise(16_000, 7));
    let scene = mix_scene(&spec, &t, Some(&i), Some(&n)).unwrap();
    let ratio = 10.0 * (power(&scene.target) / power(&scene.interferer)).log10();
    assert!(ratio.abs() <= 0.1, "{ratio}");
    assert!(mix_scene(&spec, &t, None, Some(&n)).is_err());
}

#[test]
fn no_snr_leaves_target_alone() {
    let speech = synth_speech(8_000, 8);
    let scene = mix_scene(&ts2_spec(2, None), &speech, None, None).unwrap();
    assert_eq!(scene.mixture, scene.target);
    assert_eq!(scene.noise_gain, 0.0);
}

#[test]
fn mixing_is_bit_reproducible() {
    let spec = sample_scene(&SceneRanges::demo(), Scenario::Ts1, 42);
    assert_eq!(spec, sample_scene(&SceneRanges::demo(), Scenario::Ts1, 42));
    let (t, i, n) = (synth_speech(8_000, 1), synth_speech(8_000, 2), synth_noise(8_000, 3));
    let a = mix_scene(&spec, &t, Some(&i), Some(&n)).unwrap();
    let b = mix_scene(&spec, &t, Some(&i), Some(&n)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn direct_path_arrives_after_distance_over_c(
        src in prop::array::uniform3(0.1f64..0.9),
        mic in prop::array::uniform3(0.1f64..0.9),
        dims in prop::array::uniform3(2.0f64..9.0),
    ) {
        let room = RoomSpec::new(dims, 0.5, 0);
        let (s, m): (Point, Point) = (
            [src[0] * dims[0], src[1] * dims[1], src[2] * dims[2]],
            [mic[0] * dims[0], mic[1] * dims[1], mic[2] * dims[2]],
        );
        prop_assume!(distance(&s, &m) > 0.05);
        let h = image_method_rir(&room, &s, &m).unwrap();
        let peak = h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let expected = (distance(&s, &m) / room.c * room.fs).round() as i64;
        prop_assert!((peak as i64 - expected).abs() <= 1, "{} vs {}", peak, expected);
    }

    #[test]
    fn sampled_ts2_scenes_hit_their_snr(seed in 0u64..500) {
        let mut spec = sample_scene(&SceneRanges::demo(), Scenario::Ts2, seed);
        spec.room.max_order = 0;
        let snr = spec.snr_db.expect("sampled scenes carry an SNR");
        let (speech, noise) = (synth_speech(8_000, seed), synth_noise(8_000, seed + 1));
        let scene = mix_scene(&spec, &speech, None, Some(&noise)).unwrap();
        prop_assert!((sdr(&scene.mixture, &scene.target).unwrap() - snr).abs() <= 0.1);
    }
}
