use ave3_core::model::{build_model, Model, ModelConfig};
use ave3_core::sim::{synth_roi, synth_speech, RoiMode, SynthRoiSpec};
use ave3_core::stream::{causality_probe, roi_causality_probe, stream_chunked, Session};
use ave3_core::tasks::padded_len;
use ave3_core::video::{RoiFrame, TimedRoi};
use ave3_core::Error;
use proptest::prelude::*;

fn model(name: &str, seed: u64) -> Model {
    build_model(&ModelConfig::preset(name).unwrap().scaled(64, 16, 32, 2), seed).unwrap()
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

#[test]
fn release_follows_window_and_hop() {
    let m = model("av-gs", 1);
    let mut s = Session::new(&m).unwrap();
    let x = synth_speech(800, 2);
    assert_eq!(s.push(&x[..160], &[]).unwrap().len(), 0);
    assert_eq!(s.push(&x[160..320], &[]).unwrap().len(), 160);
    assert_eq!(s.push(&x[320..479], &[]).unwrap().len(), 0);
    assert_eq!(s.push(&x[479..480], &[]).unwrap().len(), 160);
    assert_eq!(s.push(&x[480..800], &[]).unwrap().len(), 320);
}

#[test]
fn flush_cases() {
    let m = model("ao-e3net", 1);
    let mut fresh = Session::new(&m).unwrap();
    assert!(fresh.flush().unwrap().is_empty());
    assert!(matches!(fresh.flush(), Err(Error::AlreadyFinished)));
    assert!(matches!(fresh.push(&[0.0], &[]), Err(Error::AlreadyFinished)));

    let x = synth_speech(320, 3);
    let mut s = Session::new(&m).unwrap();
    assert_eq!(s.push(&x, &[]).unwrap().len(), 160);
    assert_eq!(s.flush().unwrap().len(), 160);

    for len in [1, 319, 321, 1000, 4801] {
        let out = stream_chunked(&m, &synth_speech(len, 4), &[], &[97]).unwrap();
        assert_eq!(out.len(), padded_len(len, 320, 160), "input length {len}");
    }
}

#[test]
fn ten_ms_chunks_equal_offline() {
    let m = model("av-gs", 5);
    let x = synth_speech(48_000, 6);
    let rois = synth_roi(&SynthRoiSpec::default(), &x);
    let offline = m.enhance(&x, &rois).unwrap();
    let streamed = stream_chunked(&m, &x, &rois, &[160]).unwrap();
    assert!(max_abs(&offline, &streamed) <= 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_chunking_equals_offline(sizes in prop::collection::vec(1usize..700, 1..6), len in 320usize..4000, seed in 0u64..1000) {
        let m = model("av-gs", seed);
        let x = synth_speech(len, seed);
        let rois = synth_roi(&SynthRoiSpec { detection_rate: 0.6, seed, ..Default::default() }, &x);
        let mut padded = x.clone();
        padded.resize(padded_len(len, 320, 160), 0.0);
        let offline = m.enhance(&padded, &rois).unwrap();
        let streamed = stream_chunked(&m, &x, &rois, &sizes).unwrap();
        prop_assert!(max_abs(&offline, &streamed) <= 1e-5);
    }
}

#[test]
fn perturbation_never_reaches_back_more_than_a_window() {
    let m = model("av-gs", 7);
    let x = synth_speech(48_000, 8);
    let rois = synth_roi(&SynthRoiSpec::default(), &x);
    for at in [0, 1, 159, 160, 161, 5_000, 12_345, 30_000, 47_840, 47_999] {
        let changed = causality_probe(&m, &x, &rois, at, 0.25).unwrap().expect("a perturbation changes the output");
        assert!(changed + 319 >= at, "input {at} changed output {changed}");
        // the frame that first contains the perturbed sample starts at
        // ⌈(at − 319)/160⌉·160
        let first_frame = at.saturating_sub(319).div_ceil(160) * 160;
        assert!(changed >= first_frame);
    }
    assert_eq!(causality_probe(&m, &x, &rois, 100, 0.0).unwrap(), None);
}

#[test]
fn roi_frames_act_from_their_timestamp() {
    let m = model("av-gs", 9);
    let x = synth_speech(16_000, 10);
    let rois = synth_roi(&SynthRoiSpec::default(), &x);
    let noise = synth_roi(&SynthRoiSpec { mode: RoiMode::Noise, seed: 1, ..Default::default() }, &x);
    for k in [0, 1, 7, 24] {
        let changed = roi_causality_probe(&m, &x, &rois, k, noise[k].clone()).unwrap();
        if let Some(i) = changed {
            assert!(i as u64 >= 640 * k as u64, "frame {k} changed output {i}");
        }
    }
}

#[test]
fn sessions_are_independent_and_reset_is_exact() {
    let m = model("av-gs", 11);
    let (x, y) = (synth_speech(3_200, 1), synth_speech(3_200, 2));
    let solo = stream_chunked(&m, &x, &[], &[100]).unwrap();
    let mut a = Session::new(&m).unwrap();
    let mut b = Session::new(&m).unwrap();
    let mut out = Vec::new();
    for (cx, cy) in x.chunks(100).zip(y.chunks(100)) {
        out.extend(a.push(cx, &[]).unwrap());
        b.push(cy, &[]).unwrap();
    }
    out.extend(a.flush().unwrap());
    assert_eq!(out, solo);

    a.reset();
    let mut again = a.push(&x, &[]).unwrap();
    again.extend(a.flush().unwrap());
    assert_eq!(again, solo);
}

#[test]
fn roi_timestamps_must_not_go_back() {
    let m = model("av-gs", 12);
    let mut s = Session::new(&m).unwrap();
    let frame = |t| TimedRoi { timestamp: t, frame: RoiFrame::blank() };
    s.push(&[0.0; 100], &[frame(0), frame(640)]).unwrap();
    assert!(matches!(s.push(&[0.0; 100], &[frame(320)]), Err(Error::TimestampRegression { .. })));
}

#[test]
fn non_finite_input_poisons_session() {
    let m = model("ao-e3net", 13);
    let mut s = Session::new(&m).unwrap();
    let mut x = vec![0.1f32; 480];
    x[200] = f32::NAN;
    assert!(matches!(s.push(&x, &[]), Err(Error::SessionPoisoned(_))));
    assert!(matches!(s.push(&[0.0; 10], &[]), Err(Error::SessionPoisoned(_))));
    s.reset();
    assert!(s.push(&[0.0; 320], &[]).is_ok());
}
