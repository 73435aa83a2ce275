use ave3_core::autodiff::Tape;
use ave3_core::model::{
    build_model, dense_residual, param_report, Connection, DenseSum, Fusion, FusionBlock, GsFusion, Model, ModelConfig,
    StageTimes,
};
use ave3_core::nn::{Ctx, Init, LayerNorm, Module};
use ave3_core::params::ParamStore;
use ave3_core::sim::{synth_roi, synth_speech, RoiMode, SynthRoiSpec};
use ave3_core::tasks;
use ave3_core::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::from_f64s(shape.to_vec(), &random(shape.iter().product(), seed)).unwrap()
}

fn small(fusion: &str) -> ModelConfig {
    ModelConfig::preset(fusion).unwrap().scaled(64, 16, 32, 4)
}

fn gs_block(seed: u64, d: usize) -> (ParamStore<f32>, GsFusion) {
    let mut store = ParamStore::new();
    let block = GsFusion::new(&mut Init::new(&mut store, seed), "gs", d).unwrap();
    (store, block)
}

#[test]
fn zeroed_gating_weights_give_half() {
    let d = 12;
    let (mut store, gs) = gs_block(1, d);
    for id in gs.h.param_ids().into_iter().chain(gs.g.param_ids()) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let fa = tape.constant(tensor(&[3, d], 2));
    let fv = tape.constant(tensor(&[3, d], 3));
    let g = gs.gate(&cx, &fa, &fv).unwrap();
    assert!(g.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn closed_gate_collapses_to_audio_dense_path() {
    let d = 12;
    let (mut store, gs) = gs_block(4, d);
    store.set(gs.g.bias, Tensor::full([d], -20.0)).unwrap();
    store.set(gs.g.weight, Tensor::zeros([d, d])).unwrap();
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let fa = tape.constant(tensor(&[2, d], 5));
    let fv = tape.constant(tensor(&[2, d], 6));
    let prior = tape.constant(tensor(&[2, d], 7));
    let mut sum = DenseSum::new();
    sum.accumulate(&prior).unwrap();
    let out = gs.forward(&cx, &fa, &fv, &mut sum, Connection::Dense).unwrap();

    let zero = tape.constant(Tensor::zeros([2, d]));
    let expected = gs
        .norm
        .forward(&cx, &gs.proj.forward(&cx, &zero).unwrap().add(&prior.add(&fa).unwrap()).unwrap())
        .unwrap();
    assert!(out.value().max_abs_diff(expected.value()) < 1e-5);
}

#[test]
fn concat_fusion_cases() {
    let cfg = small("av-multistage-concat");
    let mut model = build_model(&cfg, 3).unwrap();
    let FusionBlock::Concat(block) = model.net.fusion[0].clone() else {
        panic!("expected a concat block");
    };
    let d = cfg.hidden;
    let tape = Tape::inference();
    let (fa, fv) = (tensor(&[2, d], 1), tensor(&[2, d], 2));

    {
        let cx = Ctx::new(&tape, &model.params);
        let (a, v) = (tape.constant(fa.clone()), tape.constant(fv.clone()));
        // a fresh sequence: dense and skip agree on the first block
        let skip = block.forward(&cx, &a, &v, &mut DenseSum::new(), Connection::Skip).unwrap();
        let dense = block.forward(&cx, &a, &v, &mut DenseSum::new(), Connection::Dense).unwrap();
        assert_eq!(skip.value(), dense.value());
        // once the accumulator holds something else they differ
        let mut sum = DenseSum::new();
        sum.accumulate(&tape.constant(tensor(&[2, d], 3))).unwrap();
        let later = block.forward(&cx, &a, &v, &mut sum, Connection::Dense).unwrap();
        assert!(later.value().max_abs_diff(skip.value()) > 1e-3);
        assert_eq!(skip.shape(), [2, d]);
    }

    for id in block.proj.param_ids() {
        let shape = model.params.get(id).shape().to_vec();
        model.params.set(id, Tensor::zeros(shape)).unwrap();
    }
    let cx = Ctx::new(&tape, &model.params);
    let (a, v) = (tape.constant(fa.clone()), tape.constant(fv));
    let out = block.forward(&cx, &a, &v, &mut DenseSum::new(), Connection::Skip).unwrap();
    let ln = block.norm.forward(&cx, &a).unwrap();
    assert_eq!(out.value(), ln.value());
}

#[test]
fn residual_with_zero_block_output_is_layernorm() {
    let d = 8;
    let mut store = ParamStore::new();
    let norm = LayerNorm::new(&mut Init::new(&mut store, 0), "ln", d).unwrap();
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let x = tape.constant(tensor(&[1, d], 9));
    let zero = tape.constant(Tensor::zeros([1, d]));
    let expected = norm.forward(&cx, &x).unwrap();
    for conn in [Connection::Skip, Connection::Dense] {
        let y = dense_residual(&cx, &norm, &zero, &x, &mut DenseSum::new(), conn).unwrap();
        assert_eq!(y.value(), expected.value());
    }
}

#[test]
fn mask_and_gate_ranges() {
    let cfg = small("av-gs");
    for seed in 0..5 {
        let model = build_model(&cfg, seed).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &model.params);
        let audio = tape.constant(Tensor::from_vec(synth_speech(3200, seed)));
        let enc = model.net.encode_audio(&cx, &audio).unwrap();
        let nf = enc.shape()[0];
        let video = tape.constant(tensor(&[nf, cfg.hidden], seed + 100).map(|v| 3.0 * v));
        let mut state = model.net.initial_state();
        let mask = model
            .net
            .predict_mask(&cx, &enc, Some(&video), &mut state, &mut StageTimes::default())
            .unwrap();
        assert_eq!(mask.shape(), [nf, cfg.audio_features]);
        assert!(mask.value().data().iter().all(|&m| m > 0.0 && m < 1.0));
        for block in &model.net.fusion {
            let FusionBlock::Gs(gs) = block else { panic!("GS model") };
            let fa = tape.constant(tensor(&[4, cfg.hidden], seed + 7).map(|v| 5.0 * v));
            let fv = tape.constant(tensor(&[4, cfg.hidden], seed + 8).map(|v| 5.0 * v));
            let g = gs.gate(&cx, &fa, &fv).unwrap();
            assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

fn close_all_gates(model: &mut Model) {
    let gates: Vec<_> = model
        .net
        .fusion
        .iter()
        .map(|b| match b {
            FusionBlock::Gs(gs) => (gs.g.weight, gs.g.bias),
            FusionBlock::Concat(_) => panic!("GS model"),
        })
        .collect();
    for (w, b) in gates {
        let (ws, bs) = (model.params.get(w).shape().to_vec(), model.params.get(b).shape().to_vec());
        model.params.set(w, Tensor::zeros(ws)).unwrap();
        model.params.set(b, Tensor::full(bs, -1e4)).unwrap();
    }
}

#[test]
fn closed_gates_make_output_audio_only() {
    let mut model = build_model(&small("av-gs"), 11).unwrap();
    close_all_gates(&mut model);
    let audio = synth_speech(6400, 2);
    let talking = synth_roi(&SynthRoiSpec::default(), &audio);
    let noise = synth_roi(&SynthRoiSpec { mode: RoiMode::Noise, seed: 5, ..Default::default() }, &audio);
    let a = model.enhance(&audio, &talking).unwrap();
    let b = model.enhance(&audio, &noise).unwrap();
    let c = model.enhance(&audio, &[]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn unit_mask_with_pseudo_inverse_decoder_reconstructs() {
    let cfg = ModelConfig::preset("ao-e3net").unwrap().scaled(384, 16, 32, 1);
    let mut model = build_model(&cfg, 6).unwrap();
    model.init_pseudo_inverse_decoder().unwrap();
    model.net.force_unit_mask = true;
    let x = synth_speech(4000, 4);
    let y = model.enhance(&x, &[]).unwrap();
    assert_eq!(y.len(), x.len());
    // interior samples are covered by two frames
    let (x, y) = (&x[160..3840], &y[160..3840]);
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
    let corr = dot(x, y) / (dot(x, x) * dot(y, y)).sqrt();
    assert!(corr > 0.9, "correlation {corr}");
}

#[test]
fn output_length_follows_framing() {
    let model = build_model(&small("toy-gs"), 0).unwrap();
    let out = model.enhance(&synth_speech(480, 1), &[]).unwrap();
    assert_eq!(out.len(), 480);
    assert!(build_model(&small("toy-gs"), 0).unwrap().enhance(&[0.0; 100], &[]).is_err());
}

#[test]
fn blank_rois_give_finite_output() {
    let model = build_model(&small("av-gs"), 2).unwrap();
    let audio = synth_speech(3200, 3);
    let blank = synth_roi(&SynthRoiSpec { mode: RoiMode::Blank, ..Default::default() }, &audio);
    let y = model.enhance(&audio, &blank).unwrap();
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn param_report_rows_sum_to_total() {
    for name in ["ao-e3net", "naive-av", "av-gs", "toy-multistage-concat"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let report = param_report(&cfg).unwrap();
        assert_eq!(report.rows.iter().map(|r| r.count).sum::<usize>(), report.total, "{name}");
        let model = build_model(&cfg, 0).unwrap();
        assert_eq!(model.params.numel(), report.total);
        assert_eq!(model.net.param_count(&model.params), report.total);
    }
}

#[test]
fn builds_are_deterministic_per_seed() {
    let cfg = small("av-gs");
    let (a, b, c) = (build_model(&cfg, 5).unwrap(), build_model(&cfg, 5).unwrap(), build_model(&cfg, 6).unwrap());
    let flat = |m: &Model| m.params.iter().flat_map(|(_, _, t)| t.to_vec()).collect::<Vec<f32>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = small("av-gs");
    cfg.video_lstm_blocks = 1;
    assert!(build_model(&cfg, 0).is_err());
    let mut cfg = small("ao-e3net");
    cfg.video_lstm_blocks = 1;
    assert!(build_model(&cfg, 0).is_err());
    let cfg = small("ao-e3net");
    let roi = synth_roi(&SynthRoiSpec::default(), &synth_speech(640, 0));
    assert!(build_model(&cfg, 0).unwrap().enhance(&synth_speech(640, 0), &roi).is_err());
}

#[test]
fn end_to_end_gradients_at_toy_scale() {
    // audio_features 16, hidden 8, two blocks per stack
    for name in ["toy-ao", "toy-naive-av", "toy-multistage-concat", "toy-gs"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let report = tasks::gradcheck(&cfg, 2, 1e-3, 300, None).unwrap();
        assert!(report.pass, "{name}: {} at {:?}", report.max_rel_err, report.worst);
        assert!(report.samples >= 300);
    }
}

#[test]
fn gradcheck_is_repeatable() {
    let cfg = ModelConfig::preset("toy-gs").unwrap();
    let a = tasks::gradcheck(&cfg, 9, 1e-3, 300, None).unwrap();
    let b = tasks::gradcheck(&cfg, 9, 1e-3, 300, None).unwrap();
    assert_eq!(a.max_rel_err, b.max_rel_err);
}

#[test]
fn fusion_kinds_of_presets() {
    assert_eq!(ModelConfig::preset("av-gs").unwrap().fusion, Fusion::MultistageGs);
    assert_eq!(ModelConfig::preset("naive-av").unwrap().fusion, Fusion::SingleConcat);
    assert!(ModelConfig::preset("nope").is_err());
}
