//! End-to-end runs through model files, containers and latent files.

mod common;

use sganc::codec::{
    decode, decode_inter, difference_symbols, encode_inter, encode_intra, encode_intra_sequence, freeze_tables,
    intra_symbols, latent_mse, CodecBundle, Container, ImageDims,
};
use sganc::entropy::StagedEntropy;
use sganc::flow::{FlowConfig, StagedFlow};
use sganc::latent::{read_latents, write_latents, LatentCode, LatentSequence, StageLayout, FULL_CHANNELS, FULL_LAYERS};
use sganc::synth::{gen_intra_set, gen_video, SynthConfig};
use sganc::trainer::{train, LearnedModel, TrainConfig, TrainData, Trainer};
use sganc::Error;

fn desk_cfg(lambda: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        lambda,
        learning_rate: 1e-3,
        steps,
        flow: FlowConfig { coupling_layers: 4, ..FlowConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn trained_models_survive_the_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_intra_set::<f64>(64, &SynthConfig::default()).unwrap();
    let before = data.clone();
    let (mut model, trace) = train(TrainData::Frames(&data), &desk_cfg(1e-5, 40)).unwrap();
    assert_eq!(data, before, "training touched its dataset");
    assert_eq!(trace.len(), 40);

    freeze_tables(&mut model.entropy, &intra_symbols(&model.flow, &data).unwrap()).unwrap();
    let (fp, ep) = (dir.path().join("m.sgflow"), dir.path().join("m.sgent"));
    model.flow.save(&fp).unwrap();
    model.entropy.save(&ep).unwrap();
    let bundle = CodecBundle::<f64>::load(&fp, &ep, None, 10).unwrap();
    assert_eq!(bundle.flow(), &model.flow);

    let enc = encode_intra(&data[3], &bundle, ImageDims::default()).unwrap();
    let cp = dir.path().join("x.sgvc");
    enc.container.save(&cp).unwrap();
    let loaded = Container::load(&cp).unwrap();
    let a = decode(&loaded, &bundle).unwrap();
    let b = decode(&loaded, &bundle).unwrap();
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.states, enc.states);
    assert!(latent_mse(&data[3], &a.latents.frames()[0]).unwrap() < 1.0);
}

#[test]
fn training_is_seed_deterministic() {
    let data = gen_intra_set::<f64>(16, &SynthConfig::default()).unwrap();
    let cfg = desk_cfg(1e-5, 10);
    let (m1, t1) = train(TrainData::Frames(&data), &cfg).unwrap();
    let (m2, t2) = train(TrainData::Frames(&data), &cfg).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
    let (m3, _) = train(TrainData::Frames(&data), &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn identity_init_distortion_is_the_noise_variance() {
    let data = gen_intra_set::<f64>(512, &SynthConfig::default()).unwrap();
    let cfg = TrainConfig { batch_size: 512, ..desk_cfg(1e-5, 1) };
    let model = LearnedModel::new(4, 32, &cfg).unwrap();
    let mut trainer = Trainer::new(model, TrainData::Frames(&data), cfg).unwrap();
    let row = trainer.step().unwrap();
    assert!((row.distortion - 1.0 / 12.0).abs() < 0.05 / 12.0, "{}", row.distortion);
}

#[test]
fn inter_pipeline_with_separate_intra_model() {
    let seqs: Vec<LatentSequence<f64>> = (0..4)
        .map(|s| gen_video(&SynthConfig { frames: 24, seed: s, ..SynthConfig::default() }).unwrap())
        .collect();
    let frames: Vec<LatentCode<f64>> = seqs.iter().flat_map(|s| s.frames().to_vec()).collect();
    let cfg = desk_cfg(1e-5, 30);
    let (mut inter, _) = train(TrainData::Sequences(&seqs), &cfg).unwrap();
    freeze_tables(&mut inter.entropy, &difference_symbols(&inter.flow, &seqs).unwrap()).unwrap();

    let mut intra = inter.entropy.clone();
    intra.thaw();
    let fit = TrainConfig { train_flow: false, ..cfg };
    let mut t = Trainer::new(LearnedModel { flow: inter.flow.clone(), entropy: intra }, TrainData::Frames(&frames), fit).unwrap();
    t.run(20).unwrap();
    let fitted = t.into_model();
    assert_eq!(fitted.flow, inter.flow, "frozen flow moved");
    let mut intra = fitted.entropy;
    freeze_tables(&mut intra, &intra_symbols(&inter.flow, &frames).unwrap()).unwrap();

    let bundle = CodecBundle::new(inter.flow.clone(), inter.entropy.clone(), Some(intra), 4).unwrap();
    assert_eq!(bundle.digests().len(), 3);
    let test = gen_video::<f64>(&SynthConfig { frames: 30, seed: 40, ..SynthConfig::default() }).unwrap();
    for refresh in [false, true] {
        let enc = encode_inter(&test, &bundle, ImageDims::default(), refresh).unwrap();
        let dec = decode_inter(&enc.container, &bundle).unwrap();
        assert_eq!(dec.states, enc.states);
        assert_eq!(dec.latents.len(), 30);
    }
    let plain = encode_intra_sequence(&test, &bundle, ImageDims::default()).unwrap();
    assert_eq!(decode(&plain.container, &bundle).unwrap().states, plain.states);
}

#[test]
fn wrong_models_are_refused() {
    let data = gen_intra_set::<f64>(8, &SynthConfig::default()).unwrap();
    let layout = StageLayout::single(4);
    let build = |seed: u64| {
        let mut flow = StagedFlow::new(layout.clone(), 32, &FlowConfig { coupling_layers: 2, ..FlowConfig::default() }, seed).unwrap();
        flow.perturb(0.01, seed);
        let mut e = StagedEntropy::factorized(&layout, 32, false);
        freeze_tables(&mut e, &intra_symbols(&flow, &data).unwrap()).unwrap();
        CodecBundle::new(flow, e, None, 10).unwrap()
    };
    let (a, b) = (build(1), build(2));
    let enc = encode_intra(&data[0], &a, ImageDims::default()).unwrap();
    assert!(matches!(decode(&enc.container, &b), Err(Error::DigestMismatch { .. })));
}

/// The external encoder boundary: full-size latents exchanged as `.sglat`
/// files code through the whole pipeline exactly like synthetic desk data.
#[test]
fn full_size_latent_files_code_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthConfig { layers: FULL_LAYERS, channels: FULL_CHANNELS, frames: 3, ..SynthConfig::default() };
    let seq = gen_video::<f32>(&params).unwrap();
    let path = dir.path().join("clip.sglat");
    write_latents(&seq, &path).unwrap();
    let read: LatentSequence<f64> = read_latents(&path).unwrap();
    assert_eq!(read.shape(), (18, 512));
    assert_eq!(read.len(), 3);

    let layout = StageLayout::coarse_medium_fine();
    let flow = StagedFlow::new(layout.clone(), 512, &FlowConfig { coupling_layers: 2, hidden_width: Some(8), ..FlowConfig::default() }, 0).unwrap();
    let mut e = StagedEntropy::factorized(&layout, 512, true);
    freeze_tables(&mut e, &intra_symbols(&flow, read.frames()).unwrap()).unwrap();
    let bundle = CodecBundle::new(flow, e, None, 2).unwrap();
    let enc = encode_inter(&read, &bundle, ImageDims::default(), false).unwrap();
    let dec = decode(&enc.container, &bundle).unwrap();
    let out = dir.path().join("decoded.sglat");
    write_latents(&dec.latents, &out).unwrap();
    let back: LatentSequence<f64> = read_latents(&out).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.frames().iter().zip(read.frames()) {
        let worst = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 + 1e-6, "{worst}");
    }
}
