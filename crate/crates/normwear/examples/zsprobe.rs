use std::sync::Arc;
use normwear::eval::splits::split_stratified;
use normwear::model::{EncoderConfig, Model, encode_segment};
use normwear::msitf::*;
use normwear::rng::Rng;
use normwear::scalogram::tokenize;
use normwear::signal::*;
use normwear::text::{default_templates, ReferenceEmbedder, TextEmbedder};

fn main() {
    let t0 = std::time::Instant::now();
    let spec = SynthSpec {
        channels: 1,
        classes: vec![
            SynthClass { name: "slow".into(), band_hz: (1.5, 2.5) },
            SynthClass { name: "medium".into(), band_hz: (4.0, 5.0) },
            SynthClass { name: "rapid".into(), band_hz: (7.5, 8.5) },
        ],
        snr_db: Some(10.0),
        subjects: 12,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec, 180, &mut Rng::new(42)).unwrap();
    let ds = canonicalize_dataset(&ds).unwrap();
    let model = Model::<f32>::init(EncoderConfig::tiny(), 1).unwrap();
    println!("encode start {:?}", t0.elapsed());
    let states: Vec<_> = ds.segments.iter().map(|seg| {
        let stacks = tokenize(seg).unwrap();
        encode_segment(&model, &stacks).unwrap()
    }).collect();
    println!("encoded {:?}", t0.elapsed());
    let labels: Vec<String> = ds.segments.iter().map(|s| s.label.as_ref().unwrap().as_text()).collect();
    let subjects: Vec<String> = ds.segments.iter().map(|s| s.subject_id.clone()).collect();
    let samples: Vec<AlignSample> = states.iter().zip(&labels).map(|(st, l)| {
        AlignSample::from_state(st, 12, 43, l.clone())
    }).collect();
    let split = split_stratified(&labels, &subjects, 0.8, &mut Rng::new(7)).unwrap();
    let train: Vec<AlignSample> = split.train.iter().map(|&i| AlignSample { h: samples[i].h.clone(), cols: samples[i].cols.clone(), label: samples[i].label.clone() }).collect();

    let embedder = ReferenceEmbedder::default();
    let class_names: Vec<String> = vec!["slow".into(), "medium".into(), "rapid".into()];
    let task = default_templates(&class_names);
    let query = embedder.embed(&task.query).unwrap().vector;
    let candidates: Vec<Vec<f64>> = class_names.iter().map(|c| {
        embedder.embed(&task.labels.iter().find(|l| &l.label == c).unwrap().render(0)).unwrap().vector
    }).collect();

    let acc_of = |m: &MsitfModel<f32>| {
        let mut correct = 0;
        for &i in &split.test {
            let (best, _) = zero_shot(m, &samples[i].h, &samples[i].cols, &query, &candidates).unwrap();
            if class_names[best] == labels[i] { correct += 1; }
        }
        correct as f64 / split.test.len() as f64
    };

    let cfg = MsitfConfig::new(64, 128, 43);
    let before = acc_of(&MsitfModel::init(cfg.clone(), 5));
    println!("before-bind acc {before:.3} @ {:?}", t0.elapsed());
    let mut m = MsitfModel::init(cfg, 5);
    let acfg = AlignConfig { epochs: 15, refine_epochs: 8, batch: 16, seed: 5, ..AlignConfig::default() };
    let curve = align_train(&mut m, &train, &task, &embedder, &acfg).unwrap();
    for (p, e, l) in curve.iter().step_by(5) { println!("{p} {e} {l:.4}"); }
    let after = acc_of(&m);
    println!("post-align acc {after:.3} (gap {:.3}) total {:?}", after - before, t0.elapsed());
}
