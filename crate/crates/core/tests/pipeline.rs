use fibro_core::numerics::{adamw_step, AdamWConfig, Graph, OptimizerState};
use fibro_core::preprocess::{read_bundle_dir, read_manifest};
use fibro_core::synthetic::{generate_case, generate_dataset};
use fibro_core::training::{bundle_labels, EarlyStopping};
use fibro_core::{Model, ModelConfig, Modality, SynthConfig, Task};

fn blob_voxels(extents: [usize; 3]) -> Vec<(usize, usize, usize)> {
    let r = *extents.iter().min().unwrap() as f64 / 4.0;
    let mut out = Vec::new();
    for z in 0..extents[2] {
        for y in 0..extents[1] {
            for x in 0..extents[0] {
                let d2: f64 = [x, y, z].iter().zip(extents).map(|(&p, e)| (p as f64 - (e as f64 - 1.0) / 2.0).powi(2)).sum();
                if d2 <= r * r {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// Stage recovered by thresholding the mean blob intensity of one modality
/// halfway between neighbouring stage means.
fn threshold_stage(m: Modality, mean: f64, contrast: f64) -> u8 {
    let slope = match m {
        Modality::T1wi => contrast,
        Modality::T2wi => contrast / 2.0,
        Modality::Dwi => -contrast / 2.0,
    };
    let s = (mean - 0.3) / slope;
    s.round().clamp(1.0, 4.0) as u8
}

#[test]
fn single_modality_threshold_recovers_stage() {
    let cfg = SynthConfig { n_cases: 200, seed: 4, ..SynthConfig::default() };
    let blob = blob_voxels(cfg.extents);
    let (mut right, mut total) = (0, 0);
    for i in 0..cfg.n_cases {
        let case = generate_case(&cfg, i).unwrap();
        for m in Modality::ALL {
            let Some(v) = &case.volumes[m.index()] else { continue };
            let mean = blob.iter().map(|&(x, y, z)| v.data[v.index(x, y, z)]).sum::<f64>() / blob.len() as f64;
            right += usize::from(threshold_stage(m, mean, cfg.contrast) == case.stage);
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "threshold accuracy {acc}");
}

#[test]
fn missing_rate_matches_drop_probability() {
    let cfg = SynthConfig { n_cases: 2000, p_drop: 0.3, seed: 11, ..SynthConfig::default() };
    let mut missing = 0usize;
    for i in 0..cfg.n_cases {
        let case = generate_case(&SynthConfig { extents: [2, 2, 2], ..cfg.clone() }, i).unwrap();
        let present = case.volumes.iter().filter(|v| v.is_some()).count();
        assert!(present >= 1);
        missing += 3 - present;
    }
    // each modality is dropped independently, redrawn when all three go
    let p = cfg.p_drop;
    let expected = (p - p.powi(3)) / (1.0 - p.powi(3));
    let rate = missing as f64 / (3 * cfg.n_cases) as f64;
    let sd = (expected * (1.0 - expected) / (3 * cfg.n_cases) as f64).sqrt();
    assert!((rate - expected).abs() < 4.0 * sd, "missing rate {rate}, expected {expected}");
}

#[test]
fn dataset_files_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_cases: 12, seed: 5, ..SynthConfig::default() };
    let summary = generate_dataset(&cfg, dir.path()).unwrap();
    let rows = read_manifest(&summary.manifest).unwrap();
    let bundles = read_bundle_dir(&summary.bundle_dir).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(bundles, summary.bundles);
    for (row, b) in rows.iter().zip(&bundles) {
        assert_eq!(row.case_id, b.case_id);
        assert_eq!(row.stage, b.stage);
        for (path, present) in row.paths().iter().zip(b.mask) {
            assert_eq!(!path.is_empty(), present);
            assert_eq!(dir.path().join(path).is_file(), present);
        }
    }
}

#[test]
fn early_stopping_after_patience() {
    let mut s = EarlyStopping::new(30);
    let mut stopped = None;
    for epoch in 1..=100 {
        let loss = if epoch <= 5 { 1.0 / epoch as f64 } else { 0.5 };
        s.update(epoch, loss);
        if s.should_stop() {
            stopped = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped, Some(35));
    assert_eq!(s.best.map(|b| b.0), Some(5));
}

#[test]
fn desk_model_overfits_separable_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_cases: 32, p_drop: 0.0, seed: 8, ..SynthConfig::default() };
    let bundles = generate_dataset(&cfg, dir.path()).unwrap().bundles;
    let labels = bundle_labels(&bundles, Task::Cirrhosis).unwrap();
    let mut model = Model::new(ModelConfig::desk(2), 1).unwrap();
    let mut opt = OptimizerState::new(&model.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let train_accuracy = |m: &Model| {
        let right = bundles.iter().zip(&labels).filter(|(b, &l)| fibro_core::evaluate::argmax(&m.logits(b).unwrap()) == l).count();
        right as f64 / bundles.len() as f64
    };
    let mut acc = train_accuracy(&model);
    let mut epoch = 0;
    while acc < 1.0 && epoch < 200 {
        for (batch, chunk) in bundles.chunks(8).zip(labels.chunks(8)) {
            model.params.zero_grad();
            for (i, (b, &l)) in batch.iter().zip(chunk).enumerate() {
                let mut g = Graph::training((epoch * 64 + i) as u64);
                let logits = model.forward(&mut g, b).unwrap();
                let loss = g.cross_entropy(logits, l).unwrap();
                model.params.accumulate(&g.backward(loss).unwrap());
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            adamw_step(&mut model.params, &mut opt, 1e-3).unwrap();
        }
        epoch += 1;
        if epoch % 5 == 0 {
            acc = train_accuracy(&model);
        }
    }
    assert_eq!(acc, 1.0, "train accuracy after {epoch} epochs");
}
