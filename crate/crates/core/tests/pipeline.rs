use mrf_core::dictionary::{build_grid, simulate_dictionary};
use mrf_core::epg::simulate_fingerprint;
use mrf_core::mrfnet::{decode_model, encode_model, make_training_set, train};
use mrf_core::recon::{
    back_project, forward_acquire, make_phantom, map_error, reconstruct_maps, sampling_masks,
    synthesize_image, Estimator, PhantomSpec,
};
use mrf_core::subspace::{compute_subspace, SubspaceOptions};
use mrf_core::{
    Complex64, CompressedDictionary, MlpModel, ParamGrid, RangeSpec, SequenceParams, TrainConfig,
};

fn correlation(a: &[Complex64], b: &[Complex64]) -> f64 {
    let dot: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    let norm = |v: &[Complex64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    dot.norm() / (norm(a) * norm(b))
}

#[test]
fn undersampled_region_means_track_their_fingerprints() {
    let seq = SequenceParams::default();
    let phantom = make_phantom(&PhantomSpec::default(), &ParamGrid::fisp_default()).unwrap();
    let n = phantom.n_voxels();
    let image = synthesize_image(&phantom, &seq).unwrap();
    let masks = sampling_masks(64, 64, seq.len(), n / 16, 3).unwrap();
    let back = back_project(&forward_acquire(&image, &masks).unwrap()).unwrap();
    for (i, name) in phantom.names.iter().enumerate() {
        let voxels: Vec<usize> = (0..n)
            .filter(|&v| phantom.labels[v] == i as u32 + 1)
            .collect();
        let mut mean = vec![Complex64::new(0.0, 0.0); seq.len()];
        for &v in &voxels {
            mean.iter_mut()
                .zip(back.voxel(v))
                .for_each(|(m, x)| *m += x);
        }
        let v = voxels[0];
        let truth = simulate_fingerprint(phantom.t1[v], phantom.t2[v], &seq)
            .unwrap()
            .samples;
        let r = correlation(&mean, &truth);
        assert!(r > 0.9, "{name}: region-mean correlation {r}");
    }
}

#[test]
fn small_pipeline_recovers_an_on_grid_phantom() {
    let seq = SequenceParams::fisp(120);
    let grid = build_grid(
        RangeSpec::new(200.0, 50.0, 2000.0),
        RangeSpec::new(20.0, 10.0, 300.0),
    )
    .unwrap();
    let dict = simulate_dictionary(&grid, &seq).unwrap();
    let sub = compute_subspace(&dict, 6, &SubspaceOptions::default()).unwrap();
    let cd = CompressedDictionary::new(&dict, &sub).unwrap();

    let mut spec = PhantomSpec::default().snapped_to(&grid);
    spec.height = 24;
    spec.width = 24;
    for r in &mut spec.regions {
        r.t1_ms = r.t1_ms.min(2000.0);
        r.t2_ms = r.t2_ms.min(300.0);
    }
    let phantom = make_phantom(&spec, &grid).unwrap();
    let image = synthesize_image(&phantom, &seq).unwrap();
    let masks = sampling_masks(24, 24, seq.len(), 24 * 24, 1).unwrap();
    let back = back_project(&forward_acquire(&image, &masks).unwrap()).unwrap();

    let dm = reconstruct_maps(
        &back,
        &Estimator::Dm {
            dict: &cd,
            subspace: &sub,
        },
        1e-9,
    )
    .unwrap();
    let err = map_error(&dm, &phantom).unwrap();
    for r in &err.regions {
        assert_eq!(r.t1_median_rel_error, Some(0.0), "{}", r.name);
        assert_eq!(r.t2_median_rel_error, Some(0.0), "{}", r.name);
    }

    let cfg = TrainConfig {
        epochs: 4,
        augmentation_factor: 4,
        rng_seed: 2,
        ..TrainConfig::default()
    };
    let set = make_training_set(&dict, &sub, &cfg).unwrap();
    let init = MlpModel::init(sub.clone(), &[120, 6, 32, 16, 2], 2).unwrap();
    let (model, history) = train(&init, &set, &cfg).unwrap();
    assert!(history.last() < history.first());
    let (loaded, meta) = decode_model(&encode_model(&model, Some(&cfg)).unwrap()).unwrap();
    assert_eq!(meta.train_config, Some(cfg));

    let est = |m| Estimator::Net {
        model: m,
        grid: &grid,
        seq: &seq,
    };
    let a = reconstruct_maps(&back, &est(&model), 1e-9).unwrap();
    let b = reconstruct_maps(&back, &est(&loaded), 1e-9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.flags, dm.flags);
}
