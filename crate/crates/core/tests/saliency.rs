use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use voxfuse::model::{InputBatch, Mode, ModelConfig, NetworkParameters};
use voxfuse::phantom::{generate_phantom_subject, GroundTruthMasks, PhantomSpec};
use voxfuse::saliency::{
    gradcam, gradcam_stack, region_saliency_stats, render_overlay, resample_trilinear, Plane, SaliencyError,
    SaliencyTarget, SaliencyVolume,
};
use voxfuse::{Cdr, MaskGrid, Modality, VolumeGrid};

fn phantom16(cdr: Cdr, seed: u64) -> voxfuse::phantom::PhantomSubject {
    let mut spec = PhantomSpec::new(cdr, seed);
    spec.dims = [16; 3];
    generate_phantom_subject("sub-0001", 70.0, &spec).unwrap()
}

fn sal_from(values: VolumeGrid) -> SaliencyVolume {
    SaliencyVolume { values, target_class: 1, target_branch: "T1".into(), layer: "x".into(), degenerate: false }
}

#[test]
fn saliency_is_bounded_and_peaks_at_one() {
    let p = phantom16(Cdr::Mild, 3);
    let params = NetworkParameters::<f32>::build(&ModelConfig::default(), 11).unwrap();
    for class in 0..2 {
        let s = gradcam_stack(&params, &p.preprocessed(), class, SaliencyTarget::Branch(Modality::T1)).unwrap();
        let v = s.values.voxels();
        assert_eq!(s.values.dims(), [16; 3]);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if !s.degenerate {
            assert_eq!(v.iter().copied().fold(0.0f32, f32::max), 1.0);
        }
    }
}

#[test]
fn invariant_to_scaling_target_class_weights() {
    let p = phantom16(Cdr::Mild, 4);
    let cfg = ModelConfig::default();
    let params = NetworkParameters::<f32>::build(&cfg, 5).unwrap();
    let mut scaled = params.clone();
    let w = scaled.tensor_mut("head.fc2.weight").unwrap();
    for v in &mut w.data[cfg.head_hidden..2 * cfg.head_hidden] {
        *v *= 2.0;
    }
    let stack = p.preprocessed();
    for target in [SaliencyTarget::Branch(Modality::T1), SaliencyTarget::Branch(Modality::CSF), SaliencyTarget::MeanOfBranches]
    {
        let a = gradcam_stack(&params, &stack, 1, target).unwrap();
        let b = gradcam_stack(&scaled, &stack, 1, target).unwrap();
        assert_eq!(a.degenerate, b.degenerate);
        for (x, y) in a.values.voxels().iter().zip(b.values.voxels()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn branch_cut_from_head_is_degenerate() {
    let p = phantom16(Cdr::Mild, 5);
    let cfg = ModelConfig::default();
    let mut params = NetworkParameters::<f32>::build(&cfg, 6).unwrap();
    // T1 embedding occupies fused columns 0..embedding_dim.
    let fc1 = params.tensor_mut("head.fc1.weight").unwrap();
    for row in fc1.data.chunks_exact_mut(cfg.fused_dim) {
        row[..cfg.embedding_dim].fill(0.0);
    }
    let s = gradcam_stack(&params, &p.preprocessed(), 1, SaliencyTarget::Branch(Modality::T1)).unwrap();
    assert!(s.degenerate);
    assert!(s.values.voxels().iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_bad_requests() {
    let p = phantom16(Cdr::None, 1);
    let cfg = ModelConfig { modalities: vec![Modality::T1], fused_dim: 64, ..ModelConfig::default() };
    let mut params = NetworkParameters::<f32>::build(&cfg, 0).unwrap();
    let stack = p.preprocessed();
    assert!(matches!(
        gradcam_stack(&params, &stack, 0, SaliencyTarget::Branch(Modality::CSF)),
        Err(SaliencyError::UnknownBranch(_))
    ));
    assert!(matches!(gradcam_stack(&params, &stack, 2, SaliencyTarget::MeanOfBranches), Err(SaliencyError::Class { .. })));
    params.tensor_mut("head.fc2.bias").unwrap().data[0] = f32::NAN;
    assert!(matches!(gradcam_stack(&params, &stack, 0, SaliencyTarget::MeanOfBranches), Err(SaliencyError::Model(_))));
}

/// Logit of `class` as a function of the last-block activations of a
/// single-branch model, recomputed in f64 straight from the tensors.
fn head_logit(params: &NetworkParameters<f32>, acts: &[f64], class: usize) -> f64 {
    let cfg = params.config();
    let s = acts.len() / cfg.embedding_dim;
    let emb: Vec<f64> = acts.chunks_exact(s).map(|c| c.iter().sum::<f64>() / s as f64).collect();
    let w1 = &params.tensor("head.fc1.weight").unwrap().data;
    let b1 = &params.tensor("head.fc1.bias").unwrap().data;
    let w2 = &params.tensor("head.fc2.weight").unwrap().data;
    let b2 = &params.tensor("head.fc2.bias").unwrap().data;
    let hidden: Vec<f64> = (0..cfg.head_hidden)
        .map(|j| {
            let z: f64 = (0..cfg.fused_dim).map(|i| w1[j * cfg.fused_dim + i] as f64 * emb[i]).sum::<f64>() + b1[j] as f64;
            z.max(0.0)
        })
        .collect();
    (0..cfg.head_hidden).map(|j| w2[class * cfg.head_hidden + j] as f64 * hidden[j]).sum::<f64>() + b2[class] as f64
}

#[test]
fn channel_weights_match_finite_differences() {
    let cfg = ModelConfig {
        modalities: vec![Modality::T1],
        encoder_channels: vec![1],
        embedding_dim: 1,
        fused_dim: 1,
        head_hidden: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut checked = 0;
    for seed in 0..20 {
        let params = NetworkParameters::<f32>::build(&cfg, seed).unwrap();
        let (trace, cache) = params.forward(&InputBatch::new(&input, 1, 1, [4; 3]), Mode::Eval).unwrap();
        assert_eq!(trace.last_dims, [4; 3]);
        let acts: Vec<f64> = trace.last_activations[0].iter().map(|&v| v as f64).collect();
        for class in 0..2 {
            let mut dl = vec![0.0f32; 2];
            dl[class] = 1.0;
            let g = params.backward(&cache, &dl, true).activation_grads.unwrap().remove(0);
            let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
            // Shifting every activation of the channel by h moves the
            // logit by h * sum(g) = h * S * alpha.
            let h = 1e-4;
            let shift = |d: f64| acts.iter().map(|a| a + d).collect::<Vec<_>>();
            let fd = (head_logit(&params, &shift(h), class) - head_logit(&params, &shift(-h), class)) / (2.0 * h) / 64.0;
            if fd.abs() < 1e-6 {
                continue;
            }
            checked += 1;
            assert!(((alpha - fd) / fd).abs() <= 1e-3, "seed {seed} class {class}: alpha {alpha} vs fd {fd}");
        }
    }
    assert!(checked >= 10, "only {checked} non-trivial cases");
}

#[test]
fn region_stats_trivial_fields() {
    let dims = [6, 6, 6];
    let brain: Vec<bool> = (0..216).map(|i| i % 6 >= 1 && i % 6 <= 4).collect();
    let ventricle: Vec<bool> = (0..216).map(|i| i % 6 == 2).collect();
    let masks = GroundTruthMasks {
        brain: MaskGrid::new(dims, brain.clone()).unwrap(),
        ventricle: MaskGrid::new(dims, ventricle).unwrap(),
        cortex: MaskGrid::new(dims, (0..216).map(|i| i % 6 == 1).collect()).unwrap(),
    };
    let inside = sal_from(VolumeGrid::new(dims, [1.0; 3], brain.iter().map(|&b| b as u8 as f32).collect()).unwrap());
    let st = region_saliency_stats(&inside, &masks).unwrap();
    assert_eq!((st.brain.mean, st.outside_brain.mean, st.ventricle.mean), (1.0, 0.0, 1.0));
    assert_eq!(st.brain.voxels + st.outside_brain.voxels, 216);

    let half = sal_from(VolumeGrid::new(dims, [1.0; 3], vec![0.5; 216]).unwrap());
    let st = region_saliency_stats(&half, &masks).unwrap();
    for r in [st.brain, st.ventricle, st.cortex, st.outside_brain] {
        assert_eq!(r.mean, 0.5);
    }
    let wrong = sal_from(VolumeGrid::zeros([6, 6, 5], [1.0; 3]).unwrap());
    assert!(matches!(region_saliency_stats(&wrong, &masks), Err(SaliencyError::Dims { .. })));
}

#[test]
fn resampling_keeps_maximum_near_coarse_peak() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        // One smooth bump at a random voxel over mild noise.
        let peak = [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)];
        let coarse: Vec<f64> = (0..64)
            .map(|i| {
                let p = [i % 4, (i / 4) % 4, i / 16];
                let d2: f64 = (0..3).map(|k| (p[k] as f64 - peak[k] as f64).powi(2)).sum();
                (-d2 / 2.0).exp() + rng.gen_range(0.0..0.1)
            })
            .collect();
        let fine = resample_trilinear(&coarse, [4; 3], [16; 3]);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let (c, f) = (argmax(&coarse), argmax(&fine));
        let cpos = [c % 4, (c / 4) % 4, c / 16];
        let fpos = [f % 16, (f / 16) % 16, f / 256];
        for k in 0..3 {
            let mapped = (fpos[k] as f64 + 0.5) / 4.0 - 0.5;
            assert!((mapped - cpos[k] as f64).abs() <= 1.0, "axis {k}: {fpos:?} vs {cpos:?}");
        }
    }
}

#[test]
fn overlay_shape_and_determinism() {
    let p = phantom16(Cdr::Mild, 8);
    let params = NetworkParameters::<f32>::build(&ModelConfig::default(), 2).unwrap();
    let stack = p.preprocessed();
    let s = gradcam_stack(&params, &stack, 1, SaliencyTarget::Branch(Modality::T1)).unwrap();
    let t1 = stack.channel(Modality::T1);
    let hash = || {
        let img = render_overlay(t1, &s, Plane::Axial, 8).unwrap();
        assert_eq!(img.dimensions(), (16, 16));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        img.save(&path).unwrap();
        Sha256::digest(std::fs::read(&path).unwrap())
    };
    assert_eq!(hash(), hash());
}

#[test]
fn saliency_of_2d_slice_model() {
    let p = phantom16(Cdr::Mild, 9);
    let params = NetworkParameters::<f32>::build(&ModelConfig::slice_2d(), 1).unwrap();
    let t1 = p.preprocessed().channel(Modality::T1).voxels()[16 * 16 * 8..16 * 16 * 9].to_vec();
    let s = gradcam(&params, &t1, [16, 16, 1], [1.0; 3], 3, SaliencyTarget::Branch(Modality::T1)).unwrap();
    assert_eq!(s.values.dims(), [16, 16, 1]);
    assert!(s.values.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
