use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::checkpoint::Provenance;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleParams;
use crate::nn::params::Init;
use crate::nn::ParamGroup;

fn scrambled(seed: u64, std: f64) -> Denoiser {
    let mut m = Denoiser::new(DenoiserConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for grp in [ParamGroup::Unet, ParamGroup::Temporal] {
        m.store_mut().reinit_group(grp, &mut rng, Init::Normal { std });
    }
    m
}

fn pipeline(model: Denoiser) -> Pipeline {
    Pipeline::new(model, ScheduleParams::default().build().unwrap())
}

fn request(mode: GenerationMode, sampler: Sampler) -> GenerationRequest {
    GenerationRequest {
        prompt: PromptAttributes::new(1, 2, 3),
        frames: 4,
        mode,
        sampler,
        steps: 6,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn generation_is_deterministic_and_anchor_is_exact() {
    let p = pipeline(scrambled(1, 0.05));
    for sampler in [Sampler::Ddim, Sampler::Ddpm] {
        let req = request(GenerationMode::AnchorTrained, sampler);
        let a = p.generate(&req, None).unwrap();
        let b = p.generate(&req, None).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.metadata.anchor, Some(2));
        assert_eq!(a.metadata.anchor_residuals.len(), 6);
        assert!(a.metadata.max_anchor_residual < 1e-5, "{}", a.metadata.max_anchor_residual);
        let single = p.generate_single_image(&req, None).unwrap();
        assert_eq!(single, a.frames[2]);
        assert!(a.frames.iter().all(|f| f.is_finite()));
    }
}

#[test]
fn anchor_ignores_temporal_weights() {
    let model = scrambled(2, 0.05);
    let mut other = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    other.store_mut().reinit_group(ParamGroup::Temporal, &mut rng, Init::Normal { std: 0.05 });
    let req = request(GenerationMode::AnchorTrainingFree, Sampler::Ddpm);
    let a = pipeline(model).generate(&req, None).unwrap();
    let b = pipeline(other).generate(&req, None).unwrap();
    assert_eq!(a.frames[2], b.frames[2]);
    assert_ne!(a.frames[0], b.frames[0]);
}

#[test]
fn guidance_one_is_a_no_op() {
    let p = pipeline(scrambled(3, 0.05));
    let req = request(GenerationMode::Baseline, Sampler::Ddim);
    let a = p.generate(&req, None).unwrap();
    let guided = GenerationRequest {
        guidance_scale: 2.0,
        ..req.clone()
    };
    let g = p.generate(&guided, None).unwrap();
    assert_ne!(a.frames, g.frames);
    assert!(a.metadata.anchor_residuals.is_empty());
    let anchored = p
        .generate(&GenerationRequest { mode: GenerationMode::AnchorTrained, ..guided }, None)
        .unwrap();
    assert!(anchored.metadata.max_anchor_residual < 1e-5);
}

#[test]
fn baseline_and_anchor_share_non_anchor_noise() {
    // with zero temporal output the modes only differ in which stream the anchor draws
    let mut model = scrambled(4, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for id in model.store().ids_in(ParamGroup::Temporal) {
        if model.store().entry(id).name.contains("to_out") {
            let shape = model.store().get(id).shape().to_vec();
            model.store_mut().set(id, Init::Zeros.sample(&shape, &mut rng)).unwrap();
        }
    }
    let p = pipeline(model);
    let base = p.generate(&request(GenerationMode::Baseline, Sampler::Ddim), None).unwrap();
    let anch = p.generate(&request(GenerationMode::AnchorTrained, Sampler::Ddim), None).unwrap();
    for i in [0, 1, 3] {
        assert_eq!(base.frames[i], anch.frames[i]);
    }
    assert_ne!(base.frames[2], anch.frames[2]);
}

#[test]
fn animate_with_zero_denoiser_reproduces_source() {
    let p = pipeline(Denoiser::new(DenoiserConfig::tiny(), 0).unwrap());
    let r = DenoiserConfig::tiny().resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let source = Init::Uniform { bound: 1.0 }.sample::<f64>(&[3, r, r], &mut rng).map(|v| 0.5 + 0.4 * v);
    let req = request(GenerationMode::AnchorTrained, Sampler::Ddim);
    let clip = p.animate_image(&source, &req, None).unwrap();
    assert!(clip.frames[2].max_abs_diff(&source) < 1e-9);
    let ddpm = GenerationRequest {
        sampler: Sampler::Ddpm,
        ..req.clone()
    };
    assert!(matches!(p.animate_image(&source, &ddpm, None), Err(Error::Config(_))));
    let base = GenerationRequest {
        mode: GenerationMode::Baseline,
        ..req
    };
    assert!(p.animate_image(&source, &base, None).is_err());
}

#[test]
fn long_generation_degenerates_to_generate() {
    let p = pipeline(scrambled(6, 0.05));
    for mode in [GenerationMode::Baseline, GenerationMode::AnchorTrained] {
        let req = request(mode, Sampler::Ddpm);
        let a = p.generate(&req, None).unwrap();
        let b = p.generate_long(&req, 4, 1, None).unwrap();
        assert_eq!(a.frames, b.frames);
        let long = p.generate_long(&req, 9, 1, None).unwrap();
        assert_eq!(long.num_frames(), 9);
        assert!(long.frames.iter().all(|f| f.is_finite()));
        if mode.uses_anchor() {
            assert_eq!(long.frames[2], a.frames[2]);
            assert!(long.metadata.max_anchor_residual < 1e-5);
        }
    }
    let req = request(GenerationMode::Baseline, Sampler::Ddim);
    assert!(p.generate_long(&req, 9, 4, None).is_err());
    assert!(p.generate_long(&req, 3, 0, None).is_err());
}

#[test]
fn window_starts_cover_sequence() {
    assert_eq!(window_starts(3, 3, 1), vec![0]);
    assert_eq!(window_starts(8, 3, 1), vec![0, 2, 4, 5]);
    assert_eq!(window_starts(7, 3, 0), vec![0, 3, 4]);
}

#[test]
fn mode_checks_follow_lineage() {
    let model = Denoiser::new(DenoiserConfig::tiny(), 0).unwrap();
    let mut prov = Provenance::init(0);
    prov.lineage = vec!["t2i".into(), "baseline_motion".into()];
    let ck = Checkpoint::from_denoiser(&model, ScheduleParams::default(), prov);
    let p = Pipeline::from_checkpoint(&ck).unwrap();
    p.check_mode(GenerationMode::Baseline).unwrap();
    p.check_mode(GenerationMode::AnchorTrainingFree).unwrap();
    assert!(matches!(p.check_mode(GenerationMode::AnchorTrained), Err(Error::Config(_))));
    let ck = Checkpoint::from_denoiser(&model, ScheduleParams::default(), Provenance::init(0));
    assert!(Pipeline::from_checkpoint(&ck).unwrap().check_mode(GenerationMode::Baseline).is_err());
}

#[test]
fn attention_capture_and_output_layout() {
    let p = pipeline(scrambled(7, 0.05));
    let req = GenerationRequest {
        attention: AttentionCapture::All,
        ..request(GenerationMode::AnchorTrained, Sampler::Ddim)
    };
    let clip = p.generate(&req, None).unwrap();
    assert_eq!(clip.attention.len(), 6);
    for rec in &clip.attention {
        for m in &rec.maps {
            assert!(m.max_row_sum_error() < 1e-5);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    clip.save(dir.path(), true).unwrap();
    assert!(dir.path().join("frames/003.png").exists());
    assert!(dir.path().join(PREVIEW_FILE).exists());
    let meta: ClipMetadata = serde_json::from_str(&fs::read_to_string(dir.path().join(METADATA_FILE)).unwrap()).unwrap();
    assert_eq!(meta, clip.metadata);
    let back = GeneratedClip::load(dir.path()).unwrap();
    assert_eq!(back.metadata, clip.metadata);
    for (a, b) in back.frames.iter().zip(&clip.frames) {
        // PNG storage quantizes to 8 bits
        assert!(a.max_abs_diff(&b.map(|v| v.clamp(0.0, 1.0))) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn framewise_equals_all_tiers_off_baseline() {
    let p = pipeline(scrambled(8, 0.05));
    let req = request(GenerationMode::Baseline, Sampler::Ddpm);
    let off = GenerationRequest {
        tier_mask: Some(vec![false; 2]),
        ..req.clone()
    };
    let a = p.generate(&off, None).unwrap();
    let b = p.generate_framewise(&req, None).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_ne!(p.generate(&req, None).unwrap().frames, b.frames);
}
