//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its runtime (visible with `-- --nocapture`).
//!
//! Published benchmark numbers are not targets here — they need full-scale
//! pretrained backbones — so every criterion is a property of this
//! implementation, checked at desk scale with pinned tolerances.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use faceforge_core::condition::{
    condition_to_seg, hflip_seg, seg_to_condition, SegmentationMap, SegmentationPalette,
};
use faceforge_core::dataset::{attribute_stats, AttributeVector, FaceRecord, Manifest};
use faceforge_core::diffusion::{
    probe_loss, ControlSample, ControlTrainer, ControlledDiffusion, DiffusionConfig,
    GuidanceConfig, SampleOptions, SamplerKind, ScheduleConfig, TrainRecipe, UNetConfig,
};
use faceforge_core::editor::{interpolate_embedding, EditConfig, EditSession, LayerSelection};
use faceforge_core::masked::{
    mask_ratio, DecodeOptions, MaskSchedule, MaskedTransformer, MaskedTransformerConfig,
};
use faceforge_core::metrics::{
    clip_score, directional_similarity, fid, frechet_distance, landmark_consistency,
    seg_consistency, GaussianStats,
};
use faceforge_core::pipeline::{
    cmd_build_dataset, cmd_generate, cmd_train, default_registry, write_synthetic_source,
    GenerationRequest, Modality, MuseTask, RunConfig, TrainStage, VqKind,
};
use faceforge_core::text::{StubTextEncoder, TextEncoder};
use faceforge_core::vq::{quantize, TokenGrid, VqConfig, VqModel};
use faceforge_tensor::gradcheck::check_gradients;
use faceforge_tensor::optim::Adam;
use faceforge_tensor::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use faceforge_tensor::{bitwise_eq, Tensor};
use rand::Rng;

fn report(criterion: u32, name: &str, pass: bool, elapsed: Duration, budget: Duration) {
    let within = elapsed <= budget;
    println!(
        "criterion {criterion:02} {name}: {} ({elapsed:.2?}, budget {budget:.0?})",
        if pass && within { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} `{name}` failed its property");
    assert!(
        within,
        "criterion {criterion} `{name}` blew its {budget:?} budget: {elapsed:?}"
    );
}

/// Smooth face-ish synthetic image in [0,1], `[3,S,S]`.
fn synth_image(size: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let cx = size as f64 * rng.gen_range(0.35..0.65);
    let cy = size as f64 * rng.gen_range(0.35..0.65);
    let r = size as f64 * rng.gen_range(0.2..0.35);
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = dx * dx + dy * dy < r * r;
            for c in 0..3 {
                let g = 0.2 * base[c]
                    + 0.5 * (x as f64 / size as f64) * (if c == 0 { 1.0 } else { 0.4 })
                    + 0.3 * (y as f64 / size as f64) * (if c == 2 { 1.0 } else { 0.3 });
                let v = if inside { 0.55 + 0.3 * base[c] } else { g };
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data)
}

#[test]
fn criterion_01_zero_init_control_branch_is_identity() {
    let t0 = Instant::now();
    let model = ControlledDiffusion::new(DiffusionConfig {
        unet: UNetConfig::default(),
        schedule: ScheduleConfig {
            timesteps: 100,
            ..Default::default()
        },
        seed: 7,
    })
    .unwrap();
    let enc = StubTextEncoder::new(32);
    let text = enc.encode("a portrait to compare").unwrap();
    let uncond = enc.encode_uncond();
    let condition = synth_image(16, 42).map(|v| v * 2.0 - 1.0);
    let mut pass = true;
    for (steps, sampler) in [(8, SamplerKind::Ddim), (6, SamplerKind::Ddpm)] {
        let opts = SampleOptions {
            steps,
            cfg_scale: 2.0,
            seed: 5,
            sampler,
        };
        let with = model.sample(&text, &uncond, Some(&condition), &opts).unwrap();
        let without = model.sample(&text, &uncond, None, &opts).unwrap();
        pass &= with.max_abs_diff(&without) < 1e-6;
    }
    report(1, "zero-init identity", pass, t0.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_02_quantizer_matches_exhaustive_scan() {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(2);
    let (k, d) = (64usize, 32usize);
    let latents = Tensor::new(&[25, 40, d], standard_normal_vec(&mut rng, 1000 * d));
    let codebook = Tensor::new(&[k, d], standard_normal_vec(&mut rng, k * d));
    let (grid, quantized) = quantize(&latents, &codebook).unwrap();
    // independent exhaustive nearest-neighbour scan
    let mut pass = true;
    for cell in 0..1000 {
        let v = &latents.data()[cell * d..(cell + 1) * d];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for j in 0..k {
            let e = &codebook.data()[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for i in 0..d {
                let diff = v[i] - e[i];
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        pass &= grid.get(cell) == best as u32;
        pass &= quantized.data()[cell * d..(cell + 1) * d]
            == codebook.data()[best * d..(best + 1) * d];
    }
    report(2, "quantizer oracle", pass, t0.elapsed(), Duration::from_secs(5));
}

#[test]
fn criterion_03_fid_analytic_and_monte_carlo() {
    let t0 = Instant::now();
    let diag = |mean: &[f64], var: &[f64]| {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var[i];
        }
        GaussianStats::new(mean.to_vec(), cov).unwrap()
    };
    let mut pass = true;
    // identical stats
    let a = diag(&[0.4, -1.0, 2.0], &[1.0, 0.7, 1.5]);
    pass &= frechet_distance(&a, &a).unwrap() < 1e-6;
    // 1-d analytic cases
    let n01 = diag(&[0.0], &[1.0]);
    let n11 = diag(&[1.0], &[1.0]);
    let n04 = diag(&[0.0], &[4.0]);
    pass &= (frechet_distance(&n01, &n11).unwrap() - 1.0).abs() <= 1e-6;
    pass &= (frechet_distance(&n01, &n04).unwrap() - 1.0).abs() <= 1e-6;
    // d=8 Monte-Carlo vs analytic, 10^4 samples per side
    let d = 8;
    let mut rng = rng_from_seed(3);
    let mean_a: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
    let mean_b: Vec<f64> = (0..d).map(|i| 0.5 - 0.07 * i as f64).collect();
    let var_a: Vec<f64> = (0..d).map(|i| 0.5 + 0.2 * i as f64).collect();
    let var_b: Vec<f64> = (0..d).map(|i| 1.5 - 0.1 * i as f64).collect();
    let draw = |rng: &mut faceforge_tensor::rng::SeededRng, m: &[f64], v: &[f64]| -> Vec<f64> {
        let z = standard_normal_vec(rng, d);
        (0..d).map(|i| m[i] + v[i].sqrt() * z[i]).collect()
    };
    let fa: Vec<Vec<f64>> = (0..10_000).map(|_| draw(&mut rng, &mean_a, &var_a)).collect();
    let fb: Vec<Vec<f64>> = (0..10_000).map(|_| draw(&mut rng, &mean_b, &var_b)).collect();
    let got = fid(&fa, &fb).unwrap();
    let analytic: f64 = (0..d)
        .map(|i| {
            (mean_a[i] - mean_b[i]).powi(2) + var_a[i] + var_b[i]
                - 2.0 * (var_a[i] * var_b[i]).sqrt()
        })
        .sum();
    pass &= (got - analytic).abs() / analytic < 0.05;
    report(3, "fid analytic", pass, t0.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_04_cosine_schedule_shape() {
    let t0 = Instant::now();
    let mut pass = (mask_ratio(0.0).unwrap() - 1.0).abs() <= 1e-12;
    pass &= mask_ratio(1.0).unwrap().abs() <= 1e-12;
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    for w in grid.windows(2) {
        pass &= mask_ratio(w[1]).unwrap() < mask_ratio(w[0]).unwrap();
    }
    report(4, "cosine schedule", pass, t0.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_05_inpainting_preserves_kept_tokens() {
    let t0 = Instant::now();
    let cfg = MaskedTransformerConfig {
        grid_height: 8,
        grid_width: 8,
        codebook_size: 16,
        layers: 1,
        heads: 2,
        model_dim: 32,
        text_dim: 16,
        seed: 5,
    };
    let model = MaskedTransformer::new(cfg).unwrap();
    let enc = StubTextEncoder::new(16);
    let mut pass = true;
    let mut checked_cells = 0usize;
    let mut preserved = 0usize;
    for run in 0..100u64 {
        let mut rng = rng_from_seed(derive_seed(9, &format!("keep{run}")));
        let tokens: Vec<u32> = (0..64).map(|_| rng.gen_range(0..16)).collect();
        let grid = TokenGrid::new(8, 8, 16, tokens).unwrap();
        let density: f64 = rng.gen_range(0.05..0.95);
        let keep: Vec<bool> = (0..64).map(|_| rng.gen_bool(density)).collect();
        let text = enc.encode(&format!("inpaint run {run}")).unwrap();
        let opts = DecodeOptions {
            schedule: MaskSchedule::cosine(1 + (run % 8) as usize).unwrap(),
            temperature: 0.9,
            seed: derive_seed(run, "decode"),
        };
        let out = model.inpaint(&grid, &keep, &text, &opts).unwrap();
        pass &= !out.has_mask();
        for p in 0..64 {
            if keep[p] {
                checked_cells += 1;
                if out.get(p) == grid.get(p) {
                    preserved += 1;
                }
            }
        }
    }
    pass &= checked_cells > 0 && preserved == checked_cells;
    report(5, "inpainting preservation", pass, t0.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_06a_vq_overfit_reconstruction() {
    let t0 = Instant::now();
    let mut model = VqModel::new(VqConfig::default()).unwrap();
    let images: Vec<Tensor> = (0..16).map(|i| synth_image(32, 1000 + i)).collect();
    let mut opt = Adam::new(3e-3);
    for _ in 0..400 {
        let losses = model.train_step(&images, &mut opt).unwrap();
        if losses.reconstruction < 8e-3 {
            break;
        }
    }
    let mut total = 0.0;
    for img in &images {
        let rec = model.decode_tokens(&model.tokenize(img).unwrap()).unwrap();
        total += rec
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / img.numel() as f64;
    }
    let eval_mse = total / 16.0;
    report(
        6,
        "overfit: vq reconstruction",
        eval_mse < 1e-2,
        t0.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_06b_masked_transformer_memorization() {
    let t0 = Instant::now();
    let cfg = MaskedTransformerConfig {
        grid_height: 4,
        grid_width: 4,
        codebook_size: 16,
        layers: 2,
        heads: 4,
        model_dim: 64,
        text_dim: 16,
        seed: 5,
    };
    let mut model = MaskedTransformer::new(cfg).unwrap();
    let enc = StubTextEncoder::new(16);
    let mut rng = rng_from_seed(9);
    let pairs: Vec<_> = (0..16)
        .map(|i| {
            let tokens = (0..16).map(|_| rng.gen_range(0..16u32)).collect();
            (
                TokenGrid::new(4, 4, 16, tokens).unwrap(),
                enc.encode(&format!("memorized sample number {i}")).unwrap(),
            )
        })
        .collect();
    let mut opt = Adam::new(2e-3);
    for step in 0..400u64 {
        model
            .train_step(&pairs, derive_seed(7, &step.to_string()), None, &mut opt)
            .unwrap();
        if step % 50 == 49 && model.masked_accuracy(&pairs, 0.5, 33).unwrap() >= 0.99 {
            break;
        }
    }
    let acc = model.masked_accuracy(&pairs, 0.5, 34).unwrap();
    report(
        6,
        "overfit: masked-token accuracy",
        acc >= 0.95,
        t0.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_06c_control_branch_loss_drop() {
    let t0 = Instant::now();
    let mut model = ControlledDiffusion::new(DiffusionConfig {
        unet: UNetConfig {
            image_size: 16,
            base_channels: 8,
            mid_channels: 16,
            time_dim: 16,
            text_dim: 16,
            heads: 2,
            norm_groups: 2,
        },
        schedule: ScheduleConfig {
            timesteps: 100,
            ..Default::default()
        },
        seed: 3,
    })
    .unwrap();
    let enc = StubTextEncoder::new(16);
    let samples: Vec<ControlSample> = (0..16)
        .map(|i| ControlSample {
            image: synth_image(16, 2000 + i).map(|v| v * 2.0 - 1.0),
            condition: synth_image(16, 3000 + i).map(|v| v * 2.0 - 1.0),
            caption: format!("control sample {i}"),
        })
        .collect();
    let before = probe_loss(&model, &samples, &enc, 99).unwrap();
    let mut trainer = ControlTrainer::new(
        TrainRecipe {
            epochs: 1,
            batch_size: 4,
            grad_accum: 1,
            lr: 2e-3,
        },
        GuidanceConfig::default(),
    )
    .unwrap();
    for step in 0..300u64 {
        let batch: Vec<ControlSample> = (0..4)
            .map(|k| {
                let idx = ((step as usize * 4) + k) % 16;
                ControlSample {
                    image: samples[idx].image.clone(),
                    condition: samples[idx].condition.clone(),
                    caption: samples[idx].caption.clone(),
                }
            })
            .collect();
        trainer
            .micro_step(&mut model, &batch, &enc, derive_seed(1, &step.to_string()))
            .unwrap();
    }
    let after = probe_loss(&model, &samples, &enc, 99).unwrap();
    report(
        6,
        "overfit: control-branch loss drop",
        after <= 0.5 * before,
        t0.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_07_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut pass = true;

    // toy VQ net
    let mut vq = VqModel::new(VqConfig {
        image_size: 8,
        downsample_factor: 2,
        codebook_size: 8,
        embed_dim: 4,
        channels: vec![6],
        commitment_weight: 0.25,
        seed: 17,
    })
    .unwrap();
    let batch: Vec<Tensor> = (0..2).map(|i| synth_image(8, 500 + i)).collect();
    // The training loss uses stop-gradients (straight-through estimator and
    // the two vector-quantization terms), so the analytic gradient is the
    // derivative of the branch where every sg() content is held at its
    // base value. The probe differentiates exactly that function: token
    // assignment, z0 and q0 are captured once from the unperturbed model.
    let snapshots: Vec<(TokenGrid, Tensor, Tensor)> = batch
        .iter()
        .map(|im| {
            let z0 = vq.encode(im).unwrap();
            let (grid, q0) = vq.quantize(&z0).unwrap();
            (grid, z0, q0)
        })
        .collect();
    let (_, grads) = vq.loss_and_grads(&batch).unwrap();
    let names: Vec<String> = vq.params.names().map(|s| s.to_string()).collect();
    let batch_c = batch.clone();
    let vq_cfg = vq.cfg.clone();
    let beta = vq.cfg.commitment_weight;
    let frozen_loss = move |m: &VqModel| -> f64 {
        let mse = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let mut total = 0.0;
        for (im, (grid, z0, q0)) in batch_c.iter().zip(&snapshots) {
            let z = m.encode(im).unwrap();
            // straight-through branch: decoder input q0 + (z - z0)
            let st = Tensor::new(
                z.shape(),
                z.data()
                    .iter()
                    .zip(z0.data())
                    .zip(q0.data())
                    .map(|((zv, z0v), q0v)| q0v + (zv - z0v))
                    .collect(),
            );
            let rec = m.decode_latents(&st).unwrap();
            let rec_loss = mse(rec.data(), im.data());
            // codebook term against the frozen encoder rows
            let d = m.cfg.embed_dim;
            let cb = m.codebook();
            let mut gathered = Vec::with_capacity(grid.len() * d);
            for &t in grid.tokens() {
                gathered.extend_from_slice(&cb.data()[t as usize * d..(t as usize + 1) * d]);
            }
            let cb_loss = mse(&gathered, z0.data());
            let commit = mse(z.data(), q0.data());
            total += rec_loss + cb_loss + beta * commit;
        }
        total / batch_c.len() as f64
    };
    let report_vq = check_gradients(
        &mut vq.params,
        &names,
        &grads,
        110,
        1e-6,
        77,
        &mut |store| {
            let mut probe = VqModel::new(vq_cfg.clone()).unwrap();
            probe.params = store.clone();
            frozen_loss(&probe)
        },
    );
    pass &= report_vq.passes(1e-3);

    // toy UNet with control branch and cross-attention
    let mut cd = ControlledDiffusion::new(DiffusionConfig {
        unet: UNetConfig {
            image_size: 8,
            base_channels: 4,
            mid_channels: 8,
            time_dim: 8,
            text_dim: 8,
            heads: 2,
            norm_groups: 2,
        },
        schedule: ScheduleConfig {
            timesteps: 30,
            ..Default::default()
        },
        seed: 19,
    })
    .unwrap();
    let enc = StubTextEncoder::new(8);
    let cd_batch = vec![ControlSample {
        image: synth_image(8, 600).map(|v| v * 2.0 - 1.0),
        condition: synth_image(8, 601).map(|v| v * 2.0 - 1.0),
        caption: "gradient probe".into(),
    }];
    let (_, cd_grads) = cd.loss_and_grads(&cd_batch, &enc, 5).unwrap();
    let cd_names: Vec<String> = cd.params.names().map(|s| s.to_string()).collect();
    let cd_cfg = cd.cfg.clone();
    let report_cd = check_gradients(
        &mut cd.params,
        &cd_names,
        &cd_grads,
        110,
        1e-5,
        78,
        &mut |store| {
            let mut probe = ControlledDiffusion::new(cd_cfg.clone()).unwrap();
            probe.params = store.clone();
            probe.loss_and_grads(&cd_batch, &enc, 5).unwrap().0
        },
    );
    pass &= report_cd.passes(1e-3);
    println!(
        "  (vq max rel err {:.2e}, unet max rel err {:.2e})",
        report_vq.max_rel_err, report_cd.max_rel_err
    );
    report(7, "gradient checks", pass, t0.elapsed(), Duration::from_secs(300));
}

#[test]
fn criterion_08_imagic_algebra() {
    let t0 = Instant::now();
    let mut pass = true;
    let enc = StubTextEncoder::new(8);
    let e_a = enc.encode("optimized embedding stand in").unwrap();
    let e_b = enc.encode("target embedding stand in").unwrap();
    assert!(e_a.shape_matches(&e_b));
    let at0 = interpolate_embedding(&e_a, &e_b, 0.0).unwrap();
    let at1 = interpolate_embedding(&e_a, &e_b, 1.0).unwrap();
    pass &= at0.tokens.data() == e_a.tokens.data() && at0.pooled == e_a.pooled;
    pass &= at1.tokens.data() == e_b.tokens.data() && at1.pooled == e_b.pooled;

    let model = || {
        ControlledDiffusion::new(DiffusionConfig {
            unet: UNetConfig {
                image_size: 8,
                base_channels: 4,
                mid_channels: 8,
                time_dim: 8,
                text_dim: 8,
                heads: 2,
                norm_groups: 2,
            },
            schedule: ScheduleConfig {
                timesteps: 30,
                ..Default::default()
            },
            seed: 23,
        })
        .unwrap()
    };
    let image = synth_image(8, 700).map(|v| v * 2.0 - 1.0);
    let condition = synth_image(8, 701).map(|v| v * 2.0 - 1.0);
    // finetune with 0 steps leaves every tensor bitwise identical
    let mut s0 = EditSession::new(
        model(),
        image.clone(),
        condition.clone(),
        enc.encode("no-op finetune").unwrap(),
        EditConfig {
            embed_steps: 0,
            finetune_steps: 0,
            layers: LayerSelection::AllUpBlocks,
            seed: 1,
            ..EditConfig::default()
        },
    )
    .unwrap();
    let before = s0.model.params.clone();
    s0.optimize_embedding().unwrap();
    s0.finetune_model().unwrap();
    pass &= before.diff_names(&s0.model.params).is_empty();
    for name in before.names() {
        pass &= bitwise_eq(before.get(name), s0.model.params.get(name));
    }

    // LastK(1) parameter set strictly contained in AllUpBlocks, both as a
    // selection and as the observed bitwise diff after fine-tuning
    let m = model();
    let sel_all: BTreeSet<String> = LayerSelection::AllUpBlocks
        .resolve(&m.params)
        .unwrap()
        .into_iter()
        .collect();
    let sel_last: BTreeSet<String> = LayerSelection::LastK(1)
        .resolve(&m.params)
        .unwrap()
        .into_iter()
        .collect();
    pass &= sel_last.is_subset(&sel_all) && sel_last.len() < sel_all.len();

    let run_finetune = |layers: LayerSelection| -> BTreeSet<String> {
        let mut s = EditSession::new(
            model(),
            image.clone(),
            condition.clone(),
            enc.encode("diff probe").unwrap(),
            EditConfig {
                embed_steps: 0,
                embed_lr: 1e-2,
                finetune_steps: 3,
                finetune_lr: 1e-3,
                layers,
                seed: 2,
            },
        )
        .unwrap();
        let before = s.model.params.clone();
        s.optimize_embedding().unwrap();
        s.finetune_model().unwrap();
        before.diff_names(&s.model.params).into_iter().collect()
    };
    let diff_last = run_finetune(LayerSelection::LastK(1));
    let diff_all = run_finetune(LayerSelection::AllUpBlocks);
    pass &= !diff_last.is_empty();
    pass &= diff_last.iter().all(|n| sel_last.contains(n));
    pass &= diff_all.iter().all(|n| sel_all.contains(n));
    pass &= diff_last.is_subset(&diff_all) && diff_last.len() < diff_all.len();
    report(8, "imagic algebra", pass, t0.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_09_condition_codec_laws() {
    let t0 = Instant::now();
    let palette = SegmentationPalette::default_face();
    // canonical class ids: mirror pairs represented by their lower member
    let canonical: Vec<u8> = palette
        .classes()
        .iter()
        .filter(|c| c.mirror_of.is_none())
        .map(|c| c.id)
        .collect();
    let mut pass = true;
    for seed in 0..1000u64 {
        let mut rng = rng_from_seed(derive_seed(31, &seed.to_string()));
        let labels: Vec<u8> = (0..16 * 16)
            .map(|_| canonical[rng.gen_range(0..canonical.len())])
            .collect();
        let seg = SegmentationMap::new(16, 16, labels).unwrap();
        // flip involution
        pass &= hflip_seg(&hflip_seg(&seg)) == seg;
        // palette-snap idempotence on canonical maps
        let rendered = seg_to_condition(&seg, &palette).unwrap();
        pass &= condition_to_seg(&rendered, &palette) == seg;
        // render/flip commutation
        let a = seg_to_condition(&hflip_seg(&seg), &palette).unwrap();
        let b = rendered.mirrored_horizontal();
        pass &= a == b;
    }
    report(9, "condition codec laws", pass, t0.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_10_metric_self_tests() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut rng = rng_from_seed(4);
    // seg_consistency(x,x) == 1 exactly
    let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..19)).collect();
    let seg = SegmentationMap::new(8, 8, labels).unwrap();
    pass &= seg_consistency(&seg, &seg).unwrap() == 1.0;
    // landmark_consistency(x,x) == 0 exactly
    let pts: Vec<[f64; 2]> = (0..68).map(|_| [rng.gen(), rng.gen()]).collect();
    let lms = faceforge_core::condition::LandmarkSet::new("dlib68", pts).unwrap();
    pass &= landmark_consistency(&lms, &lms).unwrap() == 0.0;
    // clip score scale invariance
    let v: Vec<f64> = standard_normal_vec(&mut rng, 12);
    let w: Vec<f64> = v.iter().map(|x| 7.5 * x).collect();
    pass &= (clip_score(&v, &w).unwrap() - 1.0).abs() < 1e-12;
    // directional similarity at exactly +-1
    let i0 = vec![0.0, 0.0, 0.0];
    let i1 = vec![2.0, -1.0, 0.5];
    let t1: Vec<f64> = i1.iter().map(|x| 0.5 * x).collect();
    let t1n: Vec<f64> = i1.iter().map(|x| -0.5 * x).collect();
    pass &= (directional_similarity(&i0, &i1, &i0, &t1).unwrap() - 1.0).abs() < 1e-12;
    pass &= (directional_similarity(&i0, &i1, &i0, &t1n).unwrap() + 1.0).abs() < 1e-12;
    report(10, "metric self-tests", pass, t0.elapsed(), Duration::from_secs(10));
}

fn train_toy_stack(cfg: &RunConfig, dir: &Path) {
    let source = dir.join("source");
    write_synthetic_source(&source, 4, 48, 7).unwrap();
    cmd_build_dataset(cfg, &source).unwrap();
    let ckpts = dir.join("ckpts");
    let registry = default_registry(cfg);
    cmd_train(cfg, TrainStage::Vq(VqKind::Mask), &ckpts, None, &registry).unwrap();
    cmd_train(cfg, TrainStage::Vq(VqKind::Landmarks), &ckpts, None, &registry).unwrap();
    cmd_train(cfg, TrainStage::Muse(MuseTask::Segmentation), &ckpts, None, &registry).unwrap();
    cmd_train(cfg, TrainStage::ControlNet(Modality::Mask), &ckpts, None, &registry).unwrap();
}

#[test]
fn criterion_11_end_to_end_generation_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy(dir.path());
    // keep the toy run fast: a handful of steps per stage
    cfg.vq.steps = 5;
    cfg.muse.steps = 5;
    cfg.controlnet.steps = 2;
    train_toy_stack(&cfg, dir.path());
    let registry = default_registry(&cfg);
    let req = GenerationRequest {
        prompt: "a young person with wavy hair".into(),
        modality: Modality::Mask,
        condition: None,
        seed: 1234,
        cfg_scale: None,
        sample_steps: None,
        decode_steps: None,
        temperature: None,
        sampler: None,
    };
    let out_a = cmd_generate(&cfg, &dir.path().join("ckpts"), &req, &dir.path().join("a"), &registry).unwrap();
    let out_b = cmd_generate(&cfg, &dir.path().join("ckpts"), &req, &dir.path().join("b"), &registry).unwrap();
    let mut pass = out_a.condition == out_b.condition && out_a.face == out_b.face;
    // PNG bytes on disk match too
    let bytes = |p: &Path, n: &str| std::fs::read(p.join(n)).unwrap();
    pass &= bytes(&dir.path().join("a"), "condition.png") == bytes(&dir.path().join("b"), "condition.png");
    pass &= bytes(&dir.path().join("a"), "face.png") == bytes(&dir.path().join("b"), "face.png");
    // the mask-modality condition holds only palette colors after snapping
    let palette = SegmentationPalette::default_face();
    let allowed: BTreeSet<[u8; 3]> = palette.classes().iter().map(|c| c.rgb).collect();
    for y in 0..out_a.condition.height {
        for x in 0..out_a.condition.width {
            pass &= allowed.contains(&out_a.condition.get(y, x));
        }
    }
    // a different seed changes the outputs
    let req2 = GenerationRequest { seed: 4321, ..req.clone() };
    let out_c = cmd_generate(&cfg, &dir.path().join("ckpts"), &req2, &dir.path().join("c"), &registry).unwrap();
    pass &= out_c.face != out_a.face;
    report(11, "end-to-end determinism", pass, t0.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_12_dataset_kit_contracts() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::toy(dir.path());
    let source = dir.path().join("source");
    write_synthetic_source(&source, 6, 48, 77).unwrap();
    let built = cmd_build_dataset(&cfg, &source).unwrap();
    let mut pass = built.rejected.total() == 6;
    // manifest round-trip: structural equality
    let manifest = Manifest::read(&built.manifest_path).unwrap();
    let copy_path = dir.path().join("copy.jsonl");
    manifest.write(&copy_path).unwrap();
    pass &= Manifest::read(&copy_path).unwrap() == manifest;
    // 3 captions x 5 languages = 15 strings per record
    for rec in &manifest.records {
        let total: usize = rec.captions.values().map(|c| c.len()).sum();
        pass &= total == 15 && rec.captions.len() == 5;
    }
    // attribute stats match a hand count on a 10-record fixture
    let mut fixture = Manifest::default();
    for i in 0..10 {
        let mut rec = FaceRecord {
            id: format!("r{i}"),
            image: format!("images/r{i}.png"),
            seg: format!("seg/r{i}.png"),
            landmarks: format!("landmarks/r{i}.json"),
            attrs: AttributeVector::all_false(),
            captions: {
                let mut m = std::collections::BTreeMap::new();
                m.insert("en".to_string(), vec!["a.".into(), "b.".into(), "c.".into()]);
                m
            },
        };
        if i % 2 == 0 {
            rec.attrs.set("Male", true);
        }
        if i < 3 {
            rec.attrs.set("Eyeglasses", true);
        }
        fixture.records.push(rec);
    }
    let stats = attribute_stats(&fixture).unwrap();
    let get = |name: &str| stats.iter().find(|(n, _)| n == name).unwrap().1;
    pass &= get("Male") == 0.5 && get("Eyeglasses") == 0.3 && get("Bald") == 0.0;
    report(12, "dataset kit", pass, t0.elapsed(), Duration::from_secs(60));
}
