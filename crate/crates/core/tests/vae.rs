use flowguide_core::datastore::{write_dataset, DatasetHandle, Frame, Trajectory};
use flowguide_core::error::Error;
use flowguide_core::flowfield::{flow_for_dataset, FlowConfig, FlowField};
use flowguide_core::flowvae::*;
use flowguide_core::image::Image;
use flowguide_numkit::{GradCheckConfig, Rng, Tensor};

fn random_rows(n: usize, dim: usize, seed: u64) -> Rows {
    let mut rng = Rng::new(seed);
    let mut rows = Rows::new(dim);
    for _ in 0..n {
        let r: Vec<f32> = (0..dim).map(|_| rng.normal_f32() * 0.2).collect();
        rows.push(&r).unwrap();
    }
    rows
}

#[test]
fn full_loss_matches_finite_differences() {
    for trial in 0..20u64 {
        let mut rng = Rng::with_stream(77, trial);
        let arch = if trial % 2 == 0 {
            VaeArch::Conv { resolution: 8 }
        } else {
            VaeArch::Mlp {
                input_dim: 5 + rng.below(6),
                hidden: 3 + rng.below(5),
            }
        };
        let z = 2 + rng.below(3);
        let m = Vae::<f32>::new(arch, z, 1.0, 0.05, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, arch.input_dim()], |_| rng.normal_f32() * 0.5);
        let eps = Tensor::from_fn(&[4, z], |_| rng.normal_f32());
        let cfg = GradCheckConfig {
            h: 1e-5,
            tol: 1e-3,
            samples_per_block: 8,
            seed: trial,
        };
        let report = vae_grad_check(&m, &x, &eps, cfg).unwrap();
        assert!(report.passed, "trial {trial}: {report}");
    }
}

#[test]
fn overfits_four_items_without_kl() {
    let rows = random_rows(4, 128, 5);
    let arch = VaeArch::Conv { resolution: 8 };
    let cfg = VaeTrainConfig {
        epochs: 1500,
        batch_size: 4,
        beta: 0.0,
        resolution: 8,
        latent_dim: 128,
        lr: 1e-3,
        holdout: 0.0,
        ..Default::default()
    };
    let (m, report) = train_vae_rows(&rows, arch, 1.0, &cfg).unwrap();
    let fresh = Vae::<f32>::new(arch, 128, 1.0, 0.0, &mut Rng::with_stream(cfg.seed, 0x7661_6500)).unwrap();
    let all = [0, 1, 2, 3];
    let before = mean_recon(&fresh, &rows, &all).unwrap();
    let after = mean_recon(&m, &rows, &all).unwrap();
    assert!(after < 0.01 * before, "recon {before} -> {after}");
    let first = report.epochs.first().unwrap().train.recon;
    let last = report.epochs.last().unwrap().train.recon;
    assert!(last < first);
}

#[test]
fn training_is_deterministic() {
    let rows = random_rows(40, 128, 9);
    let cfg = VaeTrainConfig {
        epochs: 3,
        batch_size: 8,
        resolution: 8,
        latent_dim: 4,
        ..Default::default()
    };
    let arch = VaeArch::Conv { resolution: 8 };
    let (a, ra) = train_vae_rows(&rows, arch, 1.0, &cfg).unwrap();
    let (b, rb) = train_vae_rows(&rows, arch, 1.0, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(model_hash(&a), model_hash(&b));
    assert_eq!(ra.heldout_items, 4);
}

#[test]
fn encoding_is_deterministic_and_separates_motion() {
    let cfg = VaeTrainConfig {
        epochs: 1,
        resolution: 8,
        latent_dim: 4,
        ..Default::default()
    };
    let flows = vec![FlowField::zeros(16, 16), FlowField::uniform(16, 16, 3.0, -2.0)];
    let (m, _) = train_vae(&flows, &cfg).unwrap();
    let a = encode(&m, &flows[1]).unwrap();
    assert_eq!(a, encode(&m, &flows[1]).unwrap());
    let b = encode(&m, &flows[0]).unwrap();
    let d: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    assert!(d > 0.0);
}

#[test]
fn model_and_latents_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    for arch in [VaeArch::Conv { resolution: 8 }, VaeArch::Mlp { input_dim: 7, hidden: 5 }] {
        let m = Vae::<f32>::new(arch, 3, 12.5, 1e-4, &mut rng).unwrap();
        let p = dir.path().join("m.fvae");
        write_vae(&p, &m).unwrap();
        let back = read_vae(&p).unwrap();
        assert_eq!(back, m);
        let rows = random_rows(6, arch.input_dim(), 4);
        assert_eq!(encode_rows(&m, &rows).unwrap(), encode_rows(&back, &rows).unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), {
            let q = dir.path().join("again.fvae");
            write_vae(&q, &back).unwrap();
            std::fs::read(&q).unwrap()
        });
    }
    let m = Vae::<f32>::new(VaeArch::Mlp { input_dim: 7, hidden: 5 }, 3, 1.0, 0.0, &mut rng).unwrap();
    let table = embed_rows(&m, &random_rows(9, 7, 2)).unwrap();
    let p = dir.path().join("t.lat");
    write_latents(&p, &table).unwrap();
    assert_eq!(read_latents(&p).unwrap(), table);

    // truncation is reported as a format error
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(read_latents(&p), Err(Error::Format { .. })));
}

fn tiny_dataset(dir: &std::path::Path, ids: &[&str], len: usize) -> DatasetHandle {
    let trajs: Vec<Trajectory> = ids
        .iter()
        .enumerate()
        .map(|(n, id)| Trajectory {
            id: id.to_string(),
            source: "test".into(),
            frames: (0..len)
                .map(|i| {
                    let data = (0..16 * 16 * 3)
                        .map(|p| {
                            let (r, c) = ((p / 3) / 16, (p / 3) % 16);
                            (128.0 + 60.0 * ((c + i + n) as f32 * 0.6).sin() * ((r as f32) * 0.4).cos()) as u8
                        })
                        .collect();
                    Frame {
                        image: Image::new(16, 16, 3, data).unwrap(),
                        action: vec![0.0; 3],
                        proprio: vec![0.0; 3],
                        label: None,
                    }
                })
                .collect(),
        })
        .collect();
    write_dataset(&trajs, dir).unwrap()
}

#[test]
fn embedding_is_frame_aligned_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let h = tiny_dataset(&dir.path().join("d"), &["a", "b"], 4);
    let fcfg = FlowConfig {
        k: 2,
        iterations: 10,
        pyramid_levels: 1,
        ..Default::default()
    };
    let set = flow_for_dataset(&h, &fcfg).unwrap();
    let m = Vae::<f32>::new(VaeArch::Conv { resolution: 8 }, 4, 22.6, 1e-4, &mut Rng::new(0)).unwrap();
    let t1 = embed_dataset(&m, &h, &set).unwrap();
    let t2 = embed_dataset(&m, &h, &set).unwrap();
    assert_eq!(t1.len(), h.frame_count());
    assert_eq!(t1, t2);

    // a target set embeds with the same model, no retraining
    let other = tiny_dataset(&dir.path().join("t"), &["x"], 3);
    let oset = flow_for_dataset(&other, &fcfg).unwrap();
    assert_eq!(embed_dataset(&m, &other, &oset).unwrap().len(), 3);

    std::fs::remove_file(set.path_for("b")).unwrap();
    match embed_dataset(&m, &h, &set) {
        Err(Error::Data(msg)) => assert!(msg.contains('b'), "{msg}"),
        other => panic!("expected a gap report, got {other:?}"),
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(train_vae(&[], &VaeTrainConfig::default()).is_err());
    let m = Vae::<f32>::new(VaeArch::Mlp { input_dim: 4, hidden: 3 }, 2, 1.0, 0.0, &mut Rng::new(0)).unwrap();
    assert!(encode(&m, &FlowField::zeros(8, 8)).is_err());
    assert!(matches!(
        encode_rows(&m, &random_rows(2, 5, 0)),
        Err(Error::Dimension(_))
    ));
}
