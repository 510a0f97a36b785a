//! Cross-module checks: simulated frames through association, the codec,
//! the network and training.

use rofusion::association::{associate, PointClass};
use rofusion::codec::{decode_target, encode_target};
use rofusion::config::ExperimentConfig;
use rofusion::frame_io::{parse_frames, frames_to_jsonl};
use rofusion::fusion::{forward, init_params};
use rofusion::sim::generate_frames;
use rofusion::training::{prepare_samples, split_frames, train, train_on, Split};
use rofusion::{Params, Tensor};

fn smoke() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.train.train_frames = 8;
    cfg.train.val_frames = 4;
    cfg.train.epochs = 4;
    cfg
}

#[test]
fn full_points_decode_back_to_their_object() {
    let cfg = ExperimentConfig::default();
    let frames = generate_frames(&cfg.sim, 500, 20).unwrap();
    let mut checked = 0;
    for f in &frames {
        for mut set in associate(&f.points, &f.gt_boxes) {
            let Some(obj) = set.object_id.and_then(|id| f.object(id)) else { continue };
            let center = (obj.center_r, obj.center_a);
            set.classify_against(&f.points, center, &cfg.codec);
            for (i, class) in set.foreground() {
                if class != PointClass::Full {
                    continue;
                }
                let p = &f.points[i];
                let t = encode_target((p.r, p.a), center, &cfg.codec).unwrap();
                assert!(t.residual.0.abs() <= cfg.codec.r_bin_width / 2.0 + 1e-12);
                assert!(t.residual.1.abs() <= cfg.codec.az_bin_width / 2.0 + 1e-12);
                let back = decode_target((p.r, p.a), t.az_bin, t.r_bin, t.residual, &cfg.codec).unwrap();
                assert!((back.0 - center.0).abs() < 1e-9 && (back.1 - center.1).abs() < 1e-9);
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} full points");
}

#[test]
fn frames_survive_a_file_round_trip_with_identical_features() {
    let cfg = ExperimentConfig::default();
    let frames = split_frames(&cfg, Split::Test).unwrap();
    let back = parse_frames(&frames_to_jsonl(&frames[..6]).unwrap()).unwrap();
    let a = prepare_samples(&frames[..6], &cfg.sim, &cfg.codec, true).unwrap();
    let b = prepare_samples(&back, &cfg.sim, &cfg.codec, true).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.radar, y.radar);
        assert_eq!(x.image, y.image);
        assert_eq!(x.targets, y.targets);
    }
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let cfg = smoke();
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.log.len(), cfg.train.epochs);
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.params, b.last.params);
    assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let cfg = smoke();
    let train_s = prepare_samples(&split_frames(&cfg, Split::Train).unwrap(), &cfg.sim, &cfg.codec, true).unwrap();
    let val_s = prepare_samples(&split_frames(&cfg, Split::Val).unwrap(), &cfg.sim, &cfg.codec, true).unwrap();
    let straight = train_on(&cfg, &train_s, &val_s, None).unwrap();

    let mut half = cfg.clone();
    half.train.epochs = 2;
    let first = train_on(&half, &train_s, &val_s, None).unwrap();
    let resumed = train_on(&cfg, &train_s, &val_s, Some(&first.last)).unwrap();
    assert_eq!(resumed.log.first().unwrap().epoch, 3);
    assert_eq!(resumed.last.meta.epoch, cfg.train.epochs);
    // The checkpoint stores f32 weights and moments, so the paths agree to
    // that precision only.
    let a = straight.log.last().unwrap().train_loss;
    let b = resumed.log.last().unwrap().train_loss;
    assert!((a - b).abs() <= 1e-4 * a, "{a} vs {b}");
}

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = ExperimentConfig::default();
    let p64: Params<f64> = init_params(&cfg.arch, 4).unwrap();
    let p32: Params<f32> = p64.cast();
    let n = 7;
    let radar = Tensor::from_vec(n, cfg.arch.c_radar_in, (0..n * cfg.arch.c_radar_in).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    let image = Tensor::from_vec(n, cfg.arch.c_image_in, (0..n * cfg.arch.c_image_in).map(|i| ((i * 11 % 13) as f64 - 6.0) / 6.0).collect()).unwrap();
    let groups = [0, 0, 1, 1, 1, 2, 2];
    let (c64, r64) = forward(&radar, &image, &groups, &p32.cast::<f64>(), &cfg.arch).unwrap();
    let (c32, r32) = forward(&radar.cast::<f32>(), &image.cast::<f32>(), &groups, &p32, &cfg.arch).unwrap();
    for (a, b) in c64.data().iter().zip(c32.data()).chain(r64.data().iter().zip(r32.data())) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
