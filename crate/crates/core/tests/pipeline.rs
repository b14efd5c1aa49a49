use gram_core::data::{export_tile_directory, generate_benchmark, load_tile_directory, TileSet};
use gram_core::model::{load_checkpoint, save_checkpoint, RegionClassifier, RegionClassifierConfig, RoutingPlan, SegModel, SegModelConfig};
use gram_core::train::{argmax, classifier_accuracy, train_region_classifier, train_source, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_benchmark(seed: u64) -> (TileSet, TileSet, TileSet) {
    let (src, tgt) = generate_benchmark(seed, 3, 48, 32).unwrap();
    let (train, val) = src.split_holdout(16).unwrap();
    (train, val, tgt)
}

fn standardized_features(sets: &[&TileSet]) -> Vec<Vec<Vec<f64>>> {
    let raw: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| s.tiles.iter().map(|t| t.mean_rgb().to_vec()).collect()).collect();
    let all: Vec<&Vec<f64>> = raw[0].iter().collect();
    let n = all.len() as f64;
    let mu: Vec<f64> = (0..3).map(|c| all.iter().map(|v| v[c]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..3)
        .map(|c| (all.iter().map(|v| (v[c] - mu[c]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    raw.into_iter()
        .map(|set| set.into_iter().map(|v| (0..3).map(|c| (v[c] - mu[c]) / sd[c]).collect()).collect())
        .collect()
}

/// Region identity must be recoverable from tile colour statistics alone:
/// a 3-16-D tanh MLP on mean-pooled pixels, full-batch gradient descent.
#[test]
fn regions_are_separable_by_a_small_mlp_on_pooled_pixels() {
    let (train, val, _) = small_benchmark(0);
    let feats = standardized_features(&[&train, &val]);
    let (h, d) = (16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut w1: Vec<f64> = (0..3 * h).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut b1 = vec![0.0; h];
    let mut w2: Vec<f64> = (0..h * d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut b2 = vec![0.0; d];
    let forward = |w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], x: &[f64]| {
        let hid: Vec<f64> = (0..h).map(|j| (b1[j] + (0..3).map(|i| x[i] * w1[i * h + j]).sum::<f64>()).tanh()).collect();
        let logits: Vec<f64> = (0..d).map(|k| b2[k] + (0..h).map(|j| hid[j] * w2[j * d + k]).sum::<f64>()).collect();
        (hid, logits)
    };
    let labels: Vec<usize> = train.tiles.iter().map(|t| t.region_id).collect();
    let lr = 0.5;
    for _ in 0..400 {
        let (mut gw1, mut gb1, mut gw2, mut gb2) = (vec![0.0; 3 * h], vec![0.0; h], vec![0.0; h * d], vec![0.0; d]);
        for (x, &y) in feats[0].iter().zip(&labels) {
            let (hid, logits) = forward(&w1, &b1, &w2, &b2, x);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            let dl: Vec<f64> = (0..d).map(|k| ex[k] / s - f64::from(u8::from(k == y))).collect();
            for j in 0..h {
                let mut dh = 0.0;
                for k in 0..d {
                    gw2[j * d + k] += hid[j] * dl[k];
                    dh += w2[j * d + k] * dl[k];
                }
                let da = dh * (1.0 - hid[j] * hid[j]);
                gb1[j] += da;
                for i in 0..3 {
                    gw1[i * h + j] += x[i] * da;
                }
            }
            for k in 0..d {
                gb2[k] += dl[k];
            }
        }
        let n = labels.len() as f64;
        for (p, g) in w1.iter_mut().zip(&gw1).chain(b1.iter_mut().zip(&gb1)).chain(w2.iter_mut().zip(&gw2)).chain(b2.iter_mut().zip(&gb2)) {
            *p -= lr * g / n;
        }
    }
    let hits = feats[1]
        .iter()
        .zip(&val.tiles)
        .filter(|(x, t)| argmax(&forward(&w1, &b1, &w2, &b2, x).1) == t.region_id)
        .count();
    let acc = hits as f64 / val.len() as f64;
    assert!(acc > 0.8, "held-out region accuracy {acc}");
}

#[test]
fn region_classifier_learns_regions_but_not_shuffled_labels() {
    let (train, val, _) = small_benchmark(1);
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::source()
    };
    let clf = train_region_classifier(RegionClassifier::new(RegionClassifierConfig::default(), 1).unwrap(), &train, &cfg).unwrap();
    let acc = classifier_accuracy(&clf, &val).unwrap();
    assert!(acc > 0.8, "accuracy {acc}");

    let mut shuffled = train.clone();
    let mut ids: Vec<usize> = shuffled.tiles.iter().map(|t| t.region_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    for (t, id) in shuffled.tiles.iter_mut().zip(ids) {
        t.region_id = id;
    }
    let clf = train_region_classifier(RegionClassifier::new(RegionClassifierConfig::default(), 1).unwrap(), &shuffled, &cfg).unwrap();
    let acc = classifier_accuracy(&clf, &val).unwrap();
    assert!((0.1..0.6).contains(&acc), "shuffled-label accuracy {acc} should sit near chance");
}

#[test]
fn source_training_lowers_loss_and_every_epoch_checkpoint_reloads() {
    let (train, val, _) = small_benchmark(2);
    let model_cfg = SegModelConfig {
        tile_size: 32,
        ..SegModelConfig::default()
    };
    let cfg = TrainConfig {
        seed: 2,
        ..TrainConfig::source()
    };
    let run = train_source(SegModel::new(model_cfg.clone(), 2).unwrap(), &train, &cfg).unwrap();
    assert!(run.epoch_mean_total(cfg.epochs - 1) < run.epoch_mean_total(0));
    assert!(run.log.iter().all(|l| l.mutual_info.len() == model_cfg.num_layers));

    let dir = tempfile::tempdir().unwrap();
    let img = val.tiles[0].image_f64();
    for (e, m) in run.checkpoints.iter().enumerate() {
        let path = dir.path().join(format!("epoch{e}.ckpt"));
        save_checkpoint(m, &path).unwrap();
        let back: SegModel = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, m.params);
        let a = m.forward(&img, 1, RoutingPlan::Inference).unwrap();
        let b = back.forward(&img, 1, RoutingPlan::Inference).unwrap();
        assert_eq!(a.probs, b.probs);
    }
    assert_eq!(run.checkpoints.last().unwrap().params, run.model.params);
}

#[test]
fn exported_benchmark_is_deterministic_and_reloads() {
    let (src, tgt) = generate_benchmark(3, 3, 16, 32).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        export_tile_directory(&src, dir.join("source")).unwrap();
        export_tile_directory(&tgt, dir.join("target")).unwrap();
    }
    for sub in ["source", "target"] {
        let la = load_tile_directory(a.path().join(sub)).unwrap();
        let lb = load_tile_directory(b.path().join(sub)).unwrap();
        assert_eq!(la, lb);
        let orig = if sub == "source" { &src } else { &tgt };
        assert_eq!(la.len(), orig.len());
        for (x, y) in la.tiles.iter().zip(&orig.tiles) {
            assert_eq!(x.mask, y.mask);
            assert!(x.image.iter().zip(&y.image).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}
