//! Release gate: runs every acceptance criterion in order and prints one
//! pass/fail line per criterion. Uses its own main (no libtest harness)
//! so the lines always reach stdout.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lesion_core::blocks::{
    Block, BlockFamily, BlockSpec, Builder, Ctx, ParamStore, StateRef, StateStore,
};
use lesion_core::cascade::{batch_extract_roi, OracleMasks, RoiConfig};
use lesion_core::clsmodel::{softmax, toy_cls_config, ClsModel};
use lesion_core::dataio::{
    load_cls_manifest, split, DatasetManifest, LesionClass, ManifestSamples, NormalizationPolicy,
    SegSample, SplitTag,
};
use lesion_core::graph::Tape;
use lesion_core::losses::{
    binary_cross_entropy, binary_cross_entropy_grad, categorical_cross_entropy, dice_loss,
    dice_loss_grad,
};
use lesion_core::metrics::{classification_report, dice_score, iou, MetricsReport};
use lesion_core::segmodel::{toy_seg_config, SegModel};
use lesion_core::synthgen::{generate_cls_dataset, generate_seg_dataset, LesionShape, SynthConfig};
use lesion_core::tensor::Tensor4;
use lesion_core::trainer::{
    cls_accuracy, train_classification, train_segmentation, write_epoch_log, Monitor, TrainConfig,
};

type CriterionResult = Result<String, String>;

fn main() {
    let criteria: Vec<(&str, fn() -> CriterionResult)> = vec![
        ("1 scale statement", criterion_1_scale_statement),
        ("2 metric oracle", criterion_2_metric_oracle),
        ("3 gradient checks", criterion_3_gradient_checks),
        ("4 shape invariants", criterion_4_shape_invariants),
        ("5 overfit smoke", criterion_5_overfit_smoke),
        ("6 cascade benefit", criterion_6_cascade_benefit),
        ("7 determinism", criterion_7_determinism),
        ("8 data layer", criterion_8_data_layer),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        match run() {
            Ok(msg) => {
                println!(
                    "criterion {name}: pass ({:.1}s) {msg}",
                    started.elapsed().as_secs_f64()
                );
            }
            Err(msg) => {
                failed += 1;
                println!(
                    "criterion {name}: FAIL ({:.1}s) {msg}",
                    started.elapsed().as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

fn random_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn err(e: impl std::fmt::Display) -> String {
    format!("{e}")
}

/// Criterion 1: reference-scale results are declared out of scope.
///
/// Published full-scale results for this architecture family (best
/// segmentation Dice 89.56 with mIoU 81.42; best classification accuracy
/// 82.41 with ROI extraction against 78.54 without) come from training on
/// the complete dermoscopy archives for many GPU-hours. This suite does
/// not reproduce those numbers; criteria 2 through 8 are property-based
/// substitutes that check the mechanisms (metrics, gradients, shapes,
/// optimization, cascade benefit, determinism, data handling) at desk
/// scale.
fn criterion_1_scale_statement() -> CriterionResult {
    Ok("full-scale reference numbers (Dice 89.56 / mIoU 81.42 seg; 82.41 vs 78.54 \
        with/without ROI cls) are not reproduced at this scale; the remaining \
        criteria substitute property checks"
        .to_string())
}

/// Criterion 2: dice_score and iou agree with an independent brute-force
/// pixel-counting oracle on 200 random 16x16 mask pairs, and the identity
/// iou = dice / (2 - dice) holds for every pair.
fn criterion_2_metric_oracle() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_abs: f64 = 0.0;
    for _ in 0..200 {
        let density_p = rng.gen_range(0.0..1.0);
        let density_g = rng.gen_range(0.0..1.0);
        let p: Tensor4 = Array4::from_shape_fn((1, 16, 16, 1), |_| {
            f64::from(rng.gen_range(0.0..1.0) < density_p)
        });
        let g: Tensor4 = Array4::from_shape_fn((1, 16, 16, 1), |_| {
            f64::from(rng.gen_range(0.0..1.0) < density_g)
        });

        // brute-force oracle: walk the pixel grid and count
        let mut np = 0u64;
        let mut ng = 0u64;
        let mut ni = 0u64;
        let mut nu = 0u64;
        for y in 0..16 {
            for x in 0..16 {
                let a = p[(0, y, x, 0)] == 1.0;
                let b = g[(0, y, x, 0)] == 1.0;
                np += u64::from(a);
                ng += u64::from(b);
                ni += u64::from(a && b);
                nu += u64::from(a || b);
            }
        }
        let oracle_dice = if np + ng == 0 {
            1.0
        } else {
            2.0 * ni as f64 / (np + ng) as f64
        };
        let oracle_iou = if nu == 0 { 1.0 } else { ni as f64 / nu as f64 };

        let d = dice_score(&p, &g).map_err(err)?;
        let j = iou(&p, &g).map_err(err)?;
        max_abs = max_abs
            .max((d - oracle_dice).abs())
            .max((j - oracle_iou).abs())
            .max((j - d / (2.0 - d)).abs());
    }
    if max_abs > 1e-9 {
        return Err(format!("max deviation from oracle {max_abs:.3e} > 1e-9"));
    }
    Ok(format!(
        "200 pairs, max |impl - oracle| and identity residual {max_abs:.1e}"
    ))
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1.0)
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Finite-difference check of d(sum(output * r))/d(params) for one block.
fn check_block(family: BlockFamily, seed: u64) -> Result<f64, String> {
    let spec = BlockSpec::new(family, 3, 4, 1);
    let mut params = ParamStore::new();
    let mut state = StateStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = Builder {
        params: &mut params,
        state: &mut state,
        rng: &mut rng,
        norm: false,
    };
    let block = Block::build(&mut builder, "blk", &spec).map_err(err)?;
    let x = random_tensor((2, 6, 6, 3), seed + 1);
    let r = random_tensor((2, 6, 6, 4), seed + 2);

    let eval = |params: &ParamStore| -> Result<(Tape, lesion_core::graph::NodeId), String> {
        let mut ctx = Ctx {
            tape: Tape::new(),
            params,
            state: StateRef::Ref(&state),
            train: false,
        };
        let xin = ctx.tape.input(x.clone());
        let y = block.forward(&mut ctx, xin).map_err(err)?;
        Ok((ctx.tape, y))
    };

    let (tape, y) = eval(&params)?;
    let grads = tape.backward(y, r.clone());
    let analytic = tape.param_grads(&grads);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..params.len() {
        let n = params.get(idx).len();
        for j in 0..n {
            let orig = params.get(idx).as_slice().unwrap()[j];
            params.get_mut(idx).as_slice_mut().unwrap()[j] = orig + h;
            let (tp, yp) = eval(&params)?;
            let fp = dot(tp.value(yp), &r);
            params.get_mut(idx).as_slice_mut().unwrap()[j] = orig - h;
            let (tm, ym) = eval(&params)?;
            let fm = dot(tm.value(ym), &r);
            params.get_mut(idx).as_slice_mut().unwrap()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic
                .get(&idx)
                .map_or(0.0, |g| g.as_slice().unwrap()[j]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

/// Finite-difference check of the full toy segmentation model at 64x64,
/// sampling a few elements of every parameter tensor.
fn check_full_model() -> Result<f64, String> {
    let config = toy_seg_config(64, "resnet", 2).map_err(err)?;
    let mut model = SegModel::build(config, 5).map_err(err)?;
    let x = random_tensor((1, 64, 64, 3), 31);
    let r = random_tensor((1, 64, 64, 1), 32);

    let fwd = model.forward_eval(&x).map_err(err)?;
    let grads = fwd.tape.backward(fwd.prob, r.clone());
    let analytic = fwd.tape.param_grads(&grads);

    let objective = |model: &SegModel| -> Result<f64, String> {
        let fwd = model.forward_eval(&x).map_err(err)?;
        Ok(dot(fwd.tape.value(fwd.prob), &r))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..model.params.len() {
        let n = model.params.get(idx).len();
        for _ in 0..3.min(n) {
            let j = rng.gen_range(0..n);
            let orig = model.params.get(idx).as_slice().unwrap()[j];
            model.params.get_mut(idx).as_slice_mut().unwrap()[j] = orig + h;
            let fp = objective(&model)?;
            model.params.get_mut(idx).as_slice_mut().unwrap()[j] = orig - h;
            let fm = objective(&model)?;
            model.params.get_mut(idx).as_slice_mut().unwrap()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic
                .get(&idx)
                .map_or(0.0, |g| g.as_slice().unwrap()[j]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

/// Criterion 3: analytic gradients match central finite differences
/// within 1e-5 relative error for every block family, every loss and the
/// full toy segmentation model.
fn criterion_3_gradient_checks() -> CriterionResult {
    let mut worst: f64 = 0.0;

    for (family, seed) in [
        (BlockFamily::Plain, 41),
        (BlockFamily::Residual, 42),
        (BlockFamily::Dsc, 43),
        (BlockFamily::DscResidual, 44),
        (BlockFamily::MbconvSe, 45),
    ] {
        let e = check_block(family, seed)?;
        if e > 1e-5 {
            return Err(format!("{family:?} block gradient error {e:.3e} > 1e-5"));
        }
        worst = worst.max(e);
    }

    // losses: perturb the prediction elementwise
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let p: Tensor4 = Array4::from_shape_fn((1, 4, 4, 1), |_| rng.gen_range(0.1..0.9));
    let g: Tensor4 = Array4::from_shape_fn((1, 4, 4, 1), |_| f64::from(rng.gen_bool(0.5)));
    let h = 1e-6;
    let checks: [(&str, Box<dyn Fn(&Tensor4) -> f64>, Tensor4); 2] = [
        (
            "dice",
            Box::new(|q: &Tensor4| dice_loss(q, &g, 1.0).unwrap()),
            dice_loss_grad(&p, &g, 1.0).map_err(err)?,
        ),
        (
            "bce",
            Box::new(|q: &Tensor4| binary_cross_entropy(q, &g).unwrap()),
            binary_cross_entropy_grad(&p, &g).map_err(err)?,
        ),
    ];
    for (name, f, analytic) in &checks {
        for j in 0..p.len() {
            let mut q = p.clone();
            q.as_slice_mut().unwrap()[j] += h;
            let fp = f(&q);
            q.as_slice_mut().unwrap()[j] = p.as_slice().unwrap()[j] - h;
            let fm = f(&q);
            let fd = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic.as_slice().unwrap()[j], fd);
            if e > 1e-5 {
                return Err(format!("{name} loss gradient error {e:.3e} > 1e-5"));
            }
            worst = worst.max(e);
        }
    }

    // categorical CE over a probability vector: grad is -1/p[label] at
    // the label and 0 elsewhere
    let probs: Vec<f64> = vec![0.05, 0.1, 0.2, 0.3, 0.15, 0.12, 0.08];
    let label = 3;
    for j in 0..probs.len() {
        let mut q = probs.clone();
        q[j] += h;
        let fp = categorical_cross_entropy(&q, label).map_err(err)?;
        q[j] = probs[j] - h;
        let fm = categorical_cross_entropy(&q, label).map_err(err)?;
        let fd = (fp - fm) / (2.0 * h);
        let an = if j == label { -1.0 / probs[label] } else { 0.0 };
        let e = rel_err(an, fd);
        if e > 1e-5 {
            return Err(format!("categorical CE gradient error {e:.3e} > 1e-5"));
        }
        worst = worst.max(e);
    }

    let e = check_full_model()?;
    if e > 1e-5 {
        return Err(format!("full model gradient error {e:.3e} > 1e-5"));
    }
    worst = worst.max(e);
    Ok(format!(
        "5 block families, 3 losses, full 64x64 seg model; worst relative error {worst:.1e}"
    ))
}

/// Criterion 4: the segmenter maps (512,512,3) to (512,512,1) through a
/// 32x32 bottleneck (output stride 16), a classification backbone maps
/// (224,224,3) to a 7x7 final map (output stride 32), and softmax rows
/// sum to 1 within 1e-6.
fn criterion_4_shape_invariants() -> CriterionResult {
    let seg = SegModel::build(toy_seg_config(512, "resnet", 2).map_err(err)?, 1).map_err(err)?;
    let x = random_tensor((1, 512, 512, 3), 51);
    let fwd = seg.forward_eval(&x).map_err(err)?;
    let out = fwd.tape.value(fwd.prob).dim();
    if out != (1, 512, 512, 1) {
        return Err(format!("seg output {out:?}, expected (1, 512, 512, 1)"));
    }
    if fwd.bottleneck != (32, 32) {
        return Err(format!("bottleneck {:?}, expected (32, 32)", fwd.bottleneck));
    }

    let cls = ClsModel::build(toy_cls_config(224, "mobilenet", 2).map_err(err)?, 2).map_err(err)?;
    let x = random_tensor((1, 224, 224, 3), 52);
    let fwd = cls.forward_eval(&x).map_err(err)?;
    if fwd.feature_map != (7, 7) {
        return Err(format!(
            "cls final map {}x{}, expected 7x7",
            fwd.feature_map.0, fwd.feature_map.1
        ));
    }

    let logits = random_tensor((3, 1, 1, 7), 53).mapv(|v| v * 4.0);
    let probs = softmax(&logits);
    for i in 0..3 {
        let s: f64 = (0..7).map(|c| probs[(i, 0, 0, c)]).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("softmax row sum {s} deviates by more than 1e-6"));
        }
    }
    Ok("seg 512->512 with 32x32 bottleneck, cls 224->7x7, softmax rows sum to 1".to_string())
}

/// Criterion 5: a reduced segmenter overfits 8 synthetic disk images to
/// Dice >= 0.95 within 200 epochs, and a reduced classifier reaches
/// accuracy 1.0 on a 16-sample separable set within 100 epochs.
fn criterion_5_overfit_smoke() -> CriterionResult {
    let dir = tempfile::tempdir().map_err(err)?;

    // segmentation
    let synth = SynthConfig {
        n_samples: 8,
        image_size: (32, 32),
        lesion_shape: LesionShape::Disk,
        texture_classes: 1,
        background_noise: 0.05,
        distractor_strength: 0.0,
        seed: 9,
        class_counts: None,
    };
    let seg_dir = dir.path().join("seg");
    let manifest = generate_seg_dataset(&synth, &seg_dir).map_err(err)?;
    let policy = NormalizationPolicy::unit(32, 32);

    let mut config = toy_seg_config(32, "resnet", 4).map_err(err)?;
    config.batch_norm = true;
    let mut model = SegModel::build(config, 1).map_err(err)?;
    let train_config = TrainConfig {
        batch_size: 8,
        learning_rate: 0.02,
        max_epochs: 200,
        early_stop_patience: 200,
        early_stop_min_delta: 0.0,
        seed: 3,
        monitor: Some(Monitor::TrainLoss),
    };
    let records =
        train_segmentation(&mut model, &manifest, None, &policy, None, &train_config).map_err(err)?;

    let samples = manifest.seg_samples().map_err(err)?;
    let mut dice_sum = 0.0;
    for s in samples {
        let (image, mask) =
            lesion_core::dataio::load_seg_batch(std::slice::from_ref(s), &policy).map_err(err)?;
        let pred = model.predict_mask(&image, 0.5).map_err(err)?;
        dice_sum += dice_score(&pred, &mask).map_err(err)?;
    }
    let mean_dice = dice_sum / samples.len() as f64;
    if mean_dice < 0.95 {
        return Err(format!(
            "train Dice {mean_dice:.4} < 0.95 after {} epochs",
            records.len()
        ));
    }

    // classification: 4 well-separated texture classes, 4 samples each
    let synth = SynthConfig {
        n_samples: 16,
        image_size: (32, 32),
        lesion_shape: LesionShape::Disk,
        texture_classes: 4,
        background_noise: 0.0,
        distractor_strength: 0.0,
        seed: 10,
        class_counts: None,
    };
    let cls_dir = dir.path().join("cls");
    let manifest = generate_cls_dataset(&synth, &cls_dir).map_err(err)?;

    let mut model =
        ClsModel::build(toy_cls_config(32, "mobilenet", 4).map_err(err)?, 2).map_err(err)?;
    let train_config = TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        max_epochs: 100,
        early_stop_patience: 100,
        early_stop_min_delta: 0.0,
        seed: 4,
        monitor: Some(Monitor::TrainLoss),
    };
    let cls_records =
        train_classification(&mut model, &manifest, None, &policy, None, &train_config)
            .map_err(err)?;
    let acc = cls_accuracy(&model, &manifest, &policy, 8).map_err(err)?;
    if acc < 1.0 {
        return Err(format!(
            "train accuracy {acc:.4} < 1.0 after {} epochs",
            cls_records.len()
        ));
    }
    Ok(format!(
        "seg Dice {mean_dice:.3} in {} epochs; cls accuracy 1.0 in {} epochs",
        records.len(),
        cls_records.len()
    ))
}

fn train_cls_on(
    manifest: &DatasetManifest,
    policy: &NormalizationPolicy,
    seed: u64,
) -> Result<f64, String> {
    let train = manifest.filter_split(SplitTag::Train);
    let test = manifest.filter_split(SplitTag::Test);
    let mut model =
        ClsModel::build(toy_cls_config(32, "mobilenet", 4).map_err(err)?, seed).map_err(err)?;
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        max_epochs: 30,
        early_stop_patience: 30,
        early_stop_min_delta: 0.0,
        seed,
        monitor: Some(Monitor::TrainLoss),
    };
    train_classification(&mut model, &train, None, policy, None, &config).map_err(err)?;
    cls_accuracy(&model, &test, policy, 8).map_err(err)
}

/// Criterion 6: with heavy label-independent background clutter, the
/// with-ROI pipeline (ground-truth oracle masks) beats or ties the
/// without-ROI pipeline on held-out accuracy in at least 2 of 3 seeds,
/// with positive mean gain.
fn criterion_6_cascade_benefit() -> CriterionResult {
    let policy = NormalizationPolicy::unit(32, 32);
    let mut gains = Vec::new();
    let mut wins = 0;
    let mut detail = String::new();

    for seed in 0..3u64 {
        let dir = tempfile::tempdir().map_err(err)?;
        let synth = SynthConfig {
            n_samples: 60,
            image_size: (32, 32),
            lesion_shape: LesionShape::Disk,
            texture_classes: 3,
            background_noise: 0.15,
            distractor_strength: 1.0,
            seed: 100 + seed,
            class_counts: None,
        };
        let data_dir = dir.path().join("data");
        let manifest = generate_cls_dataset(&synth, &data_dir).map_err(err)?;
        let manifest = split(&manifest, 0.75, seed).map_err(err)?;

        let oracle = OracleMasks {
            mask_dir: data_dir.join("masks"),
        };
        let roi_manifest = batch_extract_roi(
            &oracle,
            &manifest,
            &policy,
            &RoiConfig::default(),
            &dir.path().join("roi"),
        )
        .map_err(err)?;

        let acc_raw = train_cls_on(&manifest, &policy, seed)?;
        let acc_roi = train_cls_on(&roi_manifest, &policy, seed)?;
        if acc_roi >= acc_raw {
            wins += 1;
        }
        gains.push(acc_roi - acc_raw);
        detail.push_str(&format!(
            "seed {seed}: roi {acc_roi:.3} vs raw {acc_raw:.3}; "
        ));
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    if wins < 2 {
        return Err(format!("ROI won only {wins}/3 seeds ({detail})"));
    }
    if mean_gain <= 0.0 {
        return Err(format!("mean gain {mean_gain:.4} not positive ({detail})"));
    }
    Ok(format!("{detail}mean gain {mean_gain:.3}, {wins}/3 wins"))
}

/// Criterion 7: retraining and re-evaluating with an identical config and
/// seed produces byte-identical epoch logs and metric reports.
fn criterion_7_determinism() -> CriterionResult {
    let dir = tempfile::tempdir().map_err(err)?;
    let synth = SynthConfig {
        n_samples: 8,
        image_size: (32, 32),
        lesion_shape: LesionShape::Disk,
        texture_classes: 2,
        background_noise: 0.1,
        distractor_strength: 0.3,
        seed: 77,
        class_counts: None,
    };
    let seg_dir = dir.path().join("seg");
    let seg_manifest = generate_seg_dataset(&synth, &seg_dir).map_err(err)?;
    let cls_dir = dir.path().join("cls");
    let cls_manifest = generate_cls_dataset(&synth, &cls_dir).map_err(err)?;
    let policy = NormalizationPolicy::unit(32, 32);
    let augment = lesion_core::augment::AugmentConfig::default();

    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
        // segmentation training + eval report
        let mut model = SegModel::build(toy_seg_config(32, "resnet", 2).map_err(err)?, 1)
            .map_err(err)?;
        let config = TrainConfig {
            batch_size: 4,
            learning_rate: 0.01,
            max_epochs: 2,
            early_stop_patience: 2,
            early_stop_min_delta: 0.0,
            seed: 6,
            monitor: Some(Monitor::TrainLoss),
        };
        let records = train_segmentation(
            &mut model,
            &seg_manifest,
            None,
            &policy,
            Some(&augment),
            &config,
        )
        .map_err(err)?;
        let log_path = dir.path().join(format!("epochs_{tag}.jsonl"));
        write_epoch_log(&log_path, &records).map_err(err)?;
        let log_bytes = std::fs::read(&log_path).map_err(err)?;

        let samples = seg_manifest.seg_samples().map_err(err)?;
        let mut dice_sum = 0.0;
        let mut iou_sum = 0.0;
        for s in samples {
            let (image, mask) = lesion_core::dataio::load_seg_batch(
                std::slice::from_ref(s),
                &policy,
            )
            .map_err(err)?;
            let pred = model.predict_mask(&image, 0.5).map_err(err)?;
            dice_sum += dice_score(&pred, &mask).map_err(err)?;
            iou_sum += iou(&pred, &mask).map_err(err)?;
        }
        let report = MetricsReport {
            dice: Some(dice_sum / samples.len() as f64),
            miou: Some(iou_sum / samples.len() as f64),
            accuracy: None,
            confusion: None,
            n_samples: samples.len(),
            config_digest: lesion_core::checkpoint::config_digest(&config),
        };
        let report_bytes = serde_json::to_vec_pretty(&report).map_err(err)?;

        // classification training + report
        let mut cmodel = ClsModel::build(toy_cls_config(32, "mobilenet", 2).map_err(err)?, 2)
            .map_err(err)?;
        let crecords = train_classification(
            &mut cmodel,
            &cls_manifest,
            None,
            &policy,
            Some(&augment),
            &config,
        )
        .map_err(err)?;
        let clog_path = dir.path().join(format!("cls_epochs_{tag}.jsonl"));
        write_epoch_log(&clog_path, &crecords).map_err(err)?;
        let mut clog = std::fs::read(&clog_path).map_err(err)?;

        let csamples = cls_manifest.cls_samples().map_err(err)?;
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for s in csamples {
            let (image, labels) = lesion_core::dataio::load_cls_batch(
                std::slice::from_ref(s),
                &policy,
            )
            .map_err(err)?;
            preds.extend(cmodel.predict_classes(&image).map_err(err)?);
            truths.extend(labels);
        }
        let creport = classification_report(
            &preds,
            &truths,
            &lesion_core::checkpoint::config_digest(&config),
        )
        .map_err(err)?;
        clog.extend(serde_json::to_vec_pretty(&creport).map_err(err)?);
        Ok((log_bytes, report_bytes, clog))
    };

    let first = run("a")?;
    let second = run("b")?;
    if first.0 != second.0 {
        return Err("segmentation epoch logs differ between reruns".to_string());
    }
    if first.1 != second.1 {
        return Err("segmentation metric reports differ between reruns".to_string());
    }
    if first.2 != second.2 {
        return Err("classification logs/reports differ between reruns".to_string());
    }
    Ok("seg and cls train/eval reruns are byte-identical".to_string())
}

/// Criterion 8: the class-count fixture (AKIEC 327, BCC 514, BKL 1099,
/// DF 115, MEL 1113, NV 6705, VASC 142; 10015 total) is recounted exactly
/// by load_cls_manifest, and an 80/20 split of a 2594-stem segmentation
/// manifest yields exactly 2075 train / 519 test.
fn criterion_8_data_layer() -> CriterionResult {
    let dir = tempfile::tempdir().map_err(err)?;
    let images_dir = dir.path().join("images");
    std::fs::create_dir_all(&images_dir).map_err(err)?;

    let expected: [(LesionClass, usize); 7] = [
        (LesionClass::Akiec, 327),
        (LesionClass::Bcc, 514),
        (LesionClass::Bkl, 1099),
        (LesionClass::Df, 115),
        (LesionClass::Mel, 1113),
        (LesionClass::Nv, 6705),
        (LesionClass::Vasc, 142),
    ];
    let mut csv = String::from("image_id,class\n");
    let mut serial = 0usize;
    for (class, count) in expected {
        for _ in 0..count {
            let stem = format!("ISIC_{serial:07}");
            serial += 1;
            std::fs::write(images_dir.join(format!("{stem}.png")), []).map_err(err)?;
            csv.push_str(&format!("{stem},{}\n", class.as_str()));
        }
    }
    let csv_path = dir.path().join("labels.csv");
    std::fs::write(&csv_path, csv).map_err(err)?;

    let manifest = load_cls_manifest(dir.path(), &csv_path).map_err(err)?;
    if manifest.len() != 10015 {
        return Err(format!("manifest has {} samples, expected 10015", manifest.len()));
    }
    let mut counted: BTreeMap<&str, usize> = BTreeMap::new();
    for s in manifest.cls_samples().map_err(err)? {
        *counted.entry(s.label.as_str()).or_insert(0) += 1;
    }
    for (class, count) in expected {
        if counted.get(class.as_str()) != Some(&count) {
            return Err(format!(
                "{} recounted as {:?}, expected {count}",
                class.as_str(),
                counted.get(class.as_str())
            ));
        }
    }

    // 2594-stem segmentation manifest split 80/20
    let samples: Vec<SegSample> = (0..2594)
        .map(|i| SegSample {
            image_path: Path::new(&format!("images/ISIC_{i:07}.png")).to_path_buf(),
            mask_path: Path::new(&format!("masks/ISIC_{i:07}.png")).to_path_buf(),
            split: SplitTag::Train,
        })
        .collect();
    let manifest = DatasetManifest {
        samples: ManifestSamples::Seg(samples),
        class_counts: BTreeMap::new(),
        seed: 0,
        split_fraction: None,
    };
    let manifest = split(&manifest, 0.8, 17).map_err(err)?;
    let train = manifest
        .seg_samples()
        .map_err(err)?
        .iter()
        .filter(|s| s.split == SplitTag::Train)
        .count();
    let test = manifest.len() - train;
    if (train, test) != (2075, 519) {
        return Err(format!("split gave {train}/{test}, expected 2075/519"));
    }
    Ok("10015-image class counts recounted exactly; 2594 stems split 2075/519".to_string())
}
