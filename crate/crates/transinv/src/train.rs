//! Optimization protocol: seeded He initialization, Adam on cross-entropy
//! with batch size 128, training to a train-accuracy criterion, and a
//! learning-rate sweep ranked on validation accuracy with edge extension.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchSpec;
use crate::data::{DatasetSplit, Sample};
use crate::nn::{adam_step, softmax_cross_entropy, AdamHyper, AdamState, Model, NnError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("train accuracy target {target} not reached in {epochs} epochs (best {best:.4})")]
    TargetNotReached {
        target: f64,
        epochs: usize,
        best: f64,
    },
    #[error("cannot evaluate an empty sample list")]
    EmptyEvaluation,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("all sweep runs failed for seed {seed}")]
    AllRunsFailed { seed: u64 },
    #[error("learning-rate sweep needs at least 2 distinct rates, got {0}")]
    TooFewRates(usize),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub batch_size: usize,
    pub initial_lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_epochs: usize,
    pub train_acc_target: f64,
    pub edge_step: f64,
    pub adam: AdamHyper,
}

impl TrainConfig {
    /// Protocol defaults: batch 128, four initial rates, three seeds.
    pub fn paper_defaults(arch: ArchSpec) -> Self {
        TrainConfig {
            arch,
            batch_size: 128,
            initial_lrs: vec![0.0005, 0.001, 0.002, 0.005],
            seeds: vec![1, 2, 3],
            max_epochs: 50,
            train_acc_target: 0.99,
            edge_step: 0.001,
            adam: AdamHyper::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub lr: f64,
    pub epochs: Vec<EpochStats>,
    pub stop_epoch: usize,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_test_acc: f64,
    pub wall_secs: f64,
}

/// Assemble samples (all with identical image shapes) into one batch tensor.
pub fn batch_tensor(samples: &[&Sample]) -> Tensor<f32> {
    let shape = samples[0].image.shape();
    let plane: usize = shape.iter().product();
    let mut data = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data).expect("homogeneous samples")
}

/// Fraction of samples whose argmax logit equals the label; argmax ties
/// resolve to the lowest class index.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = model.logits(&batch_tensor(&refs))?;
        let classes = logits.shape()[1];
        for (row, s) in logits.data().chunks(classes).zip(chunk) {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == s.label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train one run at a fixed learning rate. Stops at the first epoch whose
/// running train accuracy reaches the target; fails if it never does.
pub fn train_one(
    config: &TrainConfig,
    lr: f64,
    seed: u64,
    data: &DatasetSplit,
) -> Result<(Model<f32>, TrainReport), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f32> = Model::init(&config.arch, &mut rng)?;
    let shapes = model.param_shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(config.adam, &shape_refs);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best_train_acc = 0.0f64;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let refs: Vec<&Sample> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<u8> = refs.iter().map(|s| s.label).collect();
            let batch = batch_tensor(&refs);
            let trace = model.forward_cached(&batch)?;
            let (loss, grad) = softmax_cross_entropy(&trace.logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss as f64;
            batches += 1;
            let classes = trace.logits.shape()[1];
            for (row, &label) in trace.logits.data().chunks(classes).zip(&labels) {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                if best == label as usize {
                    correct += 1;
                }
            }
            let grads = model.backward(&trace, &grad)?;
            let grad_refs: Vec<&Tensor<f32>> = grads.tensors.iter().collect();
            let mut params = model.params_mut();
            adam_step(&mut params, &grad_refs, &mut adam, lr)?;
        }
        let train_acc = correct as f64 / data.train.len() as f64;
        let val_acc = evaluate(&model, &data.validation)?;
        best_train_acc = best_train_acc.max(train_acc);
        eprintln!(
            "epoch={epoch} train_acc={train_acc:.4} val_acc={val_acc:.4}"
        );
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_acc,
            val_acc,
        });
        if train_acc >= config.train_acc_target {
            let final_test_acc = evaluate(&model, &data.test)?;
            let report = TrainReport {
                seed,
                lr,
                stop_epoch: epoch,
                final_train_acc: train_acc,
                final_val_acc: val_acc,
                final_test_acc,
                wall_secs: started.elapsed().as_secs_f64(),
                epochs,
            };
            return Ok((model, report));
        }
    }
    Err(TrainError::TargetNotReached {
        target: config.train_acc_target,
        epochs: config.max_epochs,
        best: best_train_acc,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub lr: f64,
    pub outcome: RunOutcome,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunOutcome {
    Ok {
        val_acc: f64,
        test_acc: f64,
        stop_epoch: usize,
        wall_secs: f64,
    },
    Diverged {
        epoch: usize,
    },
    TargetNotReached {
        best_train_acc: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    pub chosen_lr: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub runs: Vec<RunSummary>,
    #[serde(skip)]
    pub report: Option<TrainReport>,
}

pub struct SweepResult {
    pub per_seed: Vec<(SeedSweep, Model<f32>)>,
}

/// One trained run as seen by the sweep: Ok(validation accuracy) or a
/// recoverable failure.
type Runner<'a> = dyn FnMut(f64) -> Result<(f64, usize), TrainError> + 'a;

const MAX_EDGE_EXTENSIONS: usize = 3;
const MIN_LR: f64 = 0.0001;

/// Sweep logic over an abstract runner so the edge-extension protocol can be
/// tested without training. Returns (winning index, run lrs in trial order).
fn sweep_with(
    initial: &[f64],
    edge_step: f64,
    run: &mut Runner<'_>,
) -> Result<(usize, Vec<(f64, Option<f64>)>), TrainError> {
    if initial.len() < 2 {
        return Err(TrainError::TooFewRates(initial.len()));
    }
    let mut lrs: Vec<f64> = initial.to_vec();
    lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lrs.dedup();
    if lrs.len() < 2 {
        return Err(TrainError::TooFewRates(lrs.len()));
    }

    // (lr, Some(val_acc) | None for failed)
    let mut results: Vec<(f64, Option<f64>)> = Vec::new();
    for &lr in &lrs {
        let acc = match run(lr) {
            Ok((val, _)) => Some(val),
            Err(TrainError::Diverged { .. }) | Err(TrainError::TargetNotReached { .. }) => None,
            Err(e) => return Err(e),
        };
        results.push((lr, acc));
    }

    let winner = |results: &[(f64, Option<f64>)]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, (lr, acc)) in results.iter().enumerate() {
            let Some(acc) = acc else { continue };
            match best {
                None => best = Some(i),
                Some(b) => {
                    let (blr, bacc) = (results[b].0, results[b].1.unwrap());
                    // higher accuracy wins; ties go to the lower rate
                    if *acc > bacc || (*acc == bacc && *lr < blr) {
                        best = Some(i);
                    }
                }
            }
        }
        best
    };

    let mut low_ext = 0usize;
    let mut high_ext = 0usize;
    loop {
        let Some(best) = winner(&results) else {
            return Err(TrainError::AllRunsFailed { seed: 0 });
        };
        let tried_min = results
            .iter()
            .map(|(lr, _)| *lr)
            .fold(f64::INFINITY, f64::min);
        let tried_max = results
            .iter()
            .map(|(lr, _)| *lr)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_lr = results[best].0;

        let next = if best_lr == tried_min && low_ext < MAX_EDGE_EXTENSIONS {
            let candidate = if tried_min - edge_step <= 0.0 {
                MIN_LR
            } else {
                tried_min - edge_step
            };
            low_ext += 1;
            candidate
        } else if best_lr == tried_max && high_ext < MAX_EDGE_EXTENSIONS {
            high_ext += 1;
            tried_max + edge_step
        } else {
            return Ok((best, results));
        };
        if results.iter().any(|(lr, _)| *lr == next) {
            return Ok((best, results));
        }
        let acc = match run(next) {
            Ok((val, _)) => Some(val),
            Err(TrainError::Diverged { .. }) | Err(TrainError::TargetNotReached { .. }) => None,
            Err(e) => return Err(e),
        };
        results.push((next, acc));
        // if the extension did not take the lead, stop extending that side
        let new_best = winner(&results).expect("previous winner still present");
        if results[new_best].0 != next {
            return Ok((new_best, results));
        }
    }
}

/// The full protocol: per seed, train at every rate, rank on validation
/// accuracy, extend past the sweep edge while the edge keeps winning.
pub fn lr_sweep(config: &TrainConfig, data: &DatasetSplit) -> Result<SweepResult, TrainError> {
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let mut trained: Vec<(f64, Option<(Model<f32>, TrainReport)>)> = Vec::new();
        let mut summaries: Vec<RunSummary> = Vec::new();
        let mut run = |lr: f64| -> Result<(f64, usize), TrainError> {
            eprintln!("sweep: seed={seed} lr={lr}");
            match train_one(config, lr, seed, data) {
                Ok((model, report)) => {
                    let val = report.final_val_acc;
                    summaries.push(RunSummary {
                        lr,
                        outcome: RunOutcome::Ok {
                            val_acc: val,
                            test_acc: report.final_test_acc,
                            stop_epoch: report.stop_epoch,
                            wall_secs: report.wall_secs,
                        },
                    });
                    trained.push((lr, Some((model, report))));
                    Ok((val, 0))
                }
                Err(TrainError::Diverged { epoch }) => {
                    summaries.push(RunSummary {
                        lr,
                        outcome: RunOutcome::Diverged { epoch },
                    });
                    trained.push((lr, None));
                    Err(TrainError::Diverged { epoch })
                }
                Err(TrainError::TargetNotReached { best, .. }) => {
                    summaries.push(RunSummary {
                        lr,
                        outcome: RunOutcome::TargetNotReached {
                            best_train_acc: best,
                        },
                    });
                    trained.push((lr, None));
                    Err(TrainError::TargetNotReached {
                        target: config.train_acc_target,
                        epochs: config.max_epochs,
                        best,
                    })
                }
                Err(e) => Err(e),
            }
        };
        let sweep = sweep_with(&config.initial_lrs, config.edge_step, &mut run);
        let (_best_idx, results) = match sweep {
            Ok(v) => v,
            Err(TrainError::AllRunsFailed { .. }) => {
                return Err(TrainError::AllRunsFailed { seed })
            }
            Err(e) => return Err(e),
        };
        // recover the winning (lr, model) from the trial log
        let mut best: Option<(f64, f64)> = None; // (lr, val_acc)
        for (lr, acc) in &results {
            if let Some(acc) = acc {
                let better = match best {
                    None => true,
                    Some((blr, bacc)) => *acc > bacc || (*acc == bacc && *lr < blr),
                };
                if better {
                    best = Some((*lr, *acc));
                }
            }
        }
        let (chosen_lr, val_acc) = best.expect("sweep returned a winner");
        let (model, report) = trained
            .iter()
            .find(|(lr, m)| *lr == chosen_lr && m.is_some())
            .and_then(|(_, m)| m.clone())
            .expect("winner was trained");
        per_seed.push((
            SeedSweep {
                seed,
                chosen_lr,
                val_acc,
                test_acc: report.final_test_acc,
                runs: summaries,
                report: Some(report),
            },
            model,
        ));
    }
    Ok(SweepResult { per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchSpec, ConvBlockSpec};
    use crate::data::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tiny architecture for fast synthetic-data tests.
    fn micro_arch() -> ArchSpec {
        let spec = ArchSpec {
            name: "micro".into(),
            input: [1, 16, 16],
            conv_blocks: vec![
                ConvBlockSpec { kernel: 3, stride: 1, padding: 1, channels: 4 },
                ConvBlockSpec { kernel: 3, stride: 1, padding: 1, channels: 4 },
                ConvBlockSpec { kernel: 3, stride: 1, padding: 1, channels: 4 },
            ],
            hidden_units: 16,
            output_units: 10,
        };
        spec.validate().unwrap();
        spec
    }

    /// Synthetic task: the brightest quadrant decides the class (0..4).
    fn quadrant_data(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let q = rng.random_range(0..4u8);
                let mut img = Tensor::zeros(&[1, 16, 16]);
                let (y0, x0) = match q {
                    0 => (0, 0),
                    1 => (0, 8),
                    2 => (8, 0),
                    _ => (8, 8),
                };
                for y in 0..8 {
                    for x in 0..8 {
                        img.data_mut()[(y0 + y) * 16 + x0 + x] =
                            0.6 + 0.4 * rng.random::<f32>();
                    }
                }
                // faint noise everywhere
                for v in img.data_mut() {
                    if *v == 0.0 {
                        *v = 0.1 * rng.random::<f32>();
                    }
                }
                Sample { image: img, label: q }
            })
            .collect()
    }

    fn quadrant_split() -> DatasetSplit {
        DatasetSplit {
            train: quadrant_data(96, 1),
            validation: quadrant_data(32, 2),
            test: quadrant_data(32, 3),
            provenance: Provenance {
                dataset: "synthetic-quadrants".into(),
                file_checksums: vec![],
            },
        }
    }

    fn micro_config() -> TrainConfig {
        TrainConfig {
            arch: micro_arch(),
            batch_size: 16,
            initial_lrs: vec![0.002, 0.005],
            seeds: vec![7],
            max_epochs: 60,
            train_acc_target: 0.99,
            edge_step: 0.001,
            adam: AdamHyper::default(),
        }
    }

    #[test]
    fn memorizes_the_quadrant_task_and_evaluates_perfectly() {
        let data = quadrant_split();
        let cfg = micro_config();
        let (model, report) = train_one(&cfg, 0.005, 7, &data).unwrap();
        assert!(report.final_train_acc >= 0.99);
        let train_acc = evaluate(&model, &data.train).unwrap();
        assert!(train_acc >= 0.99, "memorized accuracy {train_acc}");
        assert!(report.final_test_acc > 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = quadrant_split();
        let mut cfg = micro_config();
        cfg.max_epochs = 2;
        cfg.train_acc_target = 2.0; // unreachable: we only want the steps
        let err = train_one(&cfg, 0.0, 7, &data).unwrap_err();
        assert!(matches!(err, TrainError::TargetNotReached { .. }));

        // compare against the freshly initialized model
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fresh: Model<f32> = Model::init(&cfg.arch, &mut rng).unwrap();
        // re-run one epoch manually at lr 0 and check params equal fresh
        let mut model: Model<f32> =
            Model::init(&cfg.arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let shapes = model.param_shapes();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut adam = AdamState::new(cfg.adam, &refs);
        let samples: Vec<&Sample> = data.train.iter().take(16).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let batch = batch_tensor(&samples);
        let trace = model.forward_cached(&batch).unwrap();
        let (_, grad) = softmax_cross_entropy(&trace.logits, &labels).unwrap();
        let grads = model.backward(&trace, &grad).unwrap();
        let grad_refs: Vec<&Tensor<f32>> = grads.tensors.iter().collect();
        let mut params = model.params_mut();
        adam_step(&mut params, &grad_refs, &mut adam, 0.0).unwrap();
        for (a, b) in model.params().iter().zip(fresh.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = quadrant_split();
        let mut cfg = micro_config();
        cfg.max_epochs = 3;
        cfg.train_acc_target = 2.0;
        let run = || {
            // target unreachable: grab the model after max_epochs by training
            // with a tiny target instead
            let mut c = cfg.clone();
            c.train_acc_target = 0.0;
            c.max_epochs = 3;
            train_one(&c, 0.003, 11, &data).unwrap().0
        };
        let a = run();
        let b = run();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn constant_model_scores_chance_on_balanced_labels() {
        // zero conv kernels and zero fc weights: logits equal fc2 bias,
        // argmax ties at class 0
        let arch = micro_arch();
        let mut model: Model<f32> =
            Model::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let balanced: Vec<Sample> = (0..50)
            .map(|i| Sample {
                image: Tensor::filled(&[1, 16, 16], (i as f32) / 50.0),
                label: (i % 10) as u8,
            })
            .collect();
        let acc = evaluate(&model, &balanced).unwrap();
        assert_eq!(acc, 0.1);
    }

    #[test]
    fn empty_evaluation_is_rejected() {
        let arch = micro_arch();
        let model: Model<f32> =
            Model::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            evaluate(&model, &[]),
            Err(TrainError::EmptyEvaluation)
        ));
    }

    // --- sweep protocol against a mock runner ---

    fn mock(table: &[(f64, f64)]) -> impl FnMut(f64) -> Result<(f64, usize), TrainError> + '_ {
        move |lr| {
            for (l, acc) in table {
                if (l - lr).abs() < 1e-12 {
                    return Ok((*acc, 0));
                }
            }
            Ok((0.0, 0))
        }
    }

    #[test]
    fn interior_winner_runs_no_extensions() {
        let table = [(0.001, 0.90), (0.002, 0.95), (0.003, 0.92)];
        let mut calls = Vec::new();
        let mut run = |lr: f64| {
            calls.push(lr);
            mock(&table)(lr)
        };
        let (best, results) = sweep_with(&[0.001, 0.002, 0.003], 0.001, &mut run).unwrap();
        assert_eq!(results[best].0, 0.002);
        assert_eq!(calls.len(), 3);
    }

    #[test]
    fn winning_edge_extends_until_it_stops_improving() {
        // 0.004 wins, extension 0.005 wins again, 0.006 does not
        let table = [
            (0.002, 0.80),
            (0.003, 0.85),
            (0.004, 0.90),
            (0.005, 0.93),
            (0.006, 0.91),
        ];
        let mut calls = Vec::new();
        let mut run = |lr: f64| {
            calls.push(lr);
            mock(&table)(lr)
        };
        let (best, results) = sweep_with(&[0.002, 0.003, 0.004], 0.001, &mut run).unwrap();
        assert_eq!(results[best].0, 0.005);
        assert_eq!(calls, vec![0.002, 0.003, 0.004, 0.005, 0.006]);
    }

    #[test]
    fn low_edge_extension_clamps_above_zero() {
        let table = [(0.0005, 0.95), (0.001, 0.90), (0.0001, 0.97)];
        let mut calls = Vec::new();
        let mut run = |lr: f64| {
            calls.push(lr);
            mock(&table)(lr)
        };
        let (best, results) = sweep_with(&[0.0005, 0.001], 0.001, &mut run).unwrap();
        // 0.0005 - 0.001 <= 0 so the extension lands on the 0.0001 floor
        assert!(calls.contains(&0.0001));
        assert_eq!(results[best].0, 0.0001);
    }

    #[test]
    fn ties_prefer_the_lower_rate() {
        let table = [(0.001, 0.90), (0.002, 0.90), (0.003, 0.80)];
        let mut run = mock(&table);
        let (best, results) = sweep_with(&[0.001, 0.002, 0.003], 0.001, &mut run).unwrap();
        assert_eq!(results[best].0, 0.001);
    }

    #[test]
    fn failed_runs_are_skipped_and_all_failed_is_an_error() {
        let mut run = |lr: f64| -> Result<(f64, usize), TrainError> {
            if lr > 0.0015 {
                Err(TrainError::Diverged { epoch: 1 })
            } else {
                Ok((0.9, 0))
            }
        };
        let (best, results) = sweep_with(&[0.001, 0.002, 0.003], 0.001, &mut run).unwrap();
        assert_eq!(results[best].0, 0.001);

        let mut all_fail =
            |_lr: f64| -> Result<(f64, usize), TrainError> { Err(TrainError::Diverged { epoch: 1 }) };
        assert!(matches!(
            sweep_with(&[0.001, 0.002], 0.001, &mut all_fail),
            Err(TrainError::AllRunsFailed { .. })
        ));
    }

    #[test]
    fn single_rate_is_rejected() {
        let mut run = |_lr: f64| -> Result<(f64, usize), TrainError> { Ok((0.9, 0)) };
        assert!(matches!(
            sweep_with(&[0.001], 0.001, &mut run),
            Err(TrainError::TooFewRates(1))
        ));
    }
}
