use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Sample;
use super::plan::TrainPlan;
use crate::diagnostics::rmse;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Checkpoint, CnnModel};
use crate::profile::{ChannelConfig, ConfigKind, ModelInput, NormalizationSpec};

/// Which pass a batch of sample ids is fed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
    Test,
}

/// Sees the ids of every batch a model touches. Used to audit splits.
pub trait BatchObserver {
    fn observe(&mut self, phase: Phase, ids: &[u64]);
}

impl BatchObserver for () {
    fn observe(&mut self, _: Phase, _: &[u64]) {}
}

/// One point of a loss curve; RMSE values in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Root of the mean batch loss over the epoch.
    pub train_rmse_db: f64,
    pub val_rmse_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub val_losses: Vec<f64>,
}

/// 1-based index of the smallest loss, earliest on ties.
pub fn best_epoch(losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i + 1)
}

fn targets_db(samples: &[&Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            s.target_db
                .ok_or_else(|| Error::Config(format!("sample {} has no path loss", s.id)))
        })
        .collect()
}

/// Predictions in dB, `chunk` samples at a time.
pub fn predict_db(
    model: &CnnModel<f32>,
    norm: &NormalizationSpec,
    samples: &[&Sample],
    phase: Phase,
    chunk: usize,
    observer: &mut dyn BatchObserver,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let ids: Vec<u64> = part.iter().map(|s| s.id).collect();
        observer.observe(phase, &ids);
        let inputs: Vec<&ModelInput> = part.iter().map(|s| &s.input).collect();
        out.extend(
            model
                .predict(&inputs)?
                .into_iter()
                .map(|p| norm.denormalize_target(p as f64)),
        );
    }
    Ok(out)
}

/// Test RMSE in dB of `model` over `samples`.
pub fn evaluate_rmse_db(
    model: &CnnModel<f32>,
    norm: &NormalizationSpec,
    samples: &[&Sample],
    observer: &mut dyn BatchObserver,
) -> Result<f64> {
    let t = targets_db(samples)?;
    let p = predict_db(model, norm, samples, Phase::Test, 256, observer)?;
    rmse(&p, &t)
}

/// Relative ridge added to the readout normal equations.
const READOUT_RIDGE: f64 = 1e-6;

/// Replace the output layer of a freshly built model with the ridge
/// least-squares fit of the training targets on its last hidden features,
/// so training starts from calibrated predictions.
fn fit_readout(model: &mut CnnModel<f32>, train: &[&Sample]) -> Result<()> {
    let inputs: Vec<&ModelInput> = train.iter().map(|s| &s.input).collect();
    let feats = model.readout_features(&inputs)?;
    let y: Vec<f64> = inputs
        .iter()
        .map(|s| s.target.map(f64::from).ok_or(Error::Config("training sample without target".into())))
        .collect::<Result<_>>()?;
    let n = feats.len() as f64;
    let k = feats[0].len();
    let mut mean_x = vec![0.0; k];
    for f in &feats {
        for (m, &v) in mean_x.iter_mut().zip(f) {
            *m += v as f64 / n;
        }
    }
    let mean_y = y.iter().sum::<f64>() / n;
    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (f, &t) in feats.iter().zip(&y) {
        let c: Vec<f64> = f.iter().zip(&mean_x).map(|(&v, m)| v as f64 - m).collect();
        for i in 0..k {
            b[i] += c[i] * (t - mean_y);
            for j in 0..=i {
                a[i * k + j] += c[i] * c[j];
            }
        }
    }
    let trace: f64 = (0..k).map(|i| a[i * k + i]).sum();
    let ridge = READOUT_RIDGE * trace.max(f64::MIN_POSITIVE) / k as f64;
    for i in 0..k {
        a[i * k + i] += ridge;
        for j in 0..i {
            a[j * k + i] = a[i * k + j];
        }
    }
    let w = cholesky_solve(&mut a, &mut b, k)
        .ok_or_else(|| Error::NonFinite("readout normal equations".into()))?;
    let bias = mean_y - w.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    let out = model.params_mut().dense.last_mut().expect("output layer");
    for (dst, &v) in out.weights.iter_mut().zip(&w) {
        *dst = v as f32;
    }
    out.bias[0] = bias as f32;
    Ok(())
}

/// Solve `a x = b` for symmetric positive definite `a` (row-major, `k x k`).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], k: usize) -> Option<Vec<f64>> {
    for j in 0..k {
        let d = a[j * k + j] - (0..j).map(|p| a[j * k + p] * a[j * k + p]).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let v = a[i * k + j] - (0..j).map(|p| a[i * k + p] * a[j * k + p]).sum::<f64>();
            a[i * k + j] = v / d;
        }
    }
    for i in 0..k {
        b[i] = (b[i] - (0..i).map(|p| a[i * k + p] * b[p]).sum::<f64>()) / a[i * k + i];
    }
    for i in (0..k).rev() {
        b[i] = (b[i] - (i + 1..k).map(|p| a[p * k + i] * b[p]).sum::<f64>()) / a[i * k + i];
    }
    b.iter().all(|v| v.is_finite()).then(|| b.to_vec())
}

/// Shuffled mini-batch Adam for `plan.epochs` epochs, keeping the
/// parameters of the epoch with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    train: &[&Sample],
    validation: &[&Sample],
    plan: &TrainPlan,
    kind: ConfigKind,
    norm: &NormalizationSpec,
    seed: u64,
    observer: &mut dyn BatchObserver,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Empty("training and validation sets"));
    }
    let val_targets = targets_db(validation)?;
    targets_db(train)?;
    let mut model = CnnModel::<f32>::build(ChannelConfig::of(kind), plan.arch.clone(), seed)?;
    fit_readout(&mut model, train)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: plan.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let scale = norm.target_scale_db;

    let mut curve = Vec::with_capacity(plan.epochs);
    let mut val_losses = Vec::with_capacity(plan.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(plan.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
            observer.observe(Phase::Train, &ids);
            let inputs: Vec<&ModelInput> = batch.iter().map(|s| &s.input).collect();
            let (loss, grads) = model.mse_and_gradients(&inputs)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("training loss {loss}"),
                });
            }
            adam.step(&mut model, &grads).map_err(|e| Error::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let preds = predict_db(&model, norm, validation, Phase::Validation, plan.batch_size, observer)?;
        let val_rmse = rmse(&preds, &val_targets)?;
        if !val_rmse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation RMSE {val_rmse}"),
            });
        }
        let val_loss = (val_rmse / scale).powi(2);
        curve.push(EpochRecord {
            epoch,
            train_rmse_db: (loss_sum / batches as f64).sqrt() * scale,
            val_rmse_db: val_rmse,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            best = Some(Checkpoint::capture(&model, *norm, val_loss, seed, epoch as u64));
        }
        val_losses.push(val_loss);
        log::debug!(
            "seed {seed} epoch {epoch}: train {:.3} dB, validation {val_rmse:.3} dB",
            curve[epoch - 1].train_rmse_db
        );
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        curve,
        val_losses,
    })
}

/// Mean of several loss curves of equal length, epoch by epoch.
pub fn average_curves(curves: &[Vec<EpochRecord>]) -> Result<Vec<EpochRecord>> {
    let first = curves.first().ok_or(Error::Empty("loss curves"))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Shape("loss curves differ in length".into()));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|e| EpochRecord {
            epoch: first[e].epoch,
            train_rmse_db: curves.iter().map(|c| c[e].train_rmse_db).sum::<f64>() / n,
            val_rmse_db: curves.iter().map(|c| c[e].val_rmse_db).sum::<f64>() / n,
        })
        .collect())
}

/// Write a loss curve as `epoch,train_rmse_db,val_rmse_db`.
pub fn write_curve_csv<W: Write>(writer: W, curve: &[EpochRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["epoch", "train_rmse_db", "val_rmse_db"])?;
    for e in curve {
        wtr.write_record([e.epoch.to_string(), e.train_rmse_db.to_string(), e.val_rmse_db.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(reader: R) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let bad = |what: &str, v: &str| Error::format("loss curve CSV", format!("bad {what} {v:?}"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::format("loss curve CSV", "expected epoch,train_rmse_db,val_rmse_db"));
        }
        out.push(EpochRecord {
            epoch: rec[0].parse().map_err(|_| bad("epoch", &rec[0]))?,
            train_rmse_db: rec[1].parse().map_err(|_| bad("train RMSE", &rec[1]))?,
            val_rmse_db: rec[2].parse().map_err(|_| bad("validation RMSE", &rec[2]))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::{ArchSpec, ConvBlockSpec};
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn best_epoch_is_earliest_argmin() {
        assert_eq!(best_epoch(&[5.0, 3.0, 4.0]), Some(2));
        assert_eq!(best_epoch(&[2.0, 1.0, 1.0, 3.0]), Some(2));
        assert_eq!(best_epoch(&[]), None);
    }

    pub(crate) fn tiny_arch(width: usize) -> ArchSpec {
        ArchSpec {
            input_rows: 256,
            input_width: width,
            conv: vec![ConvBlockSpec::new(2, 3, 4)],
            hidden: vec![8],
        }
    }

    /// Samples whose normalized target is a linear function of the
    /// filled frequency channel.
    fn learnable(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let f: f32 = rng.random_range(-1.0..1.0);
                let mut data = vec![0.0f32; 4 * 256 * 5];
                data[2 * 1280..3 * 1280].fill(f);
                let target_db = 100.0 + 20.0 * f as f64;
                Sample {
                    id: i as u64,
                    region: "r".into(),
                    rx_x: 0.0,
                    rx_y: 0.0,
                    input: ModelInput {
                        channels: Tensor::new(vec![4, 256, 5], data).unwrap(),
                        scalars: vec![],
                        target: Some((target_db / 200.0) as f32),
                    },
                    target_db: Some(target_db),
                    category: None,
                }
            })
            .collect()
    }

    fn quick_plan() -> TrainPlan {
        TrainPlan {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            arch: tiny_arch(5),
            ..TrainPlan::default()
        }
    }

    #[test]
    fn learns_and_beats_baseline() {
        let data = learnable(200, 1);
        let (tr, va) = data.split_at(160);
        let tr: Vec<&Sample> = tr.iter().collect();
        let va: Vec<&Sample> = va.iter().collect();
        let norm = NormalizationSpec::default();
        let out = train_model(&tr, &va, &quick_plan(), ConfigKind::Fine, &norm, 3, &mut ()).unwrap();
        let targets: Vec<f64> = va.iter().map(|s| s.target_db.unwrap()).collect();
        let m = targets.iter().sum::<f64>() / targets.len() as f64;
        let baseline = rmse(&vec![m; targets.len()], &targets).unwrap();
        let model: CnnModel<f32> = out.checkpoint.to_model().unwrap();
        let got = evaluate_rmse_db(&model, &norm, &va, &mut ()).unwrap();
        assert!(got < baseline, "{got} vs baseline {baseline}");
        assert_eq!(out.curve.len(), 30);
        let best = best_epoch(&out.val_losses).unwrap();
        assert_eq!(out.checkpoint.epoch as usize, best);
        assert!((got - out.curve[best - 1].val_rmse_db).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = learnable(60, 2);
        let (tr, va) = data.split_at(48);
        let tr: Vec<&Sample> = tr.iter().collect();
        let va: Vec<&Sample> = va.iter().collect();
        let plan = TrainPlan {
            epochs: 3,
            ..quick_plan()
        };
        let norm = NormalizationSpec::default();
        let a = train_model(&tr, &va, &plan, ConfigKind::Fine, &norm, 9, &mut ()).unwrap();
        let b = train_model(&tr, &va, &plan, ConfigKind::Fine, &norm, 9, &mut ()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.curve, b.curve);
        let c = train_model(&tr, &va, &plan, ConfigKind::Fine, &norm, 10, &mut ()).unwrap();
        assert_ne!(a.checkpoint.params, c.checkpoint.params);
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = learnable(40, 3);
        let (tr, va) = data.split_at(32);
        let tr: Vec<&Sample> = tr.iter().collect();
        let va: Vec<&Sample> = va.iter().collect();
        let plan = TrainPlan {
            epochs: 50,
            lr: 1e30,
            ..quick_plan()
        };
        let err = train_model(&tr, &va, &plan, ConfigKind::Fine, &NormalizationSpec::default(), 1, &mut ());
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn observer_sees_every_batch() {
        struct Log(Vec<(Phase, Vec<u64>)>);
        impl BatchObserver for Log {
            fn observe(&mut self, phase: Phase, ids: &[u64]) {
                self.0.push((phase, ids.to_vec()));
            }
        }
        let data = learnable(50, 4);
        let (tr, va) = data.split_at(40);
        let tr: Vec<&Sample> = tr.iter().collect();
        let va: Vec<&Sample> = va.iter().collect();
        let plan = TrainPlan {
            epochs: 2,
            ..quick_plan()
        };
        let mut log = Log(Vec::new());
        train_model(&tr, &va, &plan, ConfigKind::Fine, &NormalizationSpec::default(), 1, &mut log).unwrap();
        let train_ids: usize = log.0.iter().filter(|(p, _)| *p == Phase::Train).map(|(_, v)| v.len()).sum();
        let val_ids: usize = log.0.iter().filter(|(p, _)| *p == Phase::Validation).map(|(_, v)| v.len()).sum();
        assert_eq!(train_ids, 80);
        assert_eq!(val_ids, 20);
        assert!(log.0.iter().filter(|(p, _)| *p == Phase::Train).all(|(_, v)| v.iter().all(|&i| i < 40)));
    }

    #[test]
    fn curves_average() {
        let c = |a: f64| {
            vec![EpochRecord {
                epoch: 1,
                train_rmse_db: a,
                val_rmse_db: 2.0 * a,
            }]
        };
        let avg = average_curves(&[c(1.0), c(3.0)]).unwrap();
        assert_eq!(avg[0].train_rmse_db, 2.0);
        assert_eq!(avg[0].val_rmse_db, 4.0);
        assert!(average_curves(&[]).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let curve: Vec<EpochRecord> = (1..=4)
            .map(|e| EpochRecord {
                epoch: e,
                train_rmse_db: 10.0 / e as f64,
                val_rmse_db: 12.5 / e as f64 + 0.1,
            })
            .collect();
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        assert!(buf.starts_with(b"epoch,train_rmse_db,val_rmse_db\n"));
        assert_eq!(read_curve_csv(buf.as_slice()).unwrap(), curve);
        assert!(read_curve_csv("epoch,train_rmse_db,val_rmse_db\n1,x,2\n".as_bytes()).is_err());
    }
}
