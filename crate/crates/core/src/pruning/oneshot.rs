use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PruneError;
use crate::nn::{evaluate, train, Dataset, MaskSet, Model, NnError, TrainConfig};
use crate::search_space::PruningScheme;
use crate::sparse::{make_mask, MaskParams, SparsityMask};

/// Scheme and ratio for one prunable layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub scheme: PruningScheme,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReportRow {
    pub layer: String,
    pub scheme: PruningScheme,
    pub ratio: f64,
    pub nnz_before: usize,
    pub nnz_after: usize,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub masks: MaskSet,
    pub layer_masks: Vec<SparsityMask>,
    pub report: Vec<PruneReportRow>,
}

/// Magnitude pruning of every prunable layer in one shot.
///
/// `plan[i]` applies to `model.prunable_layers()[i]`. Weights are zeroed in
/// place and the returned masks keep them zero under later training.
pub fn one_shot_prune<M: Model + ?Sized>(
    model: &mut M,
    plan: &[LayerPrune],
    params: &MaskParams,
) -> Result<PruneOutcome, PruneError> {
    let layers = model.prunable_layers();
    if layers.len() != plan.len() {
        return Err(PruneError::Dimension(format!(
            "plan has {} entries for {} prunable layers",
            plan.len(),
            layers.len()
        )));
    }
    let mut masks = MaskSet::new(model.params().len());
    let mut layer_masks = Vec::with_capacity(layers.len());
    let mut report = Vec::with_capacity(layers.len());
    for (info, lp) in layers.iter().zip(plan) {
        let w = &mut model.params_mut()[info.param];
        let nnz_before = w.data().iter().filter(|v| **v != 0.0).count();
        let mask = make_mask(w.data(), info.rows(), info.cols(), (info.kh, info.kw), lp.scheme, lp.ratio, params)?;
        let pruned = mask.apply(w.data());
        w.data_mut().copy_from_slice(&pruned);
        let nnz_after = pruned.iter().filter(|v| **v != 0.0).count();
        masks.set(info.param, mask.as_f64());
        report.push(PruneReportRow {
            layer: info.name.clone(),
            scheme: lp.scheme,
            ratio: mask.ratio(),
            nnz_before,
            nnz_after,
        });
        layer_masks.push(mask);
    }
    Ok(PruneOutcome { masks, layer_masks, report })
}

/// Mask-preserving fine-tune followed by validation; returns the reward
/// `−MSE`. A non-finite loss surfaces as an error for the caller to record.
pub fn short_retrain<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    masks: &MaskSet,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64, PruneError> {
    train(model, train_data, cfg, Some(masks), None, rng)?;
    let mse = evaluate(model, val_data, cfg.batch_size.max(1))?;
    if !mse.is_finite() {
        return Err(NnError::Diverged {
            epoch: cfg.epochs,
            batch: 0,
            loss: mse,
        }
        .into());
    }
    Ok(-mse)
}

/// CSV with header `layer,scheme,ratio,nnz_before,nnz_after`.
pub fn format_prune_report(rows: &[PruneReportRow]) -> String {
    let mut s = String::from("layer,scheme,ratio,nnz_before,nnz_after\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            r.layer, r.scheme, r.ratio, r.nnz_before, r.nnz_after
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::tensor::{OptimizerKind, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let x = Tensor::uniform(&[n, 8], -1.0, 1.0, rng);
        let y = Tensor::from_fn(&[n, 2], |i| {
            let row = &x.data()[(i / 2) * 8..(i / 2) * 8 + 8];
            if i % 2 == 0 { row[0] - row[3] } else { 0.5 * row[1] }
        });
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn prune_then_retrain_keeps_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Mlp::new(&[8, 40, 2], &mut rng);
        let plan = [
            LayerPrune { scheme: PruningScheme::Block, ratio: 0.6 },
            LayerPrune { scheme: PruningScheme::Channel, ratio: 0.5 },
        ];
        let out = one_shot_prune(&mut model, &plan, &MaskParams::default()).unwrap();
        let zeros_before: Vec<usize> = model.prunable_layers().iter()
            .map(|l| model.params()[l.param].data().iter().filter(|v| **v == 0.0).count())
            .collect();
        assert_eq!(out.report.len(), 2);
        assert!(out.report[0].nnz_after < out.report[0].nnz_before);
        let (tr, va) = (data(&mut rng, 128), data(&mut rng, 32));
        let cfg = TrainConfig { epochs: 3, batch_size: 16, optimizer: OptimizerKind::Adam { lr: 1e-2 } };
        let reward = short_retrain(&mut model, &out.masks, &tr, &va, &cfg, &mut rng).unwrap();
        assert!(reward <= 0.0);
        for (l, lm) in model.prunable_layers().iter().zip(&out.layer_masks) {
            let w = model.params()[l.param].data();
            for (v, k) in w.iter().zip(&lm.keep) {
                if !k {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let zeros_after: Vec<usize> = model.prunable_layers().iter()
            .map(|l| model.params()[l.param].data().iter().filter(|v| **v == 0.0).count())
            .collect();
        assert!(zeros_after.iter().zip(&zeros_before).all(|(a, b)| a >= b));
        let text = format_prune_report(&out.report);
        assert!(text.starts_with("layer,scheme,ratio,nnz_before,nnz_after\nfc0,block,"));
    }

    #[test]
    fn diverging_retrain_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Mlp::new(&[8, 16, 2], &mut rng);
        let masks = MaskSet::new(model.params().len());
        let d = data(&mut rng, 64);
        let cfg = TrainConfig { epochs: 50, batch_size: 64, optimizer: OptimizerKind::Sgd { lr: 1e6 } };
        assert!(short_retrain(&mut model, &masks, &d, &d, &cfg, &mut rng).is_err());
    }

    #[test]
    fn plan_length_must_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = Mlp::new(&[8, 16, 2], &mut rng);
        let plan = [LayerPrune { scheme: PruningScheme::Block, ratio: 0.5 }];
        assert!(matches!(
            one_shot_prune(&mut model, &plan, &MaskParams::default()),
            Err(PruneError::Dimension(_))
        ));
    }
}
