//! Incremental-budget training of the domain decoder on frozen embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, Split};
use crate::decoder::{self, init_decoder, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::gateway::{EmbeddingSource, FineTuneExample, FoundationModel};
use crate::metrics::{evaluate_model, MetricsReport};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompt::{box_prompt_from_mask, latest_by_sample, AnnotationRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub budgets: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub tau: f64,
    /// Budgets are prefixes of one seeded permutation when set; otherwise
    /// each budget draws its own sample.
    pub nested: bool,
    pub channel_schedule: Vec<usize>,
    pub out_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budgets: vec![5, 10, 15, 20, 25, 50],
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdaptiveMoment,
            seed: 0,
            tau: 0.5,
            nested: true,
            channel_schedule: vec![128, 64, 32],
            out_channels: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets[0] == 0 {
            return Err(Error::InvalidConfig("budgets must be non-empty and positive".into()));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "budgets must be strictly increasing: {:?}",
                self.budgets
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    /// Decoder geometry for a given embedding depth and output size.
    pub fn decoder_config(&self, in_channels: usize, target_width: u32, target_height: u32) -> DecoderConfig {
        DecoderConfig {
            out_channels: self.out_channels,
            ..DecoderConfig::new(in_channels, self.channel_schedule.clone(), target_width, target_height, self.seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub param_digest: String,
    pub encoder_digest: String,
}

/// First `n` ids of a seeded permutation of `train_ids`, so budgets under
/// one seed are nested.
pub fn select_increment(train_ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > train_ids.len() {
        return Err(Error::BudgetTooLarge {
            requested: n,
            available: train_ids.len(),
        });
    }
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n);
    Ok(ids)
}

/// Independent draw per budget, for comparison against nested selection.
pub fn select_independent(train_ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > train_ids.len() {
        return Err(Error::BudgetTooLarge {
            requested: n,
            available: train_ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(n);
    Ok(ids)
}

pub fn select_for_budget(config: &TrainConfig, train_ids: &[String], n: usize) -> Result<Vec<String>> {
    if config.nested {
        select_increment(train_ids, n, config.seed)
    } else {
        select_independent(train_ids, n, config.seed)
    }
}

/// Every id some budget of `config` will train on.
pub fn ids_to_annotate(config: &TrainConfig, train_ids: &[String]) -> Result<Vec<String>> {
    let mut all = BTreeSet::new();
    for &n in &config.budgets {
        all.extend(select_for_budget(config, train_ids, n)?);
    }
    Ok(all.into_iter().collect())
}

/// Trains a freshly initialised decoder for exactly `config.epochs` passes
/// over `records`. Batches are reshuffled every epoch under the seed;
/// per-sample gradients are summed in batch order.
pub fn train_decoder(
    config: &TrainConfig,
    records: &[AnnotationRecord],
    embeddings: &dyn EmbeddingSource,
) -> Result<(DecoderParams, TrainHistory)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyList);
    }
    let started = Instant::now();
    let encoder_before = embeddings.encoder_digest()?;
    let inputs = records
        .par_iter()
        .map(|r| embeddings.embedding(&r.sample_id))
        .collect::<Result<Vec<_>>>()?;
    let (target_w, target_h) = records[0].mask.dims();
    let targets: Vec<_> = records
        .iter()
        .map(|r| {
            if r.mask.dims() == (target_w, target_h) {
                r.mask.clone()
            } else {
                r.mask.resize_nearest(target_w, target_h)
            }
        })
        .collect();
    let decoder_config = config.decoder_config(inputs[0].channels, target_w, target_h);
    let mut params = init_decoder(&decoder_config)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.len());

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let values = params.values_f64();
            let results = batch
                .par_iter()
                .map(|&i| decoder::loss_and_grad(&decoder_config, &values, &inputs[i], &targets[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0f64; values.len()];
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                loss_sum += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grad: Vec<f32> = grad.iter().map(|g| (g * scale) as f32).collect();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            optimizer.step(params.values_mut(), &grad);
            if params.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
        }
        let mean = loss_sum / records.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let encoder_digest = embeddings.encoder_digest()?;
    if encoder_digest != encoder_before {
        return Err(Error::InvalidArgument("encoder parameters changed during decoder training".into()));
    }
    let history = TrainHistory {
        epoch_losses,
        wall_time_secs: started.elapsed().as_secs_f64(),
        param_digest: params.param_digest(),
        encoder_digest,
    };
    Ok((params, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub budget: usize,
    pub metrics: MetricsReport,
    pub param_digest: String,
    pub wall_time: f64,
    pub sample_ids: Vec<String>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub config: TrainConfig,
    pub entries: Vec<CurveEntry>,
    pub encoder_digest: String,
}

/// For each budget: fresh decoder, training on its selection, evaluation on
/// the test split. Budgets train concurrently; results are in budget order.
pub fn run_curve(
    config: &TrainConfig,
    manifest: &Manifest,
    annotations: &[AnnotationRecord],
    embeddings: &dyn EmbeddingSource,
) -> Result<CurveReport> {
    config.validate()?;
    let train_ids = manifest.ids(Split::Train);
    let by_id = latest_by_sample(annotations);
    let entries = config
        .budgets
        .par_iter()
        .map(|&n| {
            let ids = select_for_budget(config, &train_ids, n)?;
            let records = collect_records(&by_id, &ids)?;
            let started = Instant::now();
            let (params, history) = train_decoder(config, &records, embeddings)?;
            let metrics = evaluate_model(&params, manifest, embeddings, Split::Test, config.tau)?;
            Ok(CurveEntry {
                budget: n,
                metrics,
                param_digest: history.param_digest,
                wall_time: started.elapsed().as_secs_f64(),
                sample_ids: ids,
                final_loss: *history.epoch_losses.last().unwrap(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveReport {
        config: config.clone(),
        entries,
        encoder_digest: embeddings.encoder_digest()?,
    })
}

fn collect_records(by_id: &BTreeMap<String, AnnotationRecord>, ids: &[String]) -> Result<Vec<AnnotationRecord>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no annotation for selected sample `{id}`")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub losses: Vec<f64>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub mask_decoder_digest_before: String,
    pub mask_decoder_digest_after: String,
}

/// Fine-tunes the foundation model's own mask decoder on annotation masks,
/// each prompted with its tight box. The encoder stays frozen.
pub fn fine_tune_foundation_decoder(
    model: &mut dyn FoundationModel,
    manifest: &Manifest,
    records: &[AnnotationRecord],
    epochs: usize,
    learning_rate: f64,
) -> Result<FineTuneReport> {
    let encoder_digest_before = model.encoder_digest()?;
    let mask_decoder_digest_before = model.mask_decoder_digest()?;
    let mut examples = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| r.mask.has_foreground()) {
        let sample = manifest
            .get(&r.sample_id)
            .ok_or_else(|| Error::UnknownSample(r.sample_id.clone()))?;
        let image = manifest.load_image(sample)?;
        let embedding = model.encode_image(&image)?;
        examples.push(FineTuneExample {
            prompt: box_prompt_from_mask(&r.mask)?,
            target: r.mask.clone(),
            image,
            embedding,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyList);
    }
    let losses = model.fine_tune_mask_decoder(&examples, epochs, learning_rate)?;
    Ok(FineTuneReport {
        losses,
        encoder_digest_before,
        encoder_digest_after: model.encoder_digest()?,
        mask_decoder_digest_before,
        mask_decoder_digest_after: model.mask_decoder_digest()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:03}")).collect()
    }

    #[test]
    fn full_budget_is_permutation() {
        let all = ids(20);
        let mut sel = select_increment(&all, 20, 3).unwrap();
        sel.sort();
        assert_eq!(sel, all);
        assert!(matches!(
            select_increment(&all, 21, 3),
            Err(Error::BudgetTooLarge { requested: 21, available: 20 })
        ));
    }

    #[test]
    fn selection_is_deterministic() {
        let all = ids(405);
        assert_eq!(select_increment(&all, 5, 9).unwrap(), select_increment(&all, 5, 9).unwrap());
        assert_ne!(select_increment(&all, 5, 9).unwrap(), select_increment(&all, 5, 10).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            budgets: vec![5, 5],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn budgets_are_nested(seed in any::<u64>(), a in 1usize..40, b in 1usize..40) {
            let all = ids(50);
            let (lo, hi) = (a.min(b), a.max(b));
            let small = select_increment(&all, lo, seed).unwrap();
            let large = select_increment(&all, hi, seed).unwrap();
            prop_assert!(small.iter().all(|id| large.contains(id)));
        }
    }
}
