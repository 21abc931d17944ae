use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, SubtokenRecord};
use crate::error::{Error, Result};
use crate::eval::{score, Counts};
use crate::nn::{AdamConfig, AdamState, BatchInput, Network, ParamSet};
use crate::rnn::{ModelManifest, RnnModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 512,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Metrics after one epoch. Validation fields are `None` without a
/// validation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

struct Example {
    symbols: Vec<usize>,
    labels: Vec<f32>,
}

fn examples<'a>(records: impl Iterator<Item = &'a SubtokenRecord>, manifest: &ModelManifest) -> Vec<Example> {
    let index = manifest.indexer();
    let mut skipped = 0usize;
    let out = records
        .filter_map(|r| {
            let symbols: Vec<usize> = r.merged().chars().map(&index).collect();
            if symbols.is_empty() || symbols.len() > manifest.seq_len {
                skipped += 1;
                return None;
            }
            let mut labels = vec![0.0; symbols.len()];
            for &b in r.boundaries() {
                labels[b] = 1.0;
            }
            Some(Example { symbols, labels })
        })
        .collect();
    if skipped > 0 {
        log::warn!("skipped {skipped} records longer than {} characters", manifest.seq_len);
    }
    out
}

fn batch_of(examples: &[&Example]) -> (BatchInput<f32>, Vec<Vec<f32>>) {
    (
        BatchInput::OneHot(examples.iter().map(|e| e.symbols.clone()).collect()),
        examples.iter().map(|e| e.labels.clone()).collect(),
    )
}

fn validate(net: &mut Network<f32>, val: &[Example], batch_size: usize, threshold: f64) -> Result<(f64, Counts)> {
    let mut loss = 0.0;
    let mut counts = Counts::default();
    let refs: Vec<&Example> = val.iter().collect();
    for chunk in refs.chunks(batch_size) {
        let (input, labels) = batch_of(chunk);
        net.forward(&input)?;
        loss += f64::from(net.loss(&labels)?) * chunk.len() as f64;
        for (probs, example) in net.probabilities()?.iter().zip(chunk) {
            let predicted = (1..probs.len()).filter(|&t| f64::from(probs[t]) > threshold).collect();
            let truth = (1..example.labels.len())
                .filter(|&t| example.labels[t] == 1.0)
                .collect();
            counts.add(score(&predicted, &truth));
        }
    }
    Ok((loss / val.len() as f64, counts))
}

/// Mini-batch Adam on the masked BCE of the train split, shuffled per epoch.
pub fn train(dataset: &Dataset, manifest: &ModelManifest, config: &TrainConfig) -> Result<(RnnModel, Vec<EpochLog>)> {
    let mut log = Vec::new();
    let model = train_with(dataset, manifest, config, |entry, _| {
        log.push(*entry);
        true
    })?;
    Ok((model, log))
}

/// [`train`] with a callback after every epoch that sees the log entry and
/// the current model; returning `false` stops training early.
pub fn train_with(
    dataset: &Dataset,
    manifest: &ModelManifest,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &RnnModel) -> bool,
) -> Result<RnnModel> {
    manifest.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let train_set = examples(dataset.train(), manifest);
    if train_set.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    let val_set = examples(dataset.validation(), manifest);
    let arch = manifest.architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ParamSet::<f32>::init(&arch, &mut rng)?;
    let mut net = Network::new(arch, params)?;
    let mut adam = AdamState::new(config.adam, net.params.tensors());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (input, labels) = batch_of(&batch);
            net.forward(&input)?;
            let (loss, grads) = net.backward(&labels)?;
            adam.step(net.params.tensors_mut(), &grads)?;
            total += f64::from(loss) * batch.len() as f64;
        }
        net.params.check_finite()?;
        let mut entry = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: None,
            precision: None,
            recall: None,
            f1: None,
        };
        if !val_set.is_empty() {
            let (loss, counts) = validate(&mut net, &val_set, config.batch_size, manifest.threshold)?;
            entry.val_loss = Some(loss);
            entry.precision = Some(counts.precision());
            entry.recall = Some(counts.recall());
            entry.f1 = Some(counts.f1());
        }
        log::info!(
            "epoch {epoch}: train loss {:.5}, val f1 {:?}",
            entry.train_loss,
            entry.f1
        );
        let snapshot = RnnModel::new(manifest.clone(), net.params.clone())?;
        if !on_epoch(&entry, &snapshot) {
            return Ok(snapshot);
        }
    }
    RnnModel::new(manifest.clone(), net.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dataset, to_record};
    use crate::eval::evaluate_model;
    use crate::nn::CellKind;
    use rand::Rng;

    const WORDS: [&str; 20] = [
        "get", "set", "value", "name", "file", "path", "read", "write", "user", "id", "list", "map", "index", "count",
        "node", "tree", "data", "size", "key", "text",
    ];

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        while records.len() < n {
            let k = rng.gen_range(2..=3);
            let parts: Vec<&str> = (0..k).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            if let Some(r) = to_record(&parts).unwrap() {
                if !records.contains(&r) {
                    records.push(r);
                }
            }
        }
        build_dataset(records, seed)
    }

    fn manifest(cell: CellKind, hidden: usize) -> ModelManifest {
        ModelManifest::new(cell, hidden)
    }

    #[test]
    fn learns_a_compositional_vocabulary() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let data = synthetic(200, 3);
            let config = TrainConfig {
                epochs: 10,
                batch_size: 8,
                seed: 1,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
            };
            let (model, log) = train(&data, &manifest(cell, 32), &config).unwrap();
            assert_eq!(log.len(), 10);
            let report = evaluate_model("rnn", &model, &data).unwrap();
            assert!(report.f1 > 0.9, "{cell}: {report:?}");
            assert_eq!(log.last().unwrap().f1, Some(report.f1));
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = synthetic(30, 1);
        let config = TrainConfig {
            epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let m = manifest(CellKind::Lstm, 4);
        let (model, log) = train(&data, &m, &config).unwrap();
        assert!(log.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = ParamSet::<f32>::init(&m.architecture(), &mut rng).unwrap();
        assert_eq!(model.params(), &init);
    }

    #[test]
    fn same_seed_same_loss() {
        let data = synthetic(60, 2);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let m = manifest(CellKind::Gru, 8);
        let (a, la) = train(&data, &m, &config).unwrap();
        let (b, lb) = train(&data, &m, &config).unwrap();
        assert_eq!(
            la.last().unwrap().train_loss.to_bits(),
            lb.last().unwrap().train_loss.to_bits()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn callback_can_stop_early() {
        let data = synthetic(40, 5);
        let config = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        train_with(&data, &manifest(CellKind::Lstm, 4), &config, |e, _| {
            seen = e.epoch;
            e.epoch < 2
        })
        .unwrap();
        assert_eq!(seen, 2);
    }

    #[test]
    fn training_errors() {
        let empty = build_dataset(std::iter::empty(), 1);
        let m = manifest(CellKind::Lstm, 4);
        assert!(matches!(
            train(&empty, &m, &TrainConfig::default()),
            Err(Error::Empty(_))
        ));
        let data = synthetic(10, 1);
        assert!(train(&data, &manifest(CellKind::Lstm, 0), &TrainConfig::default()).is_err());
    }
}
