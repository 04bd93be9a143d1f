use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize_with, TokenizerOptions, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Drives minibatch order and dropout masks.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Share of the epoch's training-mode predictions that were right.
    pub train_accuracy: f64,
}

/// Independent stream `index` derived from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Minibatch Adam on the mean Bernoulli negative log likelihood.
pub fn train<T: Real>(model: &mut Model<T>, sentences: &[&[usize]], labels: &[u8], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, sentences, labels, cfg, |_, _| Ok(true))
}

/// [`train`] with a hook after every epoch; returning `false` stops early.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    sentences: &[&[usize]],
    labels: &[u8],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&Model<T>, &EpochLog) -> Result<bool>,
) -> Result<Vec<EpochLog>> {
    if sentences.len() != labels.len() {
        return Err(Error::Contract(format!("{} sentences, {} labels", sentences.len(), labels.len())));
    }
    if sentences.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let trainable = model.trainable();
    let sizes: Vec<usize> = trainable.iter().map(|&i| model.params()[i].value.numel()).collect();
    let mut adam = Adam::<T>::new(cfg.adam, &sizes)?;
    let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| sentences[i]).collect();
            let ys: Vec<T> = chunk.iter().map(|&i| if labels[i] == 0 { T::zero() } else { T::one() }).collect();
            {
                let mut g = Graph::new();
                let vars = model.bind(&mut g);
                let out = model.forward(&mut g, &vars, &batch, Mode::Train, &mut dropout)?;
                let loss = g.bce_mean(out.logits, &ys)?;
                let value = g.scalar(loss).as_f64();
                if !value.is_finite() {
                    return Err(Error::Evaluation(format!("loss became {value} in epoch {epoch}")));
                }
                loss_sum += value * chunk.len() as f64;
                for (z, &i) in g.value(out.logits).iter().zip(chunk) {
                    correct += usize::from((*z > T::zero()) == (labels[i] != 0));
                }
                // dense parameters go straight into their buffers; the
                // embedding arrives as gathered rows
                let mut sinks: Vec<(Var, &mut Vec<T>)> = trainable
                    .iter()
                    .zip(grads.iter_mut())
                    .filter(|(&i, _)| i != 0)
                    .map(|(&i, buf)| (vars[i], buf))
                    .collect();
                let rest = g.backward_into(loss, &mut sinks)?;
                if trainable.first() == Some(&0) {
                    if let Some(rows) = rest.get(vars[0]) {
                        rows.add_to(&mut grads[0]);
                    }
                }
            }
            let params = model.params_mut();
            let mut values: Vec<&mut [T]> = params
                .iter_mut()
                .filter(|p| p.value.requires_grad())
                .map(|p| p.value.data_mut())
                .collect();
            let views: Vec<Option<&[T]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            adam.step(&mut values, &views)?;
            for g in grads.iter_mut() {
                g.fill(T::zero());
            }
        }
        let n = sentences.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
        };
        log::debug!("epoch {epoch}: loss {:.6} train acc {:.4}", entry.mean_loss, entry.train_accuracy);
        log.push(entry);
        if !after_epoch(model, &entry)? {
            break;
        }
    }
    Ok(log)
}

/// 0/1 predictions at probability 0.5 (logit 0).
pub fn predict<T: Real>(model: &Model<T>, sentences: &[&[usize]]) -> Result<Vec<u8>> {
    Ok(model.logits(sentences)?.into_iter().map(|z| u8::from(z > T::zero())).collect())
}

/// One scored input line.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub probability: f64,
    pub label: u8,
    pub sentence: String,
}

/// Scores every non-blank line of `text` as one sentence. A line with no
/// tokens left after tokenization is scored as a single unknown word.
pub fn score_lines<T: Real>(model: &Model<T>, tokenizer: TokenizerOptions, text: &str) -> Result<Vec<Scored>> {
    let lines: Vec<&str> = text
        .trim_start_matches('\u{feff}')
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .collect();
    let encoded = lines
        .iter()
        .map(|l| {
            let tokens = tokenize_with(l, tokenizer);
            if tokens.is_empty() {
                model.encode(&[UNK_TOKEN])
            } else {
                model.encode(&tokens)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<&[usize]> = encoded.iter().map(|e| e.valid()).collect();
    let probs = model.predict_proba(&valid)?;
    Ok(lines
        .into_iter()
        .zip(probs)
        .map(|(l, p)| Scored {
            probability: p,
            label: u8::from(p > 0.5),
            sentence: l.to_string(),
        })
        .collect())
}

/// `prob<TAB>label<TAB>sentence` rows.
pub fn format_scored(rows: &[Scored]) -> String {
    rows.iter()
        .map(|r| format!("{}\t{}\t{}\n", r.probability, r.label, r.sentence))
        .collect()
}

/// Per-epoch log as CSV.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss", "train_accuracy"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.train_accuracy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Vocab, PAD};
    use crate::embed_io::build_matrix;
    use crate::models::{Architecture, ModelConfig};

    fn setup(arch: Architecture, fine_tune: bool) -> (Model<f64>, Vec<Vec<usize>>, Vec<u8>) {
        let corpus = synthetic::learnable_corpus(120, 3);
        let vocab = Vocab::build(corpus.sentences(), 1).unwrap();
        let emb = build_matrix(&vocab, None, 8, 1).unwrap();
        let cfg = ModelConfig {
            architecture: arch,
            embedding_dim: 8,
            kernel_heights: vec![2, 3],
            out_channels: 8,
            hidden_size: 8,
            fc_units: 8,
            fine_tune,
            max_len: Some(15),
            ..Default::default()
        };
        let model = Model::build(cfg, vocab.clone(), &emb).unwrap();
        let ids = corpus.examples.iter().map(|e| model.encode(&e.tokens).unwrap().valid().to_vec()).collect();
        (model, ids, corpus.labels())
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs,
            adam: AdamConfig { lr: 0.01, ..Default::default() },
            seed: 4,
        }
    }

    #[test]
    fn loss_falls_and_training_is_repeatable() {
        for arch in Architecture::ALL {
            let (mut a, ids, labels) = setup(arch, true);
            let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
            let mut b = a.clone();
            let log = train(&mut a, &refs, &labels, &cfg(6)).unwrap();
            assert_eq!(log.len(), 6);
            assert!(log.iter().all(|e| e.mean_loss.is_finite()));
            assert!(log[0].mean_loss > log[5].mean_loss, "{arch}: {log:?}");
            assert_eq!(train(&mut b, &refs, &labels, &cfg(6)).unwrap(), log);
            assert_eq!(a, b);
            assert!(a.embedding().row(PAD).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn frozen_embedding_stays_bit_identical() {
        let (mut m, ids, labels) = setup(Architecture::Cnn, false);
        let before = m.embedding().clone();
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        train(&mut m, &refs, &labels, &cfg(3)).unwrap();
        assert_eq!(m.embedding(), &before);
        let (mut tuned, _, _) = setup(Architecture::Cnn, true);
        train(&mut tuned, &refs, &labels, &cfg(1)).unwrap();
        assert_ne!(tuned.embedding(), &before);
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let (mut m, ids, labels) = setup(Architecture::Cnn, true);
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        assert!(train(&mut m, &refs[..3], &labels, &cfg(1)).is_err());
        assert!(train(&mut m, &[], &[], &cfg(1)).is_err());
        assert!(train(&mut m, &refs, &labels, &TrainConfig { batch_size: 0, ..cfg(1) }).is_err());
        assert_eq!(train(&mut m, &refs, &labels, &cfg(0)).unwrap(), vec![]);
    }
}
