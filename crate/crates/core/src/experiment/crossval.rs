use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::RunConfig;
use super::report::{FoldResult, ReportRow, RunReport};
use super::train::{derive_seed, predict, train, EpochLog, TrainConfig};
use crate::data::{compute_metrics, kfold, stratified_kfold, FoldPlan, LabeledCorpus, Metrics, Vocab};
use crate::embed_io::{build_matrix, load_vec, EmbeddingMatrix, Pretrained};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::Real;

/// A corpus turned into token ids under one vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    /// Valid (truncated, unpadded) ids per example.
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    pub max_len: usize,
}

impl Prepared {
    /// The vocabulary covers the whole corpus; it uses no labels.
    pub fn new(corpus: &LabeledCorpus, min_count: usize, max_len: Option<usize>) -> Result<Self> {
        let vocab = Vocab::build(corpus.sentences(), min_count)?;
        Self::with_vocab(corpus, vocab, max_len)
    }

    pub fn with_vocab(corpus: &LabeledCorpus, vocab: Vocab, max_len: Option<usize>) -> Result<Self> {
        let max_len = max_len.unwrap_or_else(|| corpus.max_tokens());
        let ids = corpus
            .examples
            .iter()
            .map(|e| crate::data::encode(&e.tokens, &vocab, max_len).map(|enc| enc.valid().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            vocab,
            ids,
            labels: corpus.labels(),
            max_len,
        })
    }

    pub fn refs(&self, indices: &[usize]) -> Vec<&[usize]> {
        indices.iter().map(|&i| self.ids[i].as_slice()).collect()
    }
}

pub fn fold_plan(labels: &[u8], cfg: &RunConfig) -> Result<FoldPlan> {
    let seed = derive_seed(cfg.seed, 0);
    if cfg.stratified {
        stratified_kfold(labels, cfg.folds, seed)
    } else {
        kfold(labels.len(), cfg.folds, seed)
    }
}

pub fn train_config(cfg: &RunConfig, stream: u64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        adam: cfg.adam(),
        seed: derive_seed(cfg.seed, stream),
    }
}

/// One (architecture, D, fine-tune) cell of a grid.
#[derive(Debug, Clone)]
pub struct Cell {
    pub model: ModelConfig,
}

fn run_fold<T: Real>(
    data: &Prepared,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    embedding: &EmbeddingMatrix,
    cfg: &RunConfig,
) -> Result<FoldResult> {
    let start = Instant::now();
    let train_idx = plan.train_indices(fold);
    let test_idx = plan.test_indices(fold);
    let mut model = Model::<T>::build(model_cfg.clone(), data.vocab.clone(), embedding)?;
    let labels: Vec<u8> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let log = train(&mut model, &data.refs(&train_idx), &labels, &train_config(cfg, 100 + fold as u64))?;
    let predictions = predict(&model, &data.refs(&test_idx))?;
    let truth: Vec<u8> = test_idx.iter().map(|&i| data.labels[i]).collect();
    let metrics = compute_metrics(&predictions, &truth)?;
    log::info!(
        "{} D={} fine_tune={} fold {}: accuracy {:.4} f1 {:.4}",
        model_cfg.architecture,
        model_cfg.embedding_dim,
        model_cfg.fine_tune,
        fold + 1,
        metrics.accuracy,
        metrics.f1
    );
    Ok(FoldResult {
        fold,
        metrics,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        final_loss: log.last().map_or(f64::NAN, |e| e.mean_loss),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Cross-validates every cell; folds of all cells share one worker pool.
/// Results do not depend on the number of workers.
pub fn run_grid<T: Real>(
    data: &Prepared,
    cells: &[Cell],
    embeddings: &BTreeMap<usize, EmbeddingMatrix>,
    cfg: &RunConfig,
) -> Result<RunReport> {
    let plan = fold_plan(&data.labels, cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..plan.k).map(move |f| (c, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<FoldResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, f)| {
                let m = &cells[c].model;
                let emb = embeddings
                    .get(&m.embedding_dim)
                    .ok_or_else(|| Error::Contract(format!("no embedding matrix for D={}", m.embedding_dim)))?;
                run_fold::<T>(data, &plan, f, m, emb, cfg)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::with_capacity(cells.len());
    for (c, folds) in results.chunks(plan.k).enumerate() {
        let m = &cells[c].model;
        rows.push(ReportRow::new(
            m,
            folds.to_vec(),
            cfg,
            data.max_len,
            embeddings[&m.embedding_dim].coverage,
        ));
    }
    Ok(RunReport { rows })
}

fn resolved(cfg: &RunConfig, data: &Prepared) -> ModelConfig {
    ModelConfig {
        max_len: Some(data.max_len),
        ..cfg.model()
    }
}

fn read_corpus(cfg: &RunConfig) -> Result<LabeledCorpus> {
    let path = cfg.corpus.as_ref().ok_or_else(|| Error::Config("no corpus given".into()))?;
    let corpus = LabeledCorpus::load(path, cfg.tokenizer())?;
    let (lit, met) = corpus.class_counts();
    log::info!("{}: {} sentences ({met} metaphoric, {lit} literal)", path.display(), corpus.len());
    Ok(corpus)
}

/// Embedding matrix for `cfg.embedding_dim` from `cfg.embeddings`, or
/// random when no file is configured.
pub fn embedding_for(cfg: &RunConfig, vocab: &Vocab, dim: usize, file: Option<&Path>) -> Result<EmbeddingMatrix> {
    let pretrained: Option<Pretrained> = file.map(load_vec).transpose()?;
    let m = build_matrix(vocab, pretrained.as_ref(), dim, derive_seed(cfg.seed, 3))?;
    if file.is_some() {
        log::info!("D={dim}: {:.1}% of the vocabulary found in pretrained vectors", 100.0 * m.coverage);
    }
    Ok(m)
}

pub fn crossval_prepared<T: Real>(cfg: &RunConfig, data: &Prepared, embedding: EmbeddingMatrix) -> Result<RunReport> {
    let model = resolved(cfg, data);
    let embeddings = BTreeMap::from([(model.embedding_dim, embedding)]);
    run_grid::<T>(data, &[Cell { model }], &embeddings, cfg)
}

/// k-fold cross-validation of the configured model.
pub fn crossval<T: Real>(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let corpus = read_corpus(cfg)?;
    let data = Prepared::new(&corpus, cfg.min_count, cfg.max_len)?;
    let emb = embedding_for(cfg, &data.vocab, cfg.embedding_dim, cfg.embeddings.as_deref())?;
    crossval_prepared::<T>(cfg, &data, emb)
}

pub fn sweep_cells(cfg: &RunConfig, data: &Prepared) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &arch in &cfg.sweep_models {
        for &dim in &cfg.sweep_dims {
            for &fine_tune in &cfg.sweep_fine_tune {
                cells.push(Cell {
                    model: ModelConfig {
                        architecture: arch,
                        embedding_dim: dim,
                        fine_tune,
                        ..resolved(cfg, data)
                    },
                });
            }
        }
    }
    cells
}

/// `.vec` path for each swept dimension, or an error naming every
/// dimension whose file is missing.
pub fn sweep_vectors(cfg: &RunConfig) -> Result<BTreeMap<usize, Option<PathBuf>>> {
    let Some(pattern) = &cfg.embeddings_pattern else {
        return Ok(cfg.sweep_dims.iter().map(|&d| (d, None)).collect());
    };
    let paths: BTreeMap<usize, Option<PathBuf>> =
        cfg.sweep_dims.iter().map(|&d| (d, Some(PathBuf::from(pattern.replace("{D}", &d.to_string()))))).collect();
    let missing: Vec<String> = paths
        .iter()
        .filter(|(_, p)| !p.as_ref().unwrap().is_file())
        .map(|(d, _)| d.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no embedding file for D = {} (pattern `{pattern}`)",
            missing.join(", ")
        )));
    }
    Ok(paths)
}

/// The architecture × D × fine-tune grid.
pub fn sweep<T: Real>(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.sweep_models.is_empty() || cfg.sweep_dims.is_empty() || cfg.sweep_fine_tune.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let files = sweep_vectors(cfg)?;
    let corpus = read_corpus(cfg)?;
    let data = Prepared::new(&corpus, cfg.min_count, cfg.max_len)?;
    let mut embeddings = BTreeMap::new();
    for (&dim, file) in &files {
        embeddings.insert(dim, embedding_for(cfg, &data.vocab, dim, file.as_deref())?);
    }
    let cells = sweep_cells(cfg, &data);
    run_grid::<T>(&data, &cells, &embeddings, cfg)
}


/// Trains the configured model on the whole corpus.
pub fn fit<T: Real>(cfg: &RunConfig) -> Result<(Model<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    let corpus = read_corpus(cfg)?;
    let data = Prepared::new(&corpus, cfg.min_count, cfg.max_len)?;
    let emb = embedding_for(cfg, &data.vocab, cfg.embedding_dim, cfg.embeddings.as_deref())?;
    let mut model = Model::<T>::build(resolved(cfg, &data), data.vocab.clone(), &emb)?;
    let all: Vec<usize> = (0..data.ids.len()).collect();
    let log = train(&mut model, &data.refs(&all), &data.labels, &train_config(cfg, 99))?;
    Ok((model, log))
}

/// Metrics of `model` on a labelled corpus, tokenized as during training.
pub fn evaluate<T: Real>(model: &Model<T>, corpus: &LabeledCorpus) -> Result<Metrics> {
    let encoded = corpus
        .examples
        .iter()
        .map(|e| model.encode(&e.tokens))
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<&[usize]> = encoded.iter().map(|e| e.valid()).collect();
    compute_metrics(&predict(model, &valid)?, &corpus.labels())
}
