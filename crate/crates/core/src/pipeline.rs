//! End-to-end plumbing: embed a dataset, build and query an index, assemble
//! evaluation reports, and compare mining strategies across seeds.

use std::collections::BTreeSet;

use crate::data::{ImageRecord, SyntheticDataset};
use crate::error::{Error, Result};
use crate::miner::MiningStrategy;
use crate::model::{EmbeddingVector, MiniDrn, ModelConfig};
use crate::retrieval::{
    accuracy_density, build_index, mp_at_k, query_topk, recall_at_4, reference_densities,
    EmbeddingIndex, EvalReport, QueryPrecisionRow, TimingInfo,
};
use crate::trainer::{train, EpochStats, TrainConfig};

/// Embeds every record (single view; images must match the model's input
/// size).
pub fn embed_records(model: &MiniDrn, records: &[ImageRecord]) -> Result<Vec<EmbeddingVector>> {
    records
        .iter()
        .map(|r| model.embed(&r.pixels, &r.id))
        .collect()
}

/// Embeds the gallery into a searchable index.
pub fn index_records(model: &MiniDrn, records: &[ImageRecord]) -> Result<EmbeddingIndex> {
    build_index(&embed_records(model, records)?)
}

fn rankings_for(
    index: &EmbeddingIndex,
    queries: &[EmbeddingVector],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    queries
        .iter()
        .map(|q| {
            let result = query_topk(index, &q.values, k)?;
            Ok(result.hits.into_iter().map(|(id, _)| id).collect())
        })
        .collect()
}

fn precision_of(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let take = ranking.len().min(k);
    if take == 0 {
        return 0.0;
    }
    ranking[..take]
        .iter()
        .filter(|id| relevant.contains(*id))
        .count() as f64
        / take as f64
}

/// Runs the standard retrieval protocol: queries against a disjoint gallery,
/// where every gallery image sharing the query's label is relevant.
pub fn evaluate_retrieval(
    model: &MiniDrn,
    gallery: &[ImageRecord],
    queries: &[ImageRecord],
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Config(
            "evaluation needs a gallery and at least one query".into(),
        ));
    }
    let embed_start = std::time::Instant::now();
    let index = index_records(model, gallery)?;
    let query_embeddings = embed_records(model, queries)?;
    let embed_seconds = embed_start.elapsed().as_secs_f64();

    let search_start = std::time::Instant::now();
    let rankings = rankings_for(&index, &query_embeddings, 10)?;
    let search_seconds = search_start.elapsed().as_secs_f64();

    let relevant: Vec<BTreeSet<String>> = queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .filter(|g| g.label == q.label)
                .map(|g| g.id.clone())
                .collect()
        })
        .collect();
    finish_report(
        model,
        queries,
        &rankings,
        &relevant,
        None,
        config_echo,
        TimingInfo {
            embed_seconds,
            search_seconds,
        },
    )
}

/// Runs the groups-of-4 protocol: every image queries the full set (itself
/// included) and its 4-image group is the relevant set.
pub fn evaluate_groups_of_4(
    model: &MiniDrn,
    records: &[ImageRecord],
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Config("evaluation needs at least one group".into()));
    }
    let embed_start = std::time::Instant::now();
    let embeddings = embed_records(model, records)?;
    let index = build_index(&embeddings)?;
    let embed_seconds = embed_start.elapsed().as_secs_f64();

    let search_start = std::time::Instant::now();
    let rankings = rankings_for(&index, &embeddings, 10)?;
    let search_seconds = search_start.elapsed().as_secs_f64();

    let groups: Vec<BTreeSet<String>> = records
        .iter()
        .map(|q| {
            records
                .iter()
                .filter(|r| r.label == q.label)
                .map(|r| r.id.clone())
                .collect()
        })
        .collect();
    let recall = recall_at_4(&rankings, &groups)?;
    finish_report(
        model,
        records,
        &rankings,
        &groups,
        Some(recall),
        config_echo,
        TimingInfo {
            embed_seconds,
            search_seconds,
        },
    )
}

fn finish_report(
    model: &MiniDrn,
    queries: &[ImageRecord],
    rankings: &[Vec<String>],
    relevant: &[BTreeSet<String>],
    recall: Option<f64>,
    config_echo: serde_json::Value,
    timing: TimingInfo,
) -> Result<EvalReport> {
    let mp1 = mp_at_k(rankings, relevant, 1)?;
    let mp5 = mp_at_k(rankings, relevant, 5)?;
    let mp10 = mp_at_k(rankings, relevant, 10)?;
    let per_query = queries
        .iter()
        .zip(rankings)
        .zip(relevant)
        .map(|((q, ranking), rel)| QueryPrecisionRow {
            id: q.id.clone(),
            p_at_1: precision_of(ranking, rel, 1),
            p_at_5: precision_of(ranking, rel, 5),
            p_at_10: precision_of(ranking, rel, 10),
        })
        .collect();
    let param_count = model.param_count();
    Ok(EvalReport {
        mp_at_1: mp1.value,
        mp_at_5: mp5.value,
        mp_at_10: mp10.value,
        recall_at_4: recall,
        param_count,
        accuracy_density: accuracy_density(mp10.value, param_count)?,
        short_queries: mp10.short_queries,
        per_query,
        reference_densities: reference_densities(),
        config_echo,
        timing,
    })
}

/// Trains a fresh model on the dataset's train split and reports mP@5 on the
/// query-vs-gallery protocol.
pub fn train_and_score(
    dataset: &SyntheticDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(MiniDrn, Vec<EpochStats>, f64)> {
    let mut model = MiniDrn::build(model_config.clone(), train_config.seed)?;
    let stats = train(&mut model, &dataset.train, train_config, None)?;
    let report = evaluate_retrieval(
        &model,
        &dataset.gallery,
        &dataset.query,
        serde_json::json!({"seed": train_config.seed}),
    )?;
    Ok((model, stats, report.mp_at_5))
}

/// One training run inside the strategy comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MinerRun {
    pub strategy: MiningStrategy,
    pub seed: u64,
    pub mp_at_5: f64,
}

/// All runs of the four-strategy comparison plus per-strategy medians.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MinerComparison {
    pub runs: Vec<MinerRun>,
    /// (strategy, median mP@5), sorted best first.
    pub medians: Vec<(MiningStrategy, f64)>,
}

impl MinerComparison {
    pub fn median_of(&self, strategy: MiningStrategy) -> Option<f64> {
        self.medians
            .iter()
            .find(|(s, _)| *s == strategy)
            .map(|(_, m)| *m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("mining strategy comparison (mP@5 per seed, then median)\n");
        let seeds: BTreeSet<u64> = self.runs.iter().map(|r| r.seed).collect();
        out.push_str(&format!(
            "{:<26} {}  median\n",
            "strategy",
            seeds
                .iter()
                .map(|s| format!("seed {s:>4}"))
                .collect::<Vec<_>>()
                .join("  ")
        ));
        for (strategy, median) in &self.medians {
            let mut cells = Vec::new();
            for &seed in &seeds {
                let run = self
                    .runs
                    .iter()
                    .find(|r| r.strategy == *strategy && r.seed == seed);
                cells.push(match run {
                    Some(r) => format!("{:>9.4}", r.mp_at_5),
                    None => format!("{:>9}", "-"),
                });
            }
            out.push_str(&format!(
                "{:<26} {}  {median:.4}\n",
                strategy.name(),
                cells.join("  ")
            ));
        }
        out
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains every mining strategy on identical data and seeds, scoring each
/// run by mP@5. The returned table is sorted by median, best first.
pub fn compare_miners(
    dataset: &SyntheticDataset,
    model_config: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<MinerComparison> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "strategy comparison needs at least one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut medians = Vec::new();
    for strategy in MiningStrategy::ALL {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                strategy,
                seed,
                ..base.clone()
            };
            let (_, _, mp5) = train_and_score(dataset, model_config, &cfg)?;
            runs.push(MinerRun {
                strategy,
                seed,
                mp_at_5: mp5,
            });
            scores.push(mp5);
        }
        medians.push((strategy, median(scores)));
    }
    medians.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite medians"));
    Ok(MinerComparison { runs, medians })
}
