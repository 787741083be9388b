//! Evaluation runs: STS scoring, alignment/uniformity, the mask-template
//! sweep and token-contribution analysis, all on top of a [`Backend`] and an
//! optional embedding [`Store`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::analysis::{classify_tokens, merge_by_offset, token_contributions, word_spans, ContributionReport};
use crate::backend::{Backend, HiddenStatesRequest};
use crate::datasets::{filter_similar, load_normalized, load_senteval_sts, Benchmark, BenchmarkName, DatasetError};
use crate::error::{Error, ErrorKind, Result};
use crate::metrics::{alignment, cosine, spearman, uniformity, MetricReport};
use crate::pooling::{default_layer, pool, ExtractionSpec, PoolingContext};
use crate::report::{
    AlignUniformReport, AlignUniformRow, BenchmarkCell, CellStatus, EvalReport, ReportMetadata, SubsetScore,
    SweepReport, SweepRow, TemplateRow,
};
use crate::store::{sha256, CacheEntry, CacheKey, Store};
use crate::templates::{build_mask_template, Eos, MaskTemplateConfig, PromptTemplate, MASK_TOKEN};

pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Gold score at or above which a pair counts as semantically similar.
pub const DEFAULT_ALIGN_THRESHOLD: f64 = 4.5;

/// How STS12–16 subsets are combined into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// One Spearman over the concatenation of all subsets.
    All,
    /// Mean of per-subset Spearman values.
    Mean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::All => "all",
            Aggregation::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataLayout {
    Normalized,
    Senteval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSource {
    pub root: PathBuf,
    pub layout: DataLayout,
}

impl DataSource {
    pub fn load(&self, name: BenchmarkName) -> Result<Benchmark, DatasetError> {
        match self.layout {
            DataLayout::Normalized => load_normalized(&self.root, name),
            DataLayout::Senteval => load_senteval_sts(&self.root, name),
        }
    }
}

/// A template together with the extraction applied to its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRun {
    pub template: PromptTemplate,
    pub spec: ExtractionSpec,
}

impl TemplateRun {
    /// Uses the template's default layer unless one is given.
    pub fn new(template: PromptTemplate, layer: Option<i32>, normalize: bool) -> Self {
        let layer = layer.unwrap_or_else(|| default_layer(template.id()));
        let spec = ExtractionSpec::for_template(&template, layer, normalize);
        Self { template, spec }
    }

    /// Rewrites the layer into negative form for `backend`.
    fn resolved(&self, backend: &dyn Backend) -> Result<Self> {
        let mut out = self.clone();
        out.spec.layer = backend.descriptor().normalize_layer(i64::from(self.spec.layer))?;
        out.spec.check_template(&out.template)?;
        Ok(out)
    }

    fn with_normalize(&self, normalize: bool) -> Self {
        let mut out = self.clone();
        out.spec.normalize = normalize;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub runs: Vec<TemplateRun>,
    pub benchmarks: Vec<BenchmarkName>,
    pub aggregation: Aggregation,
    pub data: DataSource,
    pub batch_size: usize,
    /// Unix seconds stamped into report metadata; omitted when `None` so
    /// repeated runs produce identical bytes.
    pub generated_at: Option<u64>,
}

impl RunConfig {
    pub fn new(runs: Vec<TemplateRun>, benchmarks: Vec<BenchmarkName>, data: DataSource) -> Self {
        Self {
            runs,
            benchmarks,
            aggregation: Aggregation::All,
            data,
            batch_size: DEFAULT_BATCH_SIZE,
            generated_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        if self.benchmarks.is_empty() {
            return Err(Error::Config("at least one benchmark is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct DigestInput<'a> {
    model_id: &'a str,
    fingerprint: &'a str,
    runs: Vec<(&'a str, String, String, i32, &'static str, bool)>,
    benchmarks: Vec<&'static str>,
    aggregation: &'static str,
    layout: DataLayout,
    extra: &'a [(&'a str, String)],
}

/// SHA-256 over the parts of a run that determine its numbers.
fn config_digest(backend: &dyn Backend, runs: &[TemplateRun], config: &RunConfig, extra: &[(&str, String)]) -> String {
    let desc = backend.descriptor();
    let input = DigestInput {
        model_id: &desc.model_id,
        fingerprint: &desc.fingerprint,
        runs: runs
            .iter()
            .map(|r| {
                (
                    r.template.id(),
                    r.template.pattern(),
                    r.template.capture().to_string(),
                    r.spec.layer,
                    r.spec.rule.name(),
                    r.spec.normalize,
                )
            })
            .collect(),
        benchmarks: config.benchmarks.iter().map(|b| b.as_str()).collect(),
        aggregation: config.aggregation.as_str(),
        layout: config.data.layout,
        extra,
    };
    hex::encode(sha256(&serde_json::to_vec(&input).expect("digest input serializes")))
}

fn metadata(
    backend: &dyn Backend,
    runs: &[TemplateRun],
    config: &RunConfig,
    extra: &[(&str, String)],
) -> ReportMetadata {
    let desc = backend.descriptor();
    ReportMetadata {
        tool: concat!("peb ", env!("CARGO_PKG_VERSION")).to_string(),
        model_id: desc.model_id.clone(),
        backend_fingerprint: desc.fingerprint.clone(),
        aggregation: config.aggregation,
        benchmarks: config.benchmarks.clone(),
        config_digest: config_digest(backend, runs, config, extra),
        generated_at: config.generated_at,
    }
}

type BatchResult = Result<Vec<Vec<f32>>>;

/// Embeds sentences through a backend, consulting and filling the cache.
pub struct Embedder<'a> {
    backend: &'a dyn Backend,
    store: Option<&'a Store>,
    batch_size: usize,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<'a> Embedder<'a> {
    pub fn new(backend: &'a dyn Backend, store: Option<&'a Store>, batch_size: usize) -> Self {
        Self {
            backend,
            store,
            batch_size: batch_size.max(1),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Cache hits and misses so far, counted per distinct sentence.
    pub fn cache_counts(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    fn key(&self, run: &TemplateRun, sentence: &str) -> CacheKey {
        CacheKey::new(
            &self.backend.descriptor().model_id,
            run.template.id(),
            run.spec.layer,
            run.spec.rule.name(),
            run.spec.normalize,
            sentence,
        )
    }

    /// One vector per input sentence. Vectors pass through `f32` whether
    /// they come from the backend or the cache, so cold and cached runs
    /// agree bit for bit.
    pub fn embed(&self, run: &TemplateRun, sentences: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slots: HashMap<&str, usize> = HashMap::new();
        let positions: Vec<usize> = sentences
            .iter()
            .map(|s| {
                let s = s.trim();
                *slots.entry(s).or_insert_with(|| {
                    unique.push(s);
                    unique.len() - 1
                })
            })
            .collect();

        let keys: Vec<CacheKey> = unique.iter().map(|s| self.key(run, s)).collect();
        let mut vectors: Vec<Option<Vec<f32>>> = vec![None; unique.len()];
        if let Some(store) = self.store {
            for (slot, key) in vectors.iter_mut().zip(&keys) {
                *slot = store.get(key)?;
            }
        }
        let missing: Vec<usize> = (0..unique.len()).filter(|&i| vectors[i].is_none()).collect();
        self.hits.fetch_add(unique.len() - missing.len(), Ordering::Relaxed);
        self.misses.fetch_add(missing.len(), Ordering::Relaxed);

        let batches: Vec<&[usize]> = missing.chunks(self.batch_size).collect();
        let computed = self.run_batches(run, &unique, &batches);
        let fingerprint = &self.backend.descriptor().fingerprint;
        for (batch, result) in batches.iter().zip(computed) {
            for (&i, v) in batch.iter().zip(result?) {
                if let Some(store) = self.store {
                    store.put(&CacheEntry::new(keys[i].clone(), v.clone(), fingerprint))?;
                }
                vectors[i] = Some(v);
            }
        }
        Ok(positions
            .into_iter()
            .map(|i| {
                vectors[i]
                    .as_ref()
                    .expect("every slot filled")
                    .iter()
                    .map(|&x| f64::from(x))
                    .collect()
            })
            .collect())
    }

    /// Runs batches on up to `max_in_flight` threads; results keep batch order.
    fn run_batches(&self, run: &TemplateRun, unique: &[&str], batches: &[&[usize]]) -> Vec<BatchResult> {
        let workers = self.backend.max_in_flight().max(1).min(batches.len());
        if workers <= 1 {
            return batches.iter().map(|b| self.embed_batch(run, unique, b)).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<BatchResult>>> = Mutex::new((0..batches.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= batches.len() {
                        break;
                    }
                    let r = self.embed_batch(run, unique, batches[i]);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every batch ran"))
            .collect()
    }

    fn embed_batch(&self, run: &TemplateRun, unique: &[&str], batch: &[usize]) -> BatchResult {
        let prompts: Vec<String> = batch
            .iter()
            .map(|&i| run.template.render(unique[i]))
            .collect::<Result<_, _>>()?;
        let request = HiddenStatesRequest::new(prompts, vec![i64::from(run.spec.layer)]);
        let responses = self.backend.fetch_hidden_states(&request)?;
        if responses.len() != request.prompts.len() {
            return Err(crate::backend::BackendError::ProtocolError(format!(
                "{} responses for {} prompts",
                responses.len(),
                request.prompts.len()
            ))
            .into());
        }
        let desc = self.backend.descriptor();
        responses
            .iter()
            .zip(&request.prompts)
            .map(|(hs, prompt)| {
                let ctx = PoolingContext {
                    model_id: &desc.model_id,
                    mask_token: desc.mask_token.as_deref().unwrap_or(MASK_TOKEN),
                    prompt: Some(prompt),
                };
                let e = pool(hs, &run.spec, &run.template, &ctx)?;
                Ok(e.vector.iter().map(|&x| x as f32).collect())
            })
            .collect()
    }
}

/// Cosine similarity of each pair's embeddings, in pair order.
fn predicted_similarities(embedder: &Embedder<'_>, run: &TemplateRun, benchmark: &Benchmark) -> Result<Vec<Vec<f64>>> {
    let sentences: Vec<&str> = benchmark
        .pairs()
        .flat_map(|p| [p.sentence1.as_str(), p.sentence2.as_str()])
        .collect();
    let vectors = embedder.embed(run, &sentences)?;
    let mut it = vectors.chunks_exact(2);
    benchmark
        .subsets
        .iter()
        .map(|subset| {
            subset
                .pairs
                .iter()
                .map(|_| {
                    let pair = it.next().expect("two vectors per pair");
                    Ok(cosine(&pair[0], &pair[1])?)
                })
                .collect()
        })
        .collect()
}

fn score_benchmark(
    embedder: &Embedder<'_>,
    run: &TemplateRun,
    benchmark: &Benchmark,
    aggregation: Aggregation,
) -> Result<BenchmarkCell> {
    let predicted = predicted_similarities(embedder, run, benchmark)?;
    let subsets: Vec<SubsetScore> = benchmark
        .subsets
        .iter()
        .zip(&predicted)
        .map(|(subset, pred)| {
            let gold: Vec<f64> = subset.pairs.iter().map(|p| p.gold).collect();
            SubsetScore {
                name: subset.name.clone(),
                n: gold.len(),
                dropped: subset.dropped,
                spearman_x100: spearman(pred, &gold).ok().map(|s| s * 100.0),
            }
        })
        .collect();
    let all_pred: Vec<f64> = predicted.concat();
    let all_gold: Vec<f64> = benchmark.pairs().map(|p| p.gold).collect();
    let overall = MetricReport::compute(&all_pred, &all_gold)?;
    let spearman_x100 = match aggregation {
        Aggregation::All => overall.spearman_x100,
        Aggregation::Mean => {
            let per: Vec<f64> = benchmark
                .subsets
                .iter()
                .zip(&predicted)
                .map(|(subset, pred)| {
                    let gold: Vec<f64> = subset.pairs.iter().map(|p| p.gold).collect();
                    spearman(pred, &gold).map(|s| s * 100.0)
                })
                .collect::<Result<_, _>>()?;
            per.iter().sum::<f64>() / per.len() as f64
        }
    };
    Ok(BenchmarkCell {
        benchmark: benchmark.name,
        status: CellStatus::Ok,
        spearman_x100: Some(spearman_x100),
        pearson_x100: Some(overall.pearson_x100),
        n: overall.n,
        dropped: benchmark.dropped(),
        subsets,
    })
}

fn failed_cell(name: BenchmarkName, err: &Error) -> BenchmarkCell {
    BenchmarkCell {
        benchmark: name,
        status: CellStatus::Failed {
            kind: match err.kind() {
                ErrorKind::Config => "config",
                ErrorKind::Backend => "backend",
                ErrorKind::Data => "data",
            }
            .to_string(),
            message: err.to_string(),
        },
        spearman_x100: None,
        pearson_x100: None,
        n: 0,
        dropped: 0,
        subsets: Vec::new(),
    }
}

fn load_all(config: &RunConfig) -> Vec<(BenchmarkName, Result<Benchmark>)> {
    config
        .benchmarks
        .iter()
        .map(|&name| (name, config.data.load(name).map_err(Error::from)))
        .collect()
}

/// Scores every template on every benchmark. Per-benchmark failures are
/// recorded in the report rather than aborting the run.
pub fn eval_sts(config: &RunConfig, backend: &dyn Backend, store: Option<&Store>) -> Result<EvalReport> {
    config.validate()?;
    let runs: Vec<TemplateRun> = config.runs.iter().map(|r| r.resolved(backend)).collect::<Result<_>>()?;
    let embedder = Embedder::new(backend, store, config.batch_size);
    let loaded = load_all(config);
    let rows = runs
        .iter()
        .map(|run| score_run(&embedder, run, &loaded, config.aggregation))
        .collect();
    if let Some(store) = store {
        store.flush()?;
    }
    let (hits, misses) = embedder.cache_counts();
    log::info!("embedding cache: {hits} hits, {misses} misses");
    Ok(EvalReport {
        metadata: metadata(backend, &runs, config, &[]),
        rows,
    })
}

fn score_run(
    embedder: &Embedder<'_>,
    run: &TemplateRun,
    loaded: &[(BenchmarkName, Result<Benchmark>)],
    aggregation: Aggregation,
) -> TemplateRow {
    let cells: Vec<BenchmarkCell> = loaded
        .iter()
        .map(|(name, bench)| match bench {
            Ok(b) => score_benchmark(embedder, run, b, aggregation).unwrap_or_else(|e| failed_cell(*name, &e)),
            Err(e) => failed_cell(*name, e),
        })
        .collect();
    let scores: Option<Vec<f64>> = cells.iter().map(|c| c.spearman_x100).collect();
    let average_x100 = scores.map(|s| s.iter().sum::<f64>() / s.len() as f64);
    let mut flags = Vec::new();
    if run.template.capture().outside_sweep() {
        flags.push("mask count outside the 1-4 sweep".to_string());
    }
    TemplateRow {
        template_id: run.template.id().to_string(),
        display_name: run.template.display_name(),
        layer: run.spec.layer,
        rule: run.spec.rule,
        normalize: run.spec.normalize,
        cells,
        average_x100,
        flags,
    }
}

/// Alignment over STS-B test pairs with gold ≥ `threshold` and uniformity
/// over every STS-B test sentence, both on L2-normalized embeddings, next to
/// the average Spearman over the configured benchmarks.
pub fn eval_align_uniform(
    config: &RunConfig,
    backend: &dyn Backend,
    store: Option<&Store>,
    threshold: f64,
) -> Result<AlignUniformReport> {
    if !(0.0..=5.0).contains(&threshold) {
        return Err(DatasetError::ThresholdOutOfRange(threshold).into());
    }
    config.validate()?;
    let runs: Vec<TemplateRun> = config.runs.iter().map(|r| r.resolved(backend)).collect::<Result<_>>()?;
    let embedder = Embedder::new(backend, store, config.batch_size);
    let test = config.data.load(BenchmarkName::StsbTest)?;
    let all_pairs: Vec<_> = test.pairs().cloned().collect();
    let similar = filter_similar(&all_pairs, threshold)?;
    let loaded = load_all(config);

    let mut rows = Vec::new();
    for run in &runs {
        let normalized = run.with_normalize(true);
        let sentences: Vec<&str> = all_pairs
            .iter()
            .map(|p| p.sentence1.as_str())
            .chain(all_pairs.iter().map(|p| p.sentence2.as_str()))
            .collect();
        let vectors = embedder.embed(&normalized, &sentences)?;
        let uniform = uniformity(&vectors)?;

        let pair_sentences: Vec<&str> = similar
            .iter()
            .flat_map(|p| [p.sentence1.as_str(), p.sentence2.as_str()])
            .collect();
        let pair_vectors = embedder.embed(&normalized, &pair_sentences)?;
        let pairs: Vec<(&[f64], &[f64])> = pair_vectors
            .chunks_exact(2)
            .map(|c| (c[0].as_slice(), c[1].as_slice()))
            .collect();
        let align = alignment(&pairs)?;

        let sts = score_run(&embedder, run, &loaded, config.aggregation);
        rows.push(AlignUniformRow {
            template_id: run.template.id().to_string(),
            display_name: run.template.display_name(),
            layer: run.spec.layer,
            spearman_x100: sts.average_x100,
            alignment: align,
            uniformity: uniform,
            sentences: vectors.len(),
            aligned_pairs: pairs.len(),
        });
    }
    if let Some(store) = store {
        store.flush()?;
    }
    Ok(AlignUniformReport {
        metadata: metadata(backend, &runs, config, &[("threshold", threshold.to_string())]),
        threshold,
        normalized: true,
        rows,
    })
}

/// STS-B dev Spearman for every `(eos, mask count)` cell, eos-major.
pub fn sweep_mask_templates(
    config: &RunConfig,
    backend: &dyn Backend,
    store: Option<&Store>,
    counts: &[usize],
    eos_set: &[Eos],
    layer: i32,
) -> Result<SweepReport> {
    let desc = backend.descriptor();
    if !desc.is_mask_capable() {
        return Err(Error::BackendNotMaskCapable(desc.model_id.clone()));
    }
    if counts.is_empty() || eos_set.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one mask count and one terminal character".into(),
        ));
    }
    let dev = config.data.load(BenchmarkName::StsbDev)?;
    let embedder = Embedder::new(backend, store, config.batch_size);
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &eos in eos_set {
        for &mask_count in counts {
            let template = build_mask_template(MaskTemplateConfig { mask_count, eos })?;
            let run = TemplateRun::new(template, Some(layer), false).resolved(backend)?;
            let (spearman_x100, error) = match score_benchmark(&embedder, &run, &dev, Aggregation::All) {
                Ok(cell) => (cell.spearman_x100, None),
                Err(e @ Error::Backend(_)) => return Err(e),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                mask_count,
                eos: eos.label().to_string(),
                template_id: run.template.id().to_string(),
                spearman_x100,
                outside_sweep: run.template.capture().outside_sweep(),
                error,
            });
            runs.push(run);
        }
    }
    if let Some(store) = store {
        store.flush()?;
    }
    let mut sweep_config = config.clone();
    sweep_config.benchmarks = vec![BenchmarkName::StsbDev];
    Ok(SweepReport {
        metadata: metadata(backend, &runs, &sweep_config, &[]),
        rows,
    })
}

/// Token-level contribution analysis for one sentence.
pub fn analyze_tokens(
    backend: &dyn Backend,
    run: &TemplateRun,
    sentence: &str,
    core_words: &[&str],
    merge_words: bool,
) -> Result<ContributionReport> {
    let run = run.resolved(backend)?;
    let sentence = sentence.trim();
    let prompt = run.template.render(sentence)?;
    let mut request = HiddenStatesRequest::new(vec![prompt.clone()], vec![i64::from(run.spec.layer)]);
    request.want_offsets = true;
    let response = backend
        .fetch_hidden_states(&request)?
        .into_iter()
        .next()
        .ok_or_else(|| crate::backend::BackendError::ProtocolError("empty response".into()))?;
    let desc = backend.descriptor();
    let ctx = PoolingContext {
        model_id: &desc.model_id,
        mask_token: desc.mask_token.as_deref().unwrap_or(MASK_TOKEN),
        prompt: Some(&prompt),
    };
    let embedding = pool(&response, &run.spec, &run.template, &ctx)?;
    let span = run.template.sentence_span(sentence);
    let mut contributions = token_contributions(&response, &embedding, span)?;
    if merge_words {
        contributions = merge_by_offset(&contributions, sentence);
    }
    let classified = classify_tokens(&contributions, &word_spans(sentence, core_words));
    Ok(ContributionReport::new(
        sentence,
        run.template.id(),
        run.spec.layer,
        classified,
    ))
}

/// Parses a list of mask counts: `1..4`, `1..=4`, or `1,2,3`.
pub fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad mask count list `{s}`"));
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let counts: Vec<usize> = s
        .split(',')
        .map(|c| c.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if counts.contains(&0) {
        return Err(bad());
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_lists() {
        assert_eq!(parse_counts("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_counts("1..=2").unwrap(), vec![1, 2]);
        assert_eq!(parse_counts("3, 1").unwrap(), vec![3, 1]);
        assert!(parse_counts("0..2").is_err());
        assert!(parse_counts("a").is_err());
        assert!(parse_counts("4..1").is_err());
    }
}
