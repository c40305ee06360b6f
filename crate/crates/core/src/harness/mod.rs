//! Command implementations behind the `concept-regions` binary.
//!
//! Every command reads a [`RunConfig`], writes only below the configured
//! output (or dataset) directory, and produces byte-identical JSON for the
//! same configuration and seed.

mod config;
pub mod plot;

pub use config::{apply_override, DatasetConfig, ModelConfig, RunConfig, VlmConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::explain::{
    contribution_from_weights, explain_concept, write_raw_map, write_region_png, ConceptExplanation,
};
use crate::learner::{train_translator, TrainReport, TranslatorCheckpoint, TranslatorNetwork};
use crate::metrics::{
    evaluate_candidates, evaluate_region, ideal_iou, random_iou, random_region, threshold_curve,
    EvalMode, RegionEvalResult,
};
use crate::model::{accuracy, train_classifier, ClassifierTrainReport, Classifier, ToyCnn};
use crate::synth::{self, build_toy_classifier, build_toy_vlm, derive_seed, Dataset, ToyVlm};
use crate::vlm::{embed, Category, ConceptText, EmbedInput, Embedding, VisionLanguageModel};
use crate::{par, Error, Image, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates and writes the synthetic dataset.
pub fn cmd_synth(cfg: &RunConfig) -> Result<synth::Manifest> {
    let data = synth::generate_dataset(cfg.dataset.count, cfg.seed, cfg.dataset.class_rule)?;
    synth::write_dataset(&data, &cfg.dataset.dir)
}

/// The configured concept set: an explicit file, else the dataset's, else
/// the benchmark defaults.
pub fn load_concepts(cfg: &RunConfig) -> Result<Vec<ConceptText>> {
    if let Some(p) = &cfg.concept_set {
        return crate::vlm::load_concept_set(p);
    }
    let p = cfg.dataset.dir.join("concepts.json");
    if p.is_file() {
        return crate::vlm::load_concept_set(&p);
    }
    Ok(synth::default_concepts())
}

/// Toy VLM whose vocabulary is the benchmark concepts followed by any extra
/// labels from `concepts`.
pub fn toy_vlm_for(cfg: &RunConfig, concepts: &[ConceptText]) -> Result<ToyVlm> {
    let mut vocab: Vec<String> = synth::default_concepts().into_iter().map(|c| c.label).collect();
    for c in concepts {
        if !vocab.contains(&c.label) {
            vocab.push(c.label.clone());
        }
    }
    build_toy_vlm(&vocab, cfg.seed, cfg.vlm.epsilon)
}

pub fn load_classifier(path: &Path) -> Result<ToyCnn> {
    let model: ToyCnn = read_json(path)?;
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub num_parameters: usize,
    pub report: ClassifierTrainReport,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset_content_hash: String,
    pub classifier: ClassifierSummary,
    pub translator: TrainReport,
    pub translator_config_hash: String,
}

/// Fits the classifier on the training split, then the translator against
/// the toy VLM, and writes both checkpoints plus `train_report.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRunReport> {
    let cfg = cfg.resolved();
    cfg.require_dataset()?;
    let manifest: synth::Manifest = read_json(&cfg.dataset.dir.join("manifest.json"))?;
    let data = synth::load_dataset(&cfg.dataset.dir)?;
    let concepts = load_concepts(&cfg)?;
    create_dir(&cfg.out)?;
    let (classifier, summary) = fit_classifier(&cfg, &data)?;
    std::fs::write(
        cfg.classifier_path(),
        serde_json::to_string(&classifier).expect("model serializes"),
    )
    .map_err(|e| Error::io(cfg.classifier_path(), e))?;
    let vlm = toy_vlm_for(&cfg, &concepts)?;
    let (network, mut report, input_layers) = fit_translator(&cfg, &classifier, &vlm, &data, &concepts)?;
    let ck = TranslatorCheckpoint::new(network, &cfg.translator, input_layers);
    ck.save(&cfg.translator_path())?;
    report.checkpoint = Some("translator.json".into());
    let out = TrainRunReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        dataset_content_hash: manifest.content_hash,
        classifier: summary,
        translator: report,
        translator_config_hash: cfg.translator.hash(),
    };
    write_json(&cfg.out.join("train_report.json"), &out)?;
    Ok(out)
}

pub fn fit_classifier(cfg: &RunConfig, data: &Dataset) -> Result<(ToyCnn, ClassifierSummary)> {
    let mut classifier = build_toy_classifier(&cfg.classifier_spec())?;
    let report = train_classifier(
        &mut classifier,
        &data.images(&data.split.train),
        &data.labels(&data.split.train),
        &cfg.model.train,
    )?;
    let score = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        accuracy(&classifier, &data.images(idx), &data.labels(idx))
    };
    let summary = ClassifierSummary {
        num_parameters: classifier.num_parameters(),
        report,
        val_accuracy: score(&data.split.val)?,
        test_accuracy: score(&data.split.test)?,
    };
    Ok((classifier, summary))
}

pub fn fit_translator(
    cfg: &RunConfig,
    classifier: &dyn Classifier,
    vlm: &dyn VisionLanguageModel,
    data: &Dataset,
    concepts: &[ConceptText],
) -> Result<(TranslatorNetwork, TrainReport, Vec<crate::model::LayerSlice>)> {
    let images = data.images(&data.split.train);
    let (network, report) = train_translator(classifier, vlm, &images, concepts, &cfg.translator)?;
    let layers = classifier
        .forward(&images[0])?
        .translator_input(cfg.translator.multi_layer)
        .layer_offsets;
    Ok((network, report, layers))
}

fn text_embeddings(vlm: &dyn VisionLanguageModel, concepts: &[ConceptText]) -> Result<Vec<Embedding>> {
    concepts.iter().map(|c| embed(vlm, EmbedInput::Text(c))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionArtifacts {
    pub png: String,
    pub sidecar: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub label: String,
    pub category: Category,
    pub score: f64,
    pub best_layer: usize,
    pub association_scores: Vec<LayerScore>,
    /// Contribution to the predicted class at `best_layer`.
    pub contribution: f64,
    pub region: RegionArtifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub class_index: usize,
    pub class_name: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedContribution {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub schema_version: u32,
    pub image_id: String,
    pub prediction: PredictionRecord,
    pub concepts: Vec<ConceptRecord>,
    /// By descending absolute value.
    pub contributions: Vec<RankedContribution>,
    pub masking_curve_plot: String,
    pub contribution_plot: String,
    pub warnings: Vec<String>,
}

/// Loaded checkpoints ready for explanation.
pub struct Explainer {
    pub classifier: ToyCnn,
    pub translator: TranslatorNetwork,
    pub multi_layer: bool,
    pub vlm: ToyVlm,
    pub concepts: Vec<ConceptText>,
    pub texts: Vec<Embedding>,
}

impl Explainer {
    pub fn new(
        classifier: ToyCnn,
        translator: TranslatorNetwork,
        multi_layer: bool,
        vlm: ToyVlm,
        concepts: Vec<ConceptText>,
    ) -> Result<Self> {
        let texts = text_embeddings(&vlm, &concepts)?;
        Ok(Self {
            classifier,
            translator,
            multi_layer,
            vlm,
            concepts,
            texts,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        let classifier = load_classifier(&cfg.classifier_path())?;
        let ck = TranslatorCheckpoint::load(&cfg.translator_path())?;
        let concepts = load_concepts(&cfg)?;
        let vlm = toy_vlm_for(&cfg, &concepts)?;
        Self::new(classifier, ck.network, ck.multi_layer, vlm, concepts)
    }

    pub fn explain(
        &self,
        session: &crate::model::Session,
        concept: usize,
        mask_k: usize,
    ) -> Result<ConceptExplanation> {
        explain_concept(
            &self.classifier,
            session,
            &self.translator,
            &self.concepts[concept],
            &self.texts[concept],
            self.multi_layer,
            mask_k,
        )
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Explains one image: per-concept region artifacts, association scores,
/// contributions and plots under `<out>/explain/<image stem>/`.
pub fn cmd_explain(cfg: &RunConfig, image_path: &Path, filter: &[String]) -> Result<ExplanationRecord> {
    let cfg = cfg.resolved();
    let ex = Explainer::load(&cfg)?;
    let image = read_model_image(&ex.classifier, image_path)?;
    let image_id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let mut warnings = Vec::new();
    let selected: Vec<usize> = if filter.is_empty() {
        (0..ex.concepts.len()).collect()
    } else {
        let mut sel = Vec::new();
        for f in filter {
            match ex.concepts.iter().position(|c| &c.label == f) {
                Some(i) if !sel.contains(&i) => sel.push(i),
                Some(_) => {}
                None => warnings.push(format!("unknown concept {f:?} skipped")),
            }
        }
        sel
    };
    let dir = cfg.out.join("explain").join(file_safe(&image_id));
    create_dir(&dir)?;
    let session = ex.classifier.forward(&image)?;
    let pred = session.prediction().clone();
    let class_names = synth::class_names();
    let rows = par::with_jobs(cfg.jobs, || {
        par::map(&selected, |&ci| -> Result<(ConceptRecord, Vec<f64>, Vec<f64>)> {
            let e = ex.explain(&session, ci, cfg.mask_k)?;
            let best = e.candidate(e.best_layer).expect("best layer is a candidate");
            let w = e
                .weights
                .iter()
                .find(|w| w.layer_index == e.best_layer)
                .expect("weights per layer");
            let (contribution, _) = contribution_from_weights(
                &ex.classifier,
                &session,
                &ex.concepts[ci],
                w,
                pred.predicted_class,
                cfg.mask_k,
            )?;
            let stem = format!("region_{}", file_safe(&ex.concepts[ci].label));
            let region = RegionArtifacts {
                png: format!("{stem}.png"),
                sidecar: format!("{stem}.json"),
                raw: format!("{stem}.bin"),
            };
            let sidecar = write_region_png(best, &dir.join(&region.png))?;
            write_json(&dir.join(&region.sidecar), &sidecar)?;
            write_raw_map(best.upsampled.as_ref().unwrap_or(&best.map).view(), &dir.join(&region.raw))?;
            let curve = &e.curves[e.candidates.iter().position(|c| c.layer_index == e.best_layer).expect("present")];
            Ok((
                ConceptRecord {
                    label: ex.concepts[ci].label.clone(),
                    category: ex.concepts[ci].category,
                    score: e.score,
                    best_layer: e.best_layer,
                    association_scores: e
                        .association_scores()
                        .into_iter()
                        .map(|(layer_index, score)| LayerScore { layer_index, score })
                        .collect(),
                    contribution: contribution.value,
                    region,
                },
                curve.x.clone(),
                curve.y.clone(),
            ))
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = rows
        .iter()
        .map(|(r, _, _)| format!("{} (layer {})", r.label, r.best_layer))
        .collect();
    let series: Vec<plot::Series<'_>> = rows
        .iter()
        .zip(&names)
        .map(|((_, x, y), name)| plot::Series {
            name,
            x,
            y,
            dashed: false,
        })
        .collect();
    let curve_svg = plot::line_plot(
        &format!("{image_id}: concept score decrease"),
        "fraction of top-K channels masked",
        "score decrease",
        &series,
    );
    let concepts: Vec<ConceptRecord> = rows.into_iter().map(|(r, _, _)| r).collect();
    let mut contributions: Vec<RankedContribution> = concepts
        .iter()
        .map(|c| RankedContribution {
            label: c.label.clone(),
            value: c.contribution,
        })
        .collect();
    contributions.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
    let class_name = class_names
        .get(pred.predicted_class)
        .cloned()
        .unwrap_or_else(|| pred.predicted_class.to_string());
    let bars: Vec<(String, f64)> = contributions.iter().map(|c| (c.label.clone(), c.value)).collect();
    let bar_svg = plot::bar_plot(&format!("contributions to {class_name}"), "contribution", &bars);
    let record = ExplanationRecord {
        schema_version: SCHEMA_VERSION,
        image_id,
        prediction: PredictionRecord {
            class_index: pred.predicted_class,
            class_name,
            probabilities: pred.probabilities.clone(),
        },
        concepts,
        contributions,
        masking_curve_plot: "masking_curves.svg".into(),
        contribution_plot: "contributions.svg".into(),
        warnings,
    };
    std::fs::write(dir.join(&record.masking_curve_plot), curve_svg)
        .map_err(|e| Error::io(dir.join("masking_curves.svg"), e))?;
    std::fs::write(dir.join(&record.contribution_plot), bar_svg)
        .map_err(|e| Error::io(dir.join("contributions.svg"), e))?;
    write_json(&dir.join("explanation.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: EvalMode,
    pub layer_index: usize,
    pub result: RegionEvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub concept: String,
    pub category: Category,
    pub mask_fraction: f64,
    pub score: f64,
    pub association_scores: Vec<LayerScore>,
    pub results: Vec<ModeResult>,
    pub random: RegionEvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub image_id: String,
    pub concept: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub nra: f64,
    pub epg: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub per_category: BTreeMap<Category, CategoryStats>,
    /// Means of the per-category means.
    pub avg_nra: f64,
    pub avg_epg: f64,
    pub avg_hit_rate: f64,
    /// Hit rate over all samples regardless of category.
    pub pooled_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub k: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub count: usize,
    pub by_reason: BTreeMap<String, usize>,
    pub entries: Vec<SkippedSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub split: String,
    pub mask_k: usize,
    pub grid_len: usize,
    pub modes: Vec<ModeSummary>,
    pub random_baseline: Summary,
    pub skipped: SkipReport,
    pub threshold_plots: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn mode(&self, mode: EvalMode) -> Option<&Summary> {
        self.modes.iter().find(|m| m.mode == mode).map(|m| &m.summary)
    }
}

/// Per-category means and the mean of those means.
pub fn category_means(values: &[(Category, f64)]) -> (BTreeMap<Category, f64>, f64) {
    let mut acc: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
    for &(c, v) in values {
        let e = acc.entry(c).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let means: BTreeMap<Category, f64> = acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let avg = if means.is_empty() {
        f64::NAN
    } else {
        means.values().sum::<f64>() / means.len() as f64
    };
    (means, avg)
}

pub fn summarize(rows: &[(Category, RegionEvalResult)]) -> Summary {
    let pick = |f: fn(&RegionEvalResult) -> f64| -> Vec<(Category, f64)> {
        rows.iter().map(|(c, r)| (*c, f(r))).collect()
    };
    let (nra, avg_nra) = category_means(&pick(|r| r.nra));
    let (epg, avg_epg) = category_means(&pick(|r| r.epg));
    let (hit, avg_hit_rate) = category_means(&pick(|r| f64::from(u8::from(r.nra > 0.5))));
    let mut per_category = BTreeMap::new();
    for (c, v) in &nra {
        per_category.insert(
            *c,
            CategoryStats {
                count: rows.iter().filter(|(k, _)| k == c).count(),
                nra: *v,
                epg: epg[c],
                hit_rate: hit[c],
            },
        );
    }
    let pooled_hit_rate = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().filter(|(_, r)| r.nra > 0.5).count() as f64 / rows.len() as f64
    };
    Summary {
        count: rows.len(),
        per_category,
        avg_nra,
        avg_epg,
        avg_hit_rate,
        pooled_hit_rate,
    }
}

enum Outcome {
    Done(Box<SampleRecord>),
    Skipped(SkippedSample),
}

/// Evaluates every (image, concept) pair of `indices` whose concept mask is
/// non-empty. Pairs with an absent concept or an undefined metric go to the
/// skip report.
pub fn evaluate_indices(ex: &Explainer, data: &Dataset, indices: &[usize], cfg: &RunConfig) -> Result<EvalReport> {
    let layers = ex.classifier.capture_points().len();
    let k = cfg.eval_k.unwrap_or(layers);
    let grid = &cfg.threshold_grid;
    let per_image = par::with_jobs(cfg.jobs, || {
        par::map(indices, |&i| -> Result<Vec<Outcome>> {
            let sample = &data.samples[i];
            let session = ex.classifier.forward(&sample.image)?;
            let mut out = Vec::new();
            for (ci, concept) in ex.concepts.iter().enumerate() {
                let skip = |reason: String| {
                    Outcome::Skipped(SkippedSample {
                        image_id: sample.id.clone(),
                        concept: concept.label.clone(),
                        reason,
                    })
                };
                let Some(mask) = sample.masks.get(&concept.label) else {
                    out.push(skip("concept absent (empty mask)".into()));
                    continue;
                };
                let e = ex.explain(&session, ci, cfg.mask_k)?;
                let mut results = Vec::with_capacity(cfg.modes.len());
                let mut undefined = None;
                for &mode in &cfg.modes {
                    match evaluate_candidates(&e.candidates, mask.view(), mode, k, grid) {
                        Ok((result, idx)) => results.push(ModeResult {
                            mode,
                            layer_index: e.candidates[idx].layer_index,
                            result,
                        }),
                        Err(Error::UndefinedMetric(m)) => {
                            undefined = Some(m);
                            break;
                        }
                        Err(err) => return Err(err),
                    }
                }
                if let Some(m) = undefined {
                    out.push(skip(format!("undefined metric: {m}")));
                    continue;
                }
                let (h, w) = mask.dim();
                let noise = random_region(h, w, derive_seed(cfg.seed, (i * 1024 + ci) as u64));
                let random = evaluate_region(noise.view(), mask.view(), grid)?;
                out.push(Outcome::Done(Box::new(SampleRecord {
                    image_id: sample.id.clone(),
                    concept: concept.label.clone(),
                    category: concept.category,
                    mask_fraction: mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64,
                    score: e.score,
                    association_scores: e
                        .association_scores()
                        .into_iter()
                        .map(|(layer_index, score)| LayerScore { layer_index, score })
                        .collect(),
                    results,
                    random,
                })));
            }
            Ok(out)
        })
    });
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    for outcomes in per_image {
        for o in outcomes? {
            match o {
                Outcome::Done(r) => samples.push(*r),
                Outcome::Skipped(s) => entries.push(s),
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no evaluable (image, concept) samples".into()));
    }
    let modes = cfg
        .modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| ModeSummary {
            mode,
            k: if mode == EvalMode::BestNraOfTopK { k } else { 1 },
            summary: summarize(
                &samples
                    .iter()
                    .map(|s| (s.category, s.results[mi].result))
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    let random_baseline = summarize(&samples.iter().map(|s| (s.category, s.random)).collect::<Vec<_>>());
    let mut by_reason = BTreeMap::new();
    for e in &entries {
        let key = e.reason.split(':').next().unwrap_or("").to_string();
        *by_reason.entry(key).or_insert(0) += 1;
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        split: "test".into(),
        mask_k: cfg.mask_k,
        grid_len: grid.len(),
        modes,
        random_baseline,
        skipped: SkipReport {
            count: entries.len(),
            by_reason,
            entries,
        },
        threshold_plots: Vec::new(),
        samples,
    })
}

fn threshold_plot(ex: &Explainer, data: &Dataset, record: &SampleRecord, cfg: &RunConfig) -> Result<String> {
    let sample = data
        .samples
        .iter()
        .find(|s| s.id == record.image_id)
        .expect("record comes from the dataset");
    let ci = ex
        .concepts
        .iter()
        .position(|c| c.label == record.concept)
        .expect("record concept is configured");
    let mask = &sample.masks[&record.concept];
    let session = ex.classifier.forward(&sample.image)?;
    let e = ex.explain(&session, ci, cfg.mask_k)?;
    let chosen = &record.results[0];
    let cand = e
        .candidate(chosen.layer_index)
        .expect("chosen layer is a candidate");
    let (h, w) = mask.dim();
    let region: Array2<f64> = match &cand.upsampled {
        Some(u) if u.dim() == (h, w) => u.clone(),
        _ => crate::explain::bilinear_upsample(cand.map.view(), h, w),
    };
    let grid = &cfg.threshold_grid;
    let xs: Vec<f64> = grid.iter().map(|n| n / 100.0).collect();
    let m = record.mask_fraction;
    let ideal: Vec<f64> = xs.iter().map(|&a| ideal_iou(a, m)).collect();
    let rnd: Vec<f64> = xs.iter().map(|&a| random_iou(a, m)).collect();
    let ious = if region.iter().any(|&v| v > 0.0) {
        threshold_curve(region.view(), mask.view(), grid)?.ious
    } else {
        vec![0.0; grid.len()]
    };
    let name = format!("layer {} (NRA {:.3})", chosen.layer_index, chosen.result.nra);
    Ok(plot::line_plot(
        &format!("{} / {}", record.image_id, record.concept),
        "top-n% threshold",
        "IoU",
        &[
            plot::Series { name: &name, x: &xs, y: &ious, dashed: false },
            plot::Series { name: "ideal", x: &xs, y: &ideal, dashed: true },
            plot::Series { name: "random", x: &xs, y: &rnd, dashed: true },
        ],
    ))
}

/// Evaluates the trained checkpoints on the test split and writes
/// `<out>/eval/results.json` plus threshold-curve plots.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    cfg.require_dataset()?;
    let ex = Explainer::load(&cfg)?;
    let data = synth::load_dataset(&cfg.dataset.dir)?;
    let mut report = evaluate_indices(&ex, &data, &data.split.test, &cfg)?;
    let dir = cfg.out.join("eval");
    let plots = dir.join("plots");
    create_dir(&plots)?;
    for record in report.samples.iter().take(cfg.plot_samples) {
        let svg = threshold_plot(&ex, &data, record, &cfg)?;
        let rel = format!(
            "plots/{}_{}.svg",
            file_safe(&record.image_id),
            file_safe(&record.concept)
        );
        std::fs::write(dir.join(&rel), svg).map_err(|e| Error::io(dir.join(&rel), e))?;
        report.threshold_plots.push(rel);
    }
    write_json(&dir.join("results.json"), &report)?;
    Ok(report)
}

/// Reads an image and checks it against the classifier input shape.
pub fn read_model_image(model: &dyn Classifier, path: &Path) -> Result<Image> {
    let img = synth::read_png_image(path)?;
    let want = model.input_shape();
    if img.shape() != want {
        return Err(Error::InputShape {
            expected: format!("{want:?}"),
            got: format!("{:?}", img.shape()),
        });
    }
    Ok(img)
}

pub fn explain_dir(cfg: &RunConfig, image_id: &str) -> PathBuf {
    cfg.out.join("explain").join(file_safe(image_id))
}
