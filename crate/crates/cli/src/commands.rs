use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use distillseg_core::data::{build_manifest, reference_split_counts, split_spec_by_counts, Manifest, Split};
use distillseg_core::decoder::load_checkpoint;
use distillseg_core::gateway::{open_adapter, EmbeddingSource, EmbeddingStore};
use distillseg_core::metrics::{comparison_table, evaluate_model};
use distillseg_core::plot::emit_curve_plot;
use distillseg_core::prompt::{latest_by_sample, simulate_annotation, AnnotationLog, AnnotationRecord};
use distillseg_core::synth::generate_synthetic_corpus;
use distillseg_core::trainer::{ids_to_annotate, run_curve, select_for_budget, train_decoder, CurveReport, TrainHistory};
use distillseg_core::{Error, Result};
use distillseg_service::{AppState, ServiceConfig};

use crate::run_config::{sidecar_path, Artifact, RunConfig, CACHE_ENV};

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open_manifest(config: &RunConfig) -> Result<Manifest> {
    Manifest::load(&config.paths.manifest())
}

fn open_store(config: &RunConfig, manifest: Manifest) -> Result<EmbeddingStore> {
    let model = open_adapter(&config.adapter)?;
    Ok(EmbeddingStore::new(Arc::new(manifest), Arc::new(Mutex::new(model)), config.cache()?))
}

/// Records for `ids`, simulating and logging whichever are not yet annotated.
fn ensure_annotations(config: &RunConfig, store: &EmbeddingStore, ids: &[String]) -> Result<(Vec<AnnotationRecord>, usize)> {
    let log = AnnotationLog::open(config.paths.annotations())?;
    let mut by_id = latest_by_sample(&log.records()?);
    let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        log::info!("simulating {} annotations in {:?} mode", missing.len(), config.annotation_mode);
        for record in simulate_annotation(store, &missing, config.annotation_mode, &config.simulation)? {
            log.append(&record, None)?;
            by_id.insert(record.sample_id.clone(), record);
        }
    }
    let records = ids.iter().filter_map(|id| by_id.get(id).cloned()).collect();
    Ok((records, missing.len()))
}

#[derive(Serialize)]
struct CorpusSummary {
    manifest: PathBuf,
    samples: usize,
    splits: BTreeMap<Split, usize>,
}

fn save_manifest(config: &RunConfig, manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.save(path)?;
    let summary = CorpusSummary {
        manifest: path.to_path_buf(),
        samples: manifest.len(),
        splits: manifest.split_counts().clone(),
    };
    let artifact = Artifact::new(config, summary);
    artifact.write(&sidecar_path(path))?;
    print_json(&artifact.result)
}

pub fn ingest(config: &RunConfig, images: &Path, masks: &Path, splits: Option<&Path>) -> Result<()> {
    let spec: BTreeMap<String, Split> = match splits {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => {
            let mut ids = Vec::new();
            for entry in std::fs::read_dir(images).map_err(|e| Error::io(images, e))? {
                let path = entry.map_err(|e| Error::io(images, e))?.path();
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            ids.sort();
            let (n_train, n_val) = reference_split_counts(ids.len());
            split_spec_by_counts(&ids, n_train, n_val, config.seed)?
        }
    };
    let manifest = build_manifest(images, masks, &spec)?;
    save_manifest(config, &manifest, &config.paths.manifest())
}

pub fn synth(config: &RunConfig, n: usize, size: u32, out: &Path) -> Result<()> {
    let manifest = generate_synthetic_corpus(n, config.seed, size, out)?;
    // sample paths are relative to `out`, so the manifest must live there
    save_manifest(config, &manifest, &out.join("manifest.json"))
}

#[derive(Serialize)]
struct EmbedSummary {
    encoder_digest: String,
    cache_dir: PathBuf,
    embedded: usize,
}

pub fn embed(config: &RunConfig) -> Result<()> {
    let store = open_store(config, open_manifest(config)?)?;
    let cache_dir = store
        .cache()
        .map(|c| c.dir().to_path_buf())
        .ok_or_else(|| Error::InvalidConfig(format!("no cache directory: pass --cache or set {CACHE_ENV}")))?;
    let ids: Vec<String> = store.manifest().samples().iter().map(|s| s.id.clone()).collect();
    for id in &ids {
        store.embedding(id)?;
    }
    print_json(&Artifact::new(
        config,
        EmbedSummary {
            encoder_digest: store.encoder_digest()?,
            cache_dir,
            embedded: ids.len(),
        },
    ))
}

#[derive(Serialize)]
struct SimulateSummary {
    log: PathBuf,
    requested: usize,
    simulated: usize,
}

pub fn simulate(config: &RunConfig, all: bool) -> Result<()> {
    let manifest = open_manifest(config)?;
    let train_ids = manifest.ids(Split::Train);
    let ids = if all { train_ids } else { ids_to_annotate(&config.train, &train_ids)? };
    let store = open_store(config, manifest)?;
    let (records, simulated) = ensure_annotations(config, &store, &ids)?;
    print_json(&Artifact::new(
        config,
        SimulateSummary {
            log: config.paths.annotations(),
            requested: records.len(),
            simulated,
        },
    ))
}

pub fn serve(config: &RunConfig, addr: SocketAddr) -> Result<()> {
    let store = Arc::new(open_store(config, open_manifest(config)?)?);
    let log = AnnotationLog::open(config.paths.annotations())?;
    let service_config = ServiceConfig {
        budgets: config.train.budgets.clone(),
        ..ServiceConfig::default()
    };
    let state = AppState::new(store, log, service_config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::InvalidArgument(format!("tokio runtime: {e}")))?;
    runtime
        .block_on(distillseg_service::serve(state, addr))
        .map_err(|e| Error::InvalidArgument(format!("serve on {addr}: {e}")))
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    budget: usize,
    sample_ids: Vec<String>,
    history: TrainHistory,
}

pub fn train(mut config: RunConfig, budget: usize, out: Option<PathBuf>) -> Result<()> {
    config.train.validate()?;
    let manifest = open_manifest(&config)?;
    // budget is checked before any model work
    let ids = select_for_budget(&config.train, &manifest.ids(Split::Train), budget)?;
    let store = open_store(&config, manifest)?;
    let (records, _) = ensure_annotations(&config, &store, &ids)?;
    let (params, history) = train_decoder(&config.train, &records, &store)?;
    config.decoder = Some(params.config().clone());
    let out = out.unwrap_or_else(|| config.paths.data.join(format!("decoder-{budget}.ckpt")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    params.save_checkpoint(&out, config.train.epochs)?;
    let artifact = Artifact::new(
        &config,
        TrainSummary {
            checkpoint: out.clone(),
            budget,
            sample_ids: ids,
            history,
        },
    );
    artifact.write(&sidecar_path(&out))?;
    println!(
        "trained budget {budget}: final loss {:.6}, checkpoint {}",
        artifact.result.history.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

pub fn curve(mut config: RunConfig, out: Option<PathBuf>) -> Result<()> {
    config.train.validate()?;
    let manifest = open_manifest(&config)?;
    let train_ids = manifest.ids(Split::Train);
    let ids = ids_to_annotate(&config.train, &train_ids)?;
    let store = open_store(&config, manifest)?;
    let (records, _) = ensure_annotations(&config, &store, &ids)?;
    let report = run_curve(&config.train, store.manifest(), &records, &store)?;
    let in_channels = store.model().lock().unwrap_or_else(|e| e.into_inner()).embedding_shape()[0];
    let (w, h) = records[0].mask.dims();
    config.decoder = Some(config.train.decoder_config(in_channels, w, h));
    let out = out.unwrap_or_else(|| config.paths.data.join("curve.json"));
    Artifact::new(&config, &report).write(&out)?;
    for e in &report.entries {
        println!(
            "budget {:>4}: mean image IoU {:.4}, micro F1 {:.4}",
            e.budget, e.metrics.mean_image_iou, e.metrics.micro_f1
        );
    }
    println!("curve report written to {}", out.display());
    Ok(())
}

pub fn eval(mut config: RunConfig, checkpoint: &Path, split: Split, out: Option<PathBuf>) -> Result<()> {
    let (params, _epoch) = load_checkpoint(checkpoint)?;
    let store = open_store(&config, open_manifest(&config)?)?;
    let report = evaluate_model(&params, store.manifest(), &store, split, config.train.tau)?;
    config.decoder = Some(params.config().clone());
    let out = out.unwrap_or_else(|| config.paths.data.join(format!("eval-{split}.json")));
    Artifact::new(&config, &report).write(&out)?;
    print!("{}", comparison_table(&checkpoint.display().to_string(), &report));
    println!("evaluation written to {}", out.display());
    Ok(())
}

pub fn plot(config: &RunConfig, curve: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let curve = curve.unwrap_or_else(|| config.paths.data.join("curve.json"));
    let text = std::fs::read_to_string(&curve).map_err(|e| Error::io(&curve, e))?;
    let artifact: Artifact<CurveReport> = serde_json::from_str(&text)?;
    let out = out.unwrap_or_else(|| curve.with_extension("svg"));
    let csv = emit_curve_plot(&artifact.result, &out)?;

    // provenance is that of the curve run, not of this invocation
    let provenance = Artifact::new(&artifact.run_config, csv.clone());
    let svg = std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?;
    let meta = format!(
        "<metadata><![CDATA[{}]]></metadata>\n",
        serde_json::to_string(&provenance)?
    );
    let split_at = svg.find('\n').map_or(svg.len(), |i| i + 1);
    let svg = format!("{}{meta}{}", &svg[..split_at], &svg[split_at..]);
    std::fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
    provenance.write(&sidecar_path(&csv))?;
    println!("plot written to {} and {}", out.display(), csv.display());
    Ok(())
}
