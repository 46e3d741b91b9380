//! The pipeline verbs: segment, eval, pseudo-masks and dump.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hiseg_core::dataset::write_index_png;
use hiseg_core::fixture::Fixture;
use hiseg_core::fusion::HeadPolicy;
use hiseg_core::harness::{evaluate, EvalMode, EvalOptions};
use hiseg_core::preprocess::prepare_encoder_input;
use hiseg_core::replay::{sd_attention_to_fixture, scores_to_fixture, trace_to_fixtures, ReplayStore};
use hiseg_core::report::RunManifest;
use hiseg_core::timing::StageTimes;
use hiseg_core::{Error, Result};
use ndarray::{s, Array2, ArrayView1};

use crate::args::{CategoryArgs, Common, DataArgs, DumpKind};
use crate::render;
use crate::setup::{apply_data_args, categories, image_id, load_image, out_dir, resolve_config, Models, Need};

fn stage_millis(times: &StageTimes, text_ms: f64) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = times.0.iter().map(|(s, v)| (s.name().to_string(), *v)).collect();
    m.insert("text_embedding".into(), text_ms);
    m
}

pub fn segment(common: &Common, image: &Path, cats: &CategoryArgs, save_scores: bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let set = categories(cats, &cfg)?;
    let img = load_image(image)?;
    let models = Models::for_pipeline(&cfg)?;
    let (pipeline, text_ms) = models.pipeline(&cfg, set)?;
    let id = image_id(image);
    let seg = pipeline.run(&id, &img, None)?;

    let out = out_dir(&cfg)?;
    let labels_path = out.join(format!("{id}.png"));
    write_index_png(&labels_path, &seg.labels)?;
    render::save(&render::overlay(&img, &seg.labels, 0.5)?, &out.join(format!("{id}_overlay.png")))?;
    if save_scores {
        let store = ReplayStore::new(out.join("replay"));
        store.write_scores(&id, &seg.coarse)?;
        if let Some(att) = &seg.sd_attention {
            store.write_sd_attention(&id, att)?;
        }
    }
    let mut manifest = RunManifest::new("segment", cfg);
    manifest.weight_checksums = models.checksums;
    manifest.timings_ms = stage_millis(&seg.times, text_ms);
    manifest.write(&out.join(format!("{id}.manifest.json")))?;

    let names = pipeline.categories().label_names();
    let present: Vec<&str> = seg
        .labels
        .present_labels()
        .into_iter()
        .filter_map(|l| names.get(l as usize).map(String::as_str))
        .collect();
    println!("{}: {}", labels_path.display(), present.join(", "));
    Ok(())
}

pub fn eval(common: &Common, data: &DataArgs, manifest: Option<&Path>, save_predictions: bool, mode: EvalMode) -> Result<()> {
    let base = match manifest {
        Some(_) if common.config.is_some() => {
            return Err(Error::config("pass either --config or --manifest, not both"));
        }
        Some(p) => Some(RunManifest::load(p)?.config),
        None => None,
    };
    let mut cfg = resolve_config(common, base)?;
    apply_data_args(&mut cfg, data);
    if mode == EvalMode::PseudoMasks && cfg.dataset.split.is_none() {
        cfg.dataset.split = Some("train".into());
    }
    cfg.validate()?;
    let spec = cfg.dataset_spec()?;
    let dataset = spec.open()?;
    let set = spec.id.categories(cfg.templates)?;
    let models = Models::for_pipeline(&cfg)?;
    let (pipeline, text_ms) = models.pipeline(&cfg, set)?;

    let out = out_dir(&cfg)?;
    let predictions_dir = match mode {
        EvalMode::PseudoMasks => Some(out.join("masks")),
        EvalMode::Full => save_predictions.then(|| out.join("predictions")),
    };
    let opts = EvalOptions {
        mode,
        limit: cfg.eval.limit,
        workers: cfg.eval.workers,
        predictions_dir,
        image_threshold: cfg.eval.image_threshold,
    };
    log::info!("evaluating {} ({} samples)", spec.id, opts.limit.map_or(dataset.len(), |l| l.min(dataset.len())));
    let outcome = evaluate(&pipeline, &dataset, &opts)?;
    outcome.report.write(&out)?;

    let command = match mode {
        EvalMode::Full => "eval",
        EvalMode::PseudoMasks => "pseudo-masks",
    };
    let mut manifest = RunManifest::new(command, cfg);
    manifest.weight_checksums = models.checksums;
    manifest.timings_ms = outcome.median_millis();
    manifest.timings_ms.insert("text_embedding".into(), text_ms);
    manifest.metrics = Some(outcome.report.clone());
    manifest.write(&out.join("manifest.json"))?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

/// Index of the cell of a `rows x cols` grid covering pixel `(x, y)`.
fn cell(p: (u32, u32), size: (u32, u32), grid: (usize, usize)) -> usize {
    let r = (p.1 as usize * grid.0 / size.1 as usize).min(grid.0 - 1);
    let c = (p.0 as usize * grid.1 / size.0 as usize).min(grid.1 - 1);
    r * grid.1 + c
}

fn row_map(row: ArrayView1<'_, f32>, grid: (usize, usize)) -> Array2<f32> {
    row.to_owned().into_shape_with_order(grid).expect("row covers the grid")
}

fn save_fixture(f: &Fixture, path: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f.save(path)?;
    written.push(path.to_path_buf());
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn dump(common: &Common, kind: DumpKind, image: &Path, cats: &CategoryArgs, points: &[(u32, u32)]) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let img = load_image(image)?;
    let id = image_id(image);
    let size = img.dimensions();
    let points: Vec<(u32, u32)> = if points.is_empty() { vec![(size.0 / 2, size.1 / 2)] } else { points.to_vec() };
    if let Some(p) = points.iter().find(|p| p.0 >= size.0 || p.1 >= size.1) {
        return Err(Error::validation(format!("point {},{} lies outside the {}x{} image", p.0, p.1, size.0, size.1)));
    }
    let kind_name = match kind {
        DumpKind::LayerTrace => "layer_trace",
        DumpKind::SdAttention => "sd_attention",
        DumpKind::Similarity => "similarity",
    };
    let dir = out_dir(&cfg)?.join(kind_name).join(&id);
    let heat = dir.join("heatmaps");
    let mut written = Vec::new();
    let mut checksums = BTreeMap::new();

    match kind {
        DumpKind::LayerTrace => {
            if cfg.replay.is_some() {
                return Err(Error::config("layer traces need a live encoder, not --replay"));
            }
            let models = Models::load(&cfg, Need { clip: true, diffusion: false })?;
            checksums = models.checksums.clone();
            let enc = models.encoder.as_ref().expect("encoder requested");
            let info = enc.info();
            let prep = prepare_encoder_input(&img, cfg.input_short_side, info.patch_size, info.stats)?;
            let trace = enc.trace(&prep, HeadPolicy::PerHeadPassthrough)?;
            for (f, layer) in trace_to_fixtures(&trace).iter().zip(&trace.layers) {
                let n = layer.layer_index;
                save_fixture(f, &dir.join(format!("layer_{n:02}.safetensors")), &mut written)?;
                let avg = layer.attention.averaged()?;
                for (k, &p) in points.iter().enumerate() {
                    let token = 1 + cell(p, size, trace.grid);
                    let m = row_map(avg.data().slice(s![token, 1..]), trace.grid);
                    render::save(&render::heatmap(m.view(), size), &heat.join(format!("layer_{n:02}_p{k}.png")))?;
                }
            }
        }
        DumpKind::SdAttention => {
            let att = match &cfg.replay {
                Some(r) => ReplayStore::new(r).sd_attention(&id)?,
                None => {
                    let models = Models::load(&cfg, Need { clip: false, diffusion: true })?;
                    checksums = models.checksums.clone();
                    let x = models.extractor.as_ref().expect("extractor requested");
                    x.extract(&img, &cfg.extraction, cfg.seed)?
                }
            };
            save_fixture(&sd_attention_to_fixture(&att), &dir.join("sd_attention.safetensors"), &mut written)?;
            let grid = (att.grid_side, att.grid_side);
            let maps = att.stack.maps();
            let mut mean = Array2::<f32>::zeros((att.tokens(), att.tokens()));
            for m in maps {
                mean += m.data();
            }
            mean /= maps.len() as f32;
            for (k, &p) in points.iter().enumerate() {
                let token = cell(p, size, grid);
                let m = row_map(mean.row(token), grid);
                render::save(&render::heatmap(m.view(), size), &heat.join(format!("mean_p{k}.png")))?;
                for (h, a) in maps.iter().enumerate() {
                    let m = row_map(a.data().row(token), grid);
                    render::save(&render::heatmap(m.view(), size), &heat.join(format!("head{h:02}_p{k}.png")))?;
                }
            }
        }
        DumpKind::Similarity => {
            let set = categories(cats, &cfg)?;
            let mut c = cfg.clone();
            c.compensation.enabled = false;
            let models = Models::load(&c, Need { clip: true, diffusion: false })?;
            checksums = models.checksums.clone();
            let (pipeline, _) = models.pipeline(&c, set)?;
            let seg = pipeline.run(&id, &img, None)?;
            save_fixture(&scores_to_fixture(&seg.coarse), &dir.join("similarity.safetensors"), &mut written)?;
            let names = pipeline.categories().label_names();
            for (col, &label) in seg.coarse.column_labels.iter().enumerate() {
                let name = names.get(label as usize).map_or_else(|| format!("label{label}"), |n| sanitize(n));
                let m = seg.coarse.scores.slice(s![.., .., col]);
                render::save(&render::heatmap(m, size), &heat.join(format!("{col:02}_{name}.png")))?;
            }
        }
    }
    let mut manifest = RunManifest::new(format!("dump {kind_name}"), cfg);
    manifest.weight_checksums = checksums;
    manifest.write(&dir.join("manifest.json"))?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
