use std::path::Path;
use std::sync::Arc;

use groundseg_core::backend::fixture::{self, FixtureError};
use groundseg_core::backend::{Backends, FixtureScene, ImageContent, ImagePayload, MockBackend, MockConfig};
use groundseg_core::eval::{self, EvalReport, IouKind, SuiteFile};
use groundseg_core::pipeline::{
    builtin_pipeline, run_auto_annotate, run_grounded_inpaint, validate_pipeline, AutoAnnotateOptions, EditMode,
    PhraseSource, PipelineError, PipelineSpec, RunContext, BUILTIN_PIPELINES,
};
use groundseg_core::store::{export_coco, ImageRecord};
use groundseg_core::{InstanceAnnotation, Provenance};

use crate::args::*;
use crate::files::{self, read_json, resolve_timestamp, to_json_pretty, write_output};
use crate::{mock_server, service, CliError};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Edit(a) => edit(a),
        Command::MockBackend(a) => mock_backend(a),
        Command::Serve(a) => serve(a),
        Command::GenFixtures(a) => gen_fixtures(a),
        Command::ValidatePipeline(a) => validate(a),
    }
}

pub(crate) fn fixture_err(e: FixtureError) -> CliError {
    match &e {
        FixtureError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::NotFound(e.to_string())
        }
        FixtureError::Io { .. } => CliError::Runtime(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::InvalidInput(_) | PipelineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        PipelineError::TargetNotFound { .. } => CliError::NotFound(e.to_string()),
        PipelineError::Backend { .. } | PipelineError::Store(_) => CliError::Runtime(e.to_string()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))
}

fn png_payload(id: u64, path: &Path) -> Result<ImagePayload, CliError> {
    let bytes = files::read_file(path)?;
    let (w, h) = files::png_dimensions(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    ImagePayload::new(id, w, h, ImageContent::Png(bytes)).map_err(|e| CliError::Usage(e.to_string()))
}

fn annotate(a: AnnotateArgs) -> Result<(), CliError> {
    let cfg = a.thresholds.config()?;
    let images = match &a.fixtures {
        Some(dir) => fixture::suite_payloads(&fixture::load_dir(dir).map_err(fixture_err)?),
        None => a
            .images
            .iter()
            .enumerate()
            .map(|(i, p)| png_payload(i as u64 + 1, p))
            .collect::<Result<_, _>>()?,
    };
    if images.is_empty() {
        return Err(CliError::Usage("no images to annotate".into()));
    }
    let source = if a.auto {
        match a.source {
            SourceArg::Tags => PhraseSource::Tags,
            SourceArg::Caption => PhraseSource::Caption,
        }
    } else {
        let phrases: Vec<String> = a
            .phrases
            .iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(CliError::Usage("--phrases must name at least one phrase".into()));
        }
        PhraseSource::Phrases(phrases)
    };
    let backends = Backends::uniform(Arc::new(a.backend.build()?));
    let ctx = RunContext::new(a.seed, resolve_timestamp(a.timestamp.as_deref())?);
    let opts = AutoAnnotateOptions {
        continue_on_error: a.continue_on_error,
        workers: a.workers,
    };
    let out = run_auto_annotate(&images, source, &cfg, &backends, &opts, &ctx).map_err(pipeline_err)?;

    write_output(&a.output, out.document.to_json().as_bytes())?;
    if let Some(path) = &a.failures {
        write_output(path, &to_json_pretty(&out.failures))?;
    }
    println!(
        "annotated {} of {} images: {} instances in {} categories -> {}",
        images.len() - out.failures.len(),
        images.len(),
        out.document.annotations.len(),
        out.document.categories.len(),
        a.output.display()
    );
    for f in &out.failures {
        println!("skipped image {} ({} {}): {}", f.image_id, f.stage, f.error, f.message);
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if let Some(path) = &a.suite {
        let suite: SuiteFile = read_json(path)?;
        let rows = suite
            .rows()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let table = eval::render_table(&rows).map_err(|e| CliError::Usage(e.to_string()))?;
        print!("{table}");
        if let Some(out) = &a.report {
            let means = rows
                .iter()
                .map(|r| Ok(serde_json::json!({"label": r.label, "mean": r.mean()?, "scores": r.scores})))
                .collect::<Result<Vec<_>, eval::EvalError>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let report = serde_json::json!({
                "rows": means,
                "aggregation": "suite mean = arithmetic mean of per-dataset scores",
            });
            write_output(out, &to_json_pretty(&report))?;
        }
        return Ok(());
    }

    let (Some(pred), Some(gt)) = (&a.pred, &a.gt) else {
        return Err(CliError::Usage("--pred and --gt are required together".into()));
    };
    let gt_doc = read_json(gt)?;
    let pred_doc = read_json(pred)?;
    let kind = match a.iou_kind {
        IouKindArg::Mask => IouKind::Mask,
        IouKindArg::Box => IouKind::Box,
    };
    let ds = eval::evaluate_dataset(&a.name, &pred_doc, &gt_doc, kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = EvalReport::new(vec![ds]).map_err(|e| CliError::Usage(e.to_string()))?;
    let table = eval::render_table(&[report.row(&a.label)]).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{table}");
    if let Some(out) = &a.report {
        write_output(out, &to_json_pretty(&report))?;
    }
    Ok(())
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let cfg = a.thresholds.config()?;
    let mut scene: Option<FixtureScene> = None;
    let image = match (&a.fixtures, &a.scene, &a.image) {
        (Some(dir), Some(id), _) => {
            let s = fixture::load_dir(dir)
                .map_err(fixture_err)?
                .into_iter()
                .find(|s| &s.scene_id == id)
                .ok_or_else(|| CliError::NotFound(format!("scene '{id}' not in {}", dir.display())))?;
            let p = s.payload(1);
            scene = Some(s);
            p
        }
        (_, _, Some(path)) => {
            let bytes = files::read_file(path)?;
            let rgb = files::decode_png(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            ImagePayload::new(1, rgb.width, rgb.height, ImageContent::Rgb(rgb.pixels))
                .map_err(|e| CliError::Usage(e.to_string()))?
        }
        _ => return Err(CliError::Usage("pass --fixtures with --scene, or --image".into())),
    };
    let mode = match a.mode {
        ModeArg::Replace => match a.prompt.as_deref().map(str::trim) {
            Some(p) if !p.is_empty() => EditMode::Replace(p.to_string()),
            _ => return Err(CliError::Usage("replace mode needs --prompt".into())),
        },
        ModeArg::Remove => {
            if a.prompt.is_some() {
                eprintln!("warning: --prompt is ignored in remove mode");
            }
            EditMode::Remove
        }
    };
    let backends = Backends::uniform(Arc::new(a.backend.build()?));
    let ctx = RunContext::new(None, resolve_timestamp(a.timestamp.as_deref())?);
    let out = run_grounded_inpaint(&image, &a.targets, &mode, a.top_only, &cfg, &backends, &ctx)
        .map_err(pipeline_err)?;

    let png = match &out.image.content {
        ImageContent::Rgb(px) => files::encode_png(out.image.width, out.image.height, px),
        ImageContent::Png(bytes) => bytes.clone(),
        ImageContent::Scene(_) => {
            let s = scene.as_ref().expect("scene payloads come from fixtures");
            files::encode_png(s.width, s.height, &s.render_rgb())
        }
    };
    write_output(&a.output, &png)?;
    if let Some(path) = &a.report {
        write_output(path, &to_json_pretty(&out.report))?;
    }
    println!(
        "edited {} instance(s), {} pixels ({}) -> {}",
        out.report.matched.len(),
        out.report.region_area,
        out.report.prompt,
        a.output.display()
    );
    Ok(())
}

fn mock_backend(a: MockBackendArgs) -> Result<(), CliError> {
    let scenes = fixture::load_dir(&a.scenes).map_err(fixture_err)?;
    if a.jitter_px < 0.0 || !a.jitter_px.is_finite() {
        return Err(CliError::Usage("--jitter-px must be a finite non-negative number".into()));
    }
    let mock = MockBackend::new(
        scenes,
        MockConfig {
            seed: a.seed,
            jitter_px: a.jitter_px,
            drop_per_scene: a.drop_per_scene,
        },
    );
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        announce(addr);
        axum::serve(listener, mock_server::router(Arc::new(mock)))
            .with_graceful_shutdown(mock_server::shutdown_signal())
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

/// Prints the bound address as the first stdout line.
pub(crate) fn announce(addr: std::net::SocketAddr) {
    use std::io::Write;
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config: service::ServiceConfig = read_json(&a.config)?;
    if let Some(listen) = a.listen {
        config.listen = listen;
    }
    if let Some(dir) = a.data_dir {
        config.data_dir = dir;
    }
    config.validate().map_err(CliError::Usage)?;
    let state = service::AppState::build(&config)?;
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen.as_str())
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", config.listen)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        announce(addr);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(mock_server::shutdown_signal())
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

fn gen_fixtures(a: GenFixturesArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    let scenes = fixture::generate_scenes(a.count, a.min_objects, a.seed);
    for s in &scenes {
        fixture::save_scene(&a.out, s).map_err(fixture_err)?;
    }
    let gt = ground_truth(&scenes, a.seed)?;
    let path = a.out.join("ground_truth.coco.json");
    write_output(&path, gt.to_json().as_bytes())?;
    println!(
        "wrote {} scenes with {} objects to {}",
        scenes.len(),
        gt.annotations.len(),
        a.out.display()
    );
    Ok(())
}

/// Fixture objects as an unscored COCO document, images numbered as in
/// [`fixture::suite_payloads`].
pub fn ground_truth(scenes: &[FixtureScene], seed: u64) -> Result<groundseg_core::CocoDocument, CliError> {
    let payloads = fixture::suite_payloads(scenes);
    let mut anns = Vec::new();
    let mut images = Vec::new();
    for (s, p) in scenes.iter().zip(&payloads) {
        images.push(ImageRecord {
            id: p.image_id,
            width: p.width,
            height: p.height,
            file_name: p.file_name(),
        });
        for o in &s.objects {
            anns.push(InstanceAnnotation {
                image_id: p.image_id,
                phrase: o.label.clone(),
                bbox: o.bbox,
                mask: o.mask.clone(),
                score: 1.0,
                provenance: Provenance::default(),
            });
        }
    }
    let mut doc = export_coco(&anns, &images, &Provenance::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    for a in &mut doc.annotations {
        a.score = None;
    }
    doc.info.provenance = None;
    doc.info.description = Some(format!("synthetic fixture ground truth, seed {seed}"));
    Ok(doc)
}

fn validate(a: ValidatePipelineArgs) -> Result<(), CliError> {
    let spec: PipelineSpec = match (&a.file, &a.builtin) {
        (Some(path), _) => read_json(path)?,
        (None, Some(name)) => builtin_pipeline(name).ok_or_else(|| {
            CliError::NotFound(format!(
                "no built-in pipeline '{name}' (known: {})",
                BUILTIN_PIPELINES.join(", ")
            ))
        })?,
        (None, None) => return Err(CliError::Usage("pass a pipeline file or --builtin".into())),
    };
    let plan = validate_pipeline(&spec).map_err(|e| CliError::Usage(format!("pipeline '{}': {e}", spec.name)))?;
    let ports = |p: &[groundseg_core::pipeline::Modality]| p.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(", ");
    println!("pipeline '{}' is well typed", spec.name);
    println!("order: {}", plan.order.join(" -> "));
    println!("signature: ({}) -> ({})", ports(&plan.net_inputs), ports(&plan.net_outputs));
    Ok(())
}
