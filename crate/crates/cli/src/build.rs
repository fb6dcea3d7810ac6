use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use storyforge_core::assembler::{BookManifest, read_bundle};
use storyforge_core::gate::{ReviewAction, Verdict};
use storyforge_core::pipeline::{PipelineService, PipelineSettings, RunState};

use crate::{CliError, ReviewPolicy, load_config};

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    title: String,
    /// Plain-text story.
    #[arg(long)]
    input: PathBuf,
    /// Provider config (TOML). Without it every provider is an offline mock.
    #[arg(long)]
    providers: Option<PathBuf>,
    /// Output directory for `bundle.zip` and its unpacked contents.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReviewPolicy::RemoveAll)]
    review_policy: ReviewPolicy,
    #[arg(long, default_value = "en")]
    language: String,
    /// Keep pipeline state here instead of a temporary directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

/// Asks about one suspicious asset on stderr; empty input or EOF removes.
fn ask(
    input: &mut impl BufRead,
    keyword: &str,
    score: f64,
    image: &Path,
) -> Result<ReviewAction, CliError> {
    let mut err = std::io::stderr();
    loop {
        let _ = write!(
            err,
            "suspicious model {keyword:?} (S = {score:.4}, view: {})\nkeep or remove? [remove] ",
            image.display()
        );
        let _ = err.flush();
        let mut line = String::new();
        let n = input
            .read_line(&mut line)
            .map_err(|e| CliError::runtime("Io", e))?;
        if n == 0 || line.trim().is_empty() {
            return Ok(ReviewAction::Remove);
        }
        match line.parse() {
            Ok(action) => return Ok(action),
            Err(e) => {
                let _ = writeln!(err, "{e}");
            }
        }
    }
}

fn review(
    svc: &PipelineService,
    id: &str,
    policy: ReviewPolicy,
    out: &Path,
) -> Result<(), CliError> {
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    for item in svc.review_items(id)? {
        if item.verdict != Verdict::Suspicious {
            continue;
        }
        let action = match policy {
            ReviewPolicy::KeepAll => ReviewAction::Keep,
            ReviewPolicy::RemoveAll => ReviewAction::Remove,
            ReviewPolicy::Interactive => {
                let dir = out.join("review");
                std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime("Io", e))?;
                let image = dir.join(format!("{}.png", item.asset_id));
                std::fs::write(&image, svc.frontal_view(id, &item.asset_id)?)
                    .map_err(|e| CliError::runtime("Io", e))?;
                ask(&mut input, &item.keyword, item.score, &image)?
            }
        };
        svc.post_verdict(id, &item.asset_id, action, "cli")?;
    }
    svc.complete_review(id)?;
    Ok(())
}

/// Writes `bundle.zip` plus `manifest.json`, `assets/` and `audio/`.
fn write_out(svc: &PipelineService, bundle: &[u8], out: &Path) -> Result<BookManifest, CliError> {
    let io = |e: std::io::Error| CliError::runtime("Io", e);
    let manifest = read_bundle(bundle).map_err(|e| CliError::runtime("Bundle", e))?;
    std::fs::create_dir_all(out.join("assets")).map_err(io)?;
    std::fs::create_dir_all(out.join("audio")).map_err(io)?;
    std::fs::write(out.join("bundle.zip"), bundle).map_err(io)?;
    std::fs::write(out.join("manifest.json"), manifest.to_canonical_json()).map_err(io)?;
    let files = manifest
        .assets
        .iter()
        .map(|a| (&a.mesh_path, &a.mesh_ref))
        .chain(manifest.narration.iter().map(|n| (&n.audio_path, &n.audio_ref)));
    for (path, blob) in files {
        let bytes = svc.store().get_verified(blob).map_err(io)?;
        std::fs::write(out.join(path), bytes).map_err(io)?;
    }
    Ok(manifest)
}

pub fn run(args: BuildArgs) -> Result<(), CliError> {
    let body = std::fs::read_to_string(&args.input).map_err(|e| {
        CliError::usage("InvalidInput", format!("{}: {e}", args.input.display()))
    })?;
    let config = load_config(args.providers.as_ref(), true)?;
    let providers = config
        .build_providers()
        .map_err(|e| CliError::usage("Config", e))?;
    let settings = PipelineSettings::from_config(&config).map_err(|e| CliError::usage("Config", e))?;

    let scratch;
    let data_dir = match &args.data_dir {
        Some(d) => d.clone(),
        None => {
            scratch = tempfile::tempdir().map_err(|e| CliError::runtime("Io", e))?;
            scratch.path().to_owned()
        }
    };
    let svc = PipelineService::open(&data_dir, providers, settings)?;
    let id = svc.create_book(&args.title, &body, &args.language)?.book_id;
    loop {
        match svc.run_book(&id)? {
            RunState::AwaitingReview => review(&svc, &id, args.review_policy, &args.out)?,
            RunState::Ready => break,
            RunState::Failed => {
                let failure = svc.get_status(&id)?.error;
                let (kind, message) = failure
                    .map(|f| (f.kind, format!("failed while {}: {}", f.state, f.message)))
                    .unwrap_or_else(|| ("Failed".into(), "pipeline failed".into()));
                return Err(CliError::runtime(&kind, message));
            }
            other => {
                return Err(CliError::runtime("Interrupted", format!("stopped in {other}")));
            }
        }
    }
    let bundle = svc.download_bundle(&id)?;
    let manifest = write_out(&svc, &bundle.bytes, &args.out)?;
    println!(
        "{}",
        json!({
            "book_id": id,
            "bundle": args.out.join("bundle.zip"),
            "sha256": bundle.sha256,
            "pages": manifest.pages.len(),
            "models": manifest.assets.len(),
            "removed": svc
                .review_items(&id)?
                .iter()
                .filter(|i| !i.verdict.admits())
                .map(|i| i.keyword.clone())
                .collect::<Vec<_>>(),
        })
    );
    Ok(())
}
