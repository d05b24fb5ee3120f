use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use memekit::annotator::{
    annotate_batch, load_annotations, resolve, AnnotationRecord, Annotator, BatchItem, BatchOptions, ChatCompletionsClient,
    FixedClock, RetryPolicy, ScriptedClient, VlmClient,
};
use memekit::corpus::{compute_stats, filter_corpus, load_corpus, manifest_paths, split_corpus, write_split, FilterConfig};
use memekit::embeddings::{encode, normalize_rows, save_store, HashEncoder, ImageMode};
use memekit::finetune::{evaluate_checkpoint, load_checkpoint, pairs_from_corpus, train, LinearDualEncoder, ModelSpec, TrainPair};
use memekit::matcher::{load_candidates, run_pipeline, save_candidates, JointMethod, MatchCandidate, MatchStatus, PixelDifference};
use memekit::provenance::Provenance;
use memekit::retrieval::{evaluate, EvalConfig, RetrievalReport, TextType};
use memekit::textmetrics::{apply_strategy, BleuSmoothing, Metric, MetricRequest, ScorerSet, Strategy};
use memekit::tokenize::Whitespace;
use memekit::{jsonl, Corpus, Encoder, Modality, Split};
use memekit_review::{create_survey, AppState, SourceDescriptor, Store};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, EncoderSection, PipelineConfig};
use crate::*;

struct Ctx {
    cfg: PipelineConfig,
    command: &'static str,
    args: serde_json::Value,
}

impl Ctx {
    /// Hash over the resolved config and this command's arguments.
    fn provenance(&self) -> Provenance {
        Provenance::new(self.command, &json!({ "config": self.cfg, "args": self.args }))
    }

    fn corpus_path(&self, arg: &CorpusArg) -> Result<PathBuf> {
        arg.corpus
            .clone()
            .or_else(|| self.cfg.paths.corpus.clone())
            .ok_or_else(|| anyhow!("no corpus given (use --corpus or paths.corpus)"))
    }

    fn annotations_path(&self, arg: &Option<PathBuf>) -> Option<PathBuf> {
        arg.clone().or_else(|| self.cfg.paths.annotations.clone())
    }

    fn data_dir(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone().unwrap_or_else(|| self.cfg.service.data_dir.clone())
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.finetune.seed = seed;
    }
    if let Some(level) = &cli.log_level {
        cfg.log_level = level.clone();
    }
    let _ = env_logger::Builder::new().parse_filters(&cfg.log_level).format_timestamp(None).try_init();
    apply_flags(&mut cfg, &cli.command);
    let mut args = serde_json::to_value(&cli.command)?;
    strip_destinations(&mut args);
    let ctx = Ctx { command: cli.command.name(), args, cfg };
    log::debug!("{}: config hash {}", ctx.command, ctx.provenance().config_hash);
    match cli.command {
        Command::Corpus(c) => corpus(&ctx, c),
        Command::Annotate(AnnotateCmd::Run(a)) => annotate(&ctx, a),
        Command::Match(MatchCmd::Run(a)) => match_run(&ctx, a),
        Command::Match(MatchCmd::Export(a)) => match_export(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::EvalRetrieval(a) => eval_retrieval(&ctx, a),
        Command::Finetune(FinetuneCmd::Run(a)) => finetune_run(&ctx, a),
        Command::Finetune(FinetuneCmd::Eval(a)) => finetune_eval(&ctx, a),
        Command::EvalMetrics(a) => eval_metrics(&ctx, a),
        Command::ServeReview(a) => serve_review(&ctx, a),
        Command::Review(c) => review(&ctx, c),
        Command::Export(a) => export(&ctx, a),
    }
}

/// Where an artifact is written does not change its content, so output
/// locations stay out of the config hash.
fn strip_destinations(args: &mut serde_json::Value) {
    match args {
        serde_json::Value::Object(map) => {
            for key in ["out", "report", "failures"] {
                map.remove(key);
            }
            map.values_mut().for_each(strip_destinations);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_destinations),
        _ => {}
    }
}

/// Folds command flags into the config so they are part of the hash and
/// override file and environment values.
fn apply_flags(cfg: &mut PipelineConfig, command: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    let encoder = |cfg: &mut PipelineConfig, e: &EncoderArgs| {
        set(&mut cfg.encoder.name, &e.encoder);
        set(&mut cfg.encoder.dim, &e.dim);
    };
    match command {
        Command::Corpus(CorpusCmd::Filter(a)) => {
            set(&mut cfg.corpus.min_instances, &a.min_instances);
            set(&mut cfg.corpus.min_text_tokens, &a.min_text_tokens);
            set(&mut cfg.corpus.top_k, &a.top_k);
        }
        Command::Corpus(CorpusCmd::Split(a)) => set(&mut cfg.corpus.val_fraction, &a.val_fraction),
        Command::Annotate(AnnotateCmd::Run(a)) => {
            set(&mut cfg.annotate.prompt, &a.prompt);
            set(&mut cfg.annotate.max_in_flight, &a.max_in_flight);
            set(&mut cfg.annotate.retries, &a.retries);
            if a.with_context {
                cfg.annotate.with_context = true;
            }
            if a.no_context {
                cfg.annotate.with_context = false;
            }
        }
        Command::Match(MatchCmd::Run(a)) => {
            set(&mut cfg.matcher.concat_threshold, &a.concat_threshold);
            set(&mut cfg.matcher.fusion_threshold, &a.fusion_threshold);
            set(&mut cfg.matcher.perceptual_threshold, &a.perceptual_threshold);
            encoder(cfg, &a.encoder);
        }
        Command::Embed(a) => encoder(cfg, &a.encoder),
        Command::EvalRetrieval(a) => {
            set(&mut cfg.retrieval.texts, &a.texts);
            set(&mut cfg.retrieval.ks, &a.ks);
            encoder(cfg, &a.encoder);
        }
        Command::Finetune(FinetuneCmd::Run(a)) => {
            set(&mut cfg.finetune.epochs, &a.epochs);
            set(&mut cfg.finetune.effective_batch, &a.effective_batch);
            set(&mut cfg.finetune.micro_batch, &a.micro_batch);
            set(&mut cfg.finetune.lr_peak, &a.lr_peak);
            set(&mut cfg.encoder.dim, &a.dim);
        }
        Command::Finetune(FinetuneCmd::Eval(a)) => {
            set(&mut cfg.retrieval.texts, &a.texts);
            set(&mut cfg.retrieval.ks, &a.ks);
        }
        Command::EvalMetrics(a) => {
            set(&mut cfg.metrics.strategy, &a.strategy);
            set(&mut cfg.metrics.metrics, &a.metrics);
        }
        Command::ServeReview(a) => {
            set(&mut cfg.service.port, &a.port);
            set(&mut cfg.service.host, &a.host);
            set(&mut cfg.service.data_dir, &a.data_dir);
            if a.ui_dir.is_some() {
                cfg.service.ui_dir = a.ui_dir.clone();
            }
            if a.admin_token.is_some() {
                cfg.service.admin_token = a.admin_token.clone();
            }
        }
        _ => {}
    }
}

/// Writes `value` as pretty JSON to `path`, or to stdout.
fn emit_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}

/// Provenance for artifacts whose format has no room for it: a
/// `provenance.json` inside directories, `<file>.provenance.json` beside files.
fn write_sidecar(artifact: &Path, provenance: &Provenance) -> Result<()> {
    let path = if artifact.is_dir() {
        artifact.join("provenance.json")
    } else {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".provenance.json");
        PathBuf::from(name)
    };
    emit_json(Some(&path), provenance)
}

fn corpus_dir(path: &Path) -> PathBuf {
    let (memes, _, _) = manifest_paths(path);
    memes.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Relative image paths that exist under the corpus directory are rewritten
/// against it; anything else (URLs, absolute paths, opaque references) is kept.
fn resolve_media(reference: &str, base: &Path) -> String {
    if reference.contains("://") || Path::new(reference).is_absolute() || reference.is_empty() {
        return reference.to_string();
    }
    let joined = base.join(reference);
    if joined.is_file() {
        joined.display().to_string()
    } else {
        reference.to_string()
    }
}

/// Loads a corpus with its image references made usable from any directory.
fn load_for_media(path: &Path) -> Result<Corpus> {
    let mut corpus = load_corpus(path)?;
    let base = corpus_dir(path);
    for m in &mut corpus.memes {
        m.image = resolve_media(&m.image, &base);
    }
    for t in &mut corpus.templates {
        t.base_image = resolve_media(&t.base_image, &base);
    }
    Ok(corpus)
}

/// Keeps the memes of one split. Selecting a split of an unsplit corpus is an error.
fn restrict(corpus: Corpus, split: SplitArg) -> Result<Corpus> {
    let want = match split {
        SplitArg::All => return Ok(corpus),
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
    };
    if corpus.split_assignment.is_none() {
        bail!("corpus has no split.jsonl; run `corpus split` or pass --split all");
    }
    let keep: HashSet<String> = corpus.memes_in(want).iter().map(|m| m.meme_id.clone()).collect();
    let memes = corpus.memes.into_iter().filter(|m| keep.contains(&m.meme_id)).collect();
    Ok(Corpus::new(corpus.templates, memes)?)
}

fn build_encoder(section: &EncoderSection, seed: u64) -> Result<Box<dyn Encoder>> {
    let hash = || HashEncoder::new(section.dim, seed).with_max_text_tokens(section.max_text_tokens);
    Ok(match section.name.as_str() {
        "hash" => Box::new(hash()),
        "hash-ref" => Box::new(hash().with_image_mode(ImageMode::Reference)),
        other => match other.strip_prefix("checkpoint:") {
            Some(dir) => Box::new(load_checkpoint(Path::new(dir))?),
            None => bail!("unknown encoder {other:?} (expected hash, hash-ref or checkpoint:<dir>)"),
        },
    })
}

fn read_annotations(path: Option<PathBuf>) -> Result<Vec<AnnotationRecord>> {
    let path = path.ok_or_else(|| anyhow!("no annotations given (use --annotations or paths.annotations)"))?;
    load_annotations(&path).with_context(|| format!("reading {}", path.display()))
}

fn text_types(names: &[String]) -> Result<Vec<TextType>> {
    names.iter().map(|n| n.trim().parse::<TextType>().map_err(|e| anyhow!(e))).collect()
}

fn corpus(ctx: &Ctx, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Validate(a) => {
            let c = load_corpus(&ctx.corpus_path(&a)?)?;
            println!(
                "ok: {} templates, {} memes{}",
                c.templates.len(),
                c.memes.len(),
                if c.split_assignment.is_some() { ", split present" } else { "" }
            );
        }
        CorpusCmd::Filter(a) => {
            let c = load_corpus(&ctx.corpus_path(&a.input)?)?;
            let fc = FilterConfig {
                min_instances: ctx.cfg.corpus.min_instances,
                min_text_tokens: ctx.cfg.corpus.min_text_tokens,
                top_k_templates: ctx.cfg.corpus.top_k,
            };
            let filtered = filter_corpus(&c, &fc, &Whitespace);
            filtered.save(&a.out)?;
            write_sidecar(&a.out, &ctx.provenance())?;
            println!(
                "kept {} of {} templates, {} of {} memes -> {}",
                filtered.templates.len(),
                c.templates.len(),
                filtered.memes.len(),
                c.memes.len(),
                a.out.display()
            );
        }
        CorpusCmd::Split(a) => {
            let path = ctx.corpus_path(&a.input)?;
            let c = split_corpus(&load_corpus(&path)?, ctx.cfg.corpus.val_fraction, ctx.cfg.seed)?;
            let assign = c.split_assignment.as_ref().expect("split assigned");
            let dir = match &a.out {
                Some(out) => {
                    c.save(out)?;
                    out.clone()
                }
                None => {
                    let (_, _, split_path) = manifest_paths(&path);
                    write_split(&split_path, assign)?;
                    corpus_dir(&path)
                }
            };
            write_sidecar(&dir.join(memekit::corpus::SPLIT_FILE), &ctx.provenance())?;
            let val = assign.values().filter(|s| **s == Split::Validation).count();
            println!("{} train, {} validation -> {}", assign.len() - val, val, dir.display());
        }
        CorpusCmd::Stats(a) => {
            let c = load_corpus(&ctx.corpus_path(&a.input)?)?;
            let ann = match ctx.annotations_path(&a.annotations) {
                Some(p) => Some(read_annotations(Some(p))?),
                None => None,
            };
            let stats = compute_stats(&c, ann.as_deref(), &Whitespace);
            emit_json(a.out.as_deref(), &json!({ "stats": stats, "provenance": ctx.provenance() }))?;
        }
    }
    Ok(())
}

/// Scripted answers for offline annotation runs.
#[derive(Debug, Deserialize)]
struct ReplayFile {
    #[serde(default = "replay_model")]
    model: String,
    #[serde(default = "yes")]
    multi_turn: bool,
    /// Recorded as every annotation's timestamp.
    #[serde(default = "epoch")]
    timestamp: String,
    /// Answers for any image without its own queue.
    #[serde(default)]
    responses: Vec<String>,
    /// Answers keyed by the image reference as written in the manifest.
    #[serde(default)]
    per_image: BTreeMap<String, Vec<String>>,
}

fn replay_model() -> String {
    "scripted".into()
}

fn yes() -> bool {
    true
}

fn epoch() -> String {
    "1970-01-01T00:00:00Z".into()
}

fn annotate(ctx: &Ctx, a: AnnotateArgs) -> Result<()> {
    let corpus_path = ctx.corpus_path(&a.input)?;
    let corpus = load_for_media(&corpus_path)?;
    let base = corpus_dir(&corpus_path);
    let prompt = resolve(&ctx.cfg.annotate.prompt, ctx.cfg.annotate.with_context)?;
    let out = a
        .out
        .clone()
        .or_else(|| ctx.cfg.paths.annotations.clone())
        .unwrap_or_else(|| PathBuf::from("annotations.jsonl"));
    let failures = a.failures.clone().unwrap_or_else(|| out.with_extension("failures.jsonl"));

    let templates = corpus.template_index();
    let items: Vec<BatchItem> = corpus
        .memes
        .iter()
        .map(|m| BatchItem {
            meme: m.clone(),
            template_context: templates
                .get(m.template_id.as_str())
                .map(|t| t.about_context.clone())
                .filter(|c| !c.trim().is_empty()),
        })
        .collect();

    let replay = match &a.replay {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str::<ReplayFile>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let (client, clock): (Box<dyn VlmClient>, Option<FixedClock>) = match replay {
        Some(r) => {
            let mut c = ScriptedClient::new(r.model).with_responses(r.responses);
            if !r.multi_turn {
                c = c.single_turn();
            }
            for (image, answers) in r.per_image {
                c.script(&resolve_media(&image, &base), answers);
            }
            (Box::new(c), Some(FixedClock(r.timestamp)))
        }
        None => (Box::new(ChatCompletionsClient::from_env()?), None),
    };
    let mut annotator = Annotator::new(client.as_ref());
    annotator.retry = RetryPolicy {
        retries: ctx.cfg.annotate.retries,
        initial_backoff: Duration::from_millis(ctx.cfg.annotate.backoff_ms),
        ..RetryPolicy::default()
    };
    if let Some(clock) = &clock {
        annotator.clock = clock;
    }
    let options = BatchOptions { max_in_flight: ctx.cfg.annotate.max_in_flight, resume: a.resume, limit: a.limit };
    let summary = annotate_batch(&items, &prompt, &annotator, &options, &out, &failures)?;
    write_sidecar(&out, &ctx.provenance())?;
    println!(
        "annotated {}, failed {}, skipped {} -> {}",
        summary.annotated,
        summary.failed,
        summary.skipped,
        out.display()
    );
    if summary.failed > 0 {
        log::warn!("failures written to {}", failures.display());
    }
    Ok(())
}

fn match_run(ctx: &Ctx, a: MatchRunArgs) -> Result<()> {
    let corpus = load_for_media(&ctx.corpus_path(&a.input)?)?;
    let encoder = build_encoder(&ctx.cfg.encoder, ctx.cfg.seed)?;
    let methods = match a.method {
        MethodArg::Concat => vec![JointMethod::Concat],
        MethodArg::Fusion => vec![JointMethod::Fusion],
        MethodArg::Both => vec![JointMethod::Concat, JointMethod::Fusion],
    };
    let candidates = run_pipeline(&corpus, encoder.as_ref(), &PixelDifference::default(), &ctx.cfg.matcher, &methods)?;
    save_candidates(&a.out, &candidates)?;
    write_sidecar(&a.out, &ctx.provenance())?;
    let conflicted = candidates.iter().filter(|c| c.conflicted).count();
    println!("{} candidate pairs ({} conflicted) -> {}", candidates.len(), conflicted, a.out.display());
    Ok(())
}

/// Everything except rejected pairs, or only verified ones.
fn keep_exported(c: &MatchCandidate, only_verified: bool) -> bool {
    match c.status {
        MatchStatus::Verified => true,
        MatchStatus::Rejected => false,
        _ => !only_verified,
    }
}

fn exported_matches(ctx: &Ctx, data_dir: &Option<PathBuf>, candidates: &Option<PathBuf>, only_verified: bool) -> Result<Vec<MatchCandidate>> {
    if data_dir.is_some() || candidates.is_none() {
        let dir = ctx.data_dir(data_dir);
        if !dir.is_dir() {
            bail!("review data directory {} does not exist", dir.display());
        }
        return Ok(Store::open(&dir)?.export_matches(only_verified));
    }
    let path = candidates.as_ref().expect("checked above");
    Ok(load_candidates(path)?.into_iter().filter(|c| keep_exported(c, only_verified)).collect())
}

fn match_export(ctx: &Ctx, a: MatchExportArgs) -> Result<()> {
    let list = exported_matches(ctx, &a.data_dir, &a.candidates, a.only_verified)?;
    match &a.out {
        Some(p) => {
            jsonl::write(p, &list)?;
            write_sidecar(p, &ctx.provenance())?;
            println!("{} pairs -> {}", list.len(), p.display());
        }
        None => {
            let mut out = std::io::stdout().lock();
            for c in &list {
                writeln!(out, "{}", serde_json::to_string(c)?)?;
            }
        }
    }
    Ok(())
}

fn embed(ctx: &Ctx, a: EmbedArgs) -> Result<()> {
    let corpus = load_for_media(&ctx.corpus_path(&a.input)?)?;
    let encoder = build_encoder(&ctx.cfg.encoder, ctx.cfg.seed)?;
    let (modality, items): (Modality, Vec<(String, String)>) = match a.modality {
        ModalityArg::Image => (Modality::Image, corpus.memes.iter().map(|m| (m.meme_id.clone(), m.image.clone())).collect()),
        ModalityArg::Text => {
            let tt: TextType = a.text.parse().map_err(|e: String| anyhow!(e))?;
            let ann = if tt == TextType::Title { Vec::new() } else { read_annotations(ctx.annotations_path(&a.annotations))? };
            let by_id: HashMap<&str, &AnnotationRecord> = ann.iter().map(|r| (r.meme_id.as_str(), r)).collect();
            let mut items = Vec::new();
            for m in &corpus.memes {
                let text = tt
                    .text(m, by_id.get(m.meme_id.as_str()).copied())
                    .ok_or_else(|| anyhow!("{} has no {}", m.meme_id, tt.as_str()))?;
                items.push((m.meme_id.clone(), text.to_string()));
            }
            (Modality::Text, items)
        }
    };
    let mut store = encode(&items, modality, encoder.as_ref())?;
    if a.normalize {
        store = normalize_rows(&store)?;
    }
    save_store(&store, &a.out, Some(&ctx.provenance()))?;
    println!("{} rows x {} -> {}", store.len(), store.dim(), a.out.display());
    Ok(())
}

fn print_retrieval(report: &RetrievalReport) {
    for (tt, r) in &report.text_types {
        let fmt = |d: &memekit::retrieval::DirectionScores| {
            let cells: Vec<String> = report.ks.iter().map(|k| format!("R@{k} {:.3}", d.at(*k))).collect();
            format!("{} mean {:.3}", cells.join(" "), d.overall_mean)
        };
        eprintln!("{:<14} text2meme {} | meme2text {}", tt.as_str(), fmt(&r.text2meme), fmt(&r.meme2text));
    }
}

fn eval_config(ctx: &Ctx) -> Result<EvalConfig> {
    Ok(EvalConfig { text_types: text_types(&ctx.cfg.retrieval.texts)?, ks: ctx.cfg.retrieval.ks.clone() })
}

fn eval_retrieval(ctx: &Ctx, a: EvalRetrievalArgs) -> Result<()> {
    let corpus = restrict(load_for_media(&ctx.corpus_path(&a.input)?)?, a.split)?;
    let config = eval_config(ctx)?;
    let needs_annotations = config.text_types.iter().any(|t| *t != TextType::Title);
    let ann = if needs_annotations { read_annotations(ctx.annotations_path(&a.annotations))? } else { Vec::new() };
    let encoder = build_encoder(&ctx.cfg.encoder, ctx.cfg.seed)?;
    let mut report = evaluate(&corpus, &ann, encoder.as_ref(), &config)?;
    report.provenance = ctx.provenance();
    print_retrieval(&report);
    emit_json(a.report.as_deref(), &report)
}

fn caption_pairs(corpus: &Corpus, ann: &[AnnotationRecord], caption: TextType, split: Option<Split>) -> Vec<TrainPair> {
    if caption == TextType::MemeCaption {
        return pairs_from_corpus(corpus, ann, split);
    }
    let by_id: HashMap<&str, &AnnotationRecord> = ann.iter().map(|r| (r.meme_id.as_str(), r)).collect();
    let chosen: Vec<_> = match split {
        Some(s) => corpus.memes_in(s),
        None => corpus.memes.iter().collect(),
    };
    chosen
        .into_iter()
        .filter_map(|m| {
            let text = caption.text(m, by_id.get(m.meme_id.as_str()).copied())?;
            Some(TrainPair { id: m.meme_id.clone(), image: m.image.clone(), caption: text.to_string() })
        })
        .collect()
}

fn finetune_run(ctx: &Ctx, a: FinetuneRunArgs) -> Result<()> {
    let corpus = load_for_media(&ctx.corpus_path(&a.input)?)?;
    let caption: TextType = a.caption.parse().map_err(|e: String| anyhow!(e))?;
    let ann = if caption == TextType::Title { Vec::new() } else { read_annotations(ctx.annotations_path(&a.annotations))? };
    let (train_pairs, val_pairs) = if corpus.split_assignment.is_some() {
        (caption_pairs(&corpus, &ann, caption, Some(Split::Train)), caption_pairs(&corpus, &ann, caption, Some(Split::Validation)))
    } else {
        log::warn!("corpus has no split; training on every meme without validation");
        (caption_pairs(&corpus, &ann, caption, None), Vec::new())
    };
    let out = a
        .out
        .clone()
        .or_else(|| ctx.cfg.paths.checkpoints.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoint"));
    let spec = ModelSpec {
        dim: ctx.cfg.encoder.dim,
        seed: ctx.cfg.finetune.seed,
        max_text_tokens: ctx.cfg.encoder.max_text_tokens,
        ..ModelSpec::default()
    };
    let outcome = train(&ctx.cfg.finetune, &train_pairs, &val_pairs, LinearDualEncoder::new(spec), Some(&out))?;
    write_sidecar(&out, &ctx.provenance())?;
    let losses: Vec<String> = outcome.trace.epoch_losses().iter().map(|l| format!("{l:.4}")).collect();
    println!("epoch losses [{}]", losses.join(", "));
    if let Some(best) = outcome.trace.best_epoch {
        println!("best epoch {best}");
    }
    for flag in &outcome.trace.flags {
        log::warn!("{}", serde_json::to_string(flag)?);
    }
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn finetune_eval(ctx: &Ctx, a: FinetuneEvalArgs) -> Result<()> {
    let corpus = restrict(load_for_media(&ctx.corpus_path(&a.input)?)?, a.split)?;
    let config = eval_config(ctx)?;
    let ann = read_annotations(ctx.annotations_path(&a.annotations))?;
    let mut report = evaluate_checkpoint(&a.checkpoint, &corpus, &ann, &config)?;
    report.provenance = ctx.provenance();
    print_retrieval(&report);
    emit_json(a.report.as_deref(), &report)
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    id: String,
    prediction: String,
}

#[derive(Debug, Deserialize)]
struct ReferenceRow {
    id: String,
    #[serde(default)]
    references: Vec<String>,
    #[serde(default)]
    reference: Option<String>,
}

fn eval_metrics(ctx: &Ctx, a: EvalMetricsArgs) -> Result<()> {
    let preds: Vec<PredictionRow> = jsonl::read(&a.pred)?;
    let refs: Vec<ReferenceRow> = jsonl::read(&a.references)?;
    let mut by_id: HashMap<String, Vec<String>> = HashMap::new();
    for r in refs {
        let entry = by_id.entry(r.id).or_default();
        entry.extend(r.references);
        entry.extend(r.reference);
    }
    let mut predictions = Vec::with_capacity(preds.len());
    let mut references = Vec::with_capacity(preds.len());
    for p in preds {
        let refs = by_id.remove(&p.id).ok_or_else(|| anyhow!("no reference for {}", p.id))?;
        predictions.push(p.prediction);
        references.push(refs);
    }
    if let Some(id) = by_id.keys().next() {
        log::warn!("{} references have no prediction (e.g. {id})", by_id.len());
    }
    let metrics: Vec<Metric> =
        ctx.cfg.metrics.metrics.iter().map(|m| m.trim().parse().map_err(|e: String| anyhow!(e))).collect::<Result<_>>()?;
    let strategies: Vec<Strategy> = match ctx.cfg.metrics.strategy.as_str() {
        "all" => Strategy::ALL.to_vec(),
        s => vec![s.parse().map_err(|e: String| anyhow!(e))?],
    };
    let smoothing = if a.unsmoothed_bleu { BleuSmoothing::None } else { BleuSmoothing::AddOne };
    let mut rows = Vec::new();
    for strategy in strategies {
        let req = MetricRequest {
            predictions: predictions.clone(),
            references: references.clone(),
            strategy,
            metrics: metrics.clone(),
            bleu_smoothing: smoothing,
        };
        let row = apply_strategy(&req, &ScorerSet::default())?;
        let cells: Vec<String> = row.scores.iter().map(|(m, v)| format!("{} {v:.4}", m.as_str())).collect();
        eprintln!("{:<24} {}", strategy.as_str(), cells.join("  "));
        rows.push(row);
    }
    emit_json(a.report.as_deref(), &json!({ "items": predictions.len(), "rows": rows, "provenance": ctx.provenance() }))
}

/// Media ids served by the review service: memes and templates.
fn media_map(corpus: &Corpus) -> HashMap<String, String> {
    let memes = corpus.memes.iter().map(|m| (m.meme_id.clone(), m.image.clone()));
    let templates = corpus.templates.iter().map(|t| (t.template_id.clone(), t.base_image.clone()));
    memes.chain(templates).filter(|(_, r)| !r.is_empty()).collect()
}

fn queue_file(store: &Store, path: &Path) -> Result<usize> {
    let stage2: Vec<MatchCandidate> = load_candidates(path)?.into_iter().filter(|c| c.status == MatchStatus::Stage2Pass).collect();
    Ok(store.queue_matches(stage2)?)
}

fn serve_review(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let svc = &ctx.cfg.service;
    std::fs::create_dir_all(&svc.data_dir)?;
    let store = Store::open(&svc.data_dir)?;
    if let Some(m) = &a.matches {
        let added = queue_file(&store, m)?;
        log::info!("queued {added} new candidate pairs");
    }
    let corpus_path = a.input.corpus.clone().or_else(|| ctx.cfg.paths.corpus.clone());
    let media = match corpus_path {
        Some(p) => media_map(&load_for_media(&p)?),
        None => HashMap::new(),
    };
    if let Some(ui) = &svc.ui_dir {
        if !ui.join("index.html").is_file() {
            bail!("{} has no index.html", ui.display());
        }
    }
    if svc.admin_token.is_none() {
        log::warn!("no admin token set; survey creation, tallies and token issuing are disabled over HTTP");
    }
    let addr: SocketAddr = format!("{}:{}", svc.host, svc.port).parse().with_context(|| format!("bad address {}:{}", svc.host, svc.port))?;
    let state = AppState { store, admin_token: svc.admin_token.clone(), media, ui_dir: svc.ui_dir.clone() };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(memekit_review::serve(addr, state))?;
    Ok(())
}

fn open_store(ctx: &Ctx, arg: &DataDirArg) -> Result<Store> {
    let dir = ctx.data_dir(&arg.data_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(Store::open(&dir)?)
}

fn review(ctx: &Ctx, cmd: ReviewCmd) -> Result<()> {
    match cmd {
        ReviewCmd::Token { store, label } => {
            let token = open_store(ctx, &store)?.issue_evaluator(&label)?;
            println!("{token}");
        }
        ReviewCmd::Survey { store, memes, annotations } => {
            let mut sets = Vec::new();
            for path in &annotations {
                let records = read_annotations(Some(path.clone()))?;
                let first = records.first().ok_or_else(|| anyhow!("{} is empty", path.display()))?;
                let source = SourceDescriptor { model: first.provenance.model.clone(), with_context: first.provenance.with_context };
                if records.iter().any(|r| r.provenance.model != source.model || r.provenance.with_context != source.with_context) {
                    bail!("{} mixes models or context conditions; use one file per source", path.display());
                }
                sets.push((source, records));
            }
            let survey = create_survey(&memes, &sets, ctx.cfg.seed)?;
            let items = survey.items.len();
            let id = open_store(ctx, &store)?.add_survey(survey)?;
            println!("{id} ({items} items)");
        }
        ReviewCmd::Tally { store, survey, grid } => {
            let tally = open_store(ctx, &store)?.tally(&survey)?;
            if grid {
                print!("{}", tally.render_grid());
            } else {
                emit_json(None, &tally)?;
            }
        }
        ReviewCmd::Queue { store, candidates } => {
            let added = queue_file(&open_store(ctx, &store)?, &candidates)?;
            println!("queued {added} new pairs");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReleaseRow<'a> {
    #[serde(flatten)]
    meme: &'a memekit::MemeRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotation: Option<&'a AnnotationRecord>,
    /// Template of a human-verified pair, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    verified_template: Option<&'a str>,
}

fn export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let corpus = load_corpus(&ctx.corpus_path(&a.input)?)?;
    let ann = match ctx.annotations_path(&a.annotations) {
        Some(p) => read_annotations(Some(p))?,
        None => Vec::new(),
    };
    let matches = if a.data_dir.is_some() || a.matches.is_some() {
        exported_matches(ctx, &a.data_dir, &a.matches, true)?
    } else {
        Vec::new()
    };
    let by_id: HashMap<&str, &AnnotationRecord> = ann.iter().map(|r| (r.meme_id.as_str(), r)).collect();
    let verified: HashMap<&str, &str> = matches.iter().map(|c| (c.instance_id.as_str(), c.template_id.as_str())).collect();
    let rows: Vec<ReleaseRow> = corpus
        .memes
        .iter()
        .map(|m| ReleaseRow {
            meme: m,
            split: corpus.split_assignment.as_ref().and_then(|s| s.get(&m.meme_id).copied()),
            annotation: by_id.get(m.meme_id.as_str()).copied(),
            verified_template: verified.get(m.meme_id.as_str()).copied(),
        })
        .collect();
    std::fs::create_dir_all(&a.out)?;
    jsonl::write(&a.out.join("memes.jsonl"), &rows)?;
    jsonl::write(&a.out.join("templates.jsonl"), &corpus.templates)?;
    write_sidecar(&a.out, &ctx.provenance())?;
    let annotated = rows.iter().filter(|r| r.annotation.is_some()).count();
    println!("{} memes ({} annotated, {} verified pairs) -> {}", rows.len(), annotated, verified.len(), a.out.display());
    Ok(())
}
