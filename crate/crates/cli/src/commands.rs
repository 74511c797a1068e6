use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geotrec_core::corpus::{
    build_histories, load_interactions, split, split_general, Catalog, Interaction, LocationSource, LogFormat, Split,
    SplitSpec,
};
use geotrec_core::diagnostics::{build_queries, run_informativeness, DiagError};
use geotrec_core::embedding::{
    load_embeddings, load_item_metadata, mock_encode_all, write_embeddings, EmbeddingError, EmbeddingMatrix, GtSource,
};
use geotrec_core::enrichment::{
    enrich, Bucket, ContextCache, EnrichError, HttpProvider, MockProvider, Provider, ReplayProvider,
};
use geotrec_core::evaluation::{evaluate, improvement_table, EvalError, MetricsReport};
use geotrec_core::io::write_atomic;
use geotrec_core::losses::AuxKind;
use geotrec_core::model::{Architecture, ModelError, ModelState};
use geotrec_core::synth::{generate, SynthConfig};
use geotrec_core::training::{train_with_callback, write_log_jsonl, TrainData, TrainError};

use crate::config::{ProviderKind, RunConfig};
use crate::manifest::RunManifest;
use crate::{Cli, Command, DataArgs, DiagnoseArgs, EnrichArgs, EvalArgs, MockEmbedArgs, ReportArgs, SynthArgs, TrainArgs};

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let config_path = cli.config.clone();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Enrich(a) => run_enrich(cfg, a, config_path),
        Command::MockEmbed(a) => mock_embed(cfg, a),
        Command::Diagnose(a) => diagnose(cfg, a),
        Command::Train(a) => run_train(cfg, a, config_path),
        Command::Eval(a) => run_eval(cfg, a),
        Command::Report(a) => report(a),
    }
}

/// Remediation advice for errors a user can act on.
pub fn hint(e: &anyhow::Error) -> Option<&'static str> {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<EnrichError>() {
            return match err {
                EnrichError::ProviderExhausted(_) => Some(
                    "contexts resolved so far are cached; rerun to retry the failed keys, or pass --allow-misses",
                ),
                EnrichError::Provider(_) => Some("check GEOTREC_LLM_ENDPOINT / GEOTREC_LLM_API_KEY / GEOTREC_LLM_MODEL"),
                EnrichError::CacheFormat { .. } => Some("the cache file is corrupt; move it aside and rerun enrich"),
                _ => None,
            };
        }
        if let Some(EmbeddingError::MissingContext(_)) = cause.downcast_ref::<EmbeddingError>() {
            return Some("run `enrich` and `mock-embed` over the same log and bucket before this step");
        }
        if let Some(EvalError::MissingContext(_)) = cause.downcast_ref::<EvalError>() {
            return Some("the context embeddings do not cover this log; rerun `enrich` and `mock-embed` with the same --bucket");
        }
        if let Some(TrainError::Eval(EvalError::MissingContext(_))) = cause.downcast_ref::<TrainError>() {
            return Some("the context embeddings do not cover this log; rerun `enrich` and `mock-embed` with the same --bucket");
        }
        if let Some(err) = cause.downcast_ref::<ModelError>() {
            return match err {
                ModelError::MissingEmbedding(_) => Some("pass --items (and --contexts for context variants)"),
                ModelError::Checkpoint(_) => Some("evaluate with the same --items file the checkpoint was trained with"),
                _ => None,
            };
        }
        if cause.downcast_ref::<DiagError>().is_some() {
            return Some("every test user needs a context vector and a metadata row for the target item");
        }
    }
    None
}

fn read_log(path: &Path, default_location: Option<&str>) -> Result<Vec<Interaction>> {
    let format = if path.extension().is_some_and(|e| e == "dat") {
        LogFormat::MovielensDat(LocationSource { by_user: Default::default(), default: default_location.map(String::from) })
    } else {
        LogFormat::Jsonl
    };
    load_interactions(path, &format).with_context(|| format!("loading log {}", path.display()))
}

fn load_emb(path: &Path, what: &str) -> Result<EmbeddingMatrix> {
    load_embeddings(path).with_context(|| format!("loading {what} embeddings {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(u) = a.users {
        cfg.n_users = u;
    }
    if let Some(i) = a.items {
        cfg.n_items = i;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    ds.write(&a.out)?;
    let mut m = RunManifest::new("synth", &cfg);
    m.seed("synth", cfg.seed);
    for f in ["log.jsonl", "items.jsonl", "items.gtemb", "contexts.gtemb", "synth.json"] {
        m.output(f, &a.out.join(f))?;
    }
    m.write(&a.out)?;
    println!(
        "wrote {} interactions, {} items, {} contexts to {}",
        ds.log.len(),
        ds.items.len(),
        ds.gt_emb.len(),
        a.out.display()
    );
    Ok(())
}

fn run_enrich(mut cfg: RunConfig, a: EnrichArgs, config_path: Option<PathBuf>) -> Result<()> {
    if let Some(p) = &a.provider {
        cfg.provider.kind = ProviderKind::parse(p);
    }
    if let Some(s) = a.seed {
        cfg.provider.seed = s;
    }
    if a.replay.is_some() {
        cfg.provider.replay = a.replay.clone();
    }
    if let Some(b) = a.bucket {
        cfg.enrich.bucket = b;
    }
    if let Some(t) = a.template {
        cfg.enrich.template_version = t;
    }
    if let Some(p) = a.parallelism {
        cfg.enrich.parallelism = p;
    }
    cfg.enrich.allow_misses |= a.allow_misses;
    if a.location_override.is_some() {
        cfg.enrich.location_override = a.location_override;
    }
    let log = read_log(&a.log, None)?;
    let provider: Box<dyn Provider> = match cfg.provider.kind {
        ProviderKind::Mock => Box::new(MockProvider::new(cfg.provider.seed)),
        ProviderKind::Replay => {
            let path = cfg.provider.replay.as_ref().context("the replay provider needs --replay <file>")?;
            Box::new(ReplayProvider::load(path)?)
        }
        ProviderKind::Http => Box::new(HttpProvider::from_env()?),
    };
    let cache = ContextCache::open(&a.cache)?;
    let out = enrich(&log, provider.as_ref(), &cache, &cfg.enrich)?;
    let mut m = RunManifest::new("enrich", &serde_json::json!({ "enrich": cfg.enrich, "provider": cfg.provider }));
    m.seed("provider", cfg.provider.seed).input("log", &a.log)?;
    if let Some(r) = &cfg.provider.replay {
        m.input("replay", r)?;
    }
    if let Some(c) = &config_path {
        m.input("config", c)?;
    }
    m.output("cache", &a.cache)?;
    m.write(&a.cache)?;
    println!(
        "{} contexts ({} from cache, {} provider calls, {} unresolved) -> {}",
        out.contexts.len(),
        out.cache_hits,
        out.provider_calls,
        out.misses.len(),
        a.cache.display()
    );
    for k in &out.misses {
        eprintln!("unresolved: {k}");
    }
    Ok(())
}

fn mock_embed(mut cfg: RunConfig, mut a: MockEmbedArgs) -> Result<()> {
    if let Some(d) = a.dim {
        cfg.embed.dim = d;
    }
    if let Some(s) = a.seed {
        cfg.embed.seed = s;
    }
    if let Some(t) = a.template {
        cfg.enrich.template_version = t;
    }
    if let Some(out) = a.out.take() {
        match (&a.items, &a.contexts) {
            (Some(_), None) => a.out_items = Some(out),
            (None, Some(_)) => a.out_contexts = Some(out),
            _ => bail!("--out needs exactly one of --items / --contexts; use --out-items and --out-contexts"),
        }
    }
    if a.out_items.is_none() && a.out_contexts.is_none() {
        bail!("nothing to do: pass --items/--out-items and/or --contexts/--out-contexts");
    }
    let mut m = RunManifest::new("mock-embed", &serde_json::json!({ "embed": cfg.embed, "template": cfg.enrich.template_version }));
    m.seed("encoder", cfg.embed.seed);
    if let (Some(src), Some(dst)) = (&a.items, &a.out_items) {
        let meta = load_item_metadata(src)?;
        let texts: Vec<(String, String)> = meta.iter().map(|it| (it.item_id.clone(), it.text())).collect();
        let emb = mock_encode_all(texts.iter().map(|(k, t)| (k.clone(), t.as_str())), cfg.embed.dim, cfg.embed.seed)?;
        write_embeddings(dst, &emb)?;
        m.input("items", src)?.output("items", dst)?;
        println!("encoded {} items -> {}", emb.len(), dst.display());
    }
    if let (Some(src), Some(dst)) = (&a.contexts, &a.out_contexts) {
        let cache = ContextCache::open(src)?;
        let ctxs = cache.contexts(&cfg.enrich.template_version);
        if ctxs.is_empty() {
            bail!("no contexts for template {:?} in {}", cfg.enrich.template_version, src.display());
        }
        let texts: Vec<(String, String)> = ctxs.iter().map(|(k, c)| (k.to_string(), c.encoder_text())).collect();
        let emb = mock_encode_all(texts.iter().map(|(k, t)| (k.clone(), t.as_str())), cfg.embed.dim, cfg.embed.seed)?;
        write_embeddings(dst, &emb)?;
        m.input("contexts", src)?.output("contexts", dst)?;
        println!("encoded {} contexts -> {}", emb.len(), dst.display());
    }
    let anchor = a.out_items.as_ref().or(a.out_contexts.as_ref()).expect("checked above");
    m.write(anchor)?;
    Ok(())
}

fn diagnose(mut cfg: RunConfig, a: DiagnoseArgs) -> Result<()> {
    if let Some(k) = a.k {
        cfg.diagnose.ks = k;
    }
    if let Some(s) = a.seed {
        cfg.diagnose.seed = s;
    }
    if let Some(s) = a.samples_per_user {
        cfg.diagnose.samples_per_user = s;
    }
    if let Some(b) = a.bucket {
        cfg.enrich.bucket = b;
    }
    let items = load_emb(&a.items, "item")?;
    let contexts = load_emb(&a.contexts, "context")?;
    let log = read_log(&a.log, None)?;
    let histories = build_histories(&log, cfg.history_cap());
    let sp = split_general(&histories, cfg.split.min_history)?;
    let gt = GtSource::new(contexts, cfg.enrich.bucket);
    let queries = build_queries(&sp.test, &items, &gt)?;
    let report = run_informativeness(&queries, &items, &cfg.diagnose)?;
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = RunManifest::new("diagnose", &serde_json::json!({ "diagnose": cfg.diagnose, "bucket": cfg.enrich.bucket }));
    m.seed("diagnose", cfg.diagnose.seed);
    m.input("items", &a.items)?.input("contexts", &a.contexts)?.input("log", &a.log)?.output("report", &a.out)?;
    m.write(&a.out)?;
    println!("users {}  catalog {}", report.n_users, report.catalog_size);
    println!("{:>5}  {:>8}  {:>8}  {:>9}  {:>19}", "k", "HR(gt)", "HR(rand)", "impr %", "95% CI");
    for r in &report.records {
        println!(
            "{:>5}  {:>8.4}  {:>8.4}  {:>+9.2}  [{:+8.2}, {:+8.2}]",
            r.k, r.hr_geotemporal, r.hr_random, r.improvement_pct, r.ci_low, r.ci_high
        );
    }
    Ok(())
}

struct LoadedData {
    log_path: PathBuf,
    items_path: Option<PathBuf>,
    contexts_path: Option<PathBuf>,
    log: Vec<Interaction>,
    split: Split,
    bucket: Bucket,
}

fn load_data(cfg: &mut RunConfig, d: &DataArgs) -> Result<LoadedData> {
    let pick = |explicit: &Option<PathBuf>, name: &str, must: bool| -> Option<PathBuf> {
        explicit.clone().or_else(|| {
            let p = d.data.as_ref()?.join(name);
            (must || p.exists()).then_some(p)
        })
    };
    let log_path = pick(&d.log, "log.jsonl", true).context("pass --data <dir> or --log <file>")?;
    if let Some(m) = d.split {
        cfg.split.mode = m;
    }
    if let Some(b) = d.bucket {
        cfg.enrich.bucket = b;
    }
    let log = read_log(&log_path, None)?;
    let histories = build_histories(&log, cfg.history_cap());
    let spec = SplitSpec { ..cfg.split.clone() };
    let sp = split(&histories, &spec)?;
    Ok(LoadedData {
        log_path,
        items_path: pick(&d.items, "items.gtemb", false),
        contexts_path: pick(&d.contexts, "contexts.gtemb", false),
        log,
        split: sp,
        bucket: cfg.enrich.bucket,
    })
}

fn run_train(mut cfg: RunConfig, a: TrainArgs, config_path: Option<PathBuf>) -> Result<()> {
    let data = load_data(&mut cfg, &a.data)?;
    let t = &mut cfg.train;
    if let Some(arch) = a.variant {
        let v = &mut t.variant;
        v.architecture = arch;
        v.gt_at_train = arch.fuses_gt();
        v.gt_at_infer = arch.fuses_gt();
        if arch != Architecture::IdMetaGt {
            v.gt_input_side = false;
        }
        if arch != Architecture::AuxLoss {
            v.aux_kind = AuxKind::None;
        }
    }
    if let Some(k) = a.aux_kind {
        t.variant.aux_kind = k;
        if k != AuxKind::None {
            t.variant.architecture = Architecture::AuxLoss;
            t.variant.gt_at_train = false;
            t.variant.gt_at_infer = false;
        }
    }
    if t.variant.architecture == Architecture::AuxLoss && t.variant.aux_kind == AuxKind::None {
        bail!("the aux_loss variant needs --aux-kind (bce, cosine, pairwise_rand, pairwise_sem)");
    }
    if a.gt_train_only {
        t.variant.gt_at_infer = false;
    }
    if let Some(l) = a.lambda_aux {
        t.variant.lambda_aux = l;
    }
    if let Some(e) = a.epochs {
        t.max_epochs = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(lr) = a.lr {
        t.optimizer.lr = lr;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(d) = a.d_model {
        t.backbone.d_model = d;
    }
    t.grad_check_mode |= a.grad_check;
    let tc = cfg.train.clone();

    let meta = match (tc.variant.architecture.uses_metadata(), &data.items_path) {
        (true, Some(p)) => Some(load_emb(p, "item")?),
        (true, None) => bail!("variant {} needs item embeddings: pass --items", tc.variant.architecture.name()),
        (false, _) => None,
    };
    let gt = match (tc.variant.needs_gt(), &data.contexts_path) {
        (true, Some(p)) => Some(GtSource::new(load_emb(p, "context")?, data.bucket)),
        (true, None) => bail!("variant {} needs context embeddings: pass --contexts", tc.variant.label()),
        (false, _) => None,
    };
    let catalog = Catalog::from_log(&data.log);
    let outcome = train_with_callback(
        &tc,
        TrainData { split: &data.split, catalog: Some(&catalog), meta: meta.as_ref(), gt: gt.as_ref() },
        |r| {
            let val = r.val_ndcg10.map_or("-".to_string(), |v| format!("{v:.4}"));
            eprintln!("epoch {:>3}  loss {:.5}  val NDCG@10 {val}", r.epoch, r.train_loss);
        },
    )?;
    if let Some(m) = &meta {
        if !outcome.model.verify_frozen(m) {
            bail!("frozen metadata changed during training");
        }
    }
    outcome.model.save(&a.out)?;
    let mut log_path = a.out.clone().into_os_string();
    log_path.push(".log.jsonl");
    let log_path = PathBuf::from(log_path);
    write_log_jsonl(&log_path, &outcome.log)?;

    let mut m = RunManifest::new("train", &serde_json::json!({ "train": tc, "split": cfg.split, "bucket": data.bucket, "max_history_len": cfg.max_history_len }));
    m.seed("train", tc.seed).input("log", &data.log_path)?;
    if let (Some(p), true) = (&data.items_path, meta.is_some()) {
        m.input("items", p)?;
    }
    if let (Some(p), true) = (&data.contexts_path, gt.is_some()) {
        m.input("contexts", p)?;
    }
    if let Some(c) = &config_path {
        m.input("config", c)?;
    }
    m.output("checkpoint", &a.out)?.output("training_log", &log_path)?;
    m.write(&a.out)?;
    println!(
        "{}: best epoch {} of {}{} -> {}",
        tc.variant.label(),
        outcome.best_epoch,
        outcome.log.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn run_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let data = load_data(&mut cfg, &a.data)?;
    if let Some(k) = a.k {
        cfg.eval.ks = k;
    }
    if a.with_context.is_some() {
        cfg.eval.with_context = a.with_context;
    }
    if a.filter_seen.is_some() {
        cfg.eval.filter_seen = a.filter_seen;
    }
    let meta = data.items_path.as_ref().map(|p| load_emb(p, "item")).transpose()?;
    let model = ModelState::load(&a.ckpt, meta.as_ref()).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let with_context = cfg.eval.with_context.unwrap_or(model.variant.gt_at_infer);
    let gt = match (with_context, &data.contexts_path) {
        (true, Some(p)) => Some(GtSource::new(load_emb(p, "context")?, data.bucket)),
        (true, None) => bail!("evaluating with context needs --contexts"),
        (false, _) => None,
    };
    let report = evaluate(&model, &data.split, gt.as_ref(), &cfg.eval)?;
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = RunManifest::new("eval", &serde_json::json!({ "eval": cfg.eval, "split": cfg.split, "bucket": data.bucket, "max_history_len": cfg.max_history_len }));
    m.input("checkpoint", &a.ckpt)?.input("log", &data.log_path)?;
    if let (Some(p), true) = (&data.items_path, meta.is_some()) {
        m.input("items", p)?;
    }
    if let (Some(p), true) = (&data.contexts_path, gt.is_some()) {
        m.input("contexts", p)?;
    }
    m.output("report", &a.out)?;
    m.write(&a.out)?;
    println!("{} on {} split, {} users", report.variant, report.split_mode, report.n_users);
    for k in &report.metrics {
        let cov = k.coverage.map_or(String::new(), |c| format!("  coverage {c:.4}"));
        println!("@{:<3} HR {:.4}  NDCG {:.4}{cov}", k.k, k.hr, k.ndcg);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let read = |p: &Path| -> Result<MetricsReport> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a metrics report", p.display()))
    };
    let baseline = read(&a.baseline)?;
    let reports = a.reports.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
    if let Some(r) = reports.iter().find(|r| r.split_mode != baseline.split_mode) {
        bail!("report {} is on the {} split but the baseline is on {}", r.variant, r.split_mode, baseline.split_mode);
    }
    let table = improvement_table(&reports, &baseline);
    let with_ext = |ext: &str| {
        let mut s = a.out.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    let (txt, csv, json) = (with_ext(".txt"), with_ext(".csv"), with_ext(".json"));
    write_atomic(&txt, table.to_text().as_bytes())?;
    write_atomic(&csv, table.to_csv().as_bytes())?;
    write_atomic(&json, serde_json::to_string_pretty(&table)?.as_bytes())?;
    let mut m = RunManifest::new("report", &serde_json::json!({ "reports": a.reports.len() }));
    m.input("baseline", &a.baseline)?;
    for (i, p) in a.reports.iter().enumerate() {
        m.input(&format!("report{i}"), p)?;
    }
    m.output("text", &txt)?.output("csv", &csv)?.output("json", &json)?;
    m.write(&txt)?;
    print!("{}", table.to_text());
    Ok(())
}
