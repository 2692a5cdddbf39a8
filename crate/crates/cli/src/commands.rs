use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use scene_core::agent::{
    build_vocab, read_curve_csv, train, write_curve_csv, AgentKind, AgentModel, ImageRuntime, TrainConfig,
};
use scene_core::env::{serve_adapter, split_pools, EntityPool, LocalEnv, TextEnv, WorldSpec};
use scene_core::eval::{compare, evaluate, plot_curves, smooth, GameSet, MetricsReport, Split};
use scene_core::experiment::{self, Assets};
use scene_core::explain::{explain_step, write_bundle};
use scene_core::imagery::{write_synthetic_corpus, ImageCache, ImageSourceKind, LocalCorpusBackend};
use scene_core::nn::{load_checkpoint, save_checkpoint, Vocab};
use scene_core::phrase::{extract_phrases, Lexicon};
use scene_core::seed::mix_seed;

use crate::config::{self, RunConfig};
use crate::manifest::{RunManifest, FILE as MANIFEST_FILE};
use crate::{CacheAction, Command, Common, PoolChoice, SplitChoice};

pub const CACHE_ENV: &str = "SCENE_CACHE_DIR";

struct Run {
    config: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Resolves the config (defaults < file < flags) and writes the opening
    /// manifest.
    fn start(name: &str, common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Result<Run> {
        let run = Run::resolve(name, common, flags)?;
        run.manifest.write(&run.out)?;
        Ok(run)
    }

    fn resolve(name: &str, common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Result<Run> {
        let mut config = config::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        flags(&mut config);
        config.train.master_seed = config.seed;
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from("scene-out").join(name));
        let manifest = RunManifest::new(name, serde_json::to_value(&config)?, config.seed);
        Ok(Run { config, out, manifest })
    }

    fn finish(mut self, outputs: Vec<PathBuf>) -> Result<()> {
        self.manifest.finish(&self.out, outputs)
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, difficulty, count, pool } => {
            let run = Run::start("gen", &common, |c| {
                c.difficulty = difficulty.unwrap_or(c.difficulty);
                c.count = count.unwrap_or(c.count);
            })?;
            gen(run, pool)
        }
        Command::PretrainGen { common, epochs, encoder_epochs } => {
            let run = Run::start("pretrain-gen", &common, |c| {
                c.assets.generator.epochs = epochs.unwrap_or(c.assets.generator.epochs);
                c.assets.encoder.epochs = encoder_epochs.unwrap_or(c.assets.encoder.epochs);
            })?;
            pretrain(run)
        }
        Command::Train {
            common,
            agent,
            episodes,
            learning_rate,
            step_cap,
            difficulty,
            image_source,
            no_finetune,
            worlds,
            assets,
            corpus,
        } => {
            let run = Run::start("train", &common, |c| {
                let t = &mut c.train;
                if let Some(agent) = agent {
                    t.agent = agent;
                    if agent != AgentKind::Multimodal {
                        t.image_source = ImageSourceKind::None;
                    } else if t.image_source == ImageSourceKind::None {
                        t.image_source = ImageSourceKind::Generator;
                    }
                }
                if let Some(source) = image_source {
                    t.image_source = source.into();
                }
                if no_finetune || t.image_source != ImageSourceKind::Generator {
                    t.finetune_generator = false;
                }
                t.episodes = episodes.unwrap_or(t.episodes);
                t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
                t.step_cap = step_cap.unwrap_or(t.step_cap);
                c.difficulty = difficulty.unwrap_or(c.difficulty);
                c.corpus = corpus.or(c.corpus.take());
            })?;
            train_cmd(run, worlds.as_deref(), assets.as_deref())
        }
        Command::Eval { common, checkpoint, random, runs, split, difficulty, step_cap, worlds, corpus } => {
            if checkpoint.is_none() && !random {
                bail!("eval needs --checkpoint or --random");
            }
            let run = Run::start("eval", &common, |c| {
                c.runs = runs.unwrap_or(c.runs);
                c.difficulty = difficulty.unwrap_or(c.difficulty);
                c.train.step_cap = step_cap.unwrap_or(c.train.step_cap);
                c.corpus = corpus.or(c.corpus.take());
            })?;
            eval_cmd(run, checkpoint.as_deref(), split, worlds.as_deref())
        }
        Command::Compare { common, reports, curves } => {
            let run = Run::start("compare", &common, |_| {})?;
            compare_cmd(run, &reports, &curves)
        }
        Command::Cache { common, action, query_file, corpus } => {
            let run = Run::start("cache", &common, |c| c.corpus = corpus.or(c.corpus.take()))?;
            cache_cmd(run, action, query_file.as_deref())
        }
        Command::Explain { common, checkpoint, world, steps, corpus } => {
            let run = Run::start("explain", &common, |c| c.corpus = corpus.or(c.corpus.take()))?;
            explain_cmd(run, &checkpoint, world.as_deref(), steps)
        }
        Command::Phrases { common, text, lexicon } => {
            let run = Run::resolve("phrases", &common, |c| c.lexicon = lexicon.or(c.lexicon.take()))?;
            phrases_cmd(&run.config, text)?;
            if common.out.is_some() {
                run.manifest.write(&run.out)?;
            }
            Ok(())
        }
        Command::ServeEnv { common } => {
            let run = Run::resolve("serve-env", &common, |_| {})?;
            if common.out.is_some() {
                run.manifest.write(&run.out)?;
            }
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve_adapter(stdin.lock(), stdout.lock(), &EntityPool::default_pool()).context("adapter")
        }
    }
}

fn gen(run: Run, pool: PoolChoice) -> Result<()> {
    let c = &run.config;
    let master = EntityPool::default_pool();
    let (pool, stream) = match pool {
        PoolChoice::Master => (master, 0),
        PoolChoice::Train => (split_pools(&master, c.seed, c.out_fraction)?.0, 1),
        PoolChoice::Out => (split_pools(&master, c.seed, c.out_fraction)?.1, 2),
    };
    let worlds = experiment::worlds(&pool, c.difficulty, c.seed, stream, c.count)?;
    let mut outputs = Vec::new();
    for world in &worlds {
        let path = run.out.join(format!("{}.json", world.id()));
        world.save(&path)?;
        outputs.push(path);
    }
    println!("wrote {} worlds to {}", worlds.len(), run.out.display());
    run.finish(outputs)
}

fn pretrain(run: Run) -> Result<()> {
    let c = &run.config;
    let assets = experiment::pretrain_assets(&EntityPool::default_pool(), &c.train.model, &c.assets)?;
    let path = run.out.join("assets.ckpt");
    save_checkpoint(&path, &assets.to_checkpoint())?;
    println!("generator losses {:?}", assets.generator_losses);
    println!("encoder losses {:?}", assets.encoder_losses);
    run.finish(vec![path])
}

fn load_worlds(dir: &Path) -> Result<Vec<Arc<WorldSpec>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no world files in {}", dir.display());
    }
    paths.iter().map(|p| Ok(Arc::new(WorldSpec::load(p)?))).collect()
}

fn games(config: &RunConfig, dir: Option<&Path>, split: SplitChoice) -> Result<Vec<Arc<WorldSpec>>> {
    if let Some(dir) = dir {
        return load_worlds(dir);
    }
    let b = experiment::benchmark(
        &EntityPool::default_pool(),
        config.difficulty,
        config.seed,
        config.train_worlds,
        config.out_worlds,
        config.out_fraction,
    )?;
    Ok(match split {
        SplitChoice::In => b.train,
        SplitChoice::Out => b.out,
    })
}

fn lexicon(config: &RunConfig) -> Result<Lexicon> {
    match &config.lexicon {
        Some(path) => Ok(Lexicon::load(path)?),
        None => Ok(Lexicon::base()),
    }
}

fn cache_root(config: &RunConfig, out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .or_else(|| config.cache_dir.clone())
        .unwrap_or_else(|| out.join("cache"))
}

struct Retrieval {
    cache: ImageCache,
    backend: LocalCorpusBackend,
}

/// Cache plus corpus backend. Without a configured corpus, a synthetic one
/// is written under the output directory.
fn retrieval(config: &RunConfig, out: &Path) -> Result<Retrieval> {
    let size = config.train.model.image_size;
    let corpus = match &config.corpus {
        Some(dir) => dir.clone(),
        None => {
            let dir = out.join("corpus");
            write_synthetic_corpus(&dir, &EntityPool::default_pool(), size)?;
            dir
        }
    };
    Ok(Retrieval { cache: ImageCache::open(cache_root(config, out), size)?, backend: LocalCorpusBackend::open(corpus, size)? })
}

fn runtime<'a>(config: &TrainConfig, retrieval: Option<&'a Retrieval>) -> ImageRuntime<'a> {
    match (config.image_source, retrieval) {
        (ImageSourceKind::Retrieval, Some(r)) => ImageRuntime::Retrieval { backend: &r.backend, cache: &r.cache },
        _ => experiment::generator_runtime(config, config.master_seed),
    }
}

fn train_cmd(run: Run, worlds: Option<&Path>, assets_path: Option<&Path>) -> Result<()> {
    let c = &run.config;
    c.train.validate()?;
    let games = games(c, worlds, SplitChoice::In)?;
    let mut outputs = Vec::new();
    let assets = if c.train.agent == AgentKind::Multimodal && c.train.image_source == ImageSourceKind::Generator {
        Some(match assets_path {
            Some(path) => Assets::from_checkpoint(&load_checkpoint(path)?)?,
            None => {
                let assets = experiment::pretrain_assets(&EntityPool::default_pool(), &c.train.model, &c.assets)?;
                let path = run.out.join("assets.ckpt");
                save_checkpoint(&path, &assets.to_checkpoint())?;
                outputs.push(path);
                assets
            }
        })
    } else {
        None
    };
    let mut model = experiment::build_model(&c.train, build_vocab(&games), mix_seed(&[c.seed, 7]), assets.as_ref())?;
    let retrieval = match c.train.image_source {
        ImageSourceKind::Retrieval => Some(retrieval(c, &run.out)?),
        _ => None,
    };
    let runtime = runtime(&c.train, retrieval.as_ref());
    let curve = train(&mut model, &games, &c.train, &runtime, &lexicon(c)?, Some(&run.out))?;

    let checkpoint = run.out.join("checkpoint.ckpt");
    save_checkpoint(&checkpoint, &model.checkpoint(c.seed))?;
    let curve_path = run.out.join("curve.csv");
    write_curve_csv(&curve_path, &curve)?;
    if let Some(last) = curve.last() {
        println!("episode {} score {:.3} steps {}", last.episode, last.normalized_score, last.steps);
    }
    outputs.extend([checkpoint, curve_path]);
    run.finish(outputs)
}

/// The agent in `checkpoint`, or the random agent.
fn load_model(path: Option<&Path>, config: &TrainConfig) -> Result<AgentModel> {
    match path {
        Some(path) => Ok(AgentModel::from_checkpoint(&load_checkpoint(path)?)?),
        None => Ok(AgentModel::new(AgentKind::Random, config.model.clone(), Vocab::from_words::<_, &str>([]), 0, None)?),
    }
}

/// Aligns the image settings of `config` with what `model` was built for.
fn adapt(config: &mut TrainConfig, model: &AgentModel) {
    config.agent = model.kind;
    config.model = model.config.clone();
    config.image_source = match (model.kind, &model.generator) {
        (AgentKind::Multimodal, Some(_)) => ImageSourceKind::Generator,
        (AgentKind::Multimodal, None) => ImageSourceKind::Retrieval,
        _ => ImageSourceKind::None,
    };
    config.finetune_generator = false;
}

fn eval_cmd(mut run: Run, checkpoint: Option<&Path>, split: SplitChoice, worlds: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, &run.config.train)?;
    adapt(&mut run.config.train, &model);
    let c = &run.config;
    let games = games(c, worlds, split)?;
    let retrieval = match c.train.image_source {
        ImageSourceKind::Retrieval => Some(retrieval(c, &run.out)?),
        _ => None,
    };
    let runtime = runtime(&c.train, retrieval.as_ref());
    let split = match split {
        SplitChoice::In => Split::In,
        SplitChoice::Out => Split::Out,
    };
    let report = evaluate(&model, &GameSet { split, games }, c.runs, &c.train, &runtime, &lexicon(c)?)?;
    report.save(&run.out, "report")?;
    for cell in &report.cells {
        println!(
            "{} {} {}: score {:.3} ± {:.3}, steps {:.2} ± {:.2}",
            cell.agent.name(),
            cell.level.name(),
            cell.split.name(),
            cell.score_mean,
            cell.score_std,
            cell.steps_mean,
            cell.steps_std
        );
    }
    let outputs = vec![run.out.join("report.json"), run.out.join("report.csv")];
    run.finish(outputs)
}

/// Agent and difficulty recorded by the run that wrote `curve`.
fn curve_label(curve: &Path) -> (String, String) {
    let fallback = || {
        let stem = curve.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
        (stem, "all".to_string())
    };
    let Some(manifest) = curve.parent().map(|d| d.join(MANIFEST_FILE)) else { return fallback() };
    let Ok(text) = std::fs::read_to_string(manifest) else { return fallback() };
    let Ok(m) = serde_json::from_str::<RunManifest>(&text) else { return fallback() };
    let agent = m.config.pointer("/train/agent").and_then(|v| v.as_str()).map(str::to_string);
    let level = m.config.pointer("/difficulty").and_then(|v| v.as_str()).map(str::to_string);
    match (agent, level) {
        (Some(a), Some(l)) => (format!("{a} (seed {})", m.master_seed), l),
        _ => fallback(),
    }
}

fn compare_cmd(run: Run, reports: &[PathBuf], curves: &[PathBuf]) -> Result<()> {
    let loaded = reports.iter().map(|p| MetricsReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let table = compare(&loaded)?.render();
    print!("{table}");
    let table_path = run.out.join("table.txt");
    std::fs::write(&table_path, &table)?;
    let mut outputs = vec![table_path];

    let mut by_level: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for path in curves {
        let points = read_curve_csv(path)?;
        let scores: Vec<f64> = points.iter().map(|p| p.normalized_score).collect();
        let (label, level) = curve_label(path);
        by_level.entry(level).or_default().push((label, smooth(&scores, 10)));
    }
    for (level, series) in &by_level {
        let path = run.out.join(format!("curves-{level}.png"));
        plot_curves(&path, series, 640, 400)?;
        for (k, (label, _)) in series.iter().enumerate() {
            println!("{level} curve {k}: {label}");
        }
        outputs.push(path);
    }
    run.finish(outputs)
}

fn cache_cmd(run: Run, action: CacheAction, query_file: Option<&Path>) -> Result<()> {
    let c = &run.config;
    let root = cache_root(c, &run.out);
    match action {
        CacheAction::Stats => {
            let cache = ImageCache::open(&root, c.train.model.image_size)?;
            println!("{}", serde_json::json!({ "root": root, "entries": cache.len() }));
        }
        CacheAction::Clear => {
            let cache = ImageCache::open(&root, c.train.model.image_size)?;
            let before = cache.len();
            cache.clear()?;
            println!("cleared {before} entries from {}", root.display());
        }
        CacheAction::Warm => {
            let Some(file) = query_file else { bail!("cache warm needs a query file") };
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let r = retrieval(c, &run.out)?;
            for query in text.lines().map(str::trim).filter(|q| !q.is_empty()) {
                r.cache.fetch(query, &r.backend)?;
            }
            let stats = r.cache.stats();
            println!(
                "{}",
                serde_json::json!({
                    "root": root,
                    "entries": r.cache.len(),
                    "hits": stats.hits,
                    "misses": stats.misses,
                    "backend_calls": stats.backend_calls,
                })
            );
        }
    }
    run.finish(vec![root])
}

fn explain_cmd(mut run: Run, checkpoint: &Path, world: Option<&Path>, steps: usize) -> Result<()> {
    let model = AgentModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    adapt(&mut run.config.train, &model);
    let c = &run.config;
    let world = match world {
        Some(path) => Arc::new(WorldSpec::load(path)?),
        None => experiment::worlds(&EntityPool::default_pool(), c.difficulty, c.seed, 0, 1)?.remove(0),
    };
    let retrieval = match c.train.image_source {
        ImageSourceKind::Retrieval => Some(retrieval(c, &run.out)?),
        _ => None,
    };
    let runtime = runtime(&c.train, retrieval.as_ref());
    let lexicon = lexicon(c)?;
    let mut env = LocalEnv::new(world, c.train.step_cap);
    let mut observation = env.reset()?;
    let mut state = model.text_encoder().zero_state();
    let mut outputs = Vec::new();
    for i in 0..steps {
        if observation.done {
            break;
        }
        let (bundle, next) = explain_step(&model, &observation, &state, &c.train, &runtime, &lexicon)?;
        let dir = run.out.join(format!("step-{i}"));
        let written = write_bundle(&dir, &bundle)?;
        println!("step {i}: {} ({} panels)", bundle.action, written.panels.len());
        outputs.push(dir);
        observation = env.step(&bundle.action)?;
        state = next;
    }
    run.finish(outputs)
}

fn phrases_cmd(config: &RunConfig, text: Option<String>) -> Result<()> {
    let text = match text {
        Some(t) => t,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    for phrase in extract_phrases(&text, &lexicon(config)?) {
        println!("{}\t{}", phrase.surface, phrase.query);
    }
    Ok(())
}
