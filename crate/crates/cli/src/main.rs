//! `percept-tok`: command-line front end for the perception-token toolkit.

mod config;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use percept_tok::bench::{build_benchmark, build_count_suite, BenchmarkItem, CountItem, PlacementConfig};
use percept_tok::curriculum::{default_tasks, epoch_mix_plan, validate_curriculum, ScheduleConfig, SchedulerMode, TaskSampler, Schedule};
use percept_tok::datagen::scene::{make_scene, seed_from_id, Scene, SceneConfig};
use percept_tok::datagen::{
    bbox_gen_corpus, corpus_scene, count_multitask_corpus, depth_gen_corpus, depth_multitask_corpus,
    synth_count, CountMode, SynthConfig, Templates, ANSWER_LABEL,
};
use percept_tok::depth_codec::{
    bin_path, find_depth_span, grid_to_tokens, sample_patches, train_codebook, tokens_to_grid, Codebook,
    TrainParams,
};
use percept_tok::depth_map::DepthMap;
use percept_tok::eval::{counting_accuracy, label_from_map, relative_depth_accuracy, Answer, EvalReport, Response, Sampling};
use percept_tok::grammar::{Grammar, MaskServer};
use percept_tok::jsonl::{load_jsonl, to_jsonl_bytes};
use percept_tok::losses::{distill_loss_with_epsilon, recon_loss, Distribution, Prediction};
use percept_tok::vocab::{TokenId, Vocabulary};
use percept_tok::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{pick, RunConfig, DEFAULT_LAMBDA, DEFAULT_SEED, DEFAULT_STEPS, DEFAULT_TAU0};

#[derive(Parser)]
#[command(name = "percept-tok", version, about = "Perception-token toolkit")]
struct Cli {
    /// JSON run configuration; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, env = "PERCEPT_TOK_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the extended vocabulary.
    Vocab {
        #[command(subcommand)]
        action: VocabCmd,
    },
    /// Train, apply, or invert the depth codebook.
    Codebook {
        #[command(subcommand)]
        action: CodebookCmd,
    },
    /// Synthesize training corpora.
    Synth {
        #[command(subcommand)]
        task: SynthCmd,
    },
    /// Generate benchmark suites and oracle responses.
    Bench {
        #[command(subcommand)]
        action: BenchCmd,
    },
    /// Score responses against a suite.
    Eval {
        #[command(subcommand)]
        task: EvalCmd,
    },
    /// Evaluate a loss on files.
    Loss {
        #[command(subcommand)]
        kind: LossCmd,
    },
    /// Inspect curriculum schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleCmd,
    },
    /// Answer mask requests on stdin, one per line.
    MaskServe {
        /// Bundled grammar name or path to a JSON description.
        #[arg(long, default_value = "perception_text")]
        grammar: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a run configuration holding every default.
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    Build {
        #[arg(long, default_value_t = 32_000)]
        base_size: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CodebookCmd {
    Train {
        /// Directory of 16-bit PGM depth maps; procedural scenes when absent.
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Number of procedural maps.
        #[arg(long, default_value_t = 1000)]
        synthetic: usize,
        #[arg(long, default_value_t = 128)]
        k: usize,
        #[arg(long, default_value_t = 25)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Grid cells sampled per map (100 keeps all).
        #[arg(long, default_value_t = 100)]
        patches_per_map: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        assets: Assets,
        /// JSON array of surface forms; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Decode {
        #[arg(long)]
        tokens: PathBuf,
        #[command(flatten)]
        assets: Assets,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Assets {
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Atomic generation samples.
    #[arg(long)]
    n: Option<usize>,
    /// Images in the CoT/direct multitask set.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    assets: Assets,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// depth_gen, depth_cot and depth_direct samples.
    Depth(SynthArgs),
    /// bbox_gen, count_cot and count_direct samples.
    Count(SynthArgs),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Relative-depth suite with `n` markers per item.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=5))]
        n: u8,
        #[arg(long, default_value_t = 124)]
        scenes: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Counting suite over the same scenes.
    Count {
        #[arg(long, default_value_t = 124)]
        scenes: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Responses that answer from perception tokens of the ground truth.
    Oracle {
        #[arg(value_enum)]
        task: TaskArg,
        #[arg(long)]
        suite: PathBuf,
        #[command(flatten)]
        assets: Assets,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Depth,
    Count,
}

#[derive(Subcommand)]
enum EvalCmd {
    Depth {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[command(flatten)]
        assets: Assets,
        #[arg(long, value_enum, default_value = "nearest")]
        sampling: SamplingArg,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Count {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Nearest,
    Bilinear,
}

#[derive(Subcommand)]
enum LossCmd {
    /// MSE between a decoded depth span and a target map.
    Recon {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        assets: Assets,
    },
    /// Distillation loss of a code distribution against a token distribution.
    Distill {
        /// JSON array over the 128 depth codes.
        #[arg(long)]
        q: PathBuf,
        /// JSON array over the whole vocabulary.
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Task probabilities along the schedule, one JSON line per report step.
    Probs {
        /// Schedule JSON; the default task ladder when absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        tau0: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        every: u64,
    },
    /// Atomic/multitask sample counts per epoch.
    Plan {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        epochs: u32,
        #[arg(long)]
        start: u64,
        #[arg(long)]
        end: u64,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    Init {
        #[arg(long, default_value = "run.json")]
        out: PathBuf,
    },
}

/// Resolved settings shared by all commands.
struct Ctx {
    config: RunConfig,
    seed: u64,
}

impl Ctx {
    fn vocab_path(&self, flag: Option<PathBuf>) -> PathBuf {
        pick(self.config.vocab.clone(), flag, "vocab.json".into())
    }

    fn codebook_path(&self, flag: Option<PathBuf>) -> PathBuf {
        pick(self.config.codebook.clone(), flag, "codebook.json".into())
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        pick(self.config.out_dir.clone(), flag, ".".into())
    }

    fn vocab(&self, flag: Option<PathBuf>) -> Result<Vocabulary> {
        Vocabulary::load(self.vocab_path(flag))
    }

    fn assets(&self, assets: Assets) -> Result<(Codebook, Vocabulary)> {
        Ok((
            Codebook::load(self.codebook_path(assets.codebook))?,
            self.vocab(assets.vocab)?,
        ))
    }

    fn scene_config(&self) -> SceneConfig {
        self.config.scene.clone().unwrap_or_default()
    }

    fn placement(&self) -> PlacementConfig {
        self.config.placement.clone().unwrap_or_default()
    }

    fn templates(&self, flag: Option<PathBuf>) -> Result<Templates> {
        match self.config.templates.clone().or(flag) {
            Some(path) => Templates::load(path),
            None => Ok(Templates::default()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(jobs) = config.jobs.or(cli.jobs) {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let ctx = Ctx {
        seed: pick(config.seed, cli.seed, DEFAULT_SEED),
        config,
    };
    match cli.command {
        Command::Vocab { action: VocabCmd::Build { base_size, out } } => {
            let vocab = Vocabulary::build(base_size);
            let out = ctx.vocab_path(out);
            write_atomic(&out, vocab.to_json()?.as_bytes())?;
            report(json!({ "vocab": out, "size": vocab.len() }))
        }
        Command::Codebook { action } => codebook(&ctx, action),
        Command::Synth { task } => synth(&ctx, task),
        Command::Bench { action } => bench(&ctx, action),
        Command::Eval { task } => eval(&ctx, task),
        Command::Loss { kind } => loss(&ctx, kind),
        Command::Schedule { action } => schedule(&ctx, action),
        Command::MaskServe { grammar, vocab } => {
            let mut server = MaskServer::new(Grammar::resolve(&grammar)?, ctx.vocab(vocab)?);
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout().lock();
            for line in stdin.lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                writeln!(stdout, "{}", server.handle(line.trim()))?;
                stdout.flush()?;
            }
            Ok(())
        }
        Command::Config { action: ConfigCmd::Init { out } } => {
            let text = serde_json::to_string_pretty(&RunConfig::defaults())? + "\n";
            write_atomic(&out, text.as_bytes())?;
            report(json!({ "config": out }))
        }
    }
}

fn report(value: serde_json::Value) -> Result<()> {
    println!("{value}");
    Ok(())
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl_bytes(items)?)
}

fn read_tokens(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let pieces: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    pieces.iter().map(|p| vocab.surface_to_id(p)).collect()
}

fn surfaces(ids: &[TokenId], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter().map(|&t| vocab.id_to_surface(t)).collect()
}

fn codebook(ctx: &Ctx, action: CodebookCmd) -> Result<()> {
    match action {
        CodebookCmd::Train { maps, synthetic, k, max_iters, tol, patches_per_map, out } => {
            let depth_maps: Vec<DepthMap> = match maps {
                Some(dir) => load_map_dir(&dir)?,
                None => (0..synthetic)
                    .map(|i| corpus_scene(ctx.seed, "codebook", i, &ctx.scene_config()).depth)
                    .collect(),
            };
            let patches = sample_patches(&depth_maps, patches_per_map, ctx.seed)?;
            let params = TrainParams { k, seed: ctx.seed, max_iters, tol };
            let (cb, train) = train_codebook(&patches, &params)?;
            let out = ctx.codebook_path(out);
            let bin = bin_path(&out);
            write_atomic(&bin, &cb.to_le_bytes())?;
            let name = bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            write_atomic(&out, cb.header_json(&name)?.as_bytes())?;
            report(json!({
                "codebook": out,
                "maps": depth_maps.len(),
                "patches": patches.len(),
                "iterations": train.iterations,
                "converged": train.converged,
                "monotone": train.is_monotone(),
                "final_mse": train.final_mse(patches.len()),
            }))
        }
        CodebookCmd::Encode { input, assets, out } => {
            let (cb, vocab) = ctx.assets(assets)?;
            let map = DepthMap::load_pgm(&input)?;
            let grid = cb.encode(&map.to_canonical())?;
            let text = serde_json::to_string(&surfaces(&grid_to_tokens(&grid, &vocab), &vocab)?)? + "\n";
            match out {
                Some(out) => write_atomic(&out, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        CodebookCmd::Decode { tokens, assets, out } => {
            let (cb, vocab) = ctx.assets(assets)?;
            let grid = tokens_to_grid(&read_tokens(&tokens, &vocab)?, &vocab)?;
            write_atomic(&out, &cb.decode(&grid)?.to_pgm_bytes())?;
            report(json!({ "map": out }))
        }
    }
}

/// Every `.pgm` in `dir`, sorted by file name and resized to the canonical grid.
fn load_map_dir(dir: &Path) -> Result<Vec<DepthMap>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = DepthMap::load_pgm(p)?;
            Ok(DepthMap::normalized(raw.width(), raw.height(), raw.values())?.to_canonical())
        })
        .collect()
}

fn synth(ctx: &Ctx, task: SynthCmd) -> Result<()> {
    match task {
        SynthCmd::Depth(args) => {
            let (cb, vocab) = ctx.assets(args.assets.clone())?;
            let config = synth_config(ctx, &args)?;
            let out = ctx.out_dir(args.out_dir);
            let n = args.n.unwrap_or(percept_tok::datagen::DEFAULT_DEPTH_GEN);
            let images = args.images.unwrap_or(percept_tok::datagen::DEFAULT_DEPTH_MULTITASK_IMAGES);
            let gen = depth_gen_corpus(n, ctx.seed, &cb, &vocab, &config)?;
            let multi = depth_multitask_corpus(images, ctx.seed, &cb, &vocab, &config)?;
            write_jsonl(&out.join("depth_gen.jsonl"), &gen)?;
            write_jsonl(&out.join("depth_cot.jsonl"), &multi.cot)?;
            write_jsonl(&out.join("depth_direct.jsonl"), &multi.direct)?;
            report(json!({
                "depth_gen": gen.len(),
                "depth_cot": multi.cot.len(),
                "depth_direct": multi.direct.len(),
                "rejected_scenes": multi.skipped,
            }))
        }
        SynthCmd::Count(args) => {
            let vocab = ctx.vocab(args.assets.vocab.clone())?;
            let config = synth_config(ctx, &args)?;
            let out = ctx.out_dir(args.out_dir);
            let n = args.n.unwrap_or(percept_tok::datagen::DEFAULT_BBOX_GEN);
            let images = args.images.unwrap_or(percept_tok::datagen::DEFAULT_COUNT_MULTITASK_IMAGES);
            let gen = bbox_gen_corpus(n, ctx.seed, &vocab, &config)?;
            let multi = count_multitask_corpus(images, ctx.seed, &vocab, &config)?;
            write_jsonl(&out.join("bbox_gen.jsonl"), &gen)?;
            write_jsonl(&out.join("count_cot.jsonl"), &multi.cot)?;
            write_jsonl(&out.join("count_direct.jsonl"), &multi.direct)?;
            report(json!({
                "bbox_gen": gen.len(),
                "count_cot": multi.cot.len(),
                "count_direct": multi.direct.len(),
            }))
        }
    }
}

fn synth_config(ctx: &Ctx, args: &SynthArgs) -> Result<SynthConfig> {
    Ok(SynthConfig {
        scene: ctx.scene_config(),
        placement: ctx.placement(),
        templates: ctx.templates(args.templates.clone())?,
    })
}

fn bench_scenes(ctx: &Ctx, n: usize) -> Vec<Scene> {
    let config = ctx.scene_config();
    (0..n).map(|i| corpus_scene(ctx.seed, "bench", i, &config)).collect()
}

fn bench(ctx: &Ctx, action: BenchCmd) -> Result<()> {
    match action {
        BenchCmd::Gen { n, scenes, out_dir } => {
            let out = ctx.out_dir(out_dir);
            let scenes = bench_scenes(ctx, scenes);
            let suite = build_benchmark(&scenes, n as usize, &ctx.placement(), ctx.seed)?;
            for scene in &scenes {
                write_atomic(&out.join(percept_tok::bench::depth_path(scene)), &scene.depth.to_pgm_bytes())?;
            }
            let path = out.join(format!("bench_n{n}.jsonl"));
            write_jsonl(&path, &suite.items)?;
            report(json!({ "suite": path, "items": suite.items.len(), "skipped": suite.skipped }))
        }
        BenchCmd::Count { scenes, out_dir } => {
            let out = ctx.out_dir(out_dir);
            let suite = build_count_suite(&bench_scenes(ctx, scenes), ctx.seed);
            let path = out.join("count.jsonl");
            write_jsonl(&path, &suite)?;
            report(json!({ "suite": path, "items": suite.len() }))
        }
        BenchCmd::Oracle { task, suite, assets, out } => {
            let responses = match task {
                TaskArg::Depth => {
                    let (cb, vocab) = ctx.assets(assets)?;
                    let items: Vec<BenchmarkItem> = load_jsonl(&suite)?;
                    let root = suite.parent().unwrap_or(Path::new("."));
                    items
                        .iter()
                        .map(|item| depth_oracle(item, root, &cb, &vocab))
                        .collect::<Result<Vec<_>>>()?
                }
                TaskArg::Count => {
                    let vocab = ctx.vocab(assets.vocab)?;
                    let items: Vec<CountItem> = load_jsonl(&suite)?;
                    items
                        .iter()
                        .map(|item| count_oracle(ctx, item, &vocab))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            write_jsonl(&out, &responses)?;
            report(json!({ "responses": out, "items": responses.len() }))
        }
    }
}

/// Encodes the item's depth map and answers from the decoded span.
fn depth_oracle(item: &BenchmarkItem, root: &Path, cb: &Codebook, vocab: &Vocabulary) -> Result<Response> {
    let map = DepthMap::load_pgm(root.join(&item.depth_pgm_path))?;
    let tokens = grid_to_tokens(&cb.encode(&map.to_canonical())?, vocab);
    let grid = find_depth_span(&tokens, vocab)?.expect("encoded span");
    let label = label_from_map(&cb.decode(&grid)?, item, Sampling::Nearest);
    let mut pieces = surfaces(&tokens, vocab)?;
    pieces.push(ANSWER_LABEL.to_owned());
    pieces.push(label);
    Ok(Response { id: item.id.clone(), answer: Answer::Pieces(pieces) })
}

/// Emits the ground-truth boxes of a procedural scene, then their number.
fn count_oracle(ctx: &Ctx, item: &CountItem, vocab: &Vocabulary) -> Result<Response> {
    let seed = seed_from_id(&item.image_id)
        .ok_or_else(|| Error::Unparseable(format!("`{}` is not a procedural scene id", item.image_id)))?;
    let scene = make_scene(seed, &ctx.scene_config());
    let sample = synth_count(&scene, &item.category, vocab, &Templates::default(), CountMode::Cot)?;
    Ok(Response { id: item.id.clone(), answer: Answer::Pieces(sample.response) })
}

fn eval(ctx: &Ctx, task: EvalCmd) -> Result<()> {
    let (report_value, out): (EvalReport, Option<PathBuf>) = match task {
        EvalCmd::Depth { suite, responses, assets, sampling, out } => {
            let (cb, vocab) = ctx.assets(assets)?;
            let items: Vec<BenchmarkItem> = load_jsonl(&suite)?;
            let responses: Vec<Response> = load_jsonl(&responses)?;
            let sampling = match sampling {
                SamplingArg::Nearest => Sampling::Nearest,
                SamplingArg::Bilinear => Sampling::Bilinear,
            };
            (relative_depth_accuracy(&suite_name(&suite), &items, &responses, &cb, &vocab, sampling)?, out)
        }
        EvalCmd::Count { suite, responses, vocab, out } => {
            let vocab = ctx.vocab(vocab)?;
            let items: Vec<CountItem> = load_jsonl(&suite)?;
            let responses: Vec<Response> = load_jsonl(&responses)?;
            (counting_accuracy(&suite_name(&suite), &items, &responses, &vocab)?, out)
        }
    };
    if let Some(out) = out {
        write_atomic(&out, (serde_json::to_string_pretty(&report_value)? + "\n").as_bytes())?;
    }
    print!("{}", report_value.to_table());
    Ok(())
}

fn suite_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn loss(ctx: &Ctx, kind: LossCmd) -> Result<()> {
    match kind {
        LossCmd::Recon { pred, target, assets } => {
            let (cb, vocab) = ctx.assets(assets)?;
            let grid = tokens_to_grid(&read_tokens(&pred, &vocab)?, &vocab)?;
            let target = DepthMap::load_pgm(&target)?;
            let value = recon_loss(Prediction::Hard(&grid), &target, &cb)?;
            report(json!({ "recon_mse": value }))
        }
        LossCmd::Distill { q, p, vocab, epsilon } => {
            let vocab = ctx.vocab(vocab)?;
            let q = Distribution::new(serde_json::from_str(&std::fs::read_to_string(q)?)?)?;
            let p = Distribution::new(serde_json::from_str(&std::fs::read_to_string(p)?)?)?;
            let eps = pick(ctx.config.epsilon, epsilon, percept_tok::losses::LOG_EPSILON);
            let value = distill_loss_with_epsilon(&q, &p, vocab.mapping(), eps)?;
            report(json!({ "distill_loss": value }))
        }
    }
}

fn schedule(ctx: &Ctx, action: ScheduleCmd) -> Result<()> {
    match action {
        ScheduleCmd::Probs { schedule, tau0, lambda, steps, every } => {
            let file = match schedule {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => ScheduleConfig {
                    tau0: DEFAULT_TAU0,
                    lambda: DEFAULT_LAMBDA,
                    steps: DEFAULT_STEPS,
                    tasks: default_tasks(),
                    mode: SchedulerMode::Softmax,
                    seed: ctx.seed,
                    invert_difficulty: false,
                },
            };
            let sched = Schedule::new(
                pick(ctx.config.tau0, tau0, file.tau0),
                pick(ctx.config.lambda, lambda, file.lambda),
                pick(ctx.config.steps, steps, file.steps),
            )?;
            validate_curriculum(&file.tasks)?;
            let sampler = TaskSampler::new(file.tasks.clone(), sched, file.invert_difficulty)?;
            let every = every.max(1);
            let mut lines = Vec::new();
            let mut step = 0;
            loop {
                let probs: serde_json::Map<String, serde_json::Value> = file
                    .tasks
                    .iter()
                    .zip(sampler.probs(step))
                    .map(|(t, p)| (t.name.clone(), json!(p)))
                    .collect();
                lines.push(json!({ "step": step, "tau": sched.temperature(step), "probs": probs }));
                if step >= sched.steps {
                    break;
                }
                step = (step + every).min(sched.steps);
            }
            for line in lines {
                println!("{line}");
            }
            Ok(())
        }
        ScheduleCmd::Plan { n, epochs, start, end } => {
            for (e, mix) in epoch_mix_plan(n, epochs, start, end)?.iter().enumerate() {
                println!("{}", json!({ "epoch": e, "atomic": mix.atomic, "multitask": mix.multitask }));
            }
            Ok(())
        }
    }
}
