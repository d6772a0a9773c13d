use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nasprune::checkpoint::{self, Checkpoint, Metadata, TrainingMeta};
use nasprune::data::{read_corpus, split, WindowSet};
use nasprune::eval::{eval_loss, measure_latency, pareto_front, perplexity, ParetoPoint};
use nasprune::grid::{build_grid, samplers, GridSpec};
use nasprune::importance::{apply_sorting, block_scorers, collect_stats, rpd_from_perplexities, score_components, AggregationScheme};
use nasprune::model::{extract_subnet, init_supernet, SuperNetWeights};
use nasprune::search::{count_params, estimate_flops, SearchSpace, SubNetworkConfig};
use nasprune::train::{finetune_independent, train as run_training, InitMode, TrainConfig, TrainMode, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{state, CliError, CliResult};
use crate::table::{self, EvalRow};
use crate::{plot, EvalArgs, ExtractArgs, GridArgs, InitArgs, LatencyArgs, ParetoArgs, SortArgs, TrainArgs};

pub struct Context {
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
    pub ckpt: PathBuf,
}

struct Corpus {
    train: WindowSet,
    valid: WindowSet,
}

impl Context {
    fn corpus(&self) -> CliResult<Corpus> {
        let seq = self.cfg.train.seq_len;
        if seq > self.cfg.model.max_seq_len {
            return Err(CliError::Config(format!(
                "train.seq_len {seq} exceeds model.max_seq_len {}",
                self.cfg.model.max_seq_len
            )));
        }
        let path = self.cfg.corpus_path(self.config_path.as_deref());
        let bytes = read_corpus(&path)
            .map_err(|e| CliError::Config(format!("cannot read corpus {}: {e}", path.display())))?;
        let (tr, va) = split(&bytes, self.cfg.data.valid_fraction)?;
        Ok(Corpus {
            train: WindowSet::new(tr, seq)?,
            valid: WindowSet::new(va, seq)?,
        })
    }

    fn load(&self) -> CliResult<Checkpoint> {
        load_dir(&self.ckpt)
    }

    fn space(&self, ck: &Checkpoint) -> CliResult<SearchSpace> {
        match &ck.meta.space {
            Some(s) => Ok(s.clone()),
            None => self.cfg.space.build(&ck.weights.cfg),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(stream);
        r
    }
}

fn load_dir(dir: &Path) -> CliResult<Checkpoint> {
    if !dir.join(checkpoint::MANIFEST).exists() {
        return Err(state(format!("no checkpoint in {}; run `init` first", dir.display())));
    }
    Ok(checkpoint::load(dir)?)
}

fn is_finetuned(meta: &Metadata) -> bool {
    meta.training.as_ref().is_some_and(|t| t.config.is_some())
}

fn require_supernet(ck: &Checkpoint, cmd: &str) -> CliResult<()> {
    if ck.meta.extracted_from.is_some() {
        return Err(state(format!("`{cmd}` needs a super-network; this checkpoint is an extracted sub-network")));
    }
    Ok(())
}

fn parse_theta(s: &str, w: &SuperNetWeights<f32>) -> CliResult<SubNetworkConfig> {
    let theta: SubNetworkConfig = s.parse()?;
    theta.check_fits(&w.cfg)?;
    Ok(theta)
}

fn theta_slug(t: &SubNetworkConfig) -> String {
    format!("{}_{}_{}_{}_{}", t.d_model, t.n_heads, t.d_head, t.ffn_ratio, t.n_layers)
}

pub fn init(ctx: Context, a: InitArgs) -> CliResult<()> {
    if ctx.ckpt.join(checkpoint::MANIFEST).exists() {
        return Err(state(format!("{} already holds a checkpoint", ctx.ckpt.display())));
    }
    let cfg = &ctx.cfg;
    let space = cfg.space.build(&cfg.model)?;
    let mut w = init_supernet::<f32>(&cfg.model, cfg.seed)?;
    let steps = a.pretrain_steps.unwrap_or(cfg.pretrain.steps);
    let mut training = None;
    if steps > 0 {
        let lr = a.pretrain_lr.unwrap_or(cfg.pretrain.lr);
        let corpus = ctx.corpus()?;
        let bs = cfg.pretrain.batch_size.min(corpus.train.len());
        let per_epoch = corpus.train.len() / bs.max(1);
        let tc = TrainConfig {
            epochs: steps.div_ceil(per_epoch.max(1)),
            base_lr: lr,
            final_lr: cfg.pretrain.final_lr.min(lr),
            k: 0,
            lora: false,
            batch_size: bs,
            seed: cfg.seed.wrapping_add(1000),
            max_steps: Some(steps),
            ..cfg.train.clone()
        };
        let full = SubNetworkConfig::full(&cfg.model);
        let mut st = TrainState::new(w, full, &tc)?;
        fs::create_dir_all(&ctx.ckpt)?;
        let mut log = BufWriter::new(fs::File::create(ctx.ckpt.join("pretrain.jsonl"))?);
        let report = run_training(&mut st, &corpus.train, &tc, None, Some(&mut log), &mut |_, _| Ok(()))?;
        println!(
            "pretrained {} steps: loss {:.4} -> {:.4}",
            report.steps,
            report.initial_loss.unwrap_or(f64::NAN),
            report.final_loss.unwrap_or(f64::NAN)
        );
        w = st.weights;
        training = Some(TrainingMeta {
            pretrain_steps: report.steps,
            ..Default::default()
        });
    }
    let meta = Metadata {
        seed: Some(cfg.seed),
        space: Some(space),
        training,
        ..Default::default()
    };
    checkpoint::save(&ctx.ckpt, &w, &meta)?;
    println!("initialized {} ({} parameters)", ctx.ckpt.display(), w.num_params());
    Ok(())
}

pub fn sort(ctx: Context, a: SortArgs) -> CliResult<()> {
    let ck = ctx.load()?;
    require_supernet(&ck, "sort")?;
    if ck.meta.permutation.is_some() {
        return Err(state("checkpoint is already sorted"));
    }
    if ck.meta.grid.is_some() || is_finetuned(&ck.meta) {
        return Err(state("sorting must precede grid construction and fine-tuning"));
    }
    let cfg = &ctx.cfg;
    let scheme: AggregationScheme = a.scheme.as_deref().unwrap_or(&cfg.sort.scheme).parse()?;
    let block_name = a.block_scheme.unwrap_or_else(|| cfg.sort.block_scheme.clone());
    let scorer = block_scorers::<f32>().get(&block_name)?;
    let n_calib = a.calib_samples.unwrap_or(cfg.data.calib_samples);
    let n_rpd = a.rpd_thetas.unwrap_or(cfg.data.rpd_thetas);
    if n_calib == 0 || n_rpd == 0 {
        return Err(CliError::Config("calib_samples and rpd_thetas must be positive".into()));
    }
    let space = ctx.space(&ck)?;
    let corpus = ctx.corpus()?;
    let bs = cfg.eval.batch_size;
    let calib = corpus.train.sample(n_calib, &mut ctx.rng(3));
    let w = ck.weights;

    let stats = collect_stats(&w, &calib, bs)?;
    let mut scores = score_components(&stats, scheme)?;
    scores.blocks = scorer.score(&w, &stats, &calib, bs)?;
    scores.block_scheme = block_name;
    let (sorted, perm) = apply_sorting(&w, &scores)?;

    let mut rng = ctx.rng(4);
    let thetas: Vec<SubNetworkConfig> = (0..n_rpd).map(|_| space.sample_uniform(&mut rng)).collect();
    let evalset = corpus.valid.head(cfg.data.rpd_windows);
    let pairs = thetas
        .par_iter()
        .map(|t| Ok((perplexity(&w, t, &evalset, bs)?, perplexity(&sorted, t, &evalset, bs)?)))
        .collect::<nasprune::Result<Vec<(f64, f64)>>>()?;
    let (before, after): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let rpd = rpd_from_perplexities(&before, &after)?;
    println!(
        "sorted with {scheme} / {}: RPD over {n_rpd} sub-networks mean {:.4}, median {:.4}",
        scores.block_scheme, rpd.mean, rpd.median
    );
    let meta = Metadata {
        space: Some(space),
        scheme: Some(scheme),
        scores: Some(scores),
        permutation: Some(perm),
        rpd: Some(rpd),
        ..ck.meta
    };
    checkpoint::save(&ctx.ckpt, &sorted, &meta)?;
    Ok(())
}

pub fn grid(ctx: Context, a: GridArgs) -> CliResult<()> {
    let ck = ctx.load()?;
    require_supernet(&ck, "grid")?;
    if ck.meta.permutation.is_none() {
        return Err(state("grid needs a sorted checkpoint; run `sort` first"));
    }
    if is_finetuned(&ck.meta) {
        return Err(state("grid must be built before fine-tuning"));
    }
    let d = ctx.cfg.grid;
    let spec = GridSpec {
        bins: a.bins.unwrap_or(d.bins),
        per_bin: a.per_bin.unwrap_or(d.per_bin),
        max_trials: a.max_trials.unwrap_or(d.max_trials),
    };
    let space = ctx.space(&ck)?;
    let g = build_grid(&space, &ck.weights, spec, ctx.cfg.seed)?;
    let feasible = g.feasible_bins(&space, &ck.weights.cfg).len();
    println!(
        "grid: {} of {} bins occupied ({feasible} feasible), {} duplicate selections",
        g.occupied().len(),
        g.bins.len(),
        g.duplicates().len()
    );
    for (i, b) in g.bins.iter().enumerate() {
        if let Some(e) = &b.selected {
            println!("  bin {i:>2}  {:>8} params  {}", e.params, e.theta);
        }
    }
    let meta = Metadata {
        grid: Some(g),
        ..ck.meta
    };
    checkpoint::save(&ctx.ckpt, &ck.weights, &meta)?;
    Ok(())
}

fn train_config(ctx: &Context, a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut tc = ctx.cfg.train.clone();
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.base_lr = v;
    }
    if let Some(v) = a.final_lr {
        tc.final_lr = v;
    }
    if let Some(v) = a.k {
        tc.k = v;
    }
    if let Some(v) = &a.kd {
        nasprune::kd::by_name(v)?;
        tc.kd_kind = v.clone();
    }
    if let Some(v) = a.kd_temp {
        tc.kd_temperature = v;
    }
    if let Some(v) = a.kd_weight {
        tc.kd_weight = v;
    }
    if a.lora {
        tc.lora = true;
    }
    if a.no_lora {
        tc.lora = false;
    }
    if let Some(v) = &a.mode {
        tc.mode = v.parse()?;
    }
    if let Some(v) = a.max_steps {
        tc.max_steps = Some(v);
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    tc.seed = ctx.cfg.seed;
    tc.validate()?;
    Ok(tc)
}

pub fn train(ctx: Context, a: TrainArgs) -> CliResult<()> {
    let tc = train_config(&ctx, &a)?;
    let ck = ctx.load()?;
    require_supernet(&ck, "train")?;
    match tc.mode {
        TrainMode::WeightSharing => train_shared(ctx, a, tc, ck),
        TrainMode::Independent => train_independent(ctx, a, tc, ck),
    }
}

fn train_shared(ctx: Context, a: TrainArgs, tc: TrainConfig, ck: Checkpoint) -> CliResult<()> {
    if a.theta.is_some() || a.init.is_some() {
        return Err(CliError::Usage("--theta and --init apply to independent mode only".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| ctx.ckpt.clone());
    let space = ctx.space(&ck)?;
    let sampler_name = a.sampler.clone().unwrap_or_else(|| ctx.cfg.sampler.clone());
    if sampler_name == "grid" && tc.k > 0 && ck.meta.grid.is_none() {
        return Err(state("the grid sampler needs a grid; run `grid` first or pass --sampler uniform"));
    }
    let registry = samplers(&space, ck.meta.grid.as_ref());
    let sampler = if tc.k > 0 { Some(registry.get(&sampler_name)?) } else { None };
    let prior = ck.meta.training.clone().unwrap_or_default();
    let meta_for = |epochs_done: usize, steps: usize, report| Metadata {
        space: Some(space.clone()),
        training: Some(TrainingMeta {
            pretrain_steps: prior.pretrain_steps,
            epochs_done: prior.epochs_done + epochs_done,
            steps: prior.steps + steps,
            config: Some(tc.clone()),
            report,
        }),
        ..ck.meta.clone()
    };
    if tc.epochs == 0 || tc.max_steps == Some(0) {
        checkpoint::save(&out, &ck.weights, &meta_for(0, 0, None))?;
        println!("no training steps requested; weights unchanged");
        return Ok(());
    }
    let corpus = ctx.corpus()?;
    let mut st = TrainState::new(ck.weights.clone(), space.theta_max(), &tc)?;
    fs::create_dir_all(&out)?;
    let mut log = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let report = run_training(
        &mut st,
        &corpus.train,
        &tc,
        sampler.as_deref(),
        Some(&mut log),
        &mut |epoch, s| {
            let m = meta_for(epoch + 1, s.step, None);
            checkpoint::save(&out, &s.weights, &m)?;
            let last = s.metrics.last().map_or(f64::NAN, |m| m.full_loss);
            println!("epoch {} done at step {}: full loss {last:.4}", epoch + 1, s.step);
            Ok(())
        },
    )?;
    let epochs_done = report.steps.div_ceil((corpus.train.len() / tc.batch_size.min(corpus.train.len())).max(1));
    println!(
        "trained {} steps: full loss {:.4} -> {:.4}",
        report.steps,
        report.initial_loss.unwrap_or(f64::NAN),
        report.final_loss.unwrap_or(f64::NAN)
    );
    let steps = report.steps;
    checkpoint::save(&out, &st.weights, &meta_for(epochs_done, steps, Some(report)))?;
    Ok(())
}

fn train_independent(ctx: Context, a: TrainArgs, tc: TrainConfig, ck: Checkpoint) -> CliResult<()> {
    let theta = match &a.theta {
        Some(s) => parse_theta(s, &ck.weights)?,
        None => return Err(CliError::Usage("independent mode needs --theta".into())),
    };
    let init: InitMode = a.init.as_deref().unwrap_or("pretrained").parse()?;
    let out = a.out.clone().unwrap_or_else(|| ctx.ckpt.join(format!("independent_{}", theta_slug(&theta))));
    let corpus = ctx.corpus()?;
    let w = finetune_independent(&ck.weights, &theta, init, &corpus.train, &tc)?;
    let meta = Metadata {
        seed: Some(ctx.cfg.seed),
        training: Some(TrainingMeta {
            epochs_done: tc.epochs,
            config: Some(tc),
            ..Default::default()
        }),
        extracted_from: Some(theta),
        ..Default::default()
    };
    checkpoint::save(&out, &w, &meta)?;
    println!("independently fine-tuned {theta} into {}", out.display());
    Ok(())
}

pub fn eval(ctx: Context, a: EvalArgs) -> CliResult<()> {
    let ck = ctx.load()?;
    let w = &ck.weights;
    let targets: Vec<(String, SubNetworkConfig)> = if a.all_grid {
        let g = ck
            .meta
            .grid
            .as_ref()
            .ok_or_else(|| state("--all-grid needs a grid; run `grid` first"))?;
        g.bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.selected.as_ref().map(|e| (format!("grid:{i}"), e.theta)))
            .collect()
    } else {
        let s = a.theta.as_deref().expect("clap requires --theta without --all-grid");
        vec![("theta".into(), parse_theta(s, w)?)]
    };
    let corpus = ctx.corpus()?;
    let evalset = match a.windows.or(ctx.cfg.eval.windows) {
        Some(n) => corpus.valid.head(n),
        None => corpus.valid,
    };
    let bs = ctx.cfg.eval.batch_size;
    let seq = ctx.cfg.train.seq_len;
    let losses = targets
        .par_iter()
        .map(|(_, t)| eval_loss(w, t, &evalset, bs))
        .collect::<Result<Vec<f64>, _>>()?;
    let reps = a.latency_reps.unwrap_or(ctx.cfg.eval.latency_reps);
    let mut rows = Vec::with_capacity(targets.len());
    for ((source, theta), loss) in targets.iter().zip(losses) {
        let latency_ms = if reps == 0 {
            None
        } else {
            let sub = extract_subnet(w, theta)?;
            Some(measure_latency(&sub, seq, reps, ctx.cfg.eval.latency_warmup)?.median_ms)
        };
        rows.push(EvalRow::new(source.clone(), theta, count_params(&w.cfg, theta), estimate_flops(&w.cfg, theta, seq), latency_ms, loss));
    }
    let out = a.out.unwrap_or_else(|| ctx.ckpt.join("eval.csv"));
    table::write_rows(&out, &rows)?;
    table::print_rows(&rows);
    println!("wrote {}", out.display());
    Ok(())
}

pub fn pareto(ctx: Context, a: ParetoArgs) -> CliResult<()> {
    let by_latency = match a.cost.as_str() {
        "params" => false,
        "latency" => true,
        other => return Err(CliError::Usage(format!("unknown cost axis `{other}` (params, latency)"))),
    };
    let inputs = if a.input.is_empty() {
        vec![ctx.ckpt.join("eval.csv")]
    } else {
        a.input.clone()
    };
    let mut rows = Vec::new();
    for p in &inputs {
        if !p.exists() {
            return Err(state(format!("{} does not exist; run `eval` first", p.display())));
        }
        rows.extend(table::read_rows(p)?);
    }
    let mut points = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let cost = if by_latency {
            r.latency_ms
                .ok_or_else(|| CliError::Config(format!("row {} ({}) has no latency", i + 1, r.source)))?
        } else {
            r.params as f64
        };
        if !(cost.is_finite() && r.ppl.is_finite()) {
            return Err(CliError::Config(format!("row {} ({}) is not finite", i + 1, r.source)));
        }
        points.push(ParetoPoint {
            theta: r.theta(),
            quality: r.ppl,
            cost,
            source: i.to_string(),
        });
    }
    let front: Vec<EvalRow> = pareto_front(&points)
        .iter()
        .map(|p| rows[p.source.parse::<usize>().expect("index tag")].clone())
        .collect();
    let prefix = a.out.unwrap_or_else(|| ctx.ckpt.join(format!("pareto_{}", a.cost)));
    let csv_path = prefix.with_extension("csv");
    let svg_path = prefix.with_extension("svg");
    table::write_rows(&csv_path, &front)?;
    let cost_of = |r: &EvalRow| if by_latency { r.latency_ms.unwrap_or(f64::NAN) } else { r.params as f64 };
    let all: Vec<(f64, f64)> = rows.iter().map(|r| (cost_of(r), r.ppl)).collect();
    let fr: Vec<(f64, f64)> = front.iter().map(|r| (cost_of(r), r.ppl)).collect();
    let x_label = if by_latency { "latency (ms)" } else { "parameters" };
    fs::write(&svg_path, plot::scatter_with_front(&all, &fr, x_label, "validation perplexity"))?;
    table::print_rows(&front);
    println!("{} of {} rows on the front; wrote {} and {}", front.len(), rows.len(), csv_path.display(), svg_path.display());
    Ok(())
}

pub fn extract(ctx: Context, a: ExtractArgs) -> CliResult<()> {
    let ck = ctx.load()?;
    require_supernet(&ck, "extract")?;
    let theta = parse_theta(&a.theta, &ck.weights)?;
    let sub = extract_subnet(&ck.weights, &theta)?;
    let meta = Metadata {
        seed: ck.meta.seed,
        extracted_from: Some(theta),
        ..Default::default()
    };
    checkpoint::save(&a.out, &sub, &meta)?;
    println!("extracted {theta} ({} parameters) into {}", sub.num_params(), a.out.display());
    Ok(())
}

pub fn latency(ctx: Context, a: LatencyArgs) -> CliResult<()> {
    let ck = ctx.load()?;
    let theta = match &a.theta {
        Some(s) => parse_theta(s, &ck.weights)?,
        None => SubNetworkConfig::full(&ck.weights.cfg),
    };
    let seq = a.seq.unwrap_or(ctx.cfg.train.seq_len);
    if seq == 0 || seq > ck.weights.cfg.max_seq_len {
        return Err(CliError::Config(format!("sequence length must lie in 1..={}", ck.weights.cfg.max_seq_len)));
    }
    let sub = extract_subnet(&ck.weights, &theta)?;
    let reps = a.reps.unwrap_or(ctx.cfg.eval.latency_reps);
    let warmup = a.warmup.unwrap_or(ctx.cfg.eval.latency_warmup);
    let s = measure_latency(&sub, seq, reps, warmup)?;
    println!(
        "{theta}  T={seq}  median {:.3} ms  p10 {:.3} ms  p90 {:.3} ms  ({reps} reps, {warmup} warmup)",
        s.median_ms, s.p10_ms, s.p90_ms
    );
    Ok(())
}
