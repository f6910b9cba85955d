use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use logicache::data::{
    pairs_to_tsv, read_pairs, split_pairs, Corpus, Preprocess, Provenance, RawPair, SplitSpec,
    WordMapping,
};
use logicache::decoder::CacheKind;
use logicache::eval::{config_hash, emit_report, evaluate};
use logicache::influence::{
    augment_and_sweep, scores_to_jsonl, select_influential, sweep_csv, HvpConfig, HvpMethod,
    Selection, SelectionConfig,
};
use logicache::numcore::gradcheck::finite_diff_check;
use logicache::numcore::SeededRng;
use logicache::parser::{ModelConfig, Parser};
use logicache::training::{load_model, save_model, train_with, TrainConfig};

use crate::{
    rundir, Cli, Command, DecodeCmd, EvalCmd, GradcheckCmd, InfluenceCmd, PreprocessArgs,
    PreprocessCmd, SelectArgs, SweepCmd, TrainArgs, TrainCmd, VERSION,
};

pub fn run(cli: Cli) -> Result<()> {
    let (verb, seed) = match &cli.command {
        Command::Preprocess(c) => ("preprocess", split_seed(c.split.as_deref())?),
        Command::Train(c) => ("train", resolve_train_config(&c.train)?.seed),
        Command::Eval(_) => ("eval", 0),
        Command::Decode(_) => ("decode", 0),
        Command::Gradcheck(c) => ("gradcheck", c.seed),
        Command::Influence(c) => ("influence", c.seed),
        Command::Sweep(c) => ("sweep", resolve_train_config(&c.train)?.seed),
    };
    let dir = rundir::create(&cli.run_root, verb, seed)?;
    rundir::init_logging(&dir, cli.log_level)?;
    info!("logicache {VERSION}");
    info!("command: {}", std::env::args().collect::<Vec<_>>().join(" "));
    info!("run directory: {}", dir.display());
    match cli.command {
        Command::Preprocess(c) => preprocess(c, &dir),
        Command::Train(c) => train(c, &dir),
        Command::Eval(c) => eval(c, &dir),
        Command::Decode(c) => decode(c, &dir),
        Command::Gradcheck(c) => gradcheck(c, &dir),
        Command::Influence(c) => influence(c, &dir),
        Command::Sweep(c) => sweep(c, &dir),
    }
}

fn split_seed(spec: Option<&str>) -> Result<u64> {
    Ok(match spec.map(str::parse::<SplitSpec>).transpose()? {
        Some(SplitSpec::Fraction { seed, .. }) => seed,
        _ => 0,
    })
}

/// Defaults, then the config file, then `--set` entries, then named flags.
fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let named = [
        ("hidden", &args.hidden),
        ("embed", &args.embed),
        ("cache_fn", &args.cache_fn),
        ("double_gate", &args.double_gate),
        ("epochs", &args.epochs),
        ("lr", &args.lr),
        ("lr_decay", &args.lr_decay),
        ("clip", &args.clip),
        ("max_len", &args.max_len),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    for line in cfg.to_text().lines() {
        info!("config: {line}");
    }
    rundir::write(dir, "config.cfg", cfg.to_text())?;
    Ok(())
}

fn preprocessor(args: &PreprocessArgs) -> Result<Preprocess> {
    let strip = match &args.mapping {
        Some(p) => Some(WordMapping::load(p).with_context(|| format!("reading mapping {}", p.display()))?),
        None => None,
    };
    info!(
        "preprocess: debruijn={} strip={} strip_first={}",
        args.debruijn,
        args.mapping.as_ref().map_or("none".into(), |p| p.display().to_string()),
        args.strip_first
    );
    Ok(Preprocess {
        debruijn: args.debruijn,
        strip,
        strip_first: args.strip_first,
    })
}

fn load_pairs(path: &Path, pre: &Preprocess) -> Result<Vec<RawPair>> {
    let raw = read_pairs(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let pairs = pre.apply_all(&raw);
    info!("{}: {} pairs ({} kept)", path.display(), raw.len(), pairs.len());
    Ok(pairs)
}

fn preprocess(c: PreprocessCmd, dir: &Path) -> Result<()> {
    let pre = preprocessor(&c.pre)?;
    let pairs = load_pairs(&c.input, &pre)?;
    rundir::write(dir, "preprocessed.tsv", pairs_to_tsv(&pairs))?;
    if let Some(spec) = &c.split {
        let (tr, te) = split_pairs(&pairs, spec.parse()?)?;
        info!("split {spec}: {} train, {} test", tr.len(), te.len());
        rundir::write(dir, "train.tsv", pairs_to_tsv(&tr))?;
        rundir::write(dir, "test.tsv", pairs_to_tsv(&te))?;
    }
    Ok(())
}

fn train(c: TrainCmd, dir: &Path) -> Result<()> {
    let cfg = resolve_train_config(&c.train)?;
    log_config(dir, &cfg)?;
    let pre = preprocessor(&c.pre)?;
    let provenance: Provenance = c.provenance.parse()?;
    let pairs = load_pairs(&c.data, &pre)?;
    let (train_pairs, test_pairs) = match (&c.split, &c.test) {
        (Some(spec), _) => {
            let (a, b) = split_pairs(&pairs, spec.parse()?)?;
            info!("split {spec}: {} train, {} test", a.len(), b.len());
            (a, Some(b))
        }
        (None, Some(t)) => (pairs, Some(load_pairs(t, &pre)?)),
        (None, None) => (pairs, None),
    };
    let corpus = Corpus::from_pairs(&train_pairs, provenance.clone());
    info!(
        "vocabularies: source {}, target {}",
        corpus.src_vocab.len(),
        corpus.tgt_vocab.len()
    );
    let (parser, report) = train_with(&corpus, &cfg, Some(dir), |_| {})?;
    save_model(dir, &parser, &cfg)?;
    rundir::write(dir, "train.json", serde_json::to_string_pretty(&report)?)?;
    info!("trained {} epochs in {:.1}s", cfg.epochs, report.wall_seconds);

    if let Some(test) = test_pairs {
        let test_c = Corpus::with_vocab(&test, &corpus.src_vocab, &corpus.tgt_vocab, provenance);
        let r = evaluate(&parser, &test_c, cfg.max_len, &config_hash(&cfg.to_text()))?;
        emit_report(&r, dir)?;
        info!("test: seq {:.4} tok {:.4} over {}", r.seq_accuracy, r.tok_accuracy, test_c.len());
        println!("seq {:.4}\ttok {:.4}", r.seq_accuracy, r.tok_accuracy);
    }
    Ok(())
}

fn eval(c: EvalCmd, dir: &Path) -> Result<()> {
    let (parser, cfg) = load_model(&c.model, c.checkpoint.as_deref())
        .with_context(|| format!("loading model from {}", c.model.display()))?;
    log_config(dir, &cfg)?;
    let pre = preprocessor(&c.pre)?;
    let pairs = load_pairs(&c.data, &pre)?;
    let corpus = Corpus::with_vocab(&pairs, &parser.src_vocab, &parser.tgt_vocab, c.provenance.parse()?);
    let r = evaluate(&parser, &corpus, cfg.max_len, &config_hash(&cfg.to_text()))?;
    emit_report(&r, dir)?;
    info!("seq {:.4} tok {:.4} over {}", r.seq_accuracy, r.tok_accuracy, corpus.len());
    println!("seq {:.4}\ttok {:.4}", r.seq_accuracy, r.tok_accuracy);
    Ok(())
}

fn decode(c: DecodeCmd, dir: &Path) -> Result<()> {
    let (parser, cfg) = load_model(&c.model, c.checkpoint.as_deref())
        .with_context(|| format!("loading model from {}", c.model.display()))?;
    log_config(dir, &cfg)?;
    let utterances: Vec<Vec<String>> = match &c.input {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split('\t').next().unwrap_or("").split_whitespace().map(String::from).collect())
            .collect(),
        None => vec![c
            .utterance
            .iter()
            .flat_map(|s| s.split_whitespace())
            .map(String::from)
            .collect()],
    };
    let max_len = c.max_len.unwrap_or(cfg.max_len);
    let mut tsv = String::from("source\tpredicted\ttrace\n");
    for u in &utterances {
        let d = parser.decode(u, max_len)?;
        let trace: Vec<&str> = d.origins.iter().map(|s| s.label()).collect();
        if d.truncated {
            log::warn!("{}: hit the {max_len}-token cap", u.join(" "));
        }
        println!("{}", d.tokens.join(" "));
        let _ = writeln!(tsv, "{}\t{}\t{}", u.join(" "), d.tokens.join(" "), trace.join(" "));
    }
    rundir::write(dir, "decoded.tsv", tsv)?;
    Ok(())
}

fn gradcheck(c: GradcheckCmd, dir: &Path) -> Result<()> {
    let pairs = match &c.data {
        Some(p) => read_pairs(p).with_context(|| format!("reading corpus {}", p.display()))?,
        None => vec![
            RawPair { source: toks("a b c"), target: toks("b x b"), line: 1 },
            RawPair { source: toks("d a b"), target: toks("x b"), line: 2 },
        ],
    };
    let corpus = Corpus::from_pairs(&pairs, Provenance::Other("gradcheck".into()));
    let cache: CacheKind = c.cache_fn.parse()?;
    let model = ModelConfig {
        hidden: c.d,
        embed: c.embed,
        cache,
        double_gate: c.double_gate,
    };
    info!("gradcheck: d={} embed={} cache_fn={cache} double_gate={} seed={} step={:e} tol={:e}",
        c.d, c.embed, c.double_gate, c.seed, c.step, c.tol);
    let mut parser = Parser::new(model, corpus.src_vocab.clone(), corpus.tgt_vocab.clone())?;
    parser.init_uniform(1.0, &mut SeededRng::new(c.seed, 0));
    let ex = &corpus.examples[0];
    let out = parser.example_loss(ex)?;
    let report = finite_diff_check(&parser.params, &out.grads, |ps| parser.loss_value_with(ps, ex), c.step, c.tol)?;
    let table = report.to_string();
    println!("{table}");
    rundir::write(dir, "gradcheck.txt", format!("{table}\n"))?;
    if !report.passed() {
        bail!(
            "gradient check failed for {} parameter group(s); worst relative error {:.3e}",
            report.failures().count(),
            report.worst_relative_error()
        );
    }
    Ok(())
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn selection_config(a: &SelectArgs) -> Result<SelectionConfig> {
    let cfg = SelectionConfig {
        hvp: HvpConfig {
            repetitions: a.reps,
            depth: a.depth,
            damping: a.damping,
            scale: a.scale,
            averages: a.averages,
            sample_size: a.sample,
            top_k: a.top_k,
            ..HvpConfig::default()
        },
        method: a.hvp.parse::<HvpMethod>()?,
        lambda: a.lambda,
    };
    cfg.hvp.validate()?;
    info!("selection config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn run_selection(
    source: &[RawPair],
    target: &[RawPair],
    cfg: &SelectionConfig,
    seed: u64,
    dir: &Path,
) -> Result<Selection> {
    let sel = select_influential(source, target, cfg, &SeededRng::new(seed, 0))?;
    rundir::write(dir, "scores.jsonl", scores_to_jsonl(&sel.scores)?)?;
    let ids: String = sel.sampled.iter().map(|i| format!("{i}\n")).collect();
    rundir::write(dir, "sampled.txt", ids)?;
    let chosen: Vec<RawPair> = sel.sampled.iter().map(|&i| source[i].clone()).collect();
    rundir::write(dir, "selected.tsv", pairs_to_tsv(&chosen))?;
    info!(
        "sampled {} of {} source examples ({} drawn uniformly)",
        sel.sampled.len(),
        source.len(),
        sel.uniform_fill
    );
    Ok(sel)
}

fn influence(c: InfluenceCmd, dir: &Path) -> Result<()> {
    let cfg = selection_config(&c.select)?;
    let pre = Preprocess::default();
    let source = load_pairs(&c.select.source, &pre)?;
    let target = load_pairs(&c.select.target, &pre)?;
    run_selection(&source, &target, &cfg, c.seed, dir)?;
    Ok(())
}

fn domain_name(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "target".into(), |s| s.to_string_lossy().into_owned())
}

fn sweep(c: SweepCmd, dir: &Path) -> Result<()> {
    let train_cfg = resolve_train_config(&c.train)?;
    log_config(dir, &train_cfg)?;
    let sel_cfg = selection_config(&c.select)?;
    let pre = preprocessor(&c.pre)?;
    let source = load_pairs(&c.select.source, &pre)?;
    let target = load_pairs(&c.select.target, &pre)?;
    let (target_train, target_test) = match &c.target_test {
        Some(p) => (target, load_pairs(p, &pre)?),
        None => split_pairs(&target, c.split.parse()?)?,
    };
    info!("target: {} train, {} test; steps {:?}", target_train.len(), target_test.len(), c.steps);
    if let Some(&max) = c.steps.iter().max() {
        if max > sel_cfg.hvp.sample_size.min(source.len()) {
            log::warn!("largest step {max} exceeds the selection size; it will use the whole selection");
        }
    }

    let sel = run_selection(&source, &target_train, &sel_cfg, train_cfg.seed, dir)?;
    let provenance = Provenance::Overnight(domain_name(&c.select.target));
    let chosen: Vec<RawPair> = sel.sampled.iter().map(|&i| source[i].clone()).collect();
    let curve = augment_and_sweep(&target_train, &target_test, &chosen, &c.steps, &train_cfg, &provenance)?;
    let path = rundir::write(dir, "sweep.csv", sweep_csv(&curve))?;
    info!("influential curve written to {}", path.display());
    print!("{}", sweep_csv(&curve));

    if c.random_baseline {
        let mut order: Vec<usize> = (0..source.len()).collect();
        SeededRng::new(train_cfg.seed, 2).shuffle(&mut order);
        let random: Vec<RawPair> = order
            .iter()
            .take(chosen.len())
            .map(|&i| source[i].clone())
            .collect();
        let base = augment_and_sweep(&target_train, &target_test, &random, &c.steps, &train_cfg, &provenance)?;
        let path = rundir::write(dir, "sweep-random.csv", sweep_csv(&base))?;
        info!("random-selection curve written to {}", path.display());
    }
    Ok(())
}
