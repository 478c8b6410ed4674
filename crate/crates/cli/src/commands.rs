use std::path::{Path, PathBuf};

use mivc::data::{self, generate_synthetic, DatasetManifest};
use mivc::eval::{self, export_attention, witness_hit_rate};
use mivc::fsio::write_atomic;
use mivc::model::{self, Model, TrainConfig};
use mivc::pooling::{self, Bag, PoolingKind, PoolingParams};
use mivc::{checkpoint, gradcheck, MivcError, Result, Rng};
use serde_json::json;

use crate::config::{self, Explicit, RunConfig};
use crate::{BenchArgs, Common, EvalArgs, GenArgs, GradcheckArgs, Outcome, ParamsArgs, PoolArgs, TrainArgs, TrainFlags};

fn load_common(common: &Common) -> Result<(RunConfig, Explicit)> {
    let (mut cfg, explicit) = config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
        cfg.synthetic.seed = seed;
    }
    Ok((cfg, explicit))
}

fn apply_train_flags(model: &mut TrainConfig, explicit: &mut Explicit, f: &TrainFlags) {
    if let Some(s) = f.strategy {
        model.strategy = s;
        explicit.mark("strategy");
    }
    if let Some(v) = f.epochs {
        model.epochs = v;
    }
    if let Some(v) = f.learning_rate {
        model.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        model.batch_size = v;
    }
    if let Some(v) = f.hidden {
        model.hidden = v;
    }
    if let Some(v) = f.optimizer {
        model.optimizer = v;
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| MivcError::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| MivcError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    write_atomic(path, text.as_bytes())
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("config.json"), config::snapshot(cfg).as_bytes())
}

fn complete(cfg: &mut RunConfig, explicit: &Explicit, sample: &Bag, classes: usize) {
    config::complete_from_data(&mut cfg.model, explicit, sample.dim(), sample.shape(), classes);
}

fn first_bag(bags: &[Bag], what: &str) -> Result<Bag> {
    bags.first()
        .cloned()
        .ok_or_else(|| MivcError::Data(format!("{what} split is empty")))
}

pub fn gen(args: GenArgs) -> Result<Outcome> {
    let (mut cfg, _) = load_common(&args.common)?;
    if let Some(n) = args.n_bags {
        cfg.synthetic.n_bags = n;
    }
    let dir = out_dir(&cfg)?;
    let set = generate_synthetic(&cfg.synthetic)?;
    for w in &set.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    let train = data::write_dataset(&dir, "train", &set.train, &set.class_names)?;
    let eval = data::write_dataset(&dir, "eval", &set.eval, &set.class_names)?;
    cfg.train_manifest = Some(train.clone());
    cfg.eval_manifest = Some(eval.clone());
    write_snapshot(&dir, &cfg)?;
    println!(
        "{}",
        json!({ "train": train, "eval": eval, "train_bags": set.train.len(), "eval_bags": set.eval.len() })
    );
    Ok(Outcome::Ok)
}

fn read_pool_input(args: &PoolArgs) -> Result<Bag> {
    let ext = args
        .input
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let text_input = matches!(ext.as_str(), "csv" | "tsv" | "txt") || args.delimiter.is_some();
    if !text_input {
        let instances = data::read_embeddings(&args.input)?;
        let id = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Bag::new(id, instances);
    }
    let delim = match args.delimiter {
        Some(c) if c.is_ascii() => c as u8,
        Some(c) => return Err(MivcError::Usage(format!("delimiter {c:?} is not ASCII"))),
        None if ext == "tsv" => b'\t',
        None => b',',
    };
    data::import_csv(&args.input, delim)
}

fn pool_params(args: &PoolArgs, dim: usize) -> Result<PoolingParams> {
    match args.kind {
        PoolingKind::Avg => return Ok(PoolingParams::avg()),
        PoolingKind::Max => return Ok(PoolingParams::max()),
        _ => {}
    }
    if let Some(path) = &args.params {
        let model = checkpoint::load(path)?;
        return match model.pooling() {
            Some(p) if p.kind() == args.kind => Ok(p.clone()),
            _ => Err(MivcError::Usage(format!(
                "checkpoint {} holds a {} model, not {} pooling",
                path.display(),
                model.strategy,
                args.kind
            ))),
        };
    }
    match (args.random_init, args.seed) {
        (true, Some(seed)) => PoolingParams::init(args.kind, args.hidden, dim, &mut Rng::new(seed).fork(1)),
        _ => Err(MivcError::Usage(format!(
            "{} pooling needs --params <checkpoint> or --random-init --seed <s>",
            args.kind
        ))),
    }
}

pub fn pool(args: PoolArgs) -> Result<Outcome> {
    if args.kind.is_attention() && args.params.is_none() && !args.random_init {
        return Err(MivcError::Usage(format!(
            "{} pooling needs --params <checkpoint> or --random-init --seed <s>",
            args.kind
        )));
    }
    let bag = read_pool_input(&args)?;
    let params = pool_params(&args, bag.dim())?;
    let out = pooling::pool(&params, &bag)?;
    let doc = json!({
        "kind": args.kind,
        "n": bag.len(),
        "dim": bag.dim(),
        "embedding": out.embedding,
        "alpha": if args.kind.is_attention() { out.alpha } else { None },
        "argmax_index": out.argmax_index,
    });
    write_json(&args.out, &doc)?;
    Ok(Outcome::Ok)
}

fn require_manifest(path: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    path.cloned()
        .ok_or_else(|| MivcError::Usage(format!("{flag} <manifest> is required")))
}

fn attention_artifacts(model: &Model, bags: &[Bag], dir: &Path) -> Result<Option<f64>> {
    if !model.strategy.pooling_kind().is_some_and(PoolingKind::is_attention) {
        return Ok(None);
    }
    let records = export_attention(model, bags)?;
    write_atomic(&dir.join("attention.jsonl"), eval::attention_to_jsonl(&records).as_bytes())?;
    Ok(witness_hit_rate(&records))
}

pub fn train(args: TrainArgs) -> Result<Outcome> {
    let (mut cfg, mut explicit) = load_common(&args.common)?;
    if let Some(p) = args.train_manifest {
        cfg.train_manifest = Some(p);
    }
    if let Some(p) = args.eval_manifest {
        cfg.eval_manifest = Some(p);
    }
    apply_train_flags(&mut cfg.model, &mut explicit, &args.train);
    let train_path = require_manifest(cfg.train_manifest.as_ref(), "--train")?;
    // Validate every input before any work.
    let eval_manifest: Option<DatasetManifest> = cfg.eval_manifest.as_deref().map(data::load_manifest).transpose()?;
    let dir = out_dir(&cfg)?;
    let (manifest, train_bags) = data::load_dataset(&train_path)?;
    if let Some(em) = &eval_manifest {
        if em.class_names != manifest.class_names {
            return Err(MivcError::Data("train and eval manifests name different classes".into()));
        }
    }
    let sample = first_bag(&train_bags, "training")?;
    complete(&mut cfg, &explicit, &sample, manifest.classes());
    cfg.model.validate()?;
    write_snapshot(&dir, &cfg)?;

    let outcome = model::train(&cfg.model, &train_bags)?;
    checkpoint::save(&outcome.model, &dir.join("model.mivm"))?;
    let history: String = outcome
        .history
        .iter()
        .map(|h| serde_json::to_string(h).expect("serialisable") + "\n")
        .collect();
    write_atomic(&dir.join("history.jsonl"), history.as_bytes())?;

    let mut summary = json!({
        "strategy": cfg.model.strategy,
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.history.last().map(|h| h.loss),
        "train_accuracy": outcome.history.last().map(|h| h.accuracy),
    });
    if let Some(em) = &eval_manifest {
        let eval_bags = em
            .records
            .iter()
            .map(|r| data::load_bag(em, r))
            .collect::<Result<Vec<_>>>()?;
        let metrics = eval::evaluate(&outcome.model, &eval_bags)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        summary["eval_accuracy"] = json!(metrics.accuracy);
        summary["witness_hit_rate"] = json!(attention_artifacts(&outcome.model, &eval_bags, &dir)?);
    } else {
        summary["witness_hit_rate"] = json!(attention_artifacts(&outcome.model, &train_bags, &dir)?);
    }
    println!("{summary}");
    Ok(Outcome::Ok)
}

pub fn eval(args: EvalArgs) -> Result<Outcome> {
    let model = checkpoint::load(&args.model)?;
    let (manifest, bags) = data::load_dataset(&args.data)?;
    if manifest.classes() != model.classes() {
        return Err(MivcError::Data(format!(
            "model has {} classes, manifest names {}",
            model.classes(),
            manifest.classes()
        )));
    }
    let metrics = eval::evaluate(&model, &bags)?;
    let mut doc = serde_json::to_value(&metrics).expect("serialisable");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| MivcError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        doc["witness_hit_rate"] = json!(attention_artifacts(&model, &bags, dir)?);
    }
    println!("{doc}");
    Ok(Outcome::Ok)
}

pub fn bench(args: BenchArgs) -> Result<Outcome> {
    let (mut cfg, mut explicit) = load_common(&args.common)?;
    apply_train_flags(&mut cfg.model, &mut explicit, &args.train);
    if let Some(s) = args.strategies {
        cfg.strategies = s;
    }
    if let Some(n) = args.n_bags {
        cfg.synthetic.n_bags = n;
    }
    if args.train_manifest.is_some() {
        cfg.train_manifest = args.train_manifest;
        cfg.eval_manifest = args.eval_manifest;
    }
    let (train_bags, eval_bags, classes) = match (&cfg.train_manifest, &cfg.eval_manifest) {
        (Some(t), Some(e)) => {
            let (tm, tb) = data::load_dataset(t)?;
            let (_, eb) = data::load_dataset(e)?;
            (tb, eb, tm.classes())
        }
        (None, None) => {
            let set = generate_synthetic(&cfg.synthetic)?;
            for w in &set.warnings {
                eprintln!("{}", json!({ "warning": w }));
            }
            (set.train, set.eval, cfg.synthetic.classes)
        }
        _ => return Err(MivcError::Usage("give both train and eval manifests, or neither".into())),
    };
    let sample = first_bag(&train_bags, "training")?;
    complete(&mut cfg, &explicit, &sample, classes);
    cfg.model.validate()?;
    let dir = cfg.out.is_some().then(|| out_dir(&cfg)).transpose()?;
    if let Some(dir) = &dir {
        write_snapshot(dir, &cfg)?;
    }
    let rows = eval::run_benchmark(&cfg.strategies, &cfg.model, &train_bags, &eval_bags)?;
    let table = eval::format_table(&rows);
    if let Some(dir) = &dir {
        write_atomic(&dir.join("bench.jsonl"), eval::rows_to_jsonl(&rows).as_bytes())?;
        write_atomic(&dir.join("bench.txt"), table.as_bytes())?;
    }
    print!("{table}");
    Ok(Outcome::Ok)
}

pub fn params(args: ParamsArgs) -> Result<Outcome> {
    let config = TrainConfig {
        strategy: args.kind,
        input_dim: args.m,
        dim: args.m,
        hidden: args.k,
        classes: args.classes,
        ..TrainConfig::default()
    };
    if args.m == 0 {
        return Err(MivcError::Usage("--M must be >= 1".into()));
    }
    let report = model::count_params(&config);
    let mut doc = serde_json::to_value(&report).expect("serialisable");
    doc["K"] = json!(args.k);
    doc["M"] = json!(args.m);
    doc["extra"] = json!(report.extra_over_baseline);
    println!("{doc}");
    Ok(Outcome::Ok)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<Outcome> {
    let kinds = match args.kind.as_str() {
        "all" => vec![PoolingKind::Attn, PoolingKind::Gated],
        other => vec![other.parse::<PoolingKind>()?],
    };
    let mut all_passed = true;
    for kind in kinds {
        let report = gradcheck::run(kind, args.trials, args.seed, args.inject_fault)?;
        all_passed &= report.passed;
        println!("{}", serde_json::to_string(&report).expect("serialisable"));
    }
    Ok(if all_passed { Outcome::Ok } else { Outcome::CheckFailed })
}
