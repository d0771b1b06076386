use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use mmoe::analysis::{mods_profile, spearman_heatmap, write_heatmap_csv, write_mods_csv};
use mmoe::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use mmoe::data::{eval_batch, eval_rng, Batch, Split, SyntheticTask, TaskSource};
use mmoe::eval::{expand_pattern, sweep, write_eval_csv, ActivationPattern};
use mmoe::train::{train_data_rng, Trainer};
use mmoe::Model;
use serde_json::{json, Value};

use crate::config::resolve;
use crate::{DataArgs, Failure, SplitArg};

fn write_meta(dir: &Path, meta: Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("run_meta.json"), text)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn meta_header(command: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m
}

pub fn train(config: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let cfg = resolve(config, overrides)?;
    cfg.validate()?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, &cfg.task)?;

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut meta = meta_header("train");
    meta.insert("seed".into(), json!(cfg.train.seed));
    meta.insert("overrides".into(), json!(overrides));
    meta.insert("config".into(), serde_json::to_value(&cfg)?);
    write_meta(dir, Value::Object(meta))?;

    let mut log = create(dir, "train_log.csv")?;
    writeln!(log, "step,tokens,loss,lr,mean_k")?;
    let ckpt_meta = |step| CheckpointMeta {
        strategy: Some(cfg.train.strategy.clone()),
        step,
        task: Some(cfg.task.clone()),
        seq_len: Some(cfg.train.seq_len),
    };
    let total = cfg.train.num_steps();
    let mut tokens = 0u64;
    let result = trainer.run(|r, model| {
        tokens += r.tokens;
        writeln!(log, "{},{},{:.6},{:.6},{:.6}", r.step, tokens, r.loss, r.lr, r.mean_k)?;
        if cfg.log_every > 0 && (r.step % cfg.log_every == 0 || r.step == total) {
            eprintln!("step {}/{total} loss {:.4} lr {:.2e} mean_k {:.2}", r.step, r.loss, r.lr, r.mean_k);
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < total {
            save_checkpoint(model, &ckpt_meta(r.step), dir.join(format!("ckpt_step{:06}.mmoe", r.step)))?;
        }
        Ok(())
    });
    log.flush()?;
    result?;
    save_checkpoint(&trainer.model, &ckpt_meta(trainer.step), dir.join("final.mmoe"))?;
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Invalid(format!("sweep '{s}' is not of the form a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

/// Task and sequences to evaluate on, checked against the model.
fn eval_data(model: &Model, meta: &CheckpointMeta, args: &DataArgs) -> Result<(SyntheticTask, Batch), Failure> {
    let task = match &args.task {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Invalid(format!("cannot read task {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("task {}: {e}", p.display())))?
        }
        None => meta
            .task
            .clone()
            .ok_or_else(|| Failure::Invalid("checkpoint has no task; pass --task".into()))?,
    };
    task.validate()?;
    if task.vocab_size() > model.config.vocab_size {
        return Err(Failure::Invalid(format!(
            "task uses {} tokens, model vocabulary is {}",
            task.vocab_size(),
            model.config.vocab_size
        )));
    }
    let seq_len = args.seq_len.or(meta.seq_len).unwrap_or(model.config.max_seq_len);
    if seq_len == 0 || seq_len > model.config.max_seq_len {
        return Err(Failure::Invalid(format!(
            "seq_len {seq_len} must be in 1..={}",
            model.config.max_seq_len
        )));
    }
    let batch = eval_batch(&task, args.tokens, seq_len, args.seed)?;
    Ok((task, batch))
}

fn load(path: &Path) -> Result<(Model, CheckpointMeta), Failure> {
    load_checkpoint(path).map_err(|e| Failure::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn eval(
    checkpoint: &Path,
    ks: &[usize],
    patterns: &[String],
    sweep_range: Option<&str>,
    data: &DataArgs,
    out: &Path,
) -> Result<(), Failure> {
    let (model, meta) = load(checkpoint)?;
    let mut list: Vec<ActivationPattern> = ks.iter().map(|&k| ActivationPattern::flat(k)).collect();
    for p in patterns {
        list.push(p.parse()?);
    }
    if let Some(s) = sweep_range {
        list.extend(parse_sweep(s)?.into_iter().map(ActivationPattern::flat));
    }
    if list.is_empty() {
        return Err(Failure::Invalid("give at least one of --k, --pattern or --sweep".into()));
    }
    let n = model.config.num_experts;
    for p in &list {
        if p.max_k() > n {
            return Err(Failure::Invalid(format!("pattern {p} asks for more than {n} experts")));
        }
        expand_pattern(p, model.num_layers())?;
    }
    let (task, batch) = eval_data(&model, &meta, data)?;
    let reports = sweep(&model, &list, &batch)?;

    fs::create_dir_all(out)?;
    let mut m = meta_header("eval");
    m.insert("seed".into(), json!(data.seed));
    m.insert("checkpoint".into(), json!(checkpoint));
    m.insert("patterns".into(), json!(list.iter().map(|p| p.to_string()).collect::<Vec<_>>()));
    m.insert("data".into(), json!(data));
    m.insert("task".into(), serde_json::to_value(&task)?);
    write_meta(out, Value::Object(m))?;
    let mut csv = create(out, "eval.csv")?;
    write_eval_csv(&mut csv, &reports)?;
    csv.flush()?;
    Ok(())
}

pub fn analyze_spearman(checkpoint: &Path, k_large: Option<usize>, data: &DataArgs, out: &Path) -> Result<(), Failure> {
    let (model, meta) = load(checkpoint)?;
    let n = model.config.num_experts;
    let k_large = match k_large {
        Some(k) if k > n => {
            return Err(Failure::Invalid(format!("k_large {k} exceeds the {n} experts per layer")));
        }
        Some(k) => k,
        None => meta.strategy.as_ref().and_then(|s| s.max_k()).unwrap_or(6).min(n),
    };
    if k_large < 2 {
        return Err(Failure::Invalid("k_large must be at least 2".into()));
    }
    let (task, batch) = eval_data(&model, &meta, data)?;
    let map = spearman_heatmap(&model, &batch, k_large)?;

    fs::create_dir_all(out)?;
    let mut m = meta_header("analyze spearman");
    m.insert("seed".into(), json!(data.seed));
    m.insert("checkpoint".into(), json!(checkpoint));
    m.insert("k_large".into(), json!(k_large));
    m.insert("tokens".into(), json!(map.tokens));
    m.insert("undefined".into(), json!(map.undefined));
    m.insert("data".into(), json!(data));
    m.insert("task".into(), serde_json::to_value(&task)?);
    write_meta(out, Value::Object(m))?;
    let mut csv = create(out, "heatmap.csv")?;
    write_heatmap_csv(&mut csv, &map)?;
    csv.flush()?;
    Ok(())
}

pub fn analyze_mods(checkpoint: &Path, out: &Path) -> Result<(), Failure> {
    let (model, _) = load(checkpoint)?;
    let profile = mods_profile(&model)?;
    fs::create_dir_all(out)?;
    let mut m = meta_header("analyze mods");
    m.insert("checkpoint".into(), json!(checkpoint));
    write_meta(out, Value::Object(m))?;
    let mut csv = create(out, "mods.csv")?;
    write_mods_csv(&mut csv, &profile)?;
    csv.flush()?;
    Ok(())
}

pub fn gen_data(
    config: Option<&Path>,
    overrides: &[String],
    tokens: usize,
    split: SplitArg,
    seed: u64,
    ids: bool,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = resolve(config, overrides)?;
    let task = cfg.task;
    task.validate()?;
    let (rng, split) = match split {
        SplitArg::Train => (train_data_rng(&task, seed), Split::Train),
        SplitArg::Eval => (eval_rng(&task, seed), Split::Eval),
    };
    let stream = TaskSource::new(&task, rng, split)?.take(tokens);

    fs::create_dir_all(out)?;
    let mut m = meta_header("gen-data");
    m.insert("seed".into(), json!(seed));
    m.insert("tokens".into(), json!(tokens));
    m.insert("split".into(), json!(split_name(split)));
    m.insert("task".into(), serde_json::to_value(&task)?);
    write_meta(out, Value::Object(m))?;
    let mut f = create(out, "data.txt")?;
    let mut line: Vec<String> = Vec::new();
    for &t in &stream.tokens {
        line.push(if ids { t.to_string() } else { task.render(t) });
        if task.is_separator(t) {
            writeln!(f, "{}", line.join(" "))?;
            line.clear();
        }
    }
    if !line.is_empty() {
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}
