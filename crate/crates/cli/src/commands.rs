use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use kvzip::eviction::{allocate, mask_to_policy_report, BudgetMode};
use kvzip::harness::{
    compression_curve, efficiency_report, eval_queries, eval_repeat_accuracy, gen_task, query_accuracy, MethodSpec,
    TaskSet, TaskSpec, TrainingMix,
};
use kvzip::kvcache::{apply_mask, cache_ratio, read_mask, write_mask};
use kvzip::scoring::{aggregate_head, score_kvzip, score_with, KvzipOptions, RepeatPromptSpec, ScoreTensor};
use kvzip::tinylm::{checkpoint, init_model, train as train_model, Model, TrainOptions};
use kvzip::{Error, Result};

use crate::config::Settings;

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_model(s: &Settings) -> Result<Model> {
    checkpoint::load(s.model_path()?)
}

fn task_for(s: &Settings, model: &Model) -> Result<TaskSpec> {
    let spec = s.task_spec(model.config().vocab_size)?;
    spec.validate(model.config().max_position)?;
    Ok(spec)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    checksum: String,
    first_loss: Option<f32>,
    final_loss: Option<f32>,
}

pub fn train(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let cfg = s.model_config()?;
    let spec = s.task_spec(cfg.vocab_size)?;
    spec.validate(cfg.max_position)?;
    let recipe = kvzip::harness::pinned_recipe();
    let mix = TrainingMix { spec, ..recipe.mix };
    let opts = TrainOptions {
        steps: s.steps.unwrap_or(recipe.options.steps),
        lr: s.lr.unwrap_or(recipe.options.lr),
        seed: s.seed(),
        batch_size: s.batch_size.unwrap_or(recipe.options.batch_size),
        ..recipe.options
    };
    let (model, report) = train_model(&init_model(cfg)?, &mix, &opts)?;
    checkpoint::save(&model, out)?;
    let summary = TrainSummary {
        steps: opts.steps,
        checksum: format!("{:016x}", model.checksum()),
        first_loss: report.losses.first().copied(),
        final_loss: report.losses.last().copied(),
    };
    write_text(None, &json(&summary)?)
}

pub fn score(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let model = load_model(s)?;
    let spec = task_for(s, &model)?;
    let methods = s.methods()?;
    let [method] = methods[..] else {
        return Err(Error::Config("score takes exactly one --method".into()));
    };
    let inst = gen_task(&spec, s.instance.unwrap_or(0))?;
    let cache = model.prefill(&inst.context)?;
    let scored = score_with(&model, &cache, &inst.context, &s.scoring(method))?;
    fs::write(out, scored.scores.to_json()?)?;
    Ok(())
}

pub fn compress(s: &Settings) -> Result<()> {
    let out = s.out()?;
    let path = s
        .scores
        .as_deref()
        .ok_or_else(|| Error::Config("--scores is required".into()))?;
    let scores = ScoreTensor::from_json(&fs::read_to_string(path)?)?;
    let vocab = match &s.model {
        Some(p) => checkpoint::load(p)?.config().vocab_size,
        None => s.model_config()?.vocab_size,
    };
    let spec = s.task_spec(vocab)?;
    let inst = gen_task(&spec, s.instance.unwrap_or(0))?;
    let roles = inst.context.roles_or(kvzip::tinylm::Role::Context);
    let budget = s.budget()?;
    let mask = allocate(&scores, None, &budget, &roles)?;
    let mut file = fs::File::create(out)?;
    write_mask(&mut file, &mask)?;
    if budget.mode == BudgetMode::Headlevel {
        let policy = kvzip::eviction::allocate_headlevel(
            &aggregate_head(&scores),
            budget.ratio,
            budget.sink,
            budget.window,
            scores.len(),
        )?;
        fs::write(out.with_extension("policy.json"), policy.to_json()? + "\n")?;
    }
    write_text(None, &json(&mask_to_policy_report(&mask))?)
}

#[derive(Serialize)]
struct MaskEval {
    instance: usize,
    cache_ratio: f64,
    accuracy: f64,
    full_accuracy: f64,
    repeat_accuracy: f64,
    full_repeat_accuracy: f64,
}

pub fn eval(s: &Settings) -> Result<()> {
    let model = load_model(s)?;
    let spec = task_for(s, &model)?;
    if let Some(mask_path) = &s.mask {
        let index = s.instance.unwrap_or(0);
        let inst = gen_task(&spec, index)?;
        let cache = model.prefill(&inst.context)?;
        let mask = read_mask(&mut fs::File::open(mask_path)?)?;
        let compressed = apply_mask(&cache, &mask)?;
        let prompt = RepeatPromptSpec::standard();
        let report = MaskEval {
            instance: index,
            cache_ratio: cache_ratio(compressed.mask()),
            accuracy: eval_queries(&model, &compressed, &inst.queries)?,
            full_accuracy: query_accuracy(&model, &cache, &inst.queries)?,
            repeat_accuracy: eval_repeat_accuracy(&model, &compressed, &inst.context, &prompt)?,
            full_repeat_accuracy: eval_repeat_accuracy(&model, &cache, &inst.context, &prompt)?,
        };
        return write_text(s.out.as_deref(), &json(&report)?);
    }
    let tasks = [TaskSet::generate(&spec, s.instances.unwrap_or(50))?];
    let budget = s.budget()?;
    let methods: Vec<MethodSpec> = s
        .methods()?
        .into_iter()
        .map(|m| MethodSpec {
            scoring: s.scoring(m),
            budget: budget.clone(),
            head_scores: None,
        })
        .collect();
    let ratios = match (s.ratios.is_some(), s.ratio) {
        (false, Some(r)) => vec![r],
        _ => s.ratio_list()?,
    };
    let report = compression_curve(&model, &tasks, &methods, &ratios)?;
    let csv = s
        .out
        .as_deref()
        .is_some_and(|p| p.extension().is_some_and(|e| e == "csv"));
    let text = if csv { report.to_csv() } else { report.to_json()? };
    write_text(s.out.as_deref(), &text)
}

pub fn bench(s: &Settings) -> Result<()> {
    let model = match &s.model {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let cfg = match &model {
        Some(m) => *m.config(),
        None => s.model_config()?,
    };
    let n_c = s.n_c.unwrap_or(512);
    let m = s.chunk_size.unwrap_or(kvzip::scoring::DEFAULT_CHUNK_SIZE);
    let prompt = RepeatPromptSpec::standard();
    let mut report = efficiency_report(cfg.cache_dims(), n_c, m, s.ratio.unwrap_or(1.0), &prompt)?;
    if let Some(model) = &model {
        let longest = n_c + prompt.n_prompt(m.min(n_c)) + m;
        if n_c >= 2 && longest <= cfg.max_position {
            let spec = TaskSpec::copy(n_c - 1, cfg.vocab_size, s.seed());
            let ctx = gen_task(&spec, 0)?.context;
            let cache = model.prefill(&ctx)?;
            let opts = KvzipOptions {
                chunk_size: m,
                ..KvzipOptions::default()
            };
            let scored = score_kvzip(model, &cache, &ctx, &opts)?;
            report.flops = report
                .flops
                .with_measured(scored.attention_half_pairs, cfg.n_layers * cfg.n_query_heads())?;
        } else {
            log::warn!("context of {n_c} does not fit the model; reporting the analytic count only");
        }
    }
    write_text(s.out.as_deref(), &json(&report)?)
}
