use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mdlm_core::checkpoint::Checkpoint;
use mdlm_core::data::{read_jsonl, save_jsonl, tokenize_all, Pair};
use mdlm_core::denoiser::{Denoiser, DenoiserConfig};
use mdlm_core::eval::{
    corpus_ppl, synth::RECOVERY_TASKS, synth_task_generate, KeyValue, MetricReport, PplConfig, PplEstimator,
    SynthTask, SynthTaskSpec,
};
use mdlm_core::noise::NoiseSchedule;
use mdlm_core::pipeline::{
    apply_prompt, assemble_infill_context, optimize_prompt, sliding_window_infill, write_candidate_report,
    CandidateRecord, FewShotExample, InfillCandidate, PipelineConfig, PromptTemplate, Scorer, Slots, TieBreak,
};
use mdlm_core::sampler::{generate, infill, SamplerConfig, UnmaskStrategy};
use mdlm_core::seed::derive_seed;
use mdlm_core::training::{run_pipeline, MaskSampler, StageKind, StageSpec, TrainConfig};
use mdlm_core::{MaskingPolicy, NoisySequence, Vocabulary};

use crate::config::Settings;

/// Usage and configuration problems exit with 1, everything else with 2.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

pub fn run(s: &Settings) -> Outcome {
    match s.command.as_str() {
        "synth" => synth(s),
        "train" => train(s),
        "generate" => generate_cmd(s),
        "infill" => infill_cmd(s),
        "pipeline" => pipeline_cmd(s),
        "sw-infill" => sw_infill(s),
        "ppl" => ppl(s),
        "eval" => eval(s),
        "inspect" => inspect(s),
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Outcome<&'a Path> {
    v.as_deref().ok_or_else(|| usage(format!("missing --{name}")))
}

/// Creates the output directory and writes the resolved configuration.
fn start_outputs(s: &Settings) -> Outcome<PathBuf> {
    let dir = s.out_dir.clone();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .runtime()?;
    write(&dir.join("config.toml"), s.to_toml().usage()?)?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()
}

fn jsonl<T: Serialize>(items: &[T]) -> Outcome<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).runtime()?);
        out.push('\n');
    }
    Ok(out)
}

fn load_vocab(s: &Settings) -> Outcome<Vocabulary> {
    let path = required(&s.vocab, "vocab")?;
    Vocabulary::load(path).runtime()
}

/// Loads the checkpoint and checks that it was trained with `vocab`.
fn load_model(s: &Settings, vocab: &Vocabulary) -> Outcome<(Checkpoint, Denoiser)> {
    let path = required(&s.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(path).runtime()?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(usage(format!(
            "checkpoint {} was trained with a different vocabulary",
            path.display()
        )));
    }
    let model = ckpt.model().runtime()?;
    Ok((ckpt, model))
}

fn strategy(name: &str) -> Outcome<UnmaskStrategy> {
    match name {
        "confidence" => Ok(UnmaskStrategy::Confidence),
        "random" => Ok(UnmaskStrategy::Random),
        other => Err(usage(format!("unknown unmasking strategy {other:?}"))),
    }
}

fn sampler_config(s: &Settings) -> Outcome<SamplerConfig> {
    let cfg = SamplerConfig {
        steps: s.sampler.steps,
        gen_length: s.sampler.gen_length,
        temperature: s.sampler.temperature,
        strategy: strategy(&s.sampler.strategy)?,
        seed: derive_seed(s.seed, "sampler", 0),
    };
    cfg.validate().usage()?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    slots: Slots,
    response: String,
}

fn read_examples(path: &Path, vocab: &Vocabulary) -> Outcome<Vec<FewShotExample>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .runtime()?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ExampleRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .runtime()?;
        let response = vocab
            .encode(&rec.response)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .runtime()?;
        out.push(
            FewShotExample::new(rec.slots, response)
                .with_context(|| format!("{}:{}", path.display(), i + 1))
                .runtime()?,
        );
    }
    if out.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} contains no examples", path.display())));
    }
    Ok(out)
}

fn read_template(path: &Path, vocab: &Vocabulary) -> Outcome<PromptTemplate> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .runtime()?;
    PromptTemplate::parse(&text, vocab)
        .with_context(|| format!("in template {}", path.display()))
        .runtime()
}

fn synth(s: &Settings) -> Outcome {
    let task: SynthTask = s.synth.task.parse().usage()?;
    let spec = SynthTaskSpec {
        task,
        size: s.synth.size,
        heldout_size: s.synth.heldout_size,
        seed: s.seed,
    };
    let data = synth_task_generate(&spec).usage()?;
    let dir = start_outputs(s)?;
    save_jsonl(&data.train_pairs(), dir.join("train.jsonl")).runtime()?;
    save_jsonl(&data.heldout_pairs(), dir.join("heldout.jsonl")).runtime()?;
    data.vocab.save(dir.join("vocab.txt")).runtime()?;

    // pipeline inputs for the first task: a template with the instruction
    // masked, few-shot examples from train and test inputs from held-out
    let template = match task {
        SynthTask::TemplateRecovery => format!("<mask*{}> {{input}} =\n", data.instruction_len),
        SynthTask::Arithmetic => format!("<mask*{}> P: {{input}} =\n", data.instruction_len),
    };
    write(&dir.join("template.txt"), template)?;
    let records = |examples: &[mdlm_core::eval::SynthExample], limit: usize| -> Vec<ExampleRecord> {
        examples
            .iter()
            .filter(|e| e.task == 0)
            .take(limit)
            .map(|e| ExampleRecord {
                slots: Slots::from([("input".to_string(), e.input.clone())]),
                response: e.pair.response.clone(),
            })
            .collect()
    };
    write(&dir.join("fewshot.jsonl"), jsonl(&records(&data.train, s.synth.fewshot))?)?;
    write(&dir.join("test.jsonl"), jsonl(&records(&data.heldout, usize::MAX))?)?;
    let name = match task {
        SynthTask::TemplateRecovery => RECOVERY_TASKS[0].0,
        SynthTask::Arithmetic => "addition",
    };
    println!(
        "wrote {} train and {} held-out pairs to {} (pipeline files target task `{name}`)",
        data.train.len(),
        data.heldout.len(),
        dir.display()
    );
    Ok(())
}

fn mask_sampler(name: &str) -> Outcome<MaskSampler> {
    match name {
        "fixed-count" => Ok(MaskSampler::FixedCount),
        "bernoulli" => Ok(MaskSampler::Bernoulli),
        other => Err(usage(format!("unknown mask sampler {other:?}"))),
    }
}

fn train(s: &Settings) -> Outcome {
    let t = &s.train;
    if t.stages.is_empty() {
        return Err(usage("at least one stage is required"));
    }
    let sampler = mask_sampler(&t.mask_sampler)?;
    let stages = t
        .stages
        .iter()
        .map(|name| {
            let kind: StageKind = name.parse().usage()?;
            let config = TrainConfig {
                peak_lr: t.peak_lr,
                warmup_steps: t.warmup_steps,
                batch_size: t.batch_size,
                epochs: t.epochs.unwrap_or(kind.default_epochs()),
                weight_decay: t.weight_decay,
                clip_norm: t.clip_norm,
                ..TrainConfig::default()
            };
            config.validate().usage()?;
            Ok(StageSpec { kind, config, sampler })
        })
        .collect::<Outcome<Vec<_>>>()?;
    let data_path = required(&s.data, "data")?;
    let vocab = load_vocab(s)?;
    let model_cfg = DenoiserConfig {
        vocab_size: vocab.size(),
        d_model: s.model.d_model,
        n_layers: s.model.n_layers,
        n_heads: s.model.n_heads,
        max_len: s.model.max_len,
        d_ff: s.model.d_ff,
    };
    model_cfg.validate().usage()?;
    let pairs = read_jsonl(data_path).runtime()?;
    let dataset = tokenize_all(&pairs, &vocab)
        .with_context(|| format!("tokenizing {}", data_path.display()))
        .runtime()?;
    if let Some(longest) = dataset.iter().map(|d| d.len()).max() {
        if longest > model_cfg.max_len {
            return Err(usage(format!(
                "{} has a sequence of {longest} tokens but max_len is {}",
                data_path.display(),
                model_cfg.max_len
            )));
        }
    }
    let dir = start_outputs(s)?;
    let model = Denoiser::init(model_cfg, derive_seed(s.seed, "init", 0)).runtime()?;
    let outcome = run_pipeline(
        model,
        &stages,
        &dataset,
        vocab.mask_id(),
        &vocab.hash(),
        derive_seed(s.seed, "train", 0),
        Some(&dir),
    )
    .runtime()?;
    write(&dir.join("train_log.tsv"), outcome.log.to_tsv())?;
    let records: Vec<serde_json::Value> = outcome
        .stages
        .iter()
        .map(|a| {
            json!({
                "stage": a.tag.as_str(),
                "checkpoint": a.path.as_ref().map(|p| p.to_string_lossy().into_owned()),
                "param_hash": a.param_hash,
            })
        })
        .collect();
    write(&dir.join("stages.jsonl"), jsonl(&records)?)?;
    println!("{:<8} {:<66} checkpoint", "stage", "param_hash");
    for a in &outcome.stages {
        let path = a.path.as_ref().map_or(String::new(), |p| p.display().to_string());
        println!("{:<8} {:<66} {path}", a.tag.as_str(), a.param_hash);
    }
    Ok(())
}

fn generate_cmd(s: &Settings) -> Outcome {
    let prompt = s
        .generate
        .prompt
        .clone()
        .ok_or_else(|| usage("missing --prompt"))?;
    let cfg = sampler_config(s)?;
    let vocab = load_vocab(s)?;
    let prompt_ids = vocab.encode(&prompt).usage()?;
    let (_, model) = load_model(s, &vocab)?;
    if prompt_ids.len() + cfg.gen_length > model.config().max_len {
        return Err(usage(format!(
            "prompt ({} tokens) plus gen_length {} exceeds max_len {}",
            prompt_ids.len(),
            cfg.gen_length,
            model.config().max_len
        )));
    }
    let dir = start_outputs(s)?;
    let out = generate(&model, &prompt_ids, vocab.mask_id(), &cfg).runtime()?;
    let response = vocab.decode(out.sequence.response()).runtime()?;
    let answer = vocab.decode_answer(out.sequence.response()).runtime()?;
    let record = json!({ "prompt": prompt, "response": response, "answer": answer });
    write(&dir.join("generation.json"), format!("{record}\n"))?;
    let mut trace = Vec::new();
    out.write_trace_jsonl(&mut trace).runtime()?;
    write(&dir.join("trace.jsonl"), trace)?;
    println!("{response}");
    Ok(())
}

fn parse_slots(items: &[String]) -> Outcome<Slots> {
    items
        .iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("slot {kv:?} is not name=value")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn infill_cmd(s: &Settings) -> Outcome {
    let text = s
        .infill
        .template
        .clone()
        .ok_or_else(|| usage("missing --template"))?;
    let slots = parse_slots(&s.infill.slots)?;
    let cfg = sampler_config(s)?;
    let vocab = load_vocab(s)?;
    let template = PromptTemplate::parse(&text, &vocab).usage()?;
    let context = match &s.infill.response {
        Some(r) => {
            let example = FewShotExample::new(slots, vocab.encode(r).usage()?).usage()?;
            assemble_infill_context(&template, &example, &vocab).usage()?
        }
        None => {
            let inst = template.instantiate(&slots, &vocab).usage()?;
            let n = inst.tokens.len();
            NoisySequence::template(inst.tokens, n, &vocab).usage()?
        }
    };
    let (_, model) = load_model(s, &vocab)?;
    if context.len() > model.config().max_len {
        return Err(usage(format!(
            "context of {} tokens exceeds max_len {}",
            context.len(),
            model.config().max_len
        )));
    }
    let dir = start_outputs(s)?;
    let out = infill(&model, &context, &cfg).runtime()?;
    let filled = vocab.decode(out.sequence.prompt()).runtime()?;
    let record = json!({
        "template": text,
        "filled": filled,
        "response": s.infill.response,
    });
    write(&dir.join("infill.json"), format!("{record}\n"))?;
    let mut trace = Vec::new();
    out.write_trace_jsonl(&mut trace).runtime()?;
    write(&dir.join("trace.jsonl"), trace)?;
    println!("{filled}");
    Ok(())
}

fn pipeline_config(s: &Settings) -> Outcome<PipelineConfig> {
    let p = &s.pipeline;
    let scorer = match p.scorer.as_str() {
        "exact-match" => Scorer::ExactMatch,
        "absolute-error" => Scorer::AbsoluteError { range: p.scorer_range },
        other => return Err(usage(format!("unknown scorer {other:?}"))),
    };
    let strategy = strategy(&s.sampler.strategy)?;
    let cfg = PipelineConfig {
        num_candidates: p.num_candidates,
        infill: SamplerConfig {
            steps: p.infill_steps,
            gen_length: 0,
            temperature: p.infill_temperature,
            strategy,
            seed: 0,
        },
        validation: SamplerConfig {
            steps: p.validation_steps,
            gen_length: 0,
            temperature: p.validation_temperature,
            strategy,
            seed: 0,
        },
        scorer,
        tie_break: TieBreak::LowestIndex,
        seed: derive_seed(s.seed, "pipeline", 0),
    };
    cfg.validate().usage()?;
    Ok(cfg)
}

fn selected_record(best: &InfillCandidate, vocab: &Vocabulary) -> Outcome<String> {
    let rec = CandidateRecord::new(best, vocab).runtime()?;
    Ok(format!("{}\n", json!({ "selected": rec })))
}

fn print_candidates(cands: &[InfillCandidate], best: &InfillCandidate, vocab: &Vocabulary) -> Outcome {
    println!("{:>5} {:>7}  prompt", "index", "score");
    for c in cands {
        let mark = if c.index == best.index { "*" } else { " " };
        println!(
            "{:>5} {:>7.3}{mark} {}",
            c.index,
            c.score.unwrap_or(f64::NAN),
            c.prompt.to_text(vocab).runtime()?
        );
    }
    Ok(())
}

fn pipeline_cmd(s: &Settings) -> Outcome {
    let cfg = pipeline_config(s)?;
    let template_path = required(&s.pipeline.template, "template")?;
    let examples_path = required(&s.pipeline.examples, "examples")?;
    let vocab = load_vocab(s)?;
    let template = read_template(template_path, &vocab)?;
    let examples = read_examples(examples_path, &vocab)?;
    let test = match &s.pipeline.test {
        Some(p) => Some(read_examples(p, &vocab)?),
        None => None,
    };
    let (_, model) = load_model(s, &vocab)?;
    let dir = start_outputs(s)?;
    let outcome = optimize_prompt(&model, &template, &examples, &cfg, &vocab).runtime()?;
    let mut report = Vec::new();
    write_candidate_report(&outcome.candidates, &vocab, &mut report).runtime()?;
    write(&dir.join("candidates.jsonl"), report)?;
    write(&dir.join("selected.json"), selected_record(&outcome.best, &vocab)?)?;
    write(&dir.join("selected_prompt.txt"), format!("{}\n", outcome.best.prompt.to_text(&vocab).runtime()?))?;
    print_candidates(&outcome.candidates, &outcome.best, &vocab)?;
    if let Some(test) = test {
        let inputs: Vec<Slots> = test.iter().map(|e| e.slots.clone()).collect();
        let width = test.iter().map(|e| e.response.len()).max().unwrap_or(0);
        let sampler = SamplerConfig {
            seed: derive_seed(s.seed, "apply", 0),
            ..cfg.validation
        };
        let answers = apply_prompt(&model, &outcome.best.prompt, &inputs, width, &sampler, &vocab).runtime()?;
        let references = test
            .iter()
            .map(|e| vocab.decode_answer(&e.response))
            .collect::<Result<Vec<_>, _>>()
            .runtime()?;
        let preds: Vec<serde_json::Value> = answers
            .iter()
            .zip(&references)
            .map(|(a, r)| json!({ "prediction": a, "reference": r }))
            .collect();
        write(&dir.join("predictions.jsonl"), jsonl(&preds)?)?;
        let report = MetricReport::from_answers(&answers, &references).runtime()?;
        emit_metrics(s, &dir, "selected", &report)?;
    }
    Ok(())
}

fn sw_infill(s: &Settings) -> Outcome {
    let cfg = pipeline_config(s)?;
    let p = &s.pipeline;
    if p.mask_size == 0 || p.stride == 0 || p.window < p.mask_size {
        return Err(usage("need window >= mask_size >= 1 and stride >= 1"));
    }
    let template_path = required(&p.template, "template")?;
    let examples_path = required(&p.examples, "examples")?;
    let vocab = load_vocab(s)?;
    let prompt = read_template(template_path, &vocab)?;
    if prompt.num_masks() > 0 {
        return Err(usage("sliding-window refinement needs a prompt without masks"));
    }
    let examples = read_examples(examples_path, &vocab)?;
    let (_, model) = load_model(s, &vocab)?;
    let dir = start_outputs(s)?;
    let out = sliding_window_infill(&model, &prompt, p.window, p.stride, p.mask_size, &examples, &cfg, &vocab)
        .runtime()?;
    let mut report = Vec::new();
    write_candidate_report(&out.candidates, &vocab, &mut report).runtime()?;
    write(&dir.join("candidates.jsonl"), report)?;
    write(&dir.join("selected.json"), selected_record(&out.best, &vocab)?)?;
    write(&dir.join("selected_prompt.txt"), format!("{}\n", out.best.prompt.to_text(&vocab).runtime()?))?;
    print_candidates(&out.candidates, &out.best, &vocab)
}

fn emit_metrics(s: &Settings, dir: &Path, template: &str, report: &MetricReport) -> Outcome {
    let checkpoint = s.checkpoint.as_ref().map(|p| p.to_string_lossy().into_owned());
    let record = json!({
        "checkpoint": checkpoint,
        "template": template,
        "suite": "task",
        "metrics": report,
    });
    write(&dir.join("metrics.jsonl"), format!("{record}\n"))?;
    write(&dir.join("metrics.txt"), report.to_kv())?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "template", "EM", "pearson", "spearman", "kendall", "n"
    );
    println!(
        "{:<10} {:>8.4} {:>8} {:>8} {:>8} {:>7}",
        template,
        report.exact_match,
        fmt(report.pearson),
        fmt(report.spearman),
        fmt(report.kendall),
        report.samples
    );
    Ok(())
}

fn ppl(s: &Settings) -> Outcome {
    let p = &s.ppl;
    let region = match p.region.as_str() {
        "full" => MaskingPolicy::FullSequence,
        "response" => MaskingPolicy::ResponseOnly,
        other => return Err(usage(format!("unknown region {other:?}"))),
    };
    let estimator = match p.estimator.as_str() {
        "mask-count" => PplEstimator::MaskCount,
        "time-sampled" => PplEstimator::TimeSampled { t_min: p.t_min },
        other => return Err(usage(format!("unknown estimator {other:?}"))),
    };
    let cfg = PplConfig {
        mc_samples: p.mc_samples,
        schedule: NoiseSchedule::new(p.sigma_max).usage()?,
        region,
        estimator,
        seed: derive_seed(s.seed, "ppl", 0),
        batch_size: 64,
    };
    cfg.validate().usage()?;
    let data_path = required(&s.data, "data")?;
    let vocab = load_vocab(s)?;
    let (ckpt, model) = load_model(s, &vocab)?;
    let pairs = read_jsonl(data_path).runtime()?;
    let seqs = tokenize_all(&pairs, &vocab).runtime()?;
    let dir = start_outputs(s)?;
    let est = corpus_ppl(&model, &seqs, vocab.mask_id(), &cfg).runtime()?;
    let record = json!({
        "checkpoint": s.checkpoint.as_ref().map(|p| p.to_string_lossy().into_owned()),
        "stage": ckpt.stage.as_str(),
        "data": data_path.to_string_lossy(),
        "region": p.region,
        "estimator": p.estimator,
        "estimate": est,
    });
    write(&dir.join("ppl.jsonl"), format!("{record}\n"))?;
    write(&dir.join("ppl.txt"), est.to_kv())?;
    println!("{:<8} {:>10} {:>12} {:>12} {:>8}", "stage", "ppl", "nelbo/tok", "se/tok", "draws");
    println!(
        "{:<8} {:>10.4} {:>12.5} {:>12.5} {:>8}",
        ckpt.stage.as_str(),
        est.ppl,
        est.nelbo_per_token,
        est.std_err_per_token(),
        est.mc_samples
    );
    Ok(())
}

fn eval(s: &Settings) -> Outcome {
    let cfg = sampler_config(s)?;
    let data_path = required(&s.data, "data")?;
    let vocab = load_vocab(s)?;
    let pairs: Vec<Pair> = read_jsonl(data_path).runtime()?;
    let (_, model) = load_model(s, &vocab)?;
    let mut answers = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    let mut jobs = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let prompt = vocab
            .encode(&p.prompt)
            .with_context(|| format!("{}:{}", data_path.display(), i + 1))
            .runtime()?;
        let reference = vocab
            .encode(&p.response)
            .with_context(|| format!("{}:{}", data_path.display(), i + 1))
            .runtime()?;
        if prompt.len() + reference.len() > model.config().max_len {
            return Err(usage(format!("{}:{} exceeds max_len", data_path.display(), i + 1)));
        }
        jobs.push((prompt, reference));
    }
    let dir = start_outputs(s)?;
    let mut preds = Vec::with_capacity(jobs.len());
    for (i, (prompt, reference)) in jobs.iter().enumerate() {
        let run = SamplerConfig {
            gen_length: reference.len(),
            seed: derive_seed(cfg.seed, "eval", i as u64),
            ..cfg
        };
        let out = generate(&model, prompt, vocab.mask_id(), &run).runtime()?;
        let a = vocab.decode_answer(out.sequence.response()).runtime()?;
        let r = vocab.decode_answer(reference).runtime()?;
        preds.push(json!({ "prediction": a, "reference": r }));
        answers.push(a);
        references.push(r);
    }
    write(&dir.join("predictions.jsonl"), jsonl(&preds)?)?;
    let report = MetricReport::from_answers(&answers, &references).runtime()?;
    emit_metrics(s, &dir, "data", &report)
}

fn inspect(s: &Settings) -> Outcome {
    let path = required(&s.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(path).runtime()?;
    let hash = ckpt.param_hash().runtime()?;
    let dir = start_outputs(s)?;
    let record = json!({
        "checkpoint": path.to_string_lossy(),
        "stage": ckpt.stage.as_str(),
        "param_hash": hash,
        "vocab_hash": ckpt.vocab_hash,
        "num_params": ckpt.params.len(),
        "config": ckpt.config,
    });
    write(&dir.join("inspect.json"), format!("{record}\n"))?;
    let mut text = String::new();
    let c = &ckpt.config;
    let _ = writeln!(text, "stage:      {}", ckpt.stage);
    let _ = writeln!(text, "param_hash: {hash}");
    let _ = writeln!(text, "vocab_hash: {}", ckpt.vocab_hash);
    let _ = writeln!(text, "params:     {}", ckpt.params.len());
    let _ = writeln!(
        text,
        "config:     vocab {} d_model {} layers {} heads {} max_len {} d_ff {}",
        c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_len, c.d_ff
    );
    print!("{text}");
    Ok(())
}
