//! `mdlm`: train, sample, infill prompts and evaluate masked diffusion
//! language models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "mdlm", version, about = "Masked diffusion language-model laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags take precedence over its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// every output is written under this directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// stage kinds in order, e.g. `--stages FS,RO`
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `fixed-count` or `bernoulli`
    #[arg(long)]
    mask_sampler: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gen_length: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// `confidence` or `random`
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    num_candidates: Option<usize>,
    /// `exact-match` or `absolute-error`
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    scorer_range: Option<f64>,
    #[arg(long)]
    infill_temperature: Option<f64>,
    #[arg(long)]
    infill_steps: Option<usize>,
    #[arg(long)]
    validation_temperature: Option<f64>,
    #[arg(long)]
    validation_steps: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    mask_size: Option<usize>,
    /// `confidence` or `random`
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Debug, Args)]
struct PplArgs {
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
    /// `full` or `response`
    #[arg(long)]
    region: Option<String>,
    /// `mask-count` or `time-sampled`
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    t_min: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset, its vocabulary and a pipeline template
    Synth {
        #[command(flatten)]
        common: Common,
        /// `template-recovery` or `arithmetic`
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        heldout_size: Option<usize>,
        #[arg(long)]
        fewshot: Option<usize>,
    },
    /// Run fine-tuning stages and write one checkpoint per stage
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate a response after a prompt
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Fill the masks of a template
    Infill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        response: Option<String>,
        /// `name=value`, repeatable
        #[arg(long = "slot")]
        slots: Vec<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Propose, validate and select infilled prompts
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Refine an existing prompt window by window
    SwInfill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Diffusion perplexity of a dataset
    Ppl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        ppl: PplArgs,
    },
    /// Generate answers for a dataset and report task metrics
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Print a checkpoint's configuration, stage and parameter hash
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn common(o: &mut Overrides, c: &Common) {
    o.put_u64("seed", c.seed);
    o.put_path("out_dir", c.out_dir.as_ref());
}

fn sampler(o: &mut Overrides, s: &SamplerArgs) {
    o.put_usize("sampler.steps", s.steps);
    o.put_usize("sampler.gen_length", s.gen_length);
    o.put("sampler.temperature", s.temperature);
    o.put("sampler.strategy", s.strategy.clone());
}

fn pipeline(o: &mut Overrides, p: &PipelineArgs) {
    o.put_path("pipeline.template", p.template.as_ref());
    o.put_path("pipeline.examples", p.examples.as_ref());
    o.put_path("pipeline.test", p.test.as_ref());
    o.put_usize("pipeline.num_candidates", p.num_candidates);
    o.put("pipeline.scorer", p.scorer.clone());
    o.put("pipeline.scorer_range", p.scorer_range);
    o.put("pipeline.infill_temperature", p.infill_temperature);
    o.put_usize("pipeline.infill_steps", p.infill_steps);
    o.put("pipeline.validation_temperature", p.validation_temperature);
    o.put_usize("pipeline.validation_steps", p.validation_steps);
    o.put_usize("pipeline.window", p.window);
    o.put_usize("pipeline.stride", p.stride);
    o.put_usize("pipeline.mask_size", p.mask_size);
    o.put("sampler.strategy", p.strategy.clone());
}

/// The command name, its config file and the flag overrides.
fn overrides(cmd: &Command) -> (&'static str, Option<PathBuf>, Overrides) {
    let mut o = Overrides::default();
    let (name, c) = match cmd {
        Command::Synth {
            common: c,
            task,
            size,
            heldout_size,
            fewshot,
        } => {
            o.put("synth.task", task.clone());
            o.put_usize("synth.size", *size);
            o.put_usize("synth.heldout_size", *heldout_size);
            o.put_usize("synth.fewshot", *fewshot);
            ("synth", c)
        }
        Command::Train {
            common: c,
            vocab,
            data,
            model,
            train,
        } => {
            o.put_path("vocab", vocab.as_ref());
            o.put_path("data", data.as_ref());
            o.put_usize("model.d_model", model.d_model);
            o.put_usize("model.n_layers", model.n_layers);
            o.put_usize("model.n_heads", model.n_heads);
            o.put_usize("model.max_len", model.max_len);
            o.put_usize("model.d_ff", model.d_ff);
            o.put_list("train.stages", &train.stages);
            o.put("train.peak_lr", train.peak_lr);
            o.put_usize("train.warmup_steps", train.warmup_steps);
            o.put_usize("train.batch_size", train.batch_size);
            o.put_usize("train.epochs", train.epochs);
            o.put("train.mask_sampler", train.mask_sampler.clone());
            o.put("train.weight_decay", train.weight_decay);
            o.put("train.clip_norm", train.clip_norm);
            ("train", c)
        }
        Command::Generate {
            common: c,
            checkpoint,
            vocab,
            prompt,
            sampler: s,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            o.put("generate.prompt", prompt.clone());
            sampler(&mut o, s);
            ("generate", c)
        }
        Command::Infill {
            common: c,
            checkpoint,
            vocab,
            template,
            response,
            slots,
            sampler: s,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            o.put("infill.template", template.clone());
            o.put("infill.response", response.clone());
            o.put_list("infill.slots", slots);
            sampler(&mut o, s);
            ("infill", c)
        }
        Command::Pipeline {
            common: c,
            checkpoint,
            vocab,
            pipeline: p,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            pipeline(&mut o, p);
            ("pipeline", c)
        }
        Command::SwInfill {
            common: c,
            checkpoint,
            vocab,
            pipeline: p,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            pipeline(&mut o, p);
            ("sw-infill", c)
        }
        Command::Ppl {
            common: c,
            checkpoint,
            vocab,
            data,
            ppl,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            o.put_path("data", data.as_ref());
            o.put_usize("ppl.mc_samples", ppl.mc_samples);
            o.put("ppl.sigma_max", ppl.sigma_max);
            o.put("ppl.region", ppl.region.clone());
            o.put("ppl.estimator", ppl.estimator.clone());
            o.put("ppl.t_min", ppl.t_min);
            ("ppl", c)
        }
        Command::Eval {
            common: c,
            checkpoint,
            vocab,
            data,
            sampler: s,
        } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            o.put_path("vocab", vocab.as_ref());
            o.put_path("data", data.as_ref());
            sampler(&mut o, s);
            ("eval", c)
        }
        Command::Inspect { common: c, checkpoint } => {
            o.put_path("checkpoint", checkpoint.as_ref());
            ("inspect", c)
        }
    };
    common(&mut o, c);
    (name, c.config.clone(), o)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, file, o) = overrides(&cli.command);
    let settings = match config::resolve(name, file.as_deref(), o) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match commands::run(&settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
