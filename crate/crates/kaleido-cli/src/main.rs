//! Command-line front end: data generation, pre-training, evaluation,
//! ablations, and inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure. Seed resolution: --seed flag wins over the KB_SEED
//! environment variable, which wins over the config file.

use std::path::PathBuf;

use kaleido::config::{
    env_seed, run_eval_retrieval, run_finetune, run_gen_data, run_grad_check, run_inspect_align,
    run_inspect_kpg, run_inspect_masking, run_pretrain, RunConfig,
};
use kaleido::error::{KbError, Result};

const USAGE: &str = "\
kaleido - desk-scale vision-language pre-training pipeline

USAGE:
    kaleido <COMMAND> [OPTIONS]

COMMANDS:
    gen-data         Generate a synthetic product corpus
                     --seed S --count N --out PATH
    pretrain         Pre-train on a corpus
                     --corpus PATH --out-dir DIR [--steps N] [--batch N]
                     [--lr F] [--weight-decay F] [--warmup N] [--seed S]
                     [--strategy agm|random] [--tasks B+I~V] [--log-interval N]
                     [--layers N] [--hidden N] [--heads N] [--d-img N]
                     [--max-text-len N] [--dropout F] [--negative-rate F] [--tau F]
    eval-retrieval   Rank captions or images with a trained checkpoint
                     --corpus PATH --checkpoint PATH --out PATH
                     [--direction itr|tir] [--negatives N] [--seed S]
    finetune-cls     Finetune a classification head on [CLS]
                     --corpus PATH --checkpoint PATH --out PATH
                     [--target category|subcategory] [--steps N] [--batch N]
                     [--lr F] [--freeze-encoder] [--seed S]
    inspect-kpg      Dump the 55 kaleido patches of one record
                     --corpus PATH --image-record I --out-dir DIR
    inspect-align    Print the alignment set of one record
                     --corpus PATH --record I [--tau F] [--heatmaps PATH]
    inspect-masking  Print a masking plan with provenance tags
                     --corpus PATH --record I --seed S [--strategy agm|random]
    grad-check       Verify analytic gradients against central differences
                     [--layers N] [--hidden N] [--heads N] [--d-img N]
                     [--eps F] [--seed S]

GLOBAL OPTIONS:
    --config PATH    Load a saved run configuration first
    --seed S         Master seed (flag > KB_SEED env > config file)
    --help           Show this message
";

struct Args {
    items: Vec<String>,
    pos: usize,
}

impl Args {
    fn next_value(&mut self, flag: &str) -> Result<String> {
        self.pos += 1;
        self.items
            .get(self.pos)
            .cloned()
            .ok_or_else(|| KbError::Usage(format!("{flag} needs a value")))
    }
}

fn parse_and_run(argv: Vec<String>) -> Result<i32> {
    if argv.len() < 2 || argv[1] == "--help" || argv[1] == "-h" || argv[1] == "help" {
        println!("{USAGE}");
        return Ok(0);
    }
    let command = argv[1].clone();
    let known = [
        "gen-data",
        "pretrain",
        "eval-retrieval",
        "finetune-cls",
        "inspect-kpg",
        "inspect-align",
        "inspect-masking",
        "grad-check",
    ];
    if !known.contains(&command.as_str()) {
        return Err(KbError::Usage(format!(
            "unknown command '{command}'; run kaleido --help"
        )));
    }

    // Pass 1: config file, if given.
    let mut cfg = RunConfig::default();
    let mut args = Args { items: argv, pos: 2 };
    let mut i = args.pos;
    while i < args.items.len() {
        if args.items[i] == "--config" {
            let path = args
                .items
                .get(i + 1)
                .ok_or_else(|| KbError::Usage("--config needs a value".into()))?;
            cfg = RunConfig::load(&PathBuf::from(path))?;
            i += 1;
        }
        i += 1;
    }
    cfg.command = command.clone();

    // Pass 2: environment.
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }

    // Pass 3: flags.
    if command == "grad-check" {
        // grad-check defaults to the micro configuration
        cfg.model = kaleido::model::ModelConfig::micro();
    }
    while args.pos < args.items.len() {
        let flag = args.items[args.pos].clone();
        match flag.as_str() {
            "--help" => {
                println!("{USAGE}");
                return Ok(0);
            }
            "--config" => {
                args.pos += 1; // value consumed in pass 1
            }
            "--seed" => {
                let v = args.next_value(&flag)?;
                cfg.seed =
                    v.parse().map_err(|_| KbError::Usage(format!("bad seed '{v}'")))?;
            }
            "--count" => cfg.apply("run", "count", &args.next_value(&flag)?)?,
            "--out" => cfg.apply("paths", "out", &args.next_value(&flag)?)?,
            "--out-dir" => cfg.apply("paths", "out_dir", &args.next_value(&flag)?)?,
            "--corpus" => cfg.apply("paths", "corpus", &args.next_value(&flag)?)?,
            "--checkpoint" => cfg.apply("paths", "checkpoint", &args.next_value(&flag)?)?,
            "--heatmaps" => cfg.apply("paths", "heatmaps", &args.next_value(&flag)?)?,
            "--record" | "--image-record" => {
                cfg.apply("run", "record", &args.next_value(&flag)?)?
            }
            "--negatives" => cfg.apply("run", "negatives", &args.next_value(&flag)?)?,
            "--direction" => cfg.apply("run", "direction", &args.next_value(&flag)?)?,
            "--target" => cfg.apply("run", "target", &args.next_value(&flag)?)?,
            "--eps" => cfg.apply("run", "grad_eps", &args.next_value(&flag)?)?,
            "--steps" => {
                let v = args.next_value(&flag)?;
                if command == "finetune-cls" {
                    cfg.apply("finetune", "steps", &v)?;
                } else {
                    cfg.apply("train", "steps", &v)?;
                }
            }
            "--batch" => {
                let v = args.next_value(&flag)?;
                if command == "finetune-cls" {
                    cfg.apply("finetune", "batch_size", &v)?;
                } else {
                    cfg.apply("train", "batch_size", &v)?;
                }
            }
            "--lr" => {
                let v = args.next_value(&flag)?;
                if command == "finetune-cls" {
                    cfg.apply("finetune", "learning_rate", &v)?;
                } else {
                    cfg.apply("train", "learning_rate", &v)?;
                }
            }
            "--weight-decay" => cfg.apply("train", "weight_decay", &args.next_value(&flag)?)?,
            "--warmup" => cfg.apply("train", "warmup_steps", &args.next_value(&flag)?)?,
            "--strategy" => cfg.apply("train", "strategy", &args.next_value(&flag)?)?,
            "--tasks" => cfg.apply("train", "tasks", &args.next_value(&flag)?)?,
            "--log-interval" => cfg.apply("train", "log_interval", &args.next_value(&flag)?)?,
            "--negative-rate" => cfg.apply("train", "negative_rate", &args.next_value(&flag)?)?,
            "--tau" => cfg.apply("train", "tau", &args.next_value(&flag)?)?,
            "--layers" => cfg.apply("model", "layers", &args.next_value(&flag)?)?,
            "--hidden" => cfg.apply("model", "hidden", &args.next_value(&flag)?)?,
            "--heads" => cfg.apply("model", "heads", &args.next_value(&flag)?)?,
            "--d-img" => cfg.apply("model", "d_img", &args.next_value(&flag)?)?,
            "--max-text-len" => cfg.apply("model", "max_text_len", &args.next_value(&flag)?)?,
            "--dropout" => cfg.apply("model", "dropout", &args.next_value(&flag)?)?,
            "--freeze-encoder" => cfg.apply("finetune", "freeze_encoder", "true")?,
            other => {
                return Err(KbError::Usage(format!(
                    "unknown flag '{other}'; run kaleido --help"
                )));
            }
        }
        args.pos += 1;
    }
    cfg.resolve_seed();

    match command.as_str() {
        "gen-data" => {
            println!("{}", run_gen_data(&cfg)?);
            Ok(0)
        }
        "pretrain" => {
            println!("{}", run_pretrain(&cfg)?);
            Ok(0)
        }
        "eval-retrieval" => {
            let (_, summary) = run_eval_retrieval(&cfg)?;
            println!("{summary}");
            Ok(0)
        }
        "finetune-cls" => {
            let (_, summary) = run_finetune(&cfg)?;
            println!("{summary}");
            Ok(0)
        }
        "inspect-kpg" => {
            println!("{}", run_inspect_kpg(&cfg)?);
            Ok(0)
        }
        "inspect-align" => {
            print!("{}", run_inspect_align(&cfg)?);
            Ok(0)
        }
        "inspect-masking" => {
            print!("{}", run_inspect_masking(&cfg)?);
            Ok(0)
        }
        "grad-check" => {
            let started = std::time::Instant::now();
            let (err, count) = run_grad_check(&cfg)?;
            println!(
                "checked {count} parameters in {:.1?}: max relative error {err:.3e} (eps {})",
                started.elapsed(),
                cfg.grad_eps
            );
            if err < 1e-4 {
                Ok(0)
            } else {
                Err(KbError::Numeric(format!("gradient check failed: {err:.3e} >= 1e-4")))
            }
        }
        _ => unreachable!(),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    match parse_and_run(argv) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, KbError::Usage(_)) {
                eprintln!("\n{USAGE}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
