//! Command-line entry points and the artifact pipeline: run directories
//! content-addressed by config hash, checkpoint/report management, and the
//! per-command orchestration.

use crate::audio::{read_wav, write_wav};
use crate::codec::{pretrain_codec, Codec};
use crate::config::Config;
use crate::dataset::{load_dataset, make_toy_dataset, save_dataset, split_dataset, Utterance};
use crate::error::{Error, Result};
use crate::flops::{bench_csv, bench_table, flops_per_second, CostConvention};
use crate::metrics::{
    codec_fidelity_delta, log_spectral_distance, si_sdr, token_accuracy, MetricReport,
    UtteranceMetrics,
};
use crate::models::{enhance, DecodeMode, Model, Variant};
use crate::train::train;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "lse",
    about = "Speech enhancement in the latent space of a toy neural audio codec",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON, versioned schema).
    #[arg(long)]
    pub config: PathBuf,
    /// Override every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for run artifacts.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Utterance-level parallelism for evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the toy codec on synthetic clean speech.
    CodecPretrain(CommonArgs),
    /// Synthesize a paired noisy/clean dataset directory.
    MakeDataset(CommonArgs),
    /// Train one enhancement variant against a pretrained codec.
    SeTrain {
        #[command(flatten)]
        common: CommonArgs,
        /// One of d-ar, d-nar, d-nar-star, c-ar, c-nar, c-ft, d-ft, c-nar-ft.
        #[arg(long)]
        variant: String,
    },
    /// Enhance one wav file with a trained model checkpoint.
    Enhance {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint (self-contained, embeds the codec).
        #[arg(long)]
        model: PathBuf,
        /// Noisy input wav (PCM16 mono at the configured rate).
        #[arg(long = "in")]
        input: PathBuf,
        /// Enhanced output wav.
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Evaluate a trained model on a dataset directory.
    Eval(CommonArgs),
    /// Print the analytic inference-cost table.
    BenchFlops {
        #[command(flatten)]
        common: CommonArgs,
        /// A variant name or "all".
        #[arg(long, default_value = "all")]
        variant: String,
        /// Seconds of audio to cost.
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Clean-speech fidelity degradation of a fine-tuned encoder.
    CodecFidelity(CommonArgs),
}

/// Parse and run; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap handles --help/--version as "errors" with success status.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.category().exit_code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let mut config = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn make_run_dir(common: &CommonArgs, command: &str, config: &Config) -> Result<PathBuf> {
    let dir = common
        .out_dir
        .join(format!("{command}-{}", config.content_hash()));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    config.save(dir.join("config.json"))?;
    Ok(dir)
}

fn synth_pairs(config: &Config) -> Result<Vec<Utterance>> {
    make_toy_dataset(&config.dataset.mixture, config.dataset.count, &config.dataset.noise)
}

fn dataset_pairs(config: &Config) -> Result<Vec<Utterance>> {
    match &config.paths.dataset_dir {
        Some(dir) => load_dataset(dir),
        None => synth_pairs(config),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeDataset(common) => {
            let config = load_config(&common)?;
            let run_dir = make_run_dir(&common, "make-dataset", &config)?;
            let pairs = synth_pairs(&config)?;
            let data_dir = run_dir.join("dataset");
            save_dataset(&data_dir, &pairs)?;
            println!(
                "wrote {} utterance pairs ({:.2} s at {} Hz) to {}",
                pairs.len(),
                config.dataset.mixture.segment_seconds,
                config.dataset.mixture.sample_rate,
                data_dir.display()
            );
            Ok(())
        }
        Command::CodecPretrain(common) => {
            let config = load_config(&common)?;
            let run_dir = make_run_dir(&common, "codec-pretrain", &config)?;
            let clean: Vec<_> = dataset_pairs(&config)?.into_iter().map(|u| u.clean).collect();
            let (codec, logs) = pretrain_codec(&clean, &config.codec, &config.codec_pretrain)?;
            let ckpt = run_dir.join("codec.lse");
            codec.save(&ckpt)?;
            let mut csv = String::from(
                "epoch,train_loss,valid_si_sdr_db,valid_si_sdr_unquantized_db,codebook_usage\n",
            );
            for log in &logs {
                csv.push_str(&format!(
                    "{},{:.9},{:.6},{:.6},{}\n",
                    log.epoch,
                    log.train_loss,
                    log.valid_si_sdr_db,
                    log.valid_si_sdr_unquantized_db,
                    log.codebook_usage
                        .iter()
                        .map(|u| format!("{u:.3}"))
                        .collect::<Vec<_>>()
                        .join("|")
                ));
            }
            std::fs::write(run_dir.join("pretrain_log.csv"), csv)
                .map_err(|e| Error::io("write pretrain_log.csv".into(), e))?;
            let last = logs.last().expect("at least one epoch");
            println!(
                "codec pretrained: valid SI-SDR {:.2} dB (quantized), {:.2} dB (autoencoder); checkpoint {}",
                last.valid_si_sdr_db,
                last.valid_si_sdr_unquantized_db,
                ckpt.display()
            );
            Ok(())
        }
        Command::SeTrain { common, variant } => {
            let config = load_config(&common)?;
            let variant = Variant::from_cli(&variant)?;
            let codec_path = config.paths.codec_checkpoint.clone().ok_or_else(|| {
                Error::Config("se-train requires paths.codec_checkpoint in the config".into())
            })?;
            let codec = Codec::load(&codec_path)?;
            if codec.config != config.codec {
                return Err(Error::Config(
                    "codec checkpoint config differs from the run config codec section".into(),
                ));
            }
            let run_dir = make_run_dir(&common, &format!("se-train-{}", variant.cli_name()), &config)?;
            let pairs = dataset_pairs(&config)?;
            let (train_set, valid_set) = split_dataset(pairs, config.dataset.valid_fraction);
            let model = Model::init(config.model_config(variant), codec)?;
            let outcome = train(
                model,
                &train_set,
                &valid_set,
                &config.train,
                Some(&run_dir),
                None,
                None,
            )?;
            println!(
                "trained {variant}: initial train NLL {:.4}, best valid NLL {:.4} (epoch {}); checkpoint {}",
                outcome.log.initial_train_nll,
                outcome.log.best_valid_nll,
                outcome.log.best_epoch,
                run_dir.join("best.lse").display()
            );
            Ok(())
        }
        Command::Enhance {
            common,
            model,
            input,
            output,
        } => {
            // The checkpoint is self-contained; the config (when present)
            // is validated but not otherwise needed.
            let _ = load_config(&common)?;
            let model = Model::load(&model)?;
            let noisy = read_wav(&input)?;
            let (enhanced, trace) = enhance(&model, &noisy, DecodeMode::Cached)?;
            write_wav(&output, &enhanced)?;
            println!(
                "enhanced {} -> {} ({} samples, route {})",
                input.display(),
                output.display(),
                enhanced.len(),
                trace.route
            );
            Ok(())
        }
        Command::Eval(common) => {
            let config = load_config(&common)?;
            let model_path = config.paths.model_checkpoint.clone().ok_or_else(|| {
                Error::Config("eval requires paths.model_checkpoint in the config".into())
            })?;
            let model = Model::load(&model_path)?;
            let pairs = dataset_pairs(&config)?;
            let run_dir = make_run_dir(&common, "eval", &config)?;
            let report = evaluate_model(&model, &pairs, config.eval.fft, config.eval.hop, common.jobs)?;
            std::fs::write(run_dir.join("report.csv"), report.to_csv())
                .map_err(|e| Error::io("write report.csv".into(), e))?;
            print!("{}", report.to_table());
            println!("report written to {}", run_dir.join("report.csv").display());
            Ok(())
        }
        Command::BenchFlops {
            common,
            variant,
            seconds,
        } => {
            let config = load_config(&common)?;
            let run_dir = make_run_dir(&common, "bench-flops", &config)?;
            let base = config.model_config(Variant::CNar);
            if variant != "all" {
                // Validate the name even for single-variant output.
                Variant::from_cli(&variant)?;
            }
            for convention in [CostConvention::FullRecompute, CostConvention::KvReuse] {
                let table = bench_table(&base, seconds, convention)?;
                if variant == "all" {
                    print!("{table}");
                } else {
                    for line in table.lines() {
                        if line.starts_with('#')
                            || line.starts_with("variant")
                            || line.starts_with(&variant)
                        {
                            println!("{line}");
                        }
                    }
                }
            }
            let csv = format!(
                "{}{}",
                bench_csv(&base, seconds, CostConvention::FullRecompute)?,
                bench_csv(&base, seconds, CostConvention::KvReuse)?
                    .lines()
                    .skip(1)
                    .map(|l| format!("{l}\n"))
                    .collect::<String>()
            );
            std::fs::write(run_dir.join("flops.csv"), csv)
                .map_err(|e| Error::io("write flops.csv".into(), e))?;
            Ok(())
        }
        Command::CodecFidelity(common) => {
            let config = load_config(&common)?;
            let model_path = config.paths.model_checkpoint.clone().ok_or_else(|| {
                Error::Config("codec-fidelity requires paths.model_checkpoint in the config".into())
            })?;
            let model = Model::load(&model_path)?;
            let tuned = model.tuned_codec()?;
            let clean: Vec<_> = dataset_pairs(&config)?.into_iter().map(|u| u.clean).collect();
            let run_dir = make_run_dir(&common, "codec-fidelity", &config)?;
            let delta = codec_fidelity_delta(
                &tuned,
                &model.codec,
                &clean,
                config.eval.fft,
                config.eval.hop,
            )?;
            let mut csv = String::from("utterance,si_sdr_delta_db,lsd_delta_db\n");
            for (i, (s, l)) in delta
                .per_utterance_si_sdr_delta_db
                .iter()
                .zip(&delta.per_utterance_lsd_delta_db)
                .enumerate()
            {
                csv.push_str(&format!("{i},{s:.9},{l:.9}\n"));
            }
            csv.push_str(&format!(
                "mean,{:.9},{:.9}\n",
                delta.si_sdr_delta_db, delta.lsd_delta_db
            ));
            std::fs::write(run_dir.join("fidelity.csv"), csv)
                .map_err(|e| Error::io("write fidelity.csv".into(), e))?;
            println!(
                "clean-speech reconstruction: reference {:.2} dB, tuned {:.2} dB, Δ SI-SDR {:+.3} dB, Δ LSD {:+.3} dB ({})",
                delta.reference_si_sdr_db,
                delta.tuned_si_sdr_db,
                delta.si_sdr_delta_db,
                delta.lsd_delta_db,
                model.config.variant
            );
            Ok(())
        }
    }
}

/// Enhance and score every utterance of a set.
pub fn evaluate_model(
    model: &Model,
    set: &[Utterance],
    fft: usize,
    hop: usize,
    jobs: usize,
) -> Result<MetricReport> {
    let flops = flops_per_second(&model.config, CostConvention::FullRecompute)?;
    let score = |(index, utt): (usize, &Utterance)| -> Result<UtteranceMetrics> {
        let (enhanced, trace) = enhance(model, &utt.noisy, DecodeMode::Cached)?;
        let n = enhanced.len().min(utt.clean.len());
        let clean = &utt.clean.samples[..n];
        let est = &enhanced.samples[..n];
        let noisy = &utt.noisy.samples[..n];
        let clean_latents = model.codec.encode_samples(
            &utt.clean.samples[..utt.clean.len() - utt.clean.len() % model.codec.downsample_factor()],
        );
        let (clean_tokens, _) = model.codec.quantize(&clean_latents)?;
        let acc = token_accuracy(&trace.predicted_tokens, &clean_tokens)?;
        let latent_mse = trace.raw_latents.mse(&clean_latents) / clean_latents.latent_dim() as f64;
        Ok(UtteranceMetrics {
            utterance: index,
            si_sdr_db: si_sdr(est, clean)?,
            noisy_si_sdr_db: si_sdr(noisy, clean)?,
            si_sdr_improvement_db: si_sdr(est, clean)? - si_sdr(noisy, clean)?,
            log_spectral_distance_db: log_spectral_distance(est, clean, fft, hop)?,
            latent_mse,
            token_accuracy_per_stage: acc.per_stage,
            token_accuracy_overall: acc.overall,
        })
    };
    let per_utterance: Vec<UtteranceMetrics> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            set.par_iter()
                .enumerate()
                .map(score)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        set.iter().enumerate().map(score).collect::<Result<Vec<_>>>()?
    };
    Ok(MetricReport {
        per_utterance,
        flops_per_second_of_audio: flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_are_errors() {
        assert_eq!(run_cli(["lse", "eval", "--config", "x.json", "--bogus"]), 2);
        assert_eq!(run_cli(["lse", "no-such-command"]), 2);
    }

    #[test]
    fn missing_config_exits_with_data_code() {
        let code = run_cli([
            "lse",
            "make-dataset",
            "--config",
            "/definitely/not/here.json",
        ]);
        assert_eq!(code, 3);
    }
}
