use clap::{Parser, Subcommand, ValueEnum};
use elfvc::codec::config::TrainConfig;
use elfvc::codec::eval::evaluate;
use elfvc::codec::stream::{decode_video, encode_video, VideoStream};
use elfvc::codec::train::train;
use elfvc::codec::weights::{load_model, round_to_storage, save_model};
use elfvc::codelayer::spatial_bit_map;
use elfvc::rateflex::RateMode;
use elfvc::tools::image::{read_frames, write_frames, write_pnm};
use elfvc::tools::rd::{bd_rate, parse_csv, write_csv};
use elfvc::tools::synth::{load_dataset, synth_dataset, DatasetSpec};
use elfvc::{Error, Tensor};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "elfvc", version, about = "Learned low-latency video codec with a single rate knob")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    MaxBpp,
    MinPsnr,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a directory of PPM frames into a stream
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Constant level in [0, L-1]; fractional values interpolate
        #[arg(long, conflicts_with = "rc")]
        level: Option<f64>,
        /// Rate controller instead of a constant level
        #[arg(long, value_enum)]
        rc: Option<Controller>,
        #[arg(long, default_value_t = 0.081)]
        cap_i: f64,
        #[arg(long, default_value_t = 0.037)]
        cap_p: f64,
        /// Target PSNR in dB for min-psnr
        #[arg(long, default_value_t = 37.0)]
        target: f64,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the encoder-side reconstructions here
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Decode a stream into PPM frames
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file and a clip directory
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Constant-level R-D table as CSV
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Levels to evaluate; defaults to every integer level
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        gop: usize,
        #[arg(long, default_value = "elfvc")]
        tag: String,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BD-rate of one R-D table against another
    Bdrate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Generate a synthetic dataset from a spec file
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the spatial bit map of one frame as PGM
    Bitmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to distinct exit codes.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::Format(_) | Error::Config(_) => 3,
        Error::Corrupt(_) => 4,
        Error::Infeasible(_) => 5,
        _ => 1,
    }
}

fn class(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "i/o error",
        Error::Format(_) | Error::Config(_) => "format error",
        Error::Corrupt(_) => "corrupt stream",
        Error::Infeasible(_) => "infeasible rate constraint",
        _ => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("elfvc: {}: {e}", class(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_stream(path: &Path) -> elfvc::Result<VideoStream> {
    VideoStream::parse(&std::fs::read(path)?)
}

fn run(cmd: Command) -> elfvc::Result<()> {
    match cmd {
        Command::Encode {
            input,
            weights,
            level,
            rc,
            cap_i,
            cap_p,
            target,
            gop,
            out,
            recon,
        } => {
            let model = load_model(&weights)?;
            let frames = read_frames(&input)?;
            let mode = match (rc, level) {
                (Some(Controller::MaxBpp), _) => RateMode::MaxBpp { cap_i, cap_p },
                (Some(Controller::MinPsnr), _) => RateMode::MinQuality { target_psnr: target },
                (None, Some(l)) => RateMode::ConstantLevel(l),
                (None, None) => return Err(Error::Config("give --level or --rc".into())),
            };
            let enc = encode_video(&model, &frames, gop, mode)?;
            std::fs::write(&out, enc.stream.to_bytes())?;
            println!("frame,type,level,bytes,bpp,psnr_db,violated");
            for r in &enc.reports {
                println!(
                    "{},{:?},{:.4},{},{:.5},{:.3},{}",
                    r.index, r.frame_type, r.level, r.bytes, r.bpp, r.psnr, r.violated
                );
            }
            if let Some(dir) = recon {
                write_frames(&dir, &enc.recons)?;
            }
            let violated = enc.reports.iter().filter(|r| r.violated).count();
            if violated > 0 {
                return Err(Error::Infeasible(format!(
                    "{violated} frame(s) fell back past the constraint (stream written)"
                )));
            }
            Ok(())
        }
        Command::Decode { input, weights, out } => {
            let model = load_model(&weights)?;
            let stream = read_stream(&input)?;
            let frames: Vec<Tensor> = decode_video(&model, &stream)?.into_iter().map(|d| d.recon).collect();
            write_frames(&out, &frames)
        }
        Command::Train {
            config,
            data,
            out_weights,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let clips = load_dataset(&data)?;
            let outcome = train(&cfg, &clips, |e| println!("{}", e.to_line()))?;
            let mut model = outcome.model;
            round_to_storage(&mut model);
            save_model(&model, &out_weights)?;
            match outcome.aborted {
                Some(why) => Err(Error::NonFinite(format!("{why}; last good weights saved"))),
                None => Ok(()),
            }
        }
        Command::Eval {
            weights,
            data,
            levels,
            gop,
            tag,
            out,
        } => {
            let model = load_model(&weights)?;
            let clips = load_dataset(&data)?;
            let levels = if levels.is_empty() {
                (0..model.levels()).map(|l| l as f64).collect()
            } else {
                levels
            };
            let rows = evaluate(&model, &clips, &levels, gop)?;
            let csv = write_csv(&rows.iter().map(|r| r.rd_point(&tag)).collect::<Vec<_>>());
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Bdrate { reference, test } => {
            let r = parse_csv(&std::fs::read_to_string(&reference)?)?;
            let t = parse_csv(&std::fs::read_to_string(&test)?)?;
            let v = bd_rate(&r, &t).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Format(m),
                e => e,
            })?;
            println!("{v:.1}%");
            Ok(())
        }
        Command::Synth { spec, out } => {
            let spec = DatasetSpec::parse(&std::fs::read_to_string(&spec)?)?;
            let clips = synth_dataset(&spec, &out)?;
            log::info!("wrote {} clips to {}", clips.len(), out.display());
            Ok(())
        }
        Command::Bitmap {
            input,
            weights,
            frame,
            out,
        } => {
            let model = load_model(&weights)?;
            let stream = read_stream(&input)?;
            if frame >= stream.frames.len() {
                return Err(Error::Format(format!(
                    "frame {frame} out of range; stream has {}",
                    stream.frames.len()
                )));
            }
            let truncated = VideoStream {
                header: elfvc::codec::stream::StreamHeader {
                    frame_count: frame as u32 + 1,
                    ..stream.header
                },
                frames: stream.frames[..=frame].to_vec(),
            };
            let decoded = decode_video(&model, &truncated)?;
            let d = decoded.last().unwrap();
            let layers: Vec<_> = d
                .codelayers
                .iter()
                .flat_map(|(_, pair)| pair.iter().map(|(q, p)| (q, p)))
                .collect();
            let (h, w) = (stream.header.height as usize, stream.header.width as usize);
            let map = spatial_bit_map(&layers, h, w)?;
            let peak = map.max_abs();
            let scaled = if peak > 0.0 { map.scale(1.0 / peak) } else { map.clone() };
            write_pnm(&out, &scaled)?;
            let sidecar = out.with_extension("txt");
            std::fs::write(
                &sidecar,
                format!(
                    "max_bits_per_pixel = {peak}\ntotal_bits = {}\n",
                    map.sum()
                ),
            )?;
            Ok(())
        }
    }
}
