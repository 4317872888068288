//! Subcommand bodies and the mapping from library errors to exit codes.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sganc::codec::{
    decode, difference_symbols, encode_inter, encode_intra_sequence, freeze_tables, intra_symbols, latent_mse,
    CodecBundle, Container, Encoding, ImageDims,
};
use sganc::irwin_hall::verify_residual_law;
use sganc::latent::{read_latents, write_latents, LatentCode, LatentSequence};
use sganc::synth::{gen_intra_set, gen_video, SynthConfig};
use sganc::trainer::{train, write_trace_csv, LearnedModel, TrainConfig, TrainData, Trainer};
use sganc::{Bundle64, Error, Sequence64};

use crate::{Command, ModelOpts, TrainOpts};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;
pub const EXIT_DIGEST: u8 = 5;
pub const EXIT_CONFIG: u8 = 6;
pub const EXIT_NUMERIC: u8 = 7;
pub const EXIT_CODING: u8 = 8;
pub const EXIT_VERIFY: u8 = 9;

pub const FLOW_FILE: &str = "flow.sgflow";
pub const ENTROPY_FILE: &str = "entropy.sgent";
pub const INTRA_FILE: &str = "intra.sgent";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: u8,
    pub msg: String,
}

impl CliError {
    fn new(kind: &'static str, code: u8, msg: impl Into<String>) -> Self {
        Self { kind, code, msg: msg.into() }
    }

    fn at(mut self, path: &Path) -> Self {
        self.msg = format!("{}: {}", path.display(), self.msg);
        self
    }

    /// Single machine-parsable stderr line.
    pub fn line(&self) -> String {
        format!("error kind={} code={} msg={:?}", self.kind, self.code, self.msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io(_) => ("io", EXIT_IO),
            Error::Layout(_)
            | Error::Format { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Shape(_)
            | Error::Checksum { .. } => ("format", EXIT_FORMAT),
            Error::DigestMismatch { .. } => ("digest", EXIT_DIGEST),
            Error::Config(_) => ("config", EXIT_CONFIG),
            Error::Numeric { .. } | Error::Divergence { .. } | Error::Overflow(_) => ("numeric", EXIT_NUMERIC),
            Error::Coding { .. } | Error::Decode { .. } | Error::Support { .. } => ("coding", EXIT_CODING),
            Error::Internal(_) => ("internal", EXIT_OTHER),
        };
        Self::new(kind, code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth { out, frames, rho, layers, channels, iid, seed } => {
            let params = SynthConfig { layers, channels, rho, frames, seed, ..SynthConfig::default() };
            let seq: Sequence64 = if iid {
                LatentSequence::new(gen_intra_set(frames, &params)?)?
            } else {
                gen_video(&params)?
            };
            write_latents(&seq, &out)?;
            println!("wrote {} frames of {}x{} to {}", seq.len(), layers, channels, out.display());
            Ok(())
        }
        Command::TrainIntra { input, out, train: opts } => train_intra(&input, &out, &opts),
        Command::TrainInter { input, out, intra_steps, train: opts } => train_inter(&input, &out, intra_steps, &opts),
        Command::EncodeIntra { input, out, model, width, height } => {
            let seq = read_sequence(&input)?;
            let bundle = load_bundle(&model, 1)?;
            let enc = encode_intra_sequence(&seq, &bundle, ImageDims { width, height })?;
            write_container(&enc, &out)
        }
        Command::EncodeInter { input, out, model, g, refresh, width, height } => {
            let seq = read_sequence(&input)?;
            let bundle = load_bundle(&model, g)?;
            let enc = encode_inter(&seq, &bundle, ImageDims { width, height }, refresh)?;
            write_container(&enc, &out)
        }
        Command::Decode { input, out, model, lenient } => {
            let bytes = fs::read(&input).map_err(|e| CliError::from(e).at(&input))?;
            let container = if lenient { Container::from_bytes_lenient(&bytes)? } else { Container::from_bytes(&bytes)? };
            let bundle = load_bundle(&model, container.header.g)?;
            // Decode fully before touching the output path.
            let dec = decode(&container, &bundle)?;
            write_latents(&dec.latents, &out)?;
            println!("decoded {} frames to {}", dec.latents.len(), out.display());
            Ok(())
        }
        Command::Eval { input, model, g, refresh, out, width, height } => {
            let seq = read_sequence(&input)?;
            let dims = ImageDims { width, height };
            let bundle = load_bundle(&model, g.unwrap_or(1))?;
            let enc = match g {
                Some(_) => encode_inter(&seq, &bundle, dims, refresh)?,
                None => encode_intra_sequence(&seq, &bundle, dims)?,
            };
            warn(&enc);
            let (bpp, mse) = rate_distortion(&seq, &enc, &bundle)?;
            let bits_per_frame = enc.container.total_bytes()? as f64 * 8.0 / seq.len() as f64;
            println!(
                "frames={} bpp={bpp:.6} latent_mse={mse:.6} bits_per_frame={bits_per_frame:.1} escapes={}",
                seq.len(),
                enc.stats.escapes
            );
            if let Some(path) = out {
                let mut f = fs::File::create(path)?;
                writeln!(f, "frames,bpp,latent_mse,bits_per_frame")?;
                writeln!(f, "{},{bpp},{mse},{bits_per_frame}", seq.len())?;
            }
            Ok(())
        }
        Command::RdCurve { input, test, lambdas, out, train: opts } => rd_curve(&input, test.as_deref(), &lambdas, &out, &opts),
        Command::VerifyResidualLaw { g, samples, seed, threshold } => {
            let r = verify_residual_law(g, samples, seed)?;
            let pass = r.ks < threshold;
            println!(
                "g={} n={} samples={} ks={:.6} threshold={threshold} {}",
                r.g,
                r.n,
                r.samples,
                r.ks,
                if pass { "PASS" } else { "FAIL" }
            );
            if pass {
                Ok(())
            } else {
                Err(CliError::new("verification", EXIT_VERIFY, format!("KS {:.6} not below {threshold}", r.ks)))
            }
        }
    }
}

/// Config file, then env seed, then explicit flags.
fn train_config(opts: &TrainOpts) -> CliResult<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(l) = opts.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = &opts.stages {
        cfg.set("stages", s)?;
    }
    if let Some(n) = opts.steps {
        cfg.steps = n;
    }
    if let Some(lr) = opts.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(w) = opts.width {
        cfg.width = w;
    }
    if let Some(h) = opts.height {
        cfg.height = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_sequence(path: &Path) -> CliResult<Sequence64> {
    read_latents(path).map_err(|e| CliError::from(e).at(path))
}

fn read_frames(paths: &[PathBuf]) -> CliResult<Vec<LatentCode<f64>>> {
    let mut frames = Vec::new();
    for p in paths {
        frames.extend(read_sequence(p)?.into_frames());
    }
    Ok(frames)
}

fn model_paths(opts: &ModelOpts) -> (PathBuf, PathBuf, Option<PathBuf>) {
    let flow = opts.model.join(FLOW_FILE);
    let primary = opts.entropy_model.clone().unwrap_or_else(|| opts.model.join(ENTROPY_FILE));
    let intra = opts.intra_model.clone().or_else(|| {
        let p = opts.model.join(INTRA_FILE);
        p.exists().then_some(p)
    });
    (flow, primary, intra)
}

fn load_bundle(opts: &ModelOpts, g: u32) -> CliResult<Bundle64> {
    let (flow, primary, intra) = model_paths(opts);
    CodecBundle::load(&flow, &primary, intra.as_deref(), g).map_err(|e| match e {
        Error::Io(_) => CliError::from(e).at(&opts.model),
        e => e.into(),
    })
}

fn save_model(model: &LearnedModel<f64>, dir: &Path, trace: &[sganc::trainer::TraceRow]) -> CliResult {
    fs::create_dir_all(dir)?;
    model.flow.save(dir.join(FLOW_FILE))?;
    model.entropy.save(dir.join(ENTROPY_FILE))?;
    write_trace_csv(trace, fs::File::create(dir.join(TRACE_FILE))?)?;
    Ok(())
}

fn report_training(trace: &[sganc::trainer::TraceRow], dir: &Path) {
    if let Some(last) = trace.last() {
        println!(
            "trained {} steps: rate_bits={:.1} distortion={:.6} loss={:.3}; model in {}",
            trace.len(),
            last.rate_bits,
            last.distortion,
            last.loss,
            dir.display()
        );
    }
}

fn train_intra(input: &[PathBuf], out: &Path, opts: &TrainOpts) -> CliResult {
    let cfg = train_config(opts)?;
    let frames = read_frames(input)?;
    let (mut model, trace) = train(TrainData::Frames(&frames), &cfg)?;
    freeze_tables(&mut model.entropy, &intra_symbols(&model.flow, &frames)?)?;
    save_model(&model, out, &trace)?;
    report_training(&trace, out);
    Ok(())
}

/// Joint training on differences, then an entropy-only fit of intra tables
/// on the frozen flow so anchor frames have their own model.
fn train_inter(input: &[PathBuf], out: &Path, intra_steps: Option<usize>, opts: &TrainOpts) -> CliResult {
    let cfg = train_config(opts)?;
    let seqs = input.iter().map(|p| read_sequence(p)).collect::<CliResult<Vec<_>>>()?;
    let frames: Vec<LatentCode<f64>> = seqs.iter().flat_map(|s| s.frames().to_vec()).collect();
    let (mut model, trace) = train(TrainData::Sequences(&seqs), &cfg)?;
    freeze_tables(&mut model.entropy, &difference_symbols(&model.flow, &seqs)?)?;

    let mut intra = model.entropy.clone();
    intra.thaw();
    let fit = TrainConfig { train_flow: false, ..cfg.clone() };
    let mut trainer = Trainer::new(LearnedModel { flow: model.flow.clone(), entropy: intra }, TrainData::Frames(&frames), fit)?;
    trainer.run(intra_steps.unwrap_or(cfg.steps))?;
    let mut intra = trainer.into_model().entropy;
    freeze_tables(&mut intra, &intra_symbols(&model.flow, &frames)?)?;

    save_model(&model, out, &trace)?;
    intra.save(out.join(INTRA_FILE))?;
    report_training(&trace, out);
    Ok(())
}

fn warn(enc: &Encoding) {
    for w in &enc.stats.warnings {
        eprintln!("warning: {w}");
    }
}

fn write_container(enc: &Encoding, out: &Path) -> CliResult {
    warn(enc);
    enc.container.save(out)?;
    println!(
        "wrote {}: frames={} bytes={} bpp={:.6} escapes={}",
        out.display(),
        enc.container.header.frame_count,
        enc.container.total_bytes()?,
        enc.container.bpp()?,
        enc.stats.escapes
    );
    Ok(())
}

/// Whole-container bpp and mean latent MSE of the decoded sequence.
fn rate_distortion(seq: &Sequence64, enc: &Encoding, bundle: &Bundle64) -> CliResult<(f64, f64)> {
    let dec = decode(&enc.container, bundle)?;
    let mut mse = 0.0;
    for (a, b) in seq.frames().iter().zip(dec.latents.frames()) {
        mse += latent_mse(a, b)?;
    }
    Ok((enc.container.bpp()?, mse / seq.len() as f64))
}

fn rd_curve(input: &[PathBuf], test: Option<&Path>, lambdas: &[f64], out: &Path, opts: &TrainOpts) -> CliResult {
    let base = train_config(opts)?;
    let mut frames = read_frames(input)?;
    let held_out = match test {
        Some(p) => read_sequence(p)?,
        None => {
            if frames.len() < 2 {
                return Err(CliError::new("config", EXIT_CONFIG, "need at least two frames to hold out a test split"));
            }
            let cut = frames.len() - (frames.len() / 5).max(1);
            LatentSequence::new(frames.split_off(cut))?
        }
    };
    let dims = ImageDims { width: base.width, height: base.height };
    let mut csv = String::from("lambda,bpp,latent_mse\n");
    for &lambda in lambdas {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let (mut model, _) = train(TrainData::Frames(&frames), &cfg)?;
        freeze_tables(&mut model.entropy, &intra_symbols(&model.flow, &frames)?)?;
        let bundle = CodecBundle::new(model.flow, model.entropy, None, 1)?;
        let enc = encode_intra_sequence(&held_out, &bundle, dims)?;
        let (bpp, mse) = rate_distortion(&held_out, &enc, &bundle)?;
        println!("lambda={lambda:e} bpp={bpp:.6} latent_mse={mse:.6}");
        csv.push_str(&format!("{lambda:e},{bpp},{mse}\n"));
    }
    fs::write(out, csv)?;
    Ok(())
}
