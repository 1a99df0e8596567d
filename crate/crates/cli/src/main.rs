use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use iriskit::capture::{crop_eye, read_detections, simulate, write_trace, ControllerConfig, CoordinateMapper, ReplayDetector};
use iriskit::eval::{parse_manifest, Eye, Protocol};
use iriskit::gabor::{encode, IrisTemplate};
use iriskit::gattu::{self, NetworkWeights, Topology};
use iriskit::geometry::{fit_boundaries_with, rubber_sheet, rubber_sheet_mask, IrisBoundaries, NormalizedIris, NormalizedMask};
use iriskit::imaging::{load_gray, load_mask, save_gray, save_mask, EyeImage};
use iriskit::matcher::{decide, match_shifted, Decision, DecisionThreshold};
use iriskit::pipeline::{evaluate, Gallery, Pipeline, PipelineConfig};
use iriskit::quality::{compute_metrics_with, gate, QualityThresholds};
use iriskit::synth::{generate, write_corpus, SynthConfig};

#[derive(Parser)]
#[command(name = "iriskit", version, about = "Visible-spectrum iris recognition toolkit")]
struct Cli {
    /// Pipeline configuration (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quality metrics and gate for an eye image with known mask and boundaries.
    Quality {
        #[arg(long)]
        eye: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Segment an eye image into an iris mask.
    Segment {
        #[arg(long)]
        eye: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_prob: Option<PathBuf>,
    },
    /// Fit boundaries and unwrap the iris to 512x64.
    Normalize {
        #[arg(long)]
        eye: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_iris: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        bounds_out: Option<PathBuf>,
    },
    /// Encode a normalized iris into a template.
    Encode {
        #[arg(long)]
        iris: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two templates.
    Match {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        max_shift: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the full pipeline and store the template in a gallery.
    Enroll {
        #[command(flatten)]
        target: GalleryArgs,
        /// Overwrite an existing entry for the same subject and eye.
        #[arg(long)]
        replace: bool,
    },
    /// Run the full pipeline and match against the enrolled template.
    Verify {
        #[command(flatten)]
        target: GalleryArgs,
    },
    /// Score a manifest under an evaluation protocol.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_roc: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Count gate failures as exceptions instead of scoring them.
        #[arg(long)]
        enforce_gate: bool,
    },
    /// Replay a detection stream through the capture controller.
    CaptureSim {
        /// Directory of sensor frames; file stems carry the frame index.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        target_width: f64,
        #[arg(long, default_value_t = 3)]
        settle_frames: u32,
        /// Accept the first crop without running the quality gate.
        #[arg(long)]
        no_gate: bool,
    },
    /// Print network topology and parameter count.
    Netinfo {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write a random or band-pass weight file.
    GenWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Topology::DEFAULT.depth)]
        depth: usize,
        #[arg(long, default_value_t = Topology::DEFAULT.base)]
        base: usize,
        /// Emit the hand-set intensity-band network instead of random weights.
        #[arg(long)]
        band: bool,
    },
    /// Generate a synthetic eye corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        max_blur: f64,
        #[arg(long, default_value_t = 4.0)]
        noise: f64,
    },
    /// Print or check the pipeline configuration.
    Config {
        /// Print the effective configuration as TOML.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Args)]
struct GalleryArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    eye_image: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long)]
    eye: Eye,
}

/// Successful outcome: 0, or 2 for a failed gate / rejected match.
struct Outcome {
    code: u8,
    value: serde_json::Value,
    text: String,
}

impl Outcome {
    fn ok(value: impl Serialize, text: impl Into<String>) -> Result<Self> {
        Ok(Self {
            code: 0,
            value: serde_json::to_value(value)?,
            text: text.into(),
        })
    }

    fn with_code(mut self, code: u8) -> Self {
        self.code = code;
        self
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_eye(path: &Path) -> Result<EyeImage> {
    Ok(Pipeline::load_eye(path)?)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let mut cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Quality {
            eye,
            mask,
            bounds,
            thresholds,
        } => {
            let thr = match thresholds {
                Some(p) => QualityThresholds::from_toml(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
                None => cfg.thresholds,
            };
            let eye = load_eye(eye)?;
            let mask = load_mask(mask)?;
            let b = IrisBoundaries::from_json(&std::fs::read_to_string(bounds).with_context(|| bounds.display().to_string())?)?;
            let report = compute_metrics_with(&eye, &b, &mask, &thr)?;
            let g = gate(&report, &thr);
            let mut text = String::new();
            for (name, v) in report.metrics() {
                text.push_str(&format!("{name:28} {v:8.3}\n"));
            }
            text.push_str(&gate_text(&g));
            let code = if g.passed { 0 } else { 2 };
            Ok(Outcome::ok(json!({ "report": report, "gate": g }), text)?.with_code(code))
        }
        Cmd::Segment {
            eye,
            weights,
            out_mask,
            out_prob,
        } => {
            if weights.is_some() {
                cfg.weights = weights.clone();
            }
            let net = cfg.network()?;
            let out = gattu::forward(&load_eye(eye)?, &net)?;
            save_mask(out_mask, out.mask())?;
            if let Some(p) = out_prob {
                save_gray(p, &out.probability_image())?;
            }
            let on = out.mask().count_on();
            Ok(Outcome::ok(json!({ "on_pixels": on }), format!("mask written, {on} iris pixels"))?)
        }
        Cmd::Normalize {
            eye,
            mask,
            out_iris,
            out_mask,
            bounds_out,
        } => {
            let eye = load_eye(eye)?;
            let mask = load_mask(mask)?;
            let b = fit_boundaries_with(&mask, &cfg.hough)?;
            save_gray(out_iris, rubber_sheet(eye.image(), &b)?.image())?;
            save_mask(out_mask, rubber_sheet_mask(&mask, &b)?.mask())?;
            if let Some(p) = bounds_out {
                std::fs::write(p, b.to_json()).with_context(|| p.display().to_string())?;
            }
            Ok(Outcome::ok(b, b.to_json())?)
        }
        Cmd::Encode { iris, mask, out } => {
            let iris = NormalizedIris::new(load_gray(iris)?)?;
            let mask = NormalizedMask::new(load_mask(mask)?)?;
            let t = encode(&iris, &mask, &cfg.bank()?)?;
            t.save(out)?;
            let summary = json!({ "planes": t.planes(), "width": t.width(), "height": t.height(), "valid_bits": t.mask_count() });
            Ok(Outcome::ok(summary, format!("template written, {} valid bits", t.mask_count()))?)
        }
        Cmd::Match {
            probe,
            gallery,
            max_shift,
            threshold,
        } => {
            let p = IrisTemplate::load(probe)?;
            let g = IrisTemplate::load(gallery)?;
            let thr = DecisionThreshold {
                hd_threshold: threshold.unwrap_or(cfg.matcher.hd_threshold),
                ..cfg.matcher
            };
            thr.validate()?;
            let r = match_shifted(&p, &g, max_shift.unwrap_or(cfg.max_shift))?;
            let d = decide(&r, &thr);
            let text = format!("hd {:.4} shift {} overlap {} -> {d}", r.hd, r.best_shift, r.overlap_bits);
            Ok(Outcome::ok(json!({ "result": r, "decision": d }), text)?.with_code(decision_code(d)))
        }
        Cmd::Enroll { target, replace } => {
            let p = Pipeline::new(cfg)?;
            let gallery = Gallery::open(&target.gallery)?;
            match gallery.enroll(&p, &load_eye(&target.eye_image)?, &target.subject, target.eye, *replace) {
                Ok(entry) => {
                    let text = format!("enrolled {} ({})", entry.subject_id, entry.eye);
                    Ok(Outcome::ok(json!({ "entry": entry, "gate": { "passed": true, "failures": [] } }), text)?)
                }
                Err(iriskit::Error::QualityGate(failures)) => {
                    let g = iriskit::quality::GateResult { passed: false, failures };
                    Ok(Outcome::ok(json!({ "gate": g }), format!("enrollment refused\n{}", gate_text(&g)))?.with_code(2))
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Verify { target } => {
            let p = Pipeline::new(cfg)?;
            let gallery = Gallery::open(&target.gallery)?;
            match gallery.verify(&p, &load_eye(&target.eye_image)?, &target.subject, target.eye) {
                Ok(v) => {
                    let text = format!(
                        "hd {:.4} shift {} overlap {} -> {}",
                        v.result.hd, v.result.best_shift, v.result.overlap_bits, v.decision
                    );
                    let code = decision_code(v.decision);
                    Ok(Outcome::ok(v, text)?.with_code(code))
                }
                Err(iriskit::Error::QualityGate(failures)) => {
                    let g = iriskit::quality::GateResult { passed: false, failures };
                    Ok(Outcome::ok(json!({ "gate": g }), format!("probe refused\n{}", gate_text(&g)))?.with_code(2))
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Eval {
            manifest,
            protocol,
            seed,
            out_roc,
            out_report,
            enforce_gate,
        } => {
            let parsed = parse_manifest(manifest)?;
            for r in &parsed.rejects {
                eprintln!("manifest line {}: {} ({})", r.line, r.reason, r.raw);
            }
            let p = Pipeline::new(cfg)?;
            let (curve, report) = evaluate(&p, &parsed.records, *protocol, *seed, *enforce_gate)?;
            let f = File::create(out_roc).with_context(|| out_roc.display().to_string())?;
            curve.write_csv(BufWriter::new(f))?;
            std::fs::write(out_report, serde_json::to_string_pretty(&report)?)
                .with_context(|| out_report.display().to_string())?;
            let mut text = format!(
                "{}: {} genuine, {} imposter, {} exceptions, {} gate failures\n",
                report.protocol, report.genuine, report.imposter, report.exceptions, report.gate_failures
            );
            for t in &report.tar_at_far {
                text.push_str(&format!("TAR {:.4} at FAR {:e}\n", t.tar, t.far));
            }
            Ok(Outcome::ok(&report, text)?)
        }
        Cmd::CaptureSim {
            frames,
            detections,
            out,
            trace,
            target_width,
            settle_frames,
            no_gate,
        } => capture_sim(cfg, frames, detections, out, trace, *target_width, *settle_frames, *no_gate),
        Cmd::Netinfo { weights } => {
            let net = match weights.clone().or(cfg.weights) {
                Some(p) => NetworkWeights::load(&p)?,
                None => NetworkWeights::zeros(Topology::DEFAULT)?,
            };
            let t = net.topology;
            let value = json!({ "depth": t.depth, "base": t.base, "param_count": net.param_count() });
            Ok(Outcome::ok(value, gattu::describe(&net))?)
        }
        Cmd::GenWeights {
            out,
            seed,
            depth,
            base,
            band,
        } => {
            let t = Topology {
                depth: *depth,
                base: *base,
            };
            let net = if *band {
                NetworkWeights::band(t, gattu::BAND_LOW, gattu::BAND_HIGH)?
            } else {
                NetworkWeights::random(t, *seed)?
            };
            net.save(out)?;
            let n = net.param_count();
            Ok(Outcome::ok(json!({ "param_count": n }), format!("wrote {n} parameters"))?)
        }
        Cmd::Synth {
            out,
            identities,
            samples,
            seed,
            max_blur,
            noise,
        } => {
            let sc = SynthConfig {
                identities: *identities,
                samples: *samples,
                seed: *seed,
                max_blur_sigma: *max_blur,
                noise_sigma: *noise,
                ..SynthConfig::default()
            };
            let (_, s) = generate(&sc)?;
            let manifest = write_corpus(out, &s)?;
            let text = format!("{} images, manifest {}", s.len(), manifest.display());
            Ok(Outcome::ok(json!({ "images": s.len(), "manifest": manifest }), text)?)
        }
        Cmd::Config { dump } => {
            if !dump {
                // validation already happened while loading
                return Outcome::ok(json!({ "valid": true }), "configuration is valid");
            }
            let text = cfg.to_toml();
            Outcome::ok(&cfg, text.trim_end())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn capture_sim(
    cfg: PipelineConfig,
    frames: &Path,
    detections: &Path,
    out: &Path,
    trace: &Path,
    target_width: f64,
    settle_frames: u32,
    no_gate: bool,
) -> Result<Outcome> {
    let frame_files = index_frames(frames)?;
    let (_, first) = frame_files
        .iter()
        .next()
        .ok_or_else(|| anyhow!("no frames in {}", frames.display()))?;
    let probe = load_gray(first)?;
    let ccfg = ControllerConfig {
        mapper: CoordinateMapper::for_sensor(probe.width() as f64, probe.height() as f64)?,
        target_width_bbox: target_width,
        settle_frames,
        ..ControllerConfig::default()
    };
    let pipeline = if no_gate { None } else { Some(Pipeline::new(cfg)?) };
    let mut detector = ReplayDetector::new(read_detections(detections)?);
    let mut attempts = Vec::new();
    let mut captured = None;
    let sim = simulate(&mut detector, &ccfg, |index, b| {
        let path = frame_files
            .get(&index)
            .ok_or_else(|| iriskit::Error::Domain(format!("no frame image for frame {index}")))?;
        let eye = crop_eye(&load_gray(path)?, b)?;
        let passed = match &pipeline {
            None => true,
            // a crop the pipeline cannot even segment counts as a quality failure
            Some(p) => p.process(&eye).map(|r| r.gate.passed).unwrap_or(false),
        };
        attempts.push(json!({ "frame_index": index, "passed": passed }));
        if passed {
            captured = Some(eye);
        }
        Ok(passed)
    })?;
    let f = File::create(trace).with_context(|| trace.display().to_string())?;
    write_trace(&mut BufWriter::new(f), &sim.trace)?;
    let value = json!({
        "frames": sim.trace.len(),
        "final_phase": sim.final_state.phase,
        "capture_frame": sim.capture.map(|c| c.0),
        "attempts": attempts,
    });
    match captured {
        Some(eye) => {
            save_gray(out, eye.image())?;
            let text = format!("captured frame {} after {} frames", sim.capture.map_or(0, |c| c.0), sim.trace.len());
            Outcome::ok(value, text)
        }
        None => Ok(Outcome::ok(value, "no capture accepted")?.with_code(2)),
    }
}

/// Maps frame index to image path, taking the trailing digits of each file stem.
fn index_frames(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() || !path.is_file() {
            continue;
        }
        let index: u64 = digits.chars().rev().collect::<String>().parse()?;
        if out.insert(index, path.clone()).is_some() {
            bail!("two frame files for index {index} in {}", dir.display());
        }
    }
    Ok(out)
}

fn decision_code(d: Decision) -> u8 {
    match d {
        Decision::Accept => 0,
        Decision::Reject => 2,
    }
}

fn gate_text(g: &iriskit::quality::GateResult) -> String {
    if g.passed {
        return "gate: pass".into();
    }
    let mut s = String::from("gate: FAIL");
    for f in &g.failures {
        s.push_str(&format!("\n  {} = {:.3}, needs {}", f.metric, f.value, f.requirement));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&o.value).expect("json value"));
            } else {
                println!("{}", o.text.trim_end());
            }
            ExitCode::from(o.code)
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
