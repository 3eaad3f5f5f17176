// SPDX-License-Identifier: MIT OR Apache-2.0

//! `clva` command-line front end.
//!
//! Every subcommand reads either a trace file (`--trace`) or a drift
//! scenario (`--scenario default` or a JSON spec) and writes its result to
//! `--out` or stdout. Exit codes: 0 success, 2 validation, 3 I/O, 4 bad
//! arguments.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clva::anchors::{extract_saliency, AnchorParams, AnchorSet};
use clva::diagnostics::drift_report;
use clva::format::{load, save};
use clva::profiler::export_intensity_matrix;
use clva::render::{render_heatmap, square_grid, HeadSelector};
use clva::simulator::{run_experiment_on, run_pipeline, PipelineRun};
use clva::sweep::{run_sweep, write_sweep_csv};
use clva::prelude::*;

#[derive(Parser)]
#[command(name = "clva", version, about = "Cross-layer visual anchors: profile, anchor, re-anchor and diagnose attention traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-head visual intensity and head classes as CSV.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Also write the full head profile as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Positive and negative anchors as JSON.
    Anchors {
        #[command(flatten)]
        common: Common,
    },
    /// Re-anchor a trace and write the result as a trace file.
    Intervene {
        #[command(flatten)]
        common: Common,
        /// Anchor set JSON; derived from the input when absent.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Also write the intervention report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-layer entropy and anchor correlations as CSV.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Anchor set JSON; derived from the input when absent.
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Full pipeline: profile, anchor, intervene, re-measure. Writes JSON.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write post-intervention drift metrics as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Run the toy decoder with and without the intervention instead.
        #[arg(long)]
        toy: bool,
        /// Decoding steps for `--toy`.
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Grid over alpha and beta on a scenario. Writes CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 4.0, 14.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.9])]
        betas: Vec<f64>,
    },
    /// Saliency map of one layer as a binary PGM image.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Source layer; defaults to the positive anchor layer.
        #[arg(long)]
        layer: Option<usize>,
        /// `all`, `sensitive`, `insensitive` or a comma-separated list.
        #[arg(long, default_value = "sensitive")]
        heads: String,
        /// Query row; defaults to the last text token.
        #[arg(long)]
        row: Option<usize>,
        /// Grid as ROWSxCOLS; defaults to the most square factorization.
        #[arg(long)]
        grid: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// CLVA-TRACE v1 input file.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    trace: Option<PathBuf>,
    /// `default` or a JSON scenario spec.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA, allow_negative_numbers = true)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long = "lambda-vis", default_value_t = DEFAULT_LAMBDA_VIS)]
    lambda_vis: f64,
    /// Intervened layers as `start..end`; defaults to after the positive anchor layer.
    #[arg(long)]
    layers: Option<LayerRange>,
    #[arg(long = "sign-mode", default_value_t = SignMode::Standard)]
    sign_mode: SignMode,
    /// Overrides the scenario seed, or the toy model seed with `--toy`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => 3,
            Error::Config(_)
            | Error::NegativeParameter { .. }
            | Error::LayerOutOfRange { .. }
            | Error::HeadOutOfRange { .. }
            | Error::QueryRowOutOfSpan { .. }
            | Error::EmptyHeadSet
            | Error::Grid { .. } => 4,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

fn bad_args(message: impl Into<String>) -> Failure {
    Failure { code: 4, message: message.into() }
}

type Outcome = std::result::Result<(), Failure>;

struct Input {
    trace: AttentionTrace,
    scenario: Option<DriftScenario>,
}

impl Common {
    fn input(&self) -> std::result::Result<Input, Failure> {
        if let Some(path) = &self.trace {
            let trace = load(path).map_err(|e| {
                let mut f = Failure::from(e);
                f.message = format!("{}: {}", path.display(), f.message);
                f
            })?;
            return Ok(Input { trace, scenario: None });
        }
        let spec = self.scenario.as_deref().expect("clap enforces one input");
        let mut sc = if spec == "default" {
            DriftScenario::default()
        } else {
            let text = std::fs::read_to_string(spec)?;
            serde_json::from_str(&text).map_err(|e| Failure { code: 2, message: format!("scenario {spec}: {e}") })?
        };
        if let Some(seed) = self.seed {
            sc = sc.with_seed(seed);
        }
        Ok(Input { trace: make_scenario(&sc)?, scenario: Some(sc) })
    }

    fn config(&self, layers: usize) -> std::result::Result<InterventionConfig, Failure> {
        let mut cfg = InterventionConfig::for_depth(layers)
            .with_strengths(self.alpha, self.beta)
            .with_sign_mode(self.sign_mode);
        if let Some(r) = self.layers {
            cfg.layer_range = r;
        }
        cfg.validate(layers)?;
        Ok(cfg)
    }

    fn anchor_params(&self, layers: usize) -> AnchorParams {
        AnchorParams::for_depth(layers).with_tau(self.tau)
    }

    fn anchors(&self, trace: &AttentionTrace, from: Option<&Path>) -> std::result::Result<AnchorSet, Failure> {
        match from {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure { code: 2, message: format!("anchors {}: {e}", path.display()) })
            }
            None => {
                let p = profile(trace, self.lambda_vis);
                Ok(derive_anchor_set(trace, &p, &self.anchor_params(trace.layers()))?)
            }
        }
    }

    fn sink(&self) -> io::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn require_out(&self, what: &str) -> std::result::Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| bad_args(format!("{what} needs --out")))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut w = BufWriter::new(File::create(path)?);
    emit_json(&mut w, value)
}

fn emit_json(w: &mut dyn Write, value: &impl serde::Serialize) -> Outcome {
    serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Failure { code: 3, message: e.to_string() })?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Profile { common, report } => {
            let input = common.input()?;
            let p = profile(&input.trace, common.lambda_vis);
            export_intensity_matrix(&p, common.sink()?)?;
            if let Some(path) = report {
                write_json(&path, &p)?;
            }
        }
        Command::Anchors { common } => {
            let input = common.input()?;
            let a = common.anchors(&input.trace, None)?;
            emit_json(&mut common.sink()?, &a)?;
        }
        Command::Intervene { common, anchors, report } => {
            let out = common.require_out("intervene")?.to_path_buf();
            let input = common.input()?;
            let cfg = common.config(input.trace.layers())?;
            let a = common.anchors(&input.trace, anchors.as_deref())?;
            let (after, rep) = apply_to_trace(&input.trace, &a, &cfg)?;
            save(&after, &out)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
        }
        Command::Diagnose { common, anchors } => {
            let input = common.input()?;
            let a = common.anchors(&input.trace, anchors.as_deref())?;
            drift_report(&input.trace, &a)?.write_csv(common.sink()?)?;
        }
        Command::Simulate { common, metrics, toy, steps } => {
            if toy {
                return simulate_toy(&common, steps);
            }
            let input = common.input()?;
            let cfg = common.config(input.trace.layers())?;
            let post = match &input.scenario {
                Some(sc) => {
                    let (r, _) = run_experiment_on(sc, &input.trace, &cfg, common.tau, common.lambda_vis)?;
                    emit_json(&mut common.sink()?, &r)?;
                    r.post
                }
                None => {
                    let params = common.anchor_params(input.trace.layers());
                    let PipelineRun { profile, anchors, intervention, pre, post, .. } =
                        run_pipeline(&input.trace, &cfg, &params, common.lambda_vis)?;
                    let doc = serde_json::json!({
                        "config": cfg,
                        "anchor_params": params,
                        "profile": profile,
                        "anchors": anchors,
                        "intervention": intervention,
                        "pre": pre,
                        "post": post,
                    });
                    emit_json(&mut common.sink()?, &doc)?;
                    post
                }
            };
            if let Some(path) = metrics {
                post.write_csv(BufWriter::new(File::create(path)?))?;
            }
        }
        Command::Sweep { common, alphas, betas } => {
            let input = common.input()?;
            let sc = input.scenario.ok_or_else(|| bad_args("sweep needs --scenario: it scores a ground-truth region"))?;
            let cfg = common.config(input.trace.layers())?;
            let rows = run_sweep(&sc, &alphas, &betas, &cfg, common.tau, common.lambda_vis)?;
            write_sweep_csv(&rows, common.sink()?)?;
        }
        Command::Heatmap { common, layer, heads, row, grid } => {
            let out = common.require_out("heatmap")?.to_path_buf();
            let input = common.input()?;
            let t = &input.trace;
            let selector: HeadSelector = heads.parse()?;
            let layer = layer.unwrap_or(common.anchor_params(t.layers()).layers.l_mid);
            t.check_layer(layer)?;
            let p = profile(t, common.lambda_vis);
            let map = extract_saliency(t, layer, &selector.resolve(&p, layer), row.unwrap_or(t.layout().last_row()))?;
            let (rows, cols) = match grid {
                Some(g) => parse_grid(&g)?,
                None => square_grid(map.len()),
            };
            render_heatmap(&map.values, rows, cols, BufWriter::new(File::create(out)?))?;
        }
    }
    Ok(())
}

fn parse_grid(g: &str) -> std::result::Result<(usize, usize), Failure> {
    let (r, c) = g.split_once('x').ok_or_else(|| bad_args(format!("grid {g:?} is not ROWSxCOLS")))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad_args(format!("grid {g:?} is not ROWSxCOLS")));
    Ok((parse(r)?, parse(c)?))
}

fn simulate_toy(common: &Common, steps: usize) -> Outcome {
    let cfg = ToyModelConfig { seed: common.seed.unwrap_or(0), ..Default::default() };
    let model = ToyModel::init(cfg)?;
    let prompt = model.sample_prompt(1);
    let hook = GenerationHook {
        cfg: common.config(cfg.layers)?,
        anchors: common.anchor_params(cfg.layers),
        lambda_vis: common.lambda_vis,
    };
    let base = run_generation(&model, &prompt, steps, None)?;
    let hooked = run_generation(&model, &prompt, steps, Some(&hook))?;
    let first = base.tokens.iter().zip(&hooked.tokens).position(|(a, b)| a != b);
    let doc = serde_json::json!({
        "model": cfg,
        "config": hook.cfg,
        "prompt": prompt,
        "baseline_tokens": base.tokens,
        "intervened_tokens": hooked.tokens,
        "first_divergence": first,
        "anchors": hooked.anchors,
    });
    emit_json(&mut common.sink()?, &doc)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
