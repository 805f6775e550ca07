use std::path::PathBuf;

use preftree::loss::synthetic::{clusters, ClusterSpec};
use preftree::loss::{
    bt_loss, dpo_loss, dr_loss, kto_loss, nca_loss, train_toy_rm, Objective, PairLoss, PairSource,
};
use preftree::{LogRatio64, PrefExample64, TrainConfig64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Format, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// ultra, bt or dr.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-step reward trace (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    pub output: PathBuf,
}

#[derive(Debug, Serialize)]
struct KernelCheck {
    name: &'static str,
    shift_invariant: bool,
    max_shift_change: f64,
    fd_max_rel_err: f64,
}

#[derive(Debug, Serialize)]
struct Training {
    objective: String,
    steps: usize,
    pairs: usize,
    chosen_mean: f64,
    rejected_mean: f64,
    margin: f64,
    final_loss: f64,
    bias: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    training: Training,
    kernels: Vec<KernelCheck>,
}

type Kernel = Box<dyn Fn(f64, f64) -> PairLoss<f64>>;

fn kernels(cfg: &PipelineConfig) -> Vec<(&'static str, Kernel)> {
    let beta = cfg.losslab.beta;
    let lambda = cfg.losslab.lambda_ratio;
    vec![
        ("bt", Box::new(bt_loss)),
        ("dr", Box::new(dr_loss)),
        ("ultra", Box::new(|c, r| Objective::Ultra.pair_loss(PairSource::TreePipeline, c, r))),
        ("dpo", Box::new(move |c, r| dpo_loss(&LogRatio64::new(c, r), beta))),
        (
            "kto",
            Box::new(move |c, r| kto_loss(&LogRatio64::new(c, r), beta, lambda, 0.0).expect("lambda checked")),
        ),
        ("nca", Box::new(move |c, r| nca_loss(&LogRatio64::new(c, r), beta))),
    ]
}

const SHIFT: f64 = 1.5;
const SHIFT_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;

/// Largest change under a common shift of both inputs, and the worst
/// analytic-vs-central-difference gradient error.
fn check_kernel(f: &Kernel, points: &[(f64, f64)]) -> (f64, f64) {
    let mut shift = 0.0f64;
    let mut fd = 0.0f64;
    for &(c, r) in points {
        let base = f(c, r);
        shift = shift.max((f(c + SHIFT, r + SHIFT).loss - base.loss).abs());
        let num_c = (f(c + FD_STEP, r).loss - f(c - FD_STEP, r).loss) / (2.0 * FD_STEP);
        let num_r = (f(c, r + FD_STEP).loss - f(c, r - FD_STEP).loss) / (2.0 * FD_STEP);
        for (analytic, numeric) in [(base.d_chosen, num_c), (base.d_rejected, num_r)] {
            fd = fd.max((analytic - numeric).abs() / numeric.abs().max(1e-3));
        }
    }
    (shift, fd)
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let lab = &cfg.losslab;
    let name = args.objective.clone().unwrap_or_else(|| lab.objective.clone());
    let objective: Objective = name.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    let train_cfg = TrainConfig64 {
        beta: lab.beta,
        lambda_ratio: lab.lambda_ratio,
        learning_rate: lab.learning_rate,
        steps: args.steps.unwrap_or(lab.steps),
        seed: cfg.seed,
        objective,
        ..TrainConfig64::default()
    };
    train_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cli.dry_run {
        log::info!("losslab configuration valid");
        return Ok(Status::Clean);
    }

    let data: Vec<PrefExample64> = clusters(&ClusterSpec {
        n: lab.pairs,
        dim: lab.dim,
        separation: lab.separation,
        noise: lab.noise,
        bias_feature: false,
        source: PairSource::TreePipeline,
        seed: cfg.seed,
    });
    let (params, trace) = train_toy_rm(&data, &train_cfg).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(path) = &args.trace {
        io::write_text(path, &trace.to_csv())?;
    }
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<(f64, f64)> =
        (0..lab.fd_points.max(1)).map(|_| (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
    let checks = kernels(cfg)
        .iter()
        .map(|(name, f)| {
            let (shift, fd) = check_kernel(f, &points);
            KernelCheck { name, shift_invariant: shift <= SHIFT_TOL, max_shift_change: shift, fd_max_rel_err: fd }
        })
        .collect();

    let report = Report {
        training: Training {
            objective: name,
            steps: trace.len(),
            pairs: data.len(),
            chosen_mean: last(&trace.chosen_mean),
            rejected_mean: last(&trace.rejected_mean),
            margin: last(&trace.margin),
            final_loss: last(&trace.loss),
            bias: params.b,
        },
        kernels: checks,
    };
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serialize") + "\n",
        Format::Table => render(&report),
    };
    io::write_text(&args.output, &text)?;
    Ok(Status::Clean)
}

fn render(r: &Report) -> String {
    let t = &r.training;
    let mut s = format!(
        "objective      {}\nsteps          {}\npairs          {}\nchosen_mean    {:.6}\nrejected_mean  {:.6}\nmargin         {:.6}\nfinal_loss     {:.6}\nbias           {:.6}\n\n",
        t.objective, t.steps, t.pairs, t.chosen_mean, t.rejected_mean, t.margin, t.final_loss, t.bias
    );
    s.push_str(&format!("{:<6} {:>15} {:>17} {:>15}\n", "loss", "shift_invariant", "max_shift_change", "fd_max_rel_err"));
    for k in &r.kernels {
        s.push_str(&format!(
            "{:<6} {:>15} {:>17.3e} {:>15.3e}\n",
            k.name, k.shift_invariant, k.max_shift_change, k.fd_max_rel_err
        ));
    }
    s
}
